//! TOML run configuration. Every table and key is optional; unknown keys are
//! rejected. See `configs/example.toml` for the full schema.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use faqd_core::data::{
    load_cifar_binary, synthetic_dataset, Augmentation, DatasetHandle, Normalization, SyntheticSpec,
};
use faqd_core::losses::{KdKind, LossConfig};
use faqd_core::models::{NetSpec, QuantMode};
use faqd_core::trainer::{FaRouteChoice, OptimizerConfig, TrainConfig};
use serde::Deserialize;

use crate::UsageError;

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub teacher: NetSection,
    pub student: NetSection,
    pub train: TrainSection,
    pub loss: LossSection,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    #[default]
    Synthetic,
    Cifar,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataKind,
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    pub cifar_dir: Option<PathBuf>,
    /// Training items kept per class (CIFAR only; all when unset).
    pub per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub seed: u64,
    pub train_n: usize,
    pub test_n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub margin: f64,
    pub augment: bool,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for DataSection {
    fn default() -> Self {
        let norm = Normalization::cifar10();
        Self {
            source: DataKind::Synthetic,
            cifar_dir: None,
            per_class: None,
            test_per_class: None,
            seed: 0,
            train_n: 2000,
            test_n: 500,
            classes: 10,
            image_size: 16,
            margin: 1.0,
            augment: false,
            mean: norm.mean,
            std: norm.std,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub name: Option<String>,
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    #[default]
    End2end,
    Finetune,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum QuantArg {
    #[default]
    Qat,
    BinaryRelax,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: ModeArg,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Option<OptimizerArg>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub cosine: bool,
    pub quant_mode: QuantArg,
    pub lambda0: f64,
    pub eta: f64,
    /// 0 selects the exact affinity loss; unset picks by map size.
    pub ffa_k: Option<usize>,
    pub max_batches_per_epoch: Option<usize>,
    /// Score the test split after every epoch.
    pub eval_every_epoch: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: ModeArg::End2end,
            epochs: 30,
            batch_size: 128,
            optimizer: None,
            lr: None,
            momentum: None,
            weight_decay: None,
            cosine: true,
            quant_mode: QuantArg::Qat,
            lambda0: 1.0,
            eta: 1.5,
            ffa_k: None,
            max_batches_per_epoch: None,
            eval_every_epoch: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Faqd,
    Qd,
    LabelFree,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum KdArg {
    Mse,
    Kl,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub objective: Objective,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub kd: Option<KdArg>,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    fn net_spec(&self, sec: &NetSection, default_name: &str, default_wbits: u32) -> Result<NetSpec> {
        let name = sec.name.as_deref().unwrap_or(default_name);
        let spec = NetSpec::from_name(name, self.data.classes_resolved())?;
        Ok(spec.with_bits(sec.weight_bits.unwrap_or(default_wbits), sec.act_bits.unwrap_or(32))?)
    }

    /// Float teacher network; quantized teachers are refused.
    pub fn teacher_spec(&self) -> Result<NetSpec> {
        let spec = self.net_spec(&self.teacher, "resnet-tiny-20", 32)?;
        if spec.weight_bits != 32 || spec.act_bits != 32 {
            return Err(usage(format!(
                "teacher must be float (got weight_bits={}, act_bits={})",
                spec.weight_bits, spec.act_bits
            )));
        }
        Ok(spec)
    }

    pub fn student_spec(&self) -> Result<NetSpec> {
        self.net_spec(&self.student, "resnet-tiny-8", 4)
    }

    pub fn loss_config(&self, tap_count: usize) -> Result<LossConfig> {
        let l = &self.loss;
        let mode_kd = match self.train.mode {
            ModeArg::End2end => KdKind::Mse,
            ModeArg::Finetune => KdKind::Kl,
        };
        let kd = l.kd.map(|k| match k {
            KdArg::Mse => KdKind::Mse,
            KdArg::Kl => KdKind::Kl,
        });
        let cfg = match l.objective {
            Objective::Faqd => LossConfig {
                alpha: l.alpha.unwrap_or(1.0),
                beta: l.beta.unwrap_or(1.0),
                gamma: l.gamma.unwrap_or(0.5),
                kd_kind: kd.unwrap_or(mode_kd),
                label_free: false,
                tap_count,
            },
            Objective::Qd => {
                if l.beta.is_some_and(|b| b != 0.0) {
                    return Err(usage("the qd objective has no affinity term; leave loss.beta unset"));
                }
                let alpha = l.alpha.unwrap_or(0.5);
                LossConfig {
                    gamma: l.gamma.unwrap_or(1.0 - alpha),
                    kd_kind: kd.unwrap_or(KdKind::Kl),
                    tap_count,
                    ..LossConfig::qd(alpha)
                }
            }
            Objective::LabelFree => {
                if l.gamma.is_some_and(|g| g != 0.0) {
                    return Err(usage("the label-free objective has no label term; leave loss.gamma unset"));
                }
                LossConfig {
                    kd_kind: kd.unwrap_or(KdKind::Mse),
                    tap_count,
                    ..LossConfig::label_free(l.alpha.unwrap_or(1.0), l.beta.unwrap_or(1.0))
                }
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, loss: LossConfig) -> Result<TrainConfig> {
        let t = &self.train;
        let mut cfg = match t.mode {
            ModeArg::End2end => TrainConfig::end_to_end(loss),
            ModeArg::Finetune => TrainConfig::fine_tune(loss),
        };
        cfg.loss = loss;
        cfg.optimizer = match t.optimizer {
            Some(OptimizerArg::Sgd) => OptimizerConfig::sgd(),
            Some(OptimizerArg::Adam) => OptimizerConfig::adam(),
            None => cfg.optimizer,
        };
        if let Some(lr) = t.lr {
            cfg.optimizer = cfg.optimizer.with_lr(lr);
        }
        match &mut cfg.optimizer {
            OptimizerConfig::Sgd { momentum, weight_decay, .. } => {
                *momentum = t.momentum.unwrap_or(*momentum);
                *weight_decay = t.weight_decay.unwrap_or(*weight_decay);
            }
            OptimizerConfig::Adam { weight_decay, .. } => {
                if t.momentum.is_some() {
                    return Err(usage("train.momentum applies to sgd only"));
                }
                *weight_decay = t.weight_decay.unwrap_or(*weight_decay);
            }
        }
        cfg.epochs = t.epochs;
        cfg.batch_size = t.batch_size;
        cfg.cosine = t.cosine;
        cfg.seed = self.seed;
        cfg.quant_mode = match t.quant_mode {
            QuantArg::Qat => QuantMode::Qat,
            QuantArg::BinaryRelax => QuantMode::BinaryRelax { lambda: t.lambda0, eta: t.eta },
        };
        cfg.fa_route = match t.ffa_k {
            None => FaRouteChoice::Auto,
            Some(0) => FaRouteChoice::Exact,
            Some(k) => FaRouteChoice::Sketched { k },
        };
        cfg.max_batches_per_epoch = t.max_batches_per_epoch;
        Ok(cfg)
    }

    /// Training and test splits.
    pub fn datasets(&self) -> Result<(DatasetHandle, DatasetHandle)> {
        let d = &self.data;
        let (train, test) = match d.source {
            DataKind::Synthetic => {
                let spec = SyntheticSpec {
                    margin: d.margin,
                    ..SyntheticSpec::new(d.seed, d.train_n + d.test_n, d.classes, (3, d.image_size, d.image_size))
                };
                synthetic_dataset(&spec)?.split_at(d.train_n)?
            }
            DataKind::Cifar => {
                let dir = d.cifar_dir.as_ref().ok_or_else(|| usage("data.source = \"cifar\" needs data.cifar_dir"))?;
                let norm = Normalization { mean: d.mean.clone(), std: d.std.clone() };
                let train_files: Vec<PathBuf> =
                    (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).filter(|p| p.exists()).collect();
                let test_file = dir.join("test_batch.bin");
                if train_files.is_empty() || !test_file.exists() {
                    return Err(usage(format!(
                        "{} must contain data_batch_N.bin and test_batch.bin",
                        dir.display()
                    )));
                }
                let mut train = load_cifar_binary(&train_files, &norm).context("loading CIFAR-10 training batches")?;
                let mut test = load_cifar_binary(&[test_file], &norm).context("loading CIFAR-10 test batch")?;
                if let Some(k) = d.per_class {
                    train = train.first_n_per_class(k)?;
                }
                if let Some(k) = d.test_per_class {
                    test = test.first_n_per_class(k)?;
                }
                (train, test)
            }
        };
        let train = if d.augment { train.with_augmentation(Augmentation::standard()) } else { train };
        Ok((train, test))
    }
}

impl DataSection {
    fn classes_resolved(&self) -> usize {
        match self.source {
            DataKind::Synthetic => self.classes,
            DataKind::Cifar => faqd_core::data::CIFAR_CLASSES,
        }
    }
}
