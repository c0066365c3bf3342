//! Training loops: float teachers, quantized distillation (end-to-end and
//! fine-tuning) and evaluation.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use crate::autodiff::Graph;
use crate::data::{batches, Batch, DatasetHandle};
use crate::error::{Error, Result};
use crate::ffa::{derive_seed, sample_sketch};
use crate::losses::{faqd_loss, nll_loss, FaRoute, KdKind, LossBreakdown, LossConfig};
use crate::models::{Mode, Network, ParamKind, QuantMode};
use crate::quantizers::{relax_schedule_step, QuantizedLayerState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    EndToEnd,
    FineTune,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64, weight_decay: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self::Sgd { lr: 0.1, momentum: 0.9, weight_decay: 5e-4 }
    }

    pub fn adam() -> Self {
        Self::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr, .. } | Self::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(mut self, new: f64) -> Self {
        match &mut self {
            Self::Sgd { lr, .. } | Self::Adam { lr, .. } => *lr = new,
        }
        self
    }

    fn weight_decay(&self) -> f64 {
        match *self {
            Self::Sgd { weight_decay, .. } | Self::Adam { weight_decay, .. } => weight_decay,
        }
    }
}

/// Which evaluation of the affinity term to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaRouteChoice {
    /// Exact for teacher taps with `H <= 32`, `k = 10` sketches above.
    Auto,
    Exact,
    Sketched { k: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub quant_mode: QuantMode,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Cosine decay of the learning rate to zero over the whole run.
    pub cosine: bool,
    pub seed: u64,
    pub fa_route: FaRouteChoice,
    /// Caps the number of batches per epoch (desk-scale runs).
    pub max_batches_per_epoch: Option<usize>,
}

impl TrainConfig {
    /// Defaults for training from scratch: MSE distillation with SGD.
    pub fn end_to_end(loss: LossConfig) -> Self {
        Self {
            mode: TrainMode::EndToEnd,
            quant_mode: QuantMode::Qat,
            loss: LossConfig { kd_kind: KdKind::Mse, ..loss },
            optimizer: OptimizerConfig::sgd(),
            epochs: 30,
            batch_size: 128,
            cosine: true,
            seed: 0,
            fa_route: FaRouteChoice::Auto,
            max_batches_per_epoch: None,
        }
    }

    /// Defaults for fine-tuning a float student: KL distillation with Adam.
    pub fn fine_tune(loss: LossConfig) -> Self {
        Self {
            mode: TrainMode::FineTune,
            loss: LossConfig { kd_kind: KdKind::Kl, ..loss },
            optimizer: OptimizerConfig::adam(),
            ..Self::end_to_end(loss)
        }
    }

    /// Validates the configuration and lists departures from the usual
    /// pairing (end-to-end with MSE and SGD, fine-tuning with KL and Adam).
    pub fn check(&self) -> Result<Vec<String>> {
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.optimizer.lr() >= 0.0) {
            return Err(Error::Config(format!("learning rate must be nonnegative, got {}", self.optimizer.lr())));
        }
        if let QuantMode::BinaryRelax { lambda, eta } = self.quant_mode {
            if !(lambda >= 0.0) || !(eta > 1.0) {
                return Err(Error::Config(format!("BinaryRelax needs lambda >= 0 and eta > 1 (got {lambda}, {eta})")));
            }
        }
        if let FaRouteChoice::Sketched { k: 0 } = self.fa_route {
            return Err(Error::Config("sketch size k must be positive".into()));
        }
        let mut warnings = Vec::new();
        let sgd = matches!(self.optimizer, OptimizerConfig::Sgd { .. });
        match self.mode {
            TrainMode::EndToEnd => {
                if self.loss.kd_kind != KdKind::Mse || !sgd {
                    warnings.push("end-to-end training usually pairs MSE distillation with SGD".into());
                }
            }
            TrainMode::FineTune => {
                if self.loss.kd_kind != KdKind::Kl || sgd {
                    warnings.push("fine-tuning usually pairs KL distillation with Adam".into());
                }
            }
        }
        Ok(warnings)
    }
}

/// One row of training metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of the unweighted terms and of the weighted total.
    pub loss: LossBreakdown,
    /// BinaryRelax lambda in effect during the epoch (0 for hard projection).
    pub lambda: f64,
    pub act_scales: Vec<f64>,
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
}

pub const METRICS_HEADER: &str = "epoch,kd,fa,gt,total,lambda,act_scales,test_accuracy";

impl Metrics {
    /// CSV with [`METRICS_HEADER`]; wall-clock time is left out so reruns
    /// produce identical bytes (see [`Metrics::timing_csv`]).
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            let scales: Vec<String> = r.act_scales.iter().map(|a| format!("{a:.9e}")).collect();
            let acc = r.test_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{}",
                r.epoch,
                r.loss.kd,
                r.loss.fa,
                r.loss.gt,
                r.loss.total,
                r.lambda,
                scales.join(";"),
                acc
            );
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:.3}", r.epoch, r.seconds);
        }
        s
    }
}

/// One projected-gradient step on a single layer: the gradient taken at the
/// forward weights `u` updates the shadow weights `w`, then `u` is
/// recomputed.
pub fn qat_update_step<T: Scalar>(state: &QuantizedLayerState<T>, grad_at_u: &Tensor<T>, lr: T) -> Result<QuantizedLayerState<T>> {
    if grad_at_u.shape() != state.w.shape() {
        return Err(Error::Shape {
            op: "qat_update_step",
            detail: format!("gradient {:?} vs weights {:?}", grad_at_u.shape(), state.w.shape()),
        });
    }
    let mut next = state.clone();
    let delta: Vec<T> = grad_at_u.data().iter().map(|&g| lr * g).collect();
    next.apply_update(&delta)?;
    Ok(next)
}

struct OptState<T> {
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> OptState<T> {
    fn new<U: Scalar>(net: &Network<U>) -> Self {
        let zeros: Vec<Vec<T>> = net.params().iter().map(|p| vec![T::zero(); p.shadow().numel()]).collect();
        Self { first: zeros.clone(), second: zeros, steps: 0 }
    }

    fn delta(&mut self, cfg: &OptimizerConfig, lr: f64, idx: usize, weights: &[T], grad: &[T], decay: bool) -> Vec<T> {
        let wd = if decay { T::lit(cfg.weight_decay()) } else { T::zero() };
        let lr = T::lit(lr);
        match *cfg {
            OptimizerConfig::Sgd { momentum, .. } => {
                let mu = T::lit(momentum);
                let buf = &mut self.first[idx];
                buf.iter_mut()
                    .zip(grad.iter().zip(weights))
                    .map(|(b, (&g, &w))| {
                        *b = mu * *b + g + wd * w;
                        lr * *b
                    })
                    .collect()
            }
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                let t = self.steps as i32;
                let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                let c1 = T::one() - T::lit(beta1.powi(t));
                let c2 = T::one() - T::lit(beta2.powi(t));
                let eps = T::lit(eps);
                let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
                m.iter_mut()
                    .zip(v.iter_mut())
                    .zip(grad.iter().zip(weights))
                    .map(|((m, v), (&g, &w))| {
                        let g = g + wd * w;
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        lr * (*m / c1) / ((*v / c2).sqrt() + eps)
                    })
                    .collect()
            }
        }
    }
}

/// Per-batch hook information.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub epoch: usize,
    pub batch: usize,
    pub global_step: usize,
    pub loss: LossBreakdown,
}

const MIN_ACT_SCALE: f64 = 1e-4;

/// Stateful training driver. A teacher turns it into distillation; without
/// one it trains on labels alone.
pub struct Trainer<'a, T: Scalar> {
    teacher: Option<&'a Network<T>>,
    student: Network<T>,
    cfg: TrainConfig,
    opt: OptState<T>,
    global_step: usize,
    total_steps: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(teacher: Option<&'a Network<T>>, mut student: Network<T>, cfg: TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        cfg.check()?;
        if let Some(t) = teacher {
            if t.spec().tap_count() != student.spec().tap_count() {
                return Err(Error::Config(format!(
                    "teacher has {} taps but student has {}",
                    t.spec().tap_count(),
                    student.spec().tap_count()
                )));
            }
            if t.spec().classes != student.spec().classes {
                return Err(Error::Config("teacher and student disagree on the number of classes".into()));
            }
            if cfg.loss.beta > 0.0 && cfg.loss.tap_count != student.spec().tap_count() {
                return Err(Error::Config(format!(
                    "loss expects {} taps, networks provide {}",
                    cfg.loss.tap_count,
                    student.spec().tap_count()
                )));
            }
        }
        student.set_quant_mode(cfg.quant_mode)?;
        let opt = OptState::new(&student);
        let total_steps = cfg_total(steps_per_epoch, &cfg);
        Ok(Self { teacher, student, cfg, opt, global_step: 0, total_steps })
    }

    pub fn student(&self) -> &Network<T> {
        &self.student
    }

    pub fn into_student(self) -> Network<T> {
        self.student
    }

    fn current_lr(&self) -> f64 {
        let base = self.cfg.optimizer.lr();
        if !self.cfg.cosine || self.total_steps == 0 {
            return base;
        }
        let progress = (self.global_step as f64 / self.total_steps as f64).min(1.0);
        0.5 * base * (1.0 + (PI * progress).cos())
    }

    /// One forward/backward/update on a batch.
    pub fn step(&mut self, batch: &Batch<T>, epoch: usize, batch_idx: usize) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let x = g.constant(batch.x.clone());
        let fwd = self.student.forward(&mut g, x, Mode::Train, true)?;
        let labels = batch.labels.as_deref();

        let (loss, breakdown) = match self.teacher {
            Some(teacher) => {
                let (t_logits, t_taps) = teacher.forward_values(&batch.x)?;
                let sketches = self.sketches(&t_taps, epoch, batch_idx)?;
                let route = match &sketches {
                    Some(s) => FaRoute::Sketched(s),
                    None => FaRoute::Exact,
                };
                let labels = if self.cfg.loss.label_free { None } else { labels };
                faqd_loss(&mut g, &t_logits, fwd.logits, &t_taps, &fwd.taps, labels, &self.cfg.loss, route)?
            }
            None => {
                let labels = labels.ok_or_else(|| Error::Input("supervised training needs labels".into()))?;
                let nll = nll_loss(&mut g, fwd.logits, labels)?;
                let v = g.value(nll).item().as_f64();
                (nll, LossBreakdown { gt: v, total: v, ..Default::default() })
            }
        };
        for (name, v) in [("kd", breakdown.kd), ("fa", breakdown.fa), ("gt", breakdown.gt), ("total", breakdown.total)] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "{name} loss became {v} at epoch {epoch}, batch {batch_idx}"
                )));
            }
        }

        g.backward_scalar(loss)?;
        self.opt.steps += 1;
        let lr = self.current_lr();
        for (idx, var) in fwd.param_vars.iter().enumerate() {
            let Some(var) = var else { continue };
            let Some(grad) = g.grad(*var) else { continue };
            let p = &mut self.student.params_mut()[idx];
            if !p.kind.trainable() {
                continue;
            }
            if !grad.is_finite() {
                return Err(Error::Numerical(format!(
                    "gradient of {} is not finite at epoch {epoch}, batch {batch_idx}",
                    p.name
                )));
            }
            let delta = self.opt.delta(&self.cfg.optimizer, lr, idx, p.shadow().data(), grad.data(), p.kind.is_weight());
            p.apply_update(&delta)?;
            if p.kind == ParamKind::ActScale {
                if let crate::models::ParamData::Float(t) = &mut p.data {
                    let floor = T::lit(MIN_ACT_SCALE);
                    t.data_mut().iter_mut().for_each(|a| *a = a.max(floor));
                }
            }
        }
        self.student.update_running_stats(&fwd.bn_stats);
        self.global_step += 1;
        Ok(breakdown)
    }

    fn sketches(&self, teacher_taps: &[Tensor<T>], epoch: usize, batch_idx: usize) -> Result<Option<Vec<crate::ffa::SketchMatrix<T>>>> {
        if self.cfg.loss.beta == 0.0 {
            return Ok(None);
        }
        let k = match self.cfg.fa_route {
            FaRouteChoice::Exact => return Ok(None),
            FaRouteChoice::Sketched { k } => k,
            FaRouteChoice::Auto => {
                if teacher_taps.iter().all(|t| t.shape()[2] <= 32) {
                    return Ok(None);
                }
                10
            }
        };
        teacher_taps
            .iter()
            .enumerate()
            .map(|(l, t)| {
                let n = t.shape()[2] * t.shape()[3];
                let seed = derive_seed(self.cfg.seed, epoch as u64, batch_idx as u64, l as u64);
                sample_sketch(n, k, seed)
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn lambda(&self) -> f64 {
        self.student.params().iter().find_map(|p| p.quant()).map(|q| q.lambda.as_f64()).unwrap_or(0.0)
    }

    /// Runs one epoch, optionally calling `hook` after every step.
    pub fn train_epoch(
        &mut self,
        data: &DatasetHandle,
        epoch: usize,
        eval: Option<&DatasetHandle>,
        hook: &mut dyn FnMut(&StepInfo, &Network<T>),
    ) -> Result<EpochRecord> {
        let start = Instant::now();
        let lambda = self.lambda();
        let drop_labels = self.teacher.is_some() && self.cfg.loss.label_free;
        let limit = self.cfg.max_batches_per_epoch.unwrap_or(usize::MAX);
        let mut sums = LossBreakdown::default();
        let mut count = 0usize;
        for (b, batch) in batches::<T>(data, self.cfg.batch_size, Some(self.cfg.seed), epoch as u64, drop_labels)?
            .take(limit)
            .enumerate()
        {
            let batch = batch?;
            if epoch == 0 && b == 0 && self.global_step == 0 && self.student.spec().act_bits != 32 {
                self.student.calibrate_activations(&batch.x)?;
            }
            let l = self.step(&batch, epoch, b)?;
            sums.kd += l.kd;
            sums.fa += l.fa;
            sums.gt += l.gt;
            sums.total += l.total;
            count += 1;
            hook(&StepInfo { epoch, batch: b, global_step: self.global_step, loss: l }, &self.student);
        }
        if count == 0 {
            return Err(Error::Input("training set produced no batches".into()));
        }
        let n = count as f64;
        let loss = LossBreakdown { kd: sums.kd / n, fa: sums.fa / n, gt: sums.gt / n, total: sums.total / n };

        if matches!(self.cfg.quant_mode, QuantMode::BinaryRelax { .. }) {
            for p in self.student.params_mut() {
                if let Some(q) = p.quant_mut() {
                    *q = relax_schedule_step(q)?;
                }
            }
        }
        let test_accuracy = match eval {
            Some(e) => Some(evaluate(&self.student, e, self.cfg.batch_size)?),
            None => None,
        };
        let act_scales = self.student.act_scales().iter().map(|a| a.as_f64()).collect();
        Ok(EpochRecord { epoch, loss, lambda, act_scales, test_accuracy, seconds: start.elapsed().as_secs_f64() })
    }
}

fn cfg_total(steps_per_epoch: usize, cfg: &TrainConfig) -> usize {
    let per = cfg.max_batches_per_epoch.map_or(steps_per_epoch, |m| m.min(steps_per_epoch));
    per * cfg.epochs
}

/// Batches per epoch, counting the final partial batch.
pub fn steps_per_epoch(data: &DatasetHandle, batch_size: usize) -> usize {
    data.len().div_ceil(batch_size.max(1))
}

/// Distils `teacher` into `student`. The teacher is only ever evaluated in
/// inference mode and is never modified.
pub fn distill_train<T: Scalar>(
    teacher: &Network<T>,
    student: Network<T>,
    data: &DatasetHandle,
    cfg: &TrainConfig,
    eval: Option<&DatasetHandle>,
) -> Result<(Network<T>, Metrics)> {
    run(Some(teacher), student, data, cfg, eval, &mut |_, _| {})
}

/// Distillation with a per-step observer.
pub fn distill_train_with_hook<T: Scalar>(
    teacher: &Network<T>,
    student: Network<T>,
    data: &DatasetHandle,
    cfg: &TrainConfig,
    eval: Option<&DatasetHandle>,
    hook: &mut dyn FnMut(&StepInfo, &Network<T>),
) -> Result<(Network<T>, Metrics)> {
    run(Some(teacher), student, data, cfg, eval, hook)
}

/// Plain supervised training (negative log-likelihood) of a float network.
pub fn train_supervised<T: Scalar>(
    net: Network<T>,
    data: &DatasetHandle,
    cfg: &TrainConfig,
    eval: Option<&DatasetHandle>,
) -> Result<(Network<T>, Metrics)> {
    run(None, net, data, cfg, eval, &mut |_, _| {})
}

fn run<T: Scalar>(
    teacher: Option<&Network<T>>,
    student: Network<T>,
    data: &DatasetHandle,
    cfg: &TrainConfig,
    eval: Option<&DatasetHandle>,
    hook: &mut dyn FnMut(&StepInfo, &Network<T>),
) -> Result<(Network<T>, Metrics)> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut trainer = Trainer::new(teacher, student, cfg.clone(), steps_per_epoch(data, cfg.batch_size))?;
    let mut metrics = Metrics::default();
    for epoch in 0..cfg.epochs {
        metrics.records.push(trainer.train_epoch(data, epoch, eval, hook)?);
    }
    Ok((trainer.into_student(), metrics))
}

/// Top-1 accuracy in inference mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &DatasetHandle, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for batch in batches::<T>(data, batch_size, None, 0, false)? {
        let batch = batch?;
        let (logits, _) = net.forward_values(&batch.x)?;
        let labels = batch.labels.as_ref().ok_or_else(|| Error::Input("evaluation needs labels".into()))?;
        correct += predictions(&logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Row-wise argmax (first maximum wins).
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.shape()[logits.ndim() - 1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
