use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use faqd_core::data::DatasetHandle;
use faqd_core::losses::LossConfig;
use faqd_core::models::{build_network, load_checkpoint, save_checkpoint, Network};
use faqd_core::trainer::{evaluate, steps_per_epoch, Metrics, TrainConfig, Trainer};
use faqd_core::verify::{
    run_argmin_demo, run_jl_check, run_scaling_bench, run_tail_decay, run_unbiasedness, VerifyReport, SUITES,
};

use crate::config::{ModeArg, Objective, RunConfig};
use crate::{BenchArgs, Command, CommonArgs, DistillArgs, TrainTeacherArgs, UsageError, VerifyArgs};

const EVAL_BATCH: usize = 256;

pub enum Outcome {
    Success,
    VerifyFailed,
}

pub fn dispatch(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::TrainTeacher(a) => train_teacher(a),
        Command::Distill(a) => distill(a),
        Command::BenchFfa(a) => bench_ffa(a),
        Command::Verify(a) => verify(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = common.batch_size {
        cfg.train.batch_size = b;
    }
    if common.lr.is_some() {
        cfg.train.lr = common.lr;
    }
    if common.max_batches.is_some() {
        cfg.train.max_batches_per_epoch = common.max_batches;
    }
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.output_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    Ok(out)
}

/// Prints a line to stdout; a closed pipe (`faqd ... | head`) is not an error.
fn say(line: impl std::fmt::Display) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Trains epoch by epoch, logging one line per epoch to stderr.
fn run_epochs(
    label: &str,
    teacher: Option<&Network<f32>>,
    net: Network<f32>,
    train: &DatasetHandle,
    test: &DatasetHandle,
    cfg: &TrainConfig,
    eval_every_epoch: bool,
) -> Result<(Network<f32>, Metrics)> {
    for w in cfg.check()? {
        eprintln!("warning: {w}");
    }
    let mut trainer = Trainer::new(teacher, net, cfg.clone(), steps_per_epoch(train, cfg.batch_size))?;
    let mut metrics = Metrics::default();
    let eval = eval_every_epoch.then_some(test);
    for epoch in 0..cfg.epochs {
        let rec = trainer.train_epoch(train, epoch, eval, &mut |_, _| {})?;
        let acc = rec.test_accuracy.map(|a| format!(" test_acc {a:.4}")).unwrap_or_default();
        eprintln!(
            "[{label}] epoch {}/{}: total {:.5} (kd {:.5}, fa {:.5}, gt {:.5}){acc} in {:.1}s",
            epoch + 1,
            cfg.epochs,
            rec.loss.total,
            rec.loss.kd,
            rec.loss.fa,
            rec.loss.gt,
            rec.seconds
        );
        metrics.records.push(rec);
    }
    Ok((trainer.into_student(), metrics))
}

fn save_run(out: &Path, prefix: &str, net: &Network<f32>, metrics: &Metrics) -> Result<PathBuf> {
    let ckpt = out.join(format!("{prefix}.ckpt"));
    save_checkpoint(net, &ckpt).with_context(|| format!("saving {}", ckpt.display()))?;
    write(&out.join(format!("{prefix}_metrics.csv")), &metrics.to_csv())?;
    write(&out.join(format!("{prefix}_timing.csv")), &metrics.timing_csv())?;
    Ok(ckpt)
}

fn train_teacher(args: TrainTeacherArgs) -> Result<Outcome> {
    let mut cfg = load_config(&args.common)?;
    if args.bits.is_some() {
        cfg.teacher.weight_bits = args.bits;
    }
    if args.net.is_some() {
        cfg.teacher.name = args.net.clone();
    }
    let spec = cfg.teacher_spec()?;
    // the teacher always trains from scratch with label supervision
    cfg.train.mode = ModeArg::End2end;
    let tcfg = cfg.train_config(LossConfig { tap_count: spec.tap_count(), ..LossConfig::default() })?;
    let (train, test) = cfg.datasets()?;
    let out = prepare_out(&cfg)?;
    let net = build_network::<f32>(&spec, cfg.seed)?;
    let (net, metrics) = run_epochs("teacher", None, net, &train, &test, &tcfg, cfg.train.eval_every_epoch)?;
    let ckpt = save_run(&out, "teacher", &net, &metrics)?;
    let acc = evaluate(&net, &test, EVAL_BATCH)?;
    say(format_args!("teacher {}: test accuracy {acc:.4}; checkpoint {}", spec.name, ckpt.display()));
    Ok(Outcome::Success)
}

fn load_float(path: &Path, role: &str) -> Result<Network<f32>> {
    if !path.is_file() {
        return Err(usage(format!("{role} checkpoint {} not found", path.display())));
    }
    let net = load_checkpoint::<f32>(path).with_context(|| format!("loading {role} checkpoint {}", path.display()))?;
    if net.spec().weight_bits != 32 || net.spec().act_bits != 32 {
        return Err(usage(format!("{role} must be float, {} is quantized", path.display())));
    }
    Ok(net)
}

fn distill(args: DistillArgs) -> Result<Outcome> {
    let mut cfg = load_config(&args.common)?;
    if args.bits.is_some() {
        cfg.student.weight_bits = args.bits;
    }
    if args.act_bits.is_some() {
        cfg.student.act_bits = args.act_bits;
    }
    if let Some(m) = args.mode {
        cfg.train.mode = m;
    }
    if let Some(l) = args.loss {
        cfg.loss.objective = l;
    }
    if args.ffa_k.is_some() {
        cfg.train.ffa_k = args.ffa_k;
    }
    if let Some(q) = args.quant_mode {
        cfg.train.quant_mode = q;
    }
    if args.teacher.is_some() {
        cfg.teacher.checkpoint = args.teacher.clone();
    }
    if args.student.is_some() {
        cfg.student.checkpoint = args.student.clone();
    }

    let spec = cfg.student_spec()?;
    let teacher_path = cfg.teacher.checkpoint.clone().unwrap_or_else(|| cfg.output_dir().join("teacher.ckpt"));
    let teacher = load_float(&teacher_path, "teacher")?;
    let student = match cfg.train.mode {
        ModeArg::End2end => build_network::<f32>(&spec, cfg.seed)?,
        ModeArg::Finetune => {
            let path = cfg
                .student
                .checkpoint
                .clone()
                .ok_or_else(|| usage("fine-tuning needs a float student checkpoint (--student)"))?;
            let float = load_float(&path, "student")?;
            if float.spec().depth != spec.depth || float.spec().classes != spec.classes {
                return Err(usage(format!(
                    "student checkpoint is {} with {} classes, config asks for {} with {}",
                    float.spec().name,
                    float.spec().classes,
                    spec.name,
                    spec.classes
                )));
            }
            float.requantize(spec.weight_bits, spec.act_bits)?
        }
    };
    let loss = cfg.loss_config(spec.tap_count())?;
    let tcfg = cfg.train_config(loss)?;
    let (train, test) = cfg.datasets()?;
    // label-free runs get a handle that has no labels to read at all
    let train_view = if loss.label_free { train.without_labels() } else { train.clone() };
    let out = prepare_out(&cfg)?;
    let (net, metrics) = run_epochs("student", Some(&teacher), student, &train_view, &test, &tcfg, cfg.train.eval_every_epoch)?;
    let ckpt = save_run(&out, "student", &net, &metrics)?;
    let acc = evaluate(&net, &test, EVAL_BATCH)?;
    let objective = match cfg.loss.objective {
        Objective::Faqd => "faqd",
        Objective::Qd => "qd",
        Objective::LabelFree => "label-free",
    };
    say(format_args!(
        "student {} ({}W{}A, {objective}): test accuracy {acc:.4}; training label reads {}; checkpoint {}",
        spec.name,
        spec.weight_bits,
        spec.act_bits,
        train.label_reads(),
        ckpt.display()
    ));
    Ok(Outcome::Success)
}

fn doubling(hmin: usize, hmax: usize) -> Result<Vec<usize>> {
    if hmin == 0 || hmax < hmin {
        return Err(usage(format!("need 0 < hmin <= hmax (got {hmin}, {hmax})")));
    }
    let mut hs = vec![hmin];
    while hs[hs.len() - 1] * 2 <= hmax {
        hs.push(hs[hs.len() - 1] * 2);
    }
    Ok(hs)
}

fn finish(report: &VerifyReport, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("{}.csv", report.suite));
    report.save(&path).with_context(|| format!("writing {}", path.display()))?;
    say(report.summary());
    say(format_args!("report: {}", path.display()));
    Ok(if report.passed { Outcome::Success } else { Outcome::VerifyFailed })
}

fn bench_ffa(a: BenchArgs) -> Result<Outcome> {
    let report = run_scaling_bench(&doubling(a.hmin, a.hmax)?, a.c, a.k, a.repeats, a.seed)?;
    finish(&report, &a.out)
}

fn verify(a: VerifyArgs) -> Result<Outcome> {
    let pow2 = |max: usize| (0..).map(|e| 1usize << e).take_while(|&k| k <= max).collect::<Vec<_>>();
    let report = match a.suite.as_str() {
        "jl" => run_jl_check(a.n.unwrap_or(64), a.d.unwrap_or(512), a.eps.unwrap_or(0.5), a.trials.unwrap_or(100), a.seed)?,
        "unbiased" => run_unbiasedness(a.n.unwrap_or(64), a.c.unwrap_or(8), a.samples.unwrap_or(10_000), a.seed)?,
        "tail" => run_tail_decay(
            a.n.unwrap_or(64),
            a.c.unwrap_or(8),
            a.eps,
            &a.k_list.clone().unwrap_or_else(|| pow2(64)),
            a.trials.unwrap_or(2000),
            a.seed,
        )?,
        "scaling" => run_scaling_bench(
            &doubling(a.hmin.unwrap_or(8), a.hmax.unwrap_or(128))?,
            a.c.unwrap_or(16),
            a.k.unwrap_or(1),
            a.repeats.unwrap_or(5),
            a.seed,
        )?,
        "argmin" => run_argmin_demo(a.n.unwrap_or(16), &a.k_list.clone().unwrap_or_else(|| pow2(64)), a.seed)?,
        other => return Err(usage(format!("unknown suite '{other}'; valid suites: {}", SUITES.join(", ")))),
    };
    finish(&report, &a.out)
}
