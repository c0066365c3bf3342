use std::hint::black_box;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::ffa::{
    fa_exact_mult_count, fa_loss_exact, fa_loss_exact_counted, ffa_loss_k, ffa_loss_k_counted, ffa_mult_count,
    sample_sketch, MulCounter,
};

use super::{log_log_slope, median, random_unit_rows, rng, RowKind, VerifyReport};

const MIN_SAMPLE: Duration = Duration::from_millis(2);

/// Median seconds per call of `f` over `repeats` samples. Fast calls are
/// batched so every sample lasts at least a couple of milliseconds.
pub fn time_median(repeats: usize, mut f: impl FnMut()) -> f64 {
    let mut iters = 1usize;
    loop {
        let start = Instant::now();
        for _ in 0..iters {
            f();
        }
        if start.elapsed() >= MIN_SAMPLE || iters >= 1 << 20 {
            break;
        }
        iters *= 2;
    }
    let samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..iters {
                f();
            }
            start.elapsed().as_secs_f64() / iters as f64
        })
        .collect();
    median(&samples)
}

/// Wall-clock and multiply-count scaling of the exact loss and the
/// `k`-probe estimator on square `H x H` maps with `c` channels.
pub fn run_scaling_bench(h_list: &[usize], c: usize, k: usize, repeats: usize, seed: u64) -> Result<VerifyReport> {
    if repeats < 5 {
        return Err(Error::Config(format!("timing needs at least 5 repeats, got {repeats}")));
    }
    if h_list.len() < 2 || h_list[0] == 0 || c == 0 || k == 0 {
        return Err(Error::Config("need at least two positive map sizes and positive c, k".into()));
    }
    let ratio = h_list[1] as f64 / h_list[0] as f64;
    if ratio <= 1.0 || h_list.windows(2).any(|w| ((w[1] as f64 / w[0] as f64) - ratio).abs() > 1e-9) {
        return Err(Error::Config(format!("map sizes must form an increasing geometric sequence, got {h_list:?}")));
    }

    let mut r = VerifyReport::new("scaling");
    for (name, v) in [("c", c as f64), ("k", k as f64), ("repeats", repeats as f64), ("seed", seed as f64)] {
        r.param(name, v);
    }
    r.threshold("exact_slope_min", 3.5);
    r.threshold("exact_slope_max", 4.5);
    r.threshold("ffa_slope_min", 1.5);
    r.threshold("ffa_slope_max", 2.5);
    let mut g = rng(seed);
    for (i, &h) in h_list.iter().enumerate() {
        let n = h * h;
        let ft = random_unit_rows(n, c, &mut g)?;
        let fs = random_unit_rows(n, c, &mut g)?;
        let z = sample_sketch::<f64>(n, k, seed ^ i as u64)?;

        let mut exact_count = MulCounter::default();
        fa_loss_exact_counted(&ft, &fs, &mut exact_count)?;
        let mut ffa_count = MulCounter::default();
        ffa_loss_k_counted(&ft, &fs, &z, &mut ffa_count)?;

        let exact_t = time_median(repeats, || {
            black_box(fa_loss_exact(black_box(&ft), black_box(&fs)).ok());
        });
        let ffa_t = time_median(repeats, || {
            black_box(ffa_loss_k(black_box(&ft), black_box(&fs), black_box(&z)).ok());
        });
        r.push(RowKind::Trial, "h", i, h as f64);
        r.push(RowKind::Trial, "exact_seconds", i, exact_t);
        r.push(RowKind::Trial, "ffa_seconds", i, ffa_t);
        r.push(RowKind::Trial, "exact_mults", i, exact_count.mults as f64);
        r.push(RowKind::Trial, "exact_formula", i, fa_exact_mult_count(n, c, c) as f64);
        r.push(RowKind::Trial, "ffa_mults", i, ffa_count.mults as f64);
        r.push(RowKind::Trial, "ffa_formula", i, ffa_mult_count(n, c, c, k) as f64);
    }
    let (passed, notes) = judge(&r)?;
    let v = |name| -> Vec<f64> { r.series(RowKind::Trial, name).into_iter().map(|(_, v)| v).collect() };
    let (hs, et, ft) = (v("h"), v("exact_seconds"), v("ffa_seconds"));
    r.stat("exact_slope", log_log_slope(&hs, &et));
    r.stat("ffa_slope", log_log_slope(&hs, &ft));
    r.passed = passed;
    r.notes = notes;
    Ok(r)
}

pub(super) fn judge(r: &VerifyReport) -> Result<(bool, Vec<String>)> {
    let v = |name| -> Vec<f64> { r.series(RowKind::Trial, name).into_iter().map(|(_, v)| v).collect() };
    let hs = v("h");
    if hs.len() < 2 {
        return Err(Error::Format("scaling report needs at least two sizes".into()));
    }
    let exact_slope = log_log_slope(&hs, &v("exact_seconds"));
    let ffa_slope = log_log_slope(&hs, &v("ffa_seconds"));
    let counts_match = v("exact_mults") == v("exact_formula") && v("ffa_mults") == v("ffa_formula");
    let (elo, ehi) = (r.need(RowKind::Threshold, "exact_slope_min")?, r.need(RowKind::Threshold, "exact_slope_max")?);
    let (flo, fhi) = (r.need(RowKind::Threshold, "ffa_slope_min")?, r.need(RowKind::Threshold, "ffa_slope_max")?);
    let notes = vec![
        format!("exact slope {exact_slope:.3} (want [{elo}, {ehi}])"),
        format!("estimator slope {ffa_slope:.3} (want [{flo}, {fhi}])"),
        format!("multiply counts {}", if counts_match { "match the closed forms" } else { "DIFFER from the closed forms" }),
    ];
    let ok = (elo..=ehi).contains(&exact_slope) && (flo..=fhi).contains(&ffa_slope) && counts_match;
    Ok((ok, notes))
}
