use crate::error::{Error, Result};
use crate::ffa::{derive_seed, fa_loss_exact, ffa_loss_k, ffa_single, sample_sketch};
use crate::tensor::Tensor;

use super::{log_log_slope, random_unit_rows, rng, RowKind, VerifyReport};

fn feature_pair(n: usize, c: usize, seed: u64) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut g = rng(seed);
    Ok((random_unit_rows(n, c, &mut g)?, random_unit_rows(n, c, &mut g)?))
}

/// Monte-Carlo mean of single-probe estimates against the exact loss.
pub fn run_unbiasedness(n: usize, c: usize, samples: usize, seed: u64) -> Result<VerifyReport> {
    let (ft, fs) = feature_pair(n, c, seed)?;
    unbiasedness_for(&ft, &fs, samples, seed)
}

/// [`run_unbiasedness`] on a caller-supplied normalized pair.
pub fn unbiasedness_for(ft: &Tensor<f64>, fs: &Tensor<f64>, samples: usize, seed: u64) -> Result<VerifyReport> {
    if samples < 1000 {
        return Err(Error::Config(format!("need at least 1000 samples, got {samples}")));
    }
    let n = ft.shape()[0];
    let mut r = VerifyReport::new("unbiased");
    for (name, v) in [("n", n as f64), ("c", ft.shape()[1] as f64), ("samples", samples as f64), ("seed", seed as f64)] {
        r.param(name, v);
    }
    r.threshold("stderr_multiple", 3.0);
    r.stat("exact", fa_loss_exact(ft, fs)?);
    for i in 0..samples {
        let z = sample_sketch::<f64>(n, 1, derive_seed(seed, 0, i as u64, 0))?;
        r.push(RowKind::Trial, "estimate", i, ffa_single(ft, fs, z.data())?);
    }
    let (passed, notes) = judge_unbiased(&r)?;
    let (mean, stderr) = mean_stderr(&r);
    r.stat("mean", mean);
    r.stat("stderr", stderr);
    r.passed = passed;
    r.notes = notes;
    Ok(r)
}

fn mean_stderr(r: &VerifyReport) -> (f64, f64) {
    let xs: Vec<f64> = r.series(RowKind::Trial, "estimate").into_iter().map(|(_, v)| v).collect();
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

pub(super) fn judge_unbiased(r: &VerifyReport) -> Result<(bool, Vec<String>)> {
    let exact = r.need(RowKind::Stat, "exact")?;
    let mult = r.need(RowKind::Threshold, "stderr_multiple")?;
    if r.series(RowKind::Trial, "estimate").len() < 2 {
        return Err(Error::Format("unbiased report needs at least two estimates".into()));
    }
    let (mean, stderr) = mean_stderr(r);
    let gap = (mean - exact).abs();
    let note = format!("mean {mean:.6e}, exact {exact:.6e}, |gap| = {:.2} standard errors", gap / stderr.max(f64::MIN_POSITIVE));
    Ok((gap <= mult * stderr, vec![note]))
}

/// Empirical variance and tail frequency of the `k`-probe estimator for each
/// `k`. With `epsilon = None` the threshold is set to the 30th percentile of
/// the `k = 1` absolute deviations.
pub fn run_tail_decay(n: usize, c: usize, epsilon: Option<f64>, k_list: &[usize], trials: usize, seed: u64) -> Result<VerifyReport> {
    if k_list.len() < 4 || k_list.windows(2).any(|w| w[0] >= w[1]) || k_list[0] == 0 {
        return Err(Error::Config(format!("k list must be strictly increasing with at least 4 positive entries, got {k_list:?}")));
    }
    if trials < 2 {
        return Err(Error::Config("need at least two trials per k".into()));
    }
    let (ft, fs) = feature_pair(n, c, seed)?;
    let exact = fa_loss_exact(&ft, &fs)?;
    let deviations = |k: usize| -> Result<Vec<f64>> {
        (0..trials)
            .map(|t| {
                let z = sample_sketch::<f64>(n, k, derive_seed(seed, k as u64, t as u64, 1))?;
                Ok(ffa_loss_k(&ft, &fs, &z)? - exact)
            })
            .collect()
    };
    let all: Vec<Vec<f64>> = k_list.iter().map(|&k| deviations(k)).collect::<Result<_>>()?;
    let eps = match epsilon {
        Some(e) => e,
        None => {
            let mut abs: Vec<f64> = all[0].iter().map(|d| d.abs()).collect();
            abs.sort_by(f64::total_cmp);
            abs[((abs.len() - 1) as f64 * 0.3).round() as usize]
        }
    };

    let mut r = VerifyReport::new("tail");
    for (name, v) in [("n", n as f64), ("c", c as f64), ("epsilon", eps), ("trials", trials as f64), ("seed", seed as f64)] {
        r.param(name, v);
    }
    r.threshold("slope_min", -1.2);
    r.threshold("slope_max", -0.8);
    r.stat("exact", exact);
    for (i, (&k, devs)) in k_list.iter().zip(&all).enumerate() {
        let m = devs.len() as f64;
        let mean = devs.iter().sum::<f64>() / m;
        let var = devs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (m - 1.0);
        let tail = devs.iter().filter(|d| d.abs() > eps).count() as f64 / m;
        r.push(RowKind::Trial, "k", i, k as f64);
        r.push(RowKind::Trial, "variance", i, var);
        r.push(RowKind::Trial, "tail", i, tail);
    }
    let (passed, notes) = judge_tail(&r)?;
    let (ks, vars) = (values(&r, "k"), values(&r, "variance"));
    r.stat("variance_slope", log_log_slope(&ks, &vars));
    r.passed = passed;
    r.notes = notes;
    Ok(r)
}

fn values(r: &VerifyReport, name: &str) -> Vec<f64> {
    r.series(RowKind::Trial, name).into_iter().map(|(_, v)| v).collect()
}

pub(super) fn judge_tail(r: &VerifyReport) -> Result<(bool, Vec<String>)> {
    let (lo, hi) = (r.need(RowKind::Threshold, "slope_min")?, r.need(RowKind::Threshold, "slope_max")?);
    let (ks, vars, tails) = (values(r, "k"), values(r, "variance"), values(r, "tail"));
    if ks.len() < 4 || vars.len() != ks.len() || tails.len() != ks.len() {
        return Err(Error::Format("tail report needs matching k, variance and tail rows".into()));
    }
    if tails.iter().all(|&t| t == 0.0) {
        return Ok((false, vec!["vacuous eps, retune: no deviation exceeded it at any k".into()]));
    }
    let mut notes = Vec::new();
    let slope = if vars.iter().all(|&v| v > 0.0) {
        log_log_slope(&ks, &vars)
    } else {
        notes.push("zero variance at some k".into());
        f64::NAN
    };
    let monotone = tails.windows(2).all(|w| w[1] <= w[0]);
    let freq: Vec<String> = tails.iter().map(|t| format!("{t:.3}")).collect();
    notes.push(format!("variance slope {slope:.3} (want [{lo}, {hi}])"));
    notes.push(format!("tail frequencies [{}]{}", freq.join(", "), if monotone { "" } else { " not nonincreasing" }));
    Ok(((lo..=hi).contains(&slope) && monotone, notes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_pair_is_exactly_unbiased() {
        let (f, _) = feature_pair(16, 4, 1).unwrap();
        let r = unbiasedness_for(&f, &f, 1000, 3).unwrap();
        assert!(r.passed);
        assert!(r.series(RowKind::Trial, "estimate").iter().all(|&(_, v)| v == 0.0));
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(matches!(run_unbiasedness(8, 2, 999, 0), Err(Error::Config(_))));
    }

    #[test]
    fn tail_parameter_checks() {
        assert!(run_tail_decay(8, 2, None, &[1, 2, 4], 10, 0).is_err());
        assert!(run_tail_decay(8, 2, None, &[1, 4, 2, 8], 10, 0).is_err());
    }

    #[test]
    fn huge_epsilon_is_vacuous() {
        let r = run_tail_decay(16, 4, Some(1e9), &[1, 2, 4, 8], 50, 0).unwrap();
        assert!(!r.passed);
        assert!(r.notes[0].contains("vacuous"));
    }

    #[test]
    fn zero_epsilon_always_in_tail() {
        let r = run_tail_decay(16, 4, Some(0.0), &[1, 2, 4, 8], 50, 0).unwrap();
        assert!(values(&r, "tail").iter().all(|&t| t == 1.0));
    }
}
