use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

use super::{median, random_unit_rows, rng, RowKind, VerifyReport};

/// Smallest integer strictly above `16 eps^-2 ln n`.
pub fn jl_target_dim(n: usize, eps: f64) -> usize {
    (16.0 / (eps * eps) * (n as f64).ln()).floor() as usize + 1
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JlDistortion {
    /// Largest `|cos(T f_i, T f_j) - cos(f_i, f_j)|` over pairs.
    pub max_cosine: f64,
    /// Largest `|<T f_i, T f_j> - <f_i, f_j>|` over pairs.
    pub max_inner: f64,
    /// Pairs whose cosine perturbation is at most `eps`.
    pub within: usize,
    pub pairs: usize,
}

fn gram(rows: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    kernels::gemm_nt(n, c, n, rows, rows, &mut g);
    g
}

/// Pairwise angle distortion of the rows of `f (n x d)` under `t (k x d)`.
pub fn jl_distortion(f: &Tensor<f64>, t: &Tensor<f64>, eps: f64) -> Result<JlDistortion> {
    let ([n, d], [k, d2]) = (f.shape(), t.shape()) else {
        return Err(Error::Input("expected 2-D vectors and map".into()));
    };
    let (n, d, k) = (*n, *d, *k);
    if d != *d2 {
        return Err(Error::Input(format!("map expects dimension {d2}, vectors have {d}")));
    }
    let mut proj = vec![0.0; n * k];
    kernels::gemm_nt(n, d, k, f.data(), t.data(), &mut proj);
    let g0 = gram(f.data(), n, d);
    let g1 = gram(&proj, n, k);
    let mut out = JlDistortion { max_cosine: 0.0, max_inner: 0.0, within: 0, pairs: 0 };
    for i in 0..n {
        for j in i + 1..n {
            let c0 = g0[i * n + j] / (g0[i * n + i] * g0[j * n + j]).sqrt();
            let c1 = g1[i * n + j] / (g1[i * n + i] * g1[j * n + j]).sqrt();
            let dc = (c1 - c0).abs();
            out.max_cosine = out.max_cosine.max(dc);
            out.max_inner = out.max_inner.max((g1[i * n + j] - g0[i * n + j]).abs());
            out.pairs += 1;
            if dc <= eps {
                out.within += 1;
            }
        }
    }
    Ok(out)
}

/// Random unit vectors under scaled Gaussian maps `G / sqrt(k)` with
/// `k = jl_target_dim(n, eps)`.
pub fn run_jl_check(n: usize, d: usize, eps: f64, trials: usize, seed: u64) -> Result<VerifyReport> {
    if n < 2 || trials == 0 || !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("need n >= 2, trials >= 1 and 0 < eps < 1 (n={n}, trials={trials}, eps={eps})")));
    }
    let k = jl_target_dim(n, eps);
    if k >= d {
        return Err(Error::Config(format!("target dimension {k} is not below the ambient dimension {d}")));
    }
    let mut r = VerifyReport::new("jl");
    for (name, v) in [("n", n as f64), ("d", d as f64), ("k", k as f64), ("epsilon", eps), ("trials", trials as f64), ("seed", seed as f64)] {
        r.param(name, v);
    }
    r.threshold("median_max_cosine", eps);
    r.threshold("pair_fraction", 0.9);
    let mut g = rng(seed);
    let scale = 1.0 / (k as f64).sqrt();
    for t in 0..trials {
        let f = random_unit_rows(n, d, &mut g)?;
        let map = Tensor::randn(&[k, d], scale, &mut g);
        let dist = jl_distortion(&f, &map, eps)?;
        r.push(RowKind::Trial, "max_cosine", t, dist.max_cosine);
        r.push(RowKind::Trial, "max_inner", t, dist.max_inner);
        r.push(RowKind::Trial, "pairs_within", t, dist.within as f64);
        r.push(RowKind::Trial, "pairs", t, dist.pairs as f64);
    }
    let (passed, notes) = judge(&r)?;
    let maxes: Vec<f64> = r.series(RowKind::Trial, "max_cosine").into_iter().map(|(_, v)| v).collect();
    r.stat("median_max_cosine", median(&maxes));
    r.stat("trial_fraction", maxes.iter().filter(|&&m| m <= eps).count() as f64 / trials as f64);
    r.passed = passed;
    r.notes = notes;
    Ok(r)
}

pub(super) fn judge(r: &VerifyReport) -> Result<(bool, Vec<String>)> {
    let eps = r.need(RowKind::Param, "epsilon")?;
    let med_limit = r.need(RowKind::Threshold, "median_max_cosine")?;
    let frac_limit = r.need(RowKind::Threshold, "pair_fraction")?;
    let maxes: Vec<f64> = r.series(RowKind::Trial, "max_cosine").into_iter().map(|(_, v)| v).collect();
    if maxes.is_empty() {
        return Err(Error::Format("jl report has no trials".into()));
    }
    let within: f64 = r.series(RowKind::Trial, "pairs_within").iter().map(|p| p.1).sum();
    let pairs: f64 = r.series(RowKind::Trial, "pairs").iter().map(|p| p.1).sum();
    let med = median(&maxes);
    let frac = within / pairs;
    let trial_frac = maxes.iter().filter(|&&m| m <= eps).count() as f64 / maxes.len() as f64;
    let notes = vec![
        format!("median max cosine perturbation {med:.4} (limit {med_limit})"),
        format!("{:.2}% of pairs within eps (limit {:.0}%)", 100.0 * frac, 100.0 * frac_limit),
        format!("{:.0}% of trials fully within eps", 100.0 * trial_frac),
    ];
    Ok((med <= med_limit && frac >= frac_limit, notes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_dim_matches_bound() {
        assert_eq!(jl_target_dim(64, 0.5), 267);
    }

    #[test]
    fn identical_pair_has_no_distortion() {
        let f = Tensor::from_f64(&[2, 3], &[0.6, 0.8, 0.0, 0.6, 0.8, 0.0]).unwrap();
        let t = Tensor::randn(&[2, 3], 1.0, &mut rng(1));
        let d = jl_distortion(&f, &t, 0.1).unwrap();
        assert!(d.max_cosine < 1e-12);
        assert_eq!(d.within, 1);
    }

    #[test]
    fn orthogonal_map_is_an_isometry() {
        let f = random_unit_rows(10, 6, &mut rng(2)).unwrap();
        let mut eye = vec![0.0; 36];
        (0..6).for_each(|i| eye[i * 7] = 1.0);
        let d = jl_distortion(&f, &Tensor::new(&[6, 6], eye).unwrap(), 0.0).unwrap();
        assert!(d.max_cosine < 1e-12 && d.max_inner < 1e-12);
        assert_eq!(d.within, d.pairs);
    }

    #[test]
    fn hypothesis_violation_is_rejected() {
        assert!(matches!(run_jl_check(64, 200, 0.5, 1, 0), Err(Error::Config(_))));
    }
}
