use crate::error::{Error, Result};
use crate::ffa::{derive_seed, sample_sketch};
use crate::kernels;

use super::{random_unit_rows, rng, RowKind, VerifyReport};

const MAX_ITERS: usize = 200_000;

/// Outcome of minimizing `f_k(theta) = (1/k) ||(s1 - theta) Z||_F^2` over
/// symmetric `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct Descent {
    pub theta: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    /// Step size at which the loss went up or became non-finite.
    pub diverged_at: Option<f64>,
}

fn matmul(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    kernels::gemm_nn(n, n, n, a, b, &mut c);
    c
}

fn trace_prod(a: &[f64], b: &[f64]) -> f64 {
    // tr(A B) for symmetric B equals the elementwise product sum
    kernels::dot(a, b)
}

/// Symmetrized descent direction `E M + M E` (minus the gradient in theta).
fn direction(n: usize, e: &[f64], m: &[f64]) -> Vec<f64> {
    let em = matmul(n, e, m);
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = em[i * n + j] + em[j * n + i];
        }
    }
    d
}

/// Nonlinear conjugate gradient (Polak-Ribiere, restarted every `n(n+1)/2`
/// steps) with exact line search. `m = Z Z^T / k`. Plain steepest descent
/// stalls when `k` is close to `n` because `m` is then badly conditioned.
pub fn descend(s1: &[f64], m: &[f64], theta0: &[f64], n: usize) -> Descent {
    let restart = n * (n + 1) / 2;
    let mut theta = theta0.to_vec();
    let mut e: Vec<f64> = s1.iter().zip(&theta).map(|(s, t)| s - t).collect();
    let loss_of = |e: &[f64]| trace_prod(&matmul(n, e, m), e);
    let mut loss = loss_of(&e);
    // rounding in tr(E M E) is relative to the starting loss, not the current one
    let noise = 1e-12 * loss.max(f64::MIN_POSITIVE);
    let mut r = direction(n, &e, m);
    let mut p = r.clone();
    for it in 0..MAX_ITERS {
        if loss <= 1e-30 {
            return Descent { theta, loss, iterations: it, diverged_at: None };
        }
        let pm = matmul(n, &p, m);
        let num = trace_prod(&pm, &e);
        let den = trace_prod(&pm, &p);
        if den <= 0.0 || num <= 0.0 {
            return Descent { theta, loss, iterations: it, diverged_at: None };
        }
        let t = num / den;
        let next_e: Vec<f64> = e.iter().zip(&p).map(|(a, b)| a - t * b).collect();
        let next_loss = loss_of(&next_e);
        if !next_loss.is_finite() || next_loss > loss + noise {
            return Descent { theta, loss, iterations: it, diverged_at: Some(t) };
        }
        if next_loss >= loss {
            return Descent { theta, loss, iterations: it, diverged_at: None };
        }
        theta.iter_mut().zip(&p).for_each(|(th, pp)| *th += t * pp);
        e = next_e;
        loss = next_loss;

        let r_next = direction(n, &e, m);
        let rr = kernels::dot(&r, &r);
        let beta = if (it + 1) % restart == 0 || rr == 0.0 {
            0.0
        } else {
            let cross: f64 = r_next.iter().zip(&r).map(|(a, b)| a * (a - b)).sum();
            (cross / rr).max(0.0)
        };
        p.iter_mut().zip(&r_next).for_each(|(pp, rn)| *pp = rn + beta * *pp);
        r = r_next;
    }
    Descent { theta, loss, iterations: MAX_ITERS, diverged_at: None }
}

/// Minimizes the sketched surrogate for each `k` from `theta0 = 0` and records
/// the distance of the result to the true minimizer `s1`.
pub fn run_argmin_demo(n: usize, k_list: &[usize], seed: u64) -> Result<VerifyReport> {
    argmin_from(n, k_list, seed, None)
}

/// [`run_argmin_demo`] from an explicit starting point (`None` means zero).
pub fn argmin_from(n: usize, k_list: &[usize], seed: u64, start: Option<&[f64]>) -> Result<VerifyReport> {
    if n < 2 || k_list.is_empty() || k_list.contains(&0) {
        return Err(Error::Config(format!("need n >= 2 and positive k values, got n={n}, k={k_list:?}")));
    }
    let f = random_unit_rows(n, 4, &mut rng(seed))?;
    let mut s1 = vec![0.0; n * n];
    kernels::gemm_nt(n, 4, n, f.data(), f.data(), &mut s1);
    let theta0 = match start {
        Some(t) if t.len() == n * n => t.to_vec(),
        Some(_) => return Err(Error::Input("starting point has the wrong size".into())),
        None => vec![0.0; n * n],
    };

    let mut r = VerifyReport::new("argmin");
    r.param("n", n as f64);
    r.param("seed", seed as f64);
    r.threshold("distance_max", 1e-3);
    r.threshold("noise", 0.1);
    for (i, &k) in k_list.iter().enumerate() {
        let z = sample_sketch::<f64>(n, k, derive_seed(seed, 0, 0, k as u64))?;
        let mut m = vec![0.0; n * n];
        kernels::gemm_nt(n, k, n, z.data(), z.data(), &mut m);
        m.iter_mut().for_each(|v| *v /= k as f64);
        let run = descend(&s1, &m, &theta0, n);
        let dist = run.theta.iter().zip(&s1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        r.push(RowKind::Trial, "k", i, k as f64);
        r.push(RowKind::Trial, "distance", i, dist);
        r.push(RowKind::Trial, "final_loss", i, run.loss);
        r.push(RowKind::Trial, "iterations", i, run.iterations as f64);
        r.push(RowKind::Trial, "diverged_step", i, run.diverged_at.unwrap_or(0.0));
    }
    let (passed, notes) = judge(&r)?;
    r.passed = passed;
    r.notes = notes;
    Ok(r)
}

pub(super) fn judge(r: &VerifyReport) -> Result<(bool, Vec<String>)> {
    let n = r.need(RowKind::Param, "n")?;
    let limit = r.need(RowKind::Threshold, "distance_max")?;
    let noise = r.need(RowKind::Threshold, "noise")?;
    let v = |name| -> Vec<f64> { r.series(RowKind::Trial, name).into_iter().map(|(_, v)| v).collect() };
    let (ks, dists, div) = (v("k"), v("distance"), v("diverged_step"));
    if ks.is_empty() || dists.len() != ks.len() {
        return Err(Error::Format("argmin report needs matching k and distance rows".into()));
    }
    let mut notes = Vec::new();
    let mut ok = true;
    for (k, &step) in ks.iter().zip(&div) {
        if step != 0.0 {
            ok = false;
            notes.push(format!("descent diverged at k={k} with step size {step:.3e}"));
        }
    }
    let full: Vec<(f64, f64)> = ks.iter().copied().zip(dists.iter().copied()).filter(|&(k, _)| k >= n).collect();
    for &(k, d) in &full {
        if d > limit {
            ok = false;
            notes.push(format!("k={k}: distance {d:.3e} above {limit:e}"));
        }
    }
    for w in full.windows(2) {
        if w[1].1 > (1.0 + noise) * w[0].1 && w[1].1 > limit * 1e-6 {
            ok = false;
            notes.push(format!("distance grew from {:.3e} (k={}) to {:.3e} (k={})", w[0].1, w[0].0, w[1].1, w[1].0));
        }
    }
    let summary: Vec<String> = ks.iter().zip(&dists).map(|(k, d)| format!("k={k}: {d:.2e}")).collect();
    notes.push(format!("distances {}", summary.join(", ")));
    Ok((ok, notes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starting_at_optimum_stays_there() {
        let n = 6;
        let f = random_unit_rows(n, 4, &mut rng(5)).unwrap();
        let mut s1 = vec![0.0; n * n];
        kernels::gemm_nt(n, 4, n, f.data(), f.data(), &mut s1);
        let r = argmin_from(n, &[1, 6, 12], 5, Some(&s1)).unwrap();
        assert!(r.series(RowKind::Trial, "distance").iter().all(|&(_, d)| d == 0.0));
        assert!(r.series(RowKind::Trial, "final_loss").iter().all(|&(_, l)| l == 0.0));
    }

    #[test]
    fn full_rank_sketch_recovers_minimizer() {
        let r = run_argmin_demo(6, &[1, 6, 24], 2).unwrap();
        let d = r.series(RowKind::Trial, "distance");
        assert!(d[1].1 < 1e-3 && d[2].1 < 1e-3, "{d:?}");
        assert!(r.passed, "{:?}", r.notes);
    }

    #[test]
    fn rank_one_sketch_is_far() {
        let r = run_argmin_demo(6, &[1], 2).unwrap();
        assert!(r.series(RowKind::Trial, "distance")[0].1 > 1e-2);
    }
}
