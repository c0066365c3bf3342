//! Randomized fast feature-affinity (FFA) estimator.
//!
//! For pixel-normalized feature matrices `F1 (N x C2)` and `F2 (N x C1)` the
//! affinity loss is `(1/N^2) ||F1 F1^T - F2 F2^T||_F^2`. With a Gaussian
//! sketch `Z (N x k)` the estimator `(1/N^2)(1/k) ||(F1 F1^T - F2 F2^T) Z||_F^2`
//! is unbiased and costs `O(kNC)` because each product is evaluated as
//! `F (F^T Z)`; no `N x N` matrix is ever formed here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::losses::PIXEL_NORM_EPS;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `N x k` matrix of i.i.d. standard normal entries, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    seed: u64,
}

impl<T: Scalar> SketchMatrix<T> {
    /// Wraps explicit values (orthogonal probes in tests, fixed directions).
    pub fn from_values(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if cols == 0 || rows == 0 {
            return Err(Error::Input("sketch dimensions must be positive".into()));
        }
        if data.len() != rows * cols {
            return shape_err("sketch", format!("{} values for a {rows}x{cols} sketch", data.len()));
        }
        Ok(Self { rows, cols, data, seed: 0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn as_tensor(&self) -> Tensor<T> {
        Tensor::from_parts(vec![self.rows, self.cols], self.data.clone())
    }
}

/// Draws an `n x k` Gaussian sketch; identical seeds give identical matrices.
pub fn sample_sketch<T: Scalar>(n: usize, k: usize, seed: u64) -> Result<SketchMatrix<T>> {
    if n == 0 || k == 0 {
        return Err(Error::Input(format!("sketch needs n, k >= 1 (got n={n}, k={k})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z)
        })
        .collect();
    Ok(SketchMatrix { rows: n, cols: k, data, seed })
}

/// Mixes the run seed with (epoch, batch, tap) so every sketch in a training
/// run is fresh yet reproducible.
pub fn derive_seed(global: u64, epoch: u64, batch: u64, tap: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    [epoch, batch, tap].iter().fold(mix(global), |acc, &v| mix(acc ^ mix(v)))
}

/// Multiply counter threaded through the instrumented evaluations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MulCounter {
    pub mults: u64,
}

impl MulCounter {
    fn add(&mut self, n: usize) {
        self.mults += n as u64;
    }
}

fn matrix_dims<T: Scalar>(op: &'static str, m: &Tensor<T>) -> Result<(usize, usize)> {
    match *m.shape() {
        [r, c] => Ok((r, c)),
        _ => shape_err(op, format!("expected an N x C matrix, got {:?}", m.shape())),
    }
}

fn check_pair<T: Scalar>(op: &'static str, ft: &Tensor<T>, fs: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n1, c2) = matrix_dims(op, ft)?;
    let (n2, c1) = matrix_dims(op, fs)?;
    if n1 != n2 {
        return shape_err(op, format!("teacher has {n1} pixels, student {n2}"));
    }
    Ok((n1, c2, c1))
}

/// `F (F^T Z)` for an `N x C` matrix and `N x k` sketch, counting multiplies.
fn gram_times<T: Scalar>(f: &[T], n: usize, c: usize, z: &[T], k: usize, counter: &mut MulCounter) -> Vec<T> {
    let mut ftz = vec![T::zero(); c * k];
    kernels::gemm_tn(c, n, k, f, z, &mut ftz);
    counter.add(n * c * k);
    let mut out = vec![T::zero(); n * k];
    kernels::gemm_nn(n, c, k, f, &ftz, &mut out);
    counter.add(n * c * k);
    out
}

/// Instrumented `k`-column estimator. Multiplies counted: `k (2N C2 + 2N C1 + N)`,
/// excluding the final normalization constant.
pub fn ffa_loss_k_counted<T: Scalar>(
    ft_norm: &Tensor<T>,
    fs_norm: &Tensor<T>,
    sketch: &SketchMatrix<T>,
    counter: &mut MulCounter,
) -> Result<T> {
    let (n, c2, c1) = check_pair("ffa_loss_k", ft_norm, fs_norm)?;
    if sketch.rows != n {
        return shape_err("ffa_loss_k", format!("sketch has {} rows for {n} pixels", sketch.rows));
    }
    let k = sketch.cols;
    let pt = gram_times(ft_norm.data(), n, c2, &sketch.data, k, counter);
    let ps = gram_times(fs_norm.data(), n, c1, &sketch.data, k, counter);
    let mut acc = T::zero();
    for (a, b) in pt.iter().zip(&ps) {
        let d = *a - *b;
        acc += d * d;
    }
    counter.add(n * k);
    let nf = T::lit(n as f64);
    Ok(acc / (nf * nf * T::lit(k as f64)))
}

/// Mean over the sketch's columns of [`ffa_single`].
pub fn ffa_loss_k<T: Scalar>(ft_norm: &Tensor<T>, fs_norm: &Tensor<T>, sketch: &SketchMatrix<T>) -> Result<T> {
    ffa_loss_k_counted(ft_norm, fs_norm, sketch, &mut MulCounter::default())
}

/// Single-probe estimate `(1/N^2) ||(S1 - S2) z||^2`.
pub fn ffa_single<T: Scalar>(ft_norm: &Tensor<T>, fs_norm: &Tensor<T>, z: &[T]) -> Result<T> {
    let (n, _, _) = check_pair("ffa_single", ft_norm, fs_norm)?;
    if z.len() != n {
        return Err(Error::Input(format!("probe of length {} for {n} pixels", z.len())));
    }
    let sketch = SketchMatrix { rows: n, cols: 1, data: z.to_vec(), seed: 0 };
    ffa_loss_k(ft_norm, fs_norm, &sketch)
}

/// Closed-form multiply count of [`ffa_loss_k_counted`].
pub fn ffa_mult_count(n: usize, c_teacher: usize, c_student: usize, k: usize) -> u64 {
    (k * (2 * n * c_teacher + 2 * n * c_student + n)) as u64
}

/// Exact affinity loss by streaming over the upper triangle of both Gram
/// matrices (O(N) memory). Multiplies counted: `N(N+1)/2 (C2 + C1 + 1) + N`,
/// excluding the final normalization constant.
pub fn fa_loss_exact_counted<T: Scalar>(ft_norm: &Tensor<T>, fs_norm: &Tensor<T>, counter: &mut MulCounter) -> Result<T> {
    let (n, c2, c1) = check_pair("fa_loss_exact", ft_norm, fs_norm)?;
    let (ft, fs) = (ft_norm.data(), fs_norm.data());
    let two = T::lit(2.0);
    let mut total = T::zero();
    for i in 0..n {
        let ti = &ft[i * c2..(i + 1) * c2];
        let si = &fs[i * c1..(i + 1) * c1];
        let d = kernels::dot(ti, ti) - kernels::dot(si, si);
        let mut off = T::zero();
        for j in i + 1..n {
            let d = kernels::dot(ti, &ft[j * c2..(j + 1) * c2]) - kernels::dot(si, &fs[j * c1..(j + 1) * c1]);
            off += d * d;
        }
        total += d * d + two * off;
    }
    counter.add(n * (n + 1) / 2 * (c2 + c1 + 1) + n);
    let nf = T::lit(n as f64);
    Ok(total / (nf * nf))
}

pub fn fa_loss_exact<T: Scalar>(ft_norm: &Tensor<T>, fs_norm: &Tensor<T>) -> Result<T> {
    fa_loss_exact_counted(ft_norm, fs_norm, &mut MulCounter::default())
}

/// Closed-form multiply count of [`fa_loss_exact_counted`].
pub fn fa_exact_mult_count(n: usize, c_teacher: usize, c_student: usize) -> u64 {
    (n * (n + 1) / 2 * (c_teacher + c_student + 1) + n) as u64
}

/// Graph form of the estimator for one sample of a batched student map.
/// `ft_norm` is the constant pixel-normalized teacher matrix.
pub(crate) fn ffa_graph_term<T: Scalar>(
    g: &mut Graph<T>,
    ft_norm: &Tensor<T>,
    student: Var,
    sample: usize,
    sketch: &SketchMatrix<T>,
) -> Result<Var> {
    let ps = g.pixel_matrix(student, sample)?;
    let fs = g.row_normalize(ps, T::lit(PIXEL_NORM_EPS))?;
    ffa_loss_k_graph(g, ft_norm, fs, sketch)
}

/// Differentiable estimator with respect to the normalized student matrix.
pub fn ffa_loss_k_graph<T: Scalar>(g: &mut Graph<T>, ft_norm: &Tensor<T>, fs_norm: Var, sketch: &SketchMatrix<T>) -> Result<Var> {
    let (n, c2) = matrix_dims("ffa_loss_k", ft_norm)?;
    let (ns, _) = matrix_dims("ffa_loss_k", g.value(fs_norm))?;
    if ns != n || sketch.rows != n {
        return shape_err("ffa_loss_k", format!("teacher {n}, student {ns}, sketch {} rows", sketch.rows));
    }
    let k = sketch.cols;
    let target = gram_times(ft_norm.data(), n, c2, &sketch.data, k, &mut MulCounter::default());
    let target = g.constant(Tensor::from_parts(vec![n, k], target));
    let z = g.constant(sketch.as_tensor());
    let fst = g.transpose(fs_norm)?;
    let proj = g.matmul(fst, z)?;
    let back = g.matmul(fs_norm, proj)?;
    let diff = g.sub(target, back)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    let nf = T::lit(n as f64);
    g.scale(s, T::one() / (nf * nf * T::lit(k as f64)))
}

/// Pairwise squared Euclidean distances between the rows of `A (n x c)`.
#[derive(Clone, Debug, PartialEq)]
pub enum PairwiseDistances<T> {
    /// `S_ij = ||A_i - A_j||^2` as an `n x n` matrix.
    Exact(Tensor<T>),
    /// Row norms `v` and `A (A^T Z)` for a sketch `Z`.
    Sketched { row_norms: Vec<T>, gram_sketch: Tensor<T>, sketch: SketchMatrix<T> },
}

impl<T: Scalar> PairwiseDistances<T> {
    /// `S Z` where `S = 1 v^T - 2 A A^T + v 1^T`, built from the sketched
    /// factors without forming `S`. Exact mode multiplies the dense matrix.
    pub fn times_sketch(&self, z: &SketchMatrix<T>) -> Result<Tensor<T>> {
        match self {
            PairwiseDistances::Exact(s) => {
                let n = s.shape()[0];
                if z.rows != n {
                    return shape_err("pairwise_sqdist", format!("sketch rows {} for {n} points", z.rows));
                }
                let mut out = vec![T::zero(); n * z.cols];
                kernels::gemm_nn(n, n, z.cols, s.data(), &z.data, &mut out);
                Ok(Tensor::from_parts(vec![n, z.cols], out))
            }
            PairwiseDistances::Sketched { row_norms, gram_sketch, sketch } => {
                if z != sketch {
                    return Err(Error::Input("sketched distances can only be applied to their own sketch".into()));
                }
                let (n, k) = (row_norms.len(), sketch.cols);
                let mut vz = vec![T::zero(); k];
                let mut colsum = vec![T::zero(); k];
                for i in 0..n {
                    for l in 0..k {
                        let zv = sketch.data[i * k + l];
                        vz[l] += row_norms[i] * zv;
                        colsum[l] += zv;
                    }
                }
                let two = T::lit(2.0);
                let g = gram_sketch.data();
                let out = (0..n * k)
                    .map(|idx| {
                        let (i, l) = (idx / k, idx % k);
                        vz[l] - two * g[idx] + row_norms[i] * colsum[l]
                    })
                    .collect();
                Ok(Tensor::from_parts(vec![n, k], out))
            }
        }
    }
}

/// Exact pairwise squared distances via the row-norm broadcast, or (given a
/// sketch) the factors `v` and `A (A^T Z)` that stand in for `2 A A^T`.
pub fn pairwise_sqdist<T: Scalar>(a: &Tensor<T>, sketch: Option<&SketchMatrix<T>>) -> Result<PairwiseDistances<T>> {
    let (n, c) = matrix_dims("pairwise_sqdist", a)?;
    let data = a.data();
    let v: Vec<T> = (0..n).map(|i| kernels::dot(&data[i * c..(i + 1) * c], &data[i * c..(i + 1) * c])).collect();
    match sketch {
        None => {
            let mut gram = vec![T::zero(); n * n];
            kernels::gemm_nt(n, c, n, data, data, &mut gram);
            let two = T::lit(2.0);
            let s = (0..n * n)
                .map(|idx| {
                    let (i, j) = (idx / n, idx % n);
                    // clamp roundoff below zero
                    (v[j] - two * gram[idx] + v[i]).max(T::zero())
                })
                .collect();
            Ok(PairwiseDistances::Exact(Tensor::from_parts(vec![n, n], s)))
        }
        Some(z) => {
            if z.rows != n {
                return shape_err("pairwise_sqdist", format!("sketch rows {} for {n} points", z.rows));
            }
            let gs = gram_times(data, n, c, &z.data, z.cols, &mut MulCounter::default());
            Ok(PairwiseDistances::Sketched {
                row_norms: v,
                gram_sketch: Tensor::from_parts(vec![n, z.cols], gs),
                sketch: z.clone(),
            })
        }
    }
}
