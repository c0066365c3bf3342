//! Distillation criteria: logit matching (MSE / KL), ground-truth NLL, the
//! feature-affinity loss and the weighted composite objectives.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::ffa::{self, SketchMatrix};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to pixel norms before channel normalization.
pub const PIXEL_NORM_EPS: f64 = 1e-8;

/// Feature map of shape `C x H x W` or `B x C x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Scalar> {
    values: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if !matches!(values.ndim(), 3 | 4) {
            return shape_err("feature_map", format!("expected [C, H, W] or [B, C, H, W], got {:?}", values.shape()));
        }
        if !values.is_finite() {
            return Err(Error::Input("feature map contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn batch(&self) -> usize {
        if self.values.ndim() == 4 { self.values.shape()[0] } else { 1 }
    }

    /// `(C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        let s = &s[s.len() - 3..];
        (s[0], s[1], s[2])
    }

    pub fn pixels(&self) -> usize {
        let (_, h, w) = self.dims();
        h * w
    }

    /// Batched `[B, C, H, W]` view.
    pub fn batched(&self) -> Tensor<T> {
        let (c, h, w) = self.dims();
        Tensor::from_parts(vec![self.batch(), c, h, w], self.values.data().to_vec())
    }

    /// `(H*W) x C` matrix of pixel vectors for one sample.
    pub fn pixel_rows(&self, sample: usize) -> Result<Tensor<T>> {
        let (c, h, w) = self.dims();
        if sample >= self.batch() {
            return shape_err("pixel_rows", format!("sample {sample} out of batch {}", self.batch()));
        }
        let n = h * w;
        let block = &self.values.data()[sample * c * n..(sample + 1) * c * n];
        Ok(Tensor::from_parts(vec![n, c], kernels::transpose(c, n, block)))
    }
}

/// Divides each row of a 2-D matrix by `max(||row||, eps)`.
pub fn normalize_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let [rows, cols] = *m.shape() else {
        return shape_err("normalize_rows", format!("expected a matrix, got {:?}", m.shape()));
    };
    let eps = T::lit(PIXEL_NORM_EPS);
    let mut out = m.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let n = kernels::dot(row, row).sqrt().max(eps);
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(Tensor::from_parts(vec![rows, cols], out))
}

/// Unit-normalizes every pixel's channel vector.
pub fn normalize_pixels<T: Scalar>(f: &FeatureMap<T>) -> FeatureMap<T> {
    let (c, h, w) = f.dims();
    let n = h * w;
    let eps = T::lit(PIXEL_NORM_EPS);
    let mut out = f.values.data().to_vec();
    for b in 0..f.batch() {
        let block = &mut out[b * c * n..(b + 1) * c * n];
        for p in 0..n {
            let norm = (0..c).map(|ch| block[ch * n + p] * block[ch * n + p]).sum::<T>().sqrt().max(eps);
            for ch in 0..c {
                block[ch * n + p] /= norm;
            }
        }
    }
    FeatureMap { values: Tensor::from_parts(f.values.shape().to_vec(), out) }
}

/// Symmetric `N x N` matrix of pairwise pixel cosines, `N = H*W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix<T> {
    pub size: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> AffinityMatrix<T> {
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.size + j]
    }
}

/// Gram matrix of the channel-normalized pixel vectors of one sample.
pub fn affinity_matrix<T: Scalar>(f: &FeatureMap<T>, sample: usize) -> Result<AffinityMatrix<T>> {
    let rows = normalize_rows(&f.pixel_rows(sample)?)?;
    let (n, c) = (rows.shape()[0], rows.shape()[1]);
    let mut s = vec![T::zero(); n * n];
    kernels::gemm_nt(n, c, n, rows.data(), rows.data(), &mut s);
    Ok(AffinityMatrix { size: n, values: s })
}

/// Resizes `student` to the teacher's spatial size when they differ.
fn align_spatial<T: Scalar>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    let ss = g.value(student).shape().to_vec();
    let ts = g.value(teacher).shape().to_vec();
    if ss.len() != 4 || ts.len() != 4 {
        return shape_err("fa_loss", format!("expected batched maps, got {ss:?} and {ts:?}"));
    }
    if ss[0] != ts[0] {
        return shape_err("fa_loss", format!("batch sizes {} and {} differ", ss[0], ts[0]));
    }
    if ss[2..] == ts[2..] {
        Ok(student)
    } else {
        g.resize_bilinear(student, ts[2], ts[3])
    }
}

/// Feature-affinity loss `(1/(HW)^2) ||S^T - S^S||_F^2`, averaged over the batch.
///
/// Both inputs are `[B, C, H, W]` graph nodes; channel counts may differ and
/// the student is bilinearly resized when spatial sizes differ.
pub fn fa_loss<T: Scalar>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    let student = align_spatial(g, student, teacher)?;
    let shape = g.value(teacher).shape().to_vec();
    let (batch, n) = (shape[0], shape[2] * shape[3]);
    let eps = T::lit(PIXEL_NORM_EPS);
    let mut total: Option<Var> = None;
    for b in 0..batch {
        let ps = g.pixel_matrix(student, b)?;
        let pt = g.pixel_matrix(teacher, b)?;
        let ns = g.row_normalize(ps, eps)?;
        let nt = g.row_normalize(pt, eps)?;
        let nst = g.transpose(ns)?;
        let ntt = g.transpose(nt)?;
        let ss = g.matmul(ns, nst)?;
        let st = g.matmul(nt, ntt)?;
        let diff = g.sub(st, ss)?;
        let sq = g.square(diff)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let total = total.expect("batch is nonzero");
    let n2 = T::lit(n as f64) * T::lit(n as f64);
    g.scale(total, T::one() / (n2 * T::lit(batch as f64)))
}

/// Randomized estimate of [`fa_loss`] using one sketch for the whole batch.
pub fn ffa_loss<T: Scalar>(g: &mut Graph<T>, student: Var, teacher: &Tensor<T>, sketch: &SketchMatrix<T>) -> Result<Var> {
    let tv = g.constant(teacher.clone());
    let student = align_spatial(g, student, tv)?;
    let shape = teacher.shape().to_vec();
    let (batch, n) = (shape[0], shape[2] * shape[3]);
    if sketch.rows() != n {
        return shape_err("ffa_loss", format!("sketch has {} rows for {n} pixels", sketch.rows()));
    }
    let teacher_map = FeatureMap::new(teacher.clone())?;
    let mut total: Option<Var> = None;
    for b in 0..batch {
        let ft = normalize_rows(&teacher_map.pixel_rows(b)?)?;
        let s = ffa::ffa_graph_term(g, &ft, student, b, sketch)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    g.scale(total.expect("batch is nonzero"), T::one() / T::lit(batch as f64))
}

/// Value-only [`fa_loss`] for single or batched feature maps.
pub fn fa_loss_value<T: Scalar>(student: &FeatureMap<T>, teacher: &FeatureMap<T>) -> Result<T> {
    let mut g = Graph::new();
    let s = g.constant(student.batched());
    let t = g.constant(teacher.batched());
    let l = fa_loss(&mut g, s, t)?;
    Ok(g.value(l).item())
}

/// KL divergence `sum P ln(P/Q)` between explicit probability vectors.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return shape_err("kl_divergence", format!("{} vs {} entries", p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > T::zero())
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

fn as_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<Tensor<T>> {
    match *t.shape() {
        [_, _] => Ok(t.clone()),
        [k] => t.clone().reshape(&[1, k]),
        _ => shape_err(op, format!("expected [batch, classes] logits, got {:?}", t.shape())),
    }
}

/// `KL(softmax(teacher) || softmax(student))`, averaged over the batch.
/// The teacher logits are a constant.
pub fn kl_loss<T: Scalar>(g: &mut Graph<T>, teacher: &Tensor<T>, student: Var) -> Result<Var> {
    let teacher = as_matrix("kl_loss", teacher)?;
    let sshape = g.value(student).shape().to_vec();
    if sshape != teacher.shape() {
        return shape_err("kl_loss", format!("teacher {:?} vs student {sshape:?}", teacher.shape()));
    }
    let (rows, cols) = (sshape[0], sshape[1]);
    let mut probs = vec![T::zero(); rows * cols];
    let mut entropy_term = T::zero();
    for r in 0..rows {
        let row = &teacher.data()[r * cols..(r + 1) * cols];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lz = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
        for j in 0..cols {
            let lp = row[j] - lz;
            let p = lp.exp();
            probs[r * cols + j] = p;
            if p > T::zero() {
                entropy_term += p * lp;
            }
        }
    }
    let p = g.constant(Tensor::from_parts(vec![rows, cols], probs));
    let logq = g.log_softmax(student)?;
    let cross = g.mul(p, logq)?;
    let cross = g.sum(cross)?;
    // KL = sum P ln P - sum P ln Q
    let neg = g.scale(cross, -T::one())?;
    let offset = g.constant(Tensor::scalar(entropy_term));
    let kl = g.add(neg, offset)?;
    g.scale(kl, T::one() / T::lit(rows as f64))
}

/// Mean squared difference of logits over batch and classes; teacher constant.
pub fn mse_logit_loss<T: Scalar>(g: &mut Graph<T>, teacher: &Tensor<T>, student: Var) -> Result<Var> {
    if g.value(student).shape() != teacher.shape() {
        return shape_err(
            "mse_logit_loss",
            format!("teacher {:?} vs student {:?}", teacher.shape(), g.value(student).shape()),
        );
    }
    let t = g.constant(teacher.clone());
    let d = g.sub(student, t)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Mean negative log-softmax probability of the true class.
pub fn nll_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, labels)?;
    let m = g.mean(picked)?;
    g.scale(m, -T::one())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdKind {
    Mse,
    Kl,
}

/// Weights and selectors of the composite objective
/// `alpha * KD + beta * sum_l FA_l + gamma * NLL`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub kd_kind: KdKind,
    pub label_free: bool,
    pub tap_count: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 0.5, kd_kind: KdKind::Mse, label_free: false, tap_count: 3 }
    }
}

impl LossConfig {
    /// Quantized-distillation baseline `alpha KD + (1 - alpha) GT` with KL.
    pub fn qd(alpha: f64) -> Self {
        Self { alpha, beta: 0.0, gamma: 1.0 - alpha, kd_kind: KdKind::Kl, label_free: false, tap_count: 3 }
    }

    /// Label-free objective `alpha MSE + beta FA`.
    pub fn label_free(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta, gamma: 0.0, kd_kind: KdKind::Mse, label_free: true, tap_count: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.tap_count == 0 {
            return Err(Error::Config("tap count must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_gamma(&self) -> f64 {
        if self.label_free { 0.0 } else { self.gamma }
    }
}

/// Unweighted loss terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub kd: f64,
    pub fa: f64,
    pub gt: f64,
    pub total: f64,
}

/// How the affinity term is evaluated for each tap.
pub enum FaRoute<'a, T: Scalar> {
    Exact,
    /// One sketch per tap.
    Sketched(&'a [SketchMatrix<T>]),
}

/// Builds the composite objective on `g`.
///
/// Teacher logits and taps are constants. The label term is dropped entirely
/// (labels never touched) when `cfg.label_free` is set.
#[allow(clippy::too_many_arguments)]
pub fn faqd_loss<T: Scalar>(
    g: &mut Graph<T>,
    teacher_logits: &Tensor<T>,
    student_logits: Var,
    teacher_taps: &[Tensor<T>],
    student_taps: &[Var],
    labels: Option<&[usize]>,
    cfg: &LossConfig,
    route: FaRoute<'_, T>,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if teacher_taps.len() != student_taps.len() {
        return Err(Error::Input(format!(
            "teacher has {} taps, student has {}",
            teacher_taps.len(),
            student_taps.len()
        )));
    }
    if !cfg.label_free && labels.is_none() {
        return Err(Error::Input("labels are required unless the objective is label-free".into()));
    }

    let kd = match cfg.kd_kind {
        KdKind::Mse => mse_logit_loss(g, teacher_logits, student_logits)?,
        KdKind::Kl => kl_loss(g, teacher_logits, student_logits)?,
    };
    let mut breakdown = LossBreakdown { kd: g.value(kd).item().as_f64(), ..Default::default() };
    let mut total = g.scale(kd, T::lit(cfg.alpha))?;

    // the affinity term is skipped (reported as 0) when its weight is zero
    if cfg.beta > 0.0 {
        let mut fa_sum: Option<Var> = None;
        for (l, (tt, &st)) in teacher_taps.iter().zip(student_taps).enumerate() {
            let term = match &route {
                FaRoute::Exact => {
                    let tv = g.constant(tt.clone());
                    fa_loss(g, st, tv)?
                }
                FaRoute::Sketched(sketches) => {
                    let sk = sketches.get(l).ok_or_else(|| Error::Input(format!("no sketch for tap {l}")))?;
                    ffa_loss(g, st, tt, sk)?
                }
            };
            fa_sum = Some(match fa_sum {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        if let Some(fa) = fa_sum {
            breakdown.fa = g.value(fa).item().as_f64();
            let w = g.scale(fa, T::lit(cfg.beta))?;
            total = g.add(total, w)?;
        }
    }

    if !cfg.label_free {
        let labels = labels.expect("checked above");
        let nll = nll_loss(g, student_logits, labels)?;
        breakdown.gt = g.value(nll).item().as_f64();
        if cfg.gamma > 0.0 {
            let w = g.scale(nll, T::lit(cfg.gamma))?;
            total = g.add(total, w)?;
        }
    }
    breakdown.total = g.value(total).item().as_f64();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fmap(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(Tensor::randn(&[c, h, w], 1.0, &mut rng)).unwrap()
    }

    /// Elementwise double-loop evaluation of the affinity loss.
    fn fa_oracle(s: &FeatureMap<f64>, t: &FeatureMap<f64>) -> f64 {
        let cos = |f: &FeatureMap<f64>, i: usize, j: usize| {
            let (c, h, w) = f.dims();
            let n = h * w;
            let d = f.values().data();
            let (mut ip, mut ni, mut nj) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                ip += d[ch * n + i] * d[ch * n + j];
                ni += d[ch * n + i] * d[ch * n + i];
                nj += d[ch * n + j] * d[ch * n + j];
            }
            ip / (ni.sqrt() * nj.sqrt())
        };
        let n = s.pixels();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = cos(t, i, j) - cos(s, i, j);
                acc += d * d;
            }
        }
        acc / (n * n) as f64
    }

    #[test]
    fn normalize_examples() {
        let f = FeatureMap::new(Tensor::<f64>::from_f64(&[2, 1, 2], &[3.0, 0.0, 4.0, 0.0]).unwrap()).unwrap();
        let n = normalize_pixels(&f);
        assert_eq!(n.values().data(), &[0.6, 0.0, 0.8, 0.0]);
        let again = normalize_pixels(&n);
        for (a, b) in again.values().data().iter().zip(n.values().data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn affinity_examples() {
        let f = FeatureMap::new(Tensor::<f64>::from_f64(&[2, 1, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(affinity_matrix(&f, 0).unwrap().values, vec![1.0, 0.0, 0.0, 1.0]);
        let f = FeatureMap::new(Tensor::<f64>::from_f64(&[2, 2, 1], &[0.5, 0.5, -1.0, -1.0]).unwrap()).unwrap();
        for v in affinity_matrix(&f, 0).unwrap().values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affinity_matches_double_loop() {
        let f = fmap(3, 2, 2, 5);
        let s = affinity_matrix(&f, 0).unwrap();
        let d = f.values().data();
        for i in 0..4 {
            for j in 0..4 {
                let (mut ip, mut ni, mut nj) = (0.0, 0.0, 0.0);
                for c in 0..3 {
                    ip += d[c * 4 + i] * d[c * 4 + j];
                    ni += d[c * 4 + i].powi(2);
                    nj += d[c * 4 + j].powi(2);
                }
                assert!((s.get(i, j) - ip / (ni * nj).sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fa_loss_invariances() {
        let t = fmap(8, 4, 4, 1);
        assert_eq!(fa_loss_value(&t, &t).unwrap(), 0.0);
        let scaled = FeatureMap::new(t.values().map(|v| 3.7 * v)).unwrap();
        assert!(fa_loss_value(&scaled, &t).unwrap().abs() < 1e-10);
        let neg = FeatureMap::new(t.values().map(|v| -v)).unwrap();
        assert!(fa_loss_value(&neg, &t).unwrap().abs() < 1e-10);
    }

    #[test]
    fn fa_loss_matches_oracle_with_channel_mismatch() {
        let s = fmap(8, 4, 4, 2);
        let t = fmap(16, 4, 4, 3);
        let got = fa_loss_value(&s, &t).unwrap();
        let want = fa_oracle(&s, &t);
        assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn kl_examples() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&p, &q).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.14384).abs() < 1e-5);
        assert!((kl_divergence(&p, &q).unwrap() - kl_divergence(&q, &p).unwrap()).abs() > 1e-3);

        // same pair through the graph, logits = ln(prob)
        let mut g = Graph::<f64>::new();
        let tl = Tensor::<f64>::from_f64(&[1, 2], &[0.5f64.ln(), 0.5f64.ln()]).unwrap();
        let s = g.leaf(Tensor::<f64>::from_f64(&[1, 2], &[0.25f64.ln(), 0.75f64.ln()]).unwrap(), true);
        let l = kl_loss(&mut g, &tl, s).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-12);

        let mut g = Graph::<f64>::new();
        let s = g.leaf(tl.clone(), true);
        let l = kl_loss(&mut g, &tl, s).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let s = g.leaf(Tensor::<f64>::from_f64(&[1, 2], &[1.0, 4.0]).unwrap(), true);
        let l = mse_logit_loss(&mut g, &t, s).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let bad = g.leaf(Tensor::<f64>::from_f64(&[1, 3], &[0.0; 3]).unwrap(), true);
        assert!(matches!(mse_logit_loss(&mut g, &t, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn nll_examples() {
        let mut g = Graph::<f64>::new();
        let s = g.leaf(Tensor::<f64>::from_f64(&[1, 2], &[10.0, -10.0]).unwrap(), true);
        let l = nll_loss(&mut g, s, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-4);
        let u = g.leaf(Tensor::<f64>::zeros(&[1, 10]), true);
        let l = nll_loss(&mut g, u, &[4]).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-6);
        assert!(matches!(nll_loss(&mut g, u, &[10]), Err(Error::Input(_))));
    }

    #[test]
    fn faqd_requires_labels_unless_label_free() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let s = g.leaf(t.clone(), true);
        let cfg = LossConfig { tap_count: 1, ..Default::default() };
        assert!(matches!(
            faqd_loss(&mut g, &t, s, &[], &[], None, &cfg, FaRoute::Exact),
            Err(Error::Input(_))
        ));
        let lf = LossConfig { tap_count: 1, ..LossConfig::label_free(1.0, 1.0) };
        let (_, b) = faqd_loss(&mut g, &t, s, &[], &[], None, &lf, FaRoute::Exact).unwrap();
        assert_eq!(b.total, 0.0);
        let tap = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        assert!(matches!(
            faqd_loss(&mut g, &t, s, &[tap], &[], None, &lf, FaRoute::Exact),
            Err(Error::Input(_))
        ));
    }
}
