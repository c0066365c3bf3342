//! Weight projections, BinaryRelax blending and the quantized ReLU with its
//! straight-through backward.

use std::sync::Arc;

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the per-layer scale of the codebook is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScaleRule {
    /// `mean|w|` for 1 bit, `max|w| / (2^(b-1) - 1)` otherwise.
    Adaptive,
    /// Fixed scale (alpha for 1 bit, grid step for b >= 2).
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantScheme {
    pub bits: u32,
    pub scale: ScaleRule,
}

impl QuantScheme {
    pub fn new(bits: u32) -> Result<Self> {
        if !matches!(bits, 1 | 2 | 4 | 32) {
            return Err(Error::Config(format!("unsupported weight bit-width {bits} (expected 1, 2, 4 or 32)")));
        }
        Ok(Self { bits, scale: ScaleRule::Adaptive })
    }

    pub fn with_fixed_scale(bits: u32, scale: f64) -> Result<Self> {
        let mut s = Self::new(bits)?;
        s.scale = ScaleRule::Fixed(scale);
        Ok(s)
    }

    pub fn float() -> Self {
        Self { bits: 32, scale: ScaleRule::Adaptive }
    }

    pub fn is_float(&self) -> bool {
        self.bits == 32
    }

    /// Largest grid index `2^(b-1) - 1` for the multi-bit grid.
    pub fn max_level(&self) -> u32 {
        (1u32 << (self.bits - 1)) - 1
    }
}

/// Shadow weights, the weights used in the forward pass and the BinaryRelax
/// relaxation state.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayerState<T: Scalar> {
    pub w: Tensor<T>,
    pub u: Tensor<T>,
    pub lambda: T,
    pub eta: T,
    pub scheme: QuantScheme,
    pub relaxed: bool,
}

impl<T: Scalar> QuantizedLayerState<T> {
    /// Hard projection state (pure QAT): `u = Quant(w)`.
    pub fn qat(w: Tensor<T>, scheme: QuantScheme) -> Result<Self> {
        let u = quantize_weights(&w, &scheme)?;
        Ok(Self { w, u, lambda: T::zero(), eta: T::lit(1.02), scheme, relaxed: false })
    }

    /// BinaryRelax state: `u = (w + lambda Quant(w)) / (1 + lambda)`.
    pub fn binary_relax(w: Tensor<T>, scheme: QuantScheme, lambda: T, eta: T) -> Result<Self> {
        if eta <= T::one() {
            return Err(Error::Config(format!("relaxation growth factor must exceed 1, got {eta}")));
        }
        let u = binary_relax_blend(&w, lambda, &scheme)?;
        Ok(Self { w, u, lambda, eta, scheme, relaxed: true })
    }

    /// Recomputes `u` from the current shadow weights.
    pub fn refresh(&mut self) -> Result<()> {
        self.u = if self.relaxed {
            binary_relax_blend(&self.w, self.lambda, &self.scheme)?
        } else {
            quantize_weights(&self.w, &self.scheme)?
        };
        Ok(())
    }

    /// `w <- w - delta`, then re-projects.
    pub fn apply_update(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.w.numel() {
            return shape_err("apply_update", format!("{} deltas for {} weights", delta.len(), self.w.numel()));
        }
        self.w.data_mut().iter_mut().zip(delta).for_each(|(w, &d)| *w -= d);
        self.refresh()
    }
}

fn check_finite<T: Scalar>(w: &Tensor<T>) -> Result<()> {
    if w.has_nan() {
        return Err(Error::Input("weights contain NaN".into()));
    }
    Ok(())
}

/// One application of the projection rule, without the fixed-point guard.
fn project_once<T: Scalar>(w: &[T], scheme: &QuantScheme) -> Vec<T> {
    match scheme.bits {
        32 => w.to_vec(),
        1 => {
            let alpha = match scheme.scale {
                ScaleRule::Fixed(a) => T::lit(a),
                ScaleRule::Adaptive => {
                    // f64 accumulation keeps a projected layer's mean at exactly alpha
                    T::lit(w.iter().map(|v| v.abs().as_f64()).sum::<f64>() / w.len() as f64)
                }
            };
            w.iter().map(|&v| if v < T::zero() { -alpha } else { alpha }).collect()
        }
        _ => {
            let levels = T::lit(scheme.max_level() as f64);
            let delta = match scheme.scale {
                ScaleRule::Fixed(d) => T::lit(d),
                ScaleRule::Adaptive => {
                    let m = w.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
                    if m == T::zero() {
                        T::one()
                    } else {
                        m / levels
                    }
                }
            };
            w.iter().map(|&v| delta * (v / delta).round().max(-levels).min(levels)).collect()
        }
    }
}

/// Projects weights onto the per-layer codebook.
///
/// 1 bit: `alpha * sign(w)` with `alpha = mean|w|` (sign(0) = +1).
/// 2/4 bits: `delta * clamp(round(w / delta), -(2^(b-1)-1), 2^(b-1)-1)` with
/// `delta = max|w| / (2^(b-1)-1)`. 32 bits: identity.
///
/// The adaptive scale is recomputed from the projected values until it is
/// stable, so the returned tensor is an exact fixed point of the projection.
pub fn quantize_weights<T: Scalar>(w: &Tensor<T>, scheme: &QuantScheme) -> Result<Tensor<T>> {
    check_finite(w)?;
    let mut cur = project_once(w.data(), scheme);
    for _ in 0..16 {
        let next = project_once(&cur, scheme);
        if next == cur {
            break;
        }
        cur = next;
    }
    Ok(Tensor::from_parts(w.shape().to_vec(), cur))
}

/// `(w + lambda * Quant(w)) / (1 + lambda)`.
pub fn binary_relax_blend<T: Scalar>(w: &Tensor<T>, lambda: T, scheme: &QuantScheme) -> Result<Tensor<T>> {
    if !(lambda >= T::zero()) {
        return Err(Error::Input(format!("relaxation weight must be nonnegative, got {lambda}")));
    }
    let q = quantize_weights(w, scheme)?;
    if lambda == T::zero() {
        return Ok(Tensor::from_parts(w.shape().to_vec(), w.data().to_vec()));
    }
    let denom = T::one() + lambda;
    let data = w.data().iter().zip(q.data()).map(|(&a, &b)| (a + lambda * b) / denom).collect();
    Ok(Tensor::from_parts(w.shape().to_vec(), data))
}

/// Grows `lambda` by `eta` and recomputes the blended weights.
pub fn relax_schedule_step<T: Scalar>(state: &QuantizedLayerState<T>) -> Result<QuantizedLayerState<T>> {
    if state.eta <= T::one() {
        return Err(Error::Config(format!("relaxation growth factor must exceed 1, got {}", state.eta)));
    }
    let mut next = state.clone();
    next.lambda = state.lambda * state.eta;
    next.u = binary_relax_blend(&next.w, next.lambda, &next.scheme)?;
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QReluParams<T> {
    pub alpha: T,
    pub act_bits: u32,
}

impl<T: Scalar> QReluParams<T> {
    pub fn new(alpha: T, act_bits: u32) -> Result<Self> {
        if !(alpha > T::zero()) {
            return Err(Error::Input(format!("activation resolution must be positive, got {alpha}")));
        }
        if !matches!(act_bits, 1 | 2 | 4 | 32) {
            return Err(Error::Config(format!("unsupported activation bit-width {act_bits}")));
        }
        Ok(Self { alpha, act_bits })
    }

    /// Number of nonzero levels, `2^b - 1`.
    pub fn levels(&self) -> T {
        T::lit(((1u64 << self.act_bits) - 1) as f64)
    }

    /// Saturation point `(2^b - 1) * alpha`.
    pub fn ceiling(&self) -> T {
        self.levels() * self.alpha
    }
}

fn qrelu_scalar<T: Scalar>(x: T, alpha: T, levels: T) -> T {
    if x.is_nan() {
        x
    } else if x < T::zero() {
        T::zero()
    } else if x >= levels * alpha {
        levels * alpha
    } else {
        let k = ((x / alpha).floor() + T::one()).max(T::one()).min(levels);
        k * alpha
    }
}

/// Staircase activation: 0 below zero, `k * alpha` on `[(k-1) alpha, k alpha)`,
/// saturating at `(2^b - 1) alpha`. 32 bits is a plain ReLU.
pub fn qrelu_forward<T: Scalar>(x: &Tensor<T>, p: &QReluParams<T>) -> Tensor<T> {
    if p.act_bits == 32 {
        return x.map(|v| if v < T::zero() { T::zero() } else { v });
    }
    let levels = p.levels();
    x.map(|v| qrelu_scalar(v, p.alpha, levels))
}

/// Clipped-ReLU derivative for `x` and the three-valued proxy for `alpha`.
pub fn qrelu_backward_ste<T: Scalar>(x: &Tensor<T>, p: &QReluParams<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, T)> {
    if x.shape() != upstream.shape() {
        return shape_err("qrelu_backward_ste", format!("{:?} vs {:?}", x.shape(), upstream.shape()));
    }
    if p.act_bits == 32 {
        let dx = x.data().iter().zip(upstream.data()).map(|(&v, &u)| if v > T::zero() { u } else { T::zero() }).collect();
        return Ok((Tensor::from_parts(x.shape().to_vec(), dx), T::zero()));
    }
    let ceiling = p.ceiling();
    let mid = T::lit((1u64 << (p.act_bits - 1)) as f64);
    let top = p.levels();
    let mut dalpha = T::zero();
    let dx = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &u)| {
            if v <= T::zero() {
                T::zero()
            } else if v < ceiling {
                dalpha += u * mid;
                u
            } else {
                dalpha += u * top;
                T::zero()
            }
        })
        .collect();
    Ok((Tensor::from_parts(x.shape().to_vec(), dx), dalpha))
}

/// Quantized ReLU as an autodiff primitive with inputs `[x, alpha]`
/// (`alpha` a one-element tensor).
pub struct QReluOp {
    pub act_bits: u32,
}

impl<T: Scalar> CustomOp<T> for QReluOp {
    fn name(&self) -> &str {
        match self.act_bits {
            1 => "qrelu1",
            2 => "qrelu2",
            4 => "qrelu4",
            _ => "qrelu",
        }
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let [x, alpha] = inputs else {
            return Err(Error::Config(format!("qrelu takes 2 inputs, got {}", inputs.len())));
        };
        let p = QReluParams::new(alpha.item(), self.act_bits)?;
        Ok(qrelu_forward(x, &p))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let [x, alpha] = inputs else {
            return Err(Error::Config(format!("qrelu takes 2 inputs, got {}", inputs.len())));
        };
        let p = QReluParams::new(alpha.item(), self.act_bits)?;
        let (dx, da) = qrelu_backward_ste(x, &p, upstream)?;
        Ok(vec![dx, Tensor::scalar(da)])
    }
}

/// Applies the quantized ReLU for `act_bits`, registering it on first use.
pub fn qrelu<T: Scalar>(g: &mut Graph<T>, x: Var, alpha: Var, act_bits: u32) -> Result<Var> {
    let op = QReluOp { act_bits };
    let name = CustomOp::<T>::name(&op).to_string();
    let id = match g.find_custom(&name) {
        Some(id) => id,
        None => g.register(Arc::new(op)),
    };
    g.apply(id, &[x, alpha])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn one_bit_uses_mean_magnitude() {
        let q = quantize_weights(&t(&[0.3, -0.5, 0.2]), &QuantScheme::new(1).unwrap()).unwrap();
        let a = 1.0 / 3.0;
        for (got, want) in q.data().iter().zip([a, -a, a]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_points_are_fixed() {
        let s = QuantScheme::new(4).unwrap();
        let w = t(&[0.875, -0.375, 0.125, 0.0, -0.875]);
        assert_eq!(quantize_weights(&w, &s).unwrap(), w);
    }

    #[test]
    fn zero_weights_stay_zero() {
        for bits in [1, 2, 4, 32] {
            let q = quantize_weights(&t(&[0.0, 0.0, 0.0]), &QuantScheme::new(bits).unwrap()).unwrap();
            assert!(q.data().iter().all(|&v| v == 0.0), "bits={bits}");
        }
    }

    #[test]
    fn nan_is_rejected() {
        let err = quantize_weights(&t(&[f64::NAN]), &QuantScheme::new(2).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn unsupported_bits_rejected() {
        assert!(matches!(QuantScheme::new(3), Err(Error::Config(_))));
    }

    #[test]
    fn blend_endpoints() {
        let s = QuantScheme::new(2).unwrap();
        let w = t(&[0.13, -0.77, 0.42, 0.05]);
        assert_eq!(binary_relax_blend(&w, 0.0, &s).unwrap(), w);
        let q = quantize_weights(&w, &s).unwrap();
        let b = binary_relax_blend(&w, 1e9, &s).unwrap();
        for (x, y) in b.data().iter().zip(q.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(matches!(binary_relax_blend(&w, -1.0, &s), Err(Error::Input(_))));
    }

    #[test]
    fn blend_hand_values() {
        let s = QuantScheme::new(1).unwrap();
        assert_eq!(binary_relax_blend(&t(&[1.0]), 1.0, &s).unwrap().data(), &[1.0]);
        assert_eq!(binary_relax_blend(&t(&[0.5]), 1.0, &s).unwrap().data(), &[0.5]);
        let b = binary_relax_blend(&t(&[0.2, 0.6]), 1.0, &s).unwrap();
        assert!((b.data()[0] - 0.3).abs() < 1e-12 && (b.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn schedule_compounds() {
        let s = QuantScheme::new(2).unwrap();
        let w = t(&[0.3, -0.9, 0.11]);
        let mut st = QuantizedLayerState::binary_relax(w.clone(), s, 1.0, 2.0).unwrap();
        for _ in 0..3 {
            st = relax_schedule_step(&st).unwrap();
        }
        assert_eq!(st.lambda, 8.0);

        let mut st = QuantizedLayerState::binary_relax(w.clone(), s, 1.0, 1.02).unwrap();
        for _ in 0..100 {
            st = relax_schedule_step(&st).unwrap();
        }
        assert!((st.lambda - 1.02f64.powi(100)).abs() < 1e-9);
        assert!((st.lambda - 7.2446).abs() < 1e-4);

        let mut st = QuantizedLayerState::binary_relax(w.clone(), s, 1.0, 10.0).unwrap();
        while st.lambda <= 1e7 {
            st = relax_schedule_step(&st).unwrap();
        }
        let q = quantize_weights(&w, &s).unwrap();
        for (a, b) in st.u.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn schedule_rejects_non_growing_eta() {
        let s = QuantScheme::new(2).unwrap();
        let mut st = QuantizedLayerState::binary_relax(t(&[0.1]), s, 1.0, 2.0).unwrap();
        st.eta = 1.0;
        assert!(matches!(relax_schedule_step(&st), Err(Error::Config(_))));
    }

    #[test]
    fn qrelu_cases() {
        let p = QReluParams::new(0.5, 2).unwrap();
        let y = qrelu_forward(&t(&[-1.0, 0.7, 10.0]), &p);
        assert_eq!(y.data(), &[0.0, 1.0, 1.5]);
    }

    #[test]
    fn qrelu_ste_cases() {
        let p = QReluParams::new(0.5, 2).unwrap();
        let ones = t(&[1.0]);
        let (dx, da) = qrelu_backward_ste(&t(&[0.3]), &p, &ones).unwrap();
        assert_eq!((dx.data()[0], da), (1.0, 2.0));
        let (dx, da) = qrelu_backward_ste(&t(&[-0.2]), &p, &ones).unwrap();
        assert_eq!((dx.data()[0], da), (0.0, 0.0));
        let (dx, da) = qrelu_backward_ste(&t(&[2.0]), &p, &ones).unwrap();
        assert_eq!((dx.data()[0], da), (0.0, 3.0));
    }

    fn codebook_ok(q: &[f64], bits: u32, w: &[f64]) -> bool {
        if bits == 1 {
            let a = q[0].abs();
            q.iter().all(|v| v.abs() == a)
        } else {
            let levels = ((1u32 << (bits - 1)) - 1) as f64;
            let m = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if m == 0.0 {
                return q.iter().all(|&v| v == 0.0);
            }
            let delta = q.iter().fold(0.0f64, |a, v| a.max(v.abs())) / levels;
            q.iter().all(|&v| {
                let k = v / delta;
                (k - k.round()).abs() < 1e-9 && k.abs() <= levels + 1e-9
            })
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(w in prop::collection::vec(-3.0f32..3.0, 1..40), bits in prop::sample::select(vec![1u32, 2, 4, 32])) {
            let w = Tensor::new(&[w.len()], w).unwrap();
            let s = QuantScheme::new(bits).unwrap();
            let q = quantize_weights(&w, &s).unwrap();
            prop_assert_eq!(quantize_weights(&q, &s).unwrap(), q);
        }

        #[test]
        fn projection_lands_in_codebook(w in prop::collection::vec(-3.0f64..3.0, 1..40), bits in prop::sample::select(vec![1u32, 2, 4])) {
            let s = QuantScheme::new(bits).unwrap();
            let q = quantize_weights(&t(&w), &s).unwrap();
            prop_assert!(codebook_ok(q.data(), bits, &w));
        }

        #[test]
        fn blend_is_convex_combination(w in prop::collection::vec(-3.0f64..3.0, 1..30), lambda in 0.0f64..50.0) {
            let s = QuantScheme::new(2).unwrap();
            let w = t(&w);
            let q = quantize_weights(&w, &s).unwrap();
            let b = binary_relax_blend(&w, lambda, &s).unwrap();
            for ((&x, &y), &z) in w.data().iter().zip(q.data()).zip(b.data()) {
                prop_assert!(z >= x.min(y) - 1e-12 && z <= x.max(y) + 1e-12);
            }
        }

        #[test]
        fn qrelu_is_monotone(mut xs in prop::collection::vec(-5.0f64..5.0, 2..40), alpha in 0.05f64..2.0, bits in prop::sample::select(vec![1u32, 2, 4, 32])) {
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let p = QReluParams::new(alpha, bits).unwrap();
            let y = qrelu_forward(&t(&xs), &p);
            prop_assert!(y.data().windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
