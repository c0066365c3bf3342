//! Forward builders and local backward rules for the built-in primitives.

use super::{BatchStats, Dims4, Graph, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => shape_err(op, format!("expected a matrix, got {shape:?}")),
    }
}

/// Bilinear source coordinate (half-pixel centres), returning the two taps and
/// the weight of the upper tap.
fn bilinear_tap(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

impl<T: Scalar> Graph<T> {
    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = matrix_dims("matmul", self.value(a).shape())?;
        let (k2, n) = matrix_dims("matmul", self.value(b).shape())?;
        if k != k2 {
            return shape_err("matmul", format!("inner dimensions {k} and {k2} differ"));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a: a.index, b: b.index, m, k, n },
            rg,
        ))
    }

    /// 2-D cross-correlation of `x [B, C, H, W]` with `w [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let d = Dims4::of("conv2d", self.value(x).shape())?;
        let [o, c, kh, kw] = *self.value(w).shape() else {
            return shape_err("conv2d", format!("weight must be 4-D, got {:?}", self.value(w).shape()));
        };
        if c != d.c {
            return shape_err("conv2d", format!("input has {} channels, weight expects {c}", d.c));
        }
        if stride == 0 || d.h + 2 * padding < kh || d.w + 2 * padding < kw {
            return shape_err("conv2d", format!("kernel {kh}x{kw} does not fit input {}x{} (padding {padding}, stride {stride})", d.h, d.w));
        }
        let geom = ConvGeometry { channels: c, height: d.h, width: d.w, kernel_h: kh, kernel_w: kw, stride, padding };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let plane = ho * wo;
        let patch = geom.patch_len();
        let mut out = vec![T::zero(); d.b * o * plane];
        let mut cols = vec![T::zero(); patch * plane];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        for b in 0..d.b {
            kernels::im2col(&geom, &xs[b * c * d.plane()..(b + 1) * c * d.plane()], &mut cols);
            kernels::gemm_nn(o, patch, plane, ws, &cols, &mut out[b * o * plane..(b + 1) * o * plane]);
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::from_parts(vec![d.b, o, ho, wo], out),
            Op::Conv2d { x: x.index, w: w.index, geom, batch: d.b, out_ch: o },
            rg,
        ))
    }

    /// Adds a per-channel bias to `x [B, C, ...]`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return shape_err("bias_add", format!("input {shape:?} has no channel axis"));
        }
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        if self.value(bias).numel() != channels {
            return shape_err("bias_add", format!("bias of {} for {channels} channels", self.value(bias).numel()));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bv[(i / inner) % channels];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BiasAdd { x: x.index, bias: bias.index, channels, inner },
            rg,
        ))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check(a)?;
        self.check(b)?;
        same_shape(name, self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(self.value(a).shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a.index, b.index), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a.index, b.index), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a.index, b.index), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v * c);
        Ok(self.unary(x, out, Op::Scale(x.index, c)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
        Ok(self.unary(x, out, Op::Relu(x.index)))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v * v);
        Ok(self.unary(x, out, Op::Square(x.index)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| v.ln());
        Ok(self.unary(x, out, Op::Log(x.index)))
    }

    /// Non-overlapping `k x k` mean pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check(x)?;
        let d = Dims4::of("avg_pool", self.value(x).shape())?;
        if k == 0 || d.h % k != 0 || d.w % k != 0 {
            return shape_err("avg_pool", format!("window {k} does not tile {}x{}", d.h, d.w));
        }
        let (ho, wo) = (d.h / k, d.w / k);
        let inv = T::one() / T::lit((k * k) as f64);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); d.b * d.c * ho * wo];
        for bc in 0..d.b * d.c {
            let src = &xs[bc * d.plane()..(bc + 1) * d.plane()];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            s += src[(oy * k + dy) * d.w + ox * k + dx];
                        }
                    }
                    out[bc * ho * wo + oy * wo + ox] = s * inv;
                }
            }
        }
        Ok(self.unary(x, Tensor::from_parts(vec![d.b, d.c, ho, wo], out), Op::AvgPool { x: x.index, k, dims: d }))
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let d = Dims4::of("global_avg_pool", self.value(x).shape())?;
        let inv = T::one() / T::lit(d.plane() as f64);
        let out = self
            .value(x)
            .data()
            .chunks(d.plane())
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.unary(x, Tensor::from_parts(vec![d.b, d.c], out), Op::GlobalAvgPool { x: x.index, dims: d }))
    }

    /// Training-mode batch normalization over the channel axis. Returns the
    /// normalized output and the batch statistics for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        self.check(x)?;
        let d = Dims4::of("batch_norm", self.value(x).shape())?;
        let count = d.b * d.plane();
        if count < 2 {
            return shape_err("batch_norm", "training mode needs more than one value per channel");
        }
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); d.c];
        let mut var = vec![T::zero(); d.c];
        for c in 0..d.c {
            let mut s = T::zero();
            for b in 0..d.b {
                s += xs[(b * d.c + c) * d.plane()..(b * d.c + c + 1) * d.plane()].iter().copied().sum::<T>();
            }
            let mu = s / T::lit(count as f64);
            let mut ss = T::zero();
            for b in 0..d.b {
                for &v in &xs[(b * d.c + c) * d.plane()..(b * d.c + c + 1) * d.plane()] {
                    ss += (v - mu) * (v - mu);
                }
            }
            mean[c] = mu;
            var[c] = ss / T::lit(count as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let unbiased = var.iter().map(|&v| v * T::lit(count as f64) / T::lit((count - 1) as f64)).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true, d)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        self.check(x)?;
        let d = Dims4::of("batch_norm", self.value(x).shape())?;
        if mean.len() != d.c || var.len() != d.c {
            return shape_err("batch_norm", format!("running stats of length {} for {} channels", mean.len(), d.c));
        }
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false, d)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: Vec<T>, training: bool, d: Dims4) -> Result<Var> {
        self.check(gamma)?;
        self.check(beta)?;
        if self.value(gamma).numel() != d.c || self.value(beta).numel() != d.c {
            return shape_err("batch_norm", format!("affine parameters must have {} entries", d.c));
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let xs = self.value(x).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for (i, &v) in xs.iter().enumerate() {
            let c = (i / d.plane()) % d.c;
            let h = (v - mean[c]) * inv_std[c];
            xhat[i] = h;
            out[i] = g[c] * h + bt[c];
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(self.value(x).shape().to_vec(), out),
            Op::BatchNorm { x: x.index, gamma: gamma.index, beta: beta.index, xhat, inv_std, training, dims: d },
            rg,
        ))
    }

    fn row_softmax(&self, x: Var) -> Result<(usize, usize, Vec<T>, Vec<T>)> {
        let (rows, cols) = matrix_dims("softmax", self.value(x).shape())?;
        let xs = self.value(x).data();
        let mut probs = vec![T::zero(); xs.len()];
        let mut logp = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lz = z.ln() + mx;
            for j in 0..cols {
                logp[r * cols + j] = row[j] - lz;
                probs[r * cols + j] = (row[j] - lz).exp();
            }
        }
        Ok((rows, cols, probs, logp))
    }

    /// Row-wise softmax of a `[rows, cols]` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (rows, cols, probs, _) = self.row_softmax(x)?;
        Ok(self.unary(x, Tensor::from_parts(vec![rows, cols], probs), Op::Softmax { x: x.index, rows, cols }))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (rows, cols, _, logp) = self.row_softmax(x)?;
        Ok(self.unary(x, Tensor::from_parts(vec![rows, cols], logp), Op::LogSoftmax { x: x.index, rows, cols }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum();
        Ok(self.unary(x, Tensor::scalar(s), Op::Sum(x.index)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.value(x).sum() / n;
        Ok(self.unary(x, Tensor::scalar(s), Op::Mean(x.index)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).clone().reshape(shape)?;
        let mut out = Tensor::from_parts(out.shape().to_vec(), out.into_data());
        out.set_requires_grad(false);
        Ok(self.unary(x, out, Op::Reshape(x.index)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (rows, cols) = matrix_dims("transpose", self.value(x).shape())?;
        let out = kernels::transpose(rows, cols, self.value(x).data());
        Ok(self.unary(x, Tensor::from_parts(vec![cols, rows], out), Op::Transpose { x: x.index, rows, cols }))
    }

    /// Divides each row by `max(||row||_2, eps)`.
    pub fn row_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        let (rows, cols) = matrix_dims("row_normalize", self.value(x).shape())?;
        let xs = self.value(x).data();
        let mut norms = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let n = kernels::dot(row, row).sqrt();
            norms[r] = n;
            let denom = n.max(eps);
            for j in 0..cols {
                out[r * cols + j] = row[j] / denom;
            }
        }
        Ok(self.unary(
            x,
            Tensor::from_parts(vec![rows, cols], out),
            Op::RowNormalize { x: x.index, rows, cols, norms, eps },
        ))
    }

    /// Views sample `sample` of `x [B, C, H, W]` as the `(H*W) x C` matrix
    /// whose row `i` is the channel vector of pixel `i` (row-major over H, W).
    pub fn pixel_matrix(&mut self, x: Var, sample: usize) -> Result<Var> {
        self.check(x)?;
        let d = Dims4::of("pixel_matrix", self.value(x).shape())?;
        if sample >= d.b {
            return shape_err("pixel_matrix", format!("sample {sample} out of batch {}", d.b));
        }
        let n = d.plane();
        let src = &self.value(x).data()[sample * d.c * n..(sample + 1) * d.c * n];
        let out = kernels::transpose(d.c, n, src);
        Ok(self.unary(x, Tensor::from_parts(vec![n, d.c], out), Op::PixelMatrix { x: x.index, sample, dims: d }))
    }

    /// Bilinear resize of `x [B, C, H, W]` to `out_h x out_w` (half-pixel centres).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check(x)?;
        let d = Dims4::of("resize_bilinear", self.value(x).shape())?;
        if out_h == 0 || out_w == 0 {
            return shape_err("resize_bilinear", "zero output size");
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); d.b * d.c * out_h * out_w];
        for bc in 0..d.b * d.c {
            let src = &xs[bc * d.plane()..(bc + 1) * d.plane()];
            for oy in 0..out_h {
                let (y0, y1, ly) = bilinear_tap(oy, d.h, out_h);
                for ox in 0..out_w {
                    let (x0, x1, lx) = bilinear_tap(ox, d.w, out_w);
                    let (ly, lx) = (T::lit(ly), T::lit(lx));
                    let top = src[y0 * d.w + x0] * (T::one() - lx) + src[y0 * d.w + x1] * lx;
                    let bot = src[y1 * d.w + x0] * (T::one() - lx) + src[y1 * d.w + x1] * lx;
                    out[bc * out_h * out_w + oy * out_w + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        Ok(self.unary(
            x,
            Tensor::from_parts(vec![d.b, d.c, out_h, out_w], out),
            Op::ResizeBilinear { x: x.index, dims: d, out_h, out_w },
        ))
    }

    /// Selects `x[b, labels[b]]` from a `[B, K]` matrix.
    pub fn pick(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        self.check(x)?;
        let (rows, classes) = matrix_dims("pick", self.value(x).shape())?;
        if labels.len() != rows {
            return shape_err("pick", format!("{} labels for {rows} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        let xs = self.value(x).data();
        let out = labels.iter().enumerate().map(|(r, &l)| xs[r * classes + l]).collect();
        Ok(self.unary(
            x,
            Tensor::from_parts(vec![rows], out),
            Op::Pick { x: x.index, labels: labels.to_vec(), classes },
        ))
    }

    pub(crate) fn local_backward(&self, idx: usize, g: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
        let node = self.node(idx);
        let val = |i: usize| self.node(i).value.data();
        let out = node.value.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            &Op::MatMul { a, b, m, k, n } => {
                let mut ga = vec![T::zero(); m * k];
                kernels::gemm_nt(m, n, k, g, val(b), &mut ga);
                let mut gb = vec![T::zero(); k * n];
                kernels::gemm_tn(k, m, n, val(a), g, &mut gb);
                vec![(a, ga), (b, gb)]
            }
            &Op::Conv2d { x, w, geom, batch, out_ch } => {
                let plane = geom.out_height() * geom.out_width();
                let patch = geom.patch_len();
                let in_len = geom.channels * geom.height * geom.width;
                let xs = val(x);
                let ws = val(w);
                let mut gx = vec![T::zero(); batch * in_len];
                let mut gw = vec![T::zero(); out_ch * patch];
                let mut cols = vec![T::zero(); patch * plane];
                let mut gcols = vec![T::zero(); patch * plane];
                for b in 0..batch {
                    let gout = &g[b * out_ch * plane..(b + 1) * out_ch * plane];
                    kernels::im2col(&geom, &xs[b * in_len..(b + 1) * in_len], &mut cols);
                    kernels::gemm_nt(out_ch, plane, patch, gout, &cols, &mut gw);
                    gcols.iter_mut().for_each(|v| *v = T::zero());
                    kernels::gemm_tn(patch, out_ch, plane, ws, gout, &mut gcols);
                    kernels::col2im(&geom, &gcols, &mut gx[b * in_len..(b + 1) * in_len]);
                }
                vec![(x, gx), (w, gw)]
            }
            &Op::BiasAdd { x, bias, channels, inner } => {
                let mut gb = vec![T::zero(); channels];
                for (i, &v) in g.iter().enumerate() {
                    gb[(i / inner) % channels] += v;
                }
                vec![(x, g.to_vec()), (bias, gb)]
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|&v| -v).collect())],
            &Op::Mul(a, b) => {
                let ga = g.iter().zip(val(b)).map(|(&u, &y)| u * y).collect();
                let gb = g.iter().zip(val(a)).map(|(&u, &y)| u * y).collect();
                vec![(a, ga), (b, gb)]
            }
            &Op::Scale(x, c) => vec![(x, g.iter().map(|&v| v * c).collect())],
            &Op::Relu(x) => vec![(
                x,
                g.iter().zip(val(x)).map(|(&u, &v)| if v > T::zero() { u } else { T::zero() }).collect(),
            )],
            &Op::Square(x) => vec![(x, g.iter().zip(val(x)).map(|(&u, &v)| u * (v + v)).collect())],
            &Op::Log(x) => vec![(x, g.iter().zip(val(x)).map(|(&u, &v)| u / v).collect())],
            &Op::AvgPool { x, k, dims: d } => {
                let (ho, wo) = (d.h / k, d.w / k);
                let inv = T::one() / T::lit((k * k) as f64);
                let mut gx = vec![T::zero(); d.b * d.c * d.plane()];
                for bc in 0..d.b * d.c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let u = g[bc * ho * wo + oy * wo + ox] * inv;
                            for dy in 0..k {
                                for dx in 0..k {
                                    gx[bc * d.plane() + (oy * k + dy) * d.w + ox * k + dx] += u;
                                }
                            }
                        }
                    }
                }
                vec![(x, gx)]
            }
            &Op::GlobalAvgPool { x, dims: d } => {
                let inv = T::one() / T::lit(d.plane() as f64);
                let mut gx = vec![T::zero(); d.b * d.c * d.plane()];
                for (bc, &u) in g.iter().enumerate() {
                    gx[bc * d.plane()..(bc + 1) * d.plane()].iter_mut().for_each(|v| *v = u * inv);
                }
                vec![(x, gx)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training, dims: d } => {
                let gam = val(*gamma);
                let mut sum_g = vec![T::zero(); d.c];
                let mut sum_gx = vec![T::zero(); d.c];
                for (i, &u) in g.iter().enumerate() {
                    let c = (i / d.plane()) % d.c;
                    sum_g[c] += u;
                    sum_gx[c] += u * xhat[i];
                }
                let mut gx = vec![T::zero(); g.len()];
                if *training {
                    let m = T::lit((d.b * d.plane()) as f64);
                    for (i, &u) in g.iter().enumerate() {
                        let c = (i / d.plane()) % d.c;
                        gx[i] = gam[c] * inv_std[c] / m * (m * u - sum_g[c] - xhat[i] * sum_gx[c]);
                    }
                } else {
                    for (i, &u) in g.iter().enumerate() {
                        let c = (i / d.plane()) % d.c;
                        gx[i] = u * gam[c] * inv_std[c];
                    }
                }
                vec![(*x, gx), (*gamma, sum_gx), (*beta, sum_g)]
            }
            &Op::Softmax { x, rows, cols } => {
                let mut gx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let s = &out[r * cols..(r + 1) * cols];
                    let u = &g[r * cols..(r + 1) * cols];
                    let dotp = kernels::dot(s, u);
                    for j in 0..cols {
                        gx[r * cols + j] = s[j] * (u[j] - dotp);
                    }
                }
                vec![(x, gx)]
            }
            &Op::LogSoftmax { x, rows, cols } => {
                let mut gx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let u = &g[r * cols..(r + 1) * cols];
                    let total: T = u.iter().copied().sum();
                    for j in 0..cols {
                        gx[r * cols + j] = u[j] - out[r * cols + j].exp() * total;
                    }
                }
                vec![(x, gx)]
            }
            &Op::Sum(x) => vec![(x, vec![g[0]; self.node(x).value.numel()])],
            &Op::Mean(x) => {
                let n = self.node(x).value.numel();
                vec![(x, vec![g[0] / T::lit(n as f64); n])]
            }
            &Op::Reshape(x) => vec![(x, g.to_vec())],
            &Op::Transpose { x, rows, cols } => vec![(x, kernels::transpose(cols, rows, g))],
            Op::RowNormalize { x, rows, cols, norms, eps } => {
                let mut gx = vec![T::zero(); rows * cols];
                for r in 0..*rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let u = &g[r * cols..(r + 1) * cols];
                    if norms[r] > *eps {
                        let proj = kernels::dot(y, u);
                        for j in 0..*cols {
                            gx[r * cols + j] = (u[j] - y[j] * proj) / norms[r];
                        }
                    } else {
                        for j in 0..*cols {
                            gx[r * cols + j] = u[j] / *eps;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            &Op::PixelMatrix { x, sample, dims: d } => {
                let n = d.plane();
                let mut gx = vec![T::zero(); d.b * d.c * n];
                let block = kernels::transpose(n, d.c, g);
                gx[sample * d.c * n..(sample + 1) * d.c * n].copy_from_slice(&block);
                vec![(x, gx)]
            }
            &Op::ResizeBilinear { x, dims: d, out_h, out_w } => {
                let mut gx = vec![T::zero(); d.b * d.c * d.plane()];
                for bc in 0..d.b * d.c {
                    let dst = &mut gx[bc * d.plane()..(bc + 1) * d.plane()];
                    for oy in 0..out_h {
                        let (y0, y1, ly) = bilinear_tap(oy, d.h, out_h);
                        for ox in 0..out_w {
                            let (x0, x1, lx) = bilinear_tap(ox, d.w, out_w);
                            let (ly, lx) = (T::lit(ly), T::lit(lx));
                            let u = g[bc * out_h * out_w + oy * out_w + ox];
                            dst[y0 * d.w + x0] += u * (T::one() - ly) * (T::one() - lx);
                            dst[y0 * d.w + x1] += u * (T::one() - ly) * lx;
                            dst[y1 * d.w + x0] += u * ly * (T::one() - lx);
                            dst[y1 * d.w + x1] += u * ly * lx;
                        }
                    }
                }
                vec![(x, gx)]
            }
            Op::Pick { x, labels, classes } => {
                let mut gx = vec![T::zero(); labels.len() * classes];
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * classes + l] = g[r];
                }
                vec![(*x, gx)]
            }
            Op::Custom { id, inputs } => self.custom_backward(*id, inputs, idx, g)?,
        })
    }
}
