//! Small CIFAR-style ResNets with feature taps after every residual group,
//! plus a versioned binary checkpoint format.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::losses::FeatureMap;
use crate::quantizers::{qrelu, QuantScheme, QuantizedLayerState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"FAQD";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetSpec {
    pub name: String,
    pub depth: usize,
    pub group_channels: Vec<usize>,
    pub classes: usize,
    pub in_channels: usize,
    pub weight_bits: u32,
    pub act_bits: u32,
}

impl NetSpec {
    /// `depth` must be 8 or 20 (one or three basic blocks per group).
    pub fn resnet_tiny(depth: usize, classes: usize) -> Result<Self> {
        let spec = Self {
            name: format!("resnet-tiny-{depth}"),
            depth,
            group_channels: vec![16, 32, 64],
            classes,
            in_channels: 3,
            weight_bits: 32,
            act_bits: 32,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_name(name: &str, classes: usize) -> Result<Self> {
        match name {
            "resnet-tiny-8" => Self::resnet_tiny(8, classes),
            "resnet-tiny-20" => Self::resnet_tiny(20, classes),
            other => Err(Error::Config(format!(
                "unknown network '{other}' (expected resnet-tiny-8 or resnet-tiny-20)"
            ))),
        }
    }

    pub fn with_bits(mut self, weight_bits: u32, act_bits: u32) -> Result<Self> {
        self.weight_bits = weight_bits;
        self.act_bits = act_bits;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.depth, 8 | 20) {
            return Err(Error::Config(format!("unsupported depth {} (expected 8 or 20)", self.depth)));
        }
        if self.group_channels.is_empty() || self.group_channels.contains(&0) {
            return Err(Error::Config(format!("bad group widths {:?}", self.group_channels)));
        }
        if self.classes < 2 || self.in_channels == 0 {
            return Err(Error::Config("need at least two classes and one input channel".into()));
        }
        QuantScheme::new(self.weight_bits)?;
        if !matches!(self.act_bits, 1 | 2 | 4 | 32) {
            return Err(Error::Config(format!("unsupported activation bit-width {}", self.act_bits)));
        }
        Ok(())
    }

    pub fn tap_count(&self) -> usize {
        self.group_channels.len()
    }

    pub fn blocks_per_group(&self) -> usize {
        (self.depth - 2) / 6
    }

    fn record(&self) -> String {
        let groups: Vec<String> = self.group_channels.iter().map(|c| c.to_string()).collect();
        format!(
            "name={};depth={};groups={};classes={};in={};wbits={};abits={}",
            self.name,
            self.depth,
            groups.join(","),
            self.classes,
            self.in_channels,
            self.weight_bits,
            self.act_bits
        )
    }

    fn parse_record(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("spec record: {what}"));
        let mut map = HashMap::new();
        for kv in s.split(';') {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(&format!("malformed entry '{kv}'")))?;
            map.insert(k, v);
        }
        let get = |k: &str| map.get(k).copied().ok_or_else(|| bad(&format!("missing '{k}'")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(&format!("bad '{k}'"))) };
        let group_channels = get("groups")?
            .split(',')
            .map(|c| c.parse().map_err(|_| bad("bad 'groups'")))
            .collect::<Result<Vec<usize>>>()?;
        let spec = Self {
            name: get("name")?.to_string(),
            depth: num("depth")?,
            group_channels,
            classes: num("classes")?,
            in_channels: num("in")?,
            weight_bits: num("wbits")? as u32,
            act_bits: num("abits")? as u32,
        };
        spec.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Conv,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
    FcWeight,
    FcBias,
    /// Activation resolution of one quantized ReLU site.
    ActScale,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }

    /// Learnable network weights, as opposed to BN affine terms, running
    /// statistics and activation scales.
    pub fn is_weight(self) -> bool {
        matches!(self, ParamKind::Conv | ParamKind::FcWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamData<T: Scalar> {
    Float(Tensor<T>),
    Quantized(QuantizedLayerState<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub data: ParamData<T>,
}

impl<T: Scalar> Param<T> {
    /// Tensor used by the forward pass (`u` for quantized layers).
    pub fn forward_value(&self) -> &Tensor<T> {
        match &self.data {
            ParamData::Float(t) => t,
            ParamData::Quantized(q) => &q.u,
        }
    }

    /// Shadow (float) weights.
    pub fn shadow(&self) -> &Tensor<T> {
        match &self.data {
            ParamData::Float(t) => t,
            ParamData::Quantized(q) => &q.w,
        }
    }

    pub fn quant(&self) -> Option<&QuantizedLayerState<T>> {
        match &self.data {
            ParamData::Quantized(q) => Some(q),
            ParamData::Float(_) => None,
        }
    }

    pub fn quant_mut(&mut self) -> Option<&mut QuantizedLayerState<T>> {
        match &mut self.data {
            ParamData::Quantized(q) => Some(q),
            ParamData::Float(_) => None,
        }
    }

    /// `value <- value - delta`; quantized layers re-project afterwards.
    pub fn apply_update(&mut self, delta: &[T]) -> Result<()> {
        match &mut self.data {
            ParamData::Float(t) => {
                if delta.len() != t.numel() {
                    return Err(Error::Shape {
                        op: "apply_update",
                        detail: format!("{} deltas for {} values of {}", delta.len(), t.numel(), self.name),
                    });
                }
                t.data_mut().iter_mut().zip(delta).for_each(|(v, &d)| *v -= d);
                Ok(())
            }
            ParamData::Quantized(q) => q.apply_update(delta),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN.
    Train,
    /// Running statistics in BN.
    Infer,
}

/// How quantized conv layers map shadow weights to forward weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QuantMode {
    Qat,
    BinaryRelax { lambda: f64, eta: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar> {
    spec: NetSpec,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

/// Graph handles produced by one forward pass.
pub struct Forward<T: Scalar> {
    pub logits: Var,
    pub taps: Vec<Var>,
    /// Leaf for each parameter that entered the graph, by parameter index.
    pub param_vars: Vec<Option<Var>>,
    /// Batch statistics keyed by the index of the BN running-mean parameter.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

struct Builder<'a, T: Scalar> {
    net: &'a Network<T>,
    g: &'a mut Graph<T>,
    mode: Mode,
    trainable: bool,
    vars: Vec<Option<Var>>,
    stats: Vec<(usize, BatchStats<T>)>,
    site: usize,
    calibration: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> Builder<'_, T> {
    fn var(&mut self, name: &str) -> Result<Var> {
        let idx = self.net.param_index(name)?;
        if let Some(v) = self.vars[idx] {
            return Ok(v);
        }
        let p = &self.net.params[idx];
        let v = if self.trainable && p.kind.trainable() {
            self.g.param(p.forward_value())
        } else {
            self.g.constant(p.forward_value().clone())
        };
        self.vars[idx] = Some(v);
        Ok(v)
    }

    fn conv_bn(&mut self, x: Var, prefix: &str, stride: usize, padding: usize) -> Result<Var> {
        let w = self.var(&format!("{prefix}.w"))?;
        let y = self.g.conv2d(x, w, stride, padding)?;
        let gamma = self.var(&format!("{prefix}.bn.g"))?;
        let beta = self.var(&format!("{prefix}.bn.b"))?;
        let eps = T::lit(BN_EPS);
        match self.mode {
            Mode::Train => {
                let (out, stats) = self.g.batch_norm_train(y, gamma, beta, eps)?;
                let mean_idx = self.net.param_index(&format!("{prefix}.bn.mean"))?;
                self.stats.push((mean_idx, stats));
                Ok(out)
            }
            Mode::Infer => {
                let mean = self.net.param(&format!("{prefix}.bn.mean"))?.forward_value().data().to_vec();
                let var = self.net.param(&format!("{prefix}.bn.var"))?.forward_value().data().to_vec();
                self.g.batch_norm_infer(y, gamma, beta, &mean, &var, eps)
            }
        }
    }

    fn act(&mut self, x: Var) -> Result<Var> {
        let site = self.site;
        self.site += 1;
        if let Some(c) = &mut self.calibration {
            c.push(self.g.value(x).data().to_vec());
            return self.g.relu(x);
        }
        if self.net.spec.act_bits == 32 {
            return self.g.relu(x);
        }
        let alpha = self.var(&format!("act{site}.alpha"))?;
        qrelu(self.g, x, alpha, self.net.spec.act_bits)
    }

    fn run(&mut self, x: Var) -> Result<(Var, Vec<Var>)> {
        let spec = self.net.spec.clone();
        let mut h = self.conv_bn(x, "stem", 1, 1)?;
        h = self.act(h)?;
        let mut taps = Vec::with_capacity(spec.tap_count());
        let mut cin = spec.group_channels[0];
        for (gi, &cout) in spec.group_channels.iter().enumerate() {
            for bi in 0..spec.blocks_per_group() {
                let stride = if bi == 0 && gi > 0 { 2 } else { 1 };
                let p = format!("g{gi}.b{bi}");
                let mut y = self.conv_bn(h, &format!("{p}.conv1"), stride, 1)?;
                y = self.act(y)?;
                y = self.conv_bn(y, &format!("{p}.conv2"), 1, 1)?;
                let shortcut = if stride != 1 || cin != cout {
                    self.conv_bn(h, &format!("{p}.short"), stride, 0)?
                } else {
                    h
                };
                let sum = self.g.add(y, shortcut)?;
                h = self.act(sum)?;
                cin = cout;
            }
            taps.push(h);
        }
        let pooled = self.g.global_avg_pool(h)?;
        let fc_w = self.var("fc.w")?;
        let fc_b = self.var("fc.b")?;
        let z = self.g.matmul(pooled, fc_w)?;
        let logits = self.g.bias_add(z, fc_b)?;
        Ok((logits, taps))
    }
}

impl<T: Scalar> Network<T> {
    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::Config(format!("no parameter named '{name}'")))
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        Ok(&self.params[self.param_index(name)?])
    }

    /// Number of learnable scalars in convs, BN affine terms and the head.
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !matches!(p.kind, ParamKind::BnMean | ParamKind::BnVar | ParamKind::ActScale))
            .map(|p| p.shadow().numel())
            .sum()
    }

    /// Order-sensitive FNV-1a hash over every stored value's bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for t in [Some(p.shadow()), p.quant().map(|q| &q.u)].into_iter().flatten() {
                for v in t.data() {
                    eat(&v.as_f64().to_bits().to_le_bytes());
                }
            }
        }
        h
    }

    /// Switches every quantized layer between hard projection and
    /// BinaryRelax blending, recomputing forward weights.
    pub fn set_quant_mode(&mut self, mode: QuantMode) -> Result<()> {
        for p in &mut self.params {
            if let Some(q) = p.quant_mut() {
                match mode {
                    QuantMode::Qat => {
                        *q = QuantizedLayerState::qat(q.w.clone(), q.scheme)?;
                    }
                    QuantMode::BinaryRelax { lambda, eta } => {
                        *q = QuantizedLayerState::binary_relax(q.w.clone(), q.scheme, T::lit(lambda), T::lit(eta))?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Records the network on `g`. With `trainable`, every trainable
    /// parameter becomes a gradient-carrying leaf.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode, trainable: bool) -> Result<Forward<T>> {
        self.check_input(g.value(x).shape())?;
        let mut b = Builder {
            net: self,
            g,
            mode,
            trainable,
            vars: vec![None; self.params.len()],
            stats: Vec::new(),
            site: 0,
            calibration: None,
        };
        let (logits, taps) = b.run(x)?;
        Ok(Forward { logits, taps, param_vars: b.vars, bn_stats: b.stats })
    }

    /// Inference-mode forward returning plain logits and the group taps.
    pub fn forward_with_taps(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<FeatureMap<T>>)> {
        let (logits, taps) = self.forward_values(x)?;
        let taps = taps.into_iter().map(FeatureMap::new).collect::<Result<Vec<_>>>()?;
        Ok((logits, taps))
    }

    /// Like [`Network::forward_with_taps`] without validating tap values.
    pub fn forward_values(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, xv, Mode::Infer, false)?;
        let taps = f.taps.iter().map(|&t| g.value(t).clone()).collect();
        Ok((g.value(f.logits).clone(), taps))
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [b, c, h, w] if *b > 0 && *c == self.spec.in_channels && *h > 0 && *w > 0 => Ok(()),
            _ => Err(Error::Input(format!(
                "expected input [B, {}, H, W], got {shape:?}",
                self.spec.in_channels
            ))),
        }
    }

    /// Folds batch statistics into the BN running averages.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (mean_idx, s) in stats {
            for (idx, fresh) in [(*mean_idx, &s.mean), (*mean_idx + 1, &s.var)] {
                if let ParamData::Float(t) = &mut self.params[idx].data {
                    t.data_mut().iter_mut().zip(fresh).for_each(|(r, &f)| *r = keep * *r + m * f);
                }
            }
        }
    }

    /// Sets each quantized-ReLU resolution so its saturation point sits at
    /// the 99th percentile of the pre-activations seen on `x` (float ReLUs,
    /// batch statistics).
    pub fn calibrate_activations(&mut self, x: &Tensor<T>) -> Result<()> {
        if self.spec.act_bits == 32 {
            return Ok(());
        }
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut b = Builder {
            net: self,
            g: &mut g,
            mode: Mode::Train,
            trainable: false,
            vars: vec![None; self.params.len()],
            stats: Vec::new(),
            site: 0,
            calibration: Some(Vec::new()),
        };
        b.run(xv)?;
        let samples = b.calibration.take().unwrap_or_default();
        let levels = T::lit(((1u64 << self.spec.act_bits) - 1) as f64);
        for (site, mut values) in samples.into_iter().enumerate() {
            values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let at = ((values.len() as f64 - 1.0) * 0.99).round() as usize;
            let p99 = values.get(at).copied().unwrap_or(T::one());
            let alpha = (p99 / levels).max(T::lit(1e-3));
            let idx = self.param_index(&format!("act{site}.alpha"))?;
            self.params[idx].data = ParamData::Float(Tensor::scalar(alpha).reshape(&[1])?);
        }
        Ok(())
    }

    /// Current activation resolutions, in site order.
    pub fn act_scales(&self) -> Vec<T> {
        self.params.iter().filter(|p| p.kind == ParamKind::ActScale).map(|p| p.shadow().data()[0]).collect()
    }

    /// Same weights under new bit-widths: conv shadows are copied, forward
    /// weights re-projected and activation scales reset to defaults.
    pub fn requantize(&self, weight_bits: u32, act_bits: u32) -> Result<Network<T>> {
        let spec = self.spec.clone().with_bits(weight_bits, act_bits)?;
        let mut net = build_network::<T>(&spec, 0)?;
        for p in &mut net.params {
            if p.kind == ParamKind::ActScale {
                continue;
            }
            let src = self.param(&p.name)?.shadow().clone();
            p.data = match &p.data {
                ParamData::Quantized(q) => ParamData::Quantized(QuantizedLayerState::qat(src, q.scheme)?),
                ParamData::Float(_) => ParamData::Float(src),
            };
        }
        Ok(net)
    }

    /// Copy with every tensor converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let params = self
            .params
            .iter()
            .map(|p| Param {
                name: p.name.clone(),
                kind: p.kind,
                data: match &p.data {
                    ParamData::Float(t) => ParamData::Float(t.cast()),
                    ParamData::Quantized(q) => ParamData::Quantized(QuantizedLayerState {
                        w: q.w.cast(),
                        u: q.u.cast(),
                        lambda: U::lit(q.lambda.as_f64()),
                        eta: U::lit(q.eta.as_f64()),
                        scheme: q.scheme,
                        relaxed: q.relaxed,
                    }),
                },
            })
            .collect();
        Network { spec: self.spec.clone(), params, index: self.index.clone() }
    }
}

type Push<'a, T> = dyn FnMut(String, ParamKind, Tensor<T>) -> Result<()> + 'a;

fn init_conv_bn<T: Scalar>(push: &mut Push<'_, T>, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    push(format!("{prefix}.w"), ParamKind::Conv, Tensor::randn(&[cout, cin, k, k], std, rng))?;
    push(format!("{prefix}.bn.g"), ParamKind::BnScale, Tensor::ones(&[cout]))?;
    push(format!("{prefix}.bn.b"), ParamKind::BnShift, Tensor::zeros(&[cout]))?;
    push(format!("{prefix}.bn.mean"), ParamKind::BnMean, Tensor::zeros(&[cout]))?;
    push(format!("{prefix}.bn.var"), ParamKind::BnVar, Tensor::ones(&[cout]))
}

/// Builds a freshly initialised network: He-normal convs, unit BN scale,
/// zero BN shift, 1x1 projection shortcuts where the shape changes.
pub fn build_network<T: Scalar>(spec: &NetSpec, seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<Param<T>> = Vec::new();
    let scheme = QuantScheme::new(spec.weight_bits)?;

    let mut push = |name: String, kind: ParamKind, t: Tensor<T>| -> Result<()> {
        let data = if kind == ParamKind::Conv && !scheme.is_float() {
            ParamData::Quantized(QuantizedLayerState::qat(t, scheme)?)
        } else {
            ParamData::Float(t)
        };
        params.push(Param { name, kind, data });
        Ok(())
    };
    let mut sites = 0usize;
    let c0 = spec.group_channels[0];
    init_conv_bn(&mut push, &mut rng, "stem", spec.in_channels, c0, 3)?;
    sites += 1;
    let mut cin = c0;
    for (gi, &cout) in spec.group_channels.iter().enumerate() {
        for bi in 0..spec.blocks_per_group() {
            let stride = if bi == 0 && gi > 0 { 2 } else { 1 };
            let p = format!("g{gi}.b{bi}");
            init_conv_bn(&mut push, &mut rng, &format!("{p}.conv1"), cin, cout, 3)?;
            init_conv_bn(&mut push, &mut rng, &format!("{p}.conv2"), cout, cout, 3)?;
            if stride != 1 || cin != cout {
                init_conv_bn(&mut push, &mut rng, &format!("{p}.short"), cin, cout, 1)?;
            }
            sites += 2;
            cin = cout;
        }
    }
    let std = (1.0 / cin as f64).sqrt();
    push("fc.w".into(), ParamKind::FcWeight, Tensor::randn(&[cin, spec.classes], std, &mut rng))?;
    push("fc.b".into(), ParamKind::FcBias, Tensor::zeros(&[spec.classes]))?;
    if spec.act_bits != 32 {
        let alpha = 4.0 / ((1u64 << spec.act_bits) - 1) as f64;
        for s in 0..sites {
            push(format!("act{s}.alpha"), ParamKind::ActScale, Tensor::from_f64(&[1], &[alpha])?)?;
        }
    }

    let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    Ok(Network { spec: spec.clone(), params, index })
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: impl Iterator<Item = f32>) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len() as u32);
    for &d in shape {
        put_u32(buf, d as u32);
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises the network. Layout (little-endian): magic `FAQD`, `u32`
/// version, length-prefixed spec record, `u32` record count, then per
/// record a length-prefixed name, `u32` rank, `u32` dims and `f32` values.
/// Quantized layers add `<name>@u` (forward weights) and `<name>@relax`
/// (`[lambda, eta, relaxed]`) records after the shadow weights.
pub fn checkpoint_bytes<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut body = Vec::new();
    let mut count = 0u32;
    let f = |v: &T| v.as_f64() as f32;
    for p in &net.params {
        put_tensor(&mut body, &p.name, p.shadow().shape(), p.shadow().data().iter().map(f));
        count += 1;
        if let Some(q) = p.quant() {
            put_tensor(&mut body, &format!("{}@u", p.name), q.u.shape(), q.u.data().iter().map(f));
            let relax = [q.lambda.as_f64() as f32, q.eta.as_f64() as f32, if q.relaxed { 1.0 } else { 0.0 }];
            put_tensor(&mut body, &format!("{}@relax", p.name), &[3], relax.into_iter());
            count += 2;
        }
    }
    let mut buf = Vec::with_capacity(body.len() + 64);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let record = net.spec.record();
    put_u32(&mut buf, record.len() as u32);
    buf.extend_from_slice(record.as_bytes());
    put_u32(&mut buf, count);
    buf.extend_from_slice(&body);
    buf
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(net))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic (not a FAQD checkpoint)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("spec record length")? as usize;
    let record = std::str::from_utf8(r.take(len, "spec record")?)
        .map_err(|_| Error::Format("spec record is not UTF-8".into()))?;
    let spec = NetSpec::parse_record(record)?;
    let count = r.u32("record count")? as usize;

    let mut records: HashMap<String, (Vec<usize>, Vec<T>)> = HashMap::new();
    for i in 0..count {
        let what = format!("record {i}");
        let nlen = r.u32(&what)? as usize;
        let name = std::str::from_utf8(r.take(nlen, &what)?)
            .map_err(|_| Error::Format(format!("{what}: name is not UTF-8")))?
            .to_string();
        let what = format!("record {i} ('{name}')");
        let rank = r.u32(&what)? as usize;
        let shape = (0..rank).map(|_| r.u32(&what).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format(format!("{what}: absurd shape")))?, &what)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        records.insert(name, (shape, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
    }

    let mut net = build_network::<T>(&spec, 0)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
        let (s, v) = records.remove(name).ok_or_else(|| Error::Format(format!("missing record '{name}'")))?;
        if s != shape {
            return Err(Error::Format(format!("record '{name}' has shape {s:?}, expected {shape:?}")));
        }
        Tensor::new(&s, v)
    };
    for p in &mut net.params {
        let shape = p.shadow().shape().to_vec();
        let w = take(&p.name, &shape)?;
        match &mut p.data {
            ParamData::Float(t) => *t = w,
            ParamData::Quantized(q) => {
                let u = take(&format!("{}@u", p.name), &shape)?;
                let relax = take(&format!("{}@relax", p.name), &[3])?;
                let d = relax.data();
                *q = QuantizedLayerState { w, u, lambda: d[0], eta: d[1], scheme: q.scheme, relaxed: d[2] != T::zero() };
            }
        }
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::Format(format!("unexpected record '{extra}'")));
    }
    Ok(net)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Network<T>> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(b: usize, h: usize, seed: u64) -> Tensor<f32> {
        Tensor::randn(&[b, 3, h, h], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn tiny20_shapes() {
        let net = build_network::<f32>(&NetSpec::from_name("resnet-tiny-20", 10).unwrap(), 0).unwrap();
        let (logits, taps) = net.forward_with_taps(&input(1, 32, 1)).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
        let shapes: Vec<_> = taps.iter().map(|t| t.values().shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 16, 32, 32], vec![1, 32, 16, 16], vec![1, 64, 8, 8]]);
    }

    #[test]
    fn batch_dimension_carries_through() {
        let net = build_network::<f32>(&NetSpec::resnet_tiny(8, 4).unwrap(), 0).unwrap();
        let (logits, taps) = net.forward_with_taps(&input(2, 8, 1)).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
        assert!(taps.iter().all(|t| t.batch() == 2));
        assert_eq!(taps.len(), net.spec().tap_count());
    }

    #[test]
    fn seeding_is_deterministic() {
        let spec = NetSpec::resnet_tiny(8, 10).unwrap();
        let a = build_network::<f32>(&spec, 5).unwrap();
        let b = build_network::<f32>(&spec, 5).unwrap();
        let c = build_network::<f32>(&spec, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn tiny8_parameter_count() {
        let classes = 10;
        let conv_bn = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
        let expected = conv_bn(3, 16, 3)
            + conv_bn(16, 16, 3) + conv_bn(16, 16, 3)
            + conv_bn(16, 32, 3) + conv_bn(32, 32, 3) + conv_bn(16, 32, 1)
            + conv_bn(32, 64, 3) + conv_bn(64, 64, 3) + conv_bn(32, 64, 1)
            + 64 * classes + classes;
        let net = build_network::<f32>(&NetSpec::resnet_tiny(8, classes).unwrap(), 0).unwrap();
        assert_eq!(net.parameter_count(), expected);
    }

    #[test]
    fn unsupported_depth_is_config_error() {
        assert!(matches!(NetSpec::resnet_tiny(14, 10), Err(Error::Config(_))));
        let mut spec = NetSpec::resnet_tiny(8, 10).unwrap();
        spec.depth = 56;
        assert!(matches!(build_network::<f32>(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let net = build_network::<f32>(&NetSpec::resnet_tiny(8, 10).unwrap(), 0).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        assert!(matches!(net.forward_with_taps(&x), Err(Error::Input(_))));
    }

    #[test]
    fn float_spec_has_no_quant_state() {
        let net = build_network::<f32>(&NetSpec::resnet_tiny(8, 10).unwrap(), 3).unwrap();
        assert!(net.params().iter().all(|p| p.quant().is_none()));
        assert!(net.act_scales().is_empty());
    }

    #[test]
    fn one_bit_forward_weights_are_signed_scale() {
        let spec = NetSpec::resnet_tiny(8, 10).unwrap().with_bits(1, 32).unwrap();
        let net = build_network::<f32>(&spec, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(input(1, 8, 0));
        let f = net.forward(&mut g, x, Mode::Infer, true).unwrap();
        for (p, v) in net.params().iter().zip(&f.param_vars) {
            if p.kind != ParamKind::Conv {
                continue;
            }
            let q = p.quant().expect("every conv is quantized");
            let alpha = q.w.data().iter().map(|v| v.abs()).sum::<f32>() / q.w.numel() as f32;
            let used = g.value(v.unwrap());
            let level = used.data()[0].abs();
            assert!(used.data().iter().all(|&u| u.abs() == level), "{}", p.name);
            assert!((level - alpha).abs() <= 1e-5 * alpha, "{}: {level} vs {alpha}", p.name);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetSpec::resnet_tiny(8, 10).unwrap().with_bits(4, 2).unwrap();
        let mut net = build_network::<f32>(&spec, 9).unwrap();
        net.calibrate_activations(&input(4, 8, 2)).unwrap();
        net.set_quant_mode(QuantMode::BinaryRelax { lambda: 0.5, eta: 1.1 }).unwrap();
        let a = dir.path().join("sub/a.ckpt");
        save_checkpoint(&net, &a).unwrap();
        let back = load_checkpoint::<f32>(&a).unwrap();
        assert_eq!(back, net);
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&back, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let x = input(2, 8, 3);
        assert_eq!(net.forward_with_taps(&x).unwrap().0, back.forward_with_taps(&x).unwrap().0);
    }

    #[test]
    fn checkpoint_corruption_is_format_error() {
        let net = build_network::<f32>(&NetSpec::resnet_tiny(8, 10).unwrap(), 0).unwrap();
        let bytes = checkpoint_bytes(&net);
        let truncated = &bytes[..bytes.len() - 7];
        match checkpoint_from_bytes::<f32>(truncated) {
            Err(Error::Format(msg)) => assert!(msg.contains("record"), "{msg}"),
            other => panic!("{:?}", other.map(|_| ())),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes::<f32>(&bad), Err(Error::Format(_))));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(matches!(checkpoint_from_bytes::<f32>(&ver), Err(Error::Format(_))));
    }

    #[test]
    fn requantize_keeps_shadow_weights() {
        let float = build_network::<f32>(&NetSpec::resnet_tiny(8, 10).unwrap(), 4).unwrap();
        let q = float.requantize(2, 4).unwrap();
        assert_eq!(q.spec().weight_bits, 2);
        for p in q.params().iter().filter(|p| p.kind != ParamKind::ActScale) {
            assert_eq!(p.shadow(), float.param(&p.name).unwrap().shadow());
            assert_eq!(p.quant().is_some(), p.kind == ParamKind::Conv);
        }
    }

    #[test]
    fn calibration_sets_positive_scales() {
        let spec = NetSpec::resnet_tiny(8, 10).unwrap().with_bits(32, 2).unwrap();
        let mut net = build_network::<f32>(&spec, 0).unwrap();
        net.calibrate_activations(&input(4, 8, 0)).unwrap();
        let scales = net.act_scales();
        assert_eq!(scales.len(), 1 + 2 * 3);
        assert!(scales.iter().all(|&a| a > 0.0 && a.is_finite()));
        let (logits, _) = net.forward_with_taps(&input(2, 8, 1)).unwrap();
        assert!(logits.is_finite());
    }
}
