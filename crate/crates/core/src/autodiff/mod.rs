//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as it is evaluated (define-by-run), so
//! "forward" is the act of building the tape. [`Graph::backward`] then walks
//! the tape in reverse, accumulating gradients into every node that requires
//! them. Gradients accumulate ("add into") across repeated backward calls.

mod custom;
mod primitives;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use custom::{CustomOp, FnCustomOp, PrimitiveId};

use crate::error::{shape_err, Error, Result};
use crate::kernels::ConvGeometry;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub(crate) fn of(op: &'static str, shape: &[usize]) -> Result<Self> {
        match *shape {
            [b, c, h, w] => Ok(Self { b, c, h, w }),
            [b, c] => Ok(Self { b, c, h: 1, w: 1 }),
            _ => shape_err(op, format!("expected [B, C, H, W], got {shape:?}")),
        }
    }

    pub(crate) fn plane(&self) -> usize {
        self.h * self.w
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeometry, batch: usize, out_ch: usize },
    BiasAdd { x: usize, bias: usize, channels: usize, inner: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Square(usize),
    Log(usize),
    AvgPool { x: usize, k: usize, dims: Dims4 },
    GlobalAvgPool { x: usize, dims: Dims4 },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, training: bool, dims: Dims4 },
    Softmax { x: usize, rows: usize, cols: usize },
    LogSoftmax { x: usize, rows: usize, cols: usize },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Transpose { x: usize, rows: usize, cols: usize },
    RowNormalize { x: usize, rows: usize, cols: usize, norms: Vec<T>, eps: T },
    PixelMatrix { x: usize, sample: usize, dims: Dims4 },
    ResizeBilinear { x: usize, dims: Dims4, out_h: usize, out_w: usize },
    Pick { x: usize, labels: Vec<usize>, classes: usize },
    Custom { id: PrimitiveId, inputs: Vec<usize> },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased per-channel variance.
    pub var: Vec<T>,
}

pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    customs: Vec<Arc<dyn CustomOp<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            customs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient. Outstanding [`Var`]s become
    /// invalid; registered custom primitives stay registered.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.id = NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed);
    }

    /// Records an input tensor. Leaves honour the tensor's own
    /// `requires_grad` flag unless `requires_grad` forces it on.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad || value.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: &Tensor<T>) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.check(v).expect("Var belongs to this graph");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient accumulated at `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.check(v).ok()?;
        let g = self.grads.get(v.index)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.index].value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::State(format!(
                "node {} was not recorded on this graph (backward before forward?)",
                v.index
            )));
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    pub(crate) fn node(&self, index: usize) -> &Node<T> {
        &self.nodes[index]
    }

    pub(crate) fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    /// Runs reverse-mode differentiation from `output`, contracting against
    /// `seed` (same shape as the output).
    pub fn backward(&mut self, output: Var, seed: &Tensor<T>) -> Result<()> {
        self.check(output)?;
        let out_shape = self.nodes[output.index].value.shape();
        if out_shape != seed.shape() {
            return shape_err(
                "backward",
                format!("seed shape {:?} does not match output {:?}", seed.shape(), out_shape),
            );
        }
        let mut pending: Vec<Option<Vec<T>>> = Vec::new();
        pending.resize_with(output.index + 1, || None);
        pending[output.index] = Some(seed.data().to_vec());

        for idx in (0..=output.index).rev() {
            let Some(upstream) = pending[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let contributions = self.local_backward(idx, &upstream)?;
            for (input, g) in contributions {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut pending[input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
            }
            if self.grads.len() < self.nodes.len() {
                self.grads.resize_with(self.nodes.len(), || None);
            }
            match &mut self.grads[idx] {
                Some(acc) => acc.iter_mut().zip(&upstream).for_each(|(a, &v)| *a += v),
                slot @ None => *slot = Some(upstream),
            }
        }
        Ok(())
    }

    /// Convenience for scalar outputs: seeds with 1.
    pub fn backward_scalar(&mut self, output: Var) -> Result<()> {
        self.check(output)?;
        let shape = self.value(output).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return shape_err("backward", format!("output {shape:?} is not a scalar"));
        }
        self.backward(output, &Tensor::full(&shape, T::one()))
    }
}
