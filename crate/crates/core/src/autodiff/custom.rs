use std::sync::Arc;

use super::{Graph, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identifier returned when a custom primitive is registered on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PrimitiveId(pub(crate) usize);

/// A primitive whose backward pass is supplied by the caller instead of being
/// derived from the forward computation (straight-through estimators).
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// One gradient per input, each shaped like that input.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

type ForwardFn<T> = dyn Fn(&[&Tensor<T>]) -> Result<Tensor<T>> + Send + Sync;
type BackwardFn<T> = dyn Fn(&[&Tensor<T>], &Tensor<T>) -> Result<Vec<Tensor<T>>> + Send + Sync;

/// Closure-backed [`CustomOp`].
pub struct FnCustomOp<T: Scalar> {
    name: String,
    forward: Box<ForwardFn<T>>,
    backward: Box<BackwardFn<T>>,
}

impl<T: Scalar> FnCustomOp<T> {
    pub fn new(
        name: impl Into<String>,
        forward: impl Fn(&[&Tensor<T>]) -> Result<Tensor<T>> + Send + Sync + 'static,
        backward: impl Fn(&[&Tensor<T>], &Tensor<T>) -> Result<Vec<Tensor<T>>> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), forward: Box::new(forward), backward: Box::new(backward) }
    }
}

impl<T: Scalar> CustomOp<T> for FnCustomOp<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        (self.forward)(inputs)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        (self.backward)(inputs, upstream)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn register(&mut self, op: Arc<dyn CustomOp<T>>) -> PrimitiveId {
        self.customs.push(op);
        PrimitiveId(self.customs.len() - 1)
    }

    /// First registered primitive with this name.
    pub fn find_custom(&self, name: &str) -> Option<PrimitiveId> {
        self.customs.iter().position(|op| op.name() == name).map(PrimitiveId)
    }

    /// Registers a primitive from a forward closure and a backward closure
    /// `(saved inputs, upstream) -> input grads`.
    pub fn custom_grad(
        &mut self,
        name: &str,
        forward: impl Fn(&[&Tensor<T>]) -> Result<Tensor<T>> + Send + Sync + 'static,
        backward: impl Fn(&[&Tensor<T>], &Tensor<T>) -> Result<Vec<Tensor<T>>> + Send + Sync + 'static,
    ) -> PrimitiveId {
        self.register(Arc::new(FnCustomOp::new(name, forward, backward)))
    }

    /// Applies a registered custom primitive.
    pub fn apply(&mut self, id: PrimitiveId, inputs: &[Var]) -> Result<Var> {
        let op = self
            .customs
            .get(id.0)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unsupported primitive id {}", id.0)))?;
        for v in inputs {
            self.check(*v)?;
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.index].value).collect();
        let out = op.forward(&values)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Custom { id, inputs: inputs.iter().map(|v| v.index).collect() },
            rg,
        ))
    }

    pub(crate) fn custom_backward(
        &self,
        id: PrimitiveId,
        inputs: &[usize],
        output: usize,
        upstream: &[T],
    ) -> Result<Vec<(usize, Vec<T>)>> {
        let op = &self.customs[id.0];
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let out = &self.nodes[output].value;
        let up = Tensor::from_parts(out.shape().to_vec(), upstream.to_vec());
        let grads = op.backward(&values, out, &up)?;
        if grads.len() != inputs.len() {
            return Err(Error::Config(format!(
                "custom primitive '{}' returned {} gradients for {} inputs",
                op.name(),
                grads.len(),
                inputs.len()
            )));
        }
        let mut result = Vec::with_capacity(grads.len());
        for (g, (&idx, v)) in grads.into_iter().zip(inputs.iter().zip(&values)) {
            if g.shape() != v.shape() {
                return shape_err(
                    "custom",
                    format!(
                        "'{}' gradient shape {:?} != input shape {:?}",
                        op.name(),
                        g.shape(),
                        v.shape()
                    ),
                );
            }
            result.push((idx, g.into_data()));
        }
        Ok(result)
    }
}
