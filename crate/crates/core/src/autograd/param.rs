use alloc::string::String;

use crate::element::Element;
use crate::tensor::Tensor;

/// Stable identity of a trainable tensor inside one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A trainable tensor with an accumulating gradient buffer.
///
/// The gradient is allocated lazily the first time something is accumulated
/// into it, so a parameter that took no part in a backward pass has no grad.
#[derive(Debug, Clone)]
pub struct Param<T> {
    id: ParamId,
    name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

impl<T: Element> Param<T> {
    pub fn new(id: ParamId, name: impl Into<String>, value: Tensor<T>) -> Self {
        Param { id, name: name.into(), value, grad: None }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[T]) {
        let grad = self.grad.get_or_insert_with(|| Tensor::zeros(self.value.shape()));
        for (a, &b) in grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}
