use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor. Names are dotted paths such as
/// `encoder_ir.level2.conv1.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value: value.with_requires_grad(true),
        }
    }
}

/// Plain gradient descent: `p <- p - lr * grad`, then clears every grad.
///
/// Fails without touching anything if any parameter lacks a gradient.
pub fn sgd_step(params: &mut [&mut Param], lr: f64) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.value.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for p in params.iter_mut() {
        let grad = p.value.grad.take().expect("checked above");
        for (v, g) in p.value.data_mut().iter_mut().zip(&grad) {
            *v -= lr * g;
        }
    }
    Ok(())
}
