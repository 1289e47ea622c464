//! Layer building blocks shared by the fusion, ALM and counting networks.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{ConvSpec, Param, Tape, Tensor, Var};

/// Anything that owns named parameters.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.name.clone()));
        out
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }

    /// Sets every parameter (weights and biases) to zero.
    fn zero_params(&mut self) {
        self.visit_mut(&mut |p| p.value.data_mut().fill(0.0));
    }
}

impl<T: Module> Module for [T] {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for m in self {
            m.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for m in self {
            m.visit_mut(f);
        }
    }
}

impl<T: Module> Module for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.as_slice().visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.as_mut_slice().visit_mut(f)
    }
}

/// Convolution with bias; ReLU applied when `spec.has_relu`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: Param,
    pub bias: Param,
}

impl Conv {
    /// He-normal weights (unit gain for layers without ReLU), zero bias.
    pub fn new<R: Rng + ?Sized>(prefix: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = (spec.in_channels * spec.kernel.0 * spec.kernel.1) as f64;
        let gain = if spec.has_relu { 2.0 } else { 1.0 };
        let std = (gain / fan_in).sqrt();
        Self {
            weight: Param::new(
                format!("{prefix}.weight"),
                Tensor::randn(&spec.weight_shape(), std, rng),
            ),
            bias: Param::new(
                format!("{prefix}.bias"),
                Tensor::zeros(&[spec.out_channels]),
            ),
            spec,
        }
    }

    pub fn with_weight_scale(mut self, factor: f64) -> Self {
        for v in self.weight.value.data_mut() {
            *v *= factor;
        }
        self
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight.name, &self.weight.value);
        let b = tape.param(&self.bias.name, &self.bias.value);
        tape.conv2d(x, w, Some(b), &self.spec)
    }
}

impl Module for Conv {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// A learnable scalar, e.g. an attention output scale.
#[derive(Clone, Debug)]
pub struct Scalar(pub Param);

impl Scalar {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        Self(Param::new(name, Tensor::scalar(value)))
    }

    pub fn get(&self) -> f64 {
        self.0.value.item()
    }

    pub fn set(&mut self, v: f64) {
        self.0.value.data_mut()[0] = v;
    }

    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.param(&self.0.name, &self.0.value)
    }
}

impl Module for Scalar {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.0);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.0);
    }
}
