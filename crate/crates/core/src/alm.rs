//! Assisted learning head: classifies encoder features into head vs.
//! background and scores them with binary cross-entropy against the
//! binarized density ground truth. Used during training only.

use rand::Rng;

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::nn::{Conv, Module};
use crate::numerics::{ConvSpec, Param, Tape, Tensor, Var};

pub const HIDDEN_CHANNELS: usize = 8;
/// Density above which a ground-truth cell counts as "head".
pub const DEFAULT_THRESHOLD: f64 = 1e-3;
/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// `conv3x3(in -> 8) + ReLU -> conv3x3(8 -> 1) -> sigmoid`.
#[derive(Clone, Debug)]
pub struct AlmHead {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl AlmHead {
    pub fn new<R: Rng + ?Sized>(prefix: &str, in_channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv::new(
                &format!("{prefix}.conv1"),
                ConvSpec::same(in_channels, HIDDEN_CHANNELS, 3),
                rng,
            ),
            conv2: Conv::new(
                &format!("{prefix}.conv2"),
                ConvSpec::same(HIDDEN_CHANNELS, 1, 3).with_relu(false),
                rng,
            ),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.spec.in_channels
    }

    /// Maps `[C, h, w]` features to `u` in `(0, 1)` of shape `[1, h, w]`.
    pub fn forward(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        let (c, _, _) = tape.value(feature).dims3("alm_forward")?;
        if c != self.in_channels() {
            return Err(Error::shape(
                "alm_forward",
                format!("expected {} input channels, got {c}", self.in_channels()),
            ));
        }
        let x = self.conv1.forward(tape, feature)?;
        let x = self.conv2.forward(tape, x)?;
        Ok(tape.sigmoid(x))
    }
}

impl Module for AlmHead {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

/// Mean per-pixel binary cross-entropy between `u` and the binary map `k`.
pub fn alm_loss(tape: &mut Tape, u: Var, k: &Tensor) -> Result<Var> {
    if tape.shape(u) != k.shape() {
        return Err(Error::shape(
            "alm_loss",
            format!("prediction {:?} vs target {:?}", tape.shape(u), k.shape()),
        ));
    }
    tape.bce_mean(u, k.data(), EPS)
}

/// `1` where density exceeds `threshold`, else `0`.
pub fn binarize_ground_truth(map: &DensityMap, threshold: f64) -> Tensor {
    let data = map
        .values
        .data()
        .iter()
        .map(|&v| if v > threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_parts(map.values.shape().to_vec(), data)
}
