//! Crowd-counting network: strided backbone to 1/8 scale, a densely
//! connected stack of dilated convolutions (context block), spatial and
//! channel non-local attention, and a 1x1 density head.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, Module, Scalar};
use crate::numerics::{ConvSpec, Param, Tape, Tensor, Var};

/// Dilation rates of the context block, one layer each.
pub const ECEM_RATES: [usize; 5] = [3, 6, 12, 18, 24];
/// Total downsampling of the backbone.
pub const OUTPUT_STRIDE: usize = 8;

/// How the spatial-attention output is merged with its input map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialCombine {
    /// `η · attended + F`
    #[default]
    Residual,
    /// `(η · attended) ⊙ F`
    Multiplicative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountingConfig {
    /// Output channels of the three stride-2 stages; the last one is the
    /// feature width carried through the context and attention blocks.
    pub backbone_channels: [usize; 3],
    /// Number of trailing dilation-2 conv blocks in the backbone.
    pub backbone_dilated_blocks: usize,
    pub spatial_combine: SpatialCombine,
}

impl Default for CountingConfig {
    fn default() -> Self {
        Self {
            backbone_channels: [16, 32, 64],
            backbone_dilated_blocks: 1,
            spatial_combine: SpatialCombine::Residual,
        }
    }
}

impl CountingConfig {
    pub fn channels(&self) -> usize {
        self.backbone_channels[2]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcemConfig {
    pub rates: Vec<usize>,
    pub channels: usize,
}

impl EcemConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            rates: ECEM_RATES.to_vec(),
            channels,
        }
    }

    /// Input width of each dilated layer under dense connectivity.
    pub fn layer_input_channels(&self) -> Vec<usize> {
        (0..self.rates.len())
            .map(|i| self.channels * (i + 1))
            .collect()
    }
}

/// Applies inverted dropout with a fresh mask drawn from `rng`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut dyn RngCore) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    if rate >= 1.0 {
        return Err(Error::invalid("dropout", format!("rate {rate} must be below 1")));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, mask)
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub convs: Vec<Conv>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(prefix: &str, cfg: &CountingConfig, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut in_ch = 1;
        for (i, &ch) in cfg.backbone_channels.iter().enumerate() {
            convs.push(Conv::new(
                &format!("{prefix}.conv{}", i + 1),
                ConvSpec::same(in_ch, ch, 3).with_stride(2),
                rng,
            ));
            in_ch = ch;
        }
        for i in 0..cfg.backbone_dilated_blocks {
            convs.push(Conv::new(
                &format!("{prefix}.conv{}", 4 + i),
                ConvSpec::same(in_ch, in_ch, 3).with_dilation(2),
                rng,
            ));
        }
        Self { convs }
    }

    /// `[1, H, W]` image to `[C, H/8, W/8]` features.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let (c, h, w) = tape.value(image).dims3("backbone_forward")?;
        if c != 1 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "backbone_forward",
                format!("expected a [1, H, W] image with H, W divisible by {OUTPUT_STRIDE}, got [{c}, {h}, {w}]"),
            ));
        }
        let mut x = image;
        for conv in &self.convs {
            x = conv.forward(tape, x)?;
        }
        Ok(x)
    }
}

impl Module for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.convs.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.convs.visit_mut(f)
    }
}

/// Densely connected dilated context block: layer `i` sees the
/// concatenation of the block input and all earlier layer outputs; a final
/// 1x1 conv maps the full concatenation back to `channels`.
#[derive(Clone, Debug)]
pub struct Ecem {
    pub config: EcemConfig,
    pub layers: Vec<Conv>,
    pub fuse: Conv,
}

impl Ecem {
    pub fn new<R: Rng + ?Sized>(prefix: &str, config: EcemConfig, rng: &mut R) -> Self {
        let c = config.channels;
        let layers = config
            .rates
            .iter()
            .zip(config.layer_input_channels())
            .enumerate()
            .map(|(i, (&rate, in_ch))| {
                Conv::new(
                    &format!("{prefix}.dilated{}", i + 1),
                    ConvSpec::same(in_ch, c, 3).with_dilation(rate),
                    rng,
                )
            })
            .collect();
        let total = c * (config.rates.len() + 1);
        let fuse = Conv::new(
            &format!("{prefix}.fuse"),
            ConvSpec::same(total, c, 1),
            rng,
        );
        Self {
            config,
            layers,
            fuse,
        }
    }

    pub fn forward(&self, tape: &mut Tape, f1: Var) -> Result<Var> {
        let (c, _, _) = tape.value(f1).dims3("ecem_forward")?;
        if c != self.config.channels {
            return Err(Error::shape(
                "ecem_forward",
                format!("expected {} channels, got {c}", self.config.channels),
            ));
        }
        let mut features = vec![f1];
        for layer in &self.layers {
            let input = if features.len() == 1 {
                f1
            } else {
                tape.concat(&features)?
            };
            features.push(layer.forward(tape, input)?);
        }
        let all = tape.concat(&features)?;
        self.fuse.forward(tape, all)
    }
}

impl Module for Ecem {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.layers.visit(f);
        self.fuse.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.visit_mut(f);
        self.fuse.visit_mut(f);
    }
}

/// Parameters of the dual attention block.
#[derive(Clone, Debug)]
pub struct Mab {
    /// Embedding for attended positions (`S_1`).
    pub theta: Conv,
    /// Embedding for querying positions (`S_2`).
    pub phi: Conv,
    /// Value projection.
    pub g: Conv,
    /// Spatial output scale.
    pub eta: Scalar,
    /// Channel output scale.
    pub mu: Scalar,
    /// 1x1 conv applied to the sum of both branches.
    pub out: Conv,
    pub combine: SpatialCombine,
}

pub type MabParams = Mab;

/// Attention output together with its row-stochastic attention matrix.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub attention: Var,
}

impl Mab {
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: usize, combine: SpatialCombine, rng: &mut R) -> Self {
        let embed = (channels / 8).max(1);
        let lin = |name: &str, out: usize, rng: &mut R| {
            Conv::new(
                &format!("{prefix}.{name}"),
                ConvSpec::same(channels, out, 1).with_relu(false),
                rng,
            )
        };
        Self {
            theta: lin("theta", embed, rng),
            phi: lin("phi", embed, rng),
            g: lin("g", channels, rng),
            eta: Scalar::new(format!("{prefix}.eta"), 0.0),
            mu: Scalar::new(format!("{prefix}.mu"), 0.0),
            out: lin("out", channels, rng),
            combine,
        }
    }

    pub fn embed_channels(&self) -> usize {
        self.theta.spec.out_channels
    }

    /// Embedded-Gaussian non-local attention over the `HW` positions.
    pub fn spatial_attention(&self, tape: &mut Tape, f2: Var) -> Result<Attended> {
        let (c, h, w) = tape.value(f2).dims3("spatial_attention")?;
        let n = h * w;
        let ce = self.embed_channels();
        let theta = self.theta.forward(tape, f2)?;
        let theta = tape.reshape(theta, &[ce, n])?;
        let phi = self.phi.forward(tape, f2)?;
        let phi = tape.reshape(phi, &[ce, n])?;
        let values = self.g.forward(tape, f2)?;
        let values = tape.reshape(values, &[c, n])?;

        // energy[j][i] = phi_j · theta_i, normalized over i
        let phi_t = tape.transpose(phi)?;
        let energy = tape.matmul(phi_t, theta)?;
        let attention = tape.softmax(energy, 1)?;
        let attention_t = tape.transpose(attention)?;
        let attended = tape.matmul(values, attention_t)?;
        let attended = tape.reshape(attended, &[c, h, w])?;

        let eta = self.eta.bind(tape);
        let scaled = tape.scalar_mul(eta, attended)?;
        let output = match self.combine {
            SpatialCombine::Residual => tape.add(scaled, f2)?,
            SpatialCombine::Multiplicative => tape.mul(scaled, f2)?,
        };
        Ok(Attended { output, attention })
    }

    /// Gaussian non-local attention over channels on the raw features.
    pub fn channel_attention(&self, tape: &mut Tape, f2: Var) -> Result<Attended> {
        let (c, h, w) = tape.value(f2).dims3("channel_attention")?;
        let x = tape.reshape(f2, &[c, h * w])?;
        let x_t = tape.transpose(x)?;
        let energy = tape.matmul(x, x_t)?;
        let attention = tape.softmax(energy, 1)?;
        let attended = tape.matmul(attention, x)?;
        let attended = tape.reshape(attended, &[c, h, w])?;
        let mu = self.mu.bind(tape);
        let scaled = tape.scalar_mul(mu, attended)?;
        let output = tape.add(scaled, f2)?;
        Ok(Attended { output, attention })
    }

    /// `F_3 = conv1x1(spatial(F_2) + channel(F_2))`.
    pub fn forward(&self, tape: &mut Tape, f2: Var) -> Result<Var> {
        let s = self.spatial_attention(tape, f2)?;
        let c = self.channel_attention(tape, f2)?;
        let sum = tape.add(s.output, c.output)?;
        self.out.forward(tape, sum)
    }
}

impl Module for Mab {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.theta.visit(f);
        self.phi.visit(f);
        self.g.visit(f);
        self.eta.visit(f);
        self.mu.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.theta.visit_mut(f);
        self.phi.visit_mut(f);
        self.g.visit_mut(f);
        self.eta.visit_mut(f);
        self.mu.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// 1x1 conv to one channel, ReLU-clamped.
#[derive(Clone, Debug)]
pub struct DensityHead {
    pub conv: Conv,
}

impl DensityHead {
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv::new(&format!("{prefix}.conv"), ConvSpec::same(channels, 1, 1), rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, f3: Var) -> Result<Var> {
        self.conv.forward(tape, f3)
    }
}

impl Module for DensityHead {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f)
    }
}

/// Dropout placement during training.
#[derive(Clone, Copy, Debug)]
pub struct DropoutSpec {
    pub rate: f64,
    /// 1: after the context block; 2: also after attention.
    pub layers: usize,
}

#[derive(Clone, Debug)]
pub struct CountingNet {
    pub backbone: Backbone,
    pub ecem: Ecem,
    pub mab: Mab,
    pub head: DensityHead,
}

impl CountingNet {
    pub fn new<R: Rng + ?Sized>(cfg: &CountingConfig, rng: &mut R) -> Self {
        let c = cfg.channels();
        Self {
            backbone: Backbone::new("backbone", cfg, rng),
            ecem: Ecem::new("ecem", EcemConfig::new(c), rng),
            mab: Mab::new("mab", c, cfg.spatial_combine, rng),
            head: DensityHead::new("head", c, rng),
        }
    }

    /// Image to `[1, H/8, W/8]` density prediction.
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: Var,
        mut dropout_rng: Option<(&mut dyn RngCore, DropoutSpec)>,
    ) -> Result<Var> {
        let f1 = self.backbone.forward(tape, image)?;
        let mut f2 = self.ecem.forward(tape, f1)?;
        if let Some((rng, spec)) = dropout_rng.as_mut() {
            if spec.layers >= 1 {
                f2 = dropout(tape, f2, spec.rate, *rng)?;
            }
        }
        let mut f3 = self.mab.forward(tape, f2)?;
        if let Some((rng, spec)) = dropout_rng.as_mut() {
            if spec.layers >= 2 {
                f3 = dropout(tape, f3, spec.rate, *rng)?;
            }
        }
        self.head.forward(tape, f3)
    }

    /// Forward-only prediction.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, x, None)?;
        Ok(tape.value(y).clone())
    }
}

impl Module for CountingNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.backbone.visit(f);
        self.ecem.visit(f);
        self.mab.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_mut(f);
        self.ecem.visit_mut(f);
        self.mab.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_module_gradients, project, GradCheckOptions};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn backbone_shapes_and_zero_input() {
        let mut r = rng(0);
        let mut bb = Backbone::new("backbone", &CountingConfig::default(), &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[1, 64, 64], 0.0, 1.0, &mut r));
        let y = bb.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[64, 8, 8]);

        bb.visit_mut(&mut |p| {
            if p.name.ends_with("bias") {
                p.value.data_mut().fill(0.0)
            }
        });
        let z = tape.constant(Tensor::zeros(&[1, 64, 64]));
        let y = bb.forward(&mut tape, z).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let bad = tape.constant(Tensor::zeros(&[1, 12, 16]));
        assert!(bb.forward(&mut tape, bad).is_err());
    }

    #[test]
    fn ecem_layer_widths_follow_dense_connectivity() {
        let cfg = EcemConfig::new(64);
        assert_eq!(cfg.rates, vec![3, 6, 12, 18, 24]);
        assert_eq!(cfg.layer_input_channels(), vec![64, 128, 192, 256, 320]);
        let ecem = Ecem::new("ecem", cfg, &mut rng(1));
        for (layer, rate) in ecem.layers.iter().zip(ECEM_RATES) {
            assert_eq!(layer.spec.padding, rate);
            assert_eq!(layer.spec.dilation, rate);
            assert_eq!(layer.spec.out_channels, 64);
        }
        assert_eq!(ecem.fuse.spec.in_channels, 384);
    }

    #[test]
    fn ecem_rejects_wrong_channels() {
        let ecem = Ecem::new("ecem", EcemConfig::new(8), &mut rng(1));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3, 3]));
        assert!(ecem.forward(&mut tape, x).is_err());
    }

    /// Hand evaluation of embedded-Gaussian attention on a two-position map.
    #[test]
    fn spatial_attention_two_position_closed_form() {
        let mut mab = Mab::new("mab", 1, SpatialCombine::Residual, &mut rng(0));
        let (a, b, c, eta) = (0.7, -1.3, 2.0, 0.4);
        mab.theta.weight.value.data_mut()[0] = a;
        mab.phi.weight.value.data_mut()[0] = b;
        mab.g.weight.value.data_mut()[0] = c;
        mab.eta.set(eta);
        let x = [1.5, -0.5];
        let mut tape = Tape::new();
        let f2 = tape.constant(Tensor::new(vec![1, 2, 1], x.to_vec()).unwrap());
        let out = mab.spatial_attention(&mut tape, f2).unwrap();
        let attn = tape.value(out.attention).data().to_vec();
        for j in 0..2 {
            let e: Vec<f64> = (0..2).map(|i| (b * x[j] * a * x[i]).exp()).collect();
            let z = e[0] + e[1];
            let s = [e[0] / z, e[1] / z];
            assert!((attn[j * 2] - s[0]).abs() < 1e-14);
            assert!((attn[j * 2 + 1] - s[1]).abs() < 1e-14);
            let attended = s[0] * c * x[0] + s[1] * c * x[1];
            let expect = eta * attended + x[j];
            assert!((tape.value(out.output).data()[j] - expect).abs() < 1e-14);
        }
    }

    /// Hand evaluation of channel attention with two channels at one pixel.
    #[test]
    fn channel_attention_two_channel_closed_form() {
        let mut mab = Mab::new("mab", 2, SpatialCombine::Residual, &mut rng(0));
        mab.mu.set(0.8);
        let (p, q) = (0.9, -0.4);
        let mut tape = Tape::new();
        let f2 = tape.constant(Tensor::new(vec![2, 1, 1], vec![p, q]).unwrap());
        let out = mab.channel_attention(&mut tape, f2).unwrap();
        let energy = [[p * p, p * q], [q * p, q * q]];
        let x = [p, q];
        for j in 0..2 {
            let z = energy[j][0].exp() + energy[j][1].exp();
            let s = [energy[j][0].exp() / z, energy[j][1].exp() / z];
            assert!((tape.value(out.attention).data()[j * 2] - s[0]).abs() < 1e-14);
            let expect = 0.8 * (s[0] * x[0] + s[1] * x[1]) + x[j];
            assert!((tape.value(out.output).data()[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_scales_reduce_to_pass_through() {
        let mut r = rng(4);
        let mab = Mab::new("mab", 8, SpatialCombine::Residual, &mut r);
        assert_eq!((mab.eta.get(), mab.mu.get()), (0.0, 0.0));
        let mut tape = Tape::new();
        let x = Tensor::randn(&[8, 3, 5], 1.0, &mut r);
        let f2 = tape.constant(x.clone());
        let s = mab.spatial_attention(&mut tape, f2).unwrap();
        let c = mab.channel_attention(&mut tape, f2).unwrap();
        assert_eq!(tape.value(s.output).data(), x.data());
        assert_eq!(tape.value(c.output).data(), x.data());

        // the whole block is then a 1x1 conv of 2 * F_2
        let f3 = mab.forward(&mut tape, f2).unwrap();
        let doubled = tape.constant(x.scaled(2.0));
        let direct = mab.out.forward(&mut tape, doubled).unwrap();
        assert_eq!(tape.value(f3), tape.value(direct));
    }

    #[test]
    fn channel_attention_is_permutation_equivariant() {
        let mut r = rng(12);
        let mut mab = Mab::new("mab", 5, SpatialCombine::Residual, &mut r);
        mab.mu.set(0.6);
        let x = Tensor::randn(&[5, 2, 3], 0.7, &mut r);
        let perm = [3, 0, 4, 1, 2];
        let plane = 6;
        let mut permuted = vec![0.0; x.len()];
        for (new, &old) in perm.iter().enumerate() {
            permuted[new * plane..(new + 1) * plane].copy_from_slice(&x.data()[old * plane..(old + 1) * plane]);
        }
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(Tensor::new(vec![5, 2, 3], permuted).unwrap());
        let ya = mab.channel_attention(&mut tape, a).unwrap().output;
        let yb = mab.channel_attention(&mut tape, b).unwrap().output;
        let (ya, yb) = (tape.value(ya).data(), tape.value(yb).data());
        for (new, &old) in perm.iter().enumerate() {
            for k in 0..plane {
                assert!((yb[new * plane + k] - ya[old * plane + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multiplicative_variant_is_selectable() {
        let mut r = rng(2);
        let mut mab = Mab::new("mab", 4, SpatialCombine::Multiplicative, &mut r);
        mab.eta.set(1.0);
        let x = Tensor::randn(&[4, 2, 2], 1.0, &mut r);
        let mut tape = Tape::new();
        let f2 = tape.constant(x.clone());
        let s = mab.spatial_attention(&mut tape, f2).unwrap();
        assert_eq!(tape.shape(s.output), &[4, 2, 2]);
        mab.eta.set(0.0);
        let mut tape = Tape::new();
        let f2 = tape.constant(x);
        let s = mab.spatial_attention(&mut tape, f2).unwrap();
        assert!(tape.value(s.output).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_is_non_negative() {
        let mut r = rng(5);
        let head = DensityHead::new("head", 6, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[6, 4, 5], 2.0, &mut r));
        let y = head.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 5]);
        assert!(tape.value(y).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_masks_are_inverted() {
        let mut r = rng(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 50, 50], 1.0));
        assert_eq!(dropout(&mut tape, x, 0.0, &mut r).unwrap(), x);
        let y = dropout(&mut tape, x, 0.2, &mut r).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn mab_gradients_on_small_map() {
        let mut r = rng(7);
        let mut mab = Mab::new("mab", 4, SpatialCombine::Residual, &mut r);
        mab.eta.set(0.5);
        mab.mu.set(-0.3);
        let x = Tensor::randn(&[4, 3, 3], 0.8, &mut r);
        let report = check_module_gradients(
            &mab,
            |m, tape| {
                let f = tape.constant(x.clone());
                let y = m.forward(tape, f)?;
                project(tape, y, 2)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:#?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ecem_and_mab_preserve_shape(c in 1usize..5, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let mut r = rng(seed);
            let ecem = Ecem::new("ecem", EcemConfig::new(c), &mut r);
            let mut mab = Mab::new("mab", c, SpatialCombine::Residual, &mut r);
            mab.eta.set(0.3);
            mab.mu.set(0.3);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[c, h, w], 1.0, &mut r));
            let f2 = ecem.forward(&mut tape, x).unwrap();
            prop_assert_eq!(tape.shape(f2), &[c, h, w]);
            let s = mab.spatial_attention(&mut tape, f2).unwrap();
            let ch = mab.channel_attention(&mut tape, f2).unwrap();
            for (att, n) in [(s.attention, h * w), (ch.attention, c)] {
                let a = tape.value(att).data();
                for row in a.chunks(n) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
            let f3 = mab.forward(&mut tape, f2).unwrap();
            prop_assert_eq!(tape.shape(f3), &[c, h, w]);
        }
    }
}
