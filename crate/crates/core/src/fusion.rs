//! Dual-encoder RGB-thermal fusion network.
//!
//! Two encoders (visible, infrared) produce four-level feature pyramids, a
//! per-level residual fusion block merges them, and a top-down nest decoder
//! reconstructs a single-channel fused image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, Module};
use crate::numerics::{ConvSpec, Param, Tape, Var};

pub const LEVELS: usize = 4;
/// Per-level weights of the feature-preservation loss.
pub const LEVEL_WEIGHTS: [f64; LEVELS] = [1.0, 10.0, 100.0, 1000.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub channels: [usize; LEVELS],
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 48, 64],
        }
    }
}

/// Weights of the feature-preservation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionLossWeights {
    w1: [f64; LEVELS],
    w_vi: f64,
    w_ir: f64,
}

impl FusionLossWeights {
    pub fn new(w_vi: f64, w_ir: f64) -> Result<Self> {
        if !(w_vi > 0.0 && w_ir > 0.0) {
            return Err(Error::invalid(
                "FusionLossWeights",
                format!("w_vi and w_ir must be positive, got {w_vi} and {w_ir}"),
            ));
        }
        Ok(Self {
            w1: LEVEL_WEIGHTS,
            w_vi,
            w_ir,
        })
    }

    pub fn w1(&self) -> [f64; LEVELS] {
        self.w1
    }

    pub fn w_vi(&self) -> f64 {
        self.w_vi
    }

    pub fn w_ir(&self) -> f64 {
        self.w_ir
    }
}

impl Default for FusionLossWeights {
    fn default() -> Self {
        Self::new(0.5, 0.5).expect("defaults are positive")
    }
}

/// Four feature maps on a tape; level `m` is at `1 / 2^(m+1)` of the input.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn new(tape: &Tape, levels: Vec<Var>) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(Error::shape(
                "FeaturePyramid",
                format!("expected {LEVELS} levels, got {}", levels.len()),
            ));
        }
        for m in 1..LEVELS {
            let (_, h0, w0) = tape.value(levels[m - 1]).dims3("FeaturePyramid")?;
            let (_, h1, w1) = tape.value(levels[m]).dims3("FeaturePyramid")?;
            if h1 * 2 != h0 || w1 * 2 != w0 {
                return Err(Error::shape(
                    "FeaturePyramid",
                    format!("level {} is {h1}x{w1}, expected half of {h0}x{w0}", m + 1),
                ));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Var] {
        &self.levels
    }

    pub fn level(&self, m: usize) -> Var {
        self.levels[m]
    }

    fn check_compatible(&self, tape: &Tape, other: &FeaturePyramid, op: &'static str) -> Result<()> {
        for (m, (a, b)) in self.levels.iter().zip(&other.levels).enumerate() {
            if tape.shape(*a) != tape.shape(*b) {
                return Err(Error::shape(
                    op,
                    format!(
                        "level {}: {:?} vs {:?}",
                        m + 1,
                        tape.shape(*a),
                        tape.shape(*b)
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub down: Conv,
    pub conv: Conv,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub levels: Vec<EncoderLevel>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(prefix: &str, cfg: &FusionConfig, rng: &mut R) -> Self {
        let mut in_ch = 1;
        let levels = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(m, &ch)| {
                let p = format!("{prefix}.level{}", m + 1);
                let level = EncoderLevel {
                    down: Conv::new(&format!("{p}.conv1"), ConvSpec::same(in_ch, ch, 3).with_stride(2), rng),
                    conv: Conv::new(&format!("{p}.conv2"), ConvSpec::same(ch, ch, 3), rng),
                };
                in_ch = ch;
                level
            })
            .collect();
        Self { levels }
    }

    /// Encodes a `[1, H, W]` image; `H` and `W` must be divisible by 16.
    pub fn encode(&self, tape: &mut Tape, image: Var) -> Result<FeaturePyramid> {
        let (c, h, w) = tape.value(image).dims3("encode")?;
        let div = 1 << LEVELS;
        if c != 1 || h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "encode",
                format!("expected a [1, H, W] image with H, W divisible by {div}, got [{c}, {h}, {w}]"),
            ));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(LEVELS);
        for level in &self.levels {
            x = level.down.forward(tape, x)?;
            x = level.conv.forward(tape, x)?;
            levels.push(x);
        }
        FeaturePyramid::new(tape, levels)
    }
}

impl Module for EncoderLevel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.down.visit(f);
        self.conv.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.down.visit_mut(f);
        self.conv.visit_mut(f);
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.levels.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.levels.visit_mut(f)
    }
}

/// Residual fusion block for one pyramid level:
/// `ir + conv3(relu(conv2(relu(conv1([vi; ir])))))`.
#[derive(Clone, Debug)]
pub struct Rfn {
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
}

impl Rfn {
    pub fn new<R: Rng + ?Sized>(prefix: &str, ch: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv::new(&format!("{prefix}.conv1"), ConvSpec::same(2 * ch, ch, 3), rng),
            conv2: Conv::new(&format!("{prefix}.conv2"), ConvSpec::same(ch, ch, 3), rng),
            conv3: Conv::new(
                &format!("{prefix}.conv3"),
                ConvSpec::same(ch, ch, 3).with_relu(false),
                rng,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vi: Var, ir: Var) -> Result<Var> {
        let x = tape.concat(&[vi, ir])?;
        let x = self.conv1.forward(tape, x)?;
        let x = self.conv2.forward(tape, x)?;
        let x = self.conv3.forward(tape, x)?;
        tape.add(ir, x)
    }
}

impl Module for Rfn {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.conv3.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.conv3.visit_mut(f);
    }
}

/// Fuses two pyramids level by level, each level with its own block.
pub fn rfn_fuse(tape: &mut Tape, blocks: &[Rfn], phi_vi: &FeaturePyramid, phi_ir: &FeaturePyramid) -> Result<FeaturePyramid> {
    if blocks.len() != LEVELS {
        return Err(Error::invalid(
            "rfn_fuse",
            format!("expected {LEVELS} fusion blocks, got {}", blocks.len()),
        ));
    }
    phi_vi.check_compatible(tape, phi_ir, "rfn_fuse")?;
    let mut fused = Vec::with_capacity(LEVELS);
    for (m, block) in blocks.iter().enumerate() {
        fused.push(block.forward(tape, phi_vi.level(m), phi_ir.level(m))?);
    }
    FeaturePyramid::new(tape, fused)
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

/// Top-down decoder: starting from the coarsest level, upsample ×2,
/// concatenate with the next finer level, two 3x3 conv+ReLU; a final ×2
/// upsample and 1x1 conv give the one-channel image.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// `blocks[m]` produces level `m` (`0..LEVELS - 1`).
    pub blocks: Vec<DecoderBlock>,
    pub out: Conv,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(prefix: &str, cfg: &FusionConfig, rng: &mut R) -> Self {
        let ch = cfg.channels;
        let blocks = (0..LEVELS - 1)
            .map(|m| {
                let p = format!("{prefix}.level{}", m + 1);
                DecoderBlock {
                    conv1: Conv::new(&format!("{p}.conv1"), ConvSpec::same(ch[m + 1] + ch[m], ch[m], 3), rng),
                    conv2: Conv::new(&format!("{p}.conv2"), ConvSpec::same(ch[m], ch[m], 3), rng),
                }
            })
            .collect();
        Self {
            blocks,
            out: Conv::new(
                &format!("{prefix}.out"),
                ConvSpec::same(ch[0], 1, 1).with_relu(false),
                rng,
            ),
        }
    }

    pub fn decode(&self, tape: &mut Tape, phi_f: &FeaturePyramid) -> Result<Var> {
        let mut x = phi_f.level(LEVELS - 1);
        for m in (0..LEVELS - 1).rev() {
            let up = tape.upsample_nearest(x, 2)?;
            let skip = phi_f.level(m);
            if tape.shape(up)[1..] != tape.shape(skip)[1..] {
                return Err(Error::shape(
                    "decode",
                    format!("level {}: {:?} vs {:?}", m + 1, tape.shape(up), tape.shape(skip)),
                ));
            }
            let cat = tape.concat(&[up, skip])?;
            let block = &self.blocks[m];
            x = block.conv1.forward(tape, cat)?;
            x = block.conv2.forward(tape, x)?;
        }
        let up = tape.upsample_nearest(x, 2)?;
        self.out.forward(tape, up)
    }
}

impl Module for DecoderBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

impl Module for Decoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.blocks.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.blocks.visit_mut(f);
        self.out.visit_mut(f);
    }
}

/// `Σ_m w1(m) · ‖Φ_f^m − (w_vi Φ_vi^m + w_ir Φ_ir^m)‖_F²`.
pub fn feature_loss(
    tape: &mut Tape,
    phi_f: &FeaturePyramid,
    phi_vi: &FeaturePyramid,
    phi_ir: &FeaturePyramid,
    weights: &FusionLossWeights,
) -> Result<Var> {
    phi_f.check_compatible(tape, phi_vi, "feature_loss")?;
    phi_f.check_compatible(tape, phi_ir, "feature_loss")?;
    let mut total: Option<Var> = None;
    for m in 0..LEVELS {
        let a = tape.scale(phi_vi.level(m), weights.w_vi);
        let b = tape.scale(phi_ir.level(m), weights.w_ir);
        let target = tape.add(a, b)?;
        let diff = tape.sub(phi_f.level(m), target)?;
        let sq = tape.sum_squares(diff);
        let term = tape.scale(sq, weights.w1[m]);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("LEVELS > 0"))
}

/// Outputs of one fusion pass.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub phi_vi: FeaturePyramid,
    pub phi_ir: FeaturePyramid,
    pub phi_f: FeaturePyramid,
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct FusionNet {
    pub encoder_vi: Encoder,
    pub encoder_ir: Encoder,
    pub rfn: Vec<Rfn>,
    pub decoder: Decoder,
}

impl FusionNet {
    pub fn new<R: Rng + ?Sized>(cfg: &FusionConfig, rng: &mut R) -> Self {
        Self {
            encoder_vi: Encoder::new("encoder_vi", cfg, rng),
            encoder_ir: Encoder::new("encoder_ir", cfg, rng),
            rfn: cfg
                .channels
                .iter()
                .enumerate()
                .map(|(m, &ch)| Rfn::new(&format!("rfn.level{}", m + 1), ch, rng))
                .collect(),
            decoder: Decoder::new("decoder", cfg, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, visible: Var, thermal: Var) -> Result<FusionOutput> {
        let phi_vi = self.encoder_vi.encode(tape, visible)?;
        let phi_ir = self.encoder_ir.encode(tape, thermal)?;
        let phi_f = rfn_fuse(tape, &self.rfn, &phi_vi, &phi_ir)?;
        let fused = self.decoder.decode(tape, &phi_f)?;
        Ok(FusionOutput {
            phi_vi,
            phi_ir,
            phi_f,
            fused,
        })
    }
}

impl Module for FusionNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder_vi.visit(f);
        self.encoder_ir.visit(f);
        self.rfn.visit(f);
        self.decoder.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder_vi.visit_mut(f);
        self.encoder_ir.visit_mut(f);
        self.rfn.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_module_gradients, project, GradCheckOptions};
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> FusionConfig {
        FusionConfig {
            channels: [2, 3, 3, 4],
        }
    }

    #[test]
    fn encode_halves_each_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new("encoder_vi", &FusionConfig::default(), &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[1, 64, 64], 0.0, 1.0, &mut rng));
        let p = enc.encode(&mut tape, x).unwrap();
        let sizes: Vec<_> = p.levels().iter().map(|v| tape.shape(*v).to_vec()).collect();
        assert_eq!(sizes, vec![vec![16, 32, 32], vec![32, 16, 16], vec![48, 8, 8], vec![64, 4, 4]]);
    }

    #[test]
    fn encode_rejects_indivisible_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new("e", &small(), &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 24, 32]));
        assert!(enc.encode(&mut tape, x).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_pyramid_and_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = FusionNet::new(&small(), &mut rng);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 32, 32]));
        let out = net.forward(&mut tape, z, z).unwrap();
        for v in out.phi_vi.levels().iter().chain(out.phi_f.levels()) {
            assert!(tape.value(*v).data().iter().all(|&x| x == 0.0));
        }
        assert_eq!(tape.shape(out.fused), &[1, 32, 32]);
        assert!(tape.value(out.fused).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn param_names_follow_dotted_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = FusionNet::new(&small(), &mut rng);
        let names = net.param_names();
        assert!(names.contains(&"encoder_ir.level2.conv1.weight".to_string()));
        assert!(names.contains(&"rfn.level4.conv3.bias".to_string()));
        assert!(names.contains(&"decoder.out.weight".to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    fn pyramid(tape: &mut Tape, rng: &mut ChaCha8Rng, cfg: &FusionConfig, side: usize) -> FeaturePyramid {
        let levels = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(m, &c)| {
                let s = side >> (m + 1);
                tape.constant(Tensor::randn(&[c, s, s], 1.0, rng))
            })
            .collect();
        FeaturePyramid::new(tape, levels).unwrap()
    }

    #[test]
    fn rfn_is_deterministic_and_asymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small();
        let blocks: Vec<Rfn> = (0..LEVELS)
            .map(|m| Rfn::new(&format!("rfn.level{}", m + 1), cfg.channels[m], &mut rng))
            .collect();
        let mut tape = Tape::new();
        let a = pyramid(&mut tape, &mut rng, &cfg, 32);
        let b = pyramid(&mut tape, &mut rng, &cfg, 32);
        let same1 = rfn_fuse(&mut tape, &blocks, &a, &a).unwrap();
        let same2 = rfn_fuse(&mut tape, &blocks, &a, &a).unwrap();
        let ab = rfn_fuse(&mut tape, &blocks, &a, &b).unwrap();
        let ba = rfn_fuse(&mut tape, &blocks, &b, &a).unwrap();
        for m in 0..LEVELS {
            assert_eq!(tape.value(same1.level(m)), tape.value(same2.level(m)));
            assert!(tape.value(ab.level(m)).max_abs_diff(tape.value(ba.level(m))) > 1e-6);
        }
    }

    #[test]
    fn rfn_rejects_mismatched_pyramids() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small();
        let blocks: Vec<Rfn> = (0..LEVELS).map(|m| Rfn::new("r", cfg.channels[m], &mut rng)).collect();
        let mut tape = Tape::new();
        let a = pyramid(&mut tape, &mut rng, &cfg, 32);
        let b = pyramid(&mut tape, &mut rng, &cfg, 16);
        assert!(rfn_fuse(&mut tape, &blocks, &a, &b).is_err());
    }

    #[test]
    fn feature_loss_definitional_zero_and_toy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = small();
        let w = FusionLossWeights::new(0.3, 0.9).unwrap();
        let mut tape = Tape::new();
        let vi = pyramid(&mut tape, &mut rng, &cfg, 32);
        let ir = pyramid(&mut tape, &mut rng, &cfg, 32);
        let mut fixed = Vec::new();
        for m in 0..LEVELS {
            let a = tape.scale(vi.level(m), 0.3);
            let b = tape.scale(ir.level(m), 0.9);
            fixed.push(tape.add(a, b).unwrap());
        }
        let f = FeaturePyramid::new(&tape, fixed).unwrap();
        let l = feature_loss(&mut tape, &f, &vi, &ir, &w).unwrap();
        assert!(tape.value(l).item().abs() < 1e-20);

        // only one cell of the finest level differs: Φ_f = 2, target = 1
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, first: f64| {
            let levels = (0..LEVELS)
                .map(|m| {
                    let s = 8 >> m;
                    let mut t = Tensor::zeros(&[1, s, s]);
                    if m == 0 {
                        t.data_mut()[0] = first;
                    }
                    tape.constant(t)
                })
                .collect();
            FeaturePyramid::new(tape, levels).unwrap()
        };
        let phi_f = mk(&mut tape, 2.0);
        let vi = mk(&mut tape, 1.0);
        let ir = mk(&mut tape, 1.0);
        let l = feature_loss(&mut tape, &phi_f, &vi, &ir, &FusionLossWeights::default()).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn feature_loss_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = small();
        let w = FusionLossWeights::new(0.5, 0.5).unwrap();
        let mut tape = Tape::new();
        let f = pyramid(&mut tape, &mut rng, &cfg, 32);
        let vi = pyramid(&mut tape, &mut rng, &cfg, 32);
        let ir = pyramid(&mut tape, &mut rng, &cfg, 32);
        let l = feature_loss(&mut tape, &f, &vi, &ir, &w).unwrap();
        let mut oracle = 0.0;
        for m in 0..LEVELS {
            let (a, b, c) = (
                tape.value(f.level(m)).data(),
                tape.value(vi.level(m)).data(),
                tape.value(ir.level(m)).data(),
            );
            let mut s = 0.0;
            for i in 0..a.len() {
                let d = a[i] - (0.5 * b[i] + 0.5 * c[i]);
                s += d * d;
            }
            oracle += LEVEL_WEIGHTS[m] * s;
        }
        assert!((tape.value(l).item() - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }

    #[test]
    fn weights_must_be_positive() {
        assert!(FusionLossWeights::new(0.0, 1.0).is_err());
        assert_eq!(FusionLossWeights::default().w1(), [1.0, 10.0, 100.0, 1000.0]);
    }

    #[test]
    fn end_to_end_gradients_at_16() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = FusionNet::new(&small(), &mut rng);
        let vi = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        let ir = Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng);
        let report = check_module_gradients(
            &net,
            |n, tape| {
                let a = tape.constant(vi.clone());
                let b = tape.constant(ir.clone());
                let out = n.forward(tape, a, b)?;
                project(tape, out.fused, 17)
            },
            &GradCheckOptions::sampled(6, 1),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:#?}");
    }
}
