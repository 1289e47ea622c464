//! The unified network: fusion front-end, two training-only ALM heads and
//! the counting network applied to the fused image.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alm::AlmHead;
use crate::counting::{CountingConfig, CountingNet, DropoutSpec, OUTPUT_STRIDE};
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionNet, FusionOutput};
use crate::nn::Module;
use crate::numerics::{Param, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub counting: CountingConfig,
    /// Zero-based encoder level whose features feed the ALM heads.
    pub alm_level: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            counting: CountingConfig::default(),
            alm_level: 0,
        }
    }
}

impl ModelConfig {
    pub fn alm_channels(&self) -> usize {
        self.fusion.channels[self.alm_level]
    }

    /// Spatial downsampling of the ALM input relative to the image.
    pub fn alm_stride(&self) -> usize {
        2 << self.alm_level
    }

    /// Images must be divisible by this on both axes.
    pub fn size_multiple(&self) -> usize {
        let fusion = 1 << crate::fusion::LEVELS;
        fusion.max(OUTPUT_STRIDE)
    }
}

/// Parameter groups, selectable for freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Fusion,
    Alm,
    Counting,
}

#[derive(Clone, Debug)]
pub struct Mfcc {
    pub config: ModelConfig,
    pub fusion: FusionNet,
    pub alm_vi: AlmHead,
    pub alm_ir: AlmHead,
    pub counting: CountingNet,
}

/// Tape handles produced by one full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub fusion: FusionOutput,
    /// Density at 1/8 scale, `[1, H/8, W/8]`.
    pub density: Var,
}

/// Forward-only result for one image pair.
#[derive(Clone, Debug)]
pub struct Inference {
    pub fused: Tensor,
    pub density: DensityMap,
}

impl Mfcc {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.alm_level >= crate::fusion::LEVELS {
            return Err(Error::invalid(
                "model",
                format!("alm_level {} out of range", config.alm_level),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fusion = FusionNet::new(&config.fusion, &mut rng);
        let alm_vi = AlmHead::new("alm_vi", config.alm_channels(), &mut rng);
        let alm_ir = AlmHead::new("alm_ir", config.alm_channels(), &mut rng);
        let counting = CountingNet::new(&config.counting, &mut rng);
        Ok(Self {
            config,
            fusion,
            alm_vi,
            alm_ir,
            counting,
        })
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("alm_") {
            ParamGroup::Alm
        } else if ["encoder_", "rfn.", "decoder."].iter().any(|p| name.starts_with(p)) {
            ParamGroup::Fusion
        } else {
            ParamGroup::Counting
        }
    }

    pub fn visit_group_mut(&mut self, group: ParamGroup, f: &mut dyn FnMut(&mut Param)) {
        match group {
            ParamGroup::Fusion => self.fusion.visit_mut(f),
            ParamGroup::Alm => {
                self.alm_vi.visit_mut(f);
                self.alm_ir.visit_mut(f);
            }
            ParamGroup::Counting => self.counting.visit_mut(f),
        }
    }

    fn check_pair(&self, visible: &Tensor, thermal: &Tensor) -> Result<()> {
        let (c, h, w) = visible.dims3("model_forward")?;
        let m = self.config.size_multiple();
        if c != 1 || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "model_forward",
                format!("images must be [1, H, W] with H, W positive multiples of {m}, got {:?}", visible.shape()),
            ));
        }
        if visible.shape() != thermal.shape() {
            return Err(Error::shape(
                "model_forward",
                format!("visible {:?} vs thermal {:?}", visible.shape(), thermal.shape()),
            ));
        }
        Ok(())
    }

    /// Fusion followed by counting on the fused image.
    pub fn forward(
        &self,
        tape: &mut Tape,
        visible: &Tensor,
        thermal: &Tensor,
        dropout: Option<(&mut dyn RngCore, DropoutSpec)>,
    ) -> Result<ForwardPass> {
        self.check_pair(visible, thermal)?;
        let vi = tape.constant(visible.clone());
        let ir = tape.constant(thermal.clone());
        let fusion = self.fusion.forward(tape, vi, ir)?;
        let density = self.counting.forward(tape, fusion.fused, dropout)?;
        Ok(ForwardPass { fusion, density })
    }

    /// ALM probabilities `(u_vi, u_ir)` on the configured encoder level.
    pub fn alm_forward(&self, tape: &mut Tape, fusion: &FusionOutput) -> Result<(Var, Var)> {
        let level = self.config.alm_level;
        let u_vi = self.alm_vi.forward(tape, fusion.phi_vi.level(level))?;
        let u_ir = self.alm_ir.forward(tape, fusion.phi_ir.level(level))?;
        Ok((u_vi, u_ir))
    }

    /// Fused image and 1/8-scale density; the ALM heads are not evaluated.
    pub fn infer(&self, visible: &Tensor, thermal: &Tensor, sigma: f64) -> Result<Inference> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, visible, thermal, None)?;
        Ok(Inference {
            fused: tape.value(pass.fusion.fused).clone(),
            density: DensityMap::from_tensor(tape.value(pass.density).clone(), sigma)?,
        })
    }
}

impl Module for Mfcc {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.fusion.visit(f);
        self.alm_vi.visit(f);
        self.alm_ir.visit(f);
        self.counting.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fusion.visit_mut(f);
        self.alm_vi.visit_mut(f);
        self.alm_ir.visit_mut(f);
        self.counting.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn shapes_and_groups() {
        let model = Mfcc::new(ModelConfig::default(), 0).unwrap();
        let names = model.param_names();
        let unique: HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        for g in [ParamGroup::Fusion, ParamGroup::Alm, ParamGroup::Counting] {
            assert!(names.iter().any(|n| Mfcc::group_of(n) == g));
        }
        assert_eq!(Mfcc::group_of("encoder_ir.level2.conv.weight"), ParamGroup::Fusion);
        assert_eq!(Mfcc::group_of("mab.eta"), ParamGroup::Counting);

        let img = Tensor::full(&[1, 32, 32], 0.5);
        let out = model.infer(&img, &img, 4.0).unwrap();
        assert_eq!(out.fused.shape(), &[1, 32, 32]);
        assert_eq!((out.density.height(), out.density.width()), (4, 4));
    }

    #[test]
    fn inference_leaves_alm_untouched() {
        let model = Mfcc::new(ModelConfig::default(), 0).unwrap();
        let img = Tensor::full(&[1, 16, 16], 0.25);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &img, &img, None).unwrap();
        let loss = tape.sum(pass.density);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.param_grads().all(|(name, _)| !name.starts_with("alm_")));
    }

    #[test]
    fn bad_sizes_rejected() {
        let model = Mfcc::new(ModelConfig::default(), 0).unwrap();
        let a = Tensor::zeros(&[1, 24, 32]);
        assert!(model.infer(&a, &a, 4.0).is_err());
        let b = Tensor::zeros(&[1, 32, 32]);
        let c = Tensor::zeros(&[1, 32, 48]);
        assert!(model.infer(&b, &c, 4.0).is_err());
    }
}
