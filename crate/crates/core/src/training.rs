//! Two-stage training, the joint losses, and MAE/RMSE evaluation.
//!
//! Stage 1 trains the fusion network and the ALM heads on
//! `Loss_f = Loss_alm_ir + Loss_alm_vi + Loss_feature (+ reconstruction)`.
//! Stage 2 starts from a stage-1 checkpoint and trains the whole pipeline on
//! `λ · MSE_count + μ · Loss_f`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alm::{self, binarize_ground_truth};
use crate::checkpoint::Checkpoint;
use crate::counting::{DropoutSpec, OUTPUT_STRIDE};
use crate::datagen::{DatasetEntry, DatasetIndex, Illumination};
use crate::density::{count_from_map, downsample_density, generate_density_map, DotAnnotations, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::fusion::{feature_loss, FusionLossWeights, FusionOutput};
use crate::model::{Mfcc, ModelConfig, ParamGroup};
use crate::numerics::{sgd_step, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityLevel {
    Low,
    Medium,
    High,
}

/// `low < low_below <= medium <= high_from_above < high`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityThresholds {
    pub low_below: usize,
    pub high_above: usize,
}

impl Default for DensityThresholds {
    fn default() -> Self {
        Self {
            low_below: 50,
            high_above: 150,
        }
    }
}

impl DensityThresholds {
    pub fn level(&self, n_people: usize) -> DensityLevel {
        if n_people < self.low_below {
            DensityLevel::Low
        } else if n_people > self.high_above {
            DensityLevel::High
        } else {
            DensityLevel::Medium
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    Fusion,
    #[serde(rename = "2")]
    Unified,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Fusion => 1,
            Stage::Unified => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the counting loss in stage 2.
    pub lambda_count: f64,
    /// Weight of the fusion loss in stage 2.
    pub mu_fusion: f64,
    pub dropout_rate: f64,
    /// 0 disables dropout, 1 places it after the context block, 2 also
    /// after attention.
    pub dropout_layers: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Weight of the image reconstruction term inside the fusion loss.
    pub recon_weight: f64,
    pub w_vi: f64,
    pub w_ir: f64,
    pub alm_threshold: f64,
    pub sigma: f64,
    /// Stage 2 only: keep fusion weights fixed.
    pub freeze_fusion: bool,
    pub thresholds: DensityThresholds,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            lr_decay_per_epoch: 0.995,
            batch_size: 4,
            epochs: 200,
            lambda_count: 10.0,
            mu_fusion: 1.0,
            dropout_rate: 0.2,
            dropout_layers: 1,
            seed: 0,
            optimizer: Optimizer::Sgd,
            recon_weight: 1.0,
            w_vi: 0.5,
            w_ir: 0.5,
            alm_threshold: alm::DEFAULT_THRESHOLD,
            sigma: DEFAULT_SIGMA,
            freeze_fusion: false,
            thresholds: DensityThresholds::default(),
            model: ModelConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid("config", format!("bad value {value:?} for key {key}")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let items = value
        .split(',')
        .map(|v| parse::<usize>(key, v))
        .collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| Error::invalid("config", format!("key {key} needs {N} comma-separated values")))
}

impl TrainConfig {
    /// Sets one `key=value` option; unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "lr_decay_per_epoch" => self.lr_decay_per_epoch = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lambda_count" => self.lambda_count = parse(key, value)?,
            "mu_fusion" => self.mu_fusion = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "dropout_layers" => self.dropout_layers = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "optimizer" => {
                self.optimizer = match value.trim() {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::Adam,
                    other => return Err(Error::invalid("config", format!("unknown optimizer {other:?}"))),
                }
            }
            "recon_weight" => self.recon_weight = parse(key, value)?,
            "w_vi" => self.w_vi = parse(key, value)?,
            "w_ir" => self.w_ir = parse(key, value)?,
            "alm_threshold" => self.alm_threshold = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "freeze_fusion" => self.freeze_fusion = parse(key, value)?,
            "density_low_below" => self.thresholds.low_below = parse(key, value)?,
            "density_high_above" => self.thresholds.high_above = parse(key, value)?,
            "fusion_channels" => self.model.fusion.channels = parse_list(key, value)?,
            "backbone_channels" => self.model.counting.backbone_channels = parse_list(key, value)?,
            "backbone_dilated_blocks" => self.model.counting.backbone_dilated_blocks = parse(key, value)?,
            "alm_level" => self.model.alm_level = parse(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a flat `key=value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid("config", format!("line {}: expected key=value, got {raw:?}", i + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("config", detail));
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return bad(format!("lr_decay_per_epoch must be in (0, 1], got {}", self.lr_decay_per_epoch));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.lambda_count < 0.0 || self.mu_fusion < 0.0 || self.recon_weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.thresholds.low_below > self.thresholds.high_above + 1 {
            return bad("density_low_below exceeds density_high_above".into());
        }
        FusionLossWeights::new(self.w_vi, self.w_ir)?;
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (zero-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_per_epoch.powi(epoch as i32)
    }

    pub fn fusion_weights(&self) -> Result<FusionLossWeights> {
        FusionLossWeights::new(self.w_vi, self.w_ir)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTags {
    pub illumination: Illumination,
    pub density_level: DensityLevel,
}

/// One image pair with every target precomputed.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub visible: Tensor,
    pub thermal: Tensor,
    pub count: f64,
    /// Block-summed density at 1/8 scale.
    pub density_target: Tensor,
    /// Binary head mask at the ALM resolution.
    pub alm_target: Tensor,
    pub tags: SampleTags,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        visible: Tensor,
        thermal: Tensor,
        dots: &DotAnnotations,
        illumination: Illumination,
        config: &TrainConfig,
    ) -> Result<Self> {
        let map = generate_density_map(dots, config.sigma)?;
        let density_target = downsample_density(&map, OUTPUT_STRIDE)?.values;
        let alm_map = downsample_density(&map, config.model.alm_stride())?;
        Ok(Self {
            id: id.into(),
            visible,
            thermal,
            count: dots.len() as f64,
            density_target,
            alm_target: binarize_ground_truth(&alm_map, config.alm_threshold),
            tags: SampleTags {
                illumination,
                density_level: config.thresholds.level(dots.len()),
            },
        })
    }

    pub fn load(entry: &DatasetEntry, config: &TrainConfig) -> Result<Self> {
        let pair = entry.load_pair()?;
        let (_, h, w) = pair.visible.dims3("load_sample")?;
        let dots = entry.load_annotations((h, w))?;
        Self::new(
            entry.stem.clone(),
            pair.visible,
            pair.thermal,
            &dots,
            entry.metadata.illumination,
            config,
        )
    }
}

pub fn load_samples(index: &DatasetIndex, config: &TrainConfig) -> Result<Vec<Sample>> {
    index.entries.iter().map(|e| Sample::load(e, config)).collect()
}

/// Mean squared error between the 1/8-scale prediction and target.
pub fn counting_loss(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<Var> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::shape(
            "counting_loss",
            format!("prediction {:?} vs target {:?}", tape.shape(pred), gt.shape()),
        ));
    }
    let target = tape.constant(gt.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.sum_squares(diff);
    Ok(tape.scale(sq, 1.0 / gt.len() as f64))
}

/// Separately logged summands of the fusion loss.
#[derive(Clone, Copy, Debug)]
pub struct FusionTerms {
    pub alm_ir: Var,
    pub alm_vi: Var,
    pub feature: Var,
    /// `MSE(I_f, w_vi·I_vi + w_ir·I_ir)`.
    pub recon: Var,
}

pub fn fusion_terms(
    tape: &mut Tape,
    model: &Mfcc,
    f: &FusionOutput,
    sample: &Sample,
    config: &TrainConfig,
) -> Result<FusionTerms> {
    let weights = config.fusion_weights()?;
    let (u_vi, u_ir) = model.alm_forward(tape, f)?;
    let alm_vi = alm::alm_loss(tape, u_vi, &sample.alm_target)?;
    let alm_ir = alm::alm_loss(tape, u_ir, &sample.alm_target)?;
    let feature = feature_loss(tape, &f.phi_f, &f.phi_vi, &f.phi_ir, &weights)?;

    let n = sample.visible.len() as f64;
    let blend: Vec<f64> = sample
        .visible
        .data()
        .iter()
        .zip(sample.thermal.data())
        .map(|(v, t)| weights.w_vi() * v + weights.w_ir() * t)
        .collect();
    let blend = tape.constant(Tensor::new(sample.visible.shape().to_vec(), blend)?);
    let diff = tape.sub(f.fused, blend)?;
    let sq = tape.sum_squares(diff);
    let recon = tape.scale(sq, 1.0 / n);
    Ok(FusionTerms {
        alm_ir,
        alm_vi,
        feature,
        recon,
    })
}

/// `Loss_f = alm_ir + alm_vi + feature + recon_weight · recon`.
pub fn combine_fusion_loss(tape: &mut Tape, terms: &FusionTerms, recon_weight: f64) -> Result<Var> {
    let a = tape.add(terms.alm_ir, terms.alm_vi)?;
    let b = tape.add(a, terms.feature)?;
    if recon_weight == 0.0 {
        return Ok(b);
    }
    let r = tape.scale(terms.recon, recon_weight);
    tape.add(b, r)
}

/// `λ · counting + μ · fusion`.
pub fn combine_total_loss(tape: &mut Tape, counting: Var, fusion: Var, lambda: f64, mu: f64) -> Result<Var> {
    let a = tape.scale(counting, lambda);
    let b = tape.scale(fusion, mu);
    tape.add(a, b)
}

/// Scalar values of every loss component for one sample or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub counting: Option<f64>,
    pub feature: f64,
    pub alm_ir: f64,
    pub alm_vi: f64,
    pub recon: f64,
}

impl LossValues {
    fn read(tape: &Tape, total: Var, counting: Option<Var>, terms: &FusionTerms) -> Self {
        Self {
            total: tape.value(total).item(),
            counting: counting.map(|c| tape.value(c).item()),
            feature: tape.value(terms.feature).item(),
            alm_ir: tape.value(terms.alm_ir).item(),
            alm_vi: tape.value(terms.alm_vi).item(),
            recon: tape.value(terms.recon).item(),
        }
    }

    fn accumulate(&mut self, other: &LossValues, weight: f64) {
        self.total += weight * other.total;
        if let Some(c) = other.counting {
            *self.counting.get_or_insert(0.0) += weight * c;
        }
        self.feature += weight * other.feature;
        self.alm_ir += weight * other.alm_ir;
        self.alm_vi += weight * other.alm_vi;
        self.recon += weight * other.recon;
    }
}

/// Builds the stage-1 objective for one sample.
pub fn stage1_fusion_loss(tape: &mut Tape, model: &Mfcc, sample: &Sample, config: &TrainConfig) -> Result<(Var, LossValues)> {
    let vi = tape.constant(sample.visible.clone());
    let ir = tape.constant(sample.thermal.clone());
    let fusion = model.fusion.forward(tape, vi, ir)?;
    let terms = fusion_terms(tape, model, &fusion, sample, config)?;
    let total = combine_fusion_loss(tape, &terms, config.recon_weight)?;
    let values = LossValues::read(tape, total, None, &terms);
    Ok((total, values))
}

/// Builds the stage-2 objective for one sample.
pub fn stage2_total_loss(
    tape: &mut Tape,
    model: &Mfcc,
    sample: &Sample,
    config: &TrainConfig,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(Var, LossValues)> {
    let dropout = dropout_rng.and_then(|rng| {
        (config.dropout_layers > 0 && config.dropout_rate > 0.0).then_some((
            rng,
            DropoutSpec {
                rate: config.dropout_rate,
                layers: config.dropout_layers,
            },
        ))
    });
    let pass = model.forward(tape, &sample.visible, &sample.thermal, dropout)?;
    let counting = counting_loss(tape, pass.density, &sample.density_target)?;
    let terms = fusion_terms(tape, model, &pass.fusion, sample, config)?;
    let fusion = combine_fusion_loss(tape, &terms, config.recon_weight)?;
    let total = combine_total_loss(tape, counting, fusion, config.lambda_count, config.mu_fusion)?;
    let values = LossValues::read(tape, total, Some(counting), &terms);
    Ok((total, values))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_counting: Option<f64>,
    pub loss_feature: f64,
    pub loss_alm_ir: f64,
    pub loss_alm_vi: f64,
    pub loss_recon: f64,
    pub lr: f64,
}

/// Per-parameter first/second moment estimates.
#[derive(Default)]
struct AdamState {
    t: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn step(&mut self, p: &mut crate::numerics::Param, lr: f64) -> Result<()> {
        let grad = p.value.grad.take().ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
        let (m, v) = self
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((x, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Mfcc,
    pub history: Vec<HistoryRecord>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig, stage: Stage) -> Checkpoint {
        model_checkpoint(&self.model, config, stage)
    }
}

/// Checkpoint whose metadata embeds the resolved configuration.
pub fn model_checkpoint(model: &Mfcc, config: &TrainConfig, stage: Stage) -> Checkpoint {
    Checkpoint::from_module(
        model,
        serde_json::json!({
            "stage": stage.number(),
            "config": config,
        }),
    )
}

/// Rebuilds a model from a checkpoint written by [`model_checkpoint`].
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Mfcc, TrainConfig)> {
    let config: TrainConfig = serde_json::from_value(ckpt.metadata["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("metadata has no usable config: {e}")))?;
    let mut model = Mfcc::new(config.model.clone(), config.seed)?;
    ckpt.apply_to(&mut model)?;
    Ok((model, config))
}

fn checkpoint_stage(ckpt: &Checkpoint) -> Option<u64> {
    ckpt.metadata.get("stage").and_then(|s| s.as_u64())
}

fn active_groups(config: &TrainConfig, stage: Stage) -> Vec<ParamGroup> {
    match stage {
        Stage::Fusion => vec![ParamGroup::Fusion, ParamGroup::Alm],
        Stage::Unified => {
            let mut groups = vec![ParamGroup::Counting];
            if config.mu_fusion > 0.0 {
                groups.push(ParamGroup::Alm);
            }
            if !config.freeze_fusion {
                groups.push(ParamGroup::Fusion);
            }
            groups
        }
    }
}

/// Runs one training stage.
///
/// Stage 2 requires `init` to be a stage-1 (or later) checkpoint; stage 1
/// starts from `init` when given, otherwise from a fresh seeded model.
/// `on_record` sees every history record as it is produced.
pub fn train(
    config: &TrainConfig,
    samples: &[Sample],
    stage: Stage,
    init: Option<&Checkpoint>,
    mut on_record: impl FnMut(&HistoryRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = Mfcc::new(config.model.clone(), config.seed)?;
    match (stage, init) {
        (Stage::Unified, None) => {
            return Err(Error::Checkpoint("stage 2 requires a stage-1 checkpoint".into()));
        }
        (Stage::Unified, Some(ck)) if checkpoint_stage(ck).is_none_or(|s| s < 1) => {
            return Err(Error::Checkpoint("initial checkpoint is not a stage-1 checkpoint".into()));
        }
        (_, Some(ck)) => ck.apply_to(&mut model)?,
        (Stage::Fusion, None) => {}
    }
    let groups = active_groups(config, stage);
    let mut active: Vec<String> = Vec::new();
    for &g in &groups {
        model.visit_group_mut(g, &mut |p| active.push(p.name.clone()));
    }
    info!(
        "stage {stage}: {} samples, {} epochs, {} trainable tensors",
        samples.len(),
        config.epochs,
        active.len()
    );

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(u64::from(stage.number()));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(10 + u64::from(stage.number()));
    let mut adam = AdamState::default();
    let mut history = Vec::new();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let mut values = LossValues::default();
            let mut grads: Vec<Vec<f64>> = Vec::new();
            for &i in batch {
                let mut tape = Tape::new();
                let (loss, v) = match stage {
                    Stage::Fusion => stage1_fusion_loss(&mut tape, &model, &samples[i], config)?,
                    Stage::Unified => {
                        stage2_total_loss(&mut tape, &model, &samples[i], config, Some(&mut dropout_rng))?
                    }
                };
                if !v.total.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                values.accumulate(&v, weight);
                let g = tape.backward(loss)?;
                if grads.is_empty() {
                    grads = vec![Vec::new(); active.len()];
                }
                for (acc, name) in grads.iter_mut().zip(&active) {
                    let gp = g.param(name).ok_or_else(|| Error::MissingGrad(name.clone()))?;
                    if acc.is_empty() {
                        acc.resize(gp.len(), 0.0);
                    }
                    for (a, x) in acc.iter_mut().zip(gp) {
                        *a += weight * x;
                    }
                }
            }

            let mut lookup: HashMap<&str, Vec<f64>> =
                active.iter().map(String::as_str).zip(grads).collect();
            adam.t += 1;
            let mut failure = None;
            for &g in &groups {
                model.visit_group_mut(g, &mut |p| {
                    if failure.is_some() {
                        return;
                    }
                    let Some(grad) = lookup.remove(p.name.as_str()) else {
                        failure = Some(Error::MissingGrad(p.name.clone()));
                        return;
                    };
                    p.value.grad = Some(grad);
                    let res = match config.optimizer {
                        Optimizer::Sgd => sgd_step(&mut [p], lr),
                        Optimizer::Adam => adam.step(p, lr),
                    };
                    if let Err(e) = res {
                        failure = Some(e);
                    }
                });
            }
            if let Some(e) = failure {
                return Err(e);
            }

            let record = HistoryRecord {
                stage: stage.number(),
                epoch,
                step,
                loss_total: values.total,
                loss_counting: values.counting,
                loss_feature: values.feature,
                loss_alm_ir: values.alm_ir,
                loss_alm_vi: values.alm_vi,
                loss_recon: values.recon,
                lr,
            };
            on_record(&record);
            history.push(record);
            step += 1;
        }
        if let Some(last) = history.last() {
            debug!("stage {stage} epoch {epoch}: loss {:.6}", last.loss_total);
        }
    }
    Ok(TrainOutcome { model, history })
}

/// Mean of `loss_total` per epoch, from a step history.
pub fn epoch_means(history: &[HistoryRecord]) -> Vec<f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in history {
        let e = sums.entry(r.epoch).or_default();
        e.0 += r.loss_total;
        e.1 += 1;
    }
    sums.values().map(|(s, n)| s / *n as f64).collect()
}

/// Dropout-free stage-2 objective averaged over `samples`.
pub fn dataset_loss(model: &Mfcc, samples: &[Sample], config: &TrainConfig, stage: Stage) -> Result<LossValues> {
    let mut values = LossValues::default();
    let w = 1.0 / samples.len().max(1) as f64;
    for s in samples {
        let mut tape = Tape::new();
        let (_, v) = match stage {
            Stage::Fusion => stage1_fusion_loss(&mut tape, model, s, config)?,
            Stage::Unified => stage2_total_loss(&mut tape, model, s, config, None)?,
        };
        values.accumulate(&v, w);
    }
    Ok(values)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
}

impl SplitMetrics {
    /// `(predicted, ground truth)` pairs; `None` when empty.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Option<Self> {
        if pairs.is_empty() {
            return None;
        }
        let n = pairs.len() as f64;
        let abs: f64 = pairs.iter().map(|(p, g)| (g - p).abs()).sum();
        let sq: f64 = pairs.iter().map(|(p, g)| (g - p).powi(2)).sum();
        let (mae, rmse) = (abs / n, (sq / n).sqrt());
        assert!(
            rmse >= mae - 1e-12 * mae.max(1.0),
            "rmse {rmse} below mae {mae}"
        );
        Some(Self {
            mae,
            rmse,
            n: pairs.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
    /// Keys: `low`, `medium`, `high`, `dark_and_dust`, `light`; splits
    /// without samples are omitted.
    pub splits: BTreeMap<String, SplitMetrics>,
}

pub const SPLIT_NAMES: [&str; 5] = ["low", "medium", "high", "dark_and_dust", "light"];

fn split_names(tags: &SampleTags) -> [&'static str; 2] {
    let density = match tags.density_level {
        DensityLevel::Low => "low",
        DensityLevel::Medium => "medium",
        DensityLevel::High => "high",
    };
    let light = match tags.illumination {
        Illumination::Light => "light",
        Illumination::DarkAndDust => "dark_and_dust",
    };
    [density, light]
}

impl EvalReport {
    /// Builds the report from `(predicted, ground truth, tags)` triples.
    pub fn from_predictions(rows: &[(f64, f64, SampleTags)]) -> Result<Self> {
        let all: Vec<(f64, f64)> = rows.iter().map(|(p, g, _)| (*p, *g)).collect();
        let overall = SplitMetrics::from_pairs(&all).ok_or(Error::EmptyDataset)?;
        let mut grouped: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for (p, g, tags) in rows {
            for name in split_names(tags) {
                grouped.entry(name).or_default().push((*p, *g));
            }
        }
        let splits = grouped
            .into_iter()
            .filter_map(|(k, v)| SplitMetrics::from_pairs(&v).map(|m| (k.to_string(), m)))
            .collect();
        Ok(Self {
            mae: overall.mae,
            rmse: overall.rmse,
            n: overall.n,
            splits,
        })
    }
}

/// Evaluates any count predictor over `samples`.
pub fn evaluate_with(samples: &[Sample], mut predict: impl FnMut(&Sample) -> Result<f64>) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = samples
        .iter()
        .map(|s| Ok((predict(s)?, s.count, s.tags)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_predictions(&rows)
}

/// Predicted count = sum of the 1/8-scale density map.
pub fn evaluate(model: &Mfcc, samples: &[Sample], sigma: f64) -> Result<EvalReport> {
    evaluate_with(samples, |s| {
        let out = model.infer(&s.visible, &s.thermal, sigma)?;
        Ok(count_from_map(&out.density))
    })
}
