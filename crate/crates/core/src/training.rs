//! Cross-entropy training with SGD, the inverse-time learning-rate decay
//! `lr0 / (1 + dr · epoch)`, the staged schedule for cascades, and the
//! checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "SECPCKPT" | u8 version=1 | u8 variant | 5×u32 config | u32 tensor count
//! per tensor: u16 name len | name (UTF-8) | u8 ndim | ndim×u32 dims | f32 payload
//! ```
//!
//! The config fields are, in order, `in_channels`, `num_classes`,
//! `base_width`, `depth`, `se_ratio`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytes::Reader;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::networks::{build_variant, Network, NetworkConfig, VariantId};
use crate::tensor::{Graph, ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Decay rate of the inverse-time schedule.
    pub dr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr0: 0.01, dr: 0.1, epochs: 100, batch_size: 16, seed: 0, momentum: 0.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.dr >= 0.0 && self.dr.is_finite()) {
            return Err(Error::Config(format!("dr must be non-negative, got {}", self.dr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Learning rate for the (zero-based) `epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 / (1.0 + cfg.dr * epoch as f64)
}

/// Plain SGD update `p ← p − lr·g` on every trainable parameter, then clears gradients.
pub fn sgd_step<T: Real>(params: &mut ParamStore<T>, lr: f64) -> Result<()> {
    Sgd::new(0.0).step(params, lr)
}

/// SGD with optional heavy-ball momentum (`v ← μv + g; p ← p − lr·v`).
#[derive(Clone, Debug, Default)]
pub struct Sgd<T: Real = f32> {
    pub momentum: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let lr = T::lit(lr);
        let mu = T::lit(self.momentum);
        self.velocity.resize(params.len(), None);
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            if p.frozen {
                p.grad = None;
                continue;
            }
            let grad = p
                .grad
                .take()
                .ok_or_else(|| Error::Internal(format!("trainable parameter `{}` has no gradient", p.name)))?;
            if self.momentum == 0.0 {
                for (w, g) in p.tensor.data_mut().iter_mut().zip(grad.data()) {
                    *w = *w - lr * *g;
                }
            } else {
                let v = vel.get_or_insert_with(|| vec![T::zero(); grad.len()]);
                for ((w, g), v) in p.tensor.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                    *v = mu * *v + *g;
                    *w = *w - lr * *v;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Train the plain primary U-Net.
    PretrainBackbone,
    /// Add SEC modules and the pyramid (if any), initialize shared layers from the backbone, tune the primary.
    AddSECAndTune,
    /// Freeze the primary network and train the secondary one.
    TrainSecondaryFrozenPrimary,
    /// Unfreeze everything and fine-tune end to end.
    FinetuneAll,
}

impl Stage {
    pub const ORDER: [Stage; 4] =
        [Stage::PretrainBackbone, Stage::AddSECAndTune, Stage::TrainSecondaryFrozenPrimary, Stage::FinetuneAll];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether the stage optimizes the cascade's final output rather than the primary one.
    pub fn trains_final_output(self) -> bool {
        matches!(self, Stage::TrainSecondaryFrozenPrimary | Stage::FinetuneAll)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    /// Minimum epoch-loss improvement that resets the patience counter.
    pub min_delta: f64,
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { min_delta: 1e-4, patience: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage: Stage,
    pub epochs: usize,
}

/// Ordered stages with their epoch budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
    /// Convergence criterion for the backbone pretraining stage.
    pub pretrain_early_stop: Option<EarlyStop>,
}

impl StagePlan {
    /// Two stages for single networks, four for cascades, `epochs` each.
    pub fn for_variant(variant: VariantId, epochs: usize) -> Self {
        let n = if variant.is_cascade() { 4 } else { 2 };
        Self {
            stages: Stage::ORDER[..n].iter().map(|&stage| StageSpec { stage, epochs }).collect(),
            pretrain_early_stop: Some(EarlyStop::default()),
        }
    }

    pub fn validate(&self, variant: VariantId) -> Result<()> {
        let n = if variant.is_cascade() { 4 } else { 2 };
        let stages: Vec<Stage> = self.stages.iter().map(|s| s.stage).collect();
        if stages != Stage::ORDER[..n] {
            return Err(Error::Config(format!(
                "plan {stages:?} does not fit {variant}: expected {:?}",
                &Stage::ORDER[..n]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean training cross-entropy over the epoch.
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainingLog {
    /// `epoch,lr,loss,seconds` with full-precision values.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss,seconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.lr, r.loss, r.seconds);
        }
        s
    }

    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &TrainingLog) -> bool {
        self.stopped_early == other.stopped_early
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch && a.lr.to_bits() == b.lr.to_bits() && a.loss.to_bits() == b.loss.to_bits()
            })
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Stacks samples into `[B, 1, H, W]` images and `[B, H, W]` labels.
pub fn make_batch<T: Real>(samples: &[&Sample]) -> Result<(Tensor<T>, Mask)> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let [c, h, w] = [first.image.shape()[0], first.height(), first.width()];
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::Data(format!(
                "sample `{}` has shape {:?}, batch expects {:?}",
                s.patient_id,
                s.image.shape(),
                first.image.shape()
            )));
        }
        data.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
    }
    let images = Tensor::new([samples.len(), c, h, w], data)?;
    let mask = Mask::stack(samples.iter().map(|s| &s.mask))?;
    Ok((images, mask))
}

/// Sets freeze flags for `stage`: the primary network is frozen only while
/// the secondary is trained on its own.
pub fn apply_stage_freezes<T: Real>(net: &mut Network<T>, stage: Stage) {
    let freeze_primary = stage == Stage::TrainSecondaryFrozenPrimary;
    net.params.set_frozen(freeze_primary, |n| n.starts_with("primary."));
    net.params.set_frozen(false, |n| n.starts_with("secondary."));
}

/// Cross-entropy of `net` on one batch, without updating anything.
pub fn batch_loss<T: Real>(net: &Network<T>, images: &Tensor<T>, mask: &Mask, final_output: bool) -> Result<f64> {
    let mut g = Graph::new();
    let params: Vec<_> = net.params.iter().map(|p| g.input(p.tensor.clone())).collect();
    let x = g.input(images.clone());
    let logits = if final_output { net.forward(&mut g, &params, x)?.last } else { net.forward_primary(&mut g, &params, x)? };
    let loss = g.softmax_cross_entropy(logits, mask)?;
    Ok(g.value(loss).data()[0].to_f64().unwrap())
}

/// One forward/backward pass; accumulates gradients into `net.params` and returns the loss.
pub fn accumulate_gradients<T: Real>(net: &mut Network<T>, images: &Tensor<T>, mask: &Mask, final_output: bool) -> Result<f64> {
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g);
    let x = g.input(images.clone());
    let logits = if final_output { net.forward(&mut g, &bound, x)?.last } else { net.forward_primary(&mut g, &bound, x)? };
    let loss = g.softmax_cross_entropy(logits, mask)?;
    let value = g.value(loss).data()[0].to_f64().unwrap();
    let grads = g.backward(loss)?;
    net.params.collect_grads(&bound, &grads)?;
    Ok(value)
}

/// Runs `cfg.epochs` epochs of mini-batch SGD for `stage`.
///
/// Freeze flags must already be set (see [`apply_stage_freezes`]).
pub fn train_stage<T: Real>(net: &mut Network<T>, dataset: &[Sample], cfg: &TrainConfig, stage: Stage) -> Result<TrainingLog> {
    train_stage_with(net, dataset, cfg, stage, None)
}

pub fn train_stage_with<T: Real>(
    net: &mut Network<T>,
    dataset: &[Sample],
    cfg: &TrainConfig,
    stage: Stage,
    early_stop: Option<EarlyStop>,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if stage.trains_final_output() && net.secondary.is_none() {
        return Err(Error::Config(format!("stage {stage:?} needs a cascade, got {}", net.variant)));
    }
    let final_output = stage.trains_final_output();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((stage.index() as u64 + 1) << 32));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut opt = Sgd::new(cfg.momentum);
    let mut log = TrainingLog::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (images, mask) = make_batch::<T>(&batch)?;
            let loss = match accumulate_gradients(net, &images, &mask, final_output) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    net.params.zero_grad();
                    return Err(Error::Diverged { epoch, batch: b, lr });
                }
                Err(e) => return Err(e),
            };
            opt.step(&mut net.params, lr)?;
            total += loss * chunk.len() as f64;
        }
        let loss = total / dataset.len() as f64;
        log.records.push(EpochRecord { epoch, lr, loss, seconds: start.elapsed().as_secs_f64() });
        log::debug!("{stage:?} epoch {epoch}: lr {lr:.5} loss {loss:.5}");

        if let Some(es) = early_stop {
            if best - loss >= es.min_delta {
                stale = 0;
            } else {
                stale += 1;
            }
            best = best.min(loss);
            if stale >= es.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok(log)
}

/// Emitted by [`staged_train_with`] around each stage.
pub enum StageEvent<'a> {
    Started { stage: Stage, params: &'a ParamStore<f32> },
    Finished { stage: Stage, params: &'a ParamStore<f32>, log: &'a TrainingLog },
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub stage: Stage,
    pub log: TrainingLog,
    /// Encoded checkpoint of the network at the end of the stage.
    pub checkpoint: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct StagedOutcome {
    pub network: Network<f32>,
    pub stages: Vec<StageResult>,
}

/// Staged training: backbone, then SEC/pyramid, then (cascades) secondary
/// with a frozen primary, then end-to-end fine-tuning.
pub fn staged_train(
    variant: VariantId,
    net_cfg: NetworkConfig,
    dataset: &[Sample],
    plan: &StagePlan,
    cfg: &TrainConfig,
) -> Result<StagedOutcome> {
    staged_train_with(variant, net_cfg, dataset, plan, cfg, |_| {})
}

pub fn staged_train_with(
    variant: VariantId,
    net_cfg: NetworkConfig,
    dataset: &[Sample],
    plan: &StagePlan,
    cfg: &TrainConfig,
    mut observe: impl FnMut(StageEvent<'_>),
) -> Result<StagedOutcome> {
    plan.validate(variant)?;
    cfg.validate()?;
    let mut stages = Vec::with_capacity(plan.stages.len());
    let mut net: Option<Network<f32>> = None;

    for spec in &plan.stages {
        let stage_cfg = TrainConfig { epochs: spec.epochs, ..cfg.clone() };
        let mut current = match spec.stage {
            Stage::PretrainBackbone => build_variant(VariantId::Baseline, net_cfg, cfg.seed)?,
            Stage::AddSECAndTune => {
                let backbone = net.take().ok_or_else(|| Error::Internal("no backbone before stage 2".into()))?;
                let mut full = build_variant(variant, net_cfg, cfg.seed)?;
                let copied = full.params.load_matching(&backbone.params);
                log::debug!("stage 2 inherits {} tensors from the backbone", copied.len());
                full
            }
            _ => net.take().ok_or_else(|| Error::Internal(format!("no network before {:?}", spec.stage)))?,
        };
        apply_stage_freezes(&mut current, spec.stage);
        observe(StageEvent::Started { stage: spec.stage, params: &current.params });
        let early = if spec.stage == Stage::PretrainBackbone { plan.pretrain_early_stop } else { None };
        let log = if spec.epochs == 0 {
            TrainingLog::default()
        } else {
            train_stage_with(&mut current, dataset, &stage_cfg, spec.stage, early)?
        };
        observe(StageEvent::Finished { stage: spec.stage, params: &current.params, log: &log });
        log::info!(
            "{variant}: {:?} done after {} epochs, loss {:.4}",
            spec.stage,
            log.records.len(),
            log.final_loss().unwrap_or(f64::NAN)
        );
        stages.push(StageResult { stage: spec.stage, log, checkpoint: encode_checkpoint(&current) });
        net = Some(current);
    }
    let mut network = net.ok_or_else(|| Error::Config("empty stage plan".into()))?;
    network.params.set_frozen(false, |_| true);
    Ok(StagedOutcome { network, stages })
}

const CKPT_MAGIC: &[u8; 8] = b"SECPCKPT";
const CKPT_VERSION: u8 = 1;

/// Serializes weights as `f32` together with the variant and config.
pub fn encode_checkpoint<T: Real>(net: &Network<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + net.params.numel() * 4);
    out.extend_from_slice(CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.push(net.variant.code());
    let c = &net.config;
    for v in [c.in_channels, c.num_classes, c.base_width, c.depth, c.se_ratio] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for p in net.params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(CKPT_MAGIC)?;
    let version = r.u8("version")?;
    if version != CKPT_VERSION {
        return r.fail(format!("unsupported checkpoint version {version}"));
    }
    let code = r.u8("variant")?;
    let variant = VariantId::from_code(code).map_or_else(|| r.fail(format!("unknown variant id {code}")), Ok)?;
    let mut fields = [0usize; 5];
    for f in &mut fields {
        *f = r.u32("network config")? as usize;
    }
    let [in_channels, num_classes, base_width, depth, se_ratio] = fields;
    let cfg = NetworkConfig { in_channels, num_classes, base_width, depth, se_ratio };
    let mut net = build_variant::<f32>(variant, cfg, 0)?;
    let count = r.u32("tensor count")? as usize;
    if count != net.params.len() {
        return r.fail(format!("{count} tensors, {variant} with {cfg:?} has {}", net.params.len()));
    }
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: at, message: "tensor name is not UTF-8".into() })?
            .to_owned();
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let Some(param) = net.params.by_name_mut(&name) else {
            return r.fail(format!("unexpected tensor `{name}`"));
        };
        if param.tensor.shape() != dims.as_slice() {
            return r.fail(format!("tensor `{name}` has dims {dims:?}, expected {:?}", param.tensor.shape()));
        }
        let data = r.f32s(param.tensor.len(), "tensor payload")?;
        param.tensor.data_mut().copy_from_slice(&data);
    }
    r.finish()?;
    Ok(net)
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network<f32>> {
    decode_checkpoint(&std::fs::read(path)?)
}
