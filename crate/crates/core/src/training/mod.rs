//! Losses, gradients, optimization and checkpointing for every variant.

mod adam;
mod checkpoint;
mod grad;

use serde::{Deserialize, Serialize};

pub use adam::{adaptive_l1_controller, AdamState, L1Controller, LrSchedule};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use grad::{
    backward, batch_loss, flatten_params, relu_atom_gradient_closed_form, unflatten_params, BatchStats, Gradients,
    Objective,
};

use crate::dictionary::{Dictionary, NormMode};
use crate::encoders::{check_prefixes, decode, decode_prefix, EncoderModel, SparseCode, StopRule, Variant};
use crate::error::{Error, Result};
use crate::generator::{Sampler, TreeSpec};
use crate::numerics::{norm, norm_sq, sub, DenseMatrix, RngStream};

/// Stream ids carved out of the run seed.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_BATCHES: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Dictionary size `p`.
    pub latents: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub adam_betas: (f64, f64),
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// Mean ℓ0 the ℓ1 controller steers toward (ReLU, Matryoshka).
    pub sparsity_target: f64,
    /// Initial ℓ1 weight.
    pub l1_weight: f64,
    /// Steps before the ℓ1 controller starts adjusting the weight.
    pub l1_warmup_steps: usize,
    pub controller: L1Controller,
    /// Batch top-k budget during the first `batch_topk_warm_steps` steps.
    pub batch_topk_warm_k: f64,
    pub batch_topk_warm_steps: usize,
    pub mp_intermediate_loss: bool,
    /// Re-seed never-selected pursuit atoms every this many steps (0 = off).
    pub mp_reseed_every: usize,
    /// Added to the encoder bias of latents that never fire in a batch.
    pub revive_eps: f64,
    /// Filled in from the run seed when omitted.
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// Synthetic-benchmark hyperparameters: batches of 200 for 15 000 steps,
    /// Adam (0.5, 0.9375) at 3e-2, gradient norm clipped at 1, target ℓ0 1.36.
    pub fn synthetic(variant: Variant, latents: usize, seed: u64) -> Self {
        Self {
            variant,
            latents,
            steps: 15_000,
            batch_size: 200,
            learning_rate: 3e-2,
            lr_schedule: LrSchedule::Constant,
            adam_betas: (0.5, 0.9375),
            weight_decay: 0.0,
            grad_clip_norm: 1.0,
            sparsity_target: 1.36,
            l1_weight: 1e-3,
            l1_warmup_steps: 3_000,
            controller: L1Controller::default(),
            batch_topk_warm_k: 3.0,
            batch_topk_warm_steps: 1_000,
            mp_intermediate_loss: false,
            mp_reseed_every: 0,
            revive_eps: 1e-5,
            seed,
        }
    }

    /// Embedding-file hyperparameters: expansion factor 25, batches of 8000,
    /// cosine schedule from 1e-6 up to 5e-4, weight decay 1e-5.
    pub fn embedding(variant: Variant, dim: usize, seed: u64) -> Self {
        Self {
            latents: 25 * dim,
            steps: 2_000,
            batch_size: 8_000,
            learning_rate: 5e-4,
            lr_schedule: LrSchedule::Cosine { warmup: 100, floor: 1e-6 },
            adam_betas: (0.9, 0.999),
            weight_decay: 1e-5,
            l1_weight: 1e-3,
            l1_warmup_steps: 0,
            ..Self::synthetic(variant, 25 * dim, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("adam betas {:?} outside [0, 1)", self.adam_betas));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if self.batch_size == 0 || self.latents == 0 {
            return bad("batch_size and latents must be positive".into());
        }
        if self.l1_weight < 0.0 || self.revive_eps < 0.0 || self.weight_decay < 0.0 {
            return bad("l1_weight, revive_eps and weight_decay must be nonnegative".into());
        }
        match &self.variant {
            Variant::Matryoshka { prefixes } => check_prefixes(prefixes, self.latents).map_err(|e| Error::Config(e.to_string()))?,
            Variant::TopK { k } if *k == 0 || *k > self.latents => return bad(format!("topk k={k} outside 1..={}", self.latents)),
            Variant::BatchTopK { k } if !(*k > 0.0) || *k > self.latents as f64 => {
                return bad(format!("batch top-k {k} outside (0, {}]", self.latents))
            }
            Variant::Mp { stop, .. } => stop.validate().map_err(|e| Error::Config(e.to_string()))?,
            _ => {}
        }
        Ok(())
    }
}

/// Default pursuit stop for training: residual below 0.05, at most `p` steps.
pub fn default_mp_stop(latents: usize) -> StopRule {
    StopRule::Residual { threshold: 0.05, max_steps: latents }
}

/// Unit-normalized Gaussian atoms; untied encoders start as a copy of the
/// atoms; all biases zero.
pub fn init_model(config: &TrainConfig, dim: usize) -> Result<EncoderModel> {
    config.validate()?;
    let p = config.latents;
    let mut rng = RngStream::new(config.seed, STREAM_INIT);
    let mut atoms = DenseMatrix::zeros(dim, p);
    for v in atoms.as_mut_slice() {
        *v = rng.standard_normal();
    }
    let dictionary = Dictionary::normalized(atoms)?;
    let (dictionary, weights) = if config.variant.is_mp() {
        (dictionary, None)
    } else {
        let w = dictionary.atoms().clone();
        (Dictionary::new(dictionary.atoms().clone(), vec![0.0; dim], NormMode::UnitBall)?, Some(w))
    };
    EncoderModel::new(dictionary, weights, vec![0.0; p], config.variant.clone())
}

/// Supplies training batches.
pub trait BatchSource {
    fn dim(&self) -> usize;
    fn next_batch(&mut self, n: usize, rng: &mut RngStream) -> Result<DenseMatrix>;
}

/// Fresh samples from the hierarchical generator every step.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    sampler: Sampler,
    dictionary: Dictionary,
}

impl SyntheticSource {
    pub fn new(spec: &TreeSpec, dictionary: Dictionary) -> Result<Self> {
        Ok(Self { sampler: Sampler::new(spec)?, dictionary })
    }
}

impl BatchSource for SyntheticSource {
    fn dim(&self) -> usize {
        self.dictionary.dim()
    }

    fn next_batch(&mut self, n: usize, rng: &mut RngStream) -> Result<DenseMatrix> {
        Ok(self.sampler.sample(&self.dictionary, n, rng)?.inputs)
    }
}

/// Rows drawn uniformly with replacement from a fixed matrix.
#[derive(Debug, Clone)]
pub struct RowSource {
    data: DenseMatrix,
}

impl RowSource {
    pub fn new(data: DenseMatrix) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::EmptyInput("no rows to train on".into()));
        }
        Ok(Self { data })
    }
}

impl BatchSource for RowSource {
    fn dim(&self) -> usize {
        self.data.cols()
    }

    fn next_batch(&mut self, n: usize, rng: &mut RngStream) -> Result<DenseMatrix> {
        let idx: Vec<usize> = (0..n).map(|_| rng.below(self.data.rows())).collect();
        Ok(self.data.select_rows(&idx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub mean_l0: f64,
    pub l1_weight: f64,
    pub grad_norm: f64,
}

/// Per-step knobs derived from the schedule and controllers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub step: usize,
    pub objective: Objective,
}

impl StepContext {
    pub fn at(config: &TrainConfig, step: usize, l1_weight: f64) -> Self {
        let batch_topk_k = match config.variant {
            Variant::BatchTopK { .. } if step < config.batch_topk_warm_steps => Some(config.batch_topk_warm_k),
            _ => None,
        };
        Self {
            step,
            objective: Objective { l1_weight, batch_topk_k, mp_intermediate: config.mp_intermediate_loss },
        }
    }
}

fn decay_mask(model: &EncoderModel) -> Vec<bool> {
    let (m, p) = (model.dim(), model.latents());
    let mut mask = vec![true; m * p];
    mask.extend(std::iter::repeat_n(false, m));
    if model.encoder_weights.is_some() {
        mask.extend(std::iter::repeat_n(true, m * p));
    }
    mask.extend(std::iter::repeat_n(false, p));
    mask
}

/// Forward, backward, clip, AdamW, norm projection and dead-latent revival.
pub fn train_step(
    model: &mut EncoderModel,
    state: &mut AdamState,
    batch: &DenseMatrix,
    config: &TrainConfig,
    ctx: &StepContext,
) -> Result<(StepRecord, BatchStats)> {
    let (stats, mut grads) = backward(model, batch, &ctx.objective)?;
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite {
            step: ctx.step,
            detail: format!("loss {} (mse {}, mean l0 {})", stats.loss, stats.mse, stats.mean_l0),
        });
    }
    let grad_norm = grads.clip(config.grad_clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { step: ctx.step, detail: format!("gradient norm {grad_norm}") });
    }
    let lr = config.lr_schedule.rate(config.learning_rate, ctx.step, config.steps);
    let mut params = flatten_params(model);
    state.update(&mut params, &grads.flatten(), lr, config.adam_betas, config.weight_decay, &decay_mask(model))?;
    *model = unflatten_params(model, &params)?;
    model.dictionary.project();
    if !model.variant.is_mp() && config.revive_eps > 0.0 {
        for (j, &u) in stats.usage.iter().enumerate() {
            if u == 0 {
                model.encoder_bias[j] += config.revive_eps;
            }
        }
    }
    let record = StepRecord {
        step: ctx.step,
        loss: stats.loss,
        mse: stats.mse,
        mean_l0: stats.mean_l0,
        l1_weight: ctx.objective.l1_weight,
        grad_norm,
    };
    Ok((record, stats))
}

/// Complete training state; checkpoints capture all of it.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: EncoderModel,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub step: usize,
    pub l1_weight: f64,
    pub rng: RngStream,
    pub history: Vec<StepRecord>,
    /// Per-atom selection counts since the last re-seed (pursuit only).
    pub usage: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dim: usize) -> Result<Self> {
        let model = init_model(&config, dim)?;
        let n = flatten_params(&model).len();
        Ok(Self {
            optimizer: AdamState::new(n),
            step: 0,
            l1_weight: config.l1_weight,
            rng: RngStream::new(config.seed, STREAM_BATCHES),
            history: Vec::new(),
            usage: vec![0.0; config.latents],
            model,
            config,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    pub fn step(&mut self, source: &mut dyn BatchSource) -> Result<StepRecord> {
        let batch = source.next_batch(self.config.batch_size, &mut self.rng)?;
        let ctx = StepContext::at(&self.config, self.step, self.l1_weight);
        let (record, stats) = train_step(&mut self.model, &mut self.optimizer, &batch, &self.config, &ctx)?;
        if matches!(self.config.variant, Variant::Relu | Variant::Matryoshka { .. }) && self.step >= self.config.l1_warmup_steps {
            self.l1_weight = self.config.controller.update(stats.mean_l0, self.config.sparsity_target, self.l1_weight);
        }
        if self.model.variant.is_mp() && self.config.mp_reseed_every > 0 {
            for (u, &c) in self.usage.iter_mut().zip(&stats.usage) {
                *u += c as f64;
            }
            if (self.step + 1) % self.config.mp_reseed_every == 0 {
                self.reseed_dead(&stats);
                self.usage.iter_mut().for_each(|u| *u = 0.0);
            }
        }
        self.history.push(record);
        self.step += 1;
        Ok(record)
    }

    /// Points the first never-selected atom at the worst batch residual.
    fn reseed_dead(&mut self, stats: &BatchStats) {
        let Some(dead) = self.usage.iter().position(|&u| u == 0.0) else { return };
        let Some((_, r)) = &stats.worst_residual else { return };
        let n = norm(r);
        if n == 0.0 {
            return;
        }
        let col: Vec<f64> = r.iter().map(|v| v / n).collect();
        self.model.dictionary.atoms_mut().set_col(dead, &col);
    }

    /// Runs until `config.steps` or `until`, whichever is first.
    pub fn run(&mut self, source: &mut dyn BatchSource, until: Option<usize>) -> Result<()> {
        let end = until.unwrap_or(self.config.steps).min(self.config.steps);
        while self.step < end {
            self.step(source)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            config: self.config.clone(),
            step: self.step,
            l1_weight: self.l1_weight,
            rng: self.rng.state(),
            history: self.history.clone(),
            usage: self.usage.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            config: ckpt.config,
            step: ckpt.step,
            l1_weight: ckpt.l1_weight,
            rng: RngStream::from_state(&ckpt.rng),
            history: ckpt.history,
            usage: ckpt.usage,
        }
    }
}

/// `‖x − x̂‖²`.
pub fn loss_mse(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::shape(format!("lengths {} and {} differ", x.len(), x_hat.len())));
    }
    Ok(norm_sq(&sub(x, x_hat)))
}

/// Sum over the declared prefixes of the prefix-decode squared error.
pub fn loss_matryoshka(model: &EncoderModel, x: &[f64], z: &SparseCode) -> Result<f64> {
    let Variant::Matryoshka { prefixes } = &model.variant else {
        return Err(Error::Contract(format!("matryoshka loss on a {} model", model.variant.name())));
    };
    if prefixes.is_empty() {
        return Err(Error::EmptyInput("no prefixes declared".into()));
    }
    prefixes.iter().map(|&pl| loss_mse(x, &decode_prefix(model, z, pl)?)).sum()
}

/// Full-decode squared error, for symmetry with [`loss_matryoshka`].
pub fn loss_full(model: &EncoderModel, x: &[f64], z: &SparseCode) -> Result<f64> {
    loss_mse(x, &decode(model, z))
}

#[cfg(test)]
mod tests;
