//! Two-phase training: aligner warm-up with frozen backbones, then the full
//! model. Adam, global-norm gradient clipping, evenly mixed batches.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, Phase, SavedOptimizer};
use crate::data::{flip_horizontal, frame_mask, splice_negative, Regime, SamplePair};
use crate::featurizers::{audio_forward, visual_forward, ModelConfig, ModelError, ModelParams, ParamGroup};
use crate::losses::{sample_coords, total_loss, LossBreakdown, LossConfig, LossError, LossInputs, NONNEG_SAMPLES};
use crate::rng;
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("regime {regime:?} has {available} training samples, a batch needs {needed}")]
    InsufficientSamples {
        regime: Regime,
        available: usize,
        needed: usize,
    },
    #[error("non-finite loss at step {step}; batch sample ids {batch:?}")]
    NonFiniteLoss { step: u64, batch: Vec<usize> },
    #[error("shape mismatch for parameter {index}: {param:?} vs gradient {grad:?}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    /// Raised by step observers that fail to record their output.
    #[error("writing training output: {0}")]
    Output(String),
    #[error("checkpoint does not match this run: {0}")]
    ResumeMismatch(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which regimes a batch draws from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    /// Half language, half sound.
    #[default]
    Mixed,
    Language,
    Sound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub mode: BatchMode,
    /// Steps of the aligner-only phase; 0 skips it.
    pub warmup_steps: u64,
    /// Total steps including warm-up.
    pub total_steps: u64,
    pub warmup_lr: f64,
    pub lr: f64,
    /// Global gradient norm above which gradients are rescaled.
    pub grad_clip: f64,
    pub seed: u64,
    pub flip_prob: f64,
    pub splice_prob: f64,
    /// Splice length range as fractions of the clip length.
    pub splice_fraction: [f64; 2],
    pub splice_ramp: usize,
    /// A checkpoint is written every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 8,
            mode: BatchMode::Mixed,
            warmup_steps: 300,
            total_steps: 5000,
            warmup_lr: 1e-3,
            lr: 3e-4,
            grad_clip: 5.0,
            seed: 0,
            flip_prob: 0.5,
            splice_prob: 0.5,
            splice_fraction: [0.10, 0.25],
            splice_ramp: 4,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        self.model.validate()?;
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.mode == BatchMode::Mixed && self.batch_size % 2 != 0 {
            return bad(format!("mixed batches need an even batch_size, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.warmup_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("Adam needs betas in [0, 1) and eps > 0".into());
        }
        let [lo, hi] = self.splice_fraction;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return bad(format!("splice_fraction [{lo}, {hi}] must satisfy 0 < lo <= hi < 1"));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("splice_prob", self.splice_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn phase_at(&self, step: u64) -> Phase {
        if step <= self.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Full
        }
    }
}

/// Bias-corrected Adam moments for a list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    adam: &AdamConfig,
) -> Result<()> {
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(TrainError::ShapeMismatch {
                index: i,
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = adam.beta1 * *mj + (1.0 - adam.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = adam.beta2 * *vj + (1.0 - adam.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + adam.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// A training batch after augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Indices into the training split.
    pub ids: Vec<usize>,
    pub flipped: Vec<bool>,
    /// `(donor id, position, length)` of each splice.
    pub splices: Vec<Option<(usize, usize, usize)>>,
    /// `[B, C, H, W]`.
    pub images: Tensor,
    /// `[B, C, T_in]`.
    pub clips: Tensor,
    /// `[B, T]` per-frame splice/silence weights.
    pub splice_mask: Tensor,
}

fn regime_pool(samples: &[SamplePair], regime: Regime) -> Vec<usize> {
    (0..samples.len()).filter(|&i| samples[i].regime == regime).collect()
}

/// Picks `take` ids from `pool` for `step`: each epoch is a fresh
/// permutation of the pool consumed in consecutive slices.
fn epoch_slice(pool: &[usize], take: usize, per_epoch: u64, seed: u64, name: &str, step: u64) -> Vec<usize> {
    let (epoch, pos) = ((step - 1) / per_epoch, ((step - 1) % per_epoch) as usize);
    let mut perm = pool.to_vec();
    perm.shuffle(&mut rng::stream(seed, name, epoch));
    perm[pos * take..(pos + 1) * take].to_vec()
}

/// Batch ids for global step `step` (1-based). In mixed mode an epoch is
/// one pass over the smaller regime.
pub fn batch_ids(samples: &[SamplePair], cfg: &TrainConfig, step: u64) -> Result<Vec<usize>> {
    let b = cfg.batch_size;
    let lang = regime_pool(samples, Regime::Language);
    let sound = regime_pool(samples, Regime::Sound);
    let need = |pool: &Vec<usize>, regime, needed| {
        if pool.len() < needed {
            Err(TrainError::InsufficientSamples {
                regime,
                available: pool.len(),
                needed,
            })
        } else {
            Ok(())
        }
    };
    let step = step.max(1);
    match cfg.mode {
        BatchMode::Mixed => {
            let half = b / 2;
            need(&lang, Regime::Language, half)?;
            need(&sound, Regime::Sound, half)?;
            let per_epoch = (lang.len().min(sound.len()) / half) as u64;
            let mut ids = epoch_slice(&lang, half, per_epoch, cfg.seed, "epoch-language", step);
            ids.extend(epoch_slice(&sound, half, per_epoch, cfg.seed, "epoch-sound", step));
            Ok(ids)
        }
        BatchMode::Language | BatchMode::Sound => {
            let (pool, regime) = if cfg.mode == BatchMode::Language {
                (lang, Regime::Language)
            } else {
                (sound, Regime::Sound)
            };
            need(&pool, regime, b)?;
            let per_epoch = (pool.len() / b) as u64;
            Ok(epoch_slice(&pool, b, per_epoch, cfg.seed, "epoch-single", step))
        }
    }
}

/// Assembles the batch for `step`, applying flips and negative splices
/// drawn from stream `(seed, "augment", step)`.
pub fn make_batch(samples: &[SamplePair], cfg: &TrainConfig, step: u64) -> Result<Batch> {
    let ids = batch_ids(samples, cfg, step)?;
    let mut r = rng::stream(cfg.seed, "augment", step);
    let frames = cfg.model.frames;
    let (mut images, mut clips, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    let (mut flipped, mut splices) = (Vec::new(), Vec::new());
    for &id in &ids {
        let mut s = samples[id].clone();
        let flip = r.random::<f64>() < cfg.flip_prob;
        if flip {
            flip_horizontal(&mut s);
        }
        let t = s.clip.shape()[1];
        let mut mask = s.splice_mask.clone();
        let mut splice = None;
        if r.random::<f64>() < cfg.splice_prob && samples.len() > 1 {
            let [lo, hi] = cfg.splice_fraction;
            let len = ((r.random_range(lo..=hi) * t as f64).round() as usize).clamp(2 * cfg.splice_ramp, t);
            let donor_id = (id + r.random_range(1..samples.len())) % samples.len();
            let pos = r.random_range(0..=t - len);
            let offset = r.random_range(0..=t - len);
            let donor = &samples[donor_id].clip;
            let c = donor.shape()[0];
            let segment = Tensor::from_fn([c, len], |i| donor.data()[(i / len) * t + offset + i % len]);
            let (clip, m) = splice_negative(&s.clip, &segment, pos, cfg.splice_ramp)
                .expect("splice bounds chosen within the clip");
            s.clip = clip;
            for (a, b) in mask.iter_mut().zip(&m) {
                *a = a.max(*b);
            }
            splice = Some((donor_id, pos, len));
        }
        masks.push(Tensor::new([frames], frame_mask(&mask, frames))?);
        images.push(s.image);
        clips.push(s.clip);
        flipped.push(flip);
        splices.push(splice);
    }
    Ok(Batch {
        ids,
        flipped,
        splices,
        images: Tensor::stack(&images)?,
        clips: Tensor::stack(&clips)?,
        splice_mask: Tensor::stack(&masks)?,
    })
}

/// Loss and gradients of the trainable parameters (in parameter order) on
/// one batch. `nonneg_seed` selects the sampled coordinates.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &Batch,
    loss: &LossConfig,
    trainable: impl Fn(ParamGroup) -> bool,
    nonneg_rng: &mut rng::Rng,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let cfg = &params.config;
    let mut g = Graph::new();
    let p = params.bind(&mut g, &trainable);
    let images = g.constant(batch.images.clone());
    let clips = g.constant(batch.clips.clone());
    let v = visual_forward(&mut g, &p, cfg, images)?;
    let a = audio_forward(&mut g, &p, cfg, clips)?;
    let volumes = g.pair_volumes(a, v)?;
    let scores = g.aggregate(volumes, cfg.head_pool)?;
    let numel = g.value(volumes).numel();
    let coords = sample_coords(nonneg_rng, numel, NONNEG_SAMPLES);
    let inputs = LossInputs {
        volumes,
        scores,
        log_gamma: p.var("log_gamma"),
        splice_mask: &batch.splice_mask,
        nonneg_coords: &coords,
    };
    let (root, breakdown) = total_loss(&mut g, &inputs, loss)?;
    if !breakdown.total.is_finite() {
        return Ok((breakdown, Vec::new()));
    }
    let mut grads = g.backward(root)?;
    let out = params
        .names()
        .iter()
        .zip(p.vars())
        .filter(|(n, _)| trainable(ModelParams::group(n)))
        .map(|(_, &var)| grads.take(var).expect("trainable parameter has a gradient"))
        .collect();
    Ok((breakdown, out))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub l_av: f64,
    pub l_va: f64,
    pub l_dis: f64,
    pub l_splice: f64,
    pub l_cal: f64,
    pub l_nonneg: f64,
    pub l_tv: f64,
    pub total: f64,
    pub gamma: f64,
}

impl LogRecord {
    fn new(step: u64, b: &LossBreakdown, gamma: f64) -> Self {
        Self {
            step,
            l_av: b.l_av,
            l_va: b.l_va,
            l_dis: b.l_dis,
            l_splice: b.l_splice,
            l_cal: b.l_cal,
            l_nonneg: b.l_nonneg,
            l_tv: b.l_tv,
            total: b.total,
            gamma,
        }
    }
}

fn trainable_in(phase: Phase) -> impl Fn(ParamGroup) -> bool {
    move |group| phase == Phase::Full || group == ParamGroup::Aligner
}

/// Training state: parameters, the global step and the optimizer of the
/// current phase. Batches depend only on `(seed, step)`, so a trainer
/// rebuilt from a checkpoint continues the same trajectory.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub step: u64,
    phase: Phase,
    optimizer: OptimizerState,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if params.config != config.model {
            return Err(TrainError::ResumeMismatch("model config differs from training config".into()));
        }
        let phase = config.phase_at(1);
        let optimizer = Self::fresh_optimizer(&params, phase);
        Ok(Self {
            params,
            config,
            step: 0,
            phase,
            optimizer,
        })
    }

    pub fn init(config: TrainConfig) -> Result<Self> {
        let params = ModelParams::init(&config.model, config.seed)?;
        Self::new(params, config)
    }

    fn fresh_optimizer(params: &ModelParams, phase: Phase) -> OptimizerState {
        let keep = trainable_in(phase);
        let tensors: Vec<&Tensor> = params
            .names()
            .iter()
            .zip(params.tensors())
            .filter(|(n, _)| keep(ModelParams::group(n)))
            .map(|(_, t)| t)
            .collect();
        OptimizerState::new(&tensors)
    }

    fn trainable_names(&self) -> Vec<String> {
        let keep = trainable_in(self.phase);
        self.params
            .names()
            .iter()
            .filter(|n| keep(ModelParams::group(n)))
            .cloned()
            .collect()
    }

    pub fn from_checkpoint(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        let mut t = Self::new(ck.params, config)?;
        t.step = ck.step;
        if let Some(o) = ck.optimizer {
            t.phase = o.phase;
            if o.names != t.trainable_names() {
                return Err(TrainError::ResumeMismatch("optimizer parameters differ".into()));
            }
            t.optimizer = OptimizerState {
                step: o.adam_steps,
                m: o.m,
                v: o.v,
            };
        } else {
            t.phase = t.config.phase_at(t.step + 1);
            t.optimizer = Self::fresh_optimizer(&t.params, t.phase);
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            step: self.step,
            optimizer: Some(SavedOptimizer {
                phase: self.phase,
                adam_steps: self.optimizer.step,
                names: self.trainable_names(),
                m: self.optimizer.m.clone(),
                v: self.optimizer.v.clone(),
            }),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Runs one step and returns its log record (loss before the update,
    /// gamma used in that loss).
    pub fn step(&mut self, samples: &[SamplePair]) -> Result<LogRecord> {
        let step = self.step + 1;
        let phase = self.config.phase_at(step);
        if phase != self.phase {
            log::info!("step {step}: aligner warm-up done, training all parameters");
            self.phase = phase;
            self.optimizer = Self::fresh_optimizer(&self.params, phase);
        }
        let batch = make_batch(samples, &self.config, step)?;
        let mut nonneg_rng = rng::stream(self.config.seed, "nonneg", step);
        let gamma = self.params.gamma();
        let (breakdown, mut grads) = loss_and_grads(
            &self.params,
            &batch,
            &self.config.loss,
            trainable_in(phase),
            &mut nonneg_rng,
        )?;
        if !breakdown.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(TrainError::NonFiniteLoss { step, batch: batch.ids });
        }
        let norm = clip_global_norm(&mut grads, self.config.grad_clip);
        if norm > self.config.grad_clip {
            log::debug!("step {step}: gradient norm {norm:.3} clipped to {}", self.config.grad_clip);
        }
        let lr = match phase {
            Phase::Warmup => self.config.warmup_lr,
            Phase::Full => self.config.lr,
        };
        let keep = trainable_in(phase);
        let names = self.params.names().to_vec();
        let mut params: Vec<&mut Tensor> = names
            .iter()
            .zip(self.params.tensors_mut())
            .filter(|(n, _)| keep(ModelParams::group(n)))
            .map(|(_, t)| t)
            .collect();
        adam_step(&mut params, &grads, &mut self.optimizer, lr, &self.config.adam)?;
        self.step = step;
        Ok(LogRecord::new(step, &breakdown, gamma))
    }

    /// Steps until `total_steps`, handing each record to `on_step`.
    pub fn run(
        &mut self,
        samples: &[SamplePair],
        mut on_step: impl FnMut(&Trainer, &LogRecord) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let rec = self.step(samples)?;
            on_step(self, &rec)?;
        }
        Ok(())
    }
}

/// Aligner warm-up only: runs `warmup_steps` steps from fresh parameters.
pub fn train_warmup(params: ModelParams, samples: &[SamplePair], config: &TrainConfig) -> Result<(ModelParams, Vec<LogRecord>)> {
    let cfg = TrainConfig {
        total_steps: config.warmup_steps,
        ..config.clone()
    };
    let mut t = Trainer::new(params, cfg)?;
    let mut log = Vec::new();
    t.run(samples, |_, r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok((t.params, log))
}

/// Both phases to `total_steps`, returning the final trainer and the log.
pub fn train(samples: &[SamplePair], config: &TrainConfig) -> Result<(Trainer, Vec<LogRecord>)> {
    let mut t = Trainer::init(config.clone())?;
    let mut log = Vec::new();
    t.run(samples, |_, r| {
        log.push(r.clone());
        Ok(())
    })?;
    Ok((t, log))
}
