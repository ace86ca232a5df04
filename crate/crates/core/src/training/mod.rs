//! Dual-path training: every step trains the full-sequence path and the
//! masked path of the denoiser against the same noised batch.

mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use optim::{AdamW, AdamWConfig};

use crate::checkpoint;
use crate::conditions::{condition_dropout, CondBatch, ConditionBundle, DataDims};
use crate::diffusion::{q_sample_batch, Schedule};
use crate::error::{Error, Result};
use crate::gesture_data::{FlatGesture, SynthSample};
use crate::mdt::{MaskPlan, MdtConfig, MdtModel};
use crate::nn::randn;

/// Mean smooth-L1 loss: `0.5 e²/δ` for `|e| ≤ δ`, else `|e| − 0.5δ`.
pub fn huber_loss(x0: &Tensor, x0_hat: &Tensor, delta: f64) -> Result<Tensor> {
    if x0.dims() != x0_hat.dims() {
        return Err(Error::shape(format!("{:?}", x0.dims()), format!("{:?}", x0_hat.dims())));
    }
    if delta <= 0.0 {
        return Err(Error::arg(format!("huber delta must be positive, got {delta}")));
    }
    let a = (x0 - x0_hat)?.abs()?;
    let c = a.minimum(delta)?;
    let per = ((c.sqr()? * (0.5 / delta))? + (a - c)?)?;
    Ok(per.mean_all()?)
}

/// One training sequence: clean gesture features and their conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub x0: FlatGesture,
    pub bundle: ConditionBundle,
}

impl From<&SynthSample> for TrainExample {
    fn from(s: &SynthSample) -> Self {
        Self { x0: s.gesture.to_flat(), bundle: s.bundle.clone() }
    }
}

/// Input widths implied by a dataset; every example must agree.
pub fn data_dims(data: &[TrainExample]) -> Result<DataDims> {
    let first = data.first().ok_or_else(|| Error::arg("dataset is empty"))?;
    let dims = DataDims {
        gesture: first.x0.dim,
        audio: first.bundle.audio.dim,
        text: first.bundle.text.dim,
        speakers: first.bundle.speaker.len(),
        emotions: first.bundle.emotion.len(),
    };
    for (i, ex) in data.iter().enumerate() {
        let b = &ex.bundle;
        if ex.x0.dim != dims.gesture
            || b.audio.dim != dims.audio
            || b.text.dim != dims.text
            || b.speaker.len() != dims.speakers
            || b.emotion.len() != dims.emotions
            || b.frames() != ex.x0.frames
        {
            return Err(Error::config(format!("example {i} does not match the dataset's widths")));
        }
    }
    Ok(dims)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Training window length; 0 uses whole sequences (which must then share a length).
    pub frames: usize,
    pub optimizer: AdamWConfig,
    pub huber_delta: f64,
    pub cond_dropout_p: f64,
    pub w_full: f64,
    pub w_masked: f64,
    pub seed: u64,
    /// Loss-curve sampling interval in steps.
    pub log_every: usize,
    /// Periodic checkpoint interval in steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            frames: 60,
            optimizer: AdamWConfig::default(),
            huber_delta: 1.0,
            cond_dropout_p: 0.1,
            w_full: 1.0,
            w_masked: 1.0,
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.optimizer.learning_rate <= 0.0 {
            return Err(Error::config(format!("learning_rate ({}) must be positive", self.optimizer.learning_rate)));
        }
        self.validate_common()
    }

    /// Checks shared by training and tests that freeze weights with `lr = 0`.
    fn validate_common(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.huber_delta <= 0.0 {
            return Err(Error::config(format!("huber_delta ({}) must be positive", self.huber_delta)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_p) {
            return Err(Error::config(format!("cond_dropout_p ({}) must lie in [0, 1)", self.cond_dropout_p)));
        }
        if self.w_full < 0.0 || self.w_masked < 0.0 || self.w_full + self.w_masked <= 0.0 {
            return Err(Error::config("loss weights w_full/w_masked must be non-negative with a positive sum"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be at least 1"));
        }
        if self.frames == 1 {
            return Err(Error::config("frames must be 0 (whole sequences) or at least 2"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let o = &self.optimizer;
        [
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("frames", self.frames.to_string()),
            ("learning_rate", o.learning_rate.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("adam_eps", o.eps.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("huber_delta", self.huber_delta.to_string()),
            ("cond_dropout_p", self.cond_dropout_p.to_string()),
            ("w_full", self.w_full.to_string()),
            ("w_masked", self.w_masked.to_string()),
            ("seed", self.seed.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies `key=value` overrides, ignoring keys owned by other modules.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| Error::config(format!("{key}: cannot parse {v:?}: {e}")))
        }
        for (k, v) in kv {
            match k.as_str() {
                "steps" => self.steps = parse(k, v)?,
                "batch_size" => self.batch_size = parse(k, v)?,
                "frames" => self.frames = parse(k, v)?,
                "learning_rate" => self.optimizer.learning_rate = parse(k, v)?,
                "beta1" => self.optimizer.beta1 = parse(k, v)?,
                "beta2" => self.optimizer.beta2 = parse(k, v)?,
                "adam_eps" => self.optimizer.eps = parse(k, v)?,
                "weight_decay" => self.optimizer.weight_decay = parse(k, v)?,
                "huber_delta" => self.huber_delta = parse(k, v)?,
                "cond_dropout_p" => self.cond_dropout_p = parse(k, v)?,
                "w_full" => self.w_full = parse(k, v)?,
                "w_masked" => self.w_masked = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                "log_every" => self.log_every = parse(k, v)?,
                "checkpoint_every" => self.checkpoint_every = parse(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Losses of one step; a path that is disabled by the input mode is `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub loss_full: Option<f64>,
    pub loss_masked: Option<f64>,
}

impl StepLosses {
    /// Weighted sum of the active paths.
    pub fn combined(&self, cfg: &TrainConfig) -> f64 {
        self.loss_full.map_or(0.0, |l| cfg.w_full * l) + self.loss_masked.map_or(0.0, |l| cfg.w_masked * l)
    }
}

/// A loss-curve sample: mean losses over the `log_every` steps ending at `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss_full: Option<f64>,
    pub loss_masked: Option<f64>,
    pub combined: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    let mut out = String::from("step,loss_full,loss_masked,combined\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{},{}", p.step, opt(p.loss_full), opt(p.loss_masked), p.combined);
    }
    out
}

/// Everything one step consumes, materialized so the loss can be
/// re-evaluated under perturbed weights.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub x0: Tensor,
    pub x_t: Tensor,
    pub ts: Vec<usize>,
    pub cond: CondBatch,
    pub plans: Option<Vec<MaskPlan>>,
}

/// Draws the batch, timesteps, noise and mask plans of one step from `rng`.
pub fn prepare_batch(
    data: &[TrainExample],
    model: &MdtModel,
    cfg: &TrainConfig,
    schedule: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedBatch> {
    if data.is_empty() {
        return Err(Error::arg("dataset is empty"));
    }
    let (dtype, device) = (model.dtype(), model.device().clone());
    let count = cfg.batch_size.min(data.len());
    let picks = sample_indices(rng, data.len(), count).into_vec();
    let mut x0_rows = Vec::with_capacity(count);
    let mut bundles = Vec::with_capacity(count);
    let mut frames = None;
    for &i in &picks {
        let ex = &data[i];
        let len = if cfg.frames == 0 { ex.x0.frames } else { cfg.frames };
        if ex.x0.frames < len {
            return Err(Error::config(format!("example {i} has {} frames, fewer than frames = {len}", ex.x0.frames)));
        }
        if *frames.get_or_insert(len) != len {
            return Err(Error::config("whole-sequence training needs equal sequence lengths; set frames"));
        }
        let start = rng.random_range(0..=ex.x0.frames - len);
        x0_rows.push(ex.x0.values[start * ex.x0.dim..(start + len) * ex.x0.dim].to_vec());
        let crop = |m: &FlatGesture| FlatGesture::new(len, m.dim, m.values[start * m.dim..(start + len) * m.dim].to_vec());
        let cropped = ConditionBundle::new(crop(&ex.bundle.audio)?, crop(&ex.bundle.text)?, ex.bundle.speaker.clone(), ex.bundle.emotion.clone())?;
        bundles.push(condition_dropout(&cropped, cfg.cond_dropout_p, rng)?);
    }
    let f = frames.unwrap_or(0);
    let dim = data[picks[0]].x0.dim;
    let x0 = Tensor::from_vec(x0_rows.concat(), (count, f, dim), &device)?.to_dtype(dtype)?;
    let cond = CondBatch::from_bundles(&bundles.iter().collect::<Vec<_>>(), dtype, &device)?;
    let ts: Vec<usize> = (0..count).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = randn(rng, &[count, f, dim], dtype, &device)?;
    let x_t = q_sample_batch(&x0, &ts, &eps, schedule)?;
    let plans = if model.config.input_mode.uses_masked() {
        let c = &model.config;
        Some(crate::mdt::draw_mask_plans(count, f, c.rho_base, c.wider, rng)?)
    } else {
        None
    };
    Ok(PreparedBatch { x0, x_t, ts, cond, plans })
}

/// Per-path Huber losses of a prepared batch, as differentiable scalars.
pub fn path_losses(model: &MdtModel, batch: &PreparedBatch, delta: f64) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let full = if model.config.input_mode.uses_full() {
        Some(huber_loss(&batch.x0, &model.forward_full(&batch.x_t, &batch.ts, &batch.cond)?, delta)?)
    } else {
        None
    };
    let masked = match &batch.plans {
        Some(plans) => {
            let out = model.forward_masked_with_plans(&batch.x_t, &batch.ts, &batch.cond, plans)?;
            Some(huber_loss(&batch.x0, &out, delta)?)
        }
        None => None,
    };
    Ok((full, masked))
}

/// Weighted total of the active path losses.
pub fn combined_loss(model: &MdtModel, batch: &PreparedBatch, cfg: &TrainConfig) -> Result<(Tensor, Option<f64>, Option<f64>)> {
    let (full, masked) = path_losses(model, batch, cfg.huber_delta)?;
    let scalar = |t: &Option<Tensor>| -> Result<Option<f64>> {
        t.as_ref().map(|t| Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)).transpose()
    };
    let (lf, lm) = (scalar(&full)?, scalar(&masked)?);
    let total = match (full, masked) {
        (Some(a), Some(b)) => ((a * cfg.w_full)? + (b * cfg.w_masked)?)?,
        (Some(a), None) => (a * cfg.w_full)?,
        (None, Some(b)) => (b * cfg.w_masked)?,
        (None, None) => return Err(Error::config("input_mode leaves no training path")),
    };
    Ok((total, lf, lm))
}

/// Model, optimizer and bookkeeping of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: MdtModel,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub schedule: Schedule,
    /// Number of completed steps.
    pub step: usize,
    pub curve: Vec<CurvePoint>,
    window: Window,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Window {
    full: f64,
    masked: f64,
    count: usize,
}

impl Trainer {
    pub fn new(model: MdtModel, config: TrainConfig, schedule: Schedule) -> Result<Self> {
        config.validate_common()?;
        if schedule.steps() != model.num_steps {
            return Err(Error::config(format!(
                "schedule has {} steps but the model embeds {}",
                schedule.steps(),
                model.num_steps
            )));
        }
        let optimizer = AdamW::new(config.optimizer, model.store())?;
        Ok(Self { model, optimizer, config, schedule, step: 0, curve: Vec::new(), window: Window::default() })
    }

    /// Randomness of step `s` (1-based) depends only on the seed and `s`.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64);
        rng
    }

    pub fn training_step(&mut self, data: &[TrainExample]) -> Result<StepLosses> {
        let step = self.step + 1;
        let mut rng = self.step_rng(step);
        let batch = prepare_batch(data, &self.model, &self.config, &self.schedule, &mut rng)?;
        let (total, lf, lm) = combined_loss(&self.model, &batch, &self.config)?;
        let value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                t: batch.ts.first().copied().unwrap_or(0),
                detail: format!("loss_full={lf:?} loss_masked={lm:?} timesteps={:?}", batch.ts),
            });
        }
        let grads = total.backward()?;
        self.optimizer.step(self.model.store(), &grads)?;
        self.step = step;
        self.window.full += lf.unwrap_or(0.0);
        self.window.masked += lm.unwrap_or(0.0);
        self.window.count += 1;
        if step % self.config.log_every == 0 {
            let n = self.window.count as f64;
            let point = CurvePoint {
                step,
                loss_full: lf.map(|_| self.window.full / n),
                loss_masked: lm.map(|_| self.window.masked / n),
                combined: (self.config.w_full * self.window.full + self.config.w_masked * self.window.masked) / n,
            };
            self.curve.push(point);
            self.window = Window::default();
        }
        Ok(StepLosses { step, loss_full: lf, loss_masked: lm })
    }

    /// Trains until `until` completed steps, calling `on_checkpoint` every
    /// `checkpoint_every` steps.
    pub fn run_until(
        &mut self,
        data: &[TrainExample],
        until: usize,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let losses = self.training_step(data)?;
            if losses.step % self.config.log_every == 0 {
                if let Some(p) = self.curve.last() {
                    log::info!("step {} combined loss {:.6}", p.step, p.combined);
                }
            }
            if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.config.to_kv();
        meta.extend(self.schedule.to_metadata());
        meta.insert("trained_steps".into(), self.step.to_string());
        meta.insert("optimizer_updates".into(), self.optimizer.updates.to_string());
        meta.insert("window_full".into(), format!("{:?}", self.window.full));
        meta.insert("window_masked".into(), format!("{:?}", self.window.masked));
        meta.insert("window_count".into(), self.window.count.to_string());
        let extra = self.optimizer.named_state(self.model.store());
        self.model.save(path, &extra, &meta)
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::save`].
    /// `config` overrides the stored training settings when given.
    pub fn resume(path: &Path, config: Option<TrainConfig>, device: &Device) -> Result<Self> {
        let c = checkpoint::load(path, device)?;
        let model = MdtModel::from_container(&c, device)?;
        let config = match config {
            Some(cfg) => cfg,
            None => {
                let mut cfg = TrainConfig::default();
                cfg.apply_kv(&c.metadata)?;
                cfg
            }
        };
        let schedule = Schedule::from_metadata(&c.metadata, model.num_steps)?;
        let mut trainer = Trainer::new(model, config, schedule)?;
        trainer.step = c.meta_parse("trained_steps")?;
        trainer.optimizer.load_state(trainer.model.store(), &c.tensors, c.meta_parse("optimizer_updates")?)?;
        trainer.window = Window {
            full: c.meta_parse("window_full")?,
            masked: c.meta_parse("window_masked")?,
            count: c.meta_parse("window_count")?,
        };
        Ok(trainer)
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: MdtModel,
    pub curve: Vec<CurvePoint>,
}

/// Builds a model for `data` and trains it for `train_cfg.steps` steps.
pub fn fit(
    data: &[TrainExample],
    train_cfg: &TrainConfig,
    mdt_cfg: &MdtConfig,
    schedule: &Schedule,
    dtype: DType,
    device: &Device,
) -> Result<FitOutput> {
    train_cfg.validate()?;
    mdt_cfg.validate()?;
    let dims = data_dims(data)?;
    let model = MdtModel::new(mdt_cfg.clone(), dims, schedule.steps(), dtype, device, train_cfg.seed)?;
    let mut trainer = Trainer::new(model, train_cfg.clone(), schedule.clone())?;
    trainer.run_until(data, train_cfg.steps, |_| Ok(()))?;
    Ok(FitOutput { model: trainer.model, curve: trainer.curve })
}
