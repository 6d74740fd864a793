use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::DiffusionCheckpoint;
use super::nn::Tensor;
use super::optim::{learning_rate, AdamW, AdamWConfig};
use super::prior::GaussianPrior;
use super::schedule::{make_beta_schedule, BetaSchedule};
use super::unet::{UNet, UNetConfig};
use crate::wavelet::CoefficientImage;
use crate::{Error, Result};

// RNG stream assignment under the training seed.
const STREAM_INIT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_VALIDATION: u64 = 2;
const STREAM_EPOCH_BASE: u64 = 1 << 16;

/// Sampling starts from a standard normal, so training must diffuse that far.
pub const MAX_TERMINAL_ALPHA_BAR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub lr_floor: f64,
    pub grad_clip: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub validation_fraction: f64,
    pub rng_seed: u64,
    pub device: String,
    /// Add the exact ε-predictor of a per-pixel Gaussian fitted to the
    /// training split to the UNet output (see [`GaussianPrior`]).
    pub gaussian_skip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            warmup_steps: 500,
            lr_floor: 0.0,
            grad_clip: 1.0,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            validation_fraction: 481.0 / 2481.0,
            rng_seed: 0,
            device: "cpu".into(),
            gaussian_skip: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            epochs: 20,
            learning_rate: 2e-3,
            warmup_steps: 50,
            lr_floor: 0.05,
            diffusion_steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation fraction must be in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!("unsupported device {:?}", self.device)));
        }
        let s = self.schedule()?;
        let end = s.alpha_bar(s.steps());
        if !(end < MAX_TERMINAL_ALPHA_BAR) {
            return Err(Error::Config(format!(
                "alpha_bar at step {} is {end:.3e}; the forward process must end near pure noise \
                 (< {MAX_TERMINAL_ALPHA_BAR}), raise beta_end or diffusion_steps",
                s.steps()
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<BetaSchedule> {
        make_beta_schedule(self.diffusion_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Shuffled train/validation index split; both sides non-empty.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 images to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SPLIT);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// True when the last `window` validation losses all exceed the running
/// minimum by more than `ratio`.
pub fn sustained_divergence(history: &[EpochLoss], window: usize, ratio: f64) -> bool {
    if history.len() < window {
        return false;
    }
    let min = history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
    history[history.len() - window..]
        .iter()
        .all(|h| h.val_loss > min * (1.0 + ratio))
}

/// Stateful training loop over a fixed image set.
pub struct Trainer {
    state: DiffusionCheckpoint,
    images: Vec<Vec<f32>>,
    shape: [usize; 3],
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
}

fn check_dataset(images: &[CoefficientImage]) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("empty training set".into()))?;
    for img in images {
        if img.mode != first.mode || img.manifest_digest != first.manifest_digest || img.row_fill != first.row_fill {
            return Err(Error::Shape(
                "training images must share codec, row fill and manifest digest".into(),
            ));
        }
    }
    Ok(())
}

impl Trainer {
    pub fn new(images: &[CoefficientImage], config: &TrainConfig, unet: &UNetConfig) -> Result<Self> {
        config.validate()?;
        check_dataset(images)?;
        let first = &images[0];
        let (c, h, w) = first.shape();
        if (c, h, w) != (unet.in_channels, unet.height, unet.width) {
            return Err(Error::Shape(format!(
                "images are {c}x{h}x{w}, UNet expects {}x{}x{}",
                unet.in_channels, unet.height, unet.width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(STREAM_INIT);
        let model = UNet::new(unet.clone(), &mut rng)?;
        let prior = if config.gaussian_skip {
            let (train_idx, _) = split_indices(images.len(), config.validation_fraction, config.rng_seed)?;
            let px: Vec<Vec<f32>> = train_idx
                .iter()
                .map(|&i| images[i].pixels.iter().map(|&v| v as f32).collect())
                .collect();
            Some(GaussianPrior::fit(px.iter().map(Vec::as_slice))?)
        } else {
            None
        };
        let state = DiffusionCheckpoint {
            unet_config: unet.clone(),
            train_config: config.clone(),
            schedule: config.schedule()?,
            epoch: 0,
            history: Vec::new(),
            manifest_digest: first.manifest_digest.clone(),
            codec: first.mode,
            row_fill: first.row_fill,
            config_digest: None,
            model,
            prior,
            optimizer: Some(AdamW::new(AdamWConfig::default())),
        };
        Self::with_state(state, images)
    }

    /// Continues from a checkpoint; `images` must be the original set.
    pub fn resume(state: DiffusionCheckpoint, images: &[CoefficientImage]) -> Result<Self> {
        state.validate()?;
        check_dataset(images)?;
        if images[0].manifest_digest != state.manifest_digest {
            return Err(Error::DigestMismatch {
                expected: state.manifest_digest.clone(),
                found: images[0].manifest_digest.clone(),
            });
        }
        if state.optimizer.is_none() {
            return Err(Error::Format("checkpoint has no optimizer state to resume".into()));
        }
        Self::with_state(state, images)
    }

    fn with_state(state: DiffusionCheckpoint, images: &[CoefficientImage]) -> Result<Self> {
        let (train_idx, val_idx) = split_indices(
            images.len(),
            state.train_config.validation_fraction,
            state.train_config.rng_seed,
        )?;
        let shape = {
            let (c, h, w) = images[0].shape();
            [c, h, w]
        };
        Ok(Self {
            images: images
                .iter()
                .map(|im| im.pixels.iter().map(|&v| v as f32).collect())
                .collect(),
            shape,
            train_idx,
            val_idx,
            state,
        })
    }

    pub fn state(&self) -> &DiffusionCheckpoint {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut DiffusionCheckpoint {
        &mut self.state
    }

    pub fn into_checkpoint(self) -> DiffusionCheckpoint {
        self.state
    }

    pub fn split(&self) -> (&[usize], &[usize]) {
        (&self.train_idx, &self.val_idx)
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.state.train_config.epochs
    }

    fn total_steps(&self) -> usize {
        let cfg = &self.state.train_config;
        cfg.epochs * self.train_idx.len().div_ceil(cfg.batch_size)
    }

    /// Noisy batch and its noise for images `idx`.
    fn make_batch(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>, Vec<usize>) {
        let [c, h, w] = self.shape;
        let len = c * h * w;
        let sched = &self.state.schedule;
        let mut x = Tensor::zeros([idx.len(), c, h, w]);
        let mut eps = Tensor::zeros([idx.len(), c, h, w]);
        let mut steps = Vec::with_capacity(idx.len());
        for (b, &i) in idx.iter().enumerate() {
            let t = rng.random_range(1..=sched.steps());
            steps.push(t);
            let (a, s) = (sched.alpha_bar(t).sqrt() as f32, (1.0 - sched.alpha_bar(t)).sqrt() as f32);
            let src = &self.images[i];
            let xs = &mut x.data[b * len..(b + 1) * len];
            let es = &mut eps.data[b * len..(b + 1) * len];
            for j in 0..len {
                let e: f32 = rng.sample(StandardNormal);
                es[j] = e;
                xs[j] = a * src[j] + s * e;
            }
        }
        (x, eps, steps)
    }

    fn combine(&self, x: &Tensor<f32>, out: Tensor<f32>, steps: &[usize]) -> Result<Tensor<f32>> {
        match &self.state.prior {
            Some(p) => p.combine(x, &out, steps, &self.state.schedule),
            None => Ok(out),
        }
    }

    fn mse(pred: &Tensor<f32>, eps: &Tensor<f32>) -> f64 {
        pred.data
            .iter()
            .zip(&eps.data)
            .map(|(p, e)| ((p - e) as f64).powi(2))
            .sum::<f64>()
            / pred.data.len() as f64
    }

    /// Runs one epoch and appends its losses to the history.
    pub fn run_epoch(&mut self) -> Result<EpochLoss> {
        let epoch = self.state.epoch;
        let cfg = self.state.train_config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(STREAM_EPOCH_BASE + epoch as u64);
        let mut order = self.train_idx.clone();
        order.shuffle(&mut rng);
        let total = self.total_steps();
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut opt = self.state.optimizer.take().expect("trainer keeps optimizer state");
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, eps, steps) = self.make_batch(batch, &mut rng);
            let out = self.state.model.forward(&x, &steps).map_err(|e| {
                Error::NonFinite(format!("epoch {} batch {bi}: {e}", epoch + 1))
            })?;
            let pred = self.combine(&x, out, &steps)?;
            let loss = Self::mse(&pred, &eps);
            let step = opt.step as usize;
            let lr = learning_rate(step, cfg.learning_rate, cfg.warmup_steps, total, cfg.lr_floor);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {} batch {bi} (lr {lr:e}, max |x_t| {:.3e}); \
                     lower the learning rate or check the image scales",
                    epoch + 1,
                    x.data.iter().fold(0f32, |m, v| m.max(v.abs()))
                )));
            }
            let k = 2.0 / pred.data.len() as f32;
            let mut grad = Tensor::from_vec(
                pred.shape,
                pred.data.iter().zip(&eps.data).map(|(p, e)| k * (p - e)).collect(),
            );
            if let Some(prior) = &self.state.prior {
                let scale = prior.output_scale(grad.shape, &steps, &self.state.schedule);
                for (g, s) in grad.data.iter_mut().zip(&scale.data) {
                    *g *= s;
                }
            }
            let model = &mut self.state.model;
            model.zero_grad();
            model.backward(&grad);
            let norm = opt.update(model, lr, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient norm at epoch {} batch {bi} (lr {lr:e}, loss {loss:.4})",
                    epoch + 1
                )));
            }
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        self.state.optimizer = Some(opt);
        let val_loss = self.validation_loss()?;
        let record = EpochLoss {
            epoch: epoch + 1,
            train_loss: sum / count as f64,
            val_loss,
        };
        self.state.history.push(record);
        self.state.epoch += 1;
        if sustained_divergence(&self.state.history, 5, 0.2) {
            log::warn!(
                "validation loss has stayed >20% above its minimum for 5 epochs (epoch {})",
                epoch + 1
            );
        }
        Ok(record)
    }

    /// Mean ε-loss on the validation split with a fixed draw of steps and
    /// noise, so values are comparable across epochs.
    pub fn validation_loss(&mut self) -> Result<f64> {
        let cfg = &self.state.train_config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(STREAM_VALIDATION);
        let batch_size = cfg.batch_size;
        let val = self.val_idx.clone();
        let mut sum = 0.0;
        for batch in val.chunks(batch_size) {
            let (x, eps, steps) = self.make_batch(batch, &mut rng);
            let out = self.state.model.forward(&x, &steps)?;
            let pred = self.combine(&x, out, &steps)?;
            sum += Self::mse(&pred, &eps) * batch.len() as f64;
        }
        Ok(sum / val.len() as f64)
    }

    /// Trains until the configured epoch count, calling `on_epoch` after
    /// each epoch (e.g. to save a checkpoint).
    pub fn run(&mut self, mut on_epoch: impl FnMut(&mut DiffusionCheckpoint, &EpochLoss) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let rec = self.run_epoch()?;
            log::info!(
                "epoch {}/{}: train {:.5} val {:.5}",
                rec.epoch,
                self.state.train_config.epochs,
                rec.train_loss,
                rec.val_loss
            );
            on_epoch(&mut self.state, &rec)?;
        }
        Ok(())
    }
}

pub fn train(images: &[CoefficientImage], config: &TrainConfig, unet: &UNetConfig) -> Result<DiffusionCheckpoint> {
    let mut trainer = Trainer::new(images, config, unet)?;
    trainer.run(|_, _| Ok(()))?;
    Ok(trainer.into_checkpoint())
}
