use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::checkpoint::DiffusionCheckpoint;
use super::nn::Tensor;
use super::prior::Preconditioned;
use super::schedule::BetaSchedule;
use super::unet::UNet;
use crate::wavelet::CoefficientImage;
use crate::{Error, Result};

/// Anything that predicts the noise in `x_t`.
pub trait EpsilonModel {
    fn predict(&mut self, x: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>>;
}

impl EpsilonModel for UNet<f32> {
    fn predict(&mut self, x: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        self.forward(x, t)
    }
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroModel;

impl EpsilonModel for ZeroModel {
    fn predict(&mut self, x: &Tensor<f32>, _t: &[usize]) -> Result<Tensor<f32>> {
        Ok(Tensor::zeros(x.shape))
    }
}

/// Ancestral sampling without the final clamp. Image `i` draws all of its
/// noise from `ChaCha8(seed)` on stream `i`, so results do not depend on
/// `batch`.
pub fn sample_raw(
    model: &mut impl EpsilonModel,
    schedule: &BetaSchedule,
    shape: [usize; 3],
    n: usize,
    seed: u64,
    batch: usize,
) -> Result<Vec<Vec<f32>>> {
    let [c, h, w] = shape;
    let len = c * h * w;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let m = batch.max(1).min(n - start);
        let mut rngs: Vec<ChaCha8Rng> = (start..start + m)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        let mut x = Tensor::zeros([m, c, h, w]);
        for (b, rng) in rngs.iter_mut().enumerate() {
            for v in &mut x.data[b * len..(b + 1) * len] {
                *v = rng.sample(StandardNormal);
            }
        }
        for t in (1..=schedule.steps()).rev() {
            let eps = model.predict(&x, &vec![t; m])?;
            let alpha = schedule.alpha(t);
            let coef = (schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt()) as f32;
            let inv = (1.0 / alpha.sqrt()) as f32;
            let sigma = schedule.beta(t).sqrt() as f32;
            for (b, rng) in rngs.iter_mut().enumerate() {
                let xs = &mut x.data[b * len..(b + 1) * len];
                let es = &eps.data[b * len..(b + 1) * len];
                for (v, e) in xs.iter_mut().zip(es) {
                    *v = inv * (*v - coef * e);
                    if t > 1 {
                        let z: f32 = rng.sample(StandardNormal);
                        *v += sigma * z;
                    }
                }
            }
            if !x.all_finite() {
                return Err(Error::NonFinite(format!("sampler state at step {t}")));
            }
        }
        for b in 0..m {
            out.push(x.sample(b).to_vec());
        }
        start += m;
    }
    Ok(out)
}

/// Draws `n` images from a checkpoint, clamped to `[-1, 1]` and stamped
/// with its manifest digest.
pub fn sample(checkpoint: &mut DiffusionCheckpoint, n: usize, seed: u64) -> Result<Vec<CoefficientImage>> {
    checkpoint.validate()?;
    let cfg = checkpoint.unet_config.clone();
    let (h, w) = checkpoint.codec.shape();
    if (cfg.height, cfg.width) != (h, w) {
        return Err(Error::Format(format!(
            "checkpoint UNet is {}x{} but its codec produces {h}x{w}",
            cfg.height, cfg.width
        )));
    }
    let batch = checkpoint.train_config.batch_size;
    let shape = [cfg.in_channels, h, w];
    let raw = match &checkpoint.prior {
        Some(prior) => {
            let mut model = Preconditioned {
                inner: &mut checkpoint.model,
                prior,
                schedule: &checkpoint.schedule,
            };
            sample_raw(&mut model, &checkpoint.schedule, shape, n, seed, batch)?
        }
        None => sample_raw(&mut checkpoint.model, &checkpoint.schedule, shape, n, seed, batch)?,
    };
    raw.into_iter()
        .map(|px| {
            CoefficientImage::new(
                checkpoint.codec,
                checkpoint.row_fill,
                checkpoint.manifest_digest.clone(),
                px.into_iter().map(|v| (v as f64).clamp(-1.0, 1.0)).collect(),
            )
        })
        .collect()
}
