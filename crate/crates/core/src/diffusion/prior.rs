//! Per-pixel Gaussian fitted to the training images.
//!
//! The prior's exact noise predictor is added to the network output, so the
//! UNet only models what a diagonal Gaussian cannot:
//! `ε̂ = a_t·(x_t − √ᾱ_t·μ) + b_t·F(x_t, t)` with `a_t = √(1−ᾱ_t)/v_t`,
//! `b_t = √ᾱ_t·σ/√v_t` and `v_t = ᾱ_t·σ² + 1 − ᾱ_t`, all per pixel.
//! With `F = 0` this is the optimal ε-predictor for data drawn from
//! `N(μ, diag σ²)`; `b_t` is the standard deviation of its residual.

use super::nn::Tensor;
use super::sample::EpsilonModel;
use super::schedule::BetaSchedule;
use crate::{Error, Result};

/// Lower bound on the fitted standard deviation.
pub const MIN_PRIOR_STD: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl GaussianPrior {
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let mut n = 0usize;
        let (mut sum, mut sq): (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
        for img in images {
            if n == 0 {
                sum = vec![0.0; img.len()];
                sq = vec![0.0; img.len()];
            } else if img.len() != sum.len() {
                return Err(Error::Shape("prior images differ in size".into()));
            }
            for (j, &v) in img.iter().enumerate() {
                sum[j] += v as f64;
                sq[j] += (v as f64).powi(2);
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Data("cannot fit a prior to zero images".into()));
        }
        let nf = n as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / nf) as f32).collect();
        let std = sq
            .iter()
            .zip(&sum)
            .map(|(q, s)| {
                let var = (q / nf - (s / nf).powi(2)).max(0.0);
                (var.sqrt() as f32).max(MIN_PRIOR_STD)
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn isotropic(len: usize, mean: f32, std: f32) -> Self {
        Self {
            mean: vec![mean; len],
            std: vec![std.max(MIN_PRIOR_STD); len],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len()
            || self.mean.iter().any(|v| !v.is_finite())
            || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::Format("invalid Gaussian prior".into()));
        }
        Ok(())
    }

    fn check(&self, x: &Tensor<f32>, t: &[usize]) -> Result<usize> {
        let per = x.data.len() / t.len().max(1);
        if x.shape[0] != t.len() || per != self.len() {
            return Err(Error::Shape(format!(
                "prior covers {} values per image, got {per} over a batch of {}",
                self.len(),
                t.len()
            )));
        }
        Ok(per)
    }

    /// Combines the network output `f` into a noise prediction.
    pub fn combine(&self, x: &Tensor<f32>, f: &Tensor<f32>, t: &[usize], schedule: &BetaSchedule) -> Result<Tensor<f32>> {
        let per = self.check(x, t)?;
        let mut out = Tensor::zeros(x.shape);
        for (b, &tb) in t.iter().enumerate() {
            let ab = schedule.alpha_bar(tb);
            let (ra, rn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let range = b * per..(b + 1) * per;
            let (xs, fs, os) = (&x.data[range.clone()], &f.data[range.clone()], &mut out.data[range]);
            for j in 0..per {
                let s = self.std[j];
                let v = ab as f32 * s * s + 1.0 - ab as f32;
                os[j] = rn * (xs[j] - ra * self.mean[j]) / v + ra * s / v.sqrt() * fs[j];
            }
        }
        Ok(out)
    }

    /// `∂ε̂/∂F` for every element of a batch at steps `t`.
    pub fn output_scale(&self, shape: [usize; 4], t: &[usize], schedule: &BetaSchedule) -> Tensor<f32> {
        let per = self.len();
        let mut out = Tensor::zeros(shape);
        for (b, &tb) in t.iter().enumerate() {
            let ab = schedule.alpha_bar(tb) as f32;
            for (o, &s) in out.data[b * per..(b + 1) * per].iter_mut().zip(&self.std) {
                *o = ab.sqrt() * s / (ab * s * s + 1.0 - ab).sqrt();
            }
        }
        out
    }
}

/// An ε-model whose output is combined with a [`GaussianPrior`].
pub struct Preconditioned<'a, M> {
    pub inner: &'a mut M,
    pub prior: &'a GaussianPrior,
    pub schedule: &'a BetaSchedule,
}

impl<M: EpsilonModel> EpsilonModel for Preconditioned<'_, M> {
    fn predict(&mut self, x: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        let f = self.inner.predict(x, t)?;
        self.prior.combine(x, &f, t, self.schedule)
    }
}
