use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::nn::{Module, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear warmup to `peak`, then cosine decay to `floor * peak` at `total`.
pub fn learning_rate(step: usize, peak: f64, warmup: usize, total: usize, floor: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    peak * (floor + (1.0 - floor) * cos)
}

/// Per-parameter first and second moments, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm<T: Real>(model: &mut impl Module<T>) -> f64 {
        let mut sq = 0.0;
        model.visit_params("", &mut |_, p| {
            sq += p.grad.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>();
        });
        sq.sqrt()
    }

    /// Applies one update with gradients clipped to global norm `clip`.
    /// Returns the pre-clip gradient norm.
    pub fn update<T: Real>(&mut self, model: &mut impl Module<T>, lr: f64, clip: f64) -> f64 {
        let norm = Self::grad_norm(model);
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        model.visit_params("", &mut |name, p| {
            let n = p.value.len();
            let m = m_all.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = v_all.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                let g = p.grad[i].to_f64().unwrap() * scale;
                let mi = c.beta1 * m[i] as f64 + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v[i] as f64 + (1.0 - c.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let w = p.value[i].to_f64().unwrap();
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + c.eps) + c.weight_decay * w;
                p.value[i] = T::lit(w - lr * upd);
            }
        });
        norm
    }
}
