//! Channel transforms between raw minute series and normalized,
//! mirror-expanded length-512 series, with exact inverses.
//!
//! Forward chain per channel: log returns (prices) or arsinh (volumes),
//! signed-power normalization, winsorization, mirror expansion.

mod manifest;

pub use manifest::{
    fit_normalization, ChannelStats, NormalizationFit, NormalizationManifest, SigmaMode,
    MANIFEST_FORMAT,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result, MINUTES_PER_DAY, PADDED_LEN};

/// Left padding added by [`mirror_expand`] for a 390-minute day.
pub const PAD_LEFT: usize = (PADDED_LEN - MINUTES_PER_DAY) / 2;
/// Right padding added by [`mirror_expand`] for a 390-minute day.
pub const PAD_RIGHT: usize = PADDED_LEN - MINUTES_PER_DAY - PAD_LEFT;

/// The three synchronized channels, in image channel order (R, G, B).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    LogReturn,
    Spread,
    Volume,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 3] = [Self::LogReturn, Self::Spread, Self::Volume];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LogReturn => "log_return",
            Self::Spread => "spread",
            Self::Volume => "volume",
        }
    }
}

/// Per-channel preprocessing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSettings {
    /// Power index; the centered series is raised to `1/p`.
    pub p: f64,
    /// Apply arsinh before normalization.
    pub arsinh: bool,
    /// Winsorization level in normalized units; `None` disables clamping.
    pub z: Option<f64>,
}

impl ChannelSettings {
    /// Defaults: p = 1.5 for returns, p = 1 elsewhere, arsinh on volumes,
    /// winsorization at 10.
    pub fn default_for(kind: ChannelKind) -> Self {
        match kind {
            ChannelKind::LogReturn => Self {
                p: 1.5,
                arsinh: false,
                z: Some(10.0),
            },
            ChannelKind::Spread => Self {
                p: 1.0,
                arsinh: false,
                z: Some(10.0),
            },
            ChannelKind::Volume => Self {
                p: 1.0,
                arsinh: true,
                z: Some(10.0),
            },
        }
    }

    pub fn defaults() -> [Self; 3] {
        ChannelKind::ALL.map(Self::default_for)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(Error::Config(format!("power index p = {} must be >= 1", self.p)));
        }
        if let Some(z) = self.z {
            if !(z > 0.0) {
                return Err(Error::Config(format!("winsorization level z = {z} must be > 0")));
            }
        }
        Ok(())
    }
}

/// A normalized, winsorized, mirror-expanded channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSeries {
    pub channel: ChannelKind,
    pub values: Vec<f64>,
}

impl PaddedSeries {
    pub fn new(channel: ChannelKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != PADDED_LEN {
            return Err(Error::Shape(format!(
                "padded series has {} values, expected {PADDED_LEN}",
                values.len()
            )));
        }
        Ok(Self { channel, values })
    }

    pub fn zeros(channel: ChannelKind) -> Self {
        Self {
            channel,
            values: vec![0.0; PADDED_LEN],
        }
    }

    /// The 390 session values, dropping the mirror padding.
    pub fn trimmed(&self) -> Vec<f64> {
        trim_padding(&self.values)
    }
}

/// `ln(S_i / S_{i-1})`, with the first return fixed at 0 so the output
/// keeps the input length.
pub fn compute_log_returns(prices: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = prices.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
        return Err(Error::Data(format!("non-positive price {p}")));
    }
    let mut out = Vec::with_capacity(prices.len());
    if !prices.is_empty() {
        out.push(0.0);
    }
    out.extend(prices.windows(2).map(|w| (w[1] / w[0]).ln()));
    Ok(out)
}

/// Price path from returns: `S_i = initial * exp(r_1 + ... + r_i)`.
pub fn prices_from_returns(returns: &[f64], initial: f64) -> Vec<f64> {
    let mut acc = 0.0;
    returns
        .iter()
        .map(|r| {
            acc += r;
            initial * acc.exp()
        })
        .collect()
}

pub fn arsinh_transform(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.asinh()).collect()
}

pub fn signed_power(v: f64, q: f64) -> f64 {
    v.signum() * v.abs().powf(q)
}

/// Reflects the series at both ends (without repeating the edge sample) up
/// to `target` samples; padding is split as evenly as possible, the extra
/// sample going right.
pub fn mirror_expand_to(series: &[f64], target: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if target < n {
        return Err(Error::Shape(format!("cannot expand {n} samples to {target}")));
    }
    let left = (target - n) / 2;
    let right = target - n - left;
    if left >= n || right >= n {
        return Err(Error::Shape(format!(
            "padding ({left}, {right}) too long for {n} samples"
        )));
    }
    let mut out = Vec::with_capacity(target);
    out.extend((1..=left).rev().map(|i| series[i]));
    out.extend_from_slice(series);
    out.extend((0..right).map(|i| series[n - 2 - i]));
    Ok(out)
}

/// Expands a 390-minute day to 512 samples with (61, 61) mirror padding.
pub fn mirror_expand(series: &[f64]) -> Result<Vec<f64>> {
    if series.len() != MINUTES_PER_DAY {
        return Err(Error::Shape(format!(
            "expected {MINUTES_PER_DAY} samples, got {}",
            series.len()
        )));
    }
    mirror_expand_to(series, PADDED_LEN)
}

/// Inverse of [`mirror_expand`].
pub fn trim_padding(padded: &[f64]) -> Vec<f64> {
    padded[PAD_LEFT..PAD_LEFT + MINUTES_PER_DAY].to_vec()
}

/// `signed_power(x - mu, 1/p) / sigma`.
pub fn normalize(series: &[f64], stats: &ChannelStats) -> Vec<f64> {
    let q = 1.0 / stats.p;
    series
        .iter()
        .map(|&x| signed_power(x - stats.mu, q) / stats.sigma)
        .collect()
}

/// Exact inverse of [`normalize`], followed by `sinh` for arsinh channels.
pub fn inverse_normalize(series: &[f64], stats: &ChannelStats) -> Vec<f64> {
    series
        .iter()
        .map(|&y| {
            let x = stats.mu + signed_power(y * stats.sigma, stats.p);
            if stats.arsinh {
                x.sinh()
            } else {
                x
            }
        })
        .collect()
}

pub fn winsorize(series: &[f64], z: f64) -> Vec<f64> {
    series.iter().map(|v| v.clamp(-z, z)).collect()
}

/// Channel values ready for normalization: log returns of the mid price,
/// raw spreads, arsinh of volumes (when the channel setting asks for it).
pub fn channel_input(
    kind: ChannelKind,
    series: &crate::ingest::DaySeries,
    settings: &ChannelSettings,
) -> Result<Vec<f64>> {
    let raw = match kind {
        ChannelKind::LogReturn => compute_log_returns(&series.mid)?,
        ChannelKind::Spread => series.spread.clone(),
        ChannelKind::Volume => series.volume.clone(),
    };
    Ok(if settings.arsinh {
        arsinh_transform(&raw)
    } else {
        raw
    })
}

/// Forward chain from a channel input (see [`channel_input`]) to a padded
/// series. Returns the series and the number of clamped samples.
pub fn forward_channel(input: &[f64], stats: &ChannelStats) -> Result<(PaddedSeries, usize)> {
    let normalized = normalize(input, stats);
    let (values, clamped) = match stats.z {
        Some(z) => {
            let clamped = normalized.iter().filter(|v| v.abs() > z).count();
            (winsorize(&normalized, z), clamped)
        }
        None => (normalized, 0),
    };
    Ok((PaddedSeries::new(stats.kind, mirror_expand(&values)?)?, clamped))
}

/// Inverse chain from a padded series back to raw channel units: returns,
/// spreads or volumes.
pub fn inverse_channel(series: &PaddedSeries, stats: &ChannelStats) -> Vec<f64> {
    inverse_normalize(&series.trimmed(), stats)
}
