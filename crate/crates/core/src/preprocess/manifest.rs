use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{signed_power, ChannelKind, ChannelSettings};
use crate::digest::sha256_hex;
use crate::wavelet::N_BANDS;
use crate::{Error, Result, MINUTES_PER_DAY, PADDED_LEN};

pub const MANIFEST_FORMAT: &str = "wavediff-manifest/1";

/// Which spread the normalization divides by.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Standard deviation of the power-transformed centered values, so the
    /// output has unit variance.
    #[default]
    Powered,
    /// Standard deviation of the input values before the power transform.
    Literal,
}

/// Fitted constants of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub kind: ChannelKind,
    pub p: f64,
    pub arsinh: bool,
    pub mu: f64,
    pub sigma: f64,
    pub z: Option<f64>,
}

/// Normalization constants for all three channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationFit {
    pub channels: [ChannelStats; 3],
    pub sigma_mode: SigmaMode,
}

fn fit_channel<'a>(
    kind: ChannelKind,
    days: impl Iterator<Item = &'a [f64]> + Clone,
    settings: &ChannelSettings,
    mode: SigmaMode,
) -> Result<ChannelStats> {
    settings.validate()?;
    let (mut n, mut sum) = (0usize, 0.0);
    for d in days.clone() {
        n += d.len();
        sum += d.iter().sum::<f64>();
    }
    if n == 0 {
        return Err(Error::Data(format!("no {} values to fit", kind.name())));
    }
    let mu = sum / n as f64;
    let q = 1.0 / settings.p;
    let transformed = |x: f64| match mode {
        SigmaMode::Powered => signed_power(x - mu, q),
        SigmaMode::Literal => x - mu,
    };
    let mean_t = days
        .clone()
        .flat_map(|d| d.iter())
        .map(|&x| transformed(x))
        .sum::<f64>()
        / n as f64;
    let var = days
        .flat_map(|d| d.iter())
        .map(|&x| (transformed(x) - mean_t).powi(2))
        .sum::<f64>()
        / n as f64;
    let sigma = var.sqrt();
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Data(format!(
            "{} channel has zero or non-finite spread (sigma = {sigma})",
            kind.name()
        )));
    }
    Ok(ChannelStats {
        kind,
        p: settings.p,
        arsinh: settings.arsinh,
        mu,
        sigma,
        z: settings.z,
    })
}

/// Pooled mean and standard deviation per channel over every minute of
/// every day. `days[i][c]` is day `i`'s input for channel `c`, already
/// through log returns or arsinh (see [`super::channel_input`]).
pub fn fit_normalization(
    days: &[[Vec<f64>; 3]],
    settings: &[ChannelSettings; 3],
    mode: SigmaMode,
) -> Result<NormalizationFit> {
    if days.is_empty() {
        return Err(Error::Data("cannot fit normalization on an empty dataset".into()));
    }
    let mut channels = Vec::with_capacity(3);
    for kind in ChannelKind::ALL {
        let c = kind.index();
        channels.push(fit_channel(
            kind,
            days.iter().map(|d| d[c].as_slice()),
            &settings[c],
            mode,
        )?);
    }
    Ok(NormalizationFit {
        channels: channels.try_into().expect("three channels"),
        sigma_mode: mode,
    })
}

/// Every constant needed to encode days into images and decode generated
/// images back into raw series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationManifest {
    pub format: String,
    pub sigma_mode: SigmaMode,
    pub channels: [ChannelStats; 3],
    /// Per channel, one luminance scale per wavelet band.
    pub band_scales: [Vec<f64>; 3],
    /// Per channel scale for the flat (no wavelet) codec.
    pub flat_scales: [f64; 3],
    /// Multiple of the pooled standard deviation used for the scales.
    pub scale_multiplier: f64,
    pub series_length_raw: usize,
    pub series_length_padded: usize,
}

impl NormalizationManifest {
    pub fn new(
        fit: NormalizationFit,
        band_scales: [Vec<f64>; 3],
        flat_scales: [f64; 3],
        scale_multiplier: f64,
    ) -> Result<Self> {
        let m = Self {
            format: MANIFEST_FORMAT.to_string(),
            sigma_mode: fit.sigma_mode,
            channels: fit.channels,
            band_scales,
            flat_scales,
            scale_multiplier,
            series_length_raw: MINUTES_PER_DAY,
            series_length_padded: PADDED_LEN,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!(
                "unsupported manifest format {:?}",
                self.format
            )));
        }
        if self.series_length_raw != MINUTES_PER_DAY || self.series_length_padded != PADDED_LEN {
            return Err(Error::Format("unexpected series lengths in manifest".into()));
        }
        for (i, kind) in ChannelKind::ALL.iter().enumerate() {
            let c = &self.channels[i];
            if c.kind != *kind {
                return Err(Error::Format(format!("channel {i} is {:?}, expected {kind:?}", c.kind)));
            }
            if !(c.sigma > 0.0) || !c.mu.is_finite() {
                return Err(Error::Format(format!("invalid stats for {}", kind.name())));
            }
            if self.band_scales[i].len() != N_BANDS
                || self.band_scales[i].iter().any(|s| !(*s > 0.0))
                || !(self.flat_scales[i] > 0.0)
            {
                return Err(Error::Format(format!("invalid scales for {}", kind.name())));
            }
        }
        Ok(())
    }

    pub fn stats(&self, kind: ChannelKind) -> &ChannelStats {
        &self.channels[kind.index()]
    }

    /// Content digest; images and checkpoints record it to guard decoding.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }

    pub fn verify_digest(&self, expected: &str) -> Result<()> {
        let found = self.digest();
        if found != expected {
            return Err(Error::DigestMismatch {
                expected: expected.to_string(),
                found,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
