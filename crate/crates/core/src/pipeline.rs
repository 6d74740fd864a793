//! Glue between the stages: fitting a manifest and encoding trading days,
//! and decoding generated images back into a day set.

use std::io::{Read, Write};

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::diffusion::split_indices;
use crate::ingest::{
    derive_series, minute_timestamp, parse_bars_unchecked, ColumnMapping, TradingDay,
};
use crate::metrics::DaySetSeries;
use crate::preprocess::{
    channel_input, fit_normalization, forward_channel, inverse_channel, ChannelKind, ChannelSettings,
    NormalizationManifest, SigmaMode,
};
use crate::wavelet::{
    clamped_coefficients, decode, encode, fit_band_scales, fit_flat_scales, haar_dwt, CodecMode,
    CoefficientImage, RowFill,
};
use crate::{Error, Result, MINUTES_PER_DAY};

/// Settings of the preprocessing and codec stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub channels: [ChannelSettings; 3],
    pub sigma_mode: SigmaMode,
    pub codec: CodecMode,
    pub row_fill: RowFill,
    /// Luminance scale = multiplier x pooled standard deviation.
    pub scale_multiplier: f64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            channels: ChannelSettings::defaults(),
            sigma_mode: SigmaMode::default(),
            codec: CodecMode::Wavelet,
            row_fill: RowFill::default(),
            scale_multiplier: 4.0,
        }
    }
}

/// Per-channel clipping counts of a prepare run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClampStats {
    /// Normalized values beyond the winsorization level.
    pub winsorized: [usize; 3],
    /// Coefficients (or flat values) clipped to the unit pixel range.
    pub pixel_clamped: [usize; 3],
    pub values_per_channel: usize,
    pub coefficients_per_channel: usize,
}

impl ClampStats {
    pub fn winsor_rate(&self, c: usize) -> f64 {
        self.winsorized[c] as f64 / self.values_per_channel.max(1) as f64
    }

    pub fn pixel_rate(&self, c: usize) -> f64 {
        self.pixel_clamped[c] as f64 / self.coefficients_per_channel.max(1) as f64
    }

    pub fn summary(&self) -> String {
        ChannelKind::ALL
            .iter()
            .map(|k| {
                let c = k.index();
                format!(
                    "{}: winsorized {:.4}%, pixel clamp {:.4}%",
                    k.name(),
                    100.0 * self.winsor_rate(c),
                    100.0 * self.pixel_rate(c)
                )
            })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub manifest: NormalizationManifest,
    pub images: Vec<CoefficientImage>,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
    pub clamp: ClampStats,
}

/// Fits normalization and luminance scales on the training split (as
/// chosen by [`split_indices`] with the same fraction and seed used for
/// training) and encodes every day.
pub fn prepare(
    days: &[TradingDay],
    config: &PrepareConfig,
    validation_fraction: f64,
    split_seed: u64,
) -> Result<PreparedDataset> {
    if !(config.scale_multiplier > 0.0) {
        return Err(Error::Config(format!(
            "scale multiplier must be positive, got {}",
            config.scale_multiplier
        )));
    }
    let (train_idx, val_idx) = split_indices(days.len(), validation_fraction, split_seed)?;
    let inputs: Vec<[Vec<f64>; 3]> = days
        .iter()
        .map(|d| {
            let s = derive_series(d);
            let mut out = Vec::with_capacity(3);
            for k in ChannelKind::ALL {
                out.push(channel_input(k, &s, &config.channels[k.index()])?);
            }
            Ok(out.try_into().expect("three channels"))
        })
        .collect::<Result<_>>()?;
    let train_inputs: Vec<[Vec<f64>; 3]> = train_idx.iter().map(|&i| inputs[i].clone()).collect();
    let fit = fit_normalization(&train_inputs, &config.channels, config.sigma_mode)?;

    let mut clamp = ClampStats {
        values_per_channel: inputs.iter().map(|d| d[0].len()).sum(),
        ..Default::default()
    };
    let mut padded = Vec::with_capacity(days.len());
    for d in &inputs {
        let mut channels = Vec::with_capacity(3);
        for (c, stats) in fit.channels.iter().enumerate() {
            let (s, n) = forward_channel(&d[c], stats)?;
            clamp.winsorized[c] += n;
            channels.push(s);
        }
        padded.push(<[_; 3]>::try_from(channels).expect("three channels"));
    }

    let mut band_scales: [Vec<f64>; 3] = Default::default();
    let mut flat_scales = [0.0; 3];
    let mut bands = Vec::with_capacity(days.len());
    for p in &padded {
        bands.push(
            p.iter()
                .map(|s| haar_dwt(&s.values))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    for c in 0..3 {
        let train_bands: Vec<_> = train_idx.iter().map(|&i| bands[i][c].clone()).collect();
        let bf = fit_band_scales(&train_bands, config.scale_multiplier)?;
        band_scales[c] = bf.scales;
        let train_vals: Vec<Vec<f64>> = train_idx.iter().map(|&i| padded[i][c].values.clone()).collect();
        flat_scales[c] = fit_flat_scales(&train_vals, config.scale_multiplier)?;
    }
    let manifest = NormalizationManifest::new(fit, band_scales, flat_scales, config.scale_multiplier)?;

    let mut images = Vec::with_capacity(days.len());
    for (p, b) in padded.iter().zip(&bands) {
        for c in 0..3 {
            clamp.pixel_clamped[c] += match config.codec {
                CodecMode::Wavelet => clamped_coefficients(&b[c], &manifest.band_scales[c]),
                CodecMode::Flat => {
                    let s = manifest.flat_scales[c];
                    p[c].values.iter().filter(|v| v.abs() > s).count()
                }
            };
        }
        images.push(encode(config.codec, p, &manifest, config.row_fill)?);
    }
    clamp.coefficients_per_channel = days.len() * crate::PADDED_LEN;
    Ok(PreparedDataset {
        manifest,
        images,
        train_indices: train_idx,
        validation_indices: val_idx,
        clamp,
    })
}

/// Raw-unit series of decoded images.
#[derive(Debug, Clone)]
pub struct DecodedSet {
    pub returns: Vec<Vec<f64>>,
    pub spreads: Vec<Vec<f64>>,
    pub volumes: Vec<Vec<f64>>,
    /// Negative volumes set to zero.
    pub floored_volumes: usize,
}

impl DecodedSet {
    pub fn into_day_set(self, id: impl Into<String>) -> Result<DaySetSeries> {
        DaySetSeries::new(id, Some(self.returns), Some(self.spreads), Some(self.volumes))
    }
}

/// Decodes images through the codec and the inverse preprocessing chain.
/// Volumes below zero are floored at zero and counted; any non-finite value
/// is an error.
pub fn decode_images(images: &[CoefficientImage], manifest: &NormalizationManifest) -> Result<DecodedSet> {
    let mut out = DecodedSet {
        returns: Vec::with_capacity(images.len()),
        spreads: Vec::with_capacity(images.len()),
        volumes: Vec::with_capacity(images.len()),
        floored_volumes: 0,
    };
    for img in images {
        let series = decode(img, manifest)?;
        let mut raw: Vec<Vec<f64>> = series
            .iter()
            .zip(&manifest.channels)
            .map(|(s, st)| inverse_channel(s, st))
            .collect();
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("decoded series of image {}", out.returns.len())));
        }
        for v in raw[ChannelKind::Volume.index()].iter_mut().filter(|v| **v < 0.0) {
            *v = 0.0;
            out.floored_volumes += 1;
        }
        let mut it = raw.into_iter();
        out.returns.push(it.next().expect("returns"));
        out.spreads.push(it.next().expect("spreads"));
        out.volumes.push(it.next().expect("volumes"));
    }
    Ok(out)
}

/// Mid price of the first synthetic minute; returns are scale free.
pub const SYNTHETIC_START_PRICE: f64 = 100.0;

/// Calendar date of the first synthetic day.
pub fn synthetic_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2100, 1, 1).expect("valid date")
}

/// Writes decoded days as minute bars (`timestamp,bid_close,ask_close,volume`)
/// on consecutive calendar days. The mid price compounds the returns from
/// [`SYNTHETIC_START_PRICE`]; bid and ask sit half a spread either side.
/// Returns the number of minutes with a negative spread.
pub fn write_synthetic_bars<W: Write>(set: &DecodedSet, sink: W) -> Result<usize> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["timestamp", "bid_close", "ask_close", "volume"])?;
    let mut negative = 0;
    for (d, ((r, sp), v)) in set.returns.iter().zip(&set.spreads).zip(&set.volumes).enumerate() {
        let date = synthetic_start_date() + Days::new(d as u64);
        let mut log_mid = SYNTHETIC_START_PRICE.ln();
        for m in 0..r.len() {
            log_mid += r[m];
            let mid = log_mid.exp();
            negative += usize::from(sp[m] < 0.0);
            w.write_record([
                minute_timestamp(date, m).format("%Y-%m-%dT%H:%M:%S").to_string(),
                (mid - sp[m] / 2.0).to_string(),
                (mid + sp[m] / 2.0).to_string(),
                v[m].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(negative)
}

/// Reads minute bars into a day set. Only completeness is enforced, so
/// synthetic days with crossed quotes are kept as generated.
pub fn read_day_set<R: Read>(id: impl Into<String>, source: R) -> Result<DaySetSeries> {
    let parsed = parse_bars_unchecked(source, &ColumnMapping::default())?;
    if let Some(e) = parsed.errors.first() {
        return Err(Error::Data(format!("{} malformed rows, first: {e}", parsed.errors.len())));
    }
    let (mut returns, mut spreads, mut volumes) = (Vec::new(), Vec::new(), Vec::new());
    for c in &parsed.candidates {
        if c.bars.len() != MINUTES_PER_DAY {
            return Err(Error::Data(format!(
                "{} has {} of {MINUTES_PER_DAY} minutes",
                c.date,
                c.bars.len()
            )));
        }
        let mid: Vec<f64> = c.bars.iter().map(|b| (b.bid_close + b.ask_close) / 2.0).collect();
        returns.push(crate::preprocess::compute_log_returns(&mid)?);
        spreads.push(c.bars.iter().map(|b| b.ask_close - b.bid_close).collect());
        volumes.push(c.bars.iter().map(|b| b.volume).collect());
    }
    DaySetSeries::new(id, Some(returns), Some(spreads), Some(volumes))
}
