use serde::{Deserialize, Serialize};

use super::{DaySetSeries, MetricChannel};
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 200;
pub const DEFAULT_MAX_LAG: usize = 100;
/// Bins with fewer counts are flagged unreliable.
pub const MIN_RELIABLE_COUNT: u64 = 5;

/// Histogram density of pooled values in σ units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdfTable {
    pub channel: MetricChannel,
    /// Subtracted before scaling (pooled mean for returns, 0 otherwise).
    pub shift: f64,
    /// Pooled standard deviation.
    pub scale: f64,
    pub centers: Vec<f64>,
    pub density: Vec<f64>,
    pub counts: Vec<u64>,
    pub unreliable: Vec<bool>,
    pub n_total: usize,
    pub n_out_of_range: usize,
}

impl PdfTable {
    pub fn bin_width(&self) -> f64 {
        if self.centers.len() < 2 {
            return 1.0;
        }
        self.centers[1] - self.centers[0]
    }

    /// Natural-log density; `None` for empty bins.
    pub fn log_density(&self) -> Vec<Option<f64>> {
        self.density
            .iter()
            .map(|&d| (d > 0.0).then(|| d.ln()))
            .collect()
    }

    /// Log of the linearly interpolated density at `z` (σ units).
    pub fn log_density_at(&self, z: f64) -> Option<f64> {
        let w = self.bin_width();
        let pos = (z - self.centers[0]) / w;
        if pos < 0.0 || pos > (self.centers.len() - 1) as f64 {
            return None;
        }
        let i = (pos.floor() as usize).min(self.centers.len().saturating_sub(2));
        let f = pos - i as f64;
        let d = self.density[i] * (1.0 - f) + self.density.get(i + 1).copied().unwrap_or(0.0) * f;
        (d > 0.0).then(|| d.ln())
    }

    /// Probability mass with `lo <= |z| < hi` and its count.
    pub fn tail_mass(&self, lo: f64, hi: f64) -> (f64, u64) {
        let w = self.bin_width();
        self.centers
            .iter()
            .zip(&self.density)
            .zip(&self.counts)
            .filter(|((c, _), _)| c.abs() >= lo && c.abs() < hi)
            .fold((0.0, 0), |(m, n), ((_, d), k)| (m + d * w, n + k))
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

/// Density of the pooled channel over `[-10σ, 10σ]` (returns) or `[0, 10σ]`
/// (non-negative channels), normalized over in-range values.
pub fn empirical_pdf(set: &DaySetSeries, channel: MetricChannel, bins: usize) -> Result<PdfTable> {
    let days = set
        .channel(channel)
        .ok_or_else(|| Error::Data(format!("channel {} missing", channel.name())))?;
    let values: Vec<f64> = days.iter().flatten().copied().collect();
    pdf_of(&values, channel, bins)
}

pub(crate) fn pdf_of(values: &[f64], channel: MetricChannel, bins: usize) -> Result<PdfTable> {
    if values.is_empty() || bins == 0 {
        return Err(Error::Data("empirical pdf of an empty sample".into()));
    }
    let (mean, std, _) = mean_std(values.iter().copied());
    if std <= 0.0 {
        return Err(Error::Data(format!("channel {} has zero variance", channel.name())));
    }
    let shift = if channel.is_positive() { 0.0 } else { mean };
    let (lo, hi) = if channel.is_positive() { (0.0, 10.0) } else { (-10.0, 10.0) };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    let mut out = 0;
    for v in values {
        let z = (v - shift) / std;
        let b = ((z - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            counts[b as usize] += 1;
        } else if z == hi {
            counts[bins - 1] += 1;
        } else {
            out += 1;
        }
    }
    let inside = (values.len() - out) as f64;
    let density = counts
        .iter()
        .map(|&c| if inside > 0.0 { c as f64 / (inside * width) } else { 0.0 })
        .collect();
    Ok(PdfTable {
        channel,
        shift,
        scale: std,
        centers: (0..bins).map(|i| lo + (i as f64 + 0.5) * width).collect(),
        density,
        unreliable: counts.iter().map(|&c| c < MIN_RELIABLE_COUNT).collect(),
        counts,
        n_total: values.len(),
        n_out_of_range: out,
    })
}

/// Sample excess kurtosis of pooled values.
pub fn excess_kurtosis(values: &[f64]) -> Option<f64> {
    let (mean, std, n) = mean_std(values.iter().copied());
    if n < 4 || std <= 0.0 {
        return None;
    }
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n as f64;
    Some(m4 / std.powi(4) - 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfTable {
    pub channel: MetricChannel,
    /// `values[k - 1]` is the autocorrelation at lag `k`.
    pub values: Vec<f64>,
    pub days_used: usize,
    pub days_skipped: usize,
}

/// Biased autocorrelation of one series for lags `1..=max_lag`; `None` for
/// a constant series.
pub fn acf_single(x: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let d: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let g0 = d.iter().map(|v| v * v).sum::<f64>();
    if g0 <= 0.0 {
        return None;
    }
    Some(
        (1..=max_lag)
            .map(|k| {
                if k >= n {
                    0.0
                } else {
                    d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / g0
                }
            })
            .collect(),
    )
}

/// Per-day autocorrelations averaged across days; never crosses a day
/// boundary.
pub fn acf(set: &DaySetSeries, channel: MetricChannel, max_lag: usize) -> Result<AcfTable> {
    let days = set
        .channel(channel)
        .ok_or_else(|| Error::Data(format!("channel {} missing", channel.name())))?;
    if days.first().is_none_or(|d| d.len() <= max_lag) {
        return Err(Error::Config(format!(
            "ACF lag {max_lag} needs days longer than {}",
            days.first().map_or(0, Vec::len)
        )));
    }
    let mut sum = vec![0.0; max_lag];
    let (mut used, mut skipped) = (0, 0);
    for day in days {
        match acf_single(day, max_lag) {
            Some(r) => {
                sum.iter_mut().zip(r).for_each(|(s, v)| *s += v);
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{} ACF: skipped {skipped} zero-variance day(s)", channel.name());
    }
    if used == 0 {
        return Err(Error::Data(format!("every {} day has zero variance", channel.name())));
    }
    Ok(AcfTable {
        channel,
        values: sum.into_iter().map(|s| s / used as f64).collect(),
        days_used: used,
        days_skipped: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    pub channel: MetricChannel,
    pub means: Vec<f64>,
    /// `None` when the midday mean is zero.
    pub u_ratio: Option<f64>,
    pub days: usize,
}

/// `(mean of minutes 0-29 + mean of minutes 360-389) / (2 * mean of 180-209)`
/// for a 390-minute profile.
pub fn u_ratio(means: &[f64]) -> Option<f64> {
    if means.len() < 390 {
        return None;
    }
    let avg = |r: std::ops::Range<usize>| means[r.clone()].iter().sum::<f64>() / r.len() as f64;
    let mid = avg(180..210);
    (mid != 0.0).then(|| (avg(0..30) + avg(360..390)) / (2.0 * mid))
}

pub fn intraday_profile(set: &DaySetSeries, channel: MetricChannel) -> Result<ProfileTable> {
    let days = set
        .channel(channel)
        .ok_or_else(|| Error::Data(format!("channel {} missing", channel.name())))?;
    if days.len() < 30 {
        log::warn!("{} intraday profile from only {} days", channel.name(), days.len());
    }
    let len = days[0].len();
    let means: Vec<f64> = (0..len)
        .map(|m| days.iter().map(|d| d[m]).sum::<f64>() / days.len() as f64)
        .collect();
    Ok(ProfileTable {
        channel,
        u_ratio: u_ratio(&means),
        means,
        days: days.len(),
    })
}

/// Pearson correlation (two-pass); `None` if either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 4x4 Pearson matrix over returns, volatility, spread, volume, pooled
/// across all (day, minute) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCorrelation {
    pub channels: [MetricChannel; 4],
    pub matrix: [[f64; 4]; 4],
}

impl CrossCorrelation {
    pub fn get(&self, a: MetricChannel, b: MetricChannel) -> f64 {
        let idx = |c| self.channels.iter().position(|&x| x == c).expect("known channel");
        self.matrix[idx(a)][idx(b)]
    }
}

pub fn cross_correlation_matrix(set: &DaySetSeries) -> Result<CrossCorrelation> {
    let pooled: Vec<Vec<f64>> = MetricChannel::ALL
        .iter()
        .map(|&c| {
            set.channel(c)
                .map(|d| d.iter().flatten().copied().collect())
                .ok_or_else(|| Error::Data(format!("channel {} missing", c.name())))
        })
        .collect::<Result<_>>()?;
    let mut matrix = [[1.0; 4]; 4];
    for i in 0..4 {
        for j in i + 1..4 {
            let r = pearson(&pooled[i], &pooled[j]).ok_or_else(|| {
                Error::Data(format!(
                    "zero-variance channel in {} / {}",
                    MetricChannel::ALL[i].name(),
                    MetricChannel::ALL[j].name()
                ))
            })?;
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    Ok(CrossCorrelation {
        channels: MetricChannel::ALL,
        matrix,
    })
}
