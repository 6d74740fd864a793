//! Stylized-fact statistics and the real-vs-synthetic comparison report.

mod output;
mod report;
mod stats;

pub use output::{write_report_tables, write_svg_charts};
pub use report::{
    build_report, compare_correlation, CorrelationCheck, ReportThresholds, RowVerdict,
    SetMetrics, StylizedFactsReport, Verdict,
};
pub use stats::{
    acf, acf_single, cross_correlation_matrix, empirical_pdf, excess_kurtosis, intraday_profile,
    pearson, u_ratio, AcfTable, CrossCorrelation, PdfTable, ProfileTable, DEFAULT_BINS,
    DEFAULT_MAX_LAG, MIN_RELIABLE_COUNT,
};

use serde::{Deserialize, Serialize};

use crate::ingest::{derive_series, TradingDay};
use crate::preprocess::compute_log_returns;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricChannel {
    Returns,
    Volatility,
    Spread,
    Volume,
}

impl MetricChannel {
    pub const ALL: [MetricChannel; 4] = [Self::Returns, Self::Volatility, Self::Spread, Self::Volume];

    pub fn name(self) -> &'static str {
        match self {
            Self::Returns => "returns",
            Self::Volatility => "volatility",
            Self::Spread => "spread",
            Self::Volume => "volume",
        }
    }

    /// Channels whose values are non-negative (binned over `[0, 10σ]`).
    pub fn is_positive(self) -> bool {
        self != Self::Returns
    }
}

/// Per-day series of one data set. Channels may be missing; volatility is
/// always `|returns|`.
#[derive(Debug, Clone, PartialEq)]
pub struct DaySetSeries {
    pub id: String,
    returns: Option<Vec<Vec<f64>>>,
    volatility: Option<Vec<Vec<f64>>>,
    spreads: Option<Vec<Vec<f64>>>,
    volumes: Option<Vec<Vec<f64>>>,
}

impl DaySetSeries {
    pub fn new(
        id: impl Into<String>,
        returns: Option<Vec<Vec<f64>>>,
        spreads: Option<Vec<Vec<f64>>>,
        volumes: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let present: Vec<&Vec<Vec<f64>>> = [&returns, &spreads, &volumes].into_iter().flatten().collect();
        let first = present
            .first()
            .ok_or_else(|| Error::Data("day set has no channels".into()))?;
        let (n_days, len) = (first.len(), first.first().map_or(0, Vec::len));
        if n_days == 0 || len == 0 {
            return Err(Error::Data("day set is empty".into()));
        }
        for ch in &present {
            if ch.len() != n_days || ch.iter().any(|d| d.len() != len) {
                return Err(Error::Shape("all channels and days must have equal lengths".into()));
            }
            if ch.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("day set values".into()));
            }
        }
        let volatility = returns
            .as_ref()
            .map(|r| r.iter().map(|d| d.iter().map(|v| v.abs()).collect()).collect());
        Ok(Self {
            id: id.into(),
            returns,
            volatility,
            spreads,
            volumes,
        })
    }

    /// Log mid-price returns (first minute 0), spreads and volumes.
    pub fn from_trading_days(id: impl Into<String>, days: &[TradingDay]) -> Result<Self> {
        let mut returns = Vec::with_capacity(days.len());
        let mut spreads = Vec::with_capacity(days.len());
        let mut volumes = Vec::with_capacity(days.len());
        for day in days {
            let s = derive_series(day);
            returns.push(compute_log_returns(&s.mid)?);
            spreads.push(s.spread);
            volumes.push(s.volume);
        }
        Self::new(id, Some(returns), Some(spreads), Some(volumes))
    }

    pub fn channel(&self, ch: MetricChannel) -> Option<&[Vec<f64>]> {
        match ch {
            MetricChannel::Returns => self.returns.as_deref(),
            MetricChannel::Volatility => self.volatility.as_deref(),
            MetricChannel::Spread => self.spreads.as_deref(),
            MetricChannel::Volume => self.volumes.as_deref(),
        }
    }

    pub fn n_days(&self) -> usize {
        MetricChannel::ALL
            .iter()
            .find_map(|&c| self.channel(c))
            .map_or(0, <[_]>::len)
    }

    pub fn day_len(&self) -> usize {
        MetricChannel::ALL
            .iter()
            .find_map(|&c| self.channel(c))
            .and_then(|d| d.first())
            .map_or(0, Vec::len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volatility_is_abs_returns() {
        let set = DaySetSeries::new("x", Some(vec![vec![-1.0, 2.0]]), None, Some(vec![vec![3.0, 4.0]])).unwrap();
        assert_eq!(set.channel(MetricChannel::Volatility).unwrap(), &[vec![1.0, 2.0]]);
        assert!(set.channel(MetricChannel::Spread).is_none());
        assert_eq!((set.n_days(), set.day_len()), (1, 2));
    }

    #[test]
    fn rejects_ragged_sets() {
        assert!(DaySetSeries::new("x", None, None, None).is_err());
        assert!(DaySetSeries::new("x", Some(vec![vec![1.0]]), Some(vec![vec![1.0, 2.0]]), None).is_err());
        assert!(DaySetSeries::new("x", Some(vec![vec![f64::NAN]]), None, None).is_err());
        assert!(DaySetSeries::new("x", Some(vec![]), None, None).is_err());
    }
}
