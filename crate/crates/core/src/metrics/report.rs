use serde::{Deserialize, Serialize};

use super::stats::{
    acf, cross_correlation_matrix, empirical_pdf, excess_kurtosis, intraday_profile, AcfTable,
    CrossCorrelation, PdfTable, ProfileTable, MIN_RELIABLE_COUNT,
};
use super::{DaySetSeries, MetricChannel};
use crate::{Error, Result};

/// Operational pass/fail thresholds for the report rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportThresholds {
    pub pdf_bins: usize,
    pub acf_max_lag: usize,
    /// ACF must stay positive at lags `1..=slow_decay_lags`.
    pub slow_decay_lags: usize,
    pub u_ratio: f64,
    pub correlation_tolerance: f64,
    /// Tail comparison covers `tail_from_sigma <= |z| < tail_to_sigma` in
    /// one-σ bands.
    pub tail_from_sigma: f64,
    pub tail_to_sigma: f64,
    /// Largest allowed |ln(synthetic mass / real mass)| per tail band.
    pub tail_log_band: f64,
}

impl Default for ReportThresholds {
    fn default() -> Self {
        Self {
            pdf_bins: super::DEFAULT_BINS,
            acf_max_lag: super::DEFAULT_MAX_LAG,
            slow_decay_lags: 10,
            u_ratio: 1.1,
            correlation_tolerance: 0.15,
            tail_from_sigma: 3.0,
            tail_to_sigma: 6.0,
            tail_log_band: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotEvaluated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowVerdict {
    pub row: String,
    pub verdict: Verdict,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCheck {
    pub pair: [MetricChannel; 2],
    pub real: f64,
    pub synthetic: f64,
    pub sign_match: bool,
    pub within_tolerance: bool,
}

pub fn compare_correlation(pair: [MetricChannel; 2], real: f64, synthetic: f64, tolerance: f64) -> CorrelationCheck {
    CorrelationCheck {
        pair,
        real,
        synthetic,
        sign_match: (real >= 0.0) == (synthetic >= 0.0),
        within_tolerance: (real - synthetic).abs() <= tolerance,
    }
}

/// Every statistic computed for one data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub id: String,
    pub days: usize,
    pub pdf: Vec<PdfTable>,
    pub acf: Vec<AcfTable>,
    pub intraday: Vec<ProfileTable>,
    pub cross_correlation: Option<CrossCorrelation>,
    pub returns_excess_kurtosis: Option<f64>,
}

impl SetMetrics {
    pub fn compute(set: &DaySetSeries, th: &ReportThresholds) -> Result<Self> {
        let mut pdf = Vec::new();
        let mut acfs = Vec::new();
        let mut intraday = Vec::new();
        for ch in MetricChannel::ALL {
            if set.channel(ch).is_none() {
                continue;
            }
            pdf.push(empirical_pdf(set, ch, th.pdf_bins)?);
            acfs.push(acf(set, ch, th.acf_max_lag)?);
            intraday.push(intraday_profile(set, ch)?);
        }
        let complete = MetricChannel::ALL.iter().all(|&c| set.channel(c).is_some());
        let cross_correlation = if complete {
            Some(cross_correlation_matrix(set)?)
        } else {
            None
        };
        let returns_excess_kurtosis = set.channel(MetricChannel::Returns).and_then(|d| {
            let pooled: Vec<f64> = d.iter().flatten().copied().collect();
            excess_kurtosis(&pooled)
        });
        Ok(Self {
            id: set.id.clone(),
            days: set.n_days(),
            pdf,
            acf: acfs,
            intraday,
            cross_correlation,
            returns_excess_kurtosis,
        })
    }

    pub fn pdf(&self, ch: MetricChannel) -> Option<&PdfTable> {
        self.pdf.iter().find(|t| t.channel == ch)
    }

    pub fn acf(&self, ch: MetricChannel) -> Option<&AcfTable> {
        self.acf.iter().find(|t| t.channel == ch)
    }

    pub fn intraday(&self, ch: MetricChannel) -> Option<&ProfileTable> {
        self.intraday.iter().find(|t| t.channel == ch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StylizedFactsReport {
    pub thresholds: ReportThresholds,
    pub real: SetMetrics,
    pub synthetic: SetMetrics,
    pub rows: Vec<RowVerdict>,
    pub correlations: Vec<CorrelationCheck>,
}

impl StylizedFactsReport {
    pub fn row(&self, name: &str) -> Option<&RowVerdict> {
        self.rows.iter().find(|r| r.row == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

const SLOW_DECAY_CHANNELS: [MetricChannel; 3] =
    [MetricChannel::Volatility, MetricChannel::Spread, MetricChannel::Volume];

const KEY_PAIRS: [[MetricChannel; 2]; 3] = [
    [MetricChannel::Volatility, MetricChannel::Volume],
    [MetricChannel::Spread, MetricChannel::Volume],
    [MetricChannel::Volatility, MetricChannel::Spread],
];

fn row(name: &str, verdict: Verdict, detail: String) -> RowVerdict {
    RowVerdict {
        row: name.into(),
        verdict,
        detail,
    }
}

fn fat_tail_row(real: &SetMetrics, syn: &SetMetrics, th: &ReportThresholds) -> RowVerdict {
    let (Some(r), Some(s)) = (real.pdf(MetricChannel::Returns), syn.pdf(MetricChannel::Returns)) else {
        return row("fat_tail", Verdict::NotEvaluated, "returns channel missing".into());
    };
    let mut details = Vec::new();
    let mut ok = true;
    let mut compared = 0;
    let mut lo = th.tail_from_sigma;
    while lo < th.tail_to_sigma {
        let hi = (lo + 1.0).min(th.tail_to_sigma);
        let (rm, rc) = r.tail_mass(lo, hi);
        let (sm, _) = s.tail_mass(lo, hi);
        if rc >= MIN_RELIABLE_COUNT {
            compared += 1;
            let lr = if sm > 0.0 { (sm / rm).ln() } else { f64::NEG_INFINITY };
            let pass = lr.abs() <= th.tail_log_band;
            ok &= pass;
            details.push(format!("|z| in [{lo},{hi}): real {rm:.3e} synthetic {sm:.3e} ln ratio {lr:.2}"));
        }
        lo = hi;
    }
    if compared == 0 {
        return row("fat_tail", Verdict::NotEvaluated, "real tail bands have too few counts".into());
    }
    row("fat_tail", if ok { Verdict::Pass } else { Verdict::Fail }, details.join("; "))
}

fn slow_decay_row(syn: &SetMetrics, th: &ReportThresholds) -> RowVerdict {
    let mut details = Vec::new();
    let mut ok = true;
    for ch in SLOW_DECAY_CHANNELS {
        let Some(t) = syn.acf(ch) else {
            return row("slow_decay", Verdict::NotEvaluated, format!("{} channel missing", ch.name()));
        };
        let lags = th.slow_decay_lags.min(t.values.len());
        let first_bad = t.values[..lags].iter().position(|&v| v <= 0.0);
        if let Some(k) = first_bad {
            ok = false;
            details.push(format!("{} ACF not positive at lag {}", ch.name(), k + 1));
        } else {
            details.push(format!("{} ACF positive through lag {lags}", ch.name()));
        }
    }
    row("slow_decay", if ok { Verdict::Pass } else { Verdict::Fail }, details.join("; "))
}

fn seasonality_row(real: &SetMetrics, syn: &SetMetrics, th: &ReportThresholds) -> RowVerdict {
    let mut details = Vec::new();
    let mut ok = true;
    let mut required = 0;
    for ch in SLOW_DECAY_CHANNELS {
        let Some(ru) = real.intraday(ch).and_then(|p| p.u_ratio) else {
            continue;
        };
        if ru <= th.u_ratio {
            continue;
        }
        required += 1;
        let Some(sp) = syn.intraday(ch) else {
            return row("seasonality", Verdict::NotEvaluated, format!("{} channel missing", ch.name()));
        };
        let su = sp.u_ratio.unwrap_or(f64::NAN);
        let pass = su > th.u_ratio;
        ok &= pass;
        details.push(format!("{} U-ratio real {ru:.3} synthetic {su:.3}", ch.name()));
    }
    if required == 0 {
        return row("seasonality", Verdict::NotEvaluated, "real data shows no intraday U-shape".into());
    }
    row("seasonality", if ok { Verdict::Pass } else { Verdict::Fail }, details.join("; "))
}

fn correlation_checks(real: &SetMetrics, syn: &SetMetrics, th: &ReportThresholds) -> Vec<CorrelationCheck> {
    match (&real.cross_correlation, &syn.cross_correlation) {
        (Some(r), Some(s)) => KEY_PAIRS
            .iter()
            .map(|&[a, b]| compare_correlation([a, b], r.get(a, b), s.get(a, b), th.correlation_tolerance))
            .collect(),
        _ => Vec::new(),
    }
}

fn cross_row(checks: &[CorrelationCheck]) -> RowVerdict {
    if checks.is_empty() {
        return row("cross_correlation", Verdict::NotEvaluated, "a channel is missing".into());
    }
    let ok = checks.iter().all(|c| c.sign_match && c.within_tolerance);
    let detail = checks
        .iter()
        .map(|c| {
            format!(
                "{}-{}: real {:.3} synthetic {:.3} (sign {}, magnitude {})",
                c.pair[0].name(),
                c.pair[1].name(),
                c.real,
                c.synthetic,
                if c.sign_match { "ok" } else { "differs" },
                if c.within_tolerance { "ok" } else { "off" }
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    row("cross_correlation", if ok { Verdict::Pass } else { Verdict::Fail }, detail)
}

/// Computes every statistic for both sets and the four comparison rows.
pub fn build_report(real: &DaySetSeries, synthetic: &DaySetSeries, thresholds: &ReportThresholds) -> Result<StylizedFactsReport> {
    if real.n_days() == 0 || synthetic.n_days() == 0 {
        return Err(Error::Data("report needs non-empty day sets".into()));
    }
    let r = SetMetrics::compute(real, thresholds)?;
    let s = SetMetrics::compute(synthetic, thresholds)?;
    let correlations = correlation_checks(&r, &s, thresholds);
    let rows = vec![
        fat_tail_row(&r, &s, thresholds),
        slow_decay_row(&s, thresholds),
        seasonality_row(&r, &s, thresholds),
        cross_row(&correlations),
    ];
    Ok(StylizedFactsReport {
        thresholds: thresholds.clone(),
        real: r,
        synthetic: s,
        rows,
        correlations,
    })
}
