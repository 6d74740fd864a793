//! Minute-bar market data: parsing, validation and a reference simulator.

mod bars;
mod simulate;

pub(crate) use bars::parse_bars_unchecked;
pub use bars::{
    parse_minute_bars, read_rejections, write_minute_bars, write_rejections, ColumnMapping,
    ParseOutput,
};
pub use simulate::{generate_reference_dataset, ReferenceModelConfig};

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, MINUTES_PER_DAY};

/// Open, high and low of one side of the book within a minute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ohl {
    pub open: f64,
    pub high: f64,
    pub low: f64,
}

/// One minute of quotes and traded volume. The close quote is the minute's
/// snapshot; the optional open/high/low values are carried but unused.
#[derive(Debug, Clone, PartialEq)]
pub struct MinuteBar {
    pub timestamp: NaiveDateTime,
    pub bid_close: f64,
    pub ask_close: f64,
    pub volume: f64,
    pub bid_ohl: Option<Ohl>,
    pub ask_ohl: Option<Ohl>,
}

impl MinuteBar {
    pub fn new(timestamp: NaiveDateTime, bid_close: f64, ask_close: f64, volume: f64) -> Self {
        Self {
            timestamp,
            bid_close,
            ask_close,
            volume,
            bid_ohl: None,
            ask_ohl: None,
        }
    }

    /// Checks the quote and volume invariants, returning a reason on failure.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let prices = [self.bid_close, self.ask_close]
            .into_iter()
            .chain(self.bid_ohl.iter().flat_map(|o| [o.open, o.high, o.low]))
            .chain(self.ask_ohl.iter().flat_map(|o| [o.open, o.high, o.low]));
        for p in prices {
            if !p.is_finite() || p <= 0.0 {
                return Err(format!("price {p} is not finite and positive"));
            }
        }
        if !self.volume.is_finite() || self.volume < 0.0 {
            return Err(format!("volume {} is negative or non-finite", self.volume));
        }
        if self.ask_close < self.bid_close {
            return Err(format!(
                "ask {} below bid {}",
                self.ask_close, self.bid_close
            ));
        }
        Ok(())
    }
}

/// First minute of the regular session.
pub fn session_open() -> NaiveTime {
    NaiveTime::from_hms_opt(9, 30, 0).expect("valid time")
}

/// Minute index within the session, or `None` outside 09:30..=15:59.
pub fn session_minute(ts: &NaiveDateTime) -> Option<usize> {
    let t = ts.time();
    let since_open = t.signed_duration_since(session_open()).num_minutes();
    if (0..MINUTES_PER_DAY as i64).contains(&since_open) {
        Some(since_open as usize)
    } else {
        None
    }
}

/// Timestamp of session minute `minute` on `date`.
pub fn minute_timestamp(date: NaiveDate, minute: usize) -> NaiveDateTime {
    date.and_time(session_open()) + Duration::minutes(minute as i64)
}

/// Bars of one calendar date, not yet checked for completeness.
#[derive(Debug, Clone, PartialEq)]
pub struct DayCandidate {
    pub date: NaiveDate,
    pub bars: Vec<MinuteBar>,
}

/// A complete trading day: exactly 390 consecutive valid minute bars.
#[derive(Debug, Clone, PartialEq)]
pub struct TradingDay {
    date: NaiveDate,
    bars: Vec<MinuteBar>,
}

impl TradingDay {
    pub fn new(date: NaiveDate, bars: Vec<MinuteBar>) -> Result<Self> {
        check_complete(date, &bars, false).map_err(Error::Data)?;
        Ok(Self { date, bars })
    }

    pub fn date(&self) -> NaiveDate {
        self.date
    }

    pub fn bars(&self) -> &[MinuteBar] {
        &self.bars
    }
}

fn check_complete(
    date: NaiveDate,
    bars: &[MinuteBar],
    reject_zero_volume: bool,
) -> std::result::Result<(), String> {
    if bars.len() != MINUTES_PER_DAY {
        return Err(format!(
            "{} of {MINUTES_PER_DAY} minutes present",
            bars.len()
        ));
    }
    for (i, bar) in bars.iter().enumerate() {
        if bar.timestamp != minute_timestamp(date, i) {
            return Err(format!(
                "expected bar at {} but found {}",
                minute_timestamp(date, i),
                bar.timestamp
            ));
        }
        bar.validate()
            .map_err(|reason| format!("{}: {reason}", bar.timestamp))?;
        if reject_zero_volume && bar.volume == 0.0 {
            return Err(format!("{}: zero volume", bar.timestamp));
        }
    }
    Ok(())
}

/// A day dropped by [`filter_complete_days`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub date: NaiveDate,
    pub reason: String,
}

/// Which days count as complete.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterPolicy {
    /// Also reject days containing minutes with quotes but zero volume.
    pub reject_zero_volume: bool,
}

/// Keeps only days with all 390 minutes present and valid.
pub fn filter_complete_days(
    candidates: Vec<DayCandidate>,
    policy: FilterPolicy,
) -> (Vec<TradingDay>, Vec<Rejection>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for c in candidates {
        match check_complete(c.date, &c.bars, policy.reject_zero_volume) {
            Ok(()) => kept.push(TradingDay {
                date: c.date,
                bars: c.bars,
            }),
            Err(reason) => {
                log::debug!("rejecting {}: {reason}", c.date);
                rejected.push(Rejection {
                    date: c.date,
                    reason,
                })
            }
        }
    }
    (kept, rejected)
}

/// Mid price, spread and volume of one day.
#[derive(Debug, Clone, PartialEq)]
pub struct DaySeries {
    pub mid: Vec<f64>,
    pub spread: Vec<f64>,
    pub volume: Vec<f64>,
}

pub fn derive_series(day: &TradingDay) -> DaySeries {
    let bars = day.bars();
    DaySeries {
        mid: bars.iter().map(|b| (b.bid_close + b.ask_close) / 2.0).collect(),
        spread: bars.iter().map(|b| b.ask_close - b.bid_close).collect(),
        volume: bars.iter().map(|b| b.volume).collect(),
    }
}
