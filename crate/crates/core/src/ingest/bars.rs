use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{session_minute, DayCandidate, MinuteBar, Ohl, Rejection, TradingDay};
use crate::{Error, Result};

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Names of the CSV columns holding each field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub timestamp: String,
    pub bid_close: String,
    pub ask_close: String,
    pub volume: String,
    pub bid_open: Option<String>,
    pub bid_high: Option<String>,
    pub bid_low: Option<String>,
    pub ask_open: Option<String>,
    pub ask_high: Option<String>,
    pub ask_low: Option<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            bid_close: "bid_close".into(),
            ask_close: "ask_close".into(),
            volume: "volume".into(),
            bid_open: None,
            bid_high: None,
            bid_low: None,
            ask_open: None,
            ask_high: None,
            ask_low: None,
        }
    }
}

struct Columns {
    timestamp: usize,
    bid_close: usize,
    ask_close: usize,
    volume: usize,
    bid_ohl: Option<[usize; 3]>,
    ask_ohl: Option<[usize; 3]>,
}

impl Columns {
    fn resolve(headers: &csv::StringRecord, map: &ColumnMapping) -> Result<Self> {
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Header(format!("missing column {name:?}")))
        };
        let ohl = |o: &Option<String>, h: &Option<String>, l: &Option<String>| -> Result<_> {
            match (o, h, l) {
                (Some(o), Some(h), Some(l)) => Ok(Some([find(o)?, find(h)?, find(l)?])),
                (None, None, None) => Ok(None),
                _ => Err(Error::Header(
                    "open/high/low columns must be mapped together".into(),
                )),
            }
        };
        Ok(Self {
            timestamp: find(&map.timestamp)?,
            bid_close: find(&map.bid_close)?,
            ask_close: find(&map.ask_close)?,
            volume: find(&map.volume)?,
            bid_ohl: ohl(&map.bid_open, &map.bid_high, &map.bid_low)?,
            ask_ohl: ohl(&map.ask_open, &map.ask_high, &map.ask_low)?,
        })
    }
}

/// Result of parsing a minute-bar CSV: per-date candidates plus the
/// record-level errors that were skipped.
#[derive(Debug, Default)]
pub struct ParseOutput {
    pub candidates: Vec<DayCandidate>,
    pub errors: Vec<Error>,
}

pub(crate) fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
    ] {
        if let Ok(ts) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(ts);
        }
    }
    DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_local())
}

fn field(rec: &csv::StringRecord, idx: usize, name: &str) -> std::result::Result<f64, String> {
    let raw = rec.get(idx).ok_or_else(|| format!("missing field {name}"))?;
    raw.trim()
        .parse::<f64>()
        .map_err(|_| format!("{name} {raw:?} is not a number"))
}

fn parse_record(
    rec: &csv::StringRecord,
    cols: &Columns,
    check_quotes: bool,
) -> std::result::Result<MinuteBar, String> {
    let raw_ts = rec.get(cols.timestamp).unwrap_or_default();
    let timestamp =
        parse_timestamp(raw_ts).ok_or_else(|| format!("unparseable timestamp {raw_ts:?}"))?;
    let ohl = |idx: Option<[usize; 3]>, side: &str| -> std::result::Result<Option<Ohl>, String> {
        idx.map(|[o, h, l]| {
            Ok(Ohl {
                open: field(rec, o, &format!("{side}_open"))?,
                high: field(rec, h, &format!("{side}_high"))?,
                low: field(rec, l, &format!("{side}_low"))?,
            })
        })
        .transpose()
    };
    let bar = MinuteBar {
        timestamp,
        bid_close: field(rec, cols.bid_close, "bid_close")?,
        ask_close: field(rec, cols.ask_close, "ask_close")?,
        volume: field(rec, cols.volume, "volume")?,
        bid_ohl: ohl(cols.bid_ohl, "bid")?,
        ask_ohl: ohl(cols.ask_ohl, "ask")?,
    };
    if check_quotes {
        bar.validate()?;
    }
    Ok(bar)
}

/// Parses minute bars and groups them by calendar date.
///
/// Malformed rows become record-level errors and are skipped, which leaves
/// their day incomplete. Rows outside the regular session are discarded.
pub fn parse_minute_bars<R: Read>(source: R, schema: &ColumnMapping) -> Result<ParseOutput> {
    parse_bars(source, schema, true)
}

/// Like [`parse_minute_bars`] but keeps crossed quotes and negative volumes,
/// which decoded synthetic data may contain.
pub(crate) fn parse_bars_unchecked<R: Read>(source: R, schema: &ColumnMapping) -> Result<ParseOutput> {
    parse_bars(source, schema, false)
}

fn parse_bars<R: Read>(source: R, schema: &ColumnMapping, check_quotes: bool) -> Result<ParseOutput> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::Header(e.to_string()))?
        .clone();
    let cols = Columns::resolve(&headers, schema)?;

    let mut by_date: BTreeMap<NaiveDate, Vec<MinuteBar>> = BTreeMap::new();
    let mut errors = Vec::new();
    for rec in reader.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                errors.push(Error::Record {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        match parse_record(&rec, &cols, check_quotes) {
            Ok(bar) => {
                if session_minute(&bar.timestamp).is_some() {
                    by_date.entry(bar.timestamp.date()).or_default().push(bar);
                }
            }
            Err(reason) => errors.push(Error::Record { line, reason }),
        }
    }
    let candidates = by_date
        .into_iter()
        .map(|(date, mut bars)| {
            bars.sort_by_key(|b| b.timestamp);
            DayCandidate { date, bars }
        })
        .collect();
    Ok(ParseOutput { candidates, errors })
}

/// Writes days in the default column schema, readable by [`parse_minute_bars`].
pub fn write_minute_bars<W: Write>(days: &[TradingDay], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["timestamp", "bid_close", "ask_close", "volume"])?;
    for day in days {
        for b in day.bars() {
            w.write_record([
                b.timestamp.format(TIMESTAMP_FORMAT).to_string(),
                b.bid_close.to_string(),
                b.ask_close.to_string(),
                b.volume.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_rejections<W: Write>(rejections: &[Rejection], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in rejections {
        w.serialize(r)?;
    }
    if rejections.is_empty() {
        w.write_record(["date", "reason"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rejections<R: Read>(source: R) -> Result<Vec<Rejection>> {
    let mut r = csv::Reader::from_reader(source);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
