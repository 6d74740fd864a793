//! Reference data with known stylized facts, standing in for proprietary
//! minute-bar feeds in tests and demos.
//!
//! Returns follow a GARCH(1,1) on the deseasonalized series, scaled by a
//! cosine-bowl intraday multiplier. Spreads and volumes are log-linear in the
//! instantaneous volatility with lognormal noise.

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{minute_timestamp, MinuteBar, TradingDay};
use crate::{Error, Result, MINUTES_PER_DAY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceModelConfig {
    pub n_days: usize,
    pub garch_omega: f64,
    pub garch_alpha: f64,
    pub garch_beta: f64,
    /// Volatility multiplier at the open and close relative to mid-day.
    pub u_shape_amplitude: f64,
    /// Elasticity of the spread to instantaneous volatility. Negative values
    /// make spreads tighten when volume rises.
    pub spread_coupling: f64,
    /// Elasticity of volume to instantaneous volatility.
    pub volume_coupling: f64,
    pub base_price: f64,
    pub base_spread: f64,
    pub base_volume: f64,
    pub tick_size: f64,
    /// Standard deviation of the lognormal spread noise.
    pub spread_noise: f64,
    /// Standard deviation of the lognormal volume noise.
    pub volume_noise: f64,
    pub start_date: NaiveDate,
    pub rng_seed: u64,
}

impl Default for ReferenceModelConfig {
    fn default() -> Self {
        Self {
            n_days: 512,
            garch_omega: 2.5e-9,
            garch_alpha: 0.09,
            garch_beta: 0.90,
            u_shape_amplitude: 2.0,
            spread_coupling: -0.5,
            volume_coupling: 1.0,
            base_price: 100.0,
            base_spread: 0.03,
            base_volume: 20_000.0,
            tick_size: 0.01,
            spread_noise: 0.3,
            volume_noise: 0.5,
            start_date: NaiveDate::from_ymd_opt(2005, 1, 3).expect("valid date"),
            rng_seed: 0,
        }
    }
}

impl ReferenceModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.garch_omega > 0.0) {
            return bad(format!("garch_omega must be positive, got {}", self.garch_omega));
        }
        if self.garch_alpha < 0.0 || self.garch_beta < 0.0 {
            return bad("GARCH coefficients must be non-negative".into());
        }
        if self.garch_alpha + self.garch_beta >= 1.0 {
            return bad(format!(
                "non-stationary GARCH: alpha + beta = {} >= 1",
                self.garch_alpha + self.garch_beta
            ));
        }
        if !(self.u_shape_amplitude >= 1.0) {
            return bad(format!(
                "u_shape_amplitude must be >= 1, got {}",
                self.u_shape_amplitude
            ));
        }
        for (name, v) in [
            ("base_price", self.base_price),
            ("base_spread", self.base_spread),
            ("base_volume", self.base_volume),
            ("tick_size", self.tick_size),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.spread_noise < 0.0 || self.volume_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    fn unconditional_variance(&self) -> f64 {
        self.garch_omega / (1.0 - self.garch_alpha - self.garch_beta)
    }
}

/// Intraday volatility multiplier: `amplitude` at the first and last minute,
/// 1 at mid-session.
pub fn intraday_multiplier(minute: usize, amplitude: f64) -> f64 {
    let phase = 2.0 * std::f64::consts::PI * minute as f64 / (MINUTES_PER_DAY - 1) as f64;
    1.0 + (amplitude - 1.0) * (1.0 + phase.cos()) / 2.0
}

fn trading_dates(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

fn simulate_day(config: &ReferenceModelConfig, date: NaiveDate, day_index: usize) -> TradingDay {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(day_index as u64);

    let long_run_sd = config.unconditional_variance().sqrt();
    let mut variance = config.unconditional_variance();
    let mut prev_scaled_return = 0.0;
    let mut log_price = config.base_price.ln();
    let mut bars = Vec::with_capacity(MINUTES_PER_DAY);

    for minute in 0..MINUTES_PER_DAY {
        if minute > 0 {
            variance = config.garch_omega
                + config.garch_alpha * prev_scaled_return * prev_scaled_return
                + config.garch_beta * variance;
        }
        let sd = variance.sqrt();
        let season = intraday_multiplier(minute, config.u_shape_amplitude);
        let eps: f64 = rng.sample(StandardNormal);
        let ret = season * sd * eps;
        prev_scaled_return = ret / season;
        log_price += ret;

        let activity = season * sd / long_run_sd;
        let spread_shock: f64 = rng.sample(StandardNormal);
        let volume_shock: f64 = rng.sample(StandardNormal);
        let spread = (config.base_spread
            * activity.powf(config.spread_coupling)
            * (config.spread_noise * spread_shock).exp())
        .max(config.tick_size);
        let volume = (config.base_volume
            * activity.powf(config.volume_coupling)
            * (config.volume_noise * volume_shock).exp())
        .round();

        let mid = log_price.exp();
        bars.push(MinuteBar::new(
            minute_timestamp(date, minute),
            mid - spread / 2.0,
            mid + spread / 2.0,
            volume,
        ));
    }
    TradingDay::new(date, bars).expect("simulator emits complete days")
}

/// Simulates `config.n_days` complete trading days on consecutive weekdays.
///
/// Each day draws from its own random stream derived from the seed and the
/// day index, so the output is independent of generation order.
pub fn generate_reference_dataset(config: &ReferenceModelConfig) -> Result<Vec<TradingDay>> {
    config.validate()?;
    Ok(trading_dates(config.start_date, config.n_days)
        .into_iter()
        .enumerate()
        .map(|(i, date)| simulate_day(config, date, i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::derive_series;

    fn small(seed: u64) -> ReferenceModelConfig {
        ReferenceModelConfig {
            n_days: 5,
            rng_seed: seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_reference_dataset(&small(7)).unwrap();
        let b = generate_reference_dataset(&small(7)).unwrap();
        let c = generate_reference_dataset(&small(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn days_are_order_independent() {
        let all = generate_reference_dataset(&small(3)).unwrap();
        let cfg = small(3);
        let third = simulate_day(&cfg, all[2].date(), 2);
        assert_eq!(third, all[2]);
    }

    #[test]
    fn weekends_skipped() {
        let days = generate_reference_dataset(&ReferenceModelConfig {
            n_days: 10,
            ..Default::default()
        })
        .unwrap();
        assert!(days
            .iter()
            .all(|d| !matches!(d.date().weekday(), Weekday::Sat | Weekday::Sun)));
    }

    #[test]
    fn rejects_non_stationary_garch() {
        let cfg = ReferenceModelConfig {
            garch_alpha: 0.2,
            garch_beta: 0.8,
            ..small(0)
        };
        assert!(matches!(
            generate_reference_dataset(&cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn multiplier_shape() {
        assert!((intraday_multiplier(0, 2.0) - 2.0).abs() < 1e-12);
        assert!((intraday_multiplier(389, 2.0) - 2.0).abs() < 1e-12);
        assert!(intraday_multiplier(194, 2.0) < 1.001);
        assert!((0..390).all(|m| intraday_multiplier(m, 1.0) == 1.0));
    }

    #[test]
    fn quotes_valid_and_spread_floored() {
        let cfg = small(11);
        for day in generate_reference_dataset(&cfg).unwrap() {
            let s = derive_series(&day);
            assert!(s.spread.iter().all(|&x| x >= cfg.tick_size - 1e-9));
            assert!(s.volume.iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
        }
    }

    #[test]
    fn constant_variance_without_garch_terms() {
        // alpha = beta = 0 and a flat profile: returns are i.i.d. with
        // variance omega.
        let cfg = ReferenceModelConfig {
            n_days: 40,
            garch_alpha: 0.0,
            garch_beta: 0.0,
            garch_omega: 1e-6,
            u_shape_amplitude: 1.0,
            ..Default::default()
        };
        let days = generate_reference_dataset(&cfg).unwrap();
        let mut rets = Vec::new();
        for d in &days {
            let mid = derive_series(d).mid;
            rets.extend(mid.windows(2).map(|w| (w[1] / w[0]).ln()));
        }
        let n = rets.len() as f64;
        let var = rets.iter().map(|r| r * r).sum::<f64>() / n;
        // Var estimate of a Gaussian has relative sd sqrt(2/n) ~ 0.01.
        assert!((var / 1e-6 - 1.0).abs() < 0.05, "variance ratio {}", var / 1e-6);
    }
}
