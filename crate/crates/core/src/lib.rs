//! Synthetic intraday market data from wavelet-imaged diffusion models.
//!
//! Three synchronized minute series (log returns, bid-ask spreads and
//! trading volumes) are normalized, expanded to 512 samples, decomposed with
//! an orthonormal Haar transform and tiled into a 3x16x256 coefficient
//! image. A DDPM trained on those images generates new ones, which are
//! decoded back into time series and scored against the stylized facts of
//! the source data.

pub mod diffusion;
pub mod digest;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod wavelet;

pub use error::{Error, Result};

/// Minutes in one regular trading session (09:30 to 15:59 inclusive).
pub const MINUTES_PER_DAY: usize = 390;
/// Series length after mirror expansion.
pub const PADDED_LEN: usize = 512;
