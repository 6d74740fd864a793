//! Orthonormal Haar pyramid and the coefficient-image codec built on it.

mod codec;
mod container;
mod tiling;

pub use codec::{
    decode, decode_flat, decode_image, encode, encode_day, encode_day_flat, CodecMode,
    CoefficientImage, IMAGE_CHANNELS,
};
pub use container::{export_png, read_images, write_images, ImageHeader};
pub use tiling::{
    bands_to_rows, clamped_coefficients, fit_band_scales, fit_flat_scales, rows_to_bands,
    BandScaleFit, RowFill,
    IMAGE_HEIGHT, IMAGE_WIDTH,
};

use crate::{Error, Result, PADDED_LEN};

/// Number of bands for a length-512 series: one approximation plus nine
/// detail levels.
pub const N_BANDS: usize = PADDED_LEN.trailing_zeros() as usize + 1;

/// Haar coefficients, coarsest first: band 0 is the final approximation,
/// band `k >= 1` holds `2^(k-1)` detail coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBands {
    bands: Vec<Vec<f64>>,
}

/// Size of band `k`.
pub fn band_len(k: usize) -> usize {
    if k == 0 {
        1
    } else {
        1 << (k - 1)
    }
}

impl WaveletBands {
    pub fn new(bands: Vec<Vec<f64>>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::Shape("no wavelet bands".into()));
        }
        for (k, b) in bands.iter().enumerate() {
            if b.len() != band_len(k) {
                return Err(Error::Shape(format!(
                    "band {k} has {} coefficients, expected {}",
                    b.len(),
                    band_len(k)
                )));
            }
        }
        Ok(Self { bands })
    }

    pub fn zeros(n_bands: usize) -> Self {
        Self {
            bands: (0..n_bands).map(|k| vec![0.0; band_len(k)]).collect(),
        }
    }

    pub fn bands(&self) -> &[Vec<f64>] {
        &self.bands
    }

    pub fn band(&self, k: usize) -> &[f64] {
        &self.bands[k]
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    /// Length of the series these coefficients describe.
    pub fn series_len(&self) -> usize {
        1 << (self.bands.len() - 1)
    }

    pub fn energy(&self) -> f64 {
        self.bands.iter().flatten().map(|c| c * c).sum()
    }
}

/// Full-depth orthonormal Haar decomposition of a power-of-two series.
pub fn haar_dwt(series: &[f64]) -> Result<WaveletBands> {
    let n = series.len();
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::Shape(format!(
            "Haar transform needs a power-of-two length >= 2, got {n}"
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Haar transform input".into()));
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut approx = series.to_vec();
    let mut details = Vec::new();
    while approx.len() > 1 {
        let (a, d): (Vec<f64>, Vec<f64>) = approx
            .chunks_exact(2)
            .map(|p| ((p[0] + p[1]) * s, (p[0] - p[1]) * s))
            .unzip();
        details.push(d);
        approx = a;
    }
    details.push(approx);
    details.reverse();
    Ok(WaveletBands { bands: details })
}

/// Inverse of [`haar_dwt`].
pub fn haar_idwt(bands: &WaveletBands) -> Vec<f64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut approx = bands.bands[0].clone();
    for detail in &bands.bands[1..] {
        approx = approx
            .iter()
            .zip(detail)
            .flat_map(|(a, d)| [(a + d) * s, (a - d) * s])
            .collect();
    }
    approx
}
