//! Tiling of wavelet bands onto pixel rows.
//!
//! Row `k` holds band `k`; its `2^l` coefficients each fill an equal-width
//! block of the 256 columns. Rows below the last band are filled according
//! to [`RowFill`].

use serde::{Deserialize, Serialize};

use super::{band_len, WaveletBands, N_BANDS};
use crate::{Error, Result};

pub const IMAGE_HEIGHT: usize = 16;
pub const IMAGE_WIDTH: usize = 256;

/// Content of the rows below the finest band.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowFill {
    /// Copy the finest band into every spare row; decoding averages them.
    #[default]
    ReplicateFinest,
    Zero,
}

impl RowFill {
    pub fn tag(self) -> &'static str {
        match self {
            Self::ReplicateFinest => "replicate-finest",
            Self::Zero => "zero",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "replicate-finest" => Ok(Self::ReplicateFinest),
            "zero" => Ok(Self::Zero),
            other => Err(Error::Config(format!("unknown row fill {other:?}"))),
        }
    }
}

fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.len() != N_BANDS || scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config(format!(
            "expected {N_BANDS} positive band scales, got {scales:?}"
        )));
    }
    Ok(())
}

/// Lays out bands as a 16x256 row-major pixel matrix, each coefficient
/// divided by its band scale and clamped to [-1, 1].
pub fn bands_to_rows(bands: &WaveletBands, scales: &[f64], row_fill: RowFill) -> Result<Vec<f64>> {
    check_scales(scales)?;
    if bands.n_bands() != N_BANDS {
        return Err(Error::Shape(format!(
            "expected {N_BANDS} bands, got {}",
            bands.n_bands()
        )));
    }
    let mut px = vec![0.0; IMAGE_HEIGHT * IMAGE_WIDTH];
    for (k, band) in bands.bands().iter().enumerate() {
        let width = IMAGE_WIDTH / band.len();
        let row = &mut px[k * IMAGE_WIDTH..(k + 1) * IMAGE_WIDTH];
        for (j, c) in band.iter().enumerate() {
            let v = (c / scales[k]).clamp(-1.0, 1.0);
            row[j * width..(j + 1) * width].fill(v);
        }
    }
    if row_fill == RowFill::ReplicateFinest {
        let src = (N_BANDS - 1) * IMAGE_WIDTH;
        for r in N_BANDS..IMAGE_HEIGHT {
            px.copy_within(src..src + IMAGE_WIDTH, r * IMAGE_WIDTH);
        }
    }
    Ok(px)
}

/// Inverse tiling: each coefficient is the block mean times its scale.
pub fn rows_to_bands(pixels: &[f64], scales: &[f64], row_fill: RowFill) -> Result<WaveletBands> {
    check_scales(scales)?;
    if pixels.len() != IMAGE_HEIGHT * IMAGE_WIDTH {
        return Err(Error::Shape(format!(
            "expected {}x{} pixels, got {}",
            IMAGE_HEIGHT,
            IMAGE_WIDTH,
            pixels.len()
        )));
    }
    let mut bands = Vec::with_capacity(N_BANDS);
    for (k, scale) in scales.iter().enumerate() {
        let size = band_len(k);
        let width = IMAGE_WIDTH / size;
        let rows: Vec<usize> = if k == N_BANDS - 1 && row_fill == RowFill::ReplicateFinest {
            (k..IMAGE_HEIGHT).collect()
        } else {
            vec![k]
        };
        let count = (width * rows.len()) as f64;
        let band = (0..size)
            .map(|j| {
                let sum: f64 = rows
                    .iter()
                    .map(|r| {
                        let start = r * IMAGE_WIDTH + j * width;
                        pixels[start..start + width].iter().sum::<f64>()
                    })
                    .sum();
                scale * sum / count
            })
            .collect();
        bands.push(band);
    }
    WaveletBands::new(bands)
}

/// Number of coefficients that [`bands_to_rows`] would clamp.
pub fn clamped_coefficients(bands: &WaveletBands, scales: &[f64]) -> usize {
    bands
        .bands()
        .iter()
        .zip(scales)
        .map(|(b, s)| b.iter().filter(|c| c.abs() > *s).count())
        .sum()
}

/// Band scales with any degenerate-band warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct BandScaleFit {
    pub scales: Vec<f64>,
    pub warnings: Vec<String>,
}

const SCALE_FLOOR: f64 = 1e-12;

fn pooled_sd<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
}

/// `multiplier` times the pooled standard deviation of each band over the
/// dataset, floored at 1e-12.
pub fn fit_band_scales(dataset: &[WaveletBands], multiplier: f64) -> Result<BandScaleFit> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot fit band scales on an empty dataset".into()));
    }
    let n_bands = dataset[0].n_bands();
    let mut scales = Vec::with_capacity(n_bands);
    let mut warnings = Vec::new();
    for k in 0..n_bands {
        let sd = pooled_sd(dataset.iter().flat_map(|b| b.band(k).iter()));
        let s = multiplier * sd;
        if s > SCALE_FLOOR {
            scales.push(s);
        } else {
            let msg = format!("band {k} has zero variance; scale floored at {SCALE_FLOOR}");
            log::warn!("{msg}");
            warnings.push(msg);
            scales.push(SCALE_FLOOR);
        }
    }
    Ok(BandScaleFit { scales, warnings })
}

/// Scale for the flat codec: `multiplier` times the pooled standard
/// deviation of the padded series values.
pub fn fit_flat_scales(dataset: &[Vec<f64>], multiplier: f64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot fit flat scale on an empty dataset".into()));
    }
    let s = multiplier * pooled_sd(dataset.iter().flatten());
    if s > SCALE_FLOOR {
        Ok(s)
    } else {
        log::warn!("flat channel has zero variance; scale floored at {SCALE_FLOOR}");
        Ok(SCALE_FLOOR)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::haar_dwt;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ones() -> Vec<f64> {
        vec![1.0; N_BANDS]
    }

    fn random_bands(rng: &mut ChaCha8Rng, sd: f64) -> WaveletBands {
        WaveletBands::new(
            (0..N_BANDS)
                .map(|k| (0..band_len(k)).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn band_two_layout() {
        let mut b = WaveletBands::zeros(N_BANDS);
        let mut raw = b.bands().to_vec();
        raw[2] = vec![0.25, -0.5];
        b = WaveletBands::new(raw).unwrap();
        let px = bands_to_rows(&b, &ones(), RowFill::Zero).unwrap();
        let row2 = &px[2 * IMAGE_WIDTH..3 * IMAGE_WIDTH];
        assert!(row2[..128].iter().all(|&v| v == 0.25));
        assert!(row2[128..].iter().all(|&v| v == -0.5));
    }

    #[test]
    fn zero_bands_zero_rows() {
        for fill in [RowFill::Zero, RowFill::ReplicateFinest] {
            let px = bands_to_rows(&WaveletBands::zeros(N_BANDS), &ones(), fill).unwrap();
            assert!(px.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn replicate_fills_spare_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_bands(&mut rng, 0.2);
        let px = bands_to_rows(&b, &ones(), RowFill::ReplicateFinest).unwrap();
        for r in 10..16 {
            assert_eq!(&px[r * 256..(r + 1) * 256], &px[9 * 256..10 * 256]);
        }
        let px = bands_to_rows(&b, &ones(), RowFill::Zero).unwrap();
        assert!(px[10 * 256..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiling_is_bijective_without_clamping() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scales: Vec<f64> = (0..N_BANDS).map(|k| 1.0 + k as f64).collect();
        for fill in [RowFill::Zero, RowFill::ReplicateFinest] {
            for _ in 0..20 {
                let b = random_bands(&mut rng, 0.2);
                assert_eq!(clamped_coefficients(&b, &scales), 0);
                let back = rows_to_bands(&bands_to_rows(&b, &scales, fill).unwrap(), &scales, fill)
                    .unwrap();
                for (u, v) in back.bands().iter().flatten().zip(b.bands().iter().flatten()) {
                    assert!((u - v).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn clamped_coefficient_saturates() {
        let mut raw = WaveletBands::zeros(N_BANDS).bands().to_vec();
        raw[0] = vec![7.0];
        raw[3][1] = -9.0;
        let b = WaveletBands::new(raw).unwrap();
        let scales = vec![2.0; N_BANDS];
        assert_eq!(clamped_coefficients(&b, &scales), 2);
        let back = rows_to_bands(
            &bands_to_rows(&b, &scales, RowFill::Zero).unwrap(),
            &scales,
            RowFill::Zero,
        )
        .unwrap();
        assert_eq!(back.band(0)[0], 2.0);
        assert_eq!(back.band(3)[1], -2.0);
    }

    #[test]
    fn block_averaging_reduces_noise() {
        // i.i.d. unit pixel noise: a coefficient averaged over a block of
        // width w has standard deviation 1/sqrt(w) (times rows averaged).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 400;
        let mut sq = vec![0.0; N_BANDS];
        let mut counts = vec![0usize; N_BANDS];
        for _ in 0..trials {
            let px: Vec<f64> = (0..IMAGE_HEIGHT * IMAGE_WIDTH)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let b = rows_to_bands(&px, &ones(), RowFill::Zero).unwrap();
            for k in 0..N_BANDS {
                sq[k] += b.band(k).iter().map(|c| c * c).sum::<f64>();
                counts[k] += band_len(k);
            }
        }
        for k in 0..N_BANDS {
            let sd = (sq[k] / counts[k] as f64).sqrt();
            let expected = 1.0 / ((IMAGE_WIDTH / band_len(k)) as f64).sqrt();
            let n = counts[k] as f64;
            // relative standard error of an sd estimate ~ 1/sqrt(2n)
            assert!(
                (sd / expected - 1.0).abs() < 4.0 / (2.0 * n).sqrt(),
                "band {k}: sd {sd} expected {expected}"
            );
        }
        // finest band under replication averages 7 rows
        let mut sq9 = 0.0;
        for _ in 0..trials {
            let px: Vec<f64> = (0..IMAGE_HEIGHT * IMAGE_WIDTH)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let b = rows_to_bands(&px, &ones(), RowFill::ReplicateFinest).unwrap();
            sq9 += b.band(9).iter().map(|c| c * c).sum::<f64>();
        }
        let sd9 = (sq9 / (trials * 256) as f64).sqrt();
        assert!((sd9 * 7f64.sqrt() - 1.0).abs() < 0.02, "sd9 {sd9}");
    }

    #[test]
    fn scales_from_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<WaveletBands> = (0..2000).map(|_| random_bands(&mut rng, 1.0)).collect();
        let fit = fit_band_scales(&data, 4.0).unwrap();
        assert!(fit.warnings.is_empty());
        // finest band has 512k draws: tight
        assert!((fit.scales[9] - 4.0).abs() < 0.05);
        let total: usize = data.iter().map(|b| clamped_coefficients(b, &fit.scales)).sum();
        let rate = total as f64 / (2000.0 * 512.0);
        // 2 * Phi(-4) = 6.3e-5
        assert!(rate < 2e-4, "clamp rate {rate}");
    }

    #[test]
    fn degenerate_band_is_floored() {
        let data = vec![haar_dwt(&[3.0; 512]).unwrap(); 4];
        let fit = fit_band_scales(&data, 4.0).unwrap();
        assert!(fit.scales.iter().all(|&s| s > 0.0));
        assert_eq!(fit.warnings.len(), N_BANDS);
        assert!(fit_band_scales(&[], 4.0).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        assert!(rows_to_bands(&[0.0; 100], &ones(), RowFill::Zero).is_err());
        assert!(bands_to_rows(&WaveletBands::zeros(N_BANDS), &[1.0; 3], RowFill::Zero).is_err());
        assert_eq!(RowFill::from_tag("zero").unwrap(), RowFill::Zero);
        assert!(RowFill::from_tag("mirror").is_err());
    }
}
