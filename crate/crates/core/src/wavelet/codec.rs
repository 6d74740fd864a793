use serde::{Deserialize, Serialize};

use super::tiling::{bands_to_rows, rows_to_bands, RowFill, IMAGE_HEIGHT, IMAGE_WIDTH};
use super::{band_len, haar_dwt, haar_idwt, N_BANDS};
use crate::preprocess::{ChannelKind, NormalizationManifest, PaddedSeries};
use crate::{Error, Result, PADDED_LEN};

pub const IMAGE_CHANNELS: usize = 3;

/// How padded series are placed into an image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    /// Haar bands tiled into a 3x16x256 image.
    #[default]
    Wavelet,
    /// Normalized values placed directly into a 3x1x512 image.
    Flat,
}

impl CodecMode {
    /// Image (height, width).
    pub fn shape(self) -> (usize, usize) {
        match self {
            Self::Wavelet => (IMAGE_HEIGHT, IMAGE_WIDTH),
            Self::Flat => (1, PADDED_LEN),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Wavelet => "wavelet",
            Self::Flat => "flat",
        }
    }
}

/// Three-channel image (R = returns, G = spreads, B = volumes), pixels in
/// [-1, 1], stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientImage {
    pub mode: CodecMode,
    pub row_fill: RowFill,
    pub manifest_digest: String,
    pub pixels: Vec<f64>,
}

impl CoefficientImage {
    pub fn new(
        mode: CodecMode,
        row_fill: RowFill,
        manifest_digest: String,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        let (h, w) = mode.shape();
        if pixels.len() != IMAGE_CHANNELS * h * w {
            return Err(Error::Shape(format!(
                "{} image needs {} pixels, got {}",
                mode.name(),
                IMAGE_CHANNELS * h * w,
                pixels.len()
            )));
        }
        Ok(Self {
            mode,
            row_fill,
            manifest_digest,
            pixels,
        })
    }

    /// (channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.mode.shape();
        (IMAGE_CHANNELS, h, w)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let (_, h, w) = self.shape();
        &self.pixels[c * h * w..(c + 1) * h * w]
    }

    pub fn pixel(&self, c: usize, row: usize, col: usize) -> f64 {
        let (_, h, w) = self.shape();
        self.pixels[(c * h + row) * w + col]
    }

    /// True when every pixel is finite and within [-1, 1].
    pub fn in_range(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite() && v.abs() <= 1.0)
    }

    /// True when every band row is constant over each coefficient's block.
    /// Always true for flat images.
    pub fn has_block_structure(&self) -> bool {
        if self.mode == CodecMode::Flat {
            return true;
        }
        (0..IMAGE_CHANNELS).all(|c| {
            (0..N_BANDS).all(|k| {
                let width = IMAGE_WIDTH / band_len(k);
                (0..IMAGE_WIDTH).all(|col| {
                    self.pixel(c, k, col) == self.pixel(c, k, col - col % width)
                })
            })
        })
    }
}

fn check_channels(series: &[PaddedSeries; 3]) -> Result<()> {
    for (s, kind) in series.iter().zip(ChannelKind::ALL) {
        if s.channel != kind {
            return Err(Error::Shape(format!(
                "expected channel {kind:?} but found {:?}",
                s.channel
            )));
        }
        if s.values.len() != PADDED_LEN {
            return Err(Error::Shape(format!(
                "{} series has {} values",
                kind.name(),
                s.values.len()
            )));
        }
    }
    Ok(())
}

/// Haar transform each channel and tile its bands with the channel's scales.
pub fn encode_day(
    series: &[PaddedSeries; 3],
    manifest: &NormalizationManifest,
    row_fill: RowFill,
) -> Result<CoefficientImage> {
    check_channels(series)?;
    let mut pixels = Vec::with_capacity(IMAGE_CHANNELS * IMAGE_HEIGHT * IMAGE_WIDTH);
    for (c, s) in series.iter().enumerate() {
        let bands = haar_dwt(&s.values)?;
        pixels.extend(bands_to_rows(&bands, &manifest.band_scales[c], row_fill)?);
    }
    CoefficientImage::new(CodecMode::Wavelet, row_fill, manifest.digest(), pixels)
}

/// Inverse of [`encode_day`]; fails when the image was made with a
/// different manifest.
pub fn decode_image(
    image: &CoefficientImage,
    manifest: &NormalizationManifest,
) -> Result<[PaddedSeries; 3]> {
    manifest.verify_digest(&image.manifest_digest)?;
    if image.mode != CodecMode::Wavelet {
        return Err(Error::Shape("expected a wavelet image".into()));
    }
    let mut out = Vec::with_capacity(3);
    for (c, kind) in ChannelKind::ALL.into_iter().enumerate() {
        let bands = rows_to_bands(image.channel(c), &manifest.band_scales[c], image.row_fill)?;
        out.push(PaddedSeries::new(kind, haar_idwt(&bands))?);
    }
    Ok(out.try_into().expect("three channels"))
}

/// Places each channel's values, divided by its flat scale and clamped,
/// into a single pixel row.
pub fn encode_day_flat(
    series: &[PaddedSeries; 3],
    manifest: &NormalizationManifest,
) -> Result<CoefficientImage> {
    check_channels(series)?;
    let pixels = series
        .iter()
        .zip(&manifest.flat_scales)
        .flat_map(|(s, scale)| s.values.iter().map(move |v| (v / scale).clamp(-1.0, 1.0)))
        .collect();
    CoefficientImage::new(CodecMode::Flat, RowFill::default(), manifest.digest(), pixels)
}

pub fn decode_flat(
    image: &CoefficientImage,
    manifest: &NormalizationManifest,
) -> Result<[PaddedSeries; 3]> {
    manifest.verify_digest(&image.manifest_digest)?;
    if image.mode != CodecMode::Flat {
        return Err(Error::Shape("expected a flat image".into()));
    }
    let mut out = Vec::with_capacity(3);
    for (c, kind) in ChannelKind::ALL.into_iter().enumerate() {
        let scale = manifest.flat_scales[c];
        let values = image.channel(c).iter().map(|v| v * scale).collect();
        out.push(PaddedSeries::new(kind, values)?);
    }
    Ok(out.try_into().expect("three channels"))
}

pub fn encode(
    mode: CodecMode,
    series: &[PaddedSeries; 3],
    manifest: &NormalizationManifest,
    row_fill: RowFill,
) -> Result<CoefficientImage> {
    match mode {
        CodecMode::Wavelet => encode_day(series, manifest, row_fill),
        CodecMode::Flat => encode_day_flat(series, manifest),
    }
}

pub fn decode(image: &CoefficientImage, manifest: &NormalizationManifest) -> Result<[PaddedSeries; 3]> {
    match image.mode {
        CodecMode::Wavelet => decode_image(image, manifest),
        CodecMode::Flat => decode_flat(image, manifest),
    }
}
