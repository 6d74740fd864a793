//! Binary image-set container and PNG preview export.
//!
//! Layout: the 8-byte magic `WDIMG\0v1`, a little-endian `u32` header
//! length, a JSON [`ImageHeader`], then `count * 3 * height * width`
//! little-endian `f32` pixels.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::codec::{CodecMode, CoefficientImage, IMAGE_CHANNELS};
use super::tiling::RowFill;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"WDIMG\0v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageHeader {
    pub mode: CodecMode,
    pub row_fill: RowFill,
    pub manifest_digest: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    /// Digest of the pipeline configuration that produced the file.
    #[serde(default)]
    pub config_digest: Option<String>,
}

pub fn write_images<W: Write>(
    mut sink: W,
    images: &[CoefficientImage],
    mode: CodecMode,
    row_fill: RowFill,
    manifest_digest: &str,
    config_digest: Option<&str>,
) -> Result<()> {
    let (height, width) = mode.shape();
    for img in images {
        if img.mode != mode || img.row_fill != row_fill || img.manifest_digest != manifest_digest {
            return Err(Error::Format(
                "all images in a container must share codec, row fill and manifest".into(),
            ));
        }
    }
    let header = ImageHeader {
        mode,
        row_fill,
        manifest_digest: manifest_digest.to_string(),
        channels: IMAGE_CHANNELS,
        height,
        width,
        count: images.len(),
        config_digest: config_digest.map(str::to_string),
    };
    let json = serde_json::to_vec(&header)?;
    sink.write_all(MAGIC)?;
    sink.write_all(&(json.len() as u32).to_le_bytes())?;
    sink.write_all(&json)?;
    let mut buf = Vec::with_capacity(IMAGE_CHANNELS * height * width * 4);
    for img in images {
        buf.clear();
        for v in &img.pixels {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_images<R: Read>(mut source: R) -> Result<(ImageHeader, Vec<CoefficientImage>)> {
    let mut magic = [0u8; 8];
    source.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an image container".into()));
    }
    let mut len = [0u8; 4];
    source.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    source.read_exact(&mut json)?;
    let header: ImageHeader = serde_json::from_slice(&json)?;
    if header.channels != IMAGE_CHANNELS || (header.height, header.width) != header.mode.shape() {
        return Err(Error::Format(format!(
            "unexpected image shape {}x{}x{} for {} codec",
            header.channels,
            header.height,
            header.width,
            header.mode.name()
        )));
    }
    let n = header.channels * header.height * header.width;
    let mut raw = vec![0u8; n * 4];
    let mut images = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        source.read_exact(&mut raw)?;
        let pixels = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        images.push(CoefficientImage::new(
            header.mode,
            header.row_fill,
            header.manifest_digest.clone(),
            pixels,
        )?);
    }
    Ok((header, images))
}

/// 8-bit RGB preview; pixel `v` maps to `round(255 * (v + 1) / 2)`.
pub fn export_png<W: Write>(image: &CoefficientImage, sink: W) -> Result<()> {
    let (_, h, w) = image.shape();
    let mut enc = png::Encoder::new(sink, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for col in 0..w {
            for c in 0..IMAGE_CHANNELS {
                let v = image.pixel(c, r, col).clamp(-1.0, 1.0);
                data.push((255.0 * (v + 1.0) / 2.0).round() as u8);
            }
        }
    }
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(mode: CodecMode, seed: f64) -> CoefficientImage {
        let (h, w) = mode.shape();
        let px = (0..3 * h * w).map(|i| ((i as f64 + seed) * 0.37).sin()).collect();
        CoefficientImage::new(mode, RowFill::ReplicateFinest, "abc".into(), px).unwrap()
    }

    #[test]
    fn roundtrip_at_f32_precision() {
        for mode in [CodecMode::Wavelet, CodecMode::Flat] {
            let imgs = vec![image(mode, 0.0), image(mode, 1.0)];
            let mut buf = Vec::new();
            write_images(&mut buf, &imgs, mode, RowFill::ReplicateFinest, "abc", Some("cfg")).unwrap();
            let (header, back) = read_images(buf.as_slice()).unwrap();
            assert_eq!(header.count, 2);
            assert_eq!(header.config_digest.as_deref(), Some("cfg"));
            for (a, b) in back.iter().zip(&imgs) {
                assert_eq!(a.shape(), b.shape());
                for (u, v) in a.pixels.iter().zip(&b.pixels) {
                    assert_eq!(*u, *v as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn rejects_mixed_sets_and_garbage() {
        let imgs = vec![image(CodecMode::Wavelet, 0.0)];
        assert!(write_images(Vec::new(), &imgs, CodecMode::Wavelet, RowFill::Zero, "abc", None).is_err());
        assert!(read_images(&b"NOTANIMGxxxx"[..]).is_err());
    }

    #[test]
    fn png_mapping() {
        let mut px = vec![0.0; 3 * 16 * 256];
        px[0] = -1.0;
        px[1] = 1.0;
        let img = CoefficientImage::new(CodecMode::Wavelet, RowFill::Zero, "d".into(), px).unwrap();
        let mut buf = Vec::new();
        export_png(&img, &mut buf).unwrap();
        let decoder = png::Decoder::new(std::io::Cursor::new(buf));
        let mut reader = decoder.read_info().unwrap();
        let mut data = vec![0; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut data).unwrap();
        assert_eq!(data[0], 0); // R at (0,0)
        assert_eq!(data[3], 255); // R at (0,1)
        assert_eq!(data[1], 128); // G at (0,0): 127.5 rounds up
    }
}
