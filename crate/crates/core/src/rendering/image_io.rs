use std::io::Cursor;
use std::path::Path;

use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

use super::RenderedImage;

const DUMP_MAGIC: &[u8; 4] = b"RNFD";
const DUMP_VERSION: u32 = 1;

/// Quantizes a `[0, 1]` value to 8 bits.
pub fn quantize(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// PNG bytes for row-major data with 1 (gray) or 3 (RGB) channels in `[0, 1]`.
pub fn encode_png(width: usize, height: usize, channels: usize, data: &[f32]) -> Result<Vec<u8>> {
    let kind = match channels {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        c => return Err(Error::param(format!("unsupported channel count {c}"))),
    };
    if data.len() != width * height * channels {
        return Err(Error::param("image buffer size does not match dimensions"));
    }
    let bytes: Vec<u8> = data.iter().map(|&v| quantize(v)).collect();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(Cursor::new(&mut out)).write_image(&bytes, width as u32, height as u32, kind)?;
    Ok(out)
}

pub fn save_png(path: &Path, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<()> {
    let bytes = encode_png(width, height, channels, data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a PNG as RGB floats in `[0, 1]`.
pub fn load_png_rgb(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect()))
}

/// Raw float dump: magic, version, width, height, channels (u32 LE) then f32 LE samples.
pub fn encode_float_dump(width: usize, height: usize, channels: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != width * height * channels {
        return Err(Error::param("dump buffer size does not match dimensions"));
    }
    let mut out = Vec::with_capacity(20 + 4 * data.len());
    out.extend_from_slice(DUMP_MAGIC);
    for v in [DUMP_VERSION, width as u32, height as u32, channels as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_float_dump(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bad = |m: &str| Error::param(format!("float dump: {m}"));
    if bytes.len() < 20 || &bytes[..4] != DUMP_MAGIC {
        return Err(bad("bad header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != DUMP_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let (w, h, c) = (word(1), word(2), word(3));
    let body = &bytes[20..];
    if body.len() != 4 * w * h * c {
        return Err(bad("payload size does not match header"));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok((w, h, c, data))
}

pub fn save_float_dump(path: &Path, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<()> {
    let bytes = encode_float_dump(width, height, channels, data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Which diagnostic map to visualize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Color,
    Depth,
    /// Magnitude of the learned residual.
    Residual,
    /// Magnitude of the full deformation.
    Deformation,
}

impl MapKind {
    pub fn name(self) -> &'static str {
        match self {
            MapKind::Color => "color",
            MapKind::Depth => "depth",
            MapKind::Residual => "residual",
            MapKind::Deformation => "deformation",
        }
    }
}

impl RenderedImage {
    /// Display values for a map: depth scaled to `[near, far]`, magnitudes scaled
    /// by their maximum.
    pub fn display(&self, kind: MapKind) -> (usize, Vec<f32>) {
        match kind {
            MapKind::Color => (3, self.color.clone()),
            MapKind::Depth => {
                let span = (self.far - self.near) as f32;
                let v = self
                    .depth
                    .iter()
                    .zip(&self.acc)
                    .map(|(&d, &a)| if a > 0.0 { 1.0 - (d - self.near as f32) / span } else { 0.0 })
                    .collect();
                (1, v)
            }
            MapKind::Residual | MapKind::Deformation => {
                let src = if kind == MapKind::Residual { &self.delta_mag } else { &self.deform_mag };
                let max = src.iter().fold(0.0f32, |m, &v| m.max(v));
                let v = src.iter().map(|&v| if max > 0.0 { v / max } else { 0.0 }).collect();
                (1, v)
            }
        }
    }

    pub fn raw(&self, kind: MapKind) -> (usize, &[f32]) {
        match kind {
            MapKind::Color => (3, &self.color),
            MapKind::Depth => (1, &self.depth),
            MapKind::Residual => (1, &self.delta_mag),
            MapKind::Deformation => (1, &self.deform_mag),
        }
    }

    pub fn png(&self, kind: MapKind) -> Result<Vec<u8>> {
        let (c, v) = self.display(kind);
        encode_png(self.width, self.height, c, &v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_and_clamps() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(f32::NAN), 0);
    }

    #[test]
    fn float_dump_round_trip() {
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.37 - 2.0).collect();
        let bytes = encode_float_dump(4, 2, 3, &data).unwrap();
        assert_eq!(bytes.len(), 20 + 96);
        let (w, h, c, back) = decode_float_dump(&bytes).unwrap();
        assert_eq!((w, h, c), (4, 2, 3));
        assert_eq!(back, data);
        assert!(decode_float_dump(&bytes[..30]).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let data: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32 / 17.0).collect();
        save_png(&path, 3, 2, 3, &data).unwrap();
        let (w, h, back) = load_png_rgb(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        for (a, b) in back.iter().zip(&data) {
            assert_eq!(*a, quantize(*b) as f32 / 255.0);
        }
    }
}
