//! Image ↔ latent mapping and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::LatentGrid;
use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, no alpha.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width, 3],
                got: vec![pixels.len()],
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// ITU-R 601 luma, unrounded.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Mean over all channels, scaled to [0, 1].
    pub fn mean_brightness(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / (self.pixels.len() as f64 * 255.0)
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::data(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        buf.truncate(info.buffer_size());
        let (w, h) = (info.width as usize, info.height as usize);
        let pixels = match info.color_type {
            png::ColorType::Rgb => buf,
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(Error::data(format!("{}: unsupported color type {other:?}", path.display()))),
        };
        ImageRgb::new(w, h, pixels)
    }

    /// Writes an 8-bit RGB PNG; `text` entries become tEXt chunks.
    pub fn write_png(&self, path: impl AsRef<Path>, text: &[(&str, &str)]) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            encoder
                .add_text_chunk(k.to_string(), v.to_string())
                .map_err(|e| Error::data(e.to_string()))?;
        }
        let mut writer = encoder.write_header().map_err(|e| Error::data(e.to_string()))?;
        writer
            .write_image_data(&self.pixels)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        writer.finish().map_err(|e| Error::data(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodecSpec {
    #[default]
    Identity,
    Downsample { factor: usize },
}

impl CodecSpec {
    fn factor(&self) -> usize {
        match *self {
            CodecSpec::Identity => 1,
            CodecSpec::Downsample { factor } => factor,
        }
    }

    /// Latent shape `[channels, height, width]` for an image of the given size.
    pub fn latent_shape(&self, width: usize, height: usize) -> Result<[usize; 3]> {
        let f = self.factor();
        if f == 0 || !width.is_multiple_of(f) || !height.is_multiple_of(f) {
            return Err(Error::invalid(format!(
                "codec factor {f} does not divide image size {width}x{height}"
            )));
        }
        Ok([3, height / f, width / f])
    }
}

#[inline]
fn to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

#[inline]
fn to_pixel(v: f64) -> u8 {
    ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode(c: &CodecSpec, img: &ImageRgb) -> Result<LatentGrid> {
    let [ch, h, w] = c.latent_shape(img.width, img.height)?;
    let f = c.factor();
    let norm = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; ch * h * w];
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.get(x, y);
            let (ly, lx) = (y / f, x / f);
            for k in 0..3 {
                out[(k * h + ly) * w + lx] += to_unit(p[k]) * norm;
            }
        }
    }
    LatentGrid::new(ch, h, w, out)
}

pub fn decode(c: &CodecSpec, z: &LatentGrid) -> Result<ImageRgb> {
    if z.channels() != 3 {
        return Err(Error::invalid(format!("decode needs 3 channels, got {}", z.channels())));
    }
    let f = c.factor();
    if f == 0 {
        return Err(Error::invalid("codec factor must be positive"));
    }
    let (w, h) = (z.width() * f, z.height() * f);
    let mut img = ImageRgb::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let rgb = [0, 1, 2].map(|k| to_pixel(z.at(k, y / f, x / f)));
            img.set(x, y, rgb);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_encode_values() {
        let img = ImageRgb::new(3, 1, vec![128, 128, 128, 0, 0, 0, 255, 255, 255]).unwrap();
        let z = encode(&CodecSpec::Identity, &img).unwrap();
        assert!((z.at(0, 0, 0) - 0.00392156862745098).abs() < 1e-12);
        assert_eq!(z.at(1, 0, 1), -1.0);
        assert_eq!(z.at(2, 0, 2), 1.0);
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = ImageRgb::new(2, 2, vec![0, 0, 0, 0, 0, 0, 255, 255, 255, 255, 255, 255]).unwrap();
        let z = encode(&CodecSpec::Downsample { factor: 2 }, &img).unwrap();
        assert_eq!(z.shape(), [3, 1, 1]);
        assert!(z.data().iter().all(|v| v.abs() < 1e-15));
        assert!(encode(&CodecSpec::Downsample { factor: 3 }, &img).is_err());
    }

    #[test]
    fn decode_rounding_and_clamp() {
        let z = LatentGrid::new(3, 1, 2, vec![0.0, 1.7, 0.0, -3.0, 0.0, 0.5]).unwrap();
        let img = decode(&CodecSpec::Identity, &z).unwrap();
        assert_eq!(img.get(0, 0), [128, 128, 128]);
        assert_eq!(img.get(1, 0), [255, 0, 191]);
        assert!(decode(&CodecSpec::Identity, &LatentGrid::zeros(1, 2, 2)).is_err());
    }

    #[test]
    fn png_roundtrip_keeps_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageRgb::new(2, 2, (0..12).map(|v| v * 20).collect()).unwrap();
        let path = dir.path().join("a.png");
        img.write_png(&path, &[("config_hash", "abc")]).unwrap();
        assert_eq!(ImageRgb::read_png(&path).unwrap(), img);
    }

    proptest! {
        #[test]
        fn identity_roundtrip_is_lossless(pixels in proptest::collection::vec(any::<u8>(), 48)) {
            let img = ImageRgb::new(4, 4, pixels).unwrap();
            let z = encode(&CodecSpec::Identity, &img).unwrap();
            prop_assert!(z.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert_eq!(decode(&CodecSpec::Identity, &z).unwrap(), img);
        }

        #[test]
        fn downsample_roundtrip_on_block_constant_images(blocks in proptest::collection::vec(any::<u8>(), 12)) {
            let mut img = ImageRgb::filled(4, 4, [0, 0, 0]);
            for y in 0..4 {
                for x in 0..4 {
                    let b = ((y / 2) * 2 + x / 2) * 3;
                    img.set(x, y, [blocks[b], blocks[b + 1], blocks[b + 2]]);
                }
            }
            let c = CodecSpec::Downsample { factor: 2 };
            let z = encode(&c, &img).unwrap();
            prop_assert_eq!(decode(&c, &z).unwrap(), img);
        }
    }
}
