//! RGB images, binary masks and 8-bit PNG persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("png decode error on {path}: {msg}")]
    Decode { path: String, msg: String },
    #[error("png encode error on {path}: {msg}")]
    Encode { path: String, msg: String },
    #[error("size mismatch: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
}

/// RGB image in `[0, 1]`, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, color: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&color);
        }
        Self { height, width, data }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3, "rgb buffer length");
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, y: usize, x: usize, c: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// ITU-R BT.601 luma.
    pub fn luma(&self) -> Vec<f32> {
        self.data.chunks_exact(3).map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).collect()
    }

    /// Rounds every channel to the nearest multiple of 1/255 (what a PNG round trip stores).
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        write_png(path, self.width, self.height, png::ColorType::Rgb, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let (w, h, channels, bytes) = read_png(path)?;
        let data: Vec<f32> = match channels {
            3 => bytes.iter().map(|&b| b as f32 / 255.0).collect(),
            1 => bytes.iter().flat_map(|&b| [b as f32 / 255.0; 3]).collect(),
            4 => bytes.chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).map(|b| b as f32 / 255.0).collect(),
            n => {
                return Err(ImageError::Decode { path: path.display().to_string(), msg: format!("{n} channels") })
            }
        };
        Ok(Self::from_vec(h, w, data))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary mask, one byte per pixel holding 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!(self.size(), other.size(), "mask size mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| (a | b) & 1).collect();
        Mask { height: self.height, width: self.width, data }
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a != 0 && b != 0)
    }

    /// Inclusive-exclusive bounding box `(y0, x0, y1, x1)` of set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                    });
                }
            }
        }
        bb
    }

    /// Fraction of set pixels in each `patch×patch` cell, row-major over the cell grid.
    pub fn patch_fractions(&self, patch: usize) -> Vec<f64> {
        let (gh, gw) = (self.height / patch, self.width / patch);
        let area = (patch * patch) as f64;
        let mut out = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut n = 0usize;
                for y in gy * patch..(gy + 1) * patch {
                    for x in gx * patch..(gx + 1) * patch {
                        n += self.get(y, x) as usize;
                    }
                }
                out.push(n as f64 / area);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        write_png(path, self.width, self.height, png::ColorType::Grayscale, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let (w, h, channels, bytes) = read_png(path)?;
        let data = bytes.chunks_exact(channels).map(|c| (c[0] >= 128) as u8).collect();
        Ok(Self { height: h, width: w, data })
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<(), ImageError> {
    let io = |source| ImageError::Io { path: path.display().to_string(), source };
    let enc = |e: png::EncodingError| ImageError::Encode { path: path.display().to_string(), msg: e.to_string() };
    let file = File::create(path).map_err(io)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(enc)?;
    writer.write_image_data(bytes).map_err(enc)?;
    writer.finish().map_err(enc)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), ImageError> {
    let dec = |e: png::DecodingError| ImageError::Decode { path: path.display().to_string(), msg: e.to_string() };
    let file = File::open(path).map_err(|source| ImageError::Io { path: path.display().to_string(), source })?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(dec)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(dec)?;
    let channels = info.color_type.samples();
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, channels, buf))
}
