//! Float rasters and their on-disk encodings.
//!
//! FLT layout: magic `FLT1`, then `width`, `height`, `channels` as u32 LE,
//! then `width * height * channels` f32 LE values, row-major with channels
//! interleaved.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FLT_MAGIC: &[u8; 4] = b"FLT1";

/// Row-major, channel-interleaved float grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x{channels} raster",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Raster {
        Raster {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Luma with 0.299 / 0.587 / 0.114 weights; single-channel input is copied.
    pub fn to_gray(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Raster::new(self.width, self.height, 1);
        for (o, px) in out.data.iter_mut().zip(self.data.chunks(self.channels)) {
            *o = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        }
        out
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Raster {
        let mut out = Raster::new(self.width * factor, self.height * factor, self.channels);
        for y in 0..out.height {
            for x in 0..out.width {
                let src = self.index(x / factor, y / factor, 0);
                let dst = out.index(x, y, 0);
                out.data[dst..dst + self.channels]
                    .copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    pub fn encode_flt(&self) -> Result<Vec<u8>> {
        if let Some(v) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("FLT payload ({v})")));
        }
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(FLT_MAGIC);
        for d in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode_flt(bytes: &[u8]) -> Result<Raster> {
        if bytes.len() < 16 || &bytes[..4] != FLT_MAGIC {
            return Err(Error::format("FLT raster", "missing FLT1 header"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (w, h, c) = (dim(0), dim(1), dim(2));
        let n = w
            .checked_mul(h)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::format("FLT raster", "dimensions overflow"))?;
        if bytes.len() != 16 + n * 4 {
            return Err(Error::format(
                "FLT raster",
                format!("payload is {} bytes, header implies {}", bytes.len() - 16, n * 4),
            ));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Raster::from_vec(w, h, c, data)
    }

    pub fn write_flt(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode_flt()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_flt(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Raster::decode_flt(&bytes)
    }

    /// Quantizes to 8 bits per channel (values clamped to [0,1]).
    pub fn quantize_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Round-trips the raster through 8-bit quantization, as a PNG would.
    pub fn quantized(&self) -> Raster {
        Raster {
            data: self.quantize_u8().into_iter().map(|b| b as f32 / 255.0).collect(),
            ..*self
        }
    }

    /// Writes an 8-bit PNG. One channel is stored as grayscale, three as RGB.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::InvalidArgument(format!("cannot write {c}-channel PNG"))),
        };
        image::save_buffer(path, &self.quantize_u8(), self.width as u32, self.height as u32, color)?;
        Ok(())
    }

    /// Reads a PNG as RGB in [0,1].
    pub fn read_png(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Raster::from_vec(w as usize, h as usize, 3, data)
    }
}
