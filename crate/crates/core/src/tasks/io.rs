//! Raster files.
//!
//! KMR1 layout: the magic `KMR1`, then `height`, `width`, `channels` as
//! little-endian `u32`, then `channels × height × width` little-endian `f32`
//! values, channel planes in order and each plane row-major. Two-channel
//! rasters hold real then imaginary parts.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use super::{ComplexImage, SamplingMask};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KMR1";

/// Planar `f32` raster with one or two channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn from_image(img: &ComplexImage) -> Self {
        Raster {
            height: img.height,
            width: img.width,
            channels: 2,
            data: img.re.iter().chain(&img.im).map(|&v| v as f32).collect(),
        }
    }

    pub fn from_mask(mask: &SamplingMask) -> Self {
        Raster {
            height: mask.height,
            width: mask.width,
            channels: 1,
            data: mask.kept.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// One channel is read as a real image, two as real and imaginary.
    pub fn to_image(&self) -> Result<ComplexImage> {
        let plane = self.height * self.width;
        let re: Vec<f64> = self.data[..plane].iter().map(|&v| v as f64).collect();
        let im = match self.channels {
            1 => vec![0.0; plane],
            _ => self.data[plane..].iter().map(|&v| v as f64).collect(),
        };
        if re.iter().chain(&im).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("raster data"));
        }
        Ok(ComplexImage {
            height: self.height,
            width: self.width,
            re,
            im,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "KMR1 raster",
            detail,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing KMR1 header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (height, width, channels) = (word(0), word(1), word(2));
        if height == 0 || width == 0 || !(1..=2).contains(&channels) {
            return Err(bad(format!("header {height}x{width}x{channels}")));
        }
        let n = height * width * channels;
        if bytes.len() != 16 + 4 * n {
            return Err(bad(format!(
                "expected {} data bytes, found {}",
                4 * n,
                bytes.len() - 16
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }
}

pub fn write_kmr1(path: &Path, raster: &Raster) -> Result<()> {
    fs::write(path, raster.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_kmr1(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Raster::from_bytes(&bytes)
}

/// Writes a mask as a one-channel KMR1 raster of zeros and ones.
pub fn write_mask(path: &Path, mask: &SamplingMask) -> Result<()> {
    write_kmr1(path, &Raster::from_mask(mask))
}

/// Reads an 8- or 16-bit grayscale PNG and scales its peak to 1.
pub fn read_png(path: &Path) -> Result<ComplexImage> {
    let bad = |detail: String| Error::Format {
        what: "PNG image",
        detail,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(bad(format!("unsupported color type {:?}", info.color_type)));
    }
    let (height, width) = (info.height as usize, info.width as usize);
    let values: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf[..height * width].iter().map(|&b| b as f64).collect(),
        png::BitDepth::Sixteen => buf[..2 * height * width]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect(),
        other => return Err(bad(format!("unsupported bit depth {other:?}"))),
    };
    let mut img = ComplexImage::from_real(height, width, values)?;
    img.normalize_magnitude();
    Ok(img)
}

/// Reads a `.png` or KMR1 image and scales its peak magnitude to 1.
pub fn read_raster(path: &Path) -> Result<ComplexImage> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        return read_png(path);
    }
    let mut img = read_kmr1(path)?.to_image()?;
    img.normalize_magnitude();
    Ok(img)
}
