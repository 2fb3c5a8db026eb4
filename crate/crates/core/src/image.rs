//! Square float images and their on-disk forms: 8-bit PGM/PPM and the
//! little-endian float32 depth format.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{LabError, Result};

pub const DEPTH_MAGIC: &[u8; 12] = b"SDSLAB-DEPTH";

/// Single-channel image, row-major, `size * size` values.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub size: usize,
    pub data: Vec<f64>,
}

/// Interleaved RGB image, row-major, `size * size * 3` values.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub size: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(size: usize) -> Self {
        Self::filled(size, 0.0)
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Self {
            size,
            data: vec![value; size * size],
        }
    }

    pub fn from_vec(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(LabError::shape("gray image", size * size, data.len()));
        }
        Ok(Self { size, data })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_pgm())
    }
}

impl RgbImage {
    pub fn new(size: usize) -> Self {
        Self::filled(size, [0.0; 3])
    }

    pub fn filled(size: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        Self { size, data }
    }

    pub fn from_vec(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size * 3 {
            return Err(LabError::shape("rgb image", size * size * 3, data.len()));
        }
        Ok(Self { size, data })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let k = 3 * (row * self.size + col);
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_ppm())
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Depth map bytes: magic, H and W as little-endian u32, then H*W float32.
pub fn encode_depth(image: &GrayImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * image.data.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(image.size as u32).to_le_bytes());
    out.extend_from_slice(&(image.size as u32).to_le_bytes());
    for &v in &image.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], path: &str) -> Result<GrayImage> {
    let bad = |reason: &str| LabError::Format {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 || &bytes[..12] != DEPTH_MAGIC {
        return Err(bad("missing SDSLAB-DEPTH header"));
    }
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if h != w {
        return Err(bad("depth maps must be square"));
    }
    if bytes.len() != 20 + 4 * h * w {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    GrayImage::from_vec(h, data)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp).map_err(|e| LabError::io(tmp, e))?;
        f.write_all(bytes).map_err(|e| LabError::io(tmp, e))?;
    }
    fs::rename(tmp, path).map_err(|e| LabError::io(path, e))
}
