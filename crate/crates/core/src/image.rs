//! Linear RGB images, PFM / PPM writers and comparison metrics.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::Rgb;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed PFM: {0}")]
    Pfm(String),
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
}

/// Row-major linear radiance, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    /// PFM payload: "PF", dims, scale -1 (little-endian), rows bottom to top.
    pub fn to_pfm(&self) -> Vec<u8> {
        let mut out = format!("PF\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for c in self.get(x, y) {
                    out.write_f32::<LittleEndian>(c as f32).unwrap();
                }
            }
        }
        out
    }

    pub fn from_pfm(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut lines = Vec::new();
        let mut pos = 0;
        while lines.len() < 3 {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| ImageError::Pfm("short header".into()))?;
            lines.push(
                String::from_utf8_lossy(&bytes[pos..pos + end])
                    .trim()
                    .to_string(),
            );
            pos += end + 1;
        }
        if lines[0] != "PF" {
            return Err(ImageError::Pfm(format!("unsupported type {:?}", lines[0])));
        }
        let dims: Vec<usize> = lines[1]
            .split_whitespace()
            .filter_map(|t| t.parse().ok())
            .collect();
        let [width, height] = dims[..] else {
            return Err(ImageError::Pfm("bad dimensions".into()));
        };
        let scale: f64 = lines[2]
            .parse()
            .map_err(|_| ImageError::Pfm("bad scale".into()))?;
        if scale >= 0.0 {
            return Err(ImageError::Pfm("big-endian PFM not supported".into()));
        }
        let mut rd = &bytes[pos..];
        if rd.len() != width * height * 12 {
            return Err(ImageError::Pfm(format!(
                "payload {} bytes, expected {}",
                rd.len(),
                width * height * 12
            )));
        }
        let mut img = Image::new(width, height);
        for y in (0..height).rev() {
            for x in 0..width {
                let mut px = [0.0; 3];
                for v in &mut px {
                    *v = rd.read_f32::<LittleEndian>()? as f64;
                }
                img.pixels[y * width + x] = px;
            }
        }
        Ok(img)
    }

    /// 8-bit preview: clamp(v^(1/2.2)) per channel.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.pixels {
            for c in px {
                out.push(tone_map(*c));
            }
        }
        out
    }

    pub fn save_pfm(&self, path: &Path) -> io::Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_pfm())
    }

    pub fn save_ppm(&self, path: &Path) -> io::Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_ppm())
    }

    pub fn load_pfm(path: &Path) -> Result<Self, ImageError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_pfm(&bytes)
    }
}

pub fn tone_map(v: f64) -> u8 {
    let g = if v > 0.0 { v.powf(1.0 / 2.2) } else { 0.0 };
    (g.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Error statistics of `test` against `reference`, on linear radiance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    /// sqrt(Σ(a − r)²) / sqrt(Σ r²) over all pixels and channels.
    pub relative_rmse: f64,
    pub mean_abs_error: Rgb,
    pub max_abs_error: f64,
}

pub fn compare_images(test: &Image, reference: &Image) -> Result<ImageMetrics, ImageError> {
    if test.width != reference.width || test.height != reference.height {
        return Err(ImageError::SizeMismatch(
            test.width,
            test.height,
            reference.width,
            reference.height,
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut mae = [0.0; 3];
    let mut max = 0.0f64;
    for (a, r) in test.pixels.iter().zip(&reference.pixels) {
        for c in 0..3 {
            let d = a[c] - r[c];
            num += d * d;
            den += r[c] * r[c];
            mae[c] += d.abs();
            max = max.max(d.abs());
        }
    }
    let n = test.pixels.len().max(1) as f64;
    let relative_rmse = if den > 0.0 {
        (num / den).sqrt()
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ImageMetrics {
        relative_rmse,
        mean_abs_error: mae.map(|m| m / n),
        max_abs_error: max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        let mut img = Image::new(3, 2);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = [i as f64, 0.5 * i as f64, 0.25];
        }
        img
    }

    #[test]
    fn pfm_layout_and_round_trip() {
        let img = ramp();
        let bytes = img.to_pfm();
        let header = b"PF\n3 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 3 * 2 * 12);
        // First stored row is the bottom one (pixel index 3).
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, 3.0);
        assert_eq!(Image::from_pfm(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_tone_map() {
        assert_eq!(tone_map(0.0), 0);
        assert_eq!(tone_map(-1.0), 0);
        assert_eq!(tone_map(1.0), 255);
        assert_eq!(tone_map(7.0), 255);
        assert_eq!(
            tone_map(0.5),
            (0.5f64.powf(1.0 / 2.2) * 255.0).round() as u8
        );
        let ppm = ramp().to_ppm();
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(ppm.len(), 11 + 18);
    }

    #[test]
    fn metrics() {
        let r = Image::filled(2, 2, [1.0; 3]);
        let a = Image::filled(2, 2, [1.1; 3]);
        let m = compare_images(&a, &r).unwrap();
        assert!((m.relative_rmse - 0.1).abs() < 1e-12);
        assert!((m.max_abs_error - 0.1).abs() < 1e-12);
        assert_eq!(compare_images(&r, &r).unwrap().relative_rmse, 0.0);
        assert!(compare_images(&Image::new(1, 1), &r).is_err());
    }
}
