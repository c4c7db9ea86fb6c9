//! RGB frame storage plus binary PPM/PGM I/O.
//!
//! Frames are stored 8-bit; the accessors expose channels as reals in [0,1]
//! on the k/255 grid so disk round trips are bit-exact.

use crate::error::{ElaError, Result};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [
            f64::from(self.data[i]) / 255.0,
            f64::from(self.data[i + 1]) / 255.0,
            f64::from(self.data[i + 2]) / 255.0,
        ]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    /// Bilinear sample at fractional pixel coordinates, clamped at borders.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |reason: &str| ElaError::Format {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut fields = Vec::new();
        let mut pos = 0;
        // header: magic, width, height, maxval, then a single whitespace byte
        while fields.len() < 4 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
        }
        if fields.len() != 4 || fields[0] != "P6" {
            return Err(bad("not a binary PPM"));
        }
        if fields[3] != "255" {
            return Err(bad("only maxval 255 supported"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        pos += 1; // the single whitespace after maxval
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(bad("truncated pixel data"));
        }
        Ok(Self {
            width,
            height,
            data: bytes[pos..pos + need].to_vec(),
        })
    }
}

/// Write a [0,1] grayscale map as binary PGM (P5, 8-bit).
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(ElaError::Shape(format!(
            "pgm data length {} != {}x{}",
            values.len(),
            width,
            height
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_bit_exact() {
        let mut im = Image::new(5, 3);
        for y in 0..3 {
            for x in 0..5 {
                im.set(x, y, [x as f64 / 4.0, y as f64 / 2.0, 0.5]);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        im.write_ppm(&path).unwrap();
        let back = Image::read_ppm(&path).unwrap();
        assert_eq!(back, im);
    }

    #[test]
    fn bilinear_interpolates_midpoint() {
        let mut im = Image::new(2, 1);
        im.set(0, 0, [0.0, 0.0, 0.0]);
        im.set(1, 0, [1.0, 1.0, 1.0]);
        let p = im.sample_bilinear(0.5, 0.0);
        assert!((p[0] - 0.5).abs() < 1e-2);
    }
}
