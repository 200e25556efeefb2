//! RGB images, label maps and Netpbm IO.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with channels interleaved, values nominally in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// 8-bit quantisation, rounding to nearest.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self { width, height, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() }
    }

    pub fn same_size(&self, other: &Image) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::dimension("image", format!("{}x{}", self.width, self.height), format!("{}x{}", other.width, other.height)));
        }
        Ok(())
    }

    /// Planar `[3, H, W]` layout.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.num_pixels();
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = self.data[3 * p + c];
            }
        }
        out
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.same_size(other)?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(s / self.data.len() as f64)
    }
}

/// Mask labels.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const TORSO: u8 = 1;
    pub const FACE: u8 = 2;
    pub const EYE: u8 = 3;
    pub const LIP: u8 = 4;

    /// Eye and lip pixels are part of the face.
    pub fn is_face(l: u8) -> bool {
        matches!(l, FACE | EYE | LIP)
    }
}

fn read_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Parsed Netpbm raster: magic, width, height, maxval and raw samples.
pub struct Netpbm {
    pub magic: [u8; 2],
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub samples: Vec<u8>,
}

pub fn parse_netpbm(path: &Path, bytes: &[u8]) -> Result<Netpbm> {
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut pos = 0;
    let magic = read_token(bytes, &mut pos).ok_or_else(|| bad("empty file"))?;
    if magic != b"P6" && magic != b"P5" {
        return Err(bad("expected a binary P5 or P6 header"));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = read_token(bytes, &mut pos).ok_or_else(|| bad(&format!("missing {what}")))?;
        std::str::from_utf8(t).ok().and_then(|s| s.parse().ok()).ok_or_else(|| bad(&format!("invalid {what}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    pos += 1;
    let channels = if magic == b"P6" { 3 } else { 1 };
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = width * height * channels * bps;
    if bytes.len() < pos + need {
        return Err(bad(&format!("truncated raster: {} of {need} bytes", bytes.len().saturating_sub(pos))));
    }
    Ok(Netpbm { magic: [magic[0], magic[1]], width, height, maxval: maxval as u32, samples: bytes[pos..pos + need].to_vec() })
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm8(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

/// 16-bit big-endian grey map.
pub fn encode_pgm16(width: usize, height: usize, values: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Scales non-negative values so the maximum maps to 65535 (all zeros stay zero).
pub fn to_u16_full_range(values: &[f64]) -> Vec<u16> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    values.iter().map(|v| if max > 0.0 { (v.max(0.0) / max * 65535.0).round() as u16 } else { 0 }).collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let p = parse_netpbm(path, &read_file(path)?)?;
    if &p.magic != b"P6" || p.maxval != 255 {
        return Err(Error::format(path, "expected an 8-bit P6 image"));
    }
    Ok((p.width, p.height, p.samples))
}

pub fn read_pgm8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let p = parse_netpbm(path, &read_file(path)?)?;
    if &p.magic != b"P5" || p.maxval > 255 {
        return Err(Error::format(path, "expected an 8-bit P5 image"));
    }
    Ok((p.width, p.height, p.samples))
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let p = parse_netpbm(path, &read_file(path)?)?;
    if &p.magic != b"P5" || p.maxval <= 255 {
        return Err(Error::format(path, "expected a 16-bit P5 image"));
    }
    Ok((p.width, p.height, p.samples.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let path = dir.path().join("a.ppm");
        write_file(&path, &encode_ppm(2, 3, &rgb)).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), (2, 3, rgb.clone()));
        let mut commented = b"P6 # note\n2 3\n# more\n255\n".to_vec();
        commented.extend_from_slice(&rgb);
        assert_eq!(parse_netpbm(&path, &commented).unwrap().samples, rgb);
    }

    #[test]
    fn pgm16_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        let v = to_u16_full_range(&[0.0, 0.5, 2.0, 1.0]);
        assert_eq!(v, vec![0, 16384, 65535, 32768]);
        write_file(&path, &encode_pgm16(2, 2, &v)).unwrap();
        assert_eq!(read_pgm16(&path).unwrap().2, v);
        let mut bytes = encode_pgm16(2, 2, &v);
        bytes.pop();
        assert!(parse_netpbm(&path, &bytes).is_err());
        assert!(read_ppm(&path).is_err());
    }

    #[test]
    fn byte_quantisation_round_trips() {
        let bytes: Vec<u8> = (0..=255).collect();
        let img = Image::from_bytes(256, 1, &bytes[..].repeat(3));
        assert_eq!(img.to_bytes(), bytes.repeat(3));
    }
}
