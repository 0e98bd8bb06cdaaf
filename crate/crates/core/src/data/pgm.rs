//! Binary PGM (P5) encoding, 8-bit or 16-bit big-endian.

use std::path::Path;

use super::DataError;

/// Grayscale raster with its declared maximum value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl Pgm {
    /// 16-bit image from intensities in [0, 1].
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Self {
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        Self {
            width,
            height,
            maxval: 65535,
            pixels,
        }
    }

    /// 8-bit raster (masks, label maps).
    pub fn from_u8(width: usize, height: usize, values: &[u8]) -> Self {
        Self {
            width,
            height,
            maxval: 255,
            pixels: values.iter().map(|&v| v as u16).collect(),
        }
    }

    pub fn to_unit(&self) -> Vec<f64> {
        let m = self.maxval as f64;
        self.pixels.iter().map(|&p| p as f64 / m).collect()
    }

    pub fn to_u8(&self) -> Result<Vec<u8>, DataError> {
        self.pixels
            .iter()
            .map(|&p| {
                u8::try_from(p).map_err(|_| DataError::Pgm {
                    offset: 0,
                    message: format!("value {p} does not fit in 8 bits"),
                })
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        } else {
            for &p in &self.pixels {
                out.extend_from_slice(&p.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DataError> {
        let err = |offset: usize, message: &str| DataError::Pgm {
            offset,
            message: message.to_string(),
        };
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(err(0, "missing P5 magic"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for (k, field) in fields.iter_mut().enumerate() {
            // whitespace and comments before each header number
            loop {
                match bytes.get(pos) {
                    Some(b' ' | b'\t' | b'\n' | b'\r') => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(err(pos, "header ends early")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(err(pos, "expected a decimal number"));
            }
            let text = std::str::from_utf8(&bytes[start..pos]).expect("digits");
            *field = text.parse().map_err(|_| err(start, "number too large"))?;
            if k == 2 {
                match bytes.get(pos) {
                    Some(b' ' | b'\t' | b'\n' | b'\r') => pos += 1,
                    _ => return Err(err(pos, "maxval must be followed by one whitespace byte")),
                }
            }
        }
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > 65535 {
            return Err(err(pos, "maxval must be in 1..=65535"));
        }
        let bpp = if maxval < 256 { 1 } else { 2 };
        let n = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(bpp))
            .ok_or_else(|| err(pos, "image dimensions overflow"))?;
        let payload = &bytes[pos..];
        if payload.len() < n {
            return Err(err(
                bytes.len(),
                &format!(
                    "truncated payload: expected {n} bytes after offset {pos}, found {}",
                    payload.len()
                ),
            ));
        }
        if payload.len() > n {
            return Err(err(pos + n, "trailing bytes after payload"));
        }
        let pixels: Vec<u16> = if bpp == 1 {
            payload.iter().map(|&b| b as u16).collect()
        } else {
            payload.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        };
        if let Some(i) = pixels.iter().position(|&p| p as usize > maxval) {
            return Err(err(pos + i * bpp, "pixel exceeds maxval"));
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            pixels,
        })
    }
}

pub fn write_pgm(path: &Path, image: &Pgm) -> Result<(), DataError> {
    std::fs::write(path, image.encode()).map_err(|e| DataError::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Pgm, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    Pgm::decode(&bytes).map_err(|e| e.at(path))
}
