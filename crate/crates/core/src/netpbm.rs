//! Binary PPM (P6) and PGM (P5) images.
//!
//! Writers emit the canonical header `P6\n<w> <h>\n255\n` (or `P5` with the
//! image's maxval), so reading and re-writing a canonical file reproduces it
//! byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn fmt_err(m: impl Into<String>) -> Error {
    Error::Format(m.into())
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(fmt_err("file too short for a netpbm header"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fmt_err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err("malformed header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fmt_err("header field out of range"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fmt_err("missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fmt_err("zero image extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(fmt_err(format!("invalid maxval {maxval}")));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        offset: pos,
    })
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(fmt_err(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let h = parse_header(bytes)?;
        if &h.magic != b"P6" {
            return Err(fmt_err("not a binary PPM (P6)"));
        }
        if h.maxval != 255 {
            return Err(fmt_err(format!("PPM maxval must be 255, got {}", h.maxval)));
        }
        let n = h.width * h.height * 3;
        let raster = &bytes[h.offset..];
        if raster.len() != n {
            return Err(fmt_err(format!("PPM raster has {} bytes, expected {n}", raster.len())));
        }
        Self::new(h.width, h.height, raster.to_vec())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.encode())?)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let k = (y * self.width + x) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let k = (y * self.width + x) * 3;
        self.data[k..k + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let n = self.width * self.height;
        let mut data = vec![0.0f32; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = self.data[i * 3 + c] as f32 / 255.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("shape matches")
    }

    /// Inverse of [`RgbImage::to_tensor`], clamping to `[0, 1]` and rounding.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [3, h, w] = t.shape()[..] else {
            return Err(Error::shape("from_tensor", format!("{:?}", t.shape())));
        };
        let n = h * w;
        let mut data = vec![0u8; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                let v = t.data()[c * n + i].clamp(0.0, 1.0);
                data[i * 3 + c] = (v * 255.0).round() as u8;
            }
        }
        Self::new(w, h, data)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, maxval: u16, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(fmt_err(format!(
                "{} samples for a {width}x{height} gray image",
                data.len()
            )));
        }
        if maxval == 0 {
            return Err(fmt_err("maxval must be positive"));
        }
        if let Some(&v) = data.iter().find(|&&v| v > maxval) {
            return Err(fmt_err(format!("sample {v} exceeds maxval {maxval}")));
        }
        Ok(Self {
            width,
            height,
            maxval,
            data,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let h = parse_header(bytes)?;
        if &h.magic != b"P5" {
            return Err(fmt_err("not a binary PGM (P5)"));
        }
        let n = h.width * h.height;
        let raster = &bytes[h.offset..];
        let data: Vec<u16> = if h.maxval < 256 {
            if raster.len() != n {
                return Err(fmt_err(format!("PGM raster has {} bytes, expected {n}", raster.len())));
            }
            raster.iter().map(|&b| b as u16).collect()
        } else {
            if raster.len() != 2 * n {
                return Err(fmt_err(format!(
                    "PGM raster has {} bytes, expected {}",
                    raster.len(),
                    2 * n
                )));
            }
            raster
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        };
        Self::new(h.width, h.height, h.maxval as u16, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.data.iter().map(|&v| v as u8));
        } else {
            for &v in &self.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.encode())?)
    }
}
