//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: height * width * 3,
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Self {
            height,
            width,
            data: rgb.iter().copied().cycle().take(height * width * 3).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar (1, 3, h, w) tensor scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| self.data[(y * w + x) * 3 + c] as f32 / 255.0)
    }
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = header("P6", img.width, img.height);
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(mask: &LabelMask) -> Vec<u8> {
    let mut out = header("P5", mask.width(), mask.height());
    out.extend_from_slice(mask.labels());
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Format("missing netpbm magic".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("expected a number in header".into()));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format("header number out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        magic,
        width,
        height,
        offset: pos,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let n = h.width * h.height * 3;
    let body = bytes
        .get(h.offset..h.offset + n)
        .ok_or_else(|| Error::Format("truncated pixel data".into()))?;
    RgbImage::new(h.height, h.width, body.to_vec())
}

/// Reads a P5 file whose samples are class labels 0..=3.
pub fn decode_pgm_mask(bytes: &[u8]) -> Result<LabelMask> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    let n = h.width * h.height;
    let body = bytes
        .get(h.offset..h.offset + n)
        .ok_or_else(|| Error::Format("truncated pixel data".into()))?;
    LabelMask::new(h.height, h.width, body.to_vec())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, mask: &LabelMask) -> Result<()> {
    fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_pgm_mask(path: &Path) -> Result<LabelMask> {
    decode_pgm_mask(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
