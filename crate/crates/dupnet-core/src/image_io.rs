//! Binary PPM/PGM image loading, PGM writing, and the raw tensor container.
//!
//! Images load as 8-bit codes in RGB (or single-channel) planar order.
//! The raw tensor format is magic `DUPT`, four little-endian u32 dims,
//! then 32-bit little-endian IEEE-754 reals.

use crate::quant::QTensor;
use crate::tensor::Tensor;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected}, got {got}")]
    BadMagic { expected: String, got: String },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
}

/// A decoded 8-bit image in planar channel order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Planar (c, h, w) bytes.
    pub pixels: Vec<u8>,
}

impl Image {
    /// Codes 0..=255 with step 1/255, the a8 first-layer input form.
    pub fn to_qtensor(&self) -> QTensor {
        let codes = self.pixels.iter().map(|&b| b as i32).collect();
        QTensor::from_codes(
            codes,
            (1, self.channels, self.height, self.width),
            1.0 / 255.0,
            8,
        )
    }

    /// Real values in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(1, self.channels, self.height, self.width, data)
            .expect("pixel count matches dims")
    }
}

fn parse_pnm_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize), ImageError> {
    // magic, then width/height/maxval tokens separated by whitespace with
    // '#' comments running to end of line, then one whitespace byte
    let magic = bytes.get(..2).ok_or_else(|| ImageError::BadHeader("file too short".into()))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(ImageError::BadMagic {
                expected: "P5 or P6".into(),
                got: String::from_utf8_lossy(other).into_owned(),
            })
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(ImageError::BadHeader("unexpected end of header".into())),
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_digit() {
                pos += 1;
            } else {
                break;
            }
        }
        if pos == start {
            return Err(ImageError::BadHeader(format!(
                "expected a number at byte {pos}"
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| ImageError::BadHeader("numeric field overflow".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::BadHeader("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval(maxval as u32));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::BadHeader("zero image dimension".into()));
    }
    Ok((channels, width, height, pos))
}

/// Decodes a binary PPM (P6) or PGM (P5) byte buffer.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image, ImageError> {
    let (channels, width, height, data_start) = parse_pnm_header(bytes)?;
    let expected = channels * width * height;
    let data = &bytes[data_start..];
    if data.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            got: data.len(),
        });
    }
    // interleaved on disk -> planar in memory
    let mut pixels = vec![0u8; expected];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                pixels[(c * height + y) * width + x] = data[(y * width + x) * channels + c];
            }
        }
    }
    Ok(Image {
        channels,
        width,
        height,
        pixels,
    })
}

pub fn load_pnm(path: &Path) -> Result<Image, ImageError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_pnm(&bytes)
}

/// Encodes a single-channel byte plane as binary PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn save_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(width, height, pixels))
}

const RAW_MAGIC: &[u8; 4] = b"DUPT";

/// Serializes a tensor as `DUPT`, dims, then f32 little-endian values.
pub fn encode_tensor_raw(t: &Tensor) -> Vec<u8> {
    let (n, c, h, w) = t.shape();
    let mut out = Vec::with_capacity(4 + 16 + 4 * t.len());
    out.extend_from_slice(RAW_MAGIC);
    for dim in [n, c, h, w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor_raw(bytes: &[u8]) -> Result<Tensor, ImageError> {
    if bytes.len() < 20 {
        return Err(ImageError::BadHeader("file too short".into()));
    }
    if &bytes[..4] != RAW_MAGIC {
        return Err(ImageError::BadMagic {
            expected: "DUPT".into(),
            got: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let mut dims = [0usize; 4];
    for (i, dim) in dims.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        *dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let [n, c, h, w] = dims;
    let expected = n * c * h * w * 4;
    let payload = &bytes[20..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let data = payload[..expected]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(n, c, h, w, data).expect("length checked"))
}

pub fn save_tensor_raw(path: &Path, t: &Tensor) -> io::Result<()> {
    std::fs::File::create(path)?.write_all(&encode_tensor_raw(t))
}

pub fn load_tensor_raw(path: &Path) -> Result<Tensor, ImageError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensor_raw(&bytes)
}
