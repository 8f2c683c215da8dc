//! Binary PGM (P5) and PPM (P6) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decode a P5/P6 image into a `C×H×W` tensor scaled to `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(Error::Format(
                "byte 0: expected magic P5 or P6".into(),
            ))
        }
    };
    cur.pos = 2;
    let width = cur.header_int("width")?;
    let height = cur.header_int("height")?;
    let maxval = cur.header_int("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!(
            "byte {}: zero image dimension {width}x{height}",
            cur.pos
        )));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!(
            "byte {}: maxval {maxval} outside 1..=65535",
            cur.pos
        )));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(Error::Format(format!(
                "byte {}: expected a single whitespace before the raster",
                cur.pos
            )))
        }
    }
    let wide = maxval > 255;
    let samples = width * height * channels;
    let need = samples * if wide { 2 } else { 1 };
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err(Error::Format(format!(
            "byte {}: raster holds {} bytes, {width}x{height}x{channels} needs {need}",
            cur.pos,
            raster.len()
        )));
    }
    let maxf = maxval as f32;
    let mut data = vec![0f32; samples];
    // interleaved HWC on disk, planar CHW in memory
    for i in 0..width * height {
        for c in 0..channels {
            let s = i * channels + c;
            let v = if wide {
                u16::from_be_bytes([raster[2 * s], raster[2 * s + 1]]) as u32
            } else {
                raster[s] as u32
            };
            if v > maxval as u32 {
                return Err(Error::Format(format!(
                    "byte {}: sample {v} exceeds maxval {maxval}",
                    cur.pos + s * if wide { 2 } else { 1 }
                )));
            }
            data[c * width * height + i] = v as f32 / maxf;
        }
    }
    Tensor::new(vec![channels, height, width], data)
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Encode 8-bit samples. `pixels` is interleaved HWC with 1 or 3 channels.
pub fn encode(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height * channels);
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Encode a `C×H×W` tensor in `[0, 1]`, rounding to 8 bits.
pub fn encode_tensor(img: &Tensor) -> Vec<u8> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut px = vec![0u8; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            let v = img.data()[ch * h * w + i].clamp(0.0, 1.0);
            px[i * c + ch] = (v * 255.0).round() as u8;
        }
    }
    encode(w, h, c, &px)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn header_int(&mut self, field: &str) -> Result<usize> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(Error::Format(format!(
                "byte {}: expected whitespace before {field}",
                self.pos
            )));
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("byte {start}: expected {field}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("byte {start}: {field} does not fit")))
    }
}
