//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::path::Path;

use crate::error::{Error, PnmError, Result};
use crate::tensor::{Shape, Tensor};

/// An 8-bit interleaved image with 1 (grey) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Pnm {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert_eq!(data.len(), width * height * channels, "pixel buffer length");
        Pnm {
            width,
            height,
            channels,
            data,
        }
    }

    fn magic(channels: usize) -> &'static str {
        if channels == 3 {
            "P6"
        } else {
            "P5"
        }
    }

    /// `P6\n<w> <h>\n255\n` (or `P5`) followed by the raw bytes.
    pub fn encode(&self) -> Vec<u8> {
        let header = format!("{}\n{} {}\n255\n", Self::magic(self.channels), self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.data.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses a file whose magic must match `channels` (3 → P6, 1 → P5).
    /// Header tokens may be separated by any whitespace and `#` comments.
    pub fn decode(bytes: &[u8], channels: usize) -> std::result::Result<Self, PnmError> {
        let expected = Self::magic(channels);
        if bytes.len() < 2 || &bytes[..2] != expected.as_bytes() {
            return Err(PnmError::BadMagic { expected });
        }
        let mut pos = 2;
        let mut fields = [0u32; 3];
        for f in &mut fields {
            *f = header_number(bytes, &mut pos)?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(PnmError::UnsupportedMaxval(maxval));
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(PnmError::MalformedHeader),
        }
        let (width, height) = (width as usize, height as usize);
        let expected = width * height * channels;
        let payload = &bytes[pos..];
        if payload.len() < expected {
            return Err(PnmError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        Ok(Pnm::new(width, height, channels, payload[..expected].to_vec()))
    }

    /// Planar (1, c, h, w) tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(Shape::new(1, c, h, w), |_, j, y, x| f32::from(self.data[(y * w + x) * c + j]) / 255.0)
    }

    /// Interleaves sample 0 of `t`, rounding `255·v` half up after clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert!(s.c == 1 || s.c == 3, "tensor must have 1 or 3 channels, got {s}");
        let mut data = vec![0u8; s.h * s.w * s.c];
        for y in 0..s.h {
            for x in 0..s.w {
                for j in 0..s.c {
                    data[(y * s.w + x) * s.c + j] = to_byte(t.get(0, j, y, x));
                }
            }
        }
        Pnm::new(s.w, s.h, s.c, data)
    }

    pub fn read(path: impl AsRef<Path>, channels: usize) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Pnm::decode(&bytes, channels).map_err(|kind| Error::Pnm {
            path: path.to_path_buf(),
            kind,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// `[0, 1]` → byte with round-half-up.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn header_number(bytes: &[u8], pos: &mut usize) -> std::result::Result<u32, PnmError> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            _ => return Err(PnmError::MalformedHeader),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(PnmError::MalformedHeader)
}

/// Reads a P6 file as a (1, 3, h, w) tensor in `[0, 1]`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(Pnm::read(path, 3)?.to_tensor())
}

/// Reads a P5 file as a (1, 1, h, w) tensor in `[0, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(Pnm::read(path, 1)?.to_tensor())
}

pub fn write_ppm(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    if t.shape().c != 3 {
        return Err(Error::dim("write_ppm", format!("expected 3 channels, got {}", t.shape())));
    }
    Pnm::from_tensor(t).write(path)
}

pub fn write_pgm(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    if t.shape().c != 1 {
        return Err(Error::dim("write_pgm", format!("expected 1 channel, got {}", t.shape())));
    }
    Pnm::from_tensor(t).write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_is_exact() {
        let img = Pnm::new(2, 2, 3, (0..12).collect());
        let bytes = img.encode();
        assert_eq!(&bytes[..11], b"P6\n2 2\n255\n");
        assert_eq!(bytes.len(), 11 + 12);
        assert_eq!(Pnm::decode(&bytes, 3).unwrap(), img);
    }

    #[test]
    fn pgm_scales_to_unit() {
        let img = Pnm::new(2, 1, 1, vec![0, 255]);
        let t = Pnm::decode(&img.encode(), 1).unwrap().to_tensor();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn distinct_errors() {
        let good = Pnm::new(2, 2, 1, vec![1, 2, 3, 4]).encode();
        assert_eq!(Pnm::decode(&good, 3), Err(PnmError::BadMagic { expected: "P6" }));
        assert_eq!(Pnm::decode(b"P5\n2 2\n65535\n", 1), Err(PnmError::UnsupportedMaxval(65535)));
        assert_eq!(
            Pnm::decode(&good[..good.len() - 1], 1),
            Err(PnmError::Truncated { expected: 4, found: 3 })
        );
        assert_eq!(Pnm::decode(b"P5\nx 2\n255\n", 1), Err(PnmError::MalformedHeader));
    }

    #[test]
    fn comments_in_header() {
        let bytes = b"P5 # grey\n1 1\n255\n\x07";
        assert_eq!(Pnm::decode(bytes, 1).unwrap().data, vec![7]);
    }

    #[test]
    fn tensor_round_trip_is_byte_exact() {
        let img = Pnm::new(3, 2, 3, (0..18).map(|v| (v * 14) as u8).collect());
        assert_eq!(Pnm::from_tensor(&img.to_tensor()), img);
    }
}
