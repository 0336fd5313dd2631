//! Binary 8-bit PPM (`P6`) images as `[3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn parse_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        what: "ppm".into(),
        offset,
        detail: detail.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    /// Skips whitespace and `#` comments.
    fn skip_blank(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_blank();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {field}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, format!("{field} out of range")))
    }
}

/// Decodes a `P6` file with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(parse_err(0, "missing P6 magic"));
    }
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval_at = hdr.pos;
    let maxval = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("only maxval 255 is supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(2, format!("zero image extent {width}x{height}")));
    }
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err(parse_err(hdr.pos, "expected a single whitespace byte after maxval")),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| parse_err(2, "image extents overflow"))?;
    let payload = &bytes[hdr.pos..];
    if payload.len() < expected {
        return Err(parse_err(
            hdr.pos,
            format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let plane = width * height;
    let mut data = vec![0.0; expected];
    for (i, px) in payload[..expected].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// Encodes a `[3, H, W]` tensor, rounding `v * 255` after clamping to `[0, 1]`.
pub fn encode_ppm<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("write_image", format!("expected [3,H,W], got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = image.data()[c * plane + i].to_f64().clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Parse { offset, detail, .. } => Error::Parse {
            what: path.display().to_string(),
            offset,
            detail,
        },
        other => other,
    })
}

pub fn write_image<T: Real>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_layout() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend(0u8..12);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        // pixel 1 is bytes 3,4,5
        assert_eq!(t.at(&[0, 0, 1]), 3.0 / 255.0);
        assert_eq!(t.at(&[2, 1, 1]), 11.0 / 255.0);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P6 # made by hand\n1 # width\n1\n255\n".to_vec();
        bytes.extend([255, 0, 128]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        let err = decode_ppm(&bytes).unwrap_err().to_string();
        assert!(err.contains("expected 12 bytes, found 3") && err.contains("byte 11"), "{err}");
        let err = decode_ppm(b"P3\n1 1\n255\n").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
    }
}
