//! Binary portable pixmaps (`P6`, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start as u64, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, format!("{what} out of range")))
    }
}

/// Width, height and the byte offset of the pixel data.
fn parse_header(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "missing P6 magic"));
    }
    let mut c = Cursor { bytes, pos: 2 };
    if !c.bytes.get(2).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(2, "expected whitespace after magic"));
    }
    let width = c.number("width")?;
    let height = c.number("height")?;
    let max_at = c.pos;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(max_at as u64, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::format(
            max_at as u64,
            format!("maxval {maxval}, only 255 is supported"),
        ));
    }
    if !c.bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(
            c.pos as u64,
            "expected whitespace before pixel data",
        ));
    }
    Ok((width, height, c.pos + 1))
}

/// Channel-major `[3,H,W]` tensor with values `v / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, start) = parse_header(bytes)?;
    let need = w * h * 3;
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated pixel data: {have} of {need} bytes"),
        ));
    }
    if have > need {
        return Err(Error::format(
            (start + need) as u64,
            "trailing bytes after pixel data",
        ));
    }
    let px = &bytes[start..];
    let mut data = vec![0.0; need];
    let plane = w * h;
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(rgb[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!(
            "PPM needs a [3,H,W] image, got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    let plane = w * h;
    let d = image.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_byte(d[c * plane + i]));
        }
    }
    Ok(out)
}

pub(crate) fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn save_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ppm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encodes packed 8-bit RGB rows.
pub(crate) fn encode_rgb8(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Reads only the header to learn `(width, height)`.
pub fn ppm_dimensions(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; 512];
    let mut n = 0;
    while n < head.len() {
        match f.read(&mut head[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    head.truncate(n);
    let (w, h, _) = parse_header(&head)?;
    Ok((w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(img.shape(), &[3, 1, 1]);
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_p5() {
        let err = decode_ppm(b"P5\n1 1\n255\n\x00").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn truncated_and_trailing() {
        assert!(matches!(
            decode_ppm(b"P6\n2 1\n255\n\x00\x00\x00"),
            Err(Error::Format { offset: 14, .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n255\n\x00\x00\x00\x00"),
            Err(Error::Format { offset: 14, .. })
        ));
        assert!(matches!(decode_ppm(b"P6\n1"), Err(Error::Format { .. })));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn header_comments() {
        let img = decode_ppm(b"P6 # made by hand\n2 1 255\n\x00\x00\x00\xff\x00\x80").unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.at(&[0, 0, 1]), 1.0);
        assert_eq!(img.at(&[2, 0, 1]), 128.0 / 255.0);
    }

    #[test]
    fn canonical_round_trip() {
        let mut bytes = b"P6\n3 2\n255\n".to_vec();
        bytes.extend((0u8..18).map(|b| b.wrapping_mul(37)));
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(encode_ppm(&img).unwrap(), bytes);
    }
}
