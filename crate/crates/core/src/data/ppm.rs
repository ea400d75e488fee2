//! Binary PPM (P6, maxval 255) reading and writing.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

/// 8-bit RGB image, interleaved, row major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Rgb8 { width, height, data })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PpmError {
    #[error("not a binary PPM (magic {0:?})")]
    Magic(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported maxval {0} (only 255)")]
    MaxVal(u64),
    #[error("pixel data too short: expected {expected} bytes, found {found}")]
    ShortData { expected: usize, found: usize },
}

pub fn encode(image: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

/// Parse a P6 file; `#` comments between header fields are skipped.
pub fn decode(bytes: &[u8]) -> Result<Rgb8, PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let shown = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(PpmError::Magic(shown));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PpmError::Header(format!("missing header field {}", i + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| PpmError::Header(format!("header field {} is out of range", i + 1)))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PpmError::Header("no whitespace after maxval".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(PpmError::MaxVal(maxval));
    }
    if w == 0 || h == 0 {
        return Err(PpmError::Header(format!("zero-sized image {w}x{h}")));
    }
    let expected = (w as usize)
        .checked_mul(h as usize)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| PpmError::Header(format!("image {w}x{h} is too large")))?;
    let found = bytes.len() - pos;
    if found < expected {
        return Err(PpmError::ShortData { expected, found });
    }
    Ok(Rgb8 {
        width: w as usize,
        height: h as usize,
        data: bytes[pos..pos + expected].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<Rgb8> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|source| Error::Ppm {
        path: path.to_owned(),
        source,
    })
}

pub fn write_ppm(image: &Rgb8, path: &Path) -> Result<()> {
    std::fs::write(path, encode(image)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_red_pixel_file_layout() {
        let img = Rgb8::new(1, 1, vec![255, 0, 0]).unwrap();
        let bytes = encode(&img);
        // 11 header bytes plus one RGB triple
        assert_eq!(bytes.len(), 14);
        assert_eq!(&bytes[..11], b"P6\n1 1\n255\n");
        assert_eq!(decode(&bytes).unwrap(), img);
    }

    #[test]
    fn comments_are_skipped() {
        let bytes = b"P6\n# made by hand\n2 # width\n1\n# max\n255\n\x01\x02\x03\x04\x05\x06";
        let img = decode(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(decode(b"P3\n1 1\n255\n1 2 3"), Err(PpmError::Magic(_))));
        assert_eq!(decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(PpmError::MaxVal(65535)));
        assert_eq!(
            decode(b"P6\n2 2\n255\n\0\0\0"),
            Err(PpmError::ShortData { expected: 12, found: 3 })
        );
        assert!(matches!(decode(b"P6\n2\n"), Err(PpmError::Header(_))));
    }
}
