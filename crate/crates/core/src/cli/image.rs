//! Binary PPM (P6) / PGM (P5) input with 8-bit samples.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor3;

/// Normalized `H x W x 3` image; samples map to `(v - 127.5) / 127.5`.
pub type Image = Tensor3;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported format {0:?}; expected binary PPM (P6) or PGM (P5)")]
    UnsupportedMagic(String),
    #[error("unsupported maxval {0}; only 255 is accepted")]
    MaxVal(u32),
    #[error("malformed header: {0}")]
    Header(&'static str),
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Maps an 8-bit sample to `[-1, 1]`.
#[inline]
pub fn normalize(v: u8) -> f32 {
    (v as f32 - 127.5) / 127.5
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_number(bytes: &[u8], pos: usize) -> Result<(u32, usize), ImageError> {
    let start = skip_space_and_comments(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(ImageError::Header("expected a number"));
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("ascii digits");
    let v = text.parse().map_err(|_| ImageError::Header("number out of range"))?;
    Ok((v, end))
}

/// Decodes a P5/P6 file. Grayscale is replicated into three channels.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image, ImageError> {
    if bytes.len() < 2 {
        return Err(ImageError::UnsupportedMagic(
            String::from_utf8_lossy(bytes).into_owned(),
        ));
    }
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(ImageError::UnsupportedMagic(
                String::from_utf8_lossy(other).into_owned(),
            ))
        }
    };
    let (width, pos) = read_number(bytes, 2)?;
    let (height, pos) = read_number(bytes, pos)?;
    let (maxval, pos) = read_number(bytes, pos)?;
    if maxval != 255 {
        return Err(ImageError::MaxVal(maxval));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Header("zero image dimension"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::Header("missing whitespace before pixel data"));
    }
    let data = &bytes[pos + 1..];
    let (w, h) = (width as usize, height as usize);
    let expected = w * h * channels;
    if data.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: data.len(),
        });
    }
    let data = &data[..expected];
    Ok(Tensor3::from_fn(h, w, 3, |r, c, ch| {
        let src = if channels == 3 { ch } else { 0 };
        normalize(data[(r * w + c) * channels + src])
    }))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    decode_pnm(&fs::read(path)?)
}

/// Encodes raw 8-bit samples as P5 (`channels == 1`) or P6 (`channels == 3`).
pub fn encode_pnm(width: usize, height: usize, channels: usize, samples: &[u8]) -> Vec<u8> {
    assert!(channels == 1 || channels == 3, "PNM channel count");
    assert_eq!(samples.len(), width * height * channels, "PNM sample count");
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black() {
        let img = decode_pnm(&encode_pnm(2, 2, 3, &[255; 12])).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 2, 3));
        assert!(img.data().iter().all(|&v| v == 1.0));
        let img = decode_pnm(&encode_pnm(2, 2, 3, &[0; 12])).unwrap();
        assert!(img.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn gray_replicated() {
        let img = decode_pnm(&encode_pnm(3, 1, 1, &[0, 100, 200])).unwrap();
        for c in 0..3 {
            let px = img.pixel(0, c);
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
        assert_eq!(img.get(0, 1, 0), normalize(100));
    }

    #[test]
    fn header_comments_and_layout() {
        let mut bytes = b"P6 # comment\n# another\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), &[1.0, -1.0, -1.0]);
        assert_eq!(img.pixel(0, 1), &[-1.0, -1.0, 1.0]);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(
            decode_pnm(b"P3\n1 1\n255\n0 0 0"),
            Err(ImageError::UnsupportedMagic(_))
        ));
        assert!(matches!(
            decode_pnm(b"P5\n1 1\n65535\n\0\0"),
            Err(ImageError::MaxVal(65535))
        ));
        assert!(matches!(
            decode_pnm(b"P6\n2 2\n255\n\0\0\0"),
            Err(ImageError::Truncated { expected: 12, found: 3 })
        ));
        assert!(matches!(decode_pnm(b"P5\nx 1\n255\n"), Err(ImageError::Header(_))));
        assert!(matches!(decode_pnm(b""), Err(ImageError::UnsupportedMagic(_))));
    }
}
