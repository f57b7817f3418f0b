//! Binary PPM (P6) / PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use super::image::Image;
use crate::error::{Error, Result};

/// Linear 8-bit quantization with round-half-up.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::Format(format!("unsupported PNM magic {m}"))),
    };
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PPM field `{s}`")))
    };
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "maxval {maxval} unsupported (need 255)"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height * channels;
    if bytes.len() < start + len {
        return Err(Error::Format("truncated PPM raster".into()));
    }
    let data = bytes[start..start + len]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    Image::new(height, width, channels, data)
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::storage(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
    }

    #[test]
    fn round_trip_quantized() {
        let data: Vec<f32> = (0..2 * 3 * 3)
            .map(|i| (i * 13 % 256) as f32 / 255.0)
            .collect();
        let img = Image::new(2, 3, 3, data).unwrap();
        assert_eq!(decode(&encode(&img)).unwrap(), img);
        let gray = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(decode(&encode(&gray)).unwrap(), gray);
    }

    #[test]
    fn header_comments_and_errors() {
        let bytes = b"P5\n# c\n2 1\n255\n\x00\xff".to_vec();
        assert_eq!(decode(&bytes).unwrap().data(), &[0.0, 1.0]);
        assert!(decode(b"P5\n2 1\n255\n\x00").is_err());
        assert!(decode(b"P3\n1 1\n255\n1 2 3").is_err());
    }
}
