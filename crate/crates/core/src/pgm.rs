//! Binary greyscale PGM (P5, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Encodes an `h × w` byte image.
pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Returns `(width, height, pixels)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("pgm header truncated".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Format("not a P5 pgm".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::Format(format!("bad pgm {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("pgm maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let need = width * height;
    if bytes.len() < pos || bytes.len() - pos != need {
        return Err(Error::Format(format!(
            "pgm raster has {} bytes, expected {need}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok((width, height, bytes[pos..].to_vec()))
}

pub fn write(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode(width, height, pixels))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    decode(&fs::read(path)?)
}

/// Maps values in `[0, 1]` to bytes via `round(v × 255)`.
pub fn quantize(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
