//! Binary Netpbm images: `P6` colour and `P5` greyscale, maxval 255.

use std::fs;
use std::path::Path;

use attrib_core::Tensor;

use crate::error::{Error, Result};

/// Splits the next whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    header_token(bytes, pos)
        .and_then(|t| std::str::from_utf8(t).ok())
        .and_then(|t| t.parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Format(format!("PPM header: bad or missing {what}")))
}

/// Decodes a P6 image into a `3×H×W` tensor, or a P5 image into `1×H×W`,
/// with values in `[0, 1]`.
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let channels = match header_token(bytes, &mut pos) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        Some(other) => {
            return Err(Error::Format(format!(
                "unsupported image format {:?}; only binary PPM (P6) and PGM (P5) are read",
                String::from_utf8_lossy(other)
            )))
        }
        None => return Err(Error::Format("empty image file".into())),
    };
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} is not supported (need 255)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * channels;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: raster.len(),
        });
    }
    let plane = width * height;
    let mut data = vec![0.0; need];
    for (p, px) in raster[..need].chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + p] = v as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![channels, height, width], data)?)
}

pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes)
}

/// Encodes a `3×H×W` tensor in `[0, 1]` as P6, rounding to the nearest byte.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let Some((3, h, w)) = image.chw() else {
        return Err(Error::Format(format!("PPM needs a 3xHxW image, got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            out.push((image.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}
