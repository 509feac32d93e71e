//! Binary PPM (P6, 8-bit) frames.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` image in `[0,1]` as P6 bytes.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("PPM image must be [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + p]));
        }
    }
    Ok(out)
}

/// Decodes P6 bytes into a `[3, H, W]` image with values `k / maxval`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
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
            return Err(Error::validation("PPM header truncated"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(Error::validation("only binary PPM (P6) images are supported"));
    }
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::validation(format!("bad PPM header field `{s}`")))
    };
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::validation(format!(
            "unsupported PPM geometry {w}x{h} maxval {maxval}"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = 3 * w * h;
    if bytes.len() < start + need {
        return Err(Error::validation("PPM raster truncated"));
    }
    let raster = &bytes[start..start + need];
    let scale = maxval as f64;
    Tensor::new(
        vec![3, h, w],
        (0..need)
            .map(|i| {
                let (c, p) = (i / (h * w), i % (h * w));
                raster[p * 3 + c] as f64 / scale
            })
            .collect(),
    )
}

pub fn save_ppm(image: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| e.context(path.display().to_string()))
}
