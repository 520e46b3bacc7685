//! Binary portable graymap (P5) and pixmap (P6) images, 8 bits per sample.
//!
//! Images are `[1,H,W]` (P5) or `[3,H,W]` (P6) tensors with values in
//! `[0,1]`; writing clamps and rounds to the nearest of 256 levels.

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::pedmix::PatchMask;
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[1,H,W]` tensor as P5 or a `[3,H,W]` tensor as P6.
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    ensure!(
        img.ndim() == 3 && (img.shape()[0] == 1 || img.shape()[0] == 3),
        "netpbm needs a [1|3,H,W] image, got {:?}",
        img.shape()
    );
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    let data = img.data();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(quantize(data[ch * h * w + p]));
        }
    }
    Ok(out)
}

/// Splits the next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
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
    if start == *pos {
        return Err(Error::Format("truncated netpbm header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad netpbm header field {:?}", String::from_utf8_lossy(t))))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let c = match token(bytes, &mut pos)? {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::Format(format!(
                "unsupported netpbm magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let w = number(bytes, &mut pos)?;
    let h = number(bytes, &mut pos)?;
    let maxval = number(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    pos += 1;
    let body = bytes.get(pos..pos + c * h * w).ok_or_else(|| Error::Format("truncated netpbm body".into()))?;
    let mut data = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + p] = body[p * c + ch] as f64 / maxval as f64;
        }
    }
    Ok(Tensor::new(&[c, h, w], data))
}

pub fn write(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode(img)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

/// Renders a patch mask as a graymap, white where the source is kept.
pub fn mask_image(mask: &PatchMask, patch: usize) -> Tensor {
    let (h, w) = (mask.grid_h * patch, mask.grid_w * patch);
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask.keeps(y / patch, x / patch) {
                data[y * w + x] = 1.0;
            }
        }
    }
    Tensor::new(&[1, h, w], data)
}
