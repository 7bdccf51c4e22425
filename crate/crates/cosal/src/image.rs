//! Binary PPM (P6) and PGM (P5) reading and writing.
//!
//! Headers are written in the exact fixed form `P6\n<w> <h>\n255\n`; the
//! reader accepts any whitespace between tokens. Masks are strictly binary
//! (0 or 255), enforced on both paths.

use std::fs;
use std::path::Path;

use crate::error::{CosalError, Result};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// width*height*3 bytes, r g b per pixel.
    pub data: Vec<u8>,
}

/// 8-bit binary mask, values are 0 or 255 only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }
}

impl MaskImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    /// Fraction of foreground pixels.
    pub fn coverage(&self) -> f64 {
        let fg = self.data.iter().filter(|&&v| v == 255).count();
        fg as f64 / self.data.len() as f64
    }
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Parse `<magic> <w> <h> 255` plus one whitespace byte, returning
/// (w, h, payload offset).
fn parse_header(path: &Path, bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let bad = |reason: &str| CosalError::format(path, reason);
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != magic {
        return Err(bad(&format!("expected {magic} magic")));
    }
    let width: usize = token(&mut pos)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&mut pos)?.parse().map_err(|_| bad("bad height"))?;
    if token(&mut pos)? != "255" {
        return Err(bad("maxval must be 255"));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing payload separator"));
    }
    Ok((width, height, pos + 1))
}

pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    if img.width == 0 || img.height == 0 || img.data.len() != img.width * img.height * 3 {
        return Err(CosalError::invalid("image dims/payload mismatch"));
    }
    let mut out = header("P6", img.width, img.height);
    out.extend_from_slice(&img.data);
    fs::write(path, out).map_err(|e| CosalError::io(path, e))
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| CosalError::io(path, e))?;
    let (width, height, offset) = parse_header(path, &bytes, "P6")?;
    let need = width * height * 3;
    if bytes.len() != offset + need {
        return Err(CosalError::format(path, "payload length mismatch"));
    }
    Ok(RgbImage { width, height, data: bytes[offset..].to_vec() })
}

pub fn write_mask(path: &Path, mask: &MaskImage) -> Result<()> {
    if mask.width == 0 || mask.height == 0 || mask.data.len() != mask.width * mask.height {
        return Err(CosalError::invalid("mask dims/payload mismatch"));
    }
    if mask.data.iter().any(|&v| v != 0 && v != 255) {
        return Err(CosalError::invalid("mask values must be 0 or 255"));
    }
    let mut out = header("P5", mask.width, mask.height);
    out.extend_from_slice(&mask.data);
    fs::write(path, out).map_err(|e| CosalError::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<MaskImage> {
    let bytes = fs::read(path).map_err(|e| CosalError::io(path, e))?;
    let (width, height, offset) = parse_header(path, &bytes, "P5")?;
    let need = width * height;
    if bytes.len() != offset + need {
        return Err(CosalError::format(path, "payload length mismatch"));
    }
    let data = bytes[offset..].to_vec();
    if data.iter().any(|&v| v != 0 && v != 255) {
        return Err(CosalError::format(path, "mask values must be 0 or 255"));
    }
    Ok(MaskImage { width, height, data })
}

/// Write a grayscale (non-binary) PGM; used for saliency maps.
pub fn write_gray(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if width == 0 || height == 0 || data.len() != width * height {
        return Err(CosalError::invalid("gray dims/payload mismatch"));
    }
    let mut out = header("P5", width, height);
    out.extend_from_slice(data);
    fs::write(path, out).map_err(|e| CosalError::io(path, e))
}

/// Read a grayscale PGM without the binary-value restriction.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| CosalError::io(path, e))?;
    let (width, height, offset) = parse_header(path, &bytes, "P5")?;
    if bytes.len() != offset + width * height {
        return Err(CosalError::format(path, "payload length mismatch"));
    }
    Ok((width, height, bytes[offset..].to_vec()))
}
