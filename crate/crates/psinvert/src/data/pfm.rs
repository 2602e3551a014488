//! Portable float map codec.
//!
//! Header: magic line `Pf` (grayscale) or `PF` (3-channel), a dimensions
//! line `<width> <height>`, a scale line whose sign encodes endianness
//! (negative = little endian); then rows of 32-bit floats stored
//! bottom-to-top, channels interleaved. This writer always emits
//! little-endian `-1.0`.

use crate::error::{Error, Result};
use crate::raster::Image;
use std::fs;
use std::path::Path;

/// Decoded PFM contents, rows top-to-bottom in memory.
#[derive(Debug, Clone)]
pub enum Pfm {
    Gray(Image),
    Rgb {
        width: usize,
        height: usize,
        data: Vec<[f64; 3]>,
    },
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::FileFormat {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn is_ws(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\r' | b'\n')
}

/// Reads one whitespace-delimited token starting at `*pos`.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    while *pos < bytes.len() && is_ws(bytes[*pos]) {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !is_ws(bytes[*pos]) {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

pub fn read_pfm(path: &Path) -> Result<Pfm> {
    let bytes = fs::read(path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let mut pos = 0usize;
    let magic = token(&bytes, &mut pos).ok_or_else(|| format_err(path, "missing magic"))?;
    let channels = match magic {
        b"Pf" => 1usize,
        b"PF" => 3usize,
        _ => return Err(format_err(path, "bad magic (want Pf or PF)")),
    };
    let parse_dim = |t: Option<&[u8]>| -> Result<usize> {
        let t = t.ok_or_else(|| format_err(path, "missing dimensions"))?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| format_err(path, "bad dimensions"))
    };
    let width = parse_dim(token(&bytes, &mut pos))?;
    let height = parse_dim(token(&bytes, &mut pos))?;
    let scale_tok = token(&bytes, &mut pos).ok_or_else(|| format_err(path, "missing scale"))?;
    let scale: f64 = std::str::from_utf8(scale_tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(path, "bad scale"))?;
    if scale == 0.0 {
        return Err(format_err(path, "zero scale"));
    }
    let little_endian = scale < 0.0;
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !is_ws(bytes[pos]) {
        return Err(format_err(path, "missing header terminator"));
    }
    pos += 1;

    let count = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() != count * 4 {
        return Err(format_err(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), count * 4),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        values.push(v as f64);
    }

    // flip bottom-to-top storage into top-to-bottom rows
    let row_len = width * channels;
    let mut flipped = Vec::with_capacity(count);
    for y in (0..height).rev() {
        flipped.extend_from_slice(&values[y * row_len..(y + 1) * row_len]);
    }

    if channels == 1 {
        Ok(Pfm::Gray(Image {
            width,
            height,
            data: flipped,
        }))
    } else {
        let data = flipped
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(Pfm::Rgb {
            width,
            height,
            data,
        })
    }
}

fn write_payload(path: &Path, magic: &str, width: usize, height: usize, rows_top_down: &[f32]) -> Result<()> {
    if rows_top_down.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pfm write"));
    }
    let channels = if magic == "Pf" { 1 } else { 3 };
    let row_len = width * channels;
    let mut out = Vec::with_capacity(32 + rows_top_down.len() * 4);
    out.extend_from_slice(format!("{magic}\n{width} {height}\n-1.0\n").as_bytes());
    for y in (0..height).rev() {
        for v in &rows_top_down[y * row_len..(y + 1) * row_len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_pfm_gray(img: &Image, path: &Path) -> Result<()> {
    let rows: Vec<f32> = img.data.iter().map(|&v| v as f32).collect();
    write_payload(path, "Pf", img.width, img.height, &rows)
}

pub fn write_pfm_rgb(width: usize, height: usize, data: &[[f64; 3]], path: &Path) -> Result<()> {
    assert_eq!(data.len(), width * height);
    let mut rows = Vec::with_capacity(data.len() * 3);
    for px in data {
        rows.extend(px.iter().map(|&v| v as f32));
    }
    write_payload(path, "PF", width, height, &rows)
}
