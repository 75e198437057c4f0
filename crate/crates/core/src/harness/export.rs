//! Binary PGM (P5) images for class maps and saliency maps.

use std::path::Path;

use serde::Serialize;

use crate::error::{contract_err, Error, Result};

/// Encodes an 8-bit grey image.
pub fn pgm_bytes(height: usize, width: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != height * width {
        return Err(contract_err!("PGM needs {} pixels, got {}", height * width, pixels.len()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Decodes the header and pixels written by [`pgm_bytes`].
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("not an 8-bit P5 image".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos..pos + w * h).ok_or_else(bad)?.to_vec();
    Ok((h, w, data))
}

/// Saliency values in `[0, 1]` scaled to `0..=255`.
pub fn saliency_pixels(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Grey level used for class `c` of `classes`, spread evenly over `0..=255`.
pub fn class_level(c: usize, classes: usize) -> u8 {
    if classes <= 1 {
        return 0;
    }
    ((c * 255) as f64 / (classes - 1) as f64).round() as u8
}

pub fn class_pixels(ids: &[usize], classes: usize) -> Vec<u8> {
    ids.iter().map(|&c| class_level(c, classes)).collect()
}

#[derive(Serialize)]
struct PaletteEntry {
    class: usize,
    level: u8,
}

/// JSON list mapping class ids to grey levels.
pub fn palette_json(classes: usize) -> String {
    let entries: Vec<_> = (0..classes).map(|c| PaletteEntry { class: c, level: class_level(c, classes) }).collect();
    serde_json::to_string_pretty(&entries).expect("palette serializes")
}

pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, pgm_bytes(height, width, pixels)?)?;
    Ok(())
}
