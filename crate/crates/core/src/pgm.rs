//! Binary PGM (P5) reading and writing for heatmaps and masks.
//!
//! Heatmaps scale [0,1] confidence values to 0-255; masks use 0 for
//! background and 255 for foreground.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Write a grid of values in [0,1] as a P5 file, scaled to 0-255.
pub fn write_heatmap(path: &Path, grid: &Matrix) -> Result<()> {
    let bytes: Vec<u8> = grid
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_p5(path, grid.cols(), grid.rows(), &bytes)
}

/// Write a binary mask (nonzero = foreground) as a P5 file.
pub fn write_mask(path: &Path, width: usize, height: usize, fg: &[bool]) -> Result<()> {
    if fg.len() != width * height {
        return Err(Error::Shape(format!(
            "mask length {} != {}x{}",
            fg.len(),
            width,
            height
        )));
    }
    let bytes: Vec<u8> = fg.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_p5(path, width, height, &bytes)
}

fn write_p5(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(bytes)?;
    Ok(())
}

/// Read a P5 file, returning (width, height, pixel bytes).
pub fn read_p5(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut pos = 0usize;

    let mut token = |raw: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments between header fields.
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Load("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };

    let magic = token(&raw)?;
    if magic != "P5" {
        return Err(Error::Load(format!("not a P5 PGM file (magic {magic:?})")));
    }
    let width: usize = token(&raw)?
        .parse()
        .map_err(|_| Error::Load("bad PGM width".into()))?;
    let height: usize = token(&raw)?
        .parse()
        .map_err(|_| Error::Load("bad PGM height".into()))?;
    let maxval: usize = token(&raw)?
        .parse()
        .map_err(|_| Error::Load("bad PGM maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Load(format!("unsupported PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    if raw.len() < pos + width * height {
        return Err(Error::Load("PGM pixel data truncated".into()));
    }
    Ok((width, height, raw[pos..pos + width * height].to_vec()))
}

/// Read a P5 mask: bytes >= 128 count as foreground.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let (w, h, bytes) = read_p5(path)?;
    Ok((w, h, bytes.into_iter().map(|b| b >= 128).collect()))
}
