//! Video files, Netpbm exports and CSV tables.
//!
//! VidFile layout: the magic `STVF`, then `T, H, W, C` as little-endian
//! `u32`, then `T·H·W·C` little-endian `f32` values stored frame-major with
//! interleaved channels (`[T, H, W, C]`).

use std::fs;
use std::path::Path;

use serde::Serialize;
use stunet_core::Tensor;

use crate::error::{CliError, Result};

pub const VID_MAGIC: &[u8; 4] = b"STVF";
const VID_HEADER: usize = 4 + 4 * 4;

/// Encodes a `[T, C, H, W]` tensor; values are rounded to `f32`.
pub fn encode_vid(video: &Tensor) -> Result<Vec<u8>> {
    if video.rank() != 4 {
        return Err(CliError::config(format!("a video must be [T, C, H, W], got {:?}", video.shape())));
    }
    let s = video.shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(VID_HEADER + video.len() * 4);
    out.extend_from_slice(VID_MAGIC);
    for d in [t, h, w, c] {
        let d = u32::try_from(d).map_err(|_| CliError::config(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    let data = video.data();
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = data[((f * c + ch) * h + y) * w + x] as f32;
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

/// Decodes VidFile bytes into a `[T, C, H, W]` tensor. `path` only labels
/// errors.
pub fn decode_vid(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < VID_HEADER || &bytes[..4] != VID_MAGIC {
        return Err(CliError::format(path, "missing STVF header"));
    }
    let dims: Vec<usize> =
        (0..4).map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize).collect();
    let (t, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
    let expected = t
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CliError::format(path, "header extents overflow"))?;
    let payload = &bytes[VID_HEADER..];
    if payload.len() != expected {
        return Err(CliError::format(
            path,
            format!("payload has {} bytes, header T={t} H={h} W={w} C={c} needs {expected}", payload.len()),
        ));
    }
    let values: Vec<f64> =
        payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    let mut data = vec![0.0; values.len()];
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[((f * c + ch) * h + y) * w + x] = values[((f * h + y) * w + x) * c + ch];
                }
            }
        }
    }
    Ok(Tensor::new(vec![t, c, h, w], data)?)
}

pub fn write_vid(path: &Path, video: &Tensor) -> Result<()> {
    write_bytes(path, &encode_vid(video)?)
}

pub fn read_vid(path: &Path) -> Result<Tensor> {
    decode_vid(&read_bytes(path)?, path)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::config(format!("{} does not exist", path.display())),
        _ => CliError::io(path, e),
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Maps `[lo, hi]` linearly onto `0..=255`, clamping outside values.
pub fn quantize(v: f64, lo: f64, hi: f64) -> u8 {
    ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary greyscale PGM (P5) of a row-major `height × width` image.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pgm pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Binary colour PPM (P6) of a `[3, H, W]` image with values in `[lo, hi]`.
pub fn encode_ppm(image: &Tensor, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CliError::config(format!("a colour image must be [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(quantize(image.data()[c * h * w + p], lo, hi));
        }
    }
    Ok(out)
}

/// Greyscale PGM of a rank-2 tensor with values in `[lo, hi]`.
pub fn encode_pgm_tensor(image: &Tensor, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if image.rank() != 2 {
        return Err(CliError::config(format!("a greyscale image must be rank 2, got {:?}", image.shape())));
    }
    let pixels: Vec<u8> = image.data().iter().map(|&v| quantize(v, lo, hi)).collect();
    Ok(encode_pgm(image.dim(1), image.dim(0), &pixels))
}

/// Writes `rows` as CSV with a header derived from the row type.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(CliError::config(format!("{} does not exist", path.display())));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        CliError::format(path, e.to_string())
    }
}
