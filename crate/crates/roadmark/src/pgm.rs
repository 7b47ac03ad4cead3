//! Binary PGM (P5) reading and writing, 8-bit grayscale.
//!
//! The corpus stores every image as P5 so round trips are bit-exact and
//! carry no codec dependencies. Values map linearly between [0,1] reals
//! and 0..=255 bytes.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a P5 file (magic {magic:?})")]
    BadMagic { path: String, magic: String },
    #[error("{path}: malformed header: {reason}")]
    BadHeader { path: String, reason: String },
    #[error("{path}: maxval {maxval} unsupported (want 1..=255)")]
    BadMaxval { path: String, maxval: u32 },
    #[error("{path}: truncated pixel data: want {want} bytes, got {got}")]
    Truncated { path: String, want: usize, got: usize },
}

fn io_err(path: &Path, source: io::Error) -> PgmError {
    PgmError::Io { path: path.display().to_string(), source }
}

/// Writes one grayscale image; values are clamped to [0,1] and quantized
/// to 8 bits by rounding.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<(), PgmError> {
    assert_eq!(pixels.len(), width * height, "pixel count mismatch");
    let mut buf = Vec::with_capacity(32 + pixels.len());
    buf.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    buf.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Reads one P5 image, returning `(width, height, pixels in [0,1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>), PgmError> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut raw)
        .map_err(|e| io_err(path, e))?;
    let pathstr = path.display().to_string();

    if raw.len() < 2 || &raw[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&raw[..raw.len().min(2)]).into_owned();
        return Err(PgmError::BadMagic { path: pathstr, magic });
    }
    // Header: magic, width, height, maxval, each separated by whitespace
    // (with `#` comment lines allowed), then a single whitespace byte.
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
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
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(PgmError::BadHeader {
                path: pathstr,
                reason: "expected a decimal field".into(),
            });
        }
        let text = std::str::from_utf8(&raw[start..pos]).expect("digits are utf8");
        *field = text.parse().map_err(|_| PgmError::BadHeader {
            path: pathstr.clone(),
            reason: format!("field {text:?} out of range"),
        })?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(PgmError::BadMaxval { path: pathstr, maxval });
    }
    if pos >= raw.len() || !raw[pos].is_ascii_whitespace() {
        return Err(PgmError::BadHeader {
            path: pathstr,
            reason: "missing whitespace after maxval".into(),
        });
    }
    pos += 1;
    let want = (width as usize) * (height as usize);
    let data = &raw[pos..];
    if data.len() < want {
        return Err(PgmError::Truncated { path: pathstr, want, got: data.len() });
    }
    let scale = 1.0 / maxval as f64;
    let pixels = data[..want].iter().map(|&b| b as f64 * scale).collect();
    Ok((width as usize, height as usize, pixels))
}
