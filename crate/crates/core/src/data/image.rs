//! 2D panels from volumes (maximum intensity projections and slices) and
//! 16-bit binary PGM export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{format_err, io_err, DataError, Result};
use crate::wave::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// The two axes kept when dropping `axis`, in increasing order: they become
/// image rows and columns. Dropping X gives (y, z), Y gives (x, z), Z gives
/// (x, y).
fn kept_axes(axis: Axis) -> (usize, usize) {
    match axis {
        Axis::X => (1, 2),
        Axis::Y => (0, 2),
        Axis::Z => (0, 1),
    }
}

fn reduce(x: &Volume, axis: Axis, range: std::ops::Range<usize>) -> Image {
    let dims = x.dims();
    let (ra, ca) = kept_axes(axis);
    let (rows, cols) = (dims[ra], dims[ca]);
    let mut data = vec![f64::NEG_INFINITY; rows * cols];
    let mut ijk = [0usize; 3];
    for r in 0..rows {
        for c in 0..cols {
            ijk[ra] = r;
            ijk[ca] = c;
            let px = &mut data[r * cols + c];
            for t in range.clone() {
                ijk[axis.index()] = t;
                *px = px.max(x.get(ijk[0], ijk[1], ijk[2]));
            }
        }
    }
    Image { rows, cols, data }
}

/// Per-pixel maximum along `axis`.
pub fn mip(x: &Volume, axis: Axis) -> Image {
    reduce(x, axis, 0..x.dims()[axis.index()])
}

/// The plane at `index` along `axis`.
pub fn slice(x: &Volume, axis: Axis, index: usize) -> Result<Image> {
    let len = x.dims()[axis.index()];
    if index >= len {
        return Err(DataError::OutOfBounds { index, len });
    }
    Ok(reduce(x, axis, index..index + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Map [min, max] to [0, maxval]; a constant image maps to 0.
    Minmax,
    /// Map [0, peak] to [0, maxval], clamping outside values.
    Fixed(f64),
}

pub const PGM_MAXVAL: u16 = 65535;

fn quantize(t: f64) -> u16 {
    (t.clamp(0.0, 1.0) * PGM_MAXVAL as f64 + 0.5).floor() as u16
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Writes a P5 PGM with 16-bit big-endian samples (round half up) and a
/// one-line `<path>.txt` sidecar naming the normalization. Returns the
/// quantized samples.
pub fn export_pgm(image: &Image, path: &Path, normalization: Normalization) -> Result<Vec<u16>> {
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFinite("image"));
    }
    let (samples, line) = match normalization {
        Normalization::Minmax => {
            let lo = image.data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = image.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            let samples = image
                .data
                .iter()
                .map(|&v| if range > 0.0 { quantize((v - lo) / range) } else { 0 })
                .collect::<Vec<_>>();
            (samples, format!("normalization minmax min={lo:e} max={hi:e}"))
        }
        Normalization::Fixed(peak) => {
            if !(peak.is_finite() && peak > 0.0) {
                return Err(format_err(path, format!("fixed peak must be positive, got {peak}")));
            }
            let samples = image.data.iter().map(|&v| quantize(v / peak)).collect::<Vec<_>>();
            (samples, format!("normalization fixed peak={peak:e}"))
        }
    };
    let mut bytes = format!("P5\n{} {}\n{}\n", image.cols, image.rows, PGM_MAXVAL).into_bytes();
    for s in &samples {
        bytes.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    let side = sidecar_path(path);
    fs::write(&side, line + "\n").map_err(io_err(side))?;
    Ok(samples)
}

/// Parses a 16-bit P5 PGM as written by [`export_pgm`]; returns
/// (rows, cols, samples).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(format_err(path, format!("expected P5 magic, got {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad header field {s}")));
    let (cols, rows, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != PGM_MAXVAL as usize {
        return Err(format_err(path, format!("expected maxval {PGM_MAXVAL}, got {maxval}")));
    }
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != 2 * rows * cols {
        return Err(format_err(path, format!("payload has {} bytes, expected {}", payload.len(), 2 * rows * cols)));
    }
    let samples = payload.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    Ok((rows, cols, samples))
}
