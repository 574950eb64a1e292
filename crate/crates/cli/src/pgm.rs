//! Plane extraction and 16-bit binary PGM output.

use std::fmt;
use std::path::Path;

use thermotomo::{Error, Result, ScalarField3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "x" => Some(Axis::X),
            "y" => Some(Axis::Y),
            "z" => Some(Axis::Z),
            _ => None,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

/// Plane normal to `axis` at `index`, returned as `(width, height, row-major values)`.
/// z planes are `nx x ny`, y planes `nx x nz`, x planes `ny x nz`.
pub fn extract_plane(
    field: &ScalarField3D,
    axis: Axis,
    index: usize,
) -> Result<(usize, usize, Vec<f64>)> {
    let g = field.grid();
    let extent = match axis {
        Axis::X => g.nx,
        Axis::Y => g.ny,
        Axis::Z => g.nz,
    };
    if index >= extent {
        return Err(Error::Domain(format!(
            "index {index} outside 0..{extent} along {axis}"
        )));
    }
    let (w, h) = match axis {
        Axis::X => (g.ny, g.nz),
        Axis::Y => (g.nx, g.nz),
        Axis::Z => (g.nx, g.ny),
    };
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            out.push(match axis {
                Axis::X => field.get(index, c, r),
                Axis::Y => field.get(c, index, r),
                Axis::Z => field.get(c, r, index),
            });
        }
    }
    Ok((w, h, out))
}

/// Min-max scaled to 0..=65535, big-endian samples. A constant plane maps to zero.
pub fn encode_pgm16(width: usize, height: usize, values: &[f64]) -> (Vec<u8>, f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let q = if span > 0.0 {
            ((v - lo) / span * 65535.0).round() as u16
        } else {
            0
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    (bytes, lo, hi)
}

/// Writes the PGM and a `<path>.txt` sidecar with the scaling bounds.
pub fn write_slice(field: &ScalarField3D, axis: Axis, index: usize, path: &Path) -> Result<()> {
    let (w, h, values) = extract_plane(field, axis, index)?;
    let (bytes, lo, hi) = encode_pgm16(w, h, &values);
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let side = sidecar_path(path);
    let text = format!("axis = {axis}\nindex = {index}\nwidth = {w}\nheight = {h}\nmin = {lo:e}\nmax = {hi:e}\n");
    std::fs::write(&side, text).map_err(|e| Error::Io {
        path: side.clone(),
        source: e,
    })
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    s.into()
}
