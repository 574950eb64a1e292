//! Binary field dumps (`NFTF`) and frame-stack helpers.
//!
//! Layout, all little-endian, no padding:
//!
//! | offset | type      | content                 |
//! |--------|-----------|-------------------------|
//! | 0      | `[u8; 4]` | magic `NFTF`            |
//! | 4      | `u32`     | version (1)             |
//! | 8      | `u32 x 3` | nx, ny, nz              |
//! | 20     | `f64 x 3` | lx, ly, lz              |
//! | 44     | `f64 x n` | values, x-fastest       |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField3D, SurfaceFrame};

pub const FIELD_MAGIC: &[u8; 4] = b"NFTF";
pub const FIELD_VERSION: u32 = 1;

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                field,
                message: format!("file ends at byte {}", self.bytes.len()),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::Format {
                field: "magic",
                message: format!(
                    "expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(m)
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    pub(crate) fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self, field: &'static str) -> Result<f64> {
        let b = self.take(8, field)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// Reads exactly `n` trailing f64 values; anything shorter or longer is an error.
    pub(crate) fn payload(&mut self, n: usize) -> Result<Vec<f64>> {
        let rest = &self.bytes[self.pos..];
        if rest.len() % 8 != 0 {
            return Err(Error::Format {
                field: "payload",
                message: format!("{} trailing bytes are not whole f64 values", rest.len()),
            });
        }
        let found = rest.len() / 8;
        if found < n {
            return Err(Error::Truncated { expected: n, found });
        }
        if found > n {
            return Err(Error::Format {
                field: "payload",
                message: format!("expected {n} values, found {found}"),
            });
        }
        self.pos = self.bytes.len();
        Ok(rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn encode_field(field: &ScalarField3D) -> Vec<u8> {
    let g = field.grid();
    let mut out = Vec::with_capacity(44 + 8 * g.len());
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    for n in [g.nx, g.ny, g.nz] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for l in [g.lx, g.ly, g.lz] {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for v in field.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<ScalarField3D> {
    let mut r = ByteReader::new(bytes);
    r.magic(FIELD_MAGIC)?;
    let version = r.u32("version")?;
    if version != FIELD_VERSION {
        return Err(Error::Format {
            field: "version",
            message: format!("unsupported version {version}"),
        });
    }
    let nx = dim(r.u32("nx")?, "nx")?;
    let ny = dim(r.u32("ny")?, "ny")?;
    let nz = dim(r.u32("nz")?, "nz")?;
    let lx = extent(r.f64("lx")?, "lx")?;
    let ly = extent(r.f64("ly")?, "ly")?;
    let lz = extent(r.f64("lz")?, "lz")?;
    let grid = GridSpec::planar(nx, ny, nz, lx, ly, lz)?;
    let values = r.payload(grid.len())?;
    ScalarField3D::from_vec(grid, values).map_err(|e| Error::Format {
        field: "payload",
        message: e.to_string(),
    })
}

fn dim(n: u32, field: &'static str) -> Result<usize> {
    if n == 0 {
        return Err(Error::Format {
            field,
            message: "dimension is zero".into(),
        });
    }
    Ok(n as usize)
}

fn extent(l: f64, field: &'static str) -> Result<f64> {
    if !(l.is_finite() && l > 0.0) {
        return Err(Error::Format {
            field,
            message: format!("extent {l} is not positive"),
        });
    }
    Ok(l)
}

pub fn write_field(field: &ScalarField3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_field(field)).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: impl AsRef<Path>) -> Result<ScalarField3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes)
}

/// Stacks frames into one field with the frame index in the z slot.
/// `frame_spacing` becomes the z voxel size (typically the recorded time step).
pub fn stack_frames(
    frames: &[SurfaceFrame],
    lx: f64,
    ly: f64,
    frame_spacing: f64,
) -> Result<ScalarField3D> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Shape("cannot stack zero frames".into()))?;
    let grid = GridSpec::planar(
        first.nx,
        first.ny,
        frames.len(),
        lx,
        ly,
        frame_spacing * frames.len() as f64,
    )?;
    let mut data = Vec::with_capacity(grid.len());
    for (n, f) in frames.iter().enumerate() {
        if !f.same_shape(first) {
            return Err(Error::Shape(format!("frame {n} differs in shape from frame 0")));
        }
        data.extend_from_slice(&f.data);
    }
    ScalarField3D::from_vec(grid, data)
}

pub fn unstack_frames(stack: &ScalarField3D) -> Vec<SurfaceFrame> {
    (0..stack.grid().nz).map(|k| stack.plane(k)).collect()
}

pub fn frame_to_field(frame: &SurfaceFrame, lx: f64, ly: f64) -> Result<ScalarField3D> {
    let grid = GridSpec::planar(frame.nx, frame.ny, 1, lx, ly, 1.0)?;
    ScalarField3D::from_vec(grid, frame.data.clone())
}
