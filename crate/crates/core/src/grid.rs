//! Discretized domain, voxel fields and face conductances.
//!
//! Layout is x-fastest row-major everywhere: voxel `(i, j, k)` lives at
//! `i + nx * (j + ny * k)`. Lateral axes wrap periodically; the depth axis is
//! closed by zero-conductance faces, so no heat crosses `z = 0` or `z = lz`.

use crate::error::{Error, Result};
use crate::memtrack;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
}

impl GridSpec {
    /// Simulation grid: every axis needs at least two voxels.
    pub fn new(nx: usize, ny: usize, nz: usize, lx: f64, ly: f64, lz: f64) -> Result<Self> {
        Self::checked(nx, ny, nz, lx, ly, lz, 2)
    }

    /// Container grid for images and frame stacks, where a single plane is legal.
    pub fn planar(nx: usize, ny: usize, nz: usize, lx: f64, ly: f64, lz: f64) -> Result<Self> {
        Self::checked(nx, ny, nz, lx, ly, lz, 1)
    }

    fn checked(
        nx: usize,
        ny: usize,
        nz: usize,
        lx: f64,
        ly: f64,
        lz: f64,
        min_count: usize,
    ) -> Result<Self> {
        for (name, n) in [("nx", nx), ("ny", ny), ("nz", nz)] {
            if n < min_count {
                return Err(Error::Domain(format!("{name} = {n} is below {min_count}")));
            }
        }
        for (name, l) in [("lx", lx), ("ly", ly), ("lz", lz)] {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Domain(format!("{name} = {l} must be positive")));
            }
        }
        Ok(Self {
            nx,
            ny,
            nz,
            lx,
            ly,
            lz,
        })
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn dz(&self) -> f64 {
        self.lz / self.nz as f64
    }

    pub fn min_spacing(&self) -> f64 {
        self.dx().min(self.dy()).min(self.dz())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub fn coords(&self, v: usize) -> (usize, usize, usize) {
        let i = v % self.nx;
        let j = (v / self.nx) % self.ny;
        let k = v / (self.nx * self.ny);
        (i, j, k)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            (i as f64 + 0.5) * self.dx(),
            (j as f64 + 0.5) * self.dy(),
            (k as f64 + 0.5) * self.dz(),
        ]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.dx() * self.dy() * self.dz()
    }

    pub(crate) fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                left: self.describe(),
                right: other.describe(),
            })
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "{}x{}x{} over {}x{}x{}",
            self.nx, self.ny, self.nz, self.lx, self.ly, self.lz
        )
    }
}

/// A voxel-resident scalar quantity (temperature, diffusivity, gradients).
///
/// Every live instance is counted by [`memtrack`], which is how the adjoint
/// memory contract is measured.
#[derive(Debug)]
pub struct ScalarField3D {
    grid: GridSpec,
    data: Vec<f64>,
}

impl ScalarField3D {
    pub fn filled(grid: GridSpec, value: f64) -> Self {
        memtrack::acquire();
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn from_vec(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field data has {} values, grid {} needs {}",
                data.len(),
                grid.describe(),
                grid.len()
            )));
        }
        if let Some(v) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at voxel {v}")));
        }
        memtrack::acquire();
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.nz {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    data.push(f(i, j, k));
                }
            }
        }
        memtrack::acquire();
        Self { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        std::mem::take(&mut self.data)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let v = self.grid.index(i, j, k);
        self.data[v] = value;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &ScalarField3D) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Plane `k` as an `nx * ny` frame.
    pub fn plane(&self, k: usize) -> SurfaceFrame {
        let n = self.grid.plane_len();
        SurfaceFrame {
            nx: self.grid.nx,
            ny: self.grid.ny,
            data: self.data[k * n..(k + 1) * n].to_vec(),
        }
    }

    pub(crate) fn ensure_grid(&self, other: &ScalarField3D) -> Result<()> {
        self.grid.ensure_same(&other.grid)
    }
}

impl Clone for ScalarField3D {
    fn clone(&self) -> Self {
        memtrack::acquire();
        Self {
            grid: self.grid,
            data: self.data.clone(),
        }
    }
}

impl Drop for ScalarField3D {
    fn drop(&mut self) {
        memtrack::release();
    }
}

impl PartialEq for ScalarField3D {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.data == other.data
    }
}

/// One `nx * ny` plane, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceFrame {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

impl SurfaceFrame {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            data: vec![0.0; nx * ny],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + self.nx * j]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn same_shape(&self, other: &SurfaceFrame) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanMode {
    #[default]
    Harmonic,
    Arithmetic,
}

pub const DEFAULT_EPS: f64 = 1e-12;

/// Effective diffusivity on every face.
///
/// `ax[v]` couples voxel `v` to its `+x` neighbour (wrapping at `nx - 1`), and
/// likewise for `ay`. `az[v]` couples `v` to `v + z`; it is zero on the top
/// plane, and the bottom face of plane 0 carries no entry at all.
#[derive(Debug, Clone)]
pub struct FaceConductances {
    pub grid: GridSpec,
    pub ax: Vec<f64>,
    pub ay: Vec<f64>,
    pub az: Vec<f64>,
    pub mean_mode: MeanMode,
    pub eps: f64,
}

#[inline]
pub(crate) fn face_mean(a: f64, b: f64, mode: MeanMode, eps: f64) -> f64 {
    match mode {
        MeanMode::Harmonic => 2.0 * a * b / (a + b + eps),
        MeanMode::Arithmetic => 0.5 * (a + b),
    }
}

/// Derivative of the face mean with respect to its first argument.
#[inline]
pub(crate) fn face_mean_da(a: f64, b: f64, mode: MeanMode, eps: f64) -> f64 {
    match mode {
        MeanMode::Harmonic => {
            let s = a + b + eps;
            2.0 * b * (b + eps) / (s * s)
        }
        MeanMode::Arithmetic => 0.5,
    }
}

#[inline]
pub(crate) fn wrap_next(i: usize, n: usize) -> usize {
    if i + 1 == n {
        0
    } else {
        i + 1
    }
}

#[inline]
pub(crate) fn wrap_prev(i: usize, n: usize) -> usize {
    if i == 0 {
        n - 1
    } else {
        i - 1
    }
}

pub fn build_face_conductances(
    alpha: &ScalarField3D,
    mode: MeanMode,
    eps: f64,
) -> Result<FaceConductances> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("eps = {eps} must be >= 0")));
    }
    if let Some(v) = alpha.data().iter().position(|&a| !(a > 0.0)) {
        return Err(Error::Domain(format!(
            "diffusivity must be positive, found {} at voxel {v}",
            alpha.data()[v]
        )));
    }
    let g = *alpha.grid();
    let a = alpha.data();
    let n = g.len();
    let mut ax = vec![0.0; n];
    let mut ay = vec![0.0; n];
    let mut az = vec![0.0; n];
    for k in 0..g.nz {
        for j in 0..g.ny {
            let jn = wrap_next(j, g.ny);
            for i in 0..g.nx {
                let v = g.index(i, j, k);
                let vx = g.index(wrap_next(i, g.nx), j, k);
                let vy = g.index(i, jn, k);
                ax[v] = face_mean(a[v], a[vx], mode, eps);
                ay[v] = face_mean(a[v], a[vy], mode, eps);
                if k + 1 < g.nz {
                    az[v] = face_mean(a[v], a[v + g.plane_len()], mode, eps);
                }
            }
        }
    }
    Ok(FaceConductances {
        grid: g,
        ax,
        ay,
        az,
        mean_mode: mode,
        eps,
    })
}
