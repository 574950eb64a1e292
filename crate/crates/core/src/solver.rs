//! Forward heat-diffusion solvers.
//!
//! Two independent time integrators share one spatial discretization
//! (the face-conductance stencil from [`crate::grid`]):
//!
//! * implicit Euler, `(I - dt L) T^{n+1} = T^n + dt S`, solved with a fixed
//!   number of Jacobi sweeps (or a dense LU on tiny grids) - the reconstruction path;
//! * forward Euler with CFL-adaptive substepping - the data-generation path.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{
    build_face_conductances, wrap_next, wrap_prev, FaceConductances, GridSpec, MeanMode,
    ScalarField3D, SurfaceFrame, DEFAULT_EPS,
};

/// Per-face weights with the neighbour-sum kernel shared by every stencil operation.
#[derive(Debug, Clone)]
pub(crate) struct Stencil {
    pub(crate) grid: GridSpec,
    pub(crate) wx: Vec<f64>,
    pub(crate) wy: Vec<f64>,
    pub(crate) wz: Vec<f64>,
    zero_row: Vec<f64>,
}

impl Stencil {
    /// Weights `scale * abar / d^2` per face.
    pub(crate) fn from_faces(faces: &FaceConductances, scale: f64) -> Self {
        let g = faces.grid;
        let (cx, cy, cz) = (
            scale / (g.dx() * g.dx()),
            scale / (g.dy() * g.dy()),
            scale / (g.dz() * g.dz()),
        );
        Self {
            grid: g,
            wx: faces.ax.iter().map(|a| a * cx).collect(),
            wy: faces.ay.iter().map(|a| a * cy).collect(),
            wz: faces.az.iter().map(|a| a * cz).collect(),
            zero_row: vec![0.0; g.nx],
        }
    }

    /// Flux of every voxel in row `(j, k)` into `out`, summed in the same
    /// order as [`Stencil::for_each`]. Missing z neighbours enter with zero
    /// weight, which leaves the sum unchanged.
    #[inline]
    pub(crate) fn row_flux(&self, x: &[f64], j: usize, k: usize, out: &mut [f64]) {
        let g = &self.grid;
        let (nx, ny, nz) = (g.nx, g.ny, g.nz);
        let plane = nx * ny;
        let row = nx * (j + ny * k);
        let row_m = nx * (wrap_prev(j, ny) + ny * k);
        let row_p = nx * (wrap_next(j, ny) + ny * k);
        let xr = &x[row..row + nx];
        let xm = &x[row_m..row_m + nx];
        let xp = &x[row_p..row_p + nx];
        let wxr = &self.wx[row..row + nx];
        let wyr = &self.wy[row..row + nx];
        let wym = &self.wy[row_m..row_m + nx];
        let (wzu, xu) = if k + 1 < nz {
            (&self.wz[row..row + nx], &x[row + plane..row + plane + nx])
        } else {
            (&self.zero_row[..], xr)
        };
        let (wzd, xd) = if k > 0 {
            (
                &self.wz[row - plane..row - plane + nx],
                &x[row - plane..row - plane + nx],
            )
        } else {
            (&self.zero_row[..], xr)
        };
        let out = &mut out[..nx];
        let cell = |i: usize, im: usize, ip: usize| {
            let xv = xr[i];
            wxr[i] * (xr[ip] - xv)
                + wxr[im] * (xr[im] - xv)
                + wyr[i] * (xp[i] - xv)
                + wym[i] * (xm[i] - xv)
                + wzu[i] * (xu[i] - xv)
                + wzd[i] * (xd[i] - xv)
        };
        if nx < 3 {
            for i in 0..nx {
                out[i] = cell(i, wrap_prev(i, nx), wrap_next(i, nx));
            }
            return;
        }
        out[0] = cell(0, nx - 1, 1);
        out[nx - 1] = cell(nx - 1, nx - 2, 0);
        let n = nx - 2;
        let (c, e, w) = (&xr[1..1 + n], &xr[2..2 + n], &xr[..n]);
        let (wxc, wxw) = (&wxr[1..1 + n], &wxr[..n]);
        let (wyc, wymc) = (&wyr[1..1 + n], &wym[1..1 + n]);
        let (xpc, xmc) = (&xp[1..1 + n], &xm[1..1 + n]);
        let (wzuc, xuc) = (&wzu[1..1 + n], &xu[1..1 + n]);
        let (wzdc, xdc) = (&wzd[1..1 + n], &xd[1..1 + n]);
        let o = &mut out[1..1 + n];
        for i in 0..n {
            let xv = c[i];
            o[i] = wxc[i] * (e[i] - xv)
                + wxw[i] * (w[i] - xv)
                + wyc[i] * (xpc[i] - xv)
                + wymc[i] * (xmc[i] - xv)
                + wzuc[i] * (xuc[i] - xv)
                + wzdc[i] * (xdc[i] - xv);
        }
    }

    /// Calls `f(v, weight_sum, flux)` for every voxel in index order, where
    /// `flux = sum_faces w (x_nbr - x_v)`. Differences are formed first so a
    /// constant state has exactly zero flux.
    #[inline]
    pub(crate) fn for_each(&self, x: &[f64], mut f: impl FnMut(usize, f64, f64)) {
        let g = &self.grid;
        let (nx, ny, nz) = (g.nx, g.ny, g.nz);
        let plane = nx * ny;
        for k in 0..nz {
            for j in 0..ny {
                let row = nx * (j + ny * k);
                let row_m = nx * (wrap_prev(j, ny) + ny * k);
                let row_p = nx * (wrap_next(j, ny) + ny * k);
                let xr = &x[row..row + nx];
                let xm = &x[row_m..row_m + nx];
                let xp = &x[row_p..row_p + nx];
                let wxr = &self.wx[row..row + nx];
                let wyr = &self.wy[row..row + nx];
                let wym = &self.wy[row_m..row_m + nx];
                let up = (k + 1 < nz).then(|| (&self.wz[row..row + nx], &x[row + plane..row + plane + nx]));
                let down = (k > 0).then(|| {
                    (
                        &self.wz[row - plane..row - plane + nx],
                        &x[row - plane..row - plane + nx],
                    )
                });
                let mut cell = |i: usize, im: usize, ip: usize| {
                    let xv = xr[i];
                    let mut ws = wxr[i] + wxr[im] + wyr[i] + wym[i];
                    let mut s = wxr[i] * (xr[ip] - xv)
                        + wxr[im] * (xr[im] - xv)
                        + wyr[i] * (xp[i] - xv)
                        + wym[i] * (xm[i] - xv);
                    if let Some((wz, xu)) = up {
                        ws += wz[i];
                        s += wz[i] * (xu[i] - xv);
                    }
                    if let Some((wz, xd)) = down {
                        ws += wz[i];
                        s += wz[i] * (xd[i] - xv);
                    }
                    f(row + i, ws, s);
                };
                if nx == 1 {
                    cell(0, 0, 0);
                    continue;
                }
                cell(0, nx - 1, 1);
                for i in 1..nx - 1 {
                    cell(i, i - 1, i + 1);
                }
                cell(nx - 1, nx - 2, 0);
            }
        }
    }
}

pub fn apply_laplacian(faces: &FaceConductances, t: &ScalarField3D) -> Result<ScalarField3D> {
    faces.grid.ensure_same(t.grid())?;
    let st = Stencil::from_faces(faces, 1.0);
    let mut out = ScalarField3D::zeros(faces.grid);
    laplacian_into(&st, t.data(), out.data_mut());
    Ok(out)
}

fn laplacian_into(st: &Stencil, x: &[f64], out: &mut [f64]) {
    st.for_each(x, |v, _, flux| out[v] = flux);
}

/// `A = I - dt L(alpha)`, symmetric and strictly diagonally dominant.
#[derive(Debug, Clone)]
pub struct SystemOperator {
    pub(crate) stencil: Stencil,
    pub(crate) diag: Vec<f64>,
    inv_diag: Vec<f64>,
    pub dt: f64,
}

impl SystemOperator {
    pub fn new(faces: &FaceConductances, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Domain(format!("dt = {dt} must be positive")));
        }
        let stencil = Stencil::from_faces(faces, dt);
        let mut diag = vec![0.0; stencil.grid.len()];
        // weights only; the state argument is irrelevant
        let zeros = vec![0.0; stencil.grid.len()];
        stencil.for_each(&zeros, |v, ws, _| diag[v] = 1.0 + ws);
        let inv_diag = diag.iter().map(|d| 1.0 / d).collect();
        Ok(Self {
            stencil,
            diag,
            inv_diag,
            dt,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.stencil.grid
    }

    pub fn apply(&self, x: &ScalarField3D) -> Result<ScalarField3D> {
        self.grid().ensure_same(x.grid())?;
        let mut out = ScalarField3D::zeros(*self.grid());
        let xd = x.data();
        let od = out.data_mut();
        self.stencil
            .for_each(xd, |v, _, flux| od[v] = xd[v] - flux);
        Ok(out)
    }

    /// `max_v |(A x - b)_v|`.
    pub fn residual_inf(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut r: f64 = 0.0;
        self.stencil.for_each(x, |v, _, flux| {
            r = r.max((x[v] - flux - b[v]).abs());
        });
        r
    }

    /// Exactly `iters` Jacobi sweeps from `x0`, written in correction form
    /// `x + (b - A x) / D`. Uses one scratch field besides the result.
    pub fn jacobi(&self, b: &ScalarField3D, x0: &ScalarField3D, iters: usize) -> ScalarField3D {
        let mut x = x0.clone();
        let mut next = ScalarField3D::zeros(*self.grid());
        let bd = b.data();
        let g = *self.grid();
        let nx = g.nx;
        let mut flux = vec![0.0; nx];
        for _ in 0..iters {
            {
                let xd = x.data();
                let nd = next.data_mut();
                for k in 0..g.nz {
                    for j in 0..g.ny {
                        self.stencil.row_flux(xd, j, k, &mut flux);
                        let r = nx * (j + g.ny * k);
                        let (xr, br, ir) = (&xd[r..r + nx], &bd[r..r + nx], &self.inv_diag[r..r + nx]);
                        let nr = &mut nd[r..r + nx];
                        for i in 0..nx {
                            nr[i] = xr[i] + (br[i] - xr[i] + flux[i]) * ir[i];
                        }
                    }
                }
            }
            std::mem::swap(&mut x, &mut next);
        }
        x
    }

    /// Dense assembly, for direct solves on small grids and for tests.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let g = self.grid();
        let n = g.len();
        let mut a = DMatrix::<f64>::zeros(n, n);
        let st = &self.stencil;
        let plane = g.plane_len();
        for v in 0..n {
            a[(v, v)] = self.diag[v];
            let (i, j, k) = g.coords(v);
            let vx = g.index(wrap_next(i, g.nx), j, k);
            let vy = g.index(i, wrap_next(j, g.ny), k);
            a[(v, vx)] -= st.wx[v];
            a[(vx, v)] -= st.wx[v];
            a[(v, vy)] -= st.wy[v];
            a[(vy, v)] -= st.wy[v];
            if k + 1 < g.nz {
                a[(v, v + plane)] -= st.wz[v];
                a[(v + plane, v)] -= st.wz[v];
            }
        }
        a
    }
}

/// How each implicit linear system is solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearSolver {
    /// Fixed sweep count, warm-started.
    Jacobi { iters: usize },
    /// Dense LU; only sensible for a few thousand voxels at most.
    Direct,
}

impl Default for LinearSolver {
    fn default() -> Self {
        LinearSolver::Jacobi { iters: 50 }
    }
}

/// A source term `S` added on the right-hand side of each step.
#[derive(Debug, Clone)]
pub enum Source {
    Constant(ScalarField3D),
    /// One field per recorded step `n = 1..=M`.
    PerStep(Vec<ScalarField3D>),
}

impl Source {
    fn at(&self, step: usize) -> &ScalarField3D {
        match self {
            Source::Constant(s) => s,
            Source::PerStep(v) => &v[step - 1],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub solver: LinearSolver,
    pub source: Option<Source>,
    pub mean_mode: MeanMode,
    pub eps: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            n_steps: 100,
            solver: LinearSolver::default(),
            source: None,
            mean_mode: MeanMode::Harmonic,
            eps: DEFAULT_EPS,
        }
    }
}

impl SolveConfig {
    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Domain(format!("dt = {} must be positive", self.dt)));
        }
        if let LinearSolver::Jacobi { iters: 0 } = self.solver {
            return Err(Error::Domain("jacobi_iters must be >= 1".into()));
        }
        match &self.source {
            Some(Source::Constant(s)) => grid.ensure_same(s.grid())?,
            Some(Source::PerStep(v)) => {
                if v.len() != self.n_steps {
                    return Err(Error::Shape(format!(
                        "{} source fields for {} steps",
                        v.len(),
                        self.n_steps
                    )));
                }
                for s in v {
                    grid.ensure_same(s.grid())?;
                }
            }
            None => {}
        }
        Ok(())
    }

    fn source_at(&self, step: usize) -> Option<&ScalarField3D> {
        self.source.as_ref().map(|s| s.at(step))
    }
}

/// Recorded states `T^0..=T^M` and their observation-plane frames.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<ScalarField3D>,
    pub surface_frames: Vec<SurfaceFrame>,
    /// `||A T^{n+1} - b||_inf` per implicit step; empty for explicit runs.
    pub residuals: Vec<f64>,
}

impl Trajectory {
    fn start(t0: &ScalarField3D) -> Self {
        Self {
            states: vec![t0.clone()],
            surface_frames: vec![extract_surface(t0)],
            residuals: Vec::new(),
        }
    }

    fn push(&mut self, state: ScalarField3D) {
        self.surface_frames.push(extract_surface(&state));
        self.states.push(state);
    }

    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Observation plane: the top plane `k = nz - 1`, nearest the heated face.
pub fn extract_surface(t: &ScalarField3D) -> SurfaceFrame {
    t.plane(t.grid().nz - 1)
}

#[derive(Debug)]
pub struct StepOutcome {
    pub state: ScalarField3D,
    pub residual: f64,
}

fn rhs(t_n: &ScalarField3D, dt: f64, source: Option<&ScalarField3D>) -> ScalarField3D {
    let mut b = t_n.clone();
    if let Some(s) = source {
        for (bv, sv) in b.data_mut().iter_mut().zip(s.data()) {
            *bv += dt * sv;
        }
    }
    b
}

/// One implicit Euler step with `jacobi_iters` sweeps warm-started at `T^n`.
pub fn implicit_step(
    faces: &FaceConductances,
    t_n: &ScalarField3D,
    dt: f64,
    source: Option<&ScalarField3D>,
    jacobi_iters: usize,
) -> Result<StepOutcome> {
    faces.grid.ensure_same(t_n.grid())?;
    if let Some(s) = source {
        faces.grid.ensure_same(s.grid())?;
    }
    let op = SystemOperator::new(faces, dt)?;
    let b = rhs(t_n, dt, source);
    let state = op.jacobi(&b, t_n, jacobi_iters);
    let residual = op.residual_inf(state.data(), b.data());
    Ok(StepOutcome { state, residual })
}

/// A factored or iterative solver for `A x = b`, reused across all steps of a run.
pub(crate) enum PreparedSolver {
    Jacobi(SystemOperator, usize),
    Direct(SystemOperator, nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl PreparedSolver {
    pub(crate) fn new(faces: &FaceConductances, dt: f64, solver: LinearSolver) -> Result<Self> {
        let op = SystemOperator::new(faces, dt)?;
        Ok(match solver {
            LinearSolver::Jacobi { iters } => PreparedSolver::Jacobi(op, iters),
            LinearSolver::Direct => {
                let lu = op.to_dense().lu();
                PreparedSolver::Direct(op, lu)
            }
        })
    }

    pub(crate) fn operator(&self) -> &SystemOperator {
        match self {
            PreparedSolver::Jacobi(op, _) | PreparedSolver::Direct(op, _) => op,
        }
    }

    pub(crate) fn solve(&self, b: &ScalarField3D, warm: &ScalarField3D) -> Result<ScalarField3D> {
        match self {
            PreparedSolver::Jacobi(op, iters) => Ok(op.jacobi(b, warm, *iters)),
            PreparedSolver::Direct(_, lu) => {
                let rhs = DVector::from_column_slice(b.data());
                let x = lu
                    .solve(&rhs)
                    .ok_or_else(|| Error::Domain("singular system matrix".into()))?;
                ScalarField3D::from_vec(*b.grid(), x.as_slice().to_vec())
            }
        }
    }
}

pub fn simulate_implicit(
    alpha: &ScalarField3D,
    t0: &ScalarField3D,
    cfg: &SolveConfig,
) -> Result<Trajectory> {
    let faces = build_face_conductances(alpha, cfg.mean_mode, cfg.eps)?;
    simulate_implicit_with_faces(&faces, t0, cfg)
}

pub fn simulate_implicit_with_faces(
    faces: &FaceConductances,
    t0: &ScalarField3D,
    cfg: &SolveConfig,
) -> Result<Trajectory> {
    faces.grid.ensure_same(t0.grid())?;
    cfg.validate(&faces.grid)?;
    let solver = PreparedSolver::new(faces, cfg.dt, cfg.solver)?;
    let mut traj = Trajectory::start(t0);
    for n in 1..=cfg.n_steps {
        let prev = traj.states.last().expect("non-empty");
        let b = rhs(prev, cfg.dt, cfg.source_at(n));
        let next = solver.solve(&b, prev)?;
        traj.residuals
            .push(solver.operator().residual_inf(next.data(), b.data()));
        traj.push(next);
    }
    Ok(traj)
}

/// Largest stable forward-Euler step, `dmin^2 / (2 d alpha_max)` with `d = 3`.
pub fn cfl_stable_dt(alpha_max: f64, grid: &GridSpec) -> f64 {
    let h = grid.min_spacing();
    h * h / (2.0 * 3.0 * alpha_max)
}

/// Substeps per recorded frame: `max(10, ceil(dt / dt_stable * 2))`.
pub fn substep_count(dt: f64, dt_stable: f64) -> usize {
    ((dt / dt_stable * 2.0).ceil() as usize).max(10)
}

pub fn simulate_explicit(
    alpha: &ScalarField3D,
    t0: &ScalarField3D,
    cfg: &SolveConfig,
) -> Result<Trajectory> {
    alpha.ensure_grid(t0)?;
    cfg.validate(alpha.grid())?;
    let faces = build_face_conductances(alpha, cfg.mean_mode, cfg.eps)?;
    let n_sub = substep_count(cfg.dt, cfg_stable_dt(alpha));
    let h = cfg.dt / n_sub as f64;
    let st = Stencil::from_faces(&faces, 1.0);
    let mut traj = Trajectory::start(t0);
    let mut t = t0.clone();
    let mut lap = ScalarField3D::zeros(*alpha.grid());
    for frame in 1..=cfg.n_steps {
        let src = cfg.source_at(frame);
        for sub in 0..n_sub {
            laplacian_into(&st, t.data(), lap.data_mut());
            let td = t.data_mut();
            let mut finite = true;
            match src {
                Some(s) => {
                    for ((x, l), sv) in td.iter_mut().zip(lap.data()).zip(s.data()) {
                        *x += h * l + h * sv;
                        finite &= x.is_finite();
                    }
                }
                None => {
                    for (x, l) in td.iter_mut().zip(lap.data()) {
                        *x += h * l;
                        finite &= x.is_finite();
                    }
                }
            }
            if !finite {
                return Err(Error::Instability {
                    frame,
                    substep: sub,
                });
            }
        }
        traj.push(t.clone());
    }
    Ok(traj)
}

fn cfg_stable_dt(alpha: &ScalarField3D) -> f64 {
    cfl_stable_dt(alpha.max(), alpha.grid())
}

/// Number of forward-Euler substeps `simulate_explicit` will take per frame.
pub fn explicit_substeps(alpha: &ScalarField3D, dt: f64) -> usize {
    substep_count(dt, cfg_stable_dt(alpha))
}
