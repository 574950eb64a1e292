//! Simulator validation and gradient oracles.
//!
//! Each check returns a [`ValidationReport`]; [`run_suite`] strings them together
//! and [`append_report_csv`] keeps a running log.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::backward_pass;
use crate::datagen::{initial_condition, SourceSpec};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, MeanMode, ScalarField3D, SurfaceFrame};
use crate::inversion::{
    alpha_from_logits, data_loss, evaluate_alpha, symmetry_loss, tv_regularizer, LossConfig,
    Observations,
};
use crate::neural_field::{
    field_backward, field_forward, xavier_init, Architecture, EncodingConfig, OutputHead,
};
use crate::solver::{simulate_explicit, simulate_implicit, LinearSolver, SolveConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub name: String,
    pub measured: f64,
    /// Target value, or the bound for one-sided checks.
    pub expected: f64,
    /// `|measured - expected| / |expected|` for two-sided checks.
    pub rel_err: Option<f64>,
    pub pass: bool,
    pub seconds: f64,
    pub note: String,
}

impl ValidationReport {
    fn target(name: &str, measured: f64, expected: f64, tol: f64, start: Instant) -> Self {
        let rel = (measured - expected).abs() / expected.abs();
        Self {
            name: name.into(),
            measured,
            expected,
            rel_err: Some(rel),
            pass: rel <= tol,
            seconds: start.elapsed().as_secs_f64(),
            note: String::new(),
        }
    }

    fn bound(name: &str, measured: f64, bound: f64, start: Instant) -> Self {
        Self {
            name: name.into(),
            measured,
            expected: bound,
            rel_err: None,
            pass: measured <= bound,
            seconds: start.elapsed().as_secs_f64(),
            note: String::new(),
        }
    }

    fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

/// Temperature-weighted lateral variances `(var_x, var_y)` about the frame centroid.
pub fn surface_moments(frame: &SurfaceFrame, grid: &GridSpec) -> (f64, f64) {
    let (mut m0, mut mx, mut my) = (0.0, 0.0, 0.0);
    for j in 0..frame.ny {
        for i in 0..frame.nx {
            let t = frame.get(i, j);
            let c = grid.voxel_center(i, j, 0);
            m0 += t;
            mx += t * c[0];
            my += t * c[1];
        }
    }
    let (cx, cy) = (mx / m0, my / m0);
    let (mut vx, mut vy) = (0.0, 0.0);
    for j in 0..frame.ny {
        for i in 0..frame.nx {
            let t = frame.get(i, j);
            let c = grid.voxel_center(i, j, 0);
            vx += t * (c[0] - cx).powi(2);
            vy += t * (c[1] - cy).powi(2);
        }
    }
    (vx / m0, vy / m0)
}

/// Ordinary least-squares `(slope, intercept, r2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::FitWindow(format!(
            "{} points, need at least 2",
            x.len().min(y.len())
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::FitWindow("all abscissae coincide".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope, intercept, r2))
}

/// Fraction of the first frames dropped before fitting (10 %).
pub fn default_burn_in(n_frames: usize) -> usize {
    n_frames / 10
}

/// Fits `d var / dt` of the surface Gaussian and compares it with `2 alpha`.
pub fn gaussian_variance_test(
    alpha_const: f64,
    grid: &GridSpec,
    src: &SourceSpec,
    cfg: &SolveConfig,
    burn_in: usize,
) -> Result<ValidationReport> {
    let start = Instant::now();
    let alpha = ScalarField3D::filled(*grid, alpha_const);
    let t0 = initial_condition(grid, src);
    let traj = simulate_implicit(&alpha, &t0, cfg)?;
    let frames = &traj.surface_frames;
    if burn_in + 2 > frames.len() {
        return Err(Error::FitWindow(format!(
            "burn-in {burn_in} leaves {} of {} frames",
            frames.len().saturating_sub(burn_in),
            frames.len()
        )));
    }
    let mut times = Vec::new();
    let mut vx = Vec::new();
    let mut vy = Vec::new();
    for (n, f) in frames.iter().enumerate().skip(burn_in) {
        let (a, b) = surface_moments(f, grid);
        times.push(n as f64 * cfg.dt);
        vx.push(a);
        vy.push(b);
    }
    let (sx, _, _) = linear_fit(&times, &vx)?;
    let (sy, _, _) = linear_fit(&times, &vy)?;
    let slope = 0.5 * (sx + sy);
    let name = format!("variance_slope_alpha_{alpha_const}");
    let mut report = ValidationReport::target(&name, slope, 2.0 * alpha_const, 0.01, start);
    let last = frames.last().expect("non-empty");
    let peak = last.max();
    let edge = edge_max(last);
    if edge > 1e-3 * peak {
        report.pass = false;
        report.note = format!("invalid: edge temperature {edge:.3e} exceeds 1e-3 of peak");
    }
    Ok(report)
}

fn edge_max(f: &SurfaceFrame) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for i in 0..f.nx {
        m = m.max(f.get(i, 0)).max(f.get(i, f.ny - 1));
    }
    for j in 0..f.ny {
        m = m.max(f.get(0, j)).max(f.get(f.nx - 1, j));
    }
    m
}

/// Slope linearity across several diffusivities: fit slope vs alpha, report `R^2`.
pub fn variance_linearity(
    alphas: &[f64],
    grid: &GridSpec,
    src: &SourceSpec,
    cfg: &SolveConfig,
) -> Result<ValidationReport> {
    let start = Instant::now();
    let burn = default_burn_in(cfg.n_steps + 1);
    let slopes = alphas
        .iter()
        .map(|&a| gaussian_variance_test(a, grid, src, cfg, burn).map(|r| r.measured))
        .collect::<Result<Vec<_>>>()?;
    let (_, _, r2) = linear_fit(alphas, &slopes)?;
    let mut r = ValidationReport::bound("variance_linearity_r2", 1.0 - r2, 1e-3, start);
    r.measured = r2;
    r.expected = 1.0;
    r.pass = r2 >= 0.999;
    Ok(r.with_note("pass if R^2 >= 0.999"))
}

/// Largest relative drift of the total heat over all frames.
pub fn energy_drift(states: &[ScalarField3D]) -> f64 {
    let e0 = states[0].sum();
    states
        .iter()
        .map(|s| ((s.sum() - e0) / e0).abs())
        .fold(0.0, f64::max)
}

/// Energy drift of both solvers with no source.
pub fn conservation_test(
    alpha: &ScalarField3D,
    t0: &ScalarField3D,
    cfg: &SolveConfig,
) -> Result<Vec<ValidationReport>> {
    if cfg.source.is_some() {
        return Err(Error::Domain("conservation needs S = 0".into()));
    }
    let start = Instant::now();
    let ex = simulate_explicit(alpha, t0, cfg)?;
    let explicit = ValidationReport::bound("conservation_explicit", energy_drift(&ex.states), 1e-10, start);
    drop(ex);
    let start = Instant::now();
    let im = simulate_implicit(alpha, t0, cfg)?;
    let implicit = ValidationReport::bound("conservation_implicit", energy_drift(&im.states), 1e-6, start);
    Ok(vec![explicit, implicit])
}

/// Largest surface difference between the two schemes, normalized by `max(T0)`.
pub fn scheme_discrepancy(alpha: &ScalarField3D, t0: &ScalarField3D, cfg: &SolveConfig) -> Result<f64> {
    let ex = simulate_explicit(alpha, t0, cfg)?;
    let im = simulate_implicit(alpha, t0, cfg)?;
    let scale = t0.max();
    let mut worst = 0.0f64;
    for (a, b) in ex.surface_frames.iter().zip(&im.surface_frames) {
        for (x, y) in a.data.iter().zip(&b.data) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst / scale)
}

/// Discrepancy at `dt` (bound 1e-3) and the ratio after halving `dt` (target 0.5, band [0.3, 0.7]).
pub fn scheme_cross_check(
    alpha: &ScalarField3D,
    t0: &ScalarField3D,
    cfg: &SolveConfig,
) -> Result<Vec<ValidationReport>> {
    let start = Instant::now();
    let d1 = scheme_discrepancy(alpha, t0, cfg)?;
    let first = ValidationReport::bound("cross_check_discrepancy", d1, 1e-3, start);
    let start = Instant::now();
    let half = SolveConfig {
        dt: cfg.dt / 2.0,
        n_steps: cfg.n_steps * 2,
        ..cfg.clone()
    };
    let d2 = scheme_discrepancy(alpha, t0, &half)?;
    let ratio = if d1 == 0.0 { 0.5 } else { d2 / d1 };
    let mut order = ValidationReport::target("cross_check_order", ratio, 0.5, 0.4, start);
    order.pass = (0.3..=0.7).contains(&ratio);
    Ok(vec![first, order.with_note("pass if ratio in [0.3, 0.7]")])
}

/// Heat that crosses below an insulating slab during a run, under a given face mean.
pub fn heat_through_slab(
    grid: &GridSpec,
    alpha_base: f64,
    alpha_slab: f64,
    slab_k: usize,
    mean_mode: MeanMode,
    cfg: &SolveConfig,
) -> Result<f64> {
    let alpha = ScalarField3D::from_fn(*grid, |_, _, k| if k == slab_k { alpha_slab } else { alpha_base });
    let t0 = ScalarField3D::from_fn(*grid, |_, _, k| if k > slab_k { 100.0 } else { 0.0 });
    let traj = simulate_implicit(
        &alpha,
        &t0,
        &SolveConfig {
            mean_mode,
            ..cfg.clone()
        },
    )?;
    let below = |t: &ScalarField3D| t.data()[..slab_k * grid.plane_len()].iter().sum::<f64>();
    Ok(below(traj.states.last().expect("non-empty")) - below(&t0))
}

/// Harmonic faces must pass strictly less heat through a low-diffusivity slab than arithmetic ones.
pub fn harmonic_throttling(contrast: f64) -> Result<ValidationReport> {
    let start = Instant::now();
    let grid = GridSpec::new(8, 8, 16, 4.0, 4.0, 1.0)?;
    let cfg = SolveConfig {
        n_steps: 40,
        solver: LinearSolver::Jacobi { iters: 200 },
        ..SolveConfig::default()
    };
    let base = 0.15;
    let h = heat_through_slab(&grid, base, base / contrast, 8, MeanMode::Harmonic, &cfg)?;
    let a = heat_through_slab(&grid, base, base / contrast, 8, MeanMode::Arithmetic, &cfg)?;
    let ratio = h / a;
    let mut r = ValidationReport::bound(&format!("harmonic_throttling_{contrast}to1"), ratio, 1.0, start);
    r.pass = h < a && h > 0.0;
    Ok(r.with_note("harmonic / arithmetic heat below the slab; pass if strictly < 1"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    AdjointAlpha,
    AdjointT0,
    MlpParams,
    Tv,
    Symmetry,
    GridLogits,
}

impl GradTarget {
    pub const ALL: [GradTarget; 6] = [
        GradTarget::AdjointAlpha,
        GradTarget::AdjointT0,
        GradTarget::MlpParams,
        GradTarget::Tv,
        GradTarget::Symmetry,
        GradTarget::GridLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::AdjointAlpha => "adjoint_alpha",
            GradTarget::AdjointT0 => "adjoint_T0",
            GradTarget::MlpParams => "mlp_params",
            GradTarget::Tv => "tv",
            GradTarget::Symmetry => "symmetry",
            GradTarget::GridLogits => "grid_logits",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn tolerance(self) -> f64 {
        match self {
            GradTarget::AdjointAlpha | GradTarget::AdjointT0 | GradTarget::GridLogits => 1e-4,
            GradTarget::MlpParams => 1e-5,
            GradTarget::Tv | GradTarget::Symmetry => 1e-7,
        }
    }
}

pub const FD_STEP: f64 = 1e-6;

/// `max_i |a_i - f_i| / max(|f_i|, 1e-3 max_j |f_j|)`.
pub fn max_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / f.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x` along every coordinate.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let p = f(&probe)?;
        probe[i] = x[i] - h;
        let m = f(&probe)?;
        probe[i] = x[i];
        out.push((p - m) / (2.0 * h));
    }
    Ok(out)
}

/// Random 8x8x4 instance with `M = 5` and surface observations from a different field.
pub struct AdjointInstance {
    pub alpha: ScalarField3D,
    pub obs: Observations,
}

pub fn adjoint_instance(seed: u64) -> Result<AdjointInstance> {
    let g = GridSpec::new(8, 8, 4, 4.0, 4.0, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_field = |lo: f64, hi: f64| ScalarField3D::from_fn(g, |_, _, _| rng.random_range(lo..hi));
    let alpha = rand_field(0.003, 0.25);
    let other = rand_field(0.003, 0.25);
    let t0 = rand_field(0.0, 10.0);
    let solve = SolveConfig {
        n_steps: 5,
        dt: 0.05,
        solver: LinearSolver::Direct,
        ..SolveConfig::default()
    };
    let frames = simulate_implicit(&other, &t0, &solve)?.surface_frames[1..].to_vec();
    Ok(AdjointInstance {
        alpha,
        obs: Observations { frames, t0, solve },
    })
}

fn misfit(alpha: &ScalarField3D, t0: &ScalarField3D, obs: &Observations, mask: &SurfaceFrame) -> Result<f64> {
    let traj = simulate_implicit(alpha, t0, &obs.solve)?;
    Ok(data_loss(&traj.surface_frames[1..], &obs.frames, mask, obs.grid())?.0)
}

/// Analytic vs central-difference gradient for one target; returns the max relative error.
pub fn gradient_error(target: GradTarget, seed: u64) -> Result<f64> {
    match target {
        GradTarget::AdjointAlpha | GradTarget::AdjointT0 => {
            let inst = adjoint_instance(seed)?;
            let g = *inst.obs.grid();
            let mask = LossConfig::new(g.nx, g.ny).mask;
            let traj = simulate_implicit(&inst.alpha, &inst.obs.t0, &inst.obs.solve)?;
            let (_, dl) = data_loss(&traj.surface_frames[1..], &inst.obs.frames, &mask, &g)?;
            let grads = backward_pass(&inst.alpha, &traj, &dl, &inst.obs.solve)?;
            if target == GradTarget::AdjointAlpha {
                let fd = central_differences(inst.alpha.data(), FD_STEP, |x| {
                    misfit(&ScalarField3D::from_vec(g, x.to_vec())?, &inst.obs.t0, &inst.obs, &mask)
                })?;
                Ok(max_relative_error(grads.alpha.data(), &fd))
            } else {
                let fd = central_differences(inst.obs.t0.data(), FD_STEP, |x| {
                    misfit(&inst.alpha, &ScalarField3D::from_vec(g, x.to_vec())?, &inst.obs, &mask)
                })?;
                Ok(max_relative_error(grads.t0.data(), &fd))
            }
        }
        GradTarget::MlpParams => {
            let enc = EncodingConfig {
                num_freqs: 2,
                include_raw: true,
                anneal_beta: 1.5,
            };
            let arch = Architecture {
                in_dim: enc.encoded_dim(),
                width: 8,
                depth: 3,
                skip_layers: vec![2],
                head: OutputHead::ScaledSigmoid,
                alpha_min: 0.003,
                alpha_max: 0.25,
            };
            let mut theta = xavier_init(&arch, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            // spread the parameters so most ReLUs are away from their kinks
            let flat: Vec<f64> = theta
                .to_flat()
                .iter()
                .map(|w| 2.0 * w + rng.random_range(-0.1..0.1))
                .collect();
            theta.set_flat(&flat)?;
            let g = GridSpec::new(4, 4, 2, 10.0, 10.0, 1.0)?;
            let up = ScalarField3D::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0));
            let (_, tape) = field_forward(&theta, &g, &enc)?;
            let analytic = field_backward(&theta, &tape, &up)?.to_flat();
            let mut probe = theta.clone();
            let fd = central_differences(&flat, FD_STEP, |x| {
                probe.set_flat(x)?;
                Ok(field_forward(&probe, &g, &enc)?.0.dot(&up))
            })?;
            Ok(max_relative_error(&analytic, &fd))
        }
        GradTarget::Tv | GradTarget::Symmetry => {
            let g = GridSpec::new(4, 4, 2, 1.0, 1.0, 1.0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = ScalarField3D::from_fn(g, |_, _, _| rng.random_range(0.003..0.25));
            let f = if target == GradTarget::Tv {
                tv_regularizer
            } else {
                symmetry_loss
            };
            let (_, grad) = f(&a);
            let fd = central_differences(a.data(), FD_STEP, |x| {
                Ok(f(&ScalarField3D::from_vec(g, x.to_vec())?).0)
            })?;
            Ok(max_relative_error(grad.data(), &fd))
        }
        GradTarget::GridLogits => {
            let inst = adjoint_instance(seed)?;
            let g = *inst.obs.grid();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10917);
            let logits = ScalarField3D::from_fn(g, |_, _, _| rng.random_range(-2.0..2.0));
            let loss = LossConfig::new(g.nx, g.ny);
            let eval = |l: &ScalarField3D| {
                let (a, d) = alpha_from_logits(l, 0.003, 0.25);
                evaluate_alpha(&a, &inst.obs, &loss, 10.0).map(|e| (e, d))
            };
            let (ev, dadl) = eval(&logits)?;
            let analytic: Vec<f64> = ev
                .grad_alpha
                .data()
                .iter()
                .zip(dadl.data())
                .map(|(a, b)| a * b)
                .collect();
            let fd = central_differences(logits.data(), FD_STEP, |x| {
                Ok(eval(&ScalarField3D::from_vec(g, x.to_vec())?)?.0.total)
            })?;
            Ok(max_relative_error(&analytic, &fd))
        }
    }
}

pub fn fd_gradient_harness(target: GradTarget, seed: u64) -> Result<ValidationReport> {
    let start = Instant::now();
    let err = gradient_error(target, seed)?;
    Ok(ValidationReport::bound(
        &format!("gradcheck_{}_seed{seed}", target.name()),
        err,
        target.tolerance(),
        start,
    ))
}

/// Grid, source and solver used by the variance checks.
pub fn variance_setup() -> (GridSpec, SourceSpec, SolveConfig) {
    let grid = GridSpec::new(128, 128, 8, 10.0, 10.0, 1.0).expect("valid");
    let src = SourceSpec {
        center: [5.0, 5.0, 0.8],
        intensity: 100.0,
        radius: 0.5,
    };
    let cfg = SolveConfig {
        dt: 0.05,
        n_steps: 100,
        ..SolveConfig::default()
    };
    (grid, src, cfg)
}

/// Grid, smooth initial state and solver used by the conservation and scheme checks.
pub fn scheme_setup() -> (ScalarField3D, ScalarField3D, SolveConfig) {
    let grid = GridSpec::new(64, 64, 16, 10.0, 10.0, 1.0).expect("valid");
    let alpha = ScalarField3D::filled(grid, 0.1);
    let src = SourceSpec {
        radius: 1.5,
        ..SourceSpec::default()
    };
    let t0 = initial_condition(&grid, &src);
    let cfg = SolveConfig {
        dt: 0.05,
        n_steps: 100,
        solver: LinearSolver::Jacobi { iters: 200 },
        mean_mode: MeanMode::Harmonic,
        ..SolveConfig::default()
    };
    (alpha, t0, cfg)
}

/// Runs every check. `quick` shrinks the scheme/conservation problems for smoke runs.
pub fn run_suite(quick: bool) -> Result<Vec<ValidationReport>> {
    let mut out = Vec::new();
    let (grid, src, mut vcfg) = variance_setup();
    if quick {
        vcfg.n_steps = 40;
    }
    let burn = default_burn_in(vcfg.n_steps + 1);
    out.push(gaussian_variance_test(0.1, &grid, &src, &vcfg, burn)?);
    if !quick {
        out.push(variance_linearity(&[0.05, 0.1, 0.2], &grid, &src, &vcfg)?);
    }

    let (alpha, t0, mut scfg) = scheme_setup();
    if quick {
        scfg.n_steps = 20;
    }
    out.extend(conservation_test(&alpha, &t0, &scfg)?);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let hetero = ScalarField3D::from_fn(*alpha.grid(), |_, _, _| rng.random_range(0.003..0.25));
    let hetero_cfg = SolveConfig {
        n_steps: 20,
        ..scfg.clone()
    };
    for mut r in conservation_test(&hetero, &t0, &hetero_cfg)? {
        r.name.push_str("_heterogeneous");
        out.push(r);
    }
    out.extend(scheme_cross_check(&alpha, &t0, &scfg)?);
    for contrast in [5.0, 20.0] {
        out.push(harmonic_throttling(contrast)?);
    }

    for target in GradTarget::ALL {
        out.push(fd_gradient_harness(target, 0)?);
    }
    Ok(out)
}

pub const REPORT_HEADER: &str = "name,measured,expected,rel_err,pass,seconds";

pub fn report_csv_rows(reports: &[ValidationReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let rel = r.rel_err.map(|e| format!("{e:e}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{:e},{:e},{},{},{:.3}",
            r.name, r.measured, r.expected, rel, r.pass, r.seconds
        );
    }
    s
}

/// Appends rows, writing the header only when the file is new.
pub fn append_report_csv(reports: &[ValidationReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(REPORT_HEADER);
        text.push('\n');
    }
    text.push_str(&report_csv_rows(reports));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Fixed-width table for terminals.
pub fn format_table(reports: &[ValidationReport]) -> String {
    let mut s = format!(
        "{:<40} {:>12} {:>12} {:>10} {:>5} {:>8}\n",
        "name", "measured", "expected", "rel_err", "pass", "seconds"
    );
    for r in reports {
        let rel = r.rel_err.map(|e| format!("{e:.2e}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<40} {:>12.4e} {:>12.4e} {:>10} {:>5} {:>8.2}{}",
            r.name,
            r.measured,
            r.expected,
            rel,
            if r.pass { "ok" } else { "FAIL" },
            r.seconds,
            if r.note.is_empty() {
                String::new()
            } else {
                format!("  {}", r.note)
            }
        );
    }
    s
}
