//! Adjoint-state gradients of trajectory losses.
//!
//! For `A(alpha) T^n = T^{n-1} + dt S^n` and `L = sum_n l(T^n)`, the adjoint
//! recurrence runs backward from `lambda^{M+1} = 0`:
//!
//! ```text
//! A^T lambda^n = dl/dT^n + lambda^{n+1}
//! dL/dalpha    = dt * sum_n d(lambda^n . L(alpha) T^n)/dalpha
//! dL/dT^0      = lambda^1
//! ```
//!
//! `A` is symmetric, so the forward solver machinery is reused unchanged.
//! Gradients are those of the exact discrete solution; with Jacobi solves they
//! carry an error bounded by the solver residual.

use crate::error::{Error, Result};
use crate::grid::{
    build_face_conductances, face_mean_da, wrap_next, FaceConductances, ScalarField3D,
};
use crate::memtrack;
use crate::solver::{PreparedSolver, SolveConfig, SystemOperator, Trajectory};

/// Running state of the backward sweep.
#[derive(Debug)]
pub struct AdjointState {
    /// `lambda^{n+1}` before a step, `lambda^n` after it.
    pub lam: ScalarField3D,
    pub grad_alpha_accum: ScalarField3D,
}

impl AdjointState {
    /// Terminal condition `lambda^{M+1} = 0`.
    pub fn terminal(alpha: &ScalarField3D) -> Self {
        Self {
            lam: ScalarField3D::zeros(*alpha.grid()),
            grad_alpha_accum: ScalarField3D::zeros(*alpha.grid()),
        }
    }

    fn step(
        &mut self,
        solver: &PreparedSolver,
        alpha: &ScalarField3D,
        faces: &FaceConductances,
        t_n: &ScalarField3D,
        dldt_n: &ScalarField3D,
    ) -> Result<()> {
        let mut rhs = dldt_n.clone();
        for (r, l) in rhs.data_mut().iter_mut().zip(self.lam.data()) {
            *r += l;
        }
        self.lam = solver.solve(&rhs, &self.lam)?;
        let dt = solver.operator().dt;
        vjp_accumulate(
            alpha,
            faces,
            t_n,
            &self.lam,
            dt,
            self.grad_alpha_accum.data_mut(),
        );
        Ok(())
    }
}

/// Solves `A^T lambda^n = dl/dT^n + lambda^{n+1}` with Jacobi warm-started at `lambda^{n+1}`.
pub fn adjoint_step(
    faces: &FaceConductances,
    lam_next: &ScalarField3D,
    dldt_n: &ScalarField3D,
    dt: f64,
    jacobi_iters: usize,
) -> Result<ScalarField3D> {
    faces.grid.ensure_same(lam_next.grid())?;
    faces.grid.ensure_same(dldt_n.grid())?;
    let op = SystemOperator::new(faces, dt)?;
    let mut rhs = dldt_n.clone();
    for (r, l) in rhs.data_mut().iter_mut().zip(lam_next.data()) {
        *r += l;
    }
    Ok(op.jacobi(&rhs, lam_next, jacobi_iters))
}

/// `d(lambda . L(alpha) T)/dalpha`, one value per voxel.
pub fn laplacian_vjp_alpha(
    alpha: &ScalarField3D,
    faces: &FaceConductances,
    t_n: &ScalarField3D,
    lam_n: &ScalarField3D,
) -> Result<ScalarField3D> {
    faces.grid.ensure_same(alpha.grid())?;
    faces.grid.ensure_same(t_n.grid())?;
    faces.grid.ensure_same(lam_n.grid())?;
    let mut out = ScalarField3D::zeros(faces.grid);
    vjp_accumulate(alpha, faces, t_n, lam_n, 1.0, out.data_mut());
    Ok(out)
}

/// Adds `scale * d(lambda . L(alpha) T)/dalpha` into `out`.
///
/// Each face `(v, w)` with spacing `d` contributes
/// `s = (lam_v - lam_w)(T_w - T_v) / d^2` times the partial of its mean.
fn vjp_accumulate(
    alpha: &ScalarField3D,
    faces: &FaceConductances,
    t: &ScalarField3D,
    lam: &ScalarField3D,
    scale: f64,
    out: &mut [f64],
) {
    let g = faces.grid;
    let (mode, eps) = (faces.mean_mode, faces.eps);
    let (a, t, l) = (alpha.data(), t.data(), lam.data());
    let cx = scale / (g.dx() * g.dx());
    let cy = scale / (g.dy() * g.dy());
    let cz = scale / (g.dz() * g.dz());
    let plane = g.plane_len();
    let mut face = |v: usize, w: usize, c: f64| {
        let s = c * (l[v] - l[w]) * (t[w] - t[v]);
        out[v] += s * face_mean_da(a[v], a[w], mode, eps);
        out[w] += s * face_mean_da(a[w], a[v], mode, eps);
    };
    for k in 0..g.nz {
        for j in 0..g.ny {
            let jn = wrap_next(j, g.ny);
            for i in 0..g.nx {
                let v = g.index(i, j, k);
                face(v, g.index(wrap_next(i, g.nx), j, k), cx);
                face(v, g.index(i, jn, k), cy);
                if k + 1 < g.nz {
                    face(v, v + plane, cz);
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct AdjointGradients {
    pub alpha: ScalarField3D,
    pub t0: ScalarField3D,
    /// Peak number of fields the backward pass held beyond what was alive on entry.
    pub peak_work_fields: usize,
}

/// Full backward sweep over a recorded trajectory.
///
/// `dldt_per_step[n - 1]` is `dl/dT^n` for `n = 1..=M`. The trajectory must
/// come from the same `alpha` and `cfg`.
pub fn backward_pass(
    alpha: &ScalarField3D,
    trajectory: &Trajectory,
    dldt_per_step: &[ScalarField3D],
    cfg: &SolveConfig,
) -> Result<AdjointGradients> {
    let m = trajectory.n_steps();
    if dldt_per_step.len() != m {
        return Err(Error::Shape(format!(
            "{} loss gradients for a trajectory of {m} steps",
            dldt_per_step.len()
        )));
    }
    backward_pass_streaming(alpha, trajectory, cfg, |n, _| {
        Ok(dldt_per_step[n - 1].clone())
    })
}

/// Backward sweep with `dl/dT^n` produced on demand by `loss_grad(n, T^n)`,
/// so no per-step loss gradients are held beyond the current one.
pub fn backward_pass_streaming(
    alpha: &ScalarField3D,
    trajectory: &Trajectory,
    cfg: &SolveConfig,
    mut loss_grad: impl FnMut(usize, &ScalarField3D) -> Result<ScalarField3D>,
) -> Result<AdjointGradients> {
    let m = trajectory.n_steps();
    let baseline = memtrack::live_fields();
    memtrack::reset_peak();

    let faces = build_face_conductances(alpha, cfg.mean_mode, cfg.eps)?;
    let solver = PreparedSolver::new(&faces, cfg.dt, cfg.solver)?;
    let mut state = AdjointState::terminal(alpha);
    for n in (1..=m).rev() {
        let t_n = &trajectory.states[n];
        let g = loss_grad(n, t_n)?;
        alpha.ensure_grid(&g)?;
        state.step(&solver, alpha, &faces, t_n, &g)?;
    }
    let AdjointState {
        lam,
        grad_alpha_accum,
    } = state;
    let peak_work_fields = memtrack::peak_fields().saturating_sub(baseline);
    Ok(AdjointGradients {
        alpha: grad_alpha_accum,
        t0: lam,
        peak_work_fields,
    })
}

/// Checkpoint-and-recompute variant: keeps every `every`-th state and replays
/// each segment forward before sweeping it backward.
///
/// `loss_grad(n, T^n)` supplies `dl/dT^n` on demand. Produces the same
/// gradients as [`backward_pass`] on the full trajectory, bit for bit.
pub fn backward_pass_checkpointed(
    alpha: &ScalarField3D,
    t0: &ScalarField3D,
    cfg: &SolveConfig,
    every: usize,
    mut loss_grad: impl FnMut(usize, &ScalarField3D) -> Result<ScalarField3D>,
) -> Result<AdjointGradients> {
    if every == 0 {
        return Err(Error::Domain("checkpoint interval must be >= 1".into()));
    }
    if cfg.source.is_some() {
        return Err(Error::Domain(
            "checkpointed adjoint does not support source terms".into(),
        ));
    }
    alpha.ensure_grid(t0)?;
    cfg.validate(alpha.grid())?;
    let baseline = memtrack::live_fields();
    memtrack::reset_peak();

    let faces = build_face_conductances(alpha, cfg.mean_mode, cfg.eps)?;
    let solver = PreparedSolver::new(&faces, cfg.dt, cfg.solver)?;
    let m = cfg.n_steps;

    let mut checkpoints = vec![t0.clone()];
    let mut t = t0.clone();
    for n in 1..=m {
        t = solver.solve(&t, &t)?;
        if n % every == 0 && n < m {
            checkpoints.push(t.clone());
        }
    }
    drop(t);

    let mut state = AdjointState::terminal(alpha);
    for (c, start) in checkpoints.iter().enumerate().rev() {
        let first = c * every;
        let last = (first + every).min(m);
        let mut segment = Vec::with_capacity(last - first);
        let mut cur = start.clone();
        for _ in first + 1..=last {
            cur = solver.solve(&cur, &cur)?;
            segment.push(cur.clone());
        }
        drop(cur);
        for n in (first + 1..=last).rev() {
            let t_n = &segment[n - first - 1];
            let g = loss_grad(n, t_n)?;
            alpha.ensure_grid(&g)?;
            state.step(&solver, alpha, &faces, t_n, &g)?;
        }
    }
    drop(checkpoints);
    let AdjointState {
        lam,
        grad_alpha_accum,
    } = state;
    let peak_work_fields = memtrack::peak_fields().saturating_sub(baseline);
    Ok(AdjointGradients {
        alpha: grad_alpha_accum,
        t0: lam,
        peak_work_fields,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSpec, MeanMode, DEFAULT_EPS};
    use crate::solver::{simulate_implicit, LinearSolver};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(g: GridSpec, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ScalarField3D {
        ScalarField3D::from_fn(g, |_, _, _| rng.random_range(lo..hi))
    }

    #[test]
    fn homogeneous_adjoint_is_zero() {
        let g = GridSpec::new(4, 4, 3, 1.0, 1.0, 1.0).unwrap();
        let faces =
            build_face_conductances(&ScalarField3D::filled(g, 0.1), MeanMode::Harmonic, 0.0)
                .unwrap();
        let z = ScalarField3D::zeros(g);
        let lam = adjoint_step(&faces, &z, &z, 0.05, 50).unwrap();
        assert!(lam.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_rhs_gives_positive_peaked_adjoint() {
        let g = GridSpec::new(6, 6, 3, 3.0, 3.0, 1.0).unwrap();
        let faces =
            build_face_conductances(&ScalarField3D::filled(g, 0.1), MeanMode::Harmonic, 0.0)
                .unwrap();
        let v = g.index(2, 3, 1);
        let mut e = ScalarField3D::zeros(g);
        e.data_mut()[v] = 1.0;
        let op = SystemOperator::new(&faces, 0.5).unwrap();
        let dense = op
            .to_dense()
            .lu()
            .solve(&DVector::from_column_slice(e.data()))
            .unwrap();
        assert!(dense.iter().all(|&x| x > 0.0));
        let peak = dense.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(dense[v], peak);

        let lam = adjoint_step(&faces, &ScalarField3D::zeros(g), &e, 0.5, 400).unwrap();
        for (a, b) in lam.data().iter().zip(dense.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn jacobi_adjoint_matches_dense_solve() {
        let g = GridSpec::new(8, 8, 4, 4.0, 4.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alpha = random_field(g, 0.05, 0.2, &mut rng);
        let faces = build_face_conductances(&alpha, MeanMode::Harmonic, DEFAULT_EPS).unwrap();
        let lam_next = random_field(g, -1.0, 1.0, &mut rng);
        let dl = random_field(g, -1.0, 1.0, &mut rng);
        let lam = adjoint_step(&faces, &lam_next, &dl, 0.05, 200).unwrap();
        let op = SystemOperator::new(&faces, 0.05).unwrap();
        let rhs: Vec<f64> = dl
            .data()
            .iter()
            .zip(lam_next.data())
            .map(|(a, b)| a + b)
            .collect();
        let dense = op
            .to_dense()
            .lu()
            .solve(&DVector::from_vec(rhs))
            .unwrap();
        let num: f64 = lam
            .data()
            .iter()
            .zip(dense.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(num / dense.norm() <= 1e-8);
    }

    #[test]
    fn vjp_vanishes_for_uniform_inputs() {
        let g = GridSpec::new(5, 4, 3, 1.0, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let alpha = random_field(g, 0.05, 0.2, &mut rng);
        let faces = build_face_conductances(&alpha, MeanMode::Harmonic, DEFAULT_EPS).unwrap();
        let t = random_field(g, 0.0, 1.0, &mut rng);
        let flat = ScalarField3D::filled(g, 2.0);
        let a = laplacian_vjp_alpha(&alpha, &faces, &t, &flat).unwrap();
        let b = laplacian_vjp_alpha(&alpha, &faces, &flat, &t).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let g = GridSpec::new(4, 4, 2, 1.0, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let alpha = random_field(g, 0.05, 0.2, &mut rng);
        let t0 = random_field(g, 0.0, 1.0, &mut rng);
        let cfg = SolveConfig {
            n_steps: 3,
            ..SolveConfig::default()
        };
        let traj = simulate_implicit(&alpha, &t0, &cfg).unwrap();
        let dl: Vec<_> = (0..3).map(|_| ScalarField3D::zeros(g)).collect();
        let grads = backward_pass(&alpha, &traj, &dl, &cfg).unwrap();
        assert!(grads.alpha.data().iter().all(|&v| v == 0.0));
        assert!(grads.t0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_length_mismatch() {
        let g = GridSpec::new(4, 4, 2, 1.0, 1.0, 1.0).unwrap();
        let alpha = ScalarField3D::filled(g, 0.1);
        let cfg = SolveConfig {
            n_steps: 2,
            ..SolveConfig::default()
        };
        let traj = simulate_implicit(&alpha, &ScalarField3D::zeros(g), &cfg).unwrap();
        let dl = vec![ScalarField3D::zeros(g)];
        assert!(matches!(
            backward_pass(&alpha, &traj, &dl, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_pass_is_linear_in_loss_gradient() {
        let g = GridSpec::new(6, 6, 3, 2.0, 2.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let alpha = random_field(g, 0.05, 0.2, &mut rng);
        let t0 = random_field(g, 0.0, 1.0, &mut rng);
        let cfg = SolveConfig {
            n_steps: 3,
            solver: LinearSolver::Direct,
            ..SolveConfig::default()
        };
        let traj = simulate_implicit(&alpha, &t0, &cfg).unwrap();
        let dl: Vec<_> = (0..3)
            .map(|_| random_field(g, -1.0, 1.0, &mut rng))
            .collect();
        let scaled: Vec<_> = dl
            .iter()
            .map(|f| ScalarField3D::from_vec(g, f.data().iter().map(|v| 3.0 * v).collect()).unwrap())
            .collect();
        let a = backward_pass(&alpha, &traj, &dl, &cfg).unwrap();
        let b = backward_pass(&alpha, &traj, &scaled, &cfg).unwrap();
        for (x, y) in a.alpha.data().iter().zip(b.alpha.data()) {
            assert!((3.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-12));
        }
    }

    #[test]
    fn checkpointed_matches_stored_trajectory() {
        let g = GridSpec::new(6, 6, 3, 2.0, 2.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let alpha = random_field(g, 0.05, 0.2, &mut rng);
        let t0 = random_field(g, 0.0, 1.0, &mut rng);
        let cfg = SolveConfig {
            n_steps: 7,
            solver: LinearSolver::Jacobi { iters: 30 },
            ..SolveConfig::default()
        };
        let traj = simulate_implicit(&alpha, &t0, &cfg).unwrap();
        let grad_of = |t: &ScalarField3D| {
            ScalarField3D::from_vec(g, t.data().iter().map(|v| 2.0 * v).collect()).unwrap()
        };
        let dl: Vec<_> = traj.states[1..].iter().map(grad_of).collect();
        let full = backward_pass(&alpha, &traj, &dl, &cfg).unwrap();
        for every in [1, 3, 7, 10] {
            let ck =
                backward_pass_checkpointed(&alpha, &t0, &cfg, every, |_, t| Ok(grad_of(t))).unwrap();
            assert_eq!(ck.alpha, full.alpha, "every = {every}");
            assert_eq!(ck.t0, full.t0);
        }
    }

    fn loss_and_grads(
        alpha: &ScalarField3D,
        t0: &ScalarField3D,
        cfg: &SolveConfig,
        weights: &[ScalarField3D],
    ) -> (f64, Vec<ScalarField3D>) {
        // L = sum_n sum_v w_nv (T^n_v)^2 / 2
        let traj = simulate_implicit(alpha, t0, cfg).unwrap();
        let mut loss = 0.0;
        let mut dl = Vec::new();
        for (t, w) in traj.states[1..].iter().zip(weights) {
            loss += t
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| 0.5 * b * a * a)
                .sum::<f64>();
            dl.push(
                ScalarField3D::from_vec(
                    *t.grid(),
                    t.data().iter().zip(w.data()).map(|(a, b)| a * b).collect(),
                )
                .unwrap(),
            );
        }
        (loss, dl)
    }

    fn fd_setup(mode: MeanMode) -> (ScalarField3D, ScalarField3D, SolveConfig, Vec<ScalarField3D>) {
        let g = GridSpec::new(8, 8, 4, 4.0, 4.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let alpha = random_field(g, 0.05, 0.25, &mut rng);
        let t0 = random_field(g, 0.0, 1.0, &mut rng);
        let weights = (0..5).map(|_| random_field(g, 0.5, 1.5, &mut rng)).collect();
        let cfg = SolveConfig {
            n_steps: 5,
            dt: 0.05,
            solver: LinearSolver::Direct,
            mean_mode: mode,
            ..SolveConfig::default()
        };
        (alpha, t0, cfg, weights)
    }

    fn assert_fd_agrees(mode: MeanMode) {
        let (alpha, t0, cfg, w) = fd_setup(mode);
        let (_, dl) = loss_and_grads(&alpha, &t0, &cfg, &w);
        let traj = simulate_implicit(&alpha, &t0, &cfg).unwrap();
        let grads = backward_pass(&alpha, &traj, &dl, &cfg).unwrap();
        let h = 1e-6;
        let g = *alpha.grid();
        for v in [0, 9, 77, 130, g.len() - 1] {
            let mut p = alpha.clone();
            p.data_mut()[v] += h;
            let mut m = alpha.clone();
            m.data_mut()[v] -= h;
            let fd = (loss_and_grads(&p, &t0, &cfg, &w).0 - loss_and_grads(&m, &t0, &cfg, &w).0)
                / (2.0 * h);
            let an = grads.alpha.data()[v];
            assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "alpha[{v}]: {an} vs {fd}");

            let mut p = t0.clone();
            p.data_mut()[v] += h;
            let mut m = t0.clone();
            m.data_mut()[v] -= h;
            let fd = (loss_and_grads(&alpha, &p, &cfg, &w).0 - loss_and_grads(&alpha, &m, &cfg, &w).0)
                / (2.0 * h);
            let an = grads.t0.data()[v];
            assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "t0[{v}]: {an} vs {fd}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_harmonic() {
        assert_fd_agrees(MeanMode::Harmonic);
    }

    #[test]
    fn gradients_match_finite_differences_arithmetic() {
        assert_fd_agrees(MeanMode::Arithmetic);
    }

    #[test]
    fn jacobi_gradients_converge_to_direct() {
        let (alpha, t0, direct_cfg, w) = fd_setup(MeanMode::Harmonic);
        let rel = |iters: usize| {
            let cfg = SolveConfig {
                solver: LinearSolver::Jacobi { iters },
                ..direct_cfg.clone()
            };
            let (_, dl) = loss_and_grads(&alpha, &t0, &cfg, &w);
            let traj = simulate_implicit(&alpha, &t0, &cfg).unwrap();
            let got = backward_pass(&alpha, &traj, &dl, &cfg).unwrap();
            let (_, dl) = loss_and_grads(&alpha, &t0, &direct_cfg, &w);
            let traj = simulate_implicit(&alpha, &t0, &direct_cfg).unwrap();
            let exact = backward_pass(&alpha, &traj, &dl, &direct_cfg).unwrap();
            let diff: f64 = got
                .alpha
                .data()
                .iter()
                .zip(exact.alpha.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let norm: f64 = exact.alpha.data().iter().map(|a| a * a).sum();
            (diff / norm).sqrt()
        };
        let errs: Vec<f64> = [10, 50, 200].into_iter().map(rel).collect();
        assert!(errs[0] > errs[1] && errs[1] >= errs[2], "{errs:?}");
        assert!(errs[2] <= 1e-8, "{errs:?}");
    }

    #[test]
    fn backward_memory_does_not_grow_with_steps() {
        let g = GridSpec::new(6, 6, 3, 2.0, 2.0, 1.0).unwrap();
        let alpha = ScalarField3D::filled(g, 0.1);
        let t0 = ScalarField3D::from_fn(g, |i, _, _| i as f64);
        let peak = |m: usize| {
            let cfg = SolveConfig {
                n_steps: m,
                ..SolveConfig::default()
            };
            let traj = simulate_implicit(&alpha, &t0, &cfg).unwrap();
            let dl: Vec<_> = traj.states[1..].to_vec();
            backward_pass(&alpha, &traj, &dl, &cfg)
                .unwrap()
                .peak_work_fields
        };
        let (short, long) = (peak(4), peak(40));
        assert_eq!(short, long);
        assert!(short <= 8, "{short}");

        let cfg = SolveConfig {
            n_steps: 40,
            ..SolveConfig::default()
        };
        let ck = backward_pass_checkpointed(&alpha, &t0, &cfg, 5, |_, t| Ok(t.clone())).unwrap();
        // checkpoints + one segment + solver scratch
        assert!(ck.peak_work_fields <= 8 + 5 + 8, "{}", ck.peak_work_fields);
    }
}
