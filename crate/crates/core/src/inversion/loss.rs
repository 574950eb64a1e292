//! Data misfit and the two regularizers, each returning its value and gradient.

use crate::error::{Error, Result};
use crate::grid::{wrap_next, GridSpec, ScalarField3D, SurfaceFrame};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Sensor validity on the observation plane, entries 0 or 1.
    pub mask: SurfaceFrame,
    pub tv_weight: f64,
    pub sym_weight_start: f64,
    pub sym_anneal_iters: usize,
}

impl LossConfig {
    /// Full mask, `tv_weight = 1e-2`, symmetry 100 annealed over 2000 iterations.
    pub fn new(nx: usize, ny: usize) -> Self {
        Self {
            mask: SurfaceFrame {
                nx,
                ny,
                data: vec![1.0; nx * ny],
            },
            tv_weight: 1e-2,
            sym_weight_start: 100.0,
            sym_anneal_iters: 2000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.data.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Domain("mask entries must be 0 or 1".into()));
        }
        if !(self.tv_weight >= 0.0 && self.sym_weight_start >= 0.0) {
            return Err(Error::Domain(
                "regularization weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `(1/M) sum_t ||mask (sim_t - obs_t)||^2`, summed over pixels, `M` = steps.
///
/// The per-step gradients are full fields, zero except on the observation plane.
pub fn data_loss(
    sim: &[SurfaceFrame],
    obs: &[SurfaceFrame],
    mask: &SurfaceFrame,
    grid: &GridSpec,
) -> Result<(f64, Vec<ScalarField3D>)> {
    let (value, norm) = data_loss_value(sim, obs, mask, grid)?;
    let grads = sim
        .iter()
        .zip(obs)
        .map(|(s, o)| data_loss_step_grad(s, o, mask, grid, norm))
        .collect();
    Ok((value, grads))
}

/// Loss value and its normalization `1 / steps`.
pub fn data_loss_value(
    sim: &[SurfaceFrame],
    obs: &[SurfaceFrame],
    mask: &SurfaceFrame,
    grid: &GridSpec,
) -> Result<(f64, f64)> {
    if sim.len() != obs.len() {
        return Err(Error::Shape(format!(
            "{} simulated frames vs {} observed",
            sim.len(),
            obs.len()
        )));
    }
    if mask.nx != grid.nx || mask.ny != grid.ny {
        return Err(Error::Shape(format!(
            "mask {}x{} on a {}x{} surface",
            mask.nx, mask.ny, grid.nx, grid.ny
        )));
    }
    let norm = if sim.is_empty() { 0.0 } else { 1.0 / sim.len() as f64 };
    let mut value = 0.0;
    for (n, (s, o)) in sim.iter().zip(obs).enumerate() {
        if !s.same_shape(mask) || !o.same_shape(mask) {
            return Err(Error::Shape(format!("frame {n} does not match the mask shape")));
        }
        for p in 0..mask.data.len() {
            let r = mask.data[p] * (s.data[p] - o.data[p]);
            value += r * r;
        }
    }
    Ok((value * norm, norm))
}

/// `dl/dT^n` for one frame, nonzero only on the top plane. Shapes must already match.
pub fn data_loss_step_grad(
    sim: &SurfaceFrame,
    obs: &SurfaceFrame,
    mask: &SurfaceFrame,
    grid: &GridSpec,
    norm: f64,
) -> ScalarField3D {
    let plane = grid.plane_len();
    let offset = plane * (grid.nz - 1);
    let mut g = ScalarField3D::zeros(*grid);
    let gd = &mut g.data_mut()[offset..offset + plane];
    for p in 0..plane {
        gd[p] = 2.0 * norm * mask.data[p] * (sim.data[p] - obs.data[p]);
    }
    g
}

/// Anisotropic TV: `sum |a(v + e_d) - a(v)|`, periodic in x/y, no term across z ends.
/// Subgradient uses `sign(0) = 0`.
pub fn tv_regularizer(alpha: &ScalarField3D) -> (f64, ScalarField3D) {
    let g = *alpha.grid();
    let a = alpha.data();
    let mut grad = ScalarField3D::zeros(g);
    let gd = grad.data_mut();
    let mut value = 0.0;
    let plane = g.plane_len();
    let mut term = |v: usize, w: usize| {
        let d = a[w] - a[v];
        value += d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        gd[w] += s;
        gd[v] -= s;
    };
    for k in 0..g.nz {
        for j in 0..g.ny {
            let jn = wrap_next(j, g.ny);
            for i in 0..g.nx {
                let v = g.index(i, j, k);
                term(v, g.index(wrap_next(i, g.nx), j, k));
                term(v, g.index(i, jn, k));
                if k + 1 < g.nz {
                    term(v, v + plane);
                }
            }
        }
    }
    (value, grad)
}

pub fn flip_x(alpha: &ScalarField3D) -> ScalarField3D {
    let g = *alpha.grid();
    ScalarField3D::from_fn(g, |i, j, k| alpha.get(g.nx - 1 - i, j, k))
}

pub fn flip_y(alpha: &ScalarField3D) -> ScalarField3D {
    let g = *alpha.grid();
    ScalarField3D::from_fn(g, |i, j, k| alpha.get(i, g.ny - 1 - j, k))
}

/// `(||a - flip_x a||^2 + ||a - flip_y a||^2) / 2`; gradient `2(a - flip_x a) + 2(a - flip_y a)`.
pub fn symmetry_loss(alpha: &ScalarField3D) -> (f64, ScalarField3D) {
    let fx = flip_x(alpha);
    let fy = flip_y(alpha);
    let mut value = 0.0;
    let mut grad = ScalarField3D::zeros(*alpha.grid());
    for (((g, &a), &x), &y) in grad
        .data_mut()
        .iter_mut()
        .zip(alpha.data())
        .zip(fx.data())
        .zip(fy.data())
    {
        value += 0.5 * ((a - x).powi(2) + (a - y).powi(2));
        *g = 2.0 * (a - x) + 2.0 * (a - y);
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(data: Vec<f64>, nx: usize) -> SurfaceFrame {
        SurfaceFrame {
            nx,
            ny: data.len() / nx,
            data,
        }
    }

    #[test]
    fn identical_frames_cost_nothing() {
        let g = GridSpec::new(3, 2, 2, 1.0, 1.0, 1.0).unwrap();
        let f = frame(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3);
        let (v, grads) =
            data_loss(&[f.clone()], &[f], &LossConfig::new(3, 2).mask, &g).unwrap();
        assert_eq!(v, 0.0);
        assert!(grads[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_mask_costs_nothing() {
        let g = GridSpec::new(2, 2, 2, 1.0, 1.0, 1.0).unwrap();
        let mask = frame(vec![0.0; 4], 2);
        let (v, _) = data_loss(
            &[frame(vec![5.0; 4], 2)],
            &[frame(vec![-5.0; 4], 2)],
            &mask,
            &g,
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn single_pixel_hand_value() {
        let g = GridSpec::new(2, 2, 3, 1.0, 1.0, 1.0).unwrap();
        let mask = frame(vec![0.0, 1.0, 0.0, 0.0], 2);
        let sim = frame(vec![9.0, 1.5, 3.0, 0.0], 2);
        let obs = frame(vec![0.0, 1.0, 0.0, 7.0], 2);
        let (v, grads) = data_loss(&[sim], &[obs], &mask, &g).unwrap();
        assert_eq!(v, 0.25);
        let gd = grads[0].data();
        assert_eq!(gd[g.index(1, 0, 2)], 1.0);
        assert_eq!(gd.iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn data_loss_rejects_shape_mismatch() {
        let g = GridSpec::new(2, 2, 2, 1.0, 1.0, 1.0).unwrap();
        let mask = LossConfig::new(2, 2).mask;
        let f = frame(vec![0.0; 4], 2);
        assert!(data_loss(&[f.clone()], &[], &mask, &g).is_err());
        assert!(data_loss(&[frame(vec![0.0; 6], 3)], &[f], &mask, &g).is_err());
    }

    #[test]
    fn tv_of_single_bump_along_x() {
        let g = GridSpec::new(4, 2, 2, 1.0, 1.0, 1.0).unwrap();
        // y/z constant copies so only x differences contribute
        let bump = [0.0, 1.0, 0.0, 0.0];
        let a = ScalarField3D::from_fn(g, |i, _, _| bump[i]);
        let (v, _) = tv_regularizer(&a);
        // 4 rows (2 y x 2 z) of the 1D pattern, each contributing 2
        assert_eq!(v, 8.0);
        let line = GridSpec::planar(4, 1, 1, 1.0, 1.0, 1.0).unwrap();
        let a = ScalarField3D::from_vec(line, bump.to_vec()).unwrap();
        assert_eq!(tv_regularizer(&a).0, 2.0);
    }

    #[test]
    fn tv_is_shift_invariant_and_zero_on_constants() {
        let g = GridSpec::new(4, 3, 2, 1.0, 1.0, 1.0).unwrap();
        let (v, grad) = tv_regularizer(&ScalarField3D::filled(g, 0.1));
        assert_eq!(v, 0.0);
        assert!(grad.data().iter().all(|&x| x == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ScalarField3D::from_fn(g, |_, _, _| rng.random_range(0.0..1.0) as f64);
        let shifted = ScalarField3D::from_fn(g, |i, j, k| a.get(i, j, k) + 0.5);
        // quarter-integer values keep the shift exact
        let q = ScalarField3D::from_fn(g, |i, j, k| (a.get(i, j, k) * 4.0).round() / 4.0);
        let qs = ScalarField3D::from_fn(g, |i, j, k| q.get(i, j, k) + 0.5);
        assert_eq!(tv_regularizer(&q).0, tv_regularizer(&qs).0);
        assert!((tv_regularizer(&a).0 - tv_regularizer(&shifted).0).abs() < 1e-12);
    }

    fn fd_check(f: impl Fn(&ScalarField3D) -> (f64, ScalarField3D), a: &ScalarField3D) -> f64 {
        let (_, grad) = f(a);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for v in 0..a.data().len() {
            let mut p = a.clone();
            p.data_mut()[v] += h;
            let mut m = a.clone();
            m.data_mut()[v] -= h;
            let fd = (f(&p).0 - f(&m).0) / (2.0 * h);
            worst = worst.max((grad.data()[v] - fd).abs() / fd.abs().max(1.0));
        }
        worst
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let g = GridSpec::new(4, 4, 2, 1.0, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ScalarField3D::from_fn(g, |_, _, _| rng.random_range(0.0..1.0));
        assert!(fd_check(tv_regularizer, &a) <= 1e-7);
    }

    #[test]
    fn symmetry_gradient_matches_finite_differences() {
        let g = GridSpec::new(4, 4, 2, 1.0, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = ScalarField3D::from_fn(g, |_, _, _| rng.random_range(0.0..1.0));
        assert!(fd_check(symmetry_loss, &a) <= 1e-7);
        assert_eq!(flip_x(&flip_x(&a)), a);
        assert_eq!(flip_y(&flip_y(&a)), a);
    }

    #[test]
    fn symmetric_field_has_zero_symmetry_loss() {
        let g = GridSpec::new(6, 4, 2, 1.0, 1.0, 1.0).unwrap();
        let a = ScalarField3D::from_fn(g, |i, j, k| {
            let x = i.min(5 - i) as f64;
            let y = j.min(3 - j) as f64;
            x * 0.1 + y * 0.7 + k as f64
        });
        assert_eq!(symmetry_loss(&a).0, 0.0);
    }
}
