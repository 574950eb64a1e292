//! Reconstruction scores: surface MSE, PSNR, 3D SSIM and thresholded defect IoU.

use crate::error::{Error, Result};
use crate::grid::{ScalarField3D, SurfaceFrame};

/// `alpha_max - alpha_min` of the default admissible window.
pub const DEFAULT_DATA_RANGE: f64 = 0.247;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_WINDOW: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    /// `None` when no frames were supplied.
    pub surface_mse: Option<f64>,
    /// `f64::INFINITY` for identical fields.
    pub psnr_db: f64,
    pub ssim: f64,
    pub iou: f64,
}

/// Mean squared error over steps and masked pixels.
pub fn surface_mse(
    pred: &[SurfaceFrame],
    obs: &[SurfaceFrame],
    mask: &SurfaceFrame,
) -> Result<f64> {
    if pred.len() != obs.len() {
        return Err(Error::Shape(format!(
            "{} predicted frames vs {} observed",
            pred.len(),
            obs.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (n, (p, o)) in pred.iter().zip(obs).enumerate() {
        if !p.same_shape(mask) || !o.same_shape(mask) {
            return Err(Error::Shape(format!("frame {n} does not match the mask")));
        }
        for ((a, b), m) in p.data.iter().zip(&o.data).zip(&mask.data) {
            if *m != 0.0 {
                sum += (a - b).powi(2);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub fn mse(pred: &ScalarField3D, gt: &ScalarField3D) -> Result<f64> {
    pred.ensure_grid(gt)?;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / pred.data().len() as f64)
}

/// `10 log10(range^2 / MSE)`.
pub fn psnr(pred: &ScalarField3D, gt: &ScalarField3D, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::Domain(format!("data range {data_range} must be positive")));
    }
    Ok(psnr_from_mse(mse(pred, gt)?, data_range))
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// Normalized 1D Gaussian taps, `SSIM_WINDOW` wide.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, w) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *w = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Index `i + off` wrapped periodically.
fn periodic(i: usize, off: isize, n: usize) -> usize {
    (i as isize + off).rem_euclid(n as isize) as usize
}

/// Index `i + off` mirrored about the outer faces (`-1 -> 0`, `n -> n - 1`).
fn reflect(i: usize, off: isize, n: usize) -> usize {
    let n = n as isize;
    let mut j = i as isize + off;
    while j < 0 || j >= n {
        j = if j < 0 { -j - 1 } else { 2 * n - j - 1 };
    }
    j as usize
}

fn blur(field: &[f64], dims: [usize; 3], taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let r = (SSIM_WINDOW / 2) as isize;
    let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let mut a = vec![0.0; field.len()];
    let mut b = vec![0.0; field.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                a[idx(i, j, k)] = (-r..=r)
                    .map(|o| taps[(o + r) as usize] * field[idx(periodic(i, o, nx), j, k)])
                    .sum();
            }
        }
    }
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                b[idx(i, j, k)] = (-r..=r)
                    .map(|o| taps[(o + r) as usize] * a[idx(i, periodic(j, o, ny), k)])
                    .sum();
            }
        }
    }
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                a[idx(i, j, k)] = (-r..=r)
                    .map(|o| taps[(o + r) as usize] * b[idx(i, j, reflect(k, o, nz))])
                    .sum();
            }
        }
    }
    a
}

/// Mean local SSIM under a separable Gaussian window, periodic in x/y and mirrored in z.
pub fn ssim3d(pred: &ScalarField3D, gt: &ScalarField3D, data_range: f64) -> Result<f64> {
    pred.ensure_grid(gt)?;
    let g = pred.grid();
    if g.nx < SSIM_WINDOW || g.ny < SSIM_WINDOW || g.nz < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "grid {} is smaller than the {SSIM_WINDOW}-wide SSIM window",
            g.describe()
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::Domain(format!("data range {data_range} must be positive")));
    }
    let dims = [g.nx, g.ny, g.nz];
    let taps = ssim_kernel();
    let (x, y) = (pred.data(), gt.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = blur(x, dims, &taps);
    let my = blur(y, dims, &taps);
    let sxx = blur(&xx, dims, &taps);
    let syy = blur(&yy, dims, &taps);
    let sxy = blur(&xy, dims, &taps);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let total: f64 = (0..x.len())
        .map(|v| ssim_local(mx[v], my[v], sxx[v], syy[v], sxy[v], c1, c2))
        .sum();
    Ok(total / x.len() as f64)
}

/// Local SSIM from window moments `E[x], E[y], E[x^2], E[y^2], E[xy]`.
pub fn ssim_local(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64, c1: f64, c2: f64) -> f64 {
    let vx = exx - mx * mx;
    let vy = eyy - my * my;
    let cxy = exy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// IoU of the masks `alpha < threshold`; 1 when both are empty.
pub fn defect_iou(pred: &ScalarField3D, gt: &ScalarField3D, threshold: f64) -> Result<f64> {
    pred.ensure_grid(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.data().iter().zip(gt.data()) {
        let (p, q) = (*a < threshold, *b < threshold);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

pub fn evaluate(
    pred: &ScalarField3D,
    gt: &ScalarField3D,
    data_range: f64,
    threshold: f64,
    frames: Option<(&[SurfaceFrame], &[SurfaceFrame], &SurfaceFrame)>,
) -> Result<MetricReport> {
    Ok(MetricReport {
        surface_mse: frames
            .map(|(p, o, m)| surface_mse(p, o, m))
            .transpose()?,
        psnr_db: psnr(pred, gt, data_range)?,
        ssim: ssim3d(pred, gt, data_range)?,
        iou: defect_iou(pred, gt, threshold)?,
    })
}

pub const METRICS_HEADER: &str = "mse,psnr_db,ssim,iou";

impl MetricReport {
    /// `mse,psnr_db,ssim,iou`; missing surface MSE is written as `NaN`, infinite PSNR as `inf`.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.surface_mse.unwrap_or(f64::NAN),
            self.psnr_db,
            self.ssim,
            self.iou
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(g: GridSpec, seed: u64) -> ScalarField3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField3D::from_fn(g, |i, j, k| {
            0.1 + 0.05 * ((i as f64) * 0.7).sin() * ((j as f64) * 0.4).cos()
                + 0.01 * k as f64
                + rng.random_range(-0.01..0.01)
        })
    }

    fn grid() -> GridSpec {
        GridSpec::new(9, 8, 7, 1.0, 1.0, 1.0).unwrap()
    }

    /// Direct triple sum over the 7^3 window.
    fn brute_ssim(x: &ScalarField3D, y: &ScalarField3D, range: f64) -> f64 {
        let g = x.grid();
        let t = ssim_kernel();
        let c1 = (0.01 * range).powi(2);
        let c2 = (0.03 * range).powi(2);
        let mut total = 0.0;
        for k in 0..g.nz {
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let mut m = [0.0; 5];
                    for c in -3isize..=3 {
                        for b in -3isize..=3 {
                            for a in -3isize..=3 {
                                let w = t[(a + 3) as usize] * t[(b + 3) as usize] * t[(c + 3) as usize];
                                let (ii, jj, kk) = (
                                    periodic(i, a, g.nx),
                                    periodic(j, b, g.ny),
                                    reflect(k, c, g.nz),
                                );
                                let (p, q) = (x.get(ii, jj, kk), y.get(ii, jj, kk));
                                m[0] += w * p;
                                m[1] += w * q;
                                m[2] += w * p * p;
                                m[3] += w * q * q;
                                m[4] += w * p * q;
                            }
                        }
                    }
                    total += ssim_local(m[0], m[1], m[2], m[3], m[4], c1, c2);
                }
            }
        }
        total / g.len() as f64
    }

    #[test]
    fn surface_mse_hand_values() {
        let f = |d: Vec<f64>| SurfaceFrame { nx: 2, ny: 1, data: d };
        let mask = f(vec![1.0, 1.0]);
        assert_eq!(surface_mse(&[f(vec![1.0, 2.0])], &[f(vec![1.0, 2.0])], &mask).unwrap(), 0.0);
        assert_eq!(surface_mse(&[f(vec![0.0, 1.0])], &[f(vec![0.0, 0.0])], &mask).unwrap(), 0.5);
        assert_eq!(surface_mse(&[f(vec![3.0, 3.0])], &[f(vec![1.0, 1.0])], &mask).unwrap(), 4.0);
        assert!(surface_mse(&[f(vec![0.0, 0.0])], &[], &mask).is_err());
    }

    #[test]
    fn psnr_values() {
        let g = grid();
        let a = textured(g, 1);
        assert_eq!(psnr(&a, &a, 0.247).unwrap(), f64::INFINITY);
        assert_eq!(psnr_from_mse(0.247 * 0.247, 0.247), 0.0);
        assert_relative_eq!(psnr_from_mse(2.47e-3, 0.247), 13.926_969_532_596_66, max_relative = 1e-12);
        assert!(psnr_from_mse(1e-3, 0.247) > psnr_from_mse(2e-3, 0.247));
    }

    #[test]
    fn ssim_of_identical_fields_is_one() {
        let a = textured(grid(), 2);
        assert_relative_eq!(ssim3d(&a, &a, 0.247).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn ssim_matches_brute_force_window() {
        let g = grid();
        let a = textured(g, 3);
        let b = textured(g, 4);
        let fast = ssim3d(&a, &b, 0.247).unwrap();
        assert!((fast - brute_ssim(&a, &b, 0.247)).abs() <= 1e-10);
    }

    #[test]
    fn ssim_penalizes_offsets_and_prefers_affine_copies() {
        let g = grid();
        let a = textured(g, 5);
        let shifted = ScalarField3D::from_fn(g, |i, j, k| a.get(i, j, k) + 0.2);
        assert!(ssim3d(&shifted, &a, 0.247).unwrap() < 1.0);
        let affine = ScalarField3D::from_fn(g, |i, j, k| 0.6 * a.get(i, j, k) + 0.03);
        let flat = ScalarField3D::filled(g, a.sum() / g.len() as f64);
        let s_aff = ssim3d(&affine, &a, 0.247).unwrap();
        assert!(s_aff < 1.0);
        assert!(s_aff > ssim3d(&flat, &a, 0.247).unwrap());
    }

    #[test]
    fn ssim_is_translation_invariant_in_x_and_y() {
        let g = grid();
        let a = textured(g, 6);
        let b = textured(g, 7);
        let roll = |f: &ScalarField3D| {
            ScalarField3D::from_fn(g, |i, j, k| f.get((i + 3) % g.nx, (j + 5) % g.ny, k))
        };
        let s0 = ssim3d(&a, &b, 0.247).unwrap();
        let s1 = ssim3d(&roll(&a), &roll(&b), 0.247).unwrap();
        assert!((s0 - s1).abs() <= 1e-10);
    }

    #[test]
    fn ssim_rejects_small_grids() {
        let g = GridSpec::new(8, 8, 4, 1.0, 1.0, 1.0).unwrap();
        let a = ScalarField3D::filled(g, 0.1);
        assert!(matches!(ssim3d(&a, &a, 0.247), Err(Error::Shape(_))));
    }

    #[test]
    fn iou_counts() {
        let g = GridSpec::new(4, 4, 2, 1.0, 1.0, 1.0).unwrap();
        let mut gt = ScalarField3D::filled(g, 0.1);
        for v in 0..9 {
            gt.data_mut()[v] = 0.01;
        }
        let mut pred = gt.clone();
        assert_eq!(defect_iou(&pred, &gt, 0.03).unwrap(), 1.0);
        pred.data_mut()[20] = 0.01;
        assert_relative_eq!(defect_iou(&pred, &gt, 0.03).unwrap(), 0.9);
        assert_eq!(defect_iou(&pred, &gt, 0.03).unwrap(), defect_iou(&gt, &pred, 0.03).unwrap());
        let empty = ScalarField3D::filled(g, 0.1);
        assert_eq!(defect_iou(&empty, &empty, 0.03).unwrap(), 1.0);
        assert_eq!(defect_iou(&empty, &gt, 0.03).unwrap(), 0.0);
        let mut disjoint = ScalarField3D::filled(g, 0.1);
        for v in 10..19 {
            disjoint.data_mut()[v] = 0.01;
        }
        assert_eq!(defect_iou(&disjoint, &gt, 0.03).unwrap(), 0.0);
    }

    #[test]
    fn reflect_and_periodic_indexing() {
        assert_eq!(reflect(0, -1, 5), 0);
        assert_eq!(reflect(0, -3, 5), 2);
        assert_eq!(reflect(4, 1, 5), 4);
        assert_eq!(reflect(4, 3, 5), 2);
        assert_eq!(periodic(0, -1, 5), 4);
        assert_eq!(periodic(4, 3, 5), 2);
    }
}
