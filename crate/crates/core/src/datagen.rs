//! Synthetic scenes, flash initial conditions and observation records.
//!
//! Observations are always produced by the explicit solver so the inversion,
//! which runs the implicit one, never fits its own discretization.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, MeanMode, ScalarField3D, SurfaceFrame};
use crate::inversion::Observations;
use crate::io::{read_field, stack_frames, unstack_frames, write_field};
use crate::solver::{explicit_substeps, simulate_explicit, LinearSolver, SolveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneMode {
    Homogeneous,
    Layered,
}

impl SceneMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "homogeneous" => Some(Self::Homogeneous),
            "layered" => Some(Self::Layered),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub z_lo: f64,
    pub z_hi: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectShape {
    Ellipsoid,
    /// Axis along z.
    Cylinder,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defect {
    pub shape: DefectShape,
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub alpha_defect: f64,
}

impl Defect {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [
            (p[0] - self.center[0]) / self.half_extents[0],
            (p[1] - self.center[1]) / self.half_extents[1],
            (p[2] - self.center[2]) / self.half_extents[2],
        ];
        match self.shape {
            DefectShape::Ellipsoid => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0,
            DefectShape::Cylinder => d[0] * d[0] + d[1] * d[1] <= 1.0 && d[2].abs() <= 1.0,
            DefectShape::Box => d.iter().all(|x| x.abs() <= 1.0),
        }
    }

    pub fn analytic_volume(&self) -> f64 {
        let [a, b, c] = self.half_extents;
        match self.shape {
            DefectShape::Ellipsoid => 4.0 / 3.0 * std::f64::consts::PI * a * b * c,
            DefectShape::Cylinder => std::f64::consts::PI * a * b * 2.0 * c,
            DefectShape::Box => 8.0 * a * b * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDescription {
    pub mode: SceneMode,
    /// Bottom to top, partitioning `[0, lz]`.
    pub layers: Vec<Layer>,
    pub defects: Vec<Defect>,
}

impl SceneDescription {
    pub fn homogeneous(lz: f64, alpha: f64) -> Self {
        Self {
            mode: SceneMode::Homogeneous,
            layers: vec![Layer {
                z_lo: 0.0,
                z_hi: lz,
                alpha,
            }],
            defects: Vec::new(),
        }
    }

    pub fn layer_alpha_at(&self, z: f64) -> f64 {
        self.layers
            .iter()
            .find(|l| z >= l.z_lo && z < l.z_hi)
            .or(self.layers.last())
            .map(|l| l.alpha)
            .expect("at least one layer")
    }

    pub fn validate(&self, lz: f64) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Domain("scene has no layers".into()))?;
        if first.z_lo != 0.0 || self.layers.last().expect("non-empty").z_hi != lz {
            return Err(Error::Domain(format!("layers must span [0, {lz}]")));
        }
        for w in self.layers.windows(2) {
            if w[0].z_hi != w[1].z_lo {
                return Err(Error::Domain("layers leave a gap or overlap".into()));
            }
        }
        let min_layer = self
            .layers
            .iter()
            .map(|l| l.alpha)
            .fold(f64::INFINITY, f64::min);
        if let Some(d) = self.defects.iter().find(|d| d.alpha_defect >= min_layer) {
            return Err(Error::Domain(format!(
                "defect alpha {} is not below the smallest layer alpha {min_layer}",
                d.alpha_defect
            )));
        }
        Ok(())
    }
}

/// Ranges the scene sampler draws from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePriors {
    pub alpha_base: (f64, f64),
    pub alpha_defect: (f64, f64),
    pub half_extent_xy: (f64, f64),
    pub cylinder_radius: (f64, f64),
    pub half_extent_z: (f64, f64),
    pub center_z: (f64, f64),
    /// Lateral box `(x_lo, x_hi, y_lo, y_hi)` for defect centres; whole domain if `None`.
    pub lateral_window: Option<(f64, f64, f64, f64)>,
    pub max_attempts: usize,
}

impl Default for ScenePriors {
    fn default() -> Self {
        Self {
            alpha_base: (0.1, 0.2),
            alpha_defect: (0.005, 0.015),
            half_extent_xy: (0.3, 1.5),
            cylinder_radius: (0.3, 1.2),
            half_extent_z: (0.1, 0.3),
            center_z: (0.2, 0.7),
            lateral_window: None,
            max_attempts: 1000,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_scene(
    seed: u64,
    mode: SceneMode,
    n_defects: usize,
    grid: &GridSpec,
) -> Result<SceneDescription> {
    sample_scene_with(seed, mode, n_defects, grid, &ScenePriors::default())
}

/// Defects are redrawn until each sits at least one voxel inside the domain.
pub fn sample_scene_with(
    seed: u64,
    mode: SceneMode,
    n_defects: usize,
    grid: &GridSpec,
    priors: &ScenePriors,
) -> Result<SceneDescription> {
    if !(1..=4).contains(&n_defects) {
        return Err(Error::Domain(format!(
            "n_defects = {n_defects} outside 1..=4"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lz = grid.lz;
    let layers = match mode {
        SceneMode::Homogeneous => vec![Layer {
            z_lo: 0.0,
            z_hi: lz,
            alpha: uniform(&mut rng, priors.alpha_base),
        }],
        SceneMode::Layered => {
            let n = if rng.random_bool(0.5) { 3 } else { 4 };
            let mut cuts: Vec<f64> = (0..n - 1).map(|_| rng.random_range(0.0..lz)).collect();
            cuts.sort_by(f64::total_cmp);
            let mut bounds = vec![0.0];
            bounds.extend(cuts);
            bounds.push(lz);
            bounds
                .windows(2)
                .map(|w| Layer {
                    z_lo: w[0],
                    z_hi: w[1],
                    alpha: uniform(&mut rng, priors.alpha_base),
                })
                .collect()
        }
    };
    let lo = [grid.dx(), grid.dy(), grid.dz()];
    let hi = [grid.lx - grid.dx(), grid.ly - grid.dy(), lz - grid.dz()];
    let (wx0, wx1, wy0, wy1) = priors
        .lateral_window
        .unwrap_or((0.0, grid.lx, 0.0, grid.ly));
    let mut defects = Vec::with_capacity(n_defects);
    let mut attempts = 0;
    while defects.len() < n_defects {
        if attempts >= priors.max_attempts {
            return Err(Error::SceneGeneration {
                attempts,
                reason: format!(
                    "placed {} of {n_defects} defects inside the 1-voxel margin",
                    defects.len()
                ),
            });
        }
        attempts += 1;
        let shape = match rng.random_range(0..3) {
            0 => DefectShape::Ellipsoid,
            1 => DefectShape::Cylinder,
            _ => DefectShape::Box,
        };
        let (hx, hy) = if shape == DefectShape::Cylinder {
            let r = uniform(&mut rng, priors.cylinder_radius);
            (r, r)
        } else {
            (
                uniform(&mut rng, priors.half_extent_xy),
                uniform(&mut rng, priors.half_extent_xy),
            )
        };
        let hz = uniform(&mut rng, priors.half_extent_z);
        let center = [
            uniform(&mut rng, (wx0, wx1)),
            uniform(&mut rng, (wy0, wy1)),
            uniform(&mut rng, priors.center_z),
        ];
        let alpha_defect = uniform(&mut rng, priors.alpha_defect);
        let h = [hx, hy, hz];
        if (0..3).all(|a| center[a] - h[a] >= lo[a] && center[a] + h[a] <= hi[a]) {
            defects.push(Defect {
                shape,
                center,
                half_extents: h,
                alpha_defect,
            });
        }
    }
    let scene = SceneDescription {
        mode,
        layers,
        defects,
    };
    scene.validate(lz)?;
    Ok(scene)
}

/// Defect value wherever a voxel centre lies inside one (later defects win), layer value elsewhere.
pub fn rasterize_scene(scene: &SceneDescription, grid: &GridSpec) -> ScalarField3D {
    ScalarField3D::from_fn(*grid, |i, j, k| {
        let p = grid.voxel_center(i, j, k);
        scene
            .defects
            .iter()
            .rev()
            .find(|d| d.contains(p))
            .map(|d| d.alpha_defect)
            .unwrap_or_else(|| scene.layer_alpha_at(p[2]))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub center: [f64; 3],
    pub intensity: f64,
    /// Gaussian standard deviation.
    pub radius: f64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self {
            center: [5.0, 5.0, 0.8],
            intensity: 100.0,
            radius: 0.5,
        }
    }
}

impl SourceSpec {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        if !(self.intensity > 0.0 && self.radius > 0.0) {
            return Err(Error::Domain(
                "source intensity and radius must be positive".into(),
            ));
        }
        let ext = [grid.lx, grid.ly, grid.lz];
        if (0..3).any(|a| !(0.0..=ext[a]).contains(&self.center[a])) {
            return Err(Error::Domain(format!(
                "source centre {:?} outside the domain",
                self.center
            )));
        }
        Ok(())
    }
}

/// `I0 exp(-|x - c|^2 / (2 R^2))` at voxel centres.
pub fn initial_condition(grid: &GridSpec, src: &SourceSpec) -> ScalarField3D {
    let two_r2 = 2.0 * src.radius * src.radius;
    ScalarField3D::from_fn(*grid, |i, j, k| {
        let p = grid.voxel_center(i, j, k);
        let d2: f64 = (0..3).map(|a| (p[a] - src.center[a]).powi(2)).sum();
        src.intensity * (-d2 / two_r2).exp()
    })
}

/// Adds `N(0, (std_fraction * max_t)^2)` to every pixel of frame `t`.
pub fn add_noise(frames: &mut [SurfaceFrame], std_fraction: f64, seed: u64) -> Result<()> {
    if std_fraction == 0.0 {
        return Ok(());
    }
    if !(std_fraction > 0.0 && std_fraction.is_finite()) {
        return Err(Error::Domain(format!(
            "noise std {std_fraction} must be non-negative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    for f in frames {
        let sd = std_fraction * f.max().abs();
        if sd == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, sd).map_err(|e| Error::Domain(e.to_string()))?;
        for v in &mut f.data {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(())
}

/// Independent per-sample seed derived from a run seed and sample index.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 2);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
}

impl From<GridSpec> for GridMeta {
    fn from(g: GridSpec) -> Self {
        Self {
            nx: g.nx,
            ny: g.ny,
            nz: g.nz,
            lx: g.lx,
            ly: g.ly,
            lz: g.lz,
        }
    }
}

impl GridMeta {
    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.nx, self.ny, self.nz, self.lx, self.ly, self.lz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveMeta {
    pub dt: f64,
    pub n_steps: usize,
    pub mean_mode: MeanMode,
    pub eps: f64,
    /// Explicit substeps per recorded frame.
    pub substeps: usize,
}

/// Contents of `scene.meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub seed: u64,
    pub noise_std: f64,
    pub grid: GridMeta,
    pub source: SourceSpec,
    pub solve: SolveMeta,
    pub scene: SceneDescription,
}

pub const ALPHA_FILE: &str = "alpha_gt.nftf";
pub const FRAMES_FILE: &str = "surface_obs.nftf";
pub const T0_FILE: &str = "T0.nftf";
pub const META_FILE: &str = "scene.meta";

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub dir: PathBuf,
    pub alpha_gt: ScalarField3D,
    pub t0: ScalarField3D,
    /// Frames for steps `1..=M`.
    pub frames: Vec<SurfaceFrame>,
    pub meta: SampleMeta,
}

impl DatasetRecord {
    /// Observation bundle for the inversion, solved with `solver`.
    pub fn observations(&self, solver: LinearSolver) -> Observations {
        Observations {
            frames: self.frames.clone(),
            t0: self.t0.clone(),
            solve: SolveConfig {
                dt: self.meta.solve.dt,
                n_steps: self.meta.solve.n_steps,
                solver,
                source: None,
                mean_mode: MeanMode::Harmonic,
                eps: self.meta.solve.eps,
            },
        }
    }
}

fn io_context(e: Error, out_dir: &Path) -> Error {
    match e {
        Error::Io { path, source } => Error::Io { path, source },
        Error::Instability { frame, substep } => Error::Instability { frame, substep },
        other => Error::Domain(format!("sample {}: {other}", out_dir.display())),
    }
}

/// Rasterizes, runs the explicit solver and writes the four sample files.
pub fn generate_sample(
    scene: &SceneDescription,
    grid: &GridSpec,
    src: &SourceSpec,
    cfg: &SolveConfig,
    seed: u64,
    noise_std: f64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetRecord> {
    let out_dir = out_dir.as_ref();
    scene.validate(grid.lz)?;
    src.validate(grid)?;
    if cfg.source.is_some() {
        return Err(Error::Domain(
            "sample generation does not take a source term".into(),
        ));
    }
    let alpha_gt = rasterize_scene(scene, grid);
    let t0 = initial_condition(grid, src);
    let traj = simulate_explicit(&alpha_gt, &t0, cfg).map_err(|e| io_context(e, out_dir))?;
    let mut frames = traj.surface_frames[1..].to_vec();
    add_noise(&mut frames, noise_std, seed)?;
    let meta = SampleMeta {
        seed,
        noise_std,
        grid: (*grid).into(),
        source: *src,
        solve: SolveMeta {
            dt: cfg.dt,
            n_steps: cfg.n_steps,
            mean_mode: cfg.mean_mode,
            eps: cfg.eps,
            substeps: explicit_substeps(&alpha_gt, cfg.dt),
        },
        scene: scene.clone(),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_field(&alpha_gt, out_dir.join(ALPHA_FILE))?;
    write_field(&t0, out_dir.join(T0_FILE))?;
    write_field(
        &stack_frames(&frames, grid.lx, grid.ly, cfg.dt)?,
        out_dir.join(FRAMES_FILE),
    )?;
    let text = toml::to_string(&meta).map_err(|e| Error::Domain(e.to_string()))?;
    let meta_path = out_dir.join(META_FILE);
    std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(DatasetRecord {
        dir: out_dir.to_path_buf(),
        alpha_gt,
        t0,
        frames,
        meta,
    })
}

pub fn load_sample(dir: impl AsRef<Path>) -> Result<DatasetRecord> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SampleMeta = toml::from_str(&text).map_err(|e| Error::Config {
        key: META_FILE.into(),
        message: e.to_string(),
    })?;
    let grid = meta.grid.spec()?;
    let alpha_gt = read_field(dir.join(ALPHA_FILE))?;
    let t0 = read_field(dir.join(T0_FILE))?;
    grid.ensure_same(alpha_gt.grid())?;
    grid.ensure_same(t0.grid())?;
    let frames = unstack_frames(&read_field(dir.join(FRAMES_FILE))?);
    if frames.len() != meta.solve.n_steps {
        return Err(Error::Shape(format!(
            "{} stored frames for {} steps",
            frames.len(),
            meta.solve.n_steps
        )));
    }
    Ok(DatasetRecord {
        dir: dir.to_path_buf(),
        alpha_gt,
        t0,
        frames,
        meta,
    })
}

/// `alpha_phys = alpha_sim * t_total / (T_sim * L0^2)`.
pub fn physical_scaling(alpha_sim: f64, length_scale: f64, t_total: f64, t_sim: f64) -> Result<f64> {
    if !(length_scale > 0.0 && t_total > 0.0 && t_sim > 0.0 && alpha_sim > 0.0) {
        return Err(Error::Domain("scaling inputs must be positive".into()));
    }
    Ok(alpha_sim * t_total / (t_sim * length_scale * length_scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn desk_grid() -> GridSpec {
        GridSpec::new(32, 32, 8, 10.0, 10.0, 1.0).unwrap()
    }

    #[test]
    fn same_seed_same_scene() {
        let g = desk_grid();
        let a = sample_scene(7, SceneMode::Layered, 3, &g).unwrap();
        assert_eq!(a, sample_scene(7, SceneMode::Layered, 3, &g).unwrap());
        assert_ne!(a, sample_scene(8, SceneMode::Layered, 3, &g).unwrap());
    }

    #[test]
    fn sampled_values_stay_in_range() {
        let g = desk_grid();
        for seed in 0..1000 {
            let mode = if seed % 2 == 0 {
                SceneMode::Homogeneous
            } else {
                SceneMode::Layered
            };
            let s = sample_scene(seed, mode, 1 + (seed as usize % 4), &g).unwrap();
            assert!(s.layers.iter().all(|l| (0.1..=0.2).contains(&l.alpha)));
            assert!(s
                .defects
                .iter()
                .all(|d| (0.005..=0.015).contains(&d.alpha_defect)));
            match mode {
                SceneMode::Homogeneous => assert_eq!(s.layers.len(), 1),
                SceneMode::Layered => assert!((3..=4).contains(&s.layers.len())),
            }
            s.validate(g.lz).unwrap();
        }
    }

    #[test]
    fn homogeneous_layer_spans_the_slab() {
        let g = desk_grid();
        let s = sample_scene(1, SceneMode::Homogeneous, 1, &g).unwrap();
        assert_eq!(s.layers[0].z_lo, 0.0);
        assert_eq!(s.layers[0].z_hi, 1.0);
    }

    #[test]
    fn impossible_placement_fails_after_the_attempt_budget() {
        let g = desk_grid();
        let priors = ScenePriors {
            half_extent_z: (0.6, 0.7),
            ..ScenePriors::default()
        };
        assert!(matches!(
            sample_scene_with(1, SceneMode::Homogeneous, 1, &g, &priors),
            Err(Error::SceneGeneration { attempts: 1000, .. })
        ));
        assert!(sample_scene(1, SceneMode::Homogeneous, 0, &g).is_err());
    }

    #[test]
    fn box_on_voxel_boundaries_sets_enclosed_voxels() {
        let g = GridSpec::new(10, 10, 10, 10.0, 10.0, 10.0).unwrap();
        let mut scene = SceneDescription::homogeneous(10.0, 0.15);
        scene.defects.push(Defect {
            shape: DefectShape::Box,
            center: [4.0, 5.0, 6.0],
            half_extents: [2.0, 1.0, 1.0],
            alpha_defect: 0.01,
        });
        let a = rasterize_scene(&scene, &g);
        for k in 0..10 {
            for j in 0..10 {
                for i in 0..10 {
                    let inside = (2..6).contains(&i) && (4..6).contains(&j) && (5..7).contains(&k);
                    assert_eq!(a.get(i, j, k), if inside { 0.01 } else { 0.15 });
                }
            }
        }
    }

    #[test]
    fn defect_free_homogeneous_is_constant() {
        let g = desk_grid();
        let a = rasterize_scene(&SceneDescription::homogeneous(1.0, 0.12), &g);
        assert!(a.data().iter().all(|&v| v == 0.12));
    }

    #[test]
    fn later_defects_win() {
        let g = GridSpec::new(8, 8, 8, 8.0, 8.0, 8.0).unwrap();
        let mut scene = SceneDescription::homogeneous(8.0, 0.15);
        for alpha_defect in [0.01, 0.005] {
            scene.defects.push(Defect {
                shape: DefectShape::Box,
                center: [4.0; 3],
                half_extents: [1.0; 3],
                alpha_defect,
            });
        }
        assert_eq!(rasterize_scene(&scene, &g).get(3, 3, 3), 0.005);
    }

    #[test]
    fn rasterized_ellipsoid_volume_is_close_to_analytic() {
        let g = GridSpec::new(40, 40, 40, 10.0, 10.0, 10.0).unwrap();
        let d = Defect {
            shape: DefectShape::Ellipsoid,
            center: [5.1, 4.9, 5.05],
            half_extents: [1.3, 2.0, 1.1],
            alpha_defect: 0.01,
        };
        let mut scene = SceneDescription::homogeneous(10.0, 0.15);
        scene.defects.push(d);
        let a = rasterize_scene(&scene, &g);
        let count = a.data().iter().filter(|&&v| v == 0.01).count();
        let vol = count as f64 * g.voxel_volume();
        assert!((vol - d.analytic_volume()).abs() <= 0.15 * d.analytic_volume());
    }

    #[test]
    fn cylinder_membership() {
        let d = Defect {
            shape: DefectShape::Cylinder,
            center: [0.0; 3],
            half_extents: [1.0, 1.0, 0.5],
            alpha_defect: 0.01,
        };
        assert!(d.contains([0.7, 0.7, 0.49]));
        assert!(!d.contains([0.8, 0.8, 0.0]));
        assert!(!d.contains([0.0, 0.0, 0.51]));
    }

    #[test]
    fn initial_condition_values() {
        let g = GridSpec::new(64, 64, 16, 10.0, 10.0, 1.0).unwrap();
        let src = SourceSpec::default();
        let t0 = initial_condition(&g, &src);
        assert!(t0.data().iter().all(|&v| v > 0.0));
        // nearest voxel to (5, 5, 0.8) has centre (5.078, 5.078, 0.78125)
        let near = t0.get(31, 31, 12);
        assert!(near > 95.0 && near <= 100.0, "{near}");
        let g1 = GridSpec::new(2, 2, 2, 2.0, 2.0, 2.0).unwrap();
        let at_r = initial_condition(
            &g1,
            &SourceSpec {
                center: [0.5, 0.5, 1.0],
                intensity: 100.0,
                radius: 0.5,
            },
        );
        assert_relative_eq!(at_r.get(0, 0, 0), 60.653_065_971_263_34, max_relative = 1e-12);
    }

    #[test]
    fn physical_scaling_round_trip() {
        let a = physical_scaling(0.1, 1e-5, 5e-9, 5.0).unwrap();
        assert_relative_eq!(a, 1.0, max_relative = 1e-12);
        assert_relative_eq!(a * (5.0 * 1e-10 / 5e-9), 0.1, max_relative = 1e-12);
        assert_relative_eq!(
            physical_scaling(0.2, 1e-5, 5e-9, 5.0).unwrap(),
            2.0 * a,
            max_relative = 1e-12
        );
        assert!(physical_scaling(0.1, 0.0, 1.0, 1.0).is_err());
    }

    fn small_cfg() -> SolveConfig {
        SolveConfig {
            n_steps: 6,
            ..SolveConfig::default()
        }
    }

    #[test]
    fn record_round_trips_bit_for_bit() {
        let g = GridSpec::new(16, 16, 4, 10.0, 10.0, 1.0).unwrap();
        let scene = sample_scene(3, SceneMode::Layered, 2, &g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rec = generate_sample(
            &scene,
            &g,
            &SourceSpec::default(),
            &small_cfg(),
            3,
            0.01,
            dir.path(),
        )
        .unwrap();
        let back = load_sample(dir.path()).unwrap();
        assert_eq!(back.alpha_gt, rec.alpha_gt);
        assert_eq!(back.t0, rec.t0);
        assert_eq!(back.frames, rec.frames);
        assert_eq!(back.meta, rec.meta);
        assert!(back.meta.solve.substeps >= 10);
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let g = GridSpec::new(12, 12, 4, 10.0, 10.0, 1.0).unwrap();
        let scene = sample_scene(5, SceneMode::Homogeneous, 1, &g).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [a.path(), b.path()] {
            generate_sample(&scene, &g, &SourceSpec::default(), &small_cfg(), 5, 0.02, d).unwrap();
        }
        for f in [ALPHA_FILE, FRAMES_FILE, T0_FILE, META_FILE] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn defect_free_frames_are_symmetric_about_the_source() {
        let g = GridSpec::new(20, 20, 4, 10.0, 10.0, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rec = generate_sample(
            &SceneDescription::homogeneous(1.0, 0.15),
            &g,
            &SourceSpec::default(),
            &small_cfg(),
            0,
            0.0,
            dir.path(),
        )
        .unwrap();
        for f in &rec.frames {
            for j in 0..20 {
                for i in 0..20 {
                    let v = f.get(i, j);
                    assert!((v - f.get(19 - i, j)).abs() <= 1e-10);
                    assert!((v - f.get(i, 19 - j)).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn shallow_defect_shows_near_its_lateral_position() {
        let g = GridSpec::new(32, 32, 8, 10.0, 10.0, 1.0).unwrap();
        let src = SourceSpec {
            radius: 2.0,
            ..SourceSpec::default()
        };
        let cfg = SolveConfig {
            n_steps: 20,
            ..SolveConfig::default()
        };
        let clean = SceneDescription::homogeneous(1.0, 0.15);
        let mut flawed = clean.clone();
        flawed.defects.push(Defect {
            shape: DefectShape::Box,
            center: [6.5, 4.0, 0.65],
            half_extents: [0.8, 0.8, 0.15],
            alpha_defect: 0.01,
        });
        let dir = tempfile::tempdir().unwrap();
        let a = generate_sample(&clean, &g, &src, &cfg, 0, 0.0, dir.path().join("a")).unwrap();
        let b = generate_sample(&flawed, &g, &src, &cfg, 0, 0.0, dir.path().join("b")).unwrap();
        let last = cfg.n_steps - 1;
        let (mut best, mut at) = (0.0, (0, 0));
        for j in 0..32 {
            for i in 0..32 {
                let d = (a.frames[last].get(i, j) - b.frames[last].get(i, j)).abs();
                if d > best {
                    best = d;
                    at = (i, j);
                }
            }
        }
        assert!(best > 0.0);
        let c = g.voxel_center(at.0, at.1, 0);
        assert!((c[0] - 6.5).abs() <= 1.0 && (c[1] - 4.0).abs() <= 1.0, "{c:?}");
    }

    #[test]
    fn noise_is_seeded() {
        let base = vec![SurfaceFrame {
            nx: 2,
            ny: 2,
            data: vec![1.0, 2.0, 3.0, 4.0],
        }];
        let mut a = base.clone();
        let mut b = base.clone();
        add_noise(&mut a, 0.1, 9).unwrap();
        add_noise(&mut b, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, base);
        let mut c = base.clone();
        add_noise(&mut c, 0.0, 9).unwrap();
        assert_eq!(c, base);
    }
}
