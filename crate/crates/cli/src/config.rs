//! Run configuration: built-in defaults < config file < command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thermotomo::datagen::{SceneMode, SourceSpec};
use thermotomo::inversion::{Ablation, InversionConfig, LossConfig, NetworkConfig, OptimConfig};
use thermotomo::neural_field::OutputHead;
use thermotomo::solver::{LinearSolver, SolveConfig};
use thermotomo::{Error, GridSpec, MeanMode, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub depth: usize,
    pub width: usize,
    pub num_freqs: usize,
    pub skip_layers: Vec<usize>,
    /// `sigmoid` or `softplus`.
    pub output: String,
    pub include_raw: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            depth: 10,
            width: 512,
            num_freqs: 12,
            skip_layers: vec![4],
            output: "sigmoid".into(),
            include_raw: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSection {
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Default for DomainSection {
    fn default() -> Self {
        Self {
            lx: 10.0,
            ly: 10.0,
            lz: 1.0,
            nx: 64,
            ny: 64,
            nz: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub dt: f64,
    pub n_steps: usize,
    /// `jacobi` or `direct`.
    pub linear_solver: String,
    pub jacobi_iters: usize,
    /// `harmonic` or `arithmetic`.
    pub mean: String,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub eps: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            dt: 0.05,
            n_steps: 100,
            linear_solver: "jacobi".into(),
            jacobi_iters: 50,
            mean: "harmonic".into(),
            alpha_min: 0.003,
            alpha_max: 0.25,
            eps: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSection {
    pub center: [f64; 3],
    pub intensity: f64,
    pub radius: f64,
}

impl Default for SourceSection {
    fn default() -> Self {
        let s = SourceSpec::default();
        Self {
            center: s.center,
            intensity: s.intensity,
            radius: s.radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizationSection {
    pub lr: f64,
    pub gamma: f64,
    pub decay_every: usize,
    pub iters: usize,
    pub anneal_iters: usize,
    /// Learning rate of the per-voxel baseline.
    pub grid_lr: f64,
    pub checkpoint_every: usize,
}

impl Default for OptimizationSection {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            gamma: 0.1,
            decay_every: 1000,
            iters: 10_000,
            anneal_iters: 2500,
            grid_lr: 5e-5,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizationSection {
    pub tv_weight: f64,
    pub sym_weight_start: f64,
    pub sym_anneal_iters: usize,
}

impl Default for RegularizationSection {
    fn default() -> Self {
        Self {
            tv_weight: 1e-2,
            sym_weight_start: 100.0,
            sym_anneal_iters: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `homogeneous` or `layered`.
    pub mode: String,
    pub count: usize,
    /// 0 draws 1 to 4 per sample.
    pub n_defects: usize,
    pub noise_std: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            mode: "homogeneous".into(),
            count: 1,
            n_defects: 0,
            noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Input sample directory for `reconstruct`.
    pub sample: String,
    /// Output directory.
    pub out: String,
    /// `nefty` or `grid`.
    pub baseline: String,
    pub ablation: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            sample: String::new(),
            out: String::new(),
            baseline: "nefty".into(),
            ablation: "full".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub network: NetworkSection,
    pub domain: DomainSection,
    pub solver: SolverSection,
    pub source: SourceSection,
    pub optimization: OptimizationSection,
    pub regularization: RegularizationSection,
    pub data: DataSection,
}

pub const PROVENANCE_KEY: &str = "provenance";

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Parses a `section.key=value` override; values are read as TOML, falling back to a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(spec, "override must look like section.key=value"))?;
    let path = path.trim();
    let (section, key) = path
        .split_once('.')
        .ok_or_else(|| config_err(path, "override key must be section.key"))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(config_err(section, "is not a section")),
    }
}

impl RunConfig {
    /// Defaults, then `text` (config file contents), then `overrides` in order.
    /// A `[provenance]` table is ignored so a `run.meta` can be fed back in.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| config_err("config", e.to_string()))?,
            None => toml::Table::new(),
        };
        table.remove(PROVENANCE_KEY);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| config_err("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.solver;
        if !(s.alpha_min > 0.0 && s.alpha_min < s.alpha_max) {
            return Err(config_err(
                "solver.alpha_min, solver.alpha_max",
                format!(
                    "need 0 < alpha_min < alpha_max, got {} and {}",
                    s.alpha_min, s.alpha_max
                ),
            ));
        }
        if !(s.dt > 0.0) {
            return Err(config_err("solver.dt", "must be positive"));
        }
        if s.n_steps == 0 {
            return Err(config_err("solver.n_steps", "must be at least 1"));
        }
        if s.jacobi_iters == 0 {
            return Err(config_err("solver.jacobi_iters", "must be at least 1"));
        }
        if !(s.eps >= 0.0) {
            return Err(config_err("solver.eps", "must be non-negative"));
        }
        self.mean_mode()?;
        self.linear_solver()?;
        self.head()?;
        self.scene_mode()?;
        self.ablation()?;
        if !matches!(self.run.baseline.as_str(), "nefty" | "grid") {
            return Err(config_err(
                "run.baseline",
                format!("`{}` is not nefty or grid", self.run.baseline),
            ));
        }
        let d = &self.domain;
        for (k, n) in [("domain.nx", d.nx), ("domain.ny", d.ny), ("domain.nz", d.nz)] {
            if n < 2 {
                return Err(config_err(k, "must be at least 2"));
            }
        }
        for (k, l) in [("domain.lx", d.lx), ("domain.ly", d.ly), ("domain.lz", d.lz)] {
            if !(l > 0.0) {
                return Err(config_err(k, "must be positive"));
            }
        }
        let n = &self.network;
        if n.width == 0 || n.depth == 0 {
            return Err(config_err("network.width, network.depth", "must be at least 1"));
        }
        if n.num_freqs == 0 && !n.include_raw {
            return Err(config_err(
                "network.num_freqs",
                "must be positive unless include_raw is set",
            ));
        }
        if let Some(s) = n.skip_layers.iter().find(|&&s| s == 0 || s >= n.depth) {
            return Err(config_err(
                "network.skip_layers",
                format!("layer {s} outside 1..{}", n.depth),
            ));
        }
        let o = &self.optimization;
        for (k, v) in [("optimization.lr", o.lr), ("optimization.grid_lr", o.grid_lr)] {
            if !(v > 0.0) {
                return Err(config_err(k, "must be positive"));
            }
        }
        if !(o.gamma > 0.0) {
            return Err(config_err("optimization.gamma", "must be positive"));
        }
        if o.decay_every == 0 {
            return Err(config_err("optimization.decay_every", "must be at least 1"));
        }
        let r = &self.regularization;
        if !(r.tv_weight >= 0.0) {
            return Err(config_err("regularization.tv_weight", "must be non-negative"));
        }
        if !(r.sym_weight_start >= 0.0) {
            return Err(config_err(
                "regularization.sym_weight_start",
                "must be non-negative",
            ));
        }
        let src = &self.source;
        if !(src.intensity > 0.0 && src.radius > 0.0) {
            return Err(config_err(
                "source.intensity, source.radius",
                "must be positive",
            ));
        }
        if self.data.n_defects > 4 {
            return Err(config_err("data.n_defects", "must be 0 (random) or 1 to 4"));
        }
        if !(self.data.noise_std >= 0.0) {
            return Err(config_err("data.noise_std", "must be non-negative"));
        }
        Ok(())
    }

    pub fn mean_mode(&self) -> Result<MeanMode> {
        match self.solver.mean.as_str() {
            "harmonic" => Ok(MeanMode::Harmonic),
            "arithmetic" => Ok(MeanMode::Arithmetic),
            other => Err(config_err(
                "solver.mean",
                format!("`{other}` is not harmonic or arithmetic"),
            )),
        }
    }

    pub fn linear_solver(&self) -> Result<LinearSolver> {
        match self.solver.linear_solver.as_str() {
            "jacobi" => Ok(LinearSolver::Jacobi {
                iters: self.solver.jacobi_iters,
            }),
            "direct" => Ok(LinearSolver::Direct),
            other => Err(config_err(
                "solver.linear_solver",
                format!("`{other}` is not jacobi or direct"),
            )),
        }
    }

    pub fn head(&self) -> Result<OutputHead> {
        match self.network.output.as_str() {
            "sigmoid" => Ok(OutputHead::ScaledSigmoid),
            "softplus" => Ok(OutputHead::Softplus),
            other => Err(config_err(
                "network.output",
                format!("`{other}` is not sigmoid or softplus"),
            )),
        }
    }

    pub fn scene_mode(&self) -> Result<SceneMode> {
        SceneMode::parse(&self.data.mode).ok_or_else(|| {
            config_err(
                "data.mode",
                format!("`{}` is not homogeneous or layered", self.data.mode),
            )
        })
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::parse(&self.run.ablation).ok_or_else(|| {
            config_err(
                "run.ablation",
                format!("`{}` is not a known ablation", self.run.ablation),
            )
        })
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let d = &self.domain;
        GridSpec::new(d.nx, d.ny, d.nz, d.lx, d.ly, d.lz)
    }

    pub fn source_spec(&self) -> SourceSpec {
        SourceSpec {
            center: self.source.center,
            intensity: self.source.intensity,
            radius: self.source.radius,
        }
    }

    pub fn solve_config(&self) -> Result<SolveConfig> {
        Ok(SolveConfig {
            dt: self.solver.dt,
            n_steps: self.solver.n_steps,
            solver: self.linear_solver()?,
            source: None,
            mean_mode: self.mean_mode()?,
            eps: self.solver.eps,
        })
    }

    pub fn inversion_config(&self, grid: &GridSpec) -> Result<InversionConfig> {
        let n = &self.network;
        let o = &self.optimization;
        let r = &self.regularization;
        Ok(InversionConfig {
            network: NetworkConfig {
                width: n.width,
                depth: n.depth,
                skip_layers: n.skip_layers.clone(),
                num_freqs: n.num_freqs,
                include_raw: n.include_raw,
                head: self.head()?,
                alpha_min: self.solver.alpha_min,
                alpha_max: self.solver.alpha_max,
            },
            optim: OptimConfig {
                iters: o.iters,
                lr: o.lr,
                lr_gamma: o.gamma,
                lr_decay_every: o.decay_every,
                anneal: true,
                anneal_iters: o.anneal_iters,
                seed: self.run.seed,
                checkpoint_every: o.checkpoint_every,
            },
            loss: LossConfig {
                tv_weight: r.tv_weight,
                sym_weight_start: r.sym_weight_start,
                sym_anneal_iters: r.sym_anneal_iters,
                ..LossConfig::new(grid.nx, grid.ny)
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.solver.jacobi_iters, 50);
        assert_eq!(c.regularization.tv_weight, 0.01);
        assert_eq!(c.network.width, 512);
        assert_eq!(c.optimization.iters, 10_000);
        assert_eq!(RunConfig::resolve(Some(""), &[]).unwrap(), c);
    }

    #[test]
    fn flags_override_file() {
        let c = RunConfig::resolve(
            Some("[optimization]\niters = 10000\n"),
            &["optimization.iters=2000".into()],
        )
        .unwrap();
        assert_eq!(c.optimization.iters, 2000);
    }

    #[test]
    fn file_overrides_defaults() {
        let c = RunConfig::resolve(
            Some("# comment\n[solver]\njacobi_iters = 80\nmean = \"arithmetic\"\n"),
            &[],
        )
        .unwrap();
        assert_eq!(c.solver.jacobi_iters, 80);
        assert_eq!(c.mean_mode().unwrap(), MeanMode::Arithmetic);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::resolve(Some("[solver]\njacobi_iter = 3\n"), &[]).unwrap_err();
        assert!(e.to_string().contains("jacobi_iter"), "{e}");
        let e = RunConfig::resolve(None, &["solver.jacobi_iter=3".into()]).unwrap_err();
        assert!(e.to_string().contains("jacobi_iter"), "{e}");
    }

    #[test]
    fn type_mismatch_is_named() {
        let e = RunConfig::resolve(Some("[solver]\njacobi_iters = \"many\"\n"), &[]).unwrap_err();
        assert!(e.to_string().contains("jacobi_iters"), "{e}");
    }

    #[test]
    fn inverted_bounds_name_both_keys() {
        let e = RunConfig::resolve(
            Some("[solver]\nalpha_min = 0.3\nalpha_max = 0.25\n"),
            &[],
        )
        .unwrap_err();
        let s = e.to_string();
        assert!(s.contains("alpha_min") && s.contains("alpha_max"), "{s}");
    }

    #[test]
    fn serialized_config_reparses() {
        let c = RunConfig::resolve(None, &["network.width=32".into(), "data.mode=layered".into()]).unwrap();
        let back = RunConfig::resolve(Some(&c.to_toml()), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.data.mode, "layered");
    }
}
