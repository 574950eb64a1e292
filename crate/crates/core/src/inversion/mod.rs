//! Outer optimization: field -> implicit solve -> misfit -> adjoint -> backprop -> Adam.

mod loss;
mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use loss::{data_loss, data_loss_step_grad, data_loss_value, flip_x, flip_y, symmetry_loss, tv_regularizer, LossConfig};
pub use optim::{Adam, Schedule, ScheduleValues, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::adjoint::backward_pass_streaming;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, MeanMode, ScalarField3D, SurfaceFrame};
use crate::io::write_field;
use crate::neural_field::{
    field_backward, field_forward, write_params, xavier_init, Architecture, EncodingConfig,
    NeuralFieldParams, OutputHead,
};
use crate::solver::{simulate_implicit, SolveConfig};

/// What the inversion fits against.
#[derive(Debug, Clone)]
pub struct Observations {
    /// Observed surface frames for steps `1..=M`.
    pub frames: Vec<SurfaceFrame>,
    pub t0: ScalarField3D,
    pub solve: SolveConfig,
}

impl Observations {
    pub fn grid(&self) -> &GridSpec {
        self.t0.grid()
    }

    pub fn validate(&self) -> Result<()> {
        self.solve.validate(self.grid())?;
        if self.frames.len() != self.solve.n_steps {
            return Err(Error::Shape(format!(
                "{} observed frames for {} steps",
                self.frames.len(),
                self.solve.n_steps
            )));
        }
        let g = self.grid();
        if let Some(f) = self.frames.iter().find(|f| f.nx != g.nx || f.ny != g.ny) {
            return Err(Error::Shape(format!(
                "observed frame {}x{} on a {}x{} surface",
                f.nx, f.ny, g.nx, g.ny
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub width: usize,
    pub depth: usize,
    pub skip_layers: Vec<usize>,
    pub num_freqs: usize,
    pub include_raw: bool,
    pub head: OutputHead,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width: 512,
            depth: 10,
            skip_layers: vec![4],
            num_freqs: 12,
            include_raw: false,
            head: OutputHead::ScaledSigmoid,
            alpha_min: 0.003,
            alpha_max: 0.25,
        }
    }
}

impl NetworkConfig {
    pub fn encoding(&self, beta: f64) -> EncodingConfig {
        EncodingConfig {
            num_freqs: self.num_freqs,
            include_raw: self.include_raw,
            anneal_beta: beta,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            in_dim: self.encoding(0.0).encoded_dim(),
            width: self.width,
            depth: self.depth,
            skip_layers: self.skip_layers.clone(),
            head: self.head,
            alpha_min: self.alpha_min,
            alpha_max: self.alpha_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub iters: usize,
    pub lr: f64,
    pub lr_gamma: f64,
    pub lr_decay_every: usize,
    pub anneal: bool,
    pub anneal_iters: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iters: 10_000,
            lr: 5e-5,
            lr_gamma: 0.1,
            lr_decay_every: 1000,
            anneal: true,
            anneal_iters: 2500,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub network: NetworkConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
}

impl InversionConfig {
    pub fn new(grid: &GridSpec) -> Self {
        Self {
            network: NetworkConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::new(grid.nx, grid.ny),
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr0: self.optim.lr,
            gamma: self.optim.lr_gamma,
            decay_every: self.optim.lr_decay_every,
            num_freqs: self.network.num_freqs,
            anneal_iters: self.optim.anneal.then_some(self.optim.anneal_iters),
            sym_start: self.loss.sym_weight_start,
            sym_anneal_iters: self.loss.sym_anneal_iters,
        }
    }
}

/// Cumulative switches from the plain coordinate MLP up to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Raw coordinates, softplus head, arithmetic faces, no regularization.
    Base,
    /// Positional encoding, all bands open.
    Pe,
    /// Plus frequency annealing.
    PeFa,
    /// Plus scaled sigmoid head.
    PeFaSig,
    /// Plus harmonic face means.
    PeFaSigHm,
    /// Plus TV and symmetry regularization.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Base,
        Ablation::Pe,
        Ablation::PeFa,
        Ablation::PeFaSig,
        Ablation::PeFaSigHm,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::Pe => "pe",
            Ablation::PeFa => "pe_fa",
            Ablation::PeFaSig => "pe_fa_sig",
            Ablation::PeFaSigHm => "pe_fa_sig_hm",
            Ablation::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Rewrites the levers this ablation controls; everything else is kept.
    pub fn apply(self, cfg: &mut InversionConfig, solve: &mut SolveConfig) {
        let rank = Self::ALL.iter().position(|&a| a == self).expect("listed");
        if rank == 0 {
            cfg.network.include_raw = true;
            cfg.network.num_freqs = 0;
        } else {
            cfg.network.include_raw = false;
            if cfg.network.num_freqs == 0 {
                cfg.network.num_freqs = 12;
            }
        }
        cfg.optim.anneal = rank >= 2;
        cfg.network.head = if rank >= 3 {
            OutputHead::ScaledSigmoid
        } else {
            OutputHead::Softplus
        };
        solve.mean_mode = if rank >= 4 {
            MeanMode::Harmonic
        } else {
            MeanMode::Arithmetic
        };
        if rank < 5 {
            cfg.loss.tv_weight = 0.0;
            cfg.loss.sym_weight_start = 0.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub data_loss: f64,
    pub tv: f64,
    pub sym: f64,
    pub total: f64,
    pub lr: f64,
    pub beta: f64,
}

pub const HISTORY_HEADER: &str = "iter,data_loss,tv,sym,total,lr,beta";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{}",
            r.iter, r.data_loss, r.tv, r.sym, r.total, r.lr, r.beta
        );
    }
    out
}

pub fn write_history(rows: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Loss terms and the total alpha-space gradient for one field.
#[derive(Debug)]
pub struct Evaluation {
    pub data_loss: f64,
    pub tv: f64,
    pub sym: f64,
    pub total: f64,
    pub grad_alpha: ScalarField3D,
}

/// `total = data + tv_weight * TV + sym_weight * sym`, gradients summed in alpha-space.
pub fn evaluate_alpha(
    alpha: &ScalarField3D,
    obs: &Observations,
    loss: &LossConfig,
    sym_weight: f64,
) -> Result<Evaluation> {
    let traj = simulate_implicit(alpha, &obs.t0, &obs.solve)?;
    let grid = *obs.grid();
    let (data, norm) =
        data_loss_value(&traj.surface_frames[1..], &obs.frames, &loss.mask, &grid)?;
    let grads = backward_pass_streaming(alpha, &traj, &obs.solve, |n, _| {
        Ok(data_loss_step_grad(
            &traj.surface_frames[n],
            &obs.frames[n - 1],
            &loss.mask,
            &grid,
            norm,
        ))
    })?;
    drop(traj);
    let mut grad_alpha = grads.alpha;
    let (mut tv, mut sym) = (0.0, 0.0);
    if loss.tv_weight > 0.0 {
        let (v, g) = tv_regularizer(alpha);
        tv = v;
        axpy(loss.tv_weight, &g, &mut grad_alpha);
    }
    if sym_weight > 0.0 {
        let (v, g) = symmetry_loss(alpha);
        sym = v;
        axpy(sym_weight, &g, &mut grad_alpha);
    }
    Ok(Evaluation {
        data_loss: data,
        tv,
        sym,
        total: data + loss.tv_weight * tv + sym_weight * sym,
        grad_alpha,
    })
}

fn axpy(a: f64, x: &ScalarField3D, y: &mut ScalarField3D) {
    for (yi, xi) in y.data_mut().iter_mut().zip(x.data()) {
        *yi += a * xi;
    }
}

#[derive(Debug)]
pub struct NeuralReconstruction {
    pub alpha: ScalarField3D,
    pub theta: NeuralFieldParams,
    pub encoding: EncodingConfig,
    pub history: Vec<HistoryRow>,
}

/// Where periodic checkpoints go; `None` disables them.
#[derive(Debug, Clone, Default)]
pub struct Checkpointing {
    pub dir: Option<PathBuf>,
}

impl Checkpointing {
    fn save_theta(
        &self,
        theta: &NeuralFieldParams,
        enc: &EncodingConfig,
        alpha: &ScalarField3D,
    ) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let p = dir.join("checkpoint.nftp");
        write_params(theta, enc, &p)?;
        write_field(alpha, dir.join("checkpoint_alpha.nftf"))?;
        Ok(Some(p))
    }

    fn save_alpha(&self, alpha: &ScalarField3D) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let p = dir.join("checkpoint_alpha.nftf");
        write_field(alpha, &p)?;
        Ok(Some(p))
    }
}

fn check_finite(total: f64, iteration: usize, last_good: &Option<PathBuf>) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            iteration,
            last_good: last_good.clone(),
        })
    }
}

/// Neural-field reconstruction. `init` replaces the seeded Xavier start.
pub fn reconstruct(
    obs: &Observations,
    cfg: &InversionConfig,
    init: Option<NeuralFieldParams>,
    ckpt: &Checkpointing,
) -> Result<NeuralReconstruction> {
    obs.validate()?;
    cfg.loss.validate()?;
    let grid = *obs.grid();
    let arch = cfg.network.architecture();
    let mut theta = match init {
        Some(t) => {
            if *t.arch() != arch {
                return Err(Error::Shape(
                    "initial parameters do not match the configured network".into(),
                ));
            }
            t
        }
        None => xavier_init(&arch, cfg.optim.seed)?,
    };
    let schedule = cfg.schedule();
    let blocks = theta.blocks();
    let mut adam = Adam::new(arch.param_count());
    let mut flat = theta.to_flat();
    let mut history = Vec::with_capacity(cfg.optim.iters);
    let mut last_good = None;

    for it in 0..cfg.optim.iters {
        let s = schedule.at(it);
        let enc = cfg.network.encoding(s.beta);
        let (alpha, tape) = field_forward(&theta, &grid, &enc)?;
        if cfg.optim.checkpoint_every > 0 && it > 0 && it % cfg.optim.checkpoint_every == 0 {
            last_good = ckpt.save_theta(&theta, &enc, &alpha)?.or(last_good);
        }
        let ev = evaluate_alpha(&alpha, obs, &cfg.loss, s.sym_weight)?;
        check_finite(ev.total, it, &last_good)?;
        let grads = field_backward(&theta, &tape, &ev.grad_alpha)?.to_flat();
        adam.step(&mut flat, &grads, s.lr, &blocks)
            .map_err(|e| with_iteration(e, it))?;
        theta.set_flat(&flat)?;
        history.push(HistoryRow {
            iter: it,
            data_loss: ev.data_loss,
            tv: ev.tv,
            sym: ev.sym,
            total: ev.total,
            lr: s.lr,
            beta: s.beta,
        });
    }
    let encoding = cfg.network.encoding(schedule.at(cfg.optim.iters).beta);
    let (alpha, _) = field_forward(&theta, &grid, &encoding)?;
    Ok(NeuralReconstruction {
        alpha,
        theta,
        encoding,
        history,
    })
}

fn with_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::NonFiniteGradient { block, .. } => Error::NonFiniteGradient {
            iteration: it as u64,
            block,
        },
        e => e,
    }
}

/// `alpha_min + (alpha_max - alpha_min) sigmoid(logit)` per voxel, with its derivative.
pub fn alpha_from_logits(
    logits: &ScalarField3D,
    alpha_min: f64,
    alpha_max: f64,
) -> (ScalarField3D, ScalarField3D) {
    let span = alpha_max - alpha_min;
    let g = *logits.grid();
    let mut alpha = Vec::with_capacity(g.len());
    let mut deriv = Vec::with_capacity(g.len());
    for &l in logits.data() {
        let s = stable_sigmoid(l);
        alpha.push(alpha_min + span * s.clamp(1e-15, 1.0 - 1e-15));
        deriv.push(span * s * (1.0 - s));
    }
    (
        ScalarField3D::from_vec(g, alpha).expect("finite"),
        ScalarField3D::from_vec(g, deriv).expect("finite"),
    )
}

/// Logit whose bracketed value is `alpha`.
pub fn logit_of(alpha: f64, alpha_min: f64, alpha_max: f64) -> f64 {
    let s = (alpha - alpha_min) / (alpha_max - alpha_min);
    (s / (1.0 - s)).ln()
}

fn stable_sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
pub struct GridReconstruction {
    pub alpha: ScalarField3D,
    pub logits: ScalarField3D,
    pub history: Vec<HistoryRow>,
}

/// Per-voxel logits optimized directly; no encoding, no annealing. Starts at
/// `init` or at zero logits (the window midpoint).
pub fn grid_opt_reconstruct(
    obs: &Observations,
    cfg: &InversionConfig,
    init: Option<ScalarField3D>,
    ckpt: &Checkpointing,
) -> Result<GridReconstruction> {
    obs.validate()?;
    cfg.loss.validate()?;
    let grid = *obs.grid();
    let (amin, amax) = (cfg.network.alpha_min, cfg.network.alpha_max);
    let mut logits = match init {
        Some(l) => {
            grid.ensure_same(l.grid())?;
            l
        }
        None => ScalarField3D::zeros(grid),
    };
    let schedule = Schedule {
        anneal_iters: None,
        ..cfg.schedule()
    };
    let blocks = vec![("logits".to_string(), 0..grid.len())];
    let mut adam = Adam::new(grid.len());
    let mut history = Vec::with_capacity(cfg.optim.iters);
    let mut last_good = None;
    for it in 0..cfg.optim.iters {
        let s = schedule.at(it);
        let (alpha, dadl) = alpha_from_logits(&logits, amin, amax);
        if cfg.optim.checkpoint_every > 0 && it > 0 && it % cfg.optim.checkpoint_every == 0 {
            last_good = ckpt.save_alpha(&alpha)?.or(last_good);
        }
        let ev = evaluate_alpha(&alpha, obs, &cfg.loss, s.sym_weight)?;
        check_finite(ev.total, it, &last_good)?;
        let grads: Vec<f64> = ev
            .grad_alpha
            .data()
            .iter()
            .zip(dadl.data())
            .map(|(g, d)| g * d)
            .collect();
        adam.step(logits.data_mut(), &grads, s.lr, &blocks)
            .map_err(|e| with_iteration(e, it))?;
        history.push(HistoryRow {
            iter: it,
            data_loss: ev.data_loss,
            tv: ev.tv,
            sym: ev.sym,
            total: ev.total,
            lr: s.lr,
            beta: 0.0,
        });
    }
    let (alpha, _) = alpha_from_logits(&logits, amin, amax);
    Ok(GridReconstruction {
        alpha,
        logits,
        history,
    })
}
