mod config;
mod meta;
mod pgm;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thermotomo::datagen::{generate_sample, load_sample, sample_scene, sample_seed};
use thermotomo::inversion::{grid_opt_reconstruct, reconstruct, write_history, Checkpointing};
use thermotomo::io::{read_field, unstack_frames, write_field};
use thermotomo::metrics::{evaluate, DEFAULT_DATA_RANGE, DEFAULT_IOU_THRESHOLD, METRICS_HEADER};
use thermotomo::neural_field::write_params;
use thermotomo::validation::{
    append_report_csv, format_table, gradient_error, run_suite, GradTarget,
};
use thermotomo::{Error, SurfaceFrame};

use config::RunConfig;
use meta::{write_run_meta, Provenance};

#[derive(Parser)]
#[command(name = "thermotomo", version, about = "Thermal tomography by neural-field inversion")]
struct Cli {
    /// TOML config file (`[section]` headers, `key = value`). A `run.meta` also works.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set solver.jacobi_iters=80`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample scenes, simulate them and write one directory per sample.
    Generate(GenerateArgs),
    /// Invert a sample's surface observations for the diffusivity field.
    Reconstruct(ReconstructArgs),
    /// Run the physics and gradient validation suite.
    Validate(ValidateArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Score a reconstruction against ground truth.
    Metrics(MetricsArgs),
    /// Export one plane of a field as a 16-bit PGM.
    Slice(SliceArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// Defects per sample; 0 draws 1 to 4.
    #[arg(long)]
    n_defects: Option<usize>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    sample: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `nefty` or `grid`.
    #[arg(long)]
    baseline: Option<String>,
    /// base, pe, pe_fa, pe_fa_sig, pe_fa_sig_hm or full.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Shorter runs for smoke testing.
    #[arg(long)]
    quick: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Target name or `all`.
    #[arg(long, default_value = "all")]
    target: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Observed surface frames (stacked NFTF).
    #[arg(long, requires = "pred_frames")]
    obs: Option<PathBuf>,
    /// Simulated surface frames (stacked NFTF).
    #[arg(long, requires = "obs")]
    pred_frames: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DATA_RANGE)]
    data_range: f64,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct SliceArgs {
    #[arg(long)]
    input: PathBuf,
    /// x, y or z.
    #[arg(long, default_value = "z")]
    axis: String,
    /// Plane index; defaults to the last plane along the axis.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Core(Error),
    Validation,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Instability { .. }
        | Error::NonFiniteGradient { .. }
        | Error::NonFiniteLoss { .. }
        | Error::SceneGeneration { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Validation) => ExitCode::from(3),
    }
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn path_str(p: &Path) -> String {
    quoted(&p.display().to_string())
}

fn resolve(cli_config: Option<&Path>, overrides: &[String], flags: Vec<String>) -> Result<RunConfig, Failure> {
    let mut all = overrides.to_vec();
    all.extend(flags);
    Ok(RunConfig::load(cli_config, &all)?)
}

fn run(cli: Cli) -> Outcome {
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Generate(a) => {
            let mut flags = Vec::new();
            if let Some(v) = a.mode {
                flags.push(format!("data.mode={}", quoted(&v)));
            }
            if let Some(v) = a.count {
                flags.push(format!("data.count={v}"));
            }
            if let Some(v) = a.seed {
                flags.push(format!("run.seed={v}"));
            }
            if let Some(v) = a.out {
                flags.push(format!("run.out={}", path_str(&v)));
            }
            if let Some(v) = a.noise_std {
                flags.push(format!("data.noise_std={v:?}"));
            }
            if let Some(v) = a.n_defects {
                flags.push(format!("data.n_defects={v}"));
            }
            cmd_generate(&resolve(cfg_path, &cli.overrides, flags)?)
        }
        Command::Reconstruct(a) => {
            let mut flags = Vec::new();
            if let Some(v) = a.sample {
                flags.push(format!("run.sample={}", path_str(&v)));
            }
            if let Some(v) = a.out {
                flags.push(format!("run.out={}", path_str(&v)));
            }
            if let Some(v) = a.iters {
                flags.push(format!("optimization.iters={v}"));
            }
            if let Some(v) = a.seed {
                flags.push(format!("run.seed={v}"));
            }
            if let Some(v) = a.baseline {
                flags.push(format!("run.baseline={}", quoted(&v)));
            }
            if let Some(v) = a.ablation {
                flags.push(format!("run.ablation={}", quoted(&v)));
            }
            cmd_reconstruct(&resolve(cfg_path, &cli.overrides, flags)?)
        }
        Command::Validate(a) => {
            let flags = vec![format!("run.out={}", path_str(&a.out))];
            cmd_validate(&resolve(cfg_path, &cli.overrides, flags)?, a.quick)
        }
        Command::Gradcheck(a) => cmd_gradcheck(&a.target, a.seed),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::Slice(a) => cmd_slice(&a),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    if cfg.run.out.is_empty() {
        return Err(Failure::Usage("an output directory is required (--out)".into()));
    }
    let dir = PathBuf::from(&cfg.run.out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn cmd_generate(cfg: &RunConfig) -> Outcome {
    let out = out_dir(cfg)?;
    let prov = Provenance::start("generate", cfg.run.seed);
    let grid = cfg.grid()?;
    let solve = cfg.solve_config()?;
    let src = cfg.source_spec();
    let mode = cfg.scene_mode()?;
    let count = cfg.data.count;
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(count.max(1));
    let results: Vec<thermotomo::Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (out, solve) = (&out, &solve);
                s.spawn(move || -> thermotomo::Result<()> {
                    for idx in (w..count).step_by(workers) {
                        let seed = sample_seed(cfg.run.seed, idx);
                        let n = match cfg.data.n_defects {
                            0 => 1 + (seed % 4) as usize,
                            n => n,
                        };
                        let scene = sample_scene(seed, mode, n, &grid)?;
                        let dir = out.join(format!("sample_{}_{idx}", cfg.run.seed));
                        generate_sample(&scene, &grid, &src, solve, seed, cfg.data.noise_std, &dir)?;
                        println!("{}", dir.display());
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    for r in results {
        r?;
    }
    write_run_meta(&out, cfg, prov)?;
    Ok(())
}

fn cmd_reconstruct(cfg: &RunConfig) -> Outcome {
    if cfg.run.sample.is_empty() {
        return Err(Failure::Usage("a sample directory is required (--sample)".into()));
    }
    let out = out_dir(cfg)?;
    let sample = PathBuf::from(&cfg.run.sample);
    let mut prov = Provenance::start("reconstruct", cfg.run.seed);
    prov.add_input(&sample)?;
    let record = load_sample(&sample)?;
    let mut obs = record.observations(cfg.linear_solver()?);
    obs.solve.mean_mode = cfg.mean_mode()?;
    let grid = *obs.grid();
    let mut inv = cfg.inversion_config(&grid)?;
    cfg.ablation()?.apply(&mut inv, &mut obs.solve);
    let ckpt = Checkpointing {
        dir: Some(out.clone()),
    };
    let (alpha, history) = if cfg.run.baseline == "grid" {
        inv.optim.lr = cfg.optimization.grid_lr;
        let r = grid_opt_reconstruct(&obs, &inv, None, &ckpt)?;
        write_field(&r.logits, out.join("logits_final.nftf"))?;
        (r.alpha, r.history)
    } else {
        let r = reconstruct(&obs, &inv, None, &ckpt)?;
        write_params(&r.theta, &r.encoding, out.join("theta.nftp"))?;
        (r.alpha, r.history)
    };
    write_field(&alpha, out.join("alpha_final.nftf"))?;
    write_history(&history, out.join("history.csv"))?;
    if let Ok(report) = evaluate(
        &alpha,
        &record.alpha_gt,
        DEFAULT_DATA_RANGE,
        DEFAULT_IOU_THRESHOLD,
        None,
    ) {
        let text = format!("{METRICS_HEADER}\n{}\n", report.csv_row());
        let p = out.join("metrics.csv");
        std::fs::write(&p, &text).map_err(|e| Error::Io { path: p, source: e })?;
        print!("{text}");
    }
    write_run_meta(&out, cfg, prov)?;
    Ok(())
}

fn cmd_validate(cfg: &RunConfig, quick: bool) -> Outcome {
    let out = out_dir(cfg)?;
    let prov = Provenance::start("validate", cfg.run.seed);
    let reports = run_suite(quick)?;
    print!("{}", format_table(&reports));
    append_report_csv(&reports, out.join("validation_report.csv"))?;
    write_run_meta(&out, cfg, prov)?;
    if reports.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(Failure::Validation)
    }
}

fn cmd_gradcheck(target: &str, seed: u64) -> Outcome {
    let targets: Vec<GradTarget> = if target == "all" {
        GradTarget::ALL.to_vec()
    } else {
        vec![GradTarget::parse(target)
            .ok_or_else(|| Failure::Usage(format!("unknown gradient target `{target}`")))?]
    };
    println!("target,max_rel_err,tolerance,pass");
    let mut ok = true;
    for t in targets {
        let err = gradient_error(t, seed)?;
        let pass = err <= t.tolerance();
        ok &= pass;
        println!(
            "{},{err:e},{:e},{}",
            t.name(),
            t.tolerance(),
            if pass { "pass" } else { "fail" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Validation)
    }
}

fn cmd_metrics(a: &MetricsArgs) -> Outcome {
    let pred = read_field(&a.pred)?;
    let gt = read_field(&a.gt)?;
    let frames = match (&a.obs, &a.pred_frames) {
        (Some(o), Some(p)) => Some((
            unstack_frames(&read_field(p)?),
            unstack_frames(&read_field(o)?),
        )),
        _ => None,
    };
    let mask = frames.as_ref().and_then(|(_, o)| o.first()).map(|f| SurfaceFrame {
        nx: f.nx,
        ny: f.ny,
        data: vec![1.0; f.data.len()],
    });
    let frame_refs = match (&frames, &mask) {
        (Some((p, o)), Some(m)) => Some((p.as_slice(), o.as_slice(), m)),
        _ => None,
    };
    let report = evaluate(&pred, &gt, a.data_range, a.threshold, frame_refs)?;
    println!("{METRICS_HEADER}");
    println!("{}", report.csv_row());
    Ok(())
}

fn cmd_slice(a: &SliceArgs) -> Outcome {
    let axis = pgm::Axis::parse(&a.axis)
        .ok_or_else(|| Failure::Usage(format!("axis `{}` is not x, y or z", a.axis)))?;
    let field = read_field(&a.input)?;
    let g = field.grid();
    let index = a.index.unwrap_or(match axis {
        pgm::Axis::X => g.nx - 1,
        pgm::Axis::Y => g.ny - 1,
        pgm::Axis::Z => g.nz - 1,
    });
    pgm::write_slice(&field, axis, index, &a.out)?;
    Ok(())
}
