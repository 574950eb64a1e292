use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
# reduced problem for fast runs
[domain]
nx = 16
ny = 16
nz = 8

[solver]
n_steps = 10
jacobi_iters = 20

[network]
width = 16
depth = 3
skip_layers = [2]
num_freqs = 4
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_thermotomo"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn generate(dir: &Path) {
    let o = run(
        dir,
        &[
            "--config", "small.toml", "generate", "--count", "2", "--seed", "7", "--out", "data",
            "--n-defects", "1",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

/// Drops the two timestamp lines.
fn without_timestamps(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with("started_unix") && !l.starts_with("finished_unix"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn generate_writes_named_sample_directories() {
    let dir = setup();
    generate(dir.path());
    for idx in 0..2 {
        let s = dir.path().join(format!("data/sample_7_{idx}"));
        for f in ["alpha_gt.nftf", "T0.nftf", "surface_obs.nftf", "scene.meta"] {
            assert!(s.join(f).is_file(), "missing {f} in {}", s.display());
        }
    }
    assert!(dir.path().join("data/run.meta").is_file());
}

#[test]
fn generate_is_deterministic_across_worker_counts() {
    let dir = setup();
    generate(dir.path());
    let a = std::fs::read(dir.path().join("data/sample_7_1/surface_obs.nftf")).unwrap();
    let o = run(
        dir.path(),
        &[
            "--config", "small.toml", "generate", "--count", "5", "--seed", "7", "--out", "more",
            "--n-defects", "1",
        ],
    );
    assert_eq!(code(&o), 0);
    let b = std::fs::read(dir.path().join("more/sample_7_1/surface_obs.nftf")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn reconstruct_emits_artifacts_and_reproducible_provenance() {
    let dir = setup();
    generate(dir.path());
    let args = |out: &'static str| {
        vec![
            "--config", "small.toml", "reconstruct", "--sample", "data/sample_7_0", "--out", out,
            "--iters", "5", "--seed", "3",
        ]
    };
    let o = run(dir.path(), &args("rec1"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rec = dir.path().join("rec1");
    for f in ["alpha_final.nftf", "theta.nftp", "history.csv", "run.meta"] {
        assert!(rec.join(f).is_file(), "missing {f}");
    }
    let hist = std::fs::read_to_string(rec.join("history.csv")).unwrap();
    let mut lines = hist.lines();
    assert_eq!(lines.next(), Some("iter,data_loss,tv,sym,total,lr,beta"));
    assert_eq!(lines.count(), 5);

    let meta1 = std::fs::read_to_string(rec.join("run.meta")).unwrap();
    assert!(meta1.contains("iters = 5"));
    assert!(meta1.contains("alpha_gt.nftf"));

    // Replaying from run.meta alone reproduces the record.
    let o = run(
        dir.path(),
        &["--config", "rec1/run.meta", "reconstruct", "--out", "rec2"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let meta2 = std::fs::read_to_string(dir.path().join("rec2/run.meta")).unwrap();
    assert_eq!(
        without_timestamps(&meta1).replace("rec1", "rec2"),
        without_timestamps(&meta2)
    );
    assert_eq!(
        std::fs::read(rec.join("alpha_final.nftf")).unwrap(),
        std::fs::read(dir.path().join("rec2/alpha_final.nftf")).unwrap()
    );
}

#[test]
fn input_digest_follows_sample_bytes() {
    let dir = setup();
    generate(dir.path());
    let recon = |out: &str| {
        let o = run(
            dir.path(),
            &[
                "--config", "small.toml", "reconstruct", "--sample", "data/sample_7_0", "--out",
                out, "--iters", "1",
            ],
        );
        assert_eq!(code(&o), 0);
        std::fs::read_to_string(dir.path().join(out).join("run.meta")).unwrap()
    };
    let a = recon("a");
    let t0 = dir.path().join("data/sample_7_0/T0.nftf");
    let mut bytes = std::fs::read(&t0).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&t0, bytes).unwrap();
    let b = recon("b");
    assert_ne!(without_timestamps(&a).replace("\"a\"", "\"b\""), without_timestamps(&b));
}

#[test]
fn grid_baseline_runs() {
    let dir = setup();
    generate(dir.path());
    let o = run(
        dir.path(),
        &[
            "--config", "small.toml", "reconstruct", "--sample", "data/sample_7_0", "--out", "g",
            "--iters", "3", "--baseline", "grid", "--ablation", "base",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("g/alpha_final.nftf").is_file());
}

#[test]
fn metrics_prints_header_and_row() {
    let dir = setup();
    generate(dir.path());
    let gt = "data/sample_7_0/alpha_gt.nftf";
    let o = run(dir.path(), &["metrics", "--pred", gt, "--gt", gt]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<_> = out.lines().collect();
    assert_eq!(lines[0], "mse,psnr_db,ssim,iou");
    let cols: Vec<_> = lines[1].split(',').collect();
    assert_eq!(cols.len(), 4);
    assert_eq!(cols[1], "inf");
    assert_eq!(cols[2].parse::<f64>().unwrap(), 1.0);

    let frames = "data/sample_7_0/surface_obs.nftf";
    let o = run(
        dir.path(),
        &["metrics", "--pred", gt, "--gt", gt, "--obs", frames, "--pred-frames", frames],
    );
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().nth(1).unwrap().starts_with("0,"), "{out}");
}

#[test]
fn slice_writes_pgm_and_bounds() {
    let dir = setup();
    generate(dir.path());
    let o = run(
        dir.path(),
        &[
            "slice", "--input", "data/sample_7_0/T0.nftf", "--axis", "y", "--index", "8", "--out",
            "t0.pgm",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::read(dir.path().join("t0.pgm")).unwrap();
    let header = b"P5\n16 8\n65535\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 16 * 8 * 2);
    let side = std::fs::read_to_string(dir.path().join("t0.pgm.txt")).unwrap();
    assert!(side.contains("axis = y") && side.contains("min = ") && side.contains("max = "));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = setup();
    std::fs::write(dir.path().join("typo.toml"), "[solver]\njacobi_iter = 3\n").unwrap();
    let o = run(dir.path(), &["--config", "typo.toml", "validate", "--quick"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("jacobi_iter"));

    let o = run(
        dir.path(),
        &[
            "--set", "solver.alpha_min=0.3", "--set", "solver.alpha_max=0.25", "generate",
            "--out", "x",
        ],
    );
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("alpha_min") && err.contains("alpha_max"), "{err}");

    assert_eq!(code(&run(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&run(dir.path(), &["reconstruct", "--out", "x"])), 1);
    assert_eq!(code(&run(dir.path(), &["gradcheck", "--target", "nope"])), 1);
}

#[test]
fn numerical_failure_exits_with_two() {
    let dir = setup();
    let hot = ["--config", "small.toml", "--set", "source.intensity=1e308"];
    let mut args = hot.to_vec();
    args.extend(["generate", "--out", "hot", "--n-defects", "1"]);
    assert_eq!(code(&run(dir.path(), &args)), 0);
    let mut args = hot.to_vec();
    args.extend(["reconstruct", "--sample", "hot/sample_0_0", "--out", "r", "--iters", "2"]);
    let o = run(dir.path(), &args);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite loss"));
}

#[test]
fn gradcheck_reports_csv() {
    let dir = setup();
    let o = run(dir.path(), &["gradcheck", "--target", "symmetry", "--seed", "4"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<_> = out.lines().collect();
    assert_eq!(lines[0], "target,max_rel_err,tolerance,pass");
    assert!(lines[1].starts_with("symmetry,") && lines[1].ends_with(",pass"));
}

#[test]
fn validate_exit_code_matches_report() {
    let dir = setup();
    let o = run(dir.path(), &["validate", "--quick", "--out", "v"]);
    let csv = std::fs::read_to_string(dir.path().join("v/validation_report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("name,measured,expected,rel_err,pass,seconds"));
    let all_pass = lines.all(|l| l.split(',').nth(4) == Some("true"));
    assert_eq!(code(&o), if all_pass { 0 } else { 3 });
    assert!(String::from_utf8_lossy(&o.stdout).contains("conservation_explicit"));
}
