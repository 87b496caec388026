//! The `podloss` command line.
//!
//! Exit codes: 0 success, 1 validation failure, 2 numerical failure
//! (divergence, rank loss, gradient-check breach).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::check::{gradcheck_matrix, CheckBackbone};
use crate::classify::{gda_fit, write_features_csv, DEFAULT_SHRINKAGE};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{cosine_loss, nac_loss, LatentBatch};
use crate::net::{load_checkpoint, save_checkpoint, Network};
use crate::pedcc::{
    generate_circle_centroids, generate_simplex_centroids, load_centroids, save_centroids, verify_centroids,
    write_centroids_text, CentroidSet,
};
use crate::train::{evaluate, predict, run_training_with, EpochRecord, HISTORY_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

pub const BUILD_ID: &str = match option_env!("PODLOSS_BUILD_ID") {
    Some(id) => id,
    None => env!("CARGO_PKG_VERSION"),
};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.txt";
pub const HISTORY: &str = "history.csv";
pub const SUMMARY: &str = "summary.json";
pub const CENTROIDS: &str = "centroids.bin";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SWEEP: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "lambda,lg_lambda,final_train_loss,ratio_to_lambda_1,test_accuracy,offdiag_energy";

#[derive(Parser, Debug)]
#[command(name = "podloss", version = BUILD_ID, about = "Fixed-centroid classification with POD loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a centroid file and print its verification report as JSON.
    PedccGen(PedccGenArgs),
    /// Train from a config file into a fresh run directory.
    Train(TrainArgs),
    /// Re-evaluate a run directory's final checkpoint; prints JSON.
    Eval(EvalArgs),
    /// Finite-difference check of every loss through MLP and CNN backbones; prints CSV.
    Gradcheck(GradcheckArgs),
    /// Write per-sample latent features of a run as CSV.
    ExportFeatures(ExportArgs),
    /// Summarise a run directory (JSON) or a lambda sweep directory (CSV).
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct PedccGenArgs {
    #[arg(long)]
    k: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
    /// Evenly spaced points on the unit circle (requires n = 2).
    #[arg(long)]
    circle: bool,
    /// Angle of the first circle point in radians.
    #[arg(long, default_value_t = 0.0)]
    phase: f64,
    /// Write whitespace-separated text instead of the binary format.
    #[arg(long)]
    text: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    config: PathBuf,
    /// Override a config key, e.g. `--set train.lambda=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set train.loss=...`.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
    /// Train once per lambda into `lambda_<value>/` and write sweep.csv.
    #[arg(long, value_delimiter = ',')]
    sweep_lambda: Vec<f64>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    run: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Also fit a Gaussian discriminant on training latents and report its accuracy.
    #[arg(long)]
    gda: bool,
    /// Override a stored config key, e.g. `--set data.classes=0,1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Parameters probed per instance.
    #[arg(long, default_value_t = 40)]
    params: usize,
    /// Flip the sign of every analytic gradient (negative control).
    #[arg(long)]
    corrupt: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    run: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Require a 2-D latent so columns f0,f1 plot directly.
    #[arg(long)]
    dim2: bool,
    /// Override a stored config key, e.g. `--set data.test_limit=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    path: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::NumericalRank { .. } => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

/// Parses `args` (including the program name) and runs the command, writing
/// machine output to `out` and diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::PedccGen(a) => pedcc_gen(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::ExportFeatures(a) => export_features(a, out),
        Command::Analyze(a) => analyze(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn json_line(out: &mut dyn Write, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Argument(e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn pedcc_gen(a: PedccGenArgs, out: &mut dyn Write) -> Result<i32> {
    let cs = if a.circle {
        if a.n != 2 {
            return Err(Error::Argument(format!("--circle needs n = 2, got {}", a.n)));
        }
        generate_circle_centroids(a.k, a.phase)?
    } else {
        generate_simplex_centroids(a.k, a.n, a.seed)?
    };
    let report = verify_centroids(&cs);
    if a.text {
        write_centroids_text(&cs, BufWriter::new(File::create(&a.output)?))?;
    } else {
        save_centroids(&cs, &a.output)?;
    }
    json_line(out, &report)?;
    Ok(if report.passed { EXIT_OK } else { EXIT_NUMERICAL })
}

fn prepare_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply_overrides(&a.overrides)?;
    if let Some(loss) = &a.loss {
        cfg.apply_overrides(&[format!("train.loss={loss}")])?;
    }
    // Absolute paths keep the stored config usable from any directory.
    if let Ok(p) = fs::canonicalize(&cfg.data.dir) {
        cfg.data.dir = p;
    }
    if let Some(f) = &cfg.centroids.file {
        cfg.centroids.file = Some(fs::canonicalize(f)?);
    }
    Ok(cfg)
}

/// Temporary sibling of `dest`, renamed into place once complete.
fn staging_dir(dest: &Path) -> Result<PathBuf> {
    let name = dest
        .file_name()
        .ok_or_else(|| Error::Argument(format!("bad output path {}", dest.display())))?;
    let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;
    Ok(tmp)
}

fn commit_dir(tmp: &Path, dest: &Path, force: bool) -> Result<()> {
    if dest.exists() {
        if !force {
            return Err(Error::Argument(format!("{} exists (use --force)", dest.display())));
        }
        fs::remove_dir_all(dest)?;
    }
    fs::rename(tmp, dest)?;
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    epochs: usize,
    runtime_seconds: f64,
    final_train_loss: f64,
    final_mean_norm: f64,
    train_samples: usize,
    test_samples: usize,
    metrics: crate::classify::EvalMetrics,
}

/// Trains one run into `dir`, which must already exist and be empty.
fn train_into(cfg: &RunConfig, dir: &Path, quiet: bool) -> Result<RunSummary> {
    let start = Instant::now();
    let (train, test, sums) = cfg.load_data()?;
    let cs = cfg.centroid_set(train.num_classes)?;
    cfg.train.validate(train.num_classes, cs.mode())?;

    fs::write(dir.join(CONFIG), cfg.to_text())?;
    save_centroids(&cs, &dir.join(CENTROIDS))?;
    let mut layout = vec![MANIFEST, CONFIG, HISTORY, SUMMARY, CENTROIDS, CHECKPOINT];
    if cfg.checkpoint_every > 0 {
        fs::create_dir(dir.join(CHECKPOINT_DIR))?;
        layout.push(CHECKPOINT_DIR);
    }
    let config: serde_json::Map<String, serde_json::Value> = crate::config::KEYS
        .iter()
        .map(|k| (k.to_string(), cfg.get(k).unwrap_or_default().into()))
        .collect();
    let manifest = json!({
        "build": BUILD_ID,
        "config": config,
        "datasets": sums.iter().map(|(name, sha)| json!({"name": name, "sha256": sha})).collect::<Vec<_>>(),
        "layout": layout,
    });
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest).unwrap())?;

    let mut history = BufWriter::new(File::create(dir.join(HISTORY))?);
    writeln!(history, "{HISTORY_HEADER}")?;
    history.flush()?;
    let every = cfg.checkpoint_every;
    let total = cfg.train.epochs;
    let on_epoch = |r: &EpochRecord, net: &Network, m: &crate::net::Momentum| -> Result<()> {
        writeln!(history, "{}", r.csv_row())?;
        history.flush()?;
        if every > 0 && r.epoch.is_multiple_of(every) {
            save_checkpoint(net, Some(m), &dir.join(CHECKPOINT_DIR).join(format!("epoch_{}.bin", r.epoch)))?;
        }
        if !quiet {
            let acc = r.eval.as_ref().map(|e| format!(" acc {:.4}", e.accuracy)).unwrap_or_default();
            eprintln!("epoch {}/{total} loss {:.6} M {:.4}{acc}", r.epoch, r.train_loss, r.mean_norm);
        }
        Ok(())
    };
    let outcome = run_training_with(&cfg.train, &train, &test, &cs, on_epoch)?;
    save_checkpoint(&outcome.net, Some(&outcome.momentum), &dir.join(CHECKPOINT))?;

    let last = outcome
        .history
        .last()
        .ok_or_else(|| Error::Argument("train.epochs must be at least 1".into()))?;
    let summary = RunSummary {
        epochs: last.epoch,
        runtime_seconds: start.elapsed().as_secs_f64(),
        final_train_loss: last.train_loss,
        final_mean_norm: last.mean_norm,
        train_samples: train.len(),
        test_samples: test.len(),
        metrics: outcome.history.final_eval().cloned().expect("last epoch is always evaluated"),
    };
    fs::write(dir.join(SUMMARY), serde_json::to_string_pretty(&summary).unwrap())?;
    Ok(summary)
}

fn lambda_dir_name(lambda: f64) -> String {
    format!("lambda_{lambda:e}")
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = prepare_config(&a)?;
    if a.out.exists() && !a.force {
        return Err(Error::Argument(format!("{} exists (use --force)", a.out.display())));
    }
    let tmp = staging_dir(&a.out)?;
    let result = if a.sweep_lambda.is_empty() {
        train_into(&cfg, &tmp, a.quiet).map(|s| json!({ "run": a.out, "summary": s }))
    } else {
        sweep(&cfg, &a.sweep_lambda, &tmp, a.quiet).map(|rows| json!({ "sweep": a.out, "runs": rows }))
    };
    match result {
        Ok(report) => {
            commit_dir(&tmp, &a.out, a.force)?;
            json_line(out, &report)?;
            Ok(EXIT_OK)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

#[derive(Serialize)]
struct SweepRow {
    lambda: f64,
    final_train_loss: f64,
    test_accuracy: f64,
    offdiag_energy: f64,
}

fn sweep(cfg: &RunConfig, lambdas: &[f64], dir: &Path, quiet: bool) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Argument(format!("sweep lambda {lambda} must be finite and nonnegative")));
        }
        let mut c = cfg.clone();
        c.train.lambda = lambda;
        let sub = dir.join(lambda_dir_name(lambda));
        fs::create_dir(&sub)?;
        if !quiet {
            eprintln!("lambda = {lambda:e}");
        }
        let s = train_into(&c, &sub, quiet)?;
        rows.push(SweepRow {
            lambda,
            final_train_loss: s.final_train_loss,
            test_accuracy: s.metrics.accuracy,
            offdiag_energy: s.metrics.offdiag_energy,
        });
    }
    write_sweep_csv(&rows, File::create(dir.join(SWEEP))?)?;
    Ok(rows)
}

fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut out = BufWriter::new(out);
    let base = rows.iter().find(|r| r.lambda == 1.0).map(|r| r.final_train_loss);
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        let ratio = base.map(|b| format!("{:e}", r.final_train_loss / b)).unwrap_or_default();
        writeln!(
            out,
            "{:e},{:e},{:e},{ratio},{:e},{:e}",
            r.lambda,
            r.lambda.log10(),
            r.final_train_loss,
            r.test_accuracy,
            r.offdiag_energy
        )?;
    }
    out.flush()?;
    Ok(())
}

/// A trained run read back from disk.
pub struct LoadedRun {
    pub config: RunConfig,
    pub net: Network,
    pub centroids: CentroidSet,
    pub train: Dataset,
    pub test: Dataset,
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(Error::Argument(format!("{} is missing {name}", dir.display())));
    }
    Ok(p)
}

/// Loads a run directory; `overrides` change the stored config before the
/// data are loaded.
pub fn load_run<S: AsRef<str>>(dir: &Path, overrides: &[S]) -> Result<LoadedRun> {
    let mut config = RunConfig::parse(&fs::read_to_string(require(dir, CONFIG)?)?)?;
    config.apply_overrides(overrides)?;
    let centroids = load_centroids(&require(dir, CENTROIDS)?)?;
    let (net, _) = load_checkpoint(&require(dir, CHECKPOINT)?)?;
    let (train, test, _) = config.load_data()?;
    if net.input_shape() != train.shape {
        return Err(Error::Shape(format!(
            "checkpoint expects {} inputs, dataset has {}",
            net.input_shape().len(),
            train.shape.len()
        )));
    }
    Ok(LoadedRun { config, net, centroids, train, test })
}

fn pick(run: &LoadedRun, split: SplitArg) -> &Dataset {
    match split {
        SplitArg::Train => &run.train,
        SplitArg::Test => &run.test,
    }
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let run = load_run(&a.run, &a.overrides)?;
    let ds = pick(&run, a.split);
    let metrics = evaluate(&run.net, &run.centroids, ds)?;
    let mut report = json!({ "split": format!("{:?}", a.split).to_lowercase(), "metrics": metrics });
    if a.gda {
        let (train_lat, _) = predict(&run.net, &run.centroids, &run.train)?;
        let model = gda_fit(train_lat.view(), &run.train.labels, run.train.num_classes, DEFAULT_SHRINKAGE)?;
        let (lat, _) = predict(&run.net, &run.centroids, ds)?;
        let hits = lat
            .rows()
            .into_iter()
            .zip(&ds.labels)
            .filter(|(x, y)| model.predict(x.view()) == **y)
            .count();
        report["gda_accuracy"] = json!(hits as f64 / ds.len() as f64);
        report["gda_shrinkage"] = json!(DEFAULT_SHRINKAGE);
    }
    json_line(out, &report)?;
    Ok(EXIT_OK)
}

/// `nac_loss` with δ = 0 against `cosine_loss` on random batches; returns the
/// number of bitwise mismatches in value or gradient.
fn nac_cosine_mismatches(seed: u64, instances: usize) -> Result<usize> {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    let cs = generate_simplex_centroids(3, 4, seed)?;
    let mut rng = crate::seed::rng_for(seed, crate::seed::STREAM_GRADCHECK + 1);
    let mut bad = 0;
    for _ in 0..instances {
        let x = ndarray::Array2::from_shape_simple_fn((6, 4), || StandardNormal.sample(&mut rng));
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let batch = LatentBatch::new(x.view(), &labels)?;
        let a = nac_loss(&batch, &cs, 0.0)?;
        let b = cosine_loss(&batch, &cs)?;
        let same = a.value.to_bits() == b.value.to_bits()
            && a.grad.iter().zip(b.grad.iter()).all(|(p, q)| p.to_bits() == q.to_bits());
        bad += usize::from(!same);
    }
    Ok(bad)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let reports = gradcheck_matrix(a.instances, a.params, a.seed, a.corrupt)?;
    writeln!(out, "loss,backbone,instances,checked,kinks,max_rel_error,pass")?;
    let mut ok = true;
    for r in &reports {
        ok &= r.passed();
        writeln!(
            out,
            "{},{},{},{},{},{:e},{}",
            r.loss,
            r.backbone,
            r.instances,
            r.checked,
            r.kinks,
            r.max_rel_error,
            r.passed()
        )?;
    }
    let mismatches = nac_cosine_mismatches(a.seed, a.instances)?;
    ok &= mismatches == 0;
    writeln!(
        out,
        "nac_delta0_vs_cosine,{},{},{},0,{},{}",
        CheckBackbone::Mlp,
        a.instances,
        a.instances,
        mismatches,
        mismatches == 0
    )?;
    Ok(if ok { EXIT_OK } else { EXIT_NUMERICAL })
}

fn export_features(a: ExportArgs, out: &mut dyn Write) -> Result<i32> {
    let run = load_run(&a.run, &a.overrides)?;
    if a.dim2 && run.net.latent_dim() != 2 {
        return Err(Error::Shape(format!("--dim2 needs a 2-D latent, model has {}", run.net.latent_dim())));
    }
    let ds = pick(&run, a.split);
    let (lat, preds) = predict(&run.net, &run.centroids, ds)?;
    let mut w = BufWriter::new(File::create(&a.output)?);
    write_features_csv(&mut w, lat.view(), &ds.labels, &preds)?;
    w.flush()?;
    json_line(out, &json!({ "output": a.output, "rows": ds.len(), "latent_dim": lat.ncols() }))?;
    Ok(EXIT_OK)
}

fn analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<i32> {
    let dir = &a.path;
    if !dir.is_dir() {
        return Err(Error::Argument(format!("{} is not a directory", dir.display())));
    }
    if dir.join(SWEEP).exists() {
        out.write_all(&fs::read(dir.join(SWEEP))?)?;
        return Ok(EXIT_OK);
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(require(dir, SUMMARY)?)?)
        .map_err(|e| Error::Argument(format!("{}: {e}", dir.join(SUMMARY).display())))?;
    let history = fs::read_to_string(require(dir, HISTORY)?)?;
    let m = &summary["metrics"];
    let report = json!({
        "run": dir,
        "epochs": history.lines().count().saturating_sub(1),
        "accuracy": m["accuracy"],
        "low_norm_accuracy": m["low_norm_accuracy"],
        "high_norm_accuracy": m["high_norm_accuracy"],
        "norm_threshold": m["norm_threshold"],
        "offdiag_energy": m["offdiag_energy"],
        "subspace_alignment": m["subspace_alignment"],
        "final_mean_norm": summary["final_mean_norm"],
        "final_train_loss": summary["final_train_loss"],
    });
    json_line(out, &report)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(std::iter::once("podloss").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn pedcc_gen_rejects_impossible_simplex() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("c.bin");
        let (code, _) = run_capture(&["pedcc-gen", "--k", "10", "--n", "4", "-o", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_VALIDATION);
        assert!(!out.exists());
    }

    #[test]
    fn exit_codes_classify_errors() {
        assert_eq!(exit_code(&Error::Diverged { epoch: 1, batch: 0, loss: f64::NAN }), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Config { line: 3, msg: String::new() }), EXIT_VALIDATION);
    }

    #[test]
    fn sweep_csv_reports_ratio_to_unit_lambda() {
        let rows = [
            SweepRow { lambda: 0.1, final_train_loss: 2.0, test_accuracy: 1.0, offdiag_energy: 0.0 },
            SweepRow { lambda: 1.0, final_train_loss: 4.0, test_accuracy: 1.0, offdiag_energy: 0.0 },
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first = text.lines().nth(1).unwrap();
        assert_eq!(first.split(',').nth(3), Some("5e-1"));
    }

    #[test]
    fn nac_at_zero_delta_is_cosine() {
        assert_eq!(nac_cosine_mismatches(5, 50).unwrap(), 0);
    }
}
