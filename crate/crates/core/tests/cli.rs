use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use podloss::classify::read_features_csv;
use podloss::pedcc::load_centroids;
use serde_json::Value;

const SMOKE: &str = "seed = 3
data.kind = blobs
[blobs]
k = 4
dim = 8
per_class = 60
test_per_class = 30
sigma = 0.3
[model]
backbone = mlp:32
latent_dim = 8
[train]
epochs = 4
batch_size = 32
lr = 0.1
lr_drops = 3
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_podloss")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = bin(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("smoke.conf"), SMOKE).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let run = self.path(out);
        let conf = self.path("smoke.conf");
        let mut args = vec!["train", s(&conf), "--out", s(&run), "--quiet"];
        args.extend_from_slice(extra);
        ok(&args);
        run
    }
}

#[test]
fn pedcc_gen_writes_verified_centroids() {
    let f = Fixture::new();
    let out = f.path("c.bin");
    let report = json(&ok(&["pedcc-gen", "--k", "10", "--n", "256", "--seed", "7", "-o", s(&out)]));
    assert_eq!(report["passed"], true);
    assert!(report["max_geometry_deviation"].as_f64().unwrap() < 1e-9);
    let cs = load_centroids(&out).unwrap();
    assert_eq!((cs.k(), cs.n()), (10, 256));

    let circle = f.path("c5.bin");
    ok(&["pedcc-gen", "--k", "5", "--n", "2", "--circle", "-o", s(&circle)]);
    let cs = load_centroids(&circle).unwrap();
    for i in 0..5 {
        let a = cs.centroid(i);
        let b = cs.centroid((i + 1) % 5);
        assert!((a.dot(&b).acos().to_degrees() - 72.0).abs() < 1e-9);
    }
}

#[test]
fn pedcc_gen_rejects_too_many_classes() {
    let f = Fixture::new();
    let o = bin(&["pedcc-gen", "--k", "10", "--n", "4", "-o", s(&f.path("x.bin"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("k > n+1"));
}

#[test]
fn train_populates_run_directory() {
    let f = Fixture::new();
    let run = f.train("run", &["--set", "train.checkpoint_every=2"]);
    for name in ["manifest.json", "config.txt", "history.csv", "summary.json", "centroids.bin", "checkpoint.bin"] {
        assert!(run.join(name).exists(), "{name}");
    }
    assert!(run.join("checkpoints/epoch_2.bin").exists());
    assert!(run.join("checkpoints/epoch_4.bin").exists());
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 5);
    let summary = json(&fs::read_to_string(run.join("summary.json")).unwrap());
    assert_eq!(summary["metrics"]["accuracy"], 1.0);
    let manifest = json(&fs::read_to_string(run.join("manifest.json")).unwrap());
    assert_eq!(manifest["config"]["train.checkpoint_every"], "2");
    assert_eq!(manifest["datasets"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(!manifest["build"].as_str().unwrap().is_empty());
    // Nothing but the run directory and the config remain.
    assert_eq!(fs::read_dir(f.dir.path()).unwrap().count(), 2);
}

#[test]
fn training_is_reproducible() {
    let f = Fixture::new();
    let a = f.train("a", &[]);
    let b = f.train("b", &[]);
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());
}

#[test]
fn existing_run_is_kept_without_force() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let before = fs::read(run.join("checkpoint.bin")).unwrap();
    let conf = f.path("smoke.conf");
    let args = ["train", s(&conf), "--out", s(&run), "--quiet", "--set", "seed=4"];
    assert_eq!(bin(&args).status.code(), Some(1));
    assert_eq!(fs::read(run.join("checkpoint.bin")).unwrap(), before);
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);
    assert_ne!(fs::read(run.join("checkpoint.bin")).unwrap(), before);
}

#[test]
fn config_errors_name_the_line() {
    let f = Fixture::new();
    let conf = f.path("bad.conf");
    fs::write(&conf, "seed = 1\n\ntrain.lambda = many\n").unwrap();
    let o = bin(&["train", s(&conf), "--out", s(&f.path("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config line 3"));
    assert!(!f.path("r").exists());
}

#[test]
fn divergence_exits_with_numerical_code_and_leaves_nothing() {
    let f = Fixture::new();
    let conf = f.path("smoke.conf");
    let out = f.path("r");
    let o = bin(&["train", s(&conf), "--out", s(&out), "--quiet", "--set", "train.lr=1e200"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert_eq!(fs::read_dir(f.dir.path()).unwrap().count(), 1);
}

#[test]
fn eval_reproduces_summary() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let summary = json(&fs::read_to_string(run.join("summary.json")).unwrap());
    let report = json(&ok(&["eval", s(&run), "--gda"]));
    assert_eq!(report["metrics"], summary["metrics"]);
    assert!(report["gda_accuracy"].as_f64().unwrap() > 0.9);
    let train_split = json(&ok(&["eval", s(&run), "--split", "train"]));
    assert_eq!(train_split["metrics"]["samples"], 240);
}

#[test]
fn exported_features_reproduce_accuracy() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let csv = f.path("f.csv");
    ok(&["export-features", s(&run), "-o", s(&csv)]);
    let (labels, preds, feats) = read_features_csv(&fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(feats.dim(), (120, 8));
    let acc = labels.iter().zip(&preds).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64;
    let summary = json(&fs::read_to_string(run.join("summary.json")).unwrap());
    assert_eq!(acc, summary["metrics"]["accuracy"].as_f64().unwrap());

    let o = bin(&["export-features", s(&run), "-o", s(&csv), "--dim2"]);
    assert_eq!(o.status.code(), Some(1));

    let empty = f.path("empty.csv");
    ok(&["export-features", s(&run), "-o", s(&empty), "--set", "blobs.test_per_class=0"]);
    let text = fs::read_to_string(&empty).unwrap();
    assert_eq!(text, "id,label,pred,norm,f0,f1,f2,f3,f4,f5,f6,f7\n");
}

#[test]
fn analyze_reports_run_and_names_missing_artifacts() {
    let f = Fixture::new();
    let run = f.train("run", &[]);
    let report = json(&ok(&["analyze", s(&run)]));
    assert_eq!(report["epochs"], 4);
    assert!(report["subspace_alignment"].as_f64().unwrap() > 0.9);
    assert!(report["high_norm_accuracy"].as_f64().unwrap() >= report["low_norm_accuracy"].as_f64().unwrap());

    fs::remove_file(run.join("history.csv")).unwrap();
    let o = bin(&["analyze", s(&run)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("history.csv"));
}

#[test]
fn untrained_model_is_poorly_aligned() {
    let f = Fixture::new();
    let run = f.train("run", &["--set", "train.lr=1e-12", "--set", "train.epochs=1"]);
    let report = json(&ok(&["analyze", s(&run)]));
    assert!(report["subspace_alignment"].as_f64().unwrap() < 0.75, "{report}");
}

#[test]
fn lambda_sweep_writes_table() {
    let f = Fixture::new();
    let out = f.train("sweep", &["--sweep-lambda", "0.1,1,10"]);
    for l in ["1e-1", "1e0", "1e1"] {
        assert!(out.join(format!("lambda_{l}/summary.json")).exists(), "{l}");
    }
    let table = ok(&["analyze", s(&out)]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("lambda,lg_lambda,final_train_loss,ratio_to_lambda_1"));
    assert_eq!(lines[2].split(',').nth(3), Some("1e0"));
}

#[test]
fn softmax_baseline_trains_through_the_same_command() {
    let f = Fixture::new();
    let run = f.train("run", &["--loss", "softmax_ce"]);
    let manifest = json(&fs::read_to_string(run.join("manifest.json")).unwrap());
    assert_eq!(manifest["config"]["train.loss"], "softmax_ce");
    let summary = json(&fs::read_to_string(run.join("summary.json")).unwrap());
    assert!(summary["metrics"]["accuracy"].as_f64().unwrap() > 0.9);
}

#[test]
fn gradcheck_passes_and_control_fails() {
    let csv = ok(&["gradcheck", "--instances", "3", "--params", "10"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 16);
    assert!(lines[1..].iter().all(|l| l.ends_with(",true")));
    assert!(lines[15].starts_with("nac_delta0_vs_cosine,"));
    let o = bin(&["gradcheck", "--instances", "2", "--params", "10", "--corrupt"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_is_callable_in_process() {
    let mut out = Vec::new();
    assert_eq!(podloss::cli::run(["podloss", "--version"], &mut out), 0);
    assert_eq!(podloss::cli::run(["podloss", "train"], &mut out), 1);
}
