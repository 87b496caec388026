//! Run configuration: a flat `key = value` file with dotted keys.
//!
//! ```text
//! # comment
//! seed = 0
//! data.kind = mnist
//! [train]            # prefixes following keys with `train.`
//! lambda = 1
//! ```
//!
//! Every key can also be overridden with `--set key=value`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{load_cifar10_bin, load_mnist_idx, sha256_file, synth_blobs, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::ScMode;
use crate::pedcc::{generate_circle_centroids, generate_simplex_centroids, load_centroids, CentroidMode, CentroidSet};
use crate::train::{share_normalization, TrainConfig};

/// `(file name, sha256)` for each dataset file read.
pub type Checksums = Vec<(String, String)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Mnist,
    Cifar10,
    Blobs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Relative paths are resolved against the config file's directory.
    pub dir: PathBuf,
    /// Keep only these original labels, relabelled `0..len`. Empty keeps all.
    pub classes: Vec<usize>,
    /// Truncate splits to this many samples (0 = no limit).
    pub train_limit: usize,
    pub test_limit: usize,
    pub blobs_k: usize,
    pub blobs_dim: usize,
    pub blobs_per_class: usize,
    pub blobs_test_per_class: usize,
    pub blobs_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Mnist,
            dir: PathBuf::from("data/mnist"),
            classes: Vec::new(),
            train_limit: 0,
            test_limit: 0,
            blobs_k: 5,
            blobs_dim: 16,
            blobs_per_class: 200,
            blobs_test_per_class: 100,
            blobs_sigma: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidConfig {
    pub mode: CentroidMode,
    pub phase: f64,
    /// Load centroids from this file instead of generating them.
    pub file: Option<PathBuf>,
}

impl Default for CentroidConfig {
    fn default() -> Self {
        Self {
            mode: CentroidMode::Simplex,
            phase: 0.0,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub centroids: CentroidConfig,
    /// Write a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.trim().parse().map_err(|_| format!("`{x}` is not a nonnegative integer")))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "data.kind",
    "data.dir",
    "data.classes",
    "data.train_limit",
    "data.test_limit",
    "blobs.k",
    "blobs.dim",
    "blobs.per_class",
    "blobs.test_per_class",
    "blobs.sigma",
    "centroids.mode",
    "centroids.phase",
    "centroids.file",
    "model.backbone",
    "model.latent_dim",
    "train.loss",
    "train.alpha",
    "train.lambda",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.lr_drops",
    "train.lr_factor",
    "train.momentum",
    "train.weight_decay",
    "train.sc_mode",
    "train.eval_every",
    "train.augment",
    "train.checkpoint_every",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => t.seed = num(v)?,
            "data.kind" => {
                d.kind = match v {
                    "mnist" => DataKind::Mnist,
                    "cifar10" => DataKind::Cifar10,
                    "blobs" => DataKind::Blobs,
                    _ => return Err(format!("unknown data kind `{v}` (mnist, cifar10, blobs)")),
                }
            }
            "data.dir" => d.dir = PathBuf::from(v),
            "data.classes" => d.classes = parse_list(v)?,
            "data.train_limit" => d.train_limit = num(v)?,
            "data.test_limit" => d.test_limit = num(v)?,
            "blobs.k" => d.blobs_k = num(v)?,
            "blobs.dim" => d.blobs_dim = num(v)?,
            "blobs.per_class" => d.blobs_per_class = num(v)?,
            "blobs.test_per_class" => d.blobs_test_per_class = num(v)?,
            "blobs.sigma" => d.blobs_sigma = num(v)?,
            "centroids.mode" => {
                self.centroids.mode = match v {
                    "simplex" => CentroidMode::Simplex,
                    "circle" => CentroidMode::Circle,
                    _ => return Err(format!("unknown centroid mode `{v}` (simplex, circle)")),
                }
            }
            "centroids.phase" => self.centroids.phase = num(v)?,
            "centroids.file" => self.centroids.file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "model.backbone" => t.backbone = v.parse().map_err(|e: Error| e.to_string())?,
            "model.latent_dim" => t.latent_dim = num(v)?,
            "train.loss" => t.loss = v.parse().map_err(|e: Error| e.to_string())?,
            "train.alpha" => t.alpha = num(v)?,
            "train.lambda" => t.lambda = num(v)?,
            "train.epochs" => t.epochs = num(v)?,
            "train.batch_size" => t.batch_size = num(v)?,
            "train.lr" => t.lr = num(v)?,
            "train.lr_drops" => t.lr_drops = parse_list(v)?,
            "train.lr_factor" => t.lr_factor = num(v)?,
            "train.momentum" => t.momentum = num(v)?,
            "train.weight_decay" => t.weight_decay = num(v)?,
            "train.sc_mode" => {
                t.sc_mode = match v {
                    "covariance" => ScMode::Covariance,
                    "pearson" => ScMode::Pearson,
                    _ => return Err(format!("unknown sc_mode `{v}` (covariance, pearson)")),
                }
            }
            "train.eval_every" => t.eval_every = num(v)?,
            "train.augment" => t.augment = boolean(v)?,
            "train.checkpoint_every" => self.checkpoint_every = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let d = &self.data;
        Some(match key {
            "seed" => t.seed.to_string(),
            "data.kind" => match d.kind {
                DataKind::Mnist => "mnist",
                DataKind::Cifar10 => "cifar10",
                DataKind::Blobs => "blobs",
            }
            .into(),
            "data.dir" => d.dir.display().to_string(),
            "data.classes" => join(&d.classes),
            "data.train_limit" => d.train_limit.to_string(),
            "data.test_limit" => d.test_limit.to_string(),
            "blobs.k" => d.blobs_k.to_string(),
            "blobs.dim" => d.blobs_dim.to_string(),
            "blobs.per_class" => d.blobs_per_class.to_string(),
            "blobs.test_per_class" => d.blobs_test_per_class.to_string(),
            "blobs.sigma" => d.blobs_sigma.to_string(),
            "centroids.mode" => match self.centroids.mode {
                CentroidMode::Simplex => "simplex",
                CentroidMode::Circle => "circle",
            }
            .into(),
            "centroids.phase" => self.centroids.phase.to_string(),
            "centroids.file" => self.centroids.file.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "model.backbone" => t.backbone.to_string(),
            "model.latent_dim" => t.latent_dim.to_string(),
            "train.loss" => t.loss.to_string(),
            "train.alpha" => t.alpha.to_string(),
            "train.lambda" => t.lambda.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.lr_drops" => join(&t.lr_drops),
            "train.lr_factor" => t.lr_factor.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.sc_mode" => match t.sc_mode {
                ScMode::Covariance => "covariance",
                ScMode::Pearson => "pearson",
            }
            .into(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.augment" => t.augment.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config { line: line_no, msg: "unterminated section header".into() })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config { line: line_no, msg: format!("expected `key = value`, got `{line}`") })?;
            let key = key.trim();
            let full = if section.is_empty() || key.contains('.') {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            cfg.set(&full, value).map_err(|msg| Error::Config { line: line_no, msg })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Makes relative data and centroid paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if self.data.dir.is_relative() {
            self.data.dir = base.join(&self.data.dir);
        }
        if let Some(f) = &self.centroids.file {
            if f.is_relative() {
                self.centroids.file = Some(base.join(f));
            }
        }
    }

    /// Applies `key=value` overrides. Errors report line 0.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config { line: 0, msg: format!("override `{o}` is not key=value") })?;
            self.set(k.trim(), v).map_err(|msg| Error::Config { line: 0, msg: format!("override `{o}`: {msg}") })?;
        }
        Ok(())
    }

    /// Every key with its resolved value, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Loads both splits, fits normalisation on the training split, and
    /// returns `(train, test, [(file name, sha256)])`.
    pub fn load_data(&self) -> Result<(Dataset, Dataset, Checksums)> {
        let d = &self.data;
        let mut sums = Vec::new();
        let (mut train, mut test) = match d.kind {
            DataKind::Mnist => {
                let f = |n: &str| d.dir.join(n);
                let names = [
                    "train-images-idx3-ubyte",
                    "train-labels-idx1-ubyte",
                    "t10k-images-idx3-ubyte",
                    "t10k-labels-idx1-ubyte",
                ];
                for n in names {
                    sums.push((n.to_string(), sha256_file(&f(n))?));
                }
                (
                    load_mnist_idx(&f(names[0]), &f(names[1]), Split::Train)?,
                    load_mnist_idx(&f(names[2]), &f(names[3]), Split::Test)?,
                )
            }
            DataKind::Cifar10 => {
                let train_files: Vec<PathBuf> = (1..=5).map(|i| d.dir.join(format!("data_batch_{i}.bin"))).collect();
                let test_files = vec![d.dir.join("test_batch.bin")];
                for p in train_files.iter().chain(&test_files) {
                    sums.push((p.file_name().unwrap().to_string_lossy().into_owned(), sha256_file(p)?));
                }
                (load_cifar10_bin(&train_files, Split::Train)?, load_cifar10_bin(&test_files, Split::Test)?)
            }
            DataKind::Blobs => {
                let seed = self.train.seed;
                let tr = synth_blobs(d.blobs_k, d.blobs_dim, d.blobs_per_class, d.blobs_sigma, seed, Split::Train)?;
                let te = synth_blobs(d.blobs_k, d.blobs_dim, d.blobs_test_per_class, d.blobs_sigma, seed, Split::Test)?;
                sums.push(("blobs-train".into(), tr.content_hash()));
                sums.push(("blobs-test".into(), te.content_hash()));
                (tr, te)
            }
        };
        if !d.classes.is_empty() {
            train = train.filter_classes(&d.classes);
            test = test.filter_classes(&d.classes);
        }
        if d.train_limit > 0 {
            train = train.take(d.train_limit);
        }
        if d.test_limit > 0 {
            test = test.take(d.test_limit);
        }
        share_normalization(&mut train, &mut test);
        Ok((train, test, sums))
    }

    /// Centroids for `k` classes: loaded from `centroids.file` when set,
    /// otherwise generated from the run seed.
    pub fn centroid_set(&self, k: usize) -> Result<CentroidSet> {
        let n = self.train.latent_dim;
        let cs = match (&self.centroids.file, self.centroids.mode) {
            (Some(path), _) => load_centroids(path)?,
            (None, CentroidMode::Circle) => {
                if n != 2 {
                    return Err(Error::Argument(format!("circle centroids need model.latent_dim = 2, got {n}")));
                }
                generate_circle_centroids(k, self.centroids.phase)?
            }
            (None, CentroidMode::Simplex) => generate_simplex_centroids(k, n, self.train.seed)?,
        };
        if cs.k() != k || cs.n() != n {
            return Err(Error::Shape(format!("centroid file is {}x{}, run needs {k}x{n}", cs.k(), cs.n())));
        }
        Ok(cs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{Backbone, LossKind};

    #[test]
    fn parses_sections_and_dotted_keys() {
        let text = "seed = 7\n# comment\ndata.kind = blobs\n[train]\nlambda = 10 # inline\nloss = nac\nlr_drops = 2,4\n[model]\nbackbone = cnn:4,8,16\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.data.kind, DataKind::Blobs);
        assert_eq!(cfg.train.lambda, 10.0);
        assert_eq!(cfg.train.loss, LossKind::Nac);
        assert_eq!(cfg.train.lr_drops, vec![2, 4]);
        assert_eq!(cfg.train.backbone, Backbone::Cnn([4, 8, 16]));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("seed = 1\n\ntrain.lr = fast\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = RunConfig::parse("nonsense\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        let err = RunConfig::parse("train.colour = red\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        let err = RunConfig::parse("[train\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
    }

    #[test]
    fn overrides_and_text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["train.lambda=0", "data.classes = 0,1,2", "centroids.file=c.bin"]).unwrap();
        assert_eq!(cfg.train.lambda, 0.0);
        assert_eq!(cfg.data.classes, vec![0, 1, 2]);
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(matches!(cfg.apply_overrides(&["train.lambda"]), Err(Error::Config { line: 0, .. })));
        for key in KEYS {
            assert!(cfg.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn blob_data_and_centroids() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["data.kind=blobs", "blobs.k=3", "blobs.dim=4", "blobs.per_class=10", "model.latent_dim=4"])
            .unwrap();
        let (tr, te, sums) = cfg.load_data().unwrap();
        assert_eq!(tr.len(), 30);
        assert_eq!(te.len(), 300);
        assert_eq!(sums.len(), 2);
        assert_eq!(te.normalization, tr.normalization);
        let cs = cfg.centroid_set(3).unwrap();
        assert_eq!((cs.k(), cs.n()), (3, 4));
        cfg.apply_overrides(&["centroids.mode=circle"]).unwrap();
        assert!(cfg.centroid_set(3).is_err());
    }
}
