//! Epoch loop: forward, loss, backward, SGD, the mean-norm statistic and its
//! margin schedule, per-epoch evaluation, and run history.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::classify::{argmax_rows, classify_cosine_batch, metrics_from_predictions, EvalMetrics};
use crate::data::{augment_batch, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    cosine_loss, nac_loss, pod_loss_with, softmax_ce_loss, LatentBatch, Logits, LossBundle, ScMode, INITIAL_MEAN_NORM,
};
use crate::net::{mlp_specs, sgd_step, small_cnn_specs, with_linear_head, LayerSpec, Momentum, Network, SgdConfig, Shape};
use crate::pedcc::{subspace_projector, CentroidMode, CentroidSet};
use crate::seed;

/// Rows per forward pass when no gradient is needed.
const INFER_CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Pod,
    Nac,
    Cosine,
    SoftmaxCe,
}

impl LossKind {
    /// Whether the loss acts on latents against centroids (as opposed to a
    /// trainable head).
    pub fn uses_centroids(self) -> bool {
        !matches!(self, LossKind::SoftmaxCe)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Pod => "pod",
            LossKind::Nac => "nac",
            LossKind::Cosine => "cosine",
            LossKind::SoftmaxCe => "softmax_ce",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pod" => Ok(LossKind::Pod),
            "nac" => Ok(LossKind::Nac),
            "cosine" => Ok(LossKind::Cosine),
            "softmax_ce" => Ok(LossKind::SoftmaxCe),
            _ => Err(Error::Argument(format!("unknown loss `{s}` (pod, nac, cosine, softmax_ce)"))),
        }
    }
}

/// Feature extractor ending in the latent layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backbone {
    /// Hidden widths of a ReLU MLP, e.g. `mlp:256`.
    Mlp(Vec<usize>),
    /// Channel widths of three conv blocks, e.g. `cnn:16,32,64`.
    Cnn([usize; 3]),
}

impl Backbone {
    pub fn specs(&self, input: Shape, latent: usize) -> Vec<LayerSpec> {
        match self {
            Backbone::Mlp(hidden) => mlp_specs(input.len(), hidden, latent),
            Backbone::Cnn(widths) => small_cnn_specs(input, *widths, latent),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match self {
            Backbone::Mlp(h) => write!(f, "mlp:{}", join(h)),
            Backbone::Cnn(w) => write!(f, "cnn:{}", join(w)),
        }
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("bad backbone `{s}` (mlp:W,... or cnn:A,B,C)"));
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let widths: Vec<usize> = if rest.trim().is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(|w| w.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
        };
        if widths.contains(&0) {
            return Err(bad());
        }
        match kind.trim() {
            "mlp" => Ok(Backbone::Mlp(widths)),
            "cnn" => Ok(Backbone::Cnn(widths.try_into().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (1-based) from which the learning rate is multiplied by `lr_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub sc_mode: ScMode,
    pub latent_dim: usize,
    pub backbone: Backbone,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    /// Desk-scale MNIST setup: 784-256-64 MLP, 20 epochs, drops at 6/12/18.
    fn default() -> Self {
        Self {
            alpha: 0.01,
            lambda: 1.0,
            epochs: 20,
            batch_size: 128,
            lr: 0.1,
            lr_drops: vec![6, 12, 18],
            lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            loss: LossKind::Pod,
            sc_mode: ScMode::Covariance,
            latent_dim: 64,
            backbone: Backbone::Mlp(vec![256]),
            eval_every: 1,
            augment: false,
        }
    }
}

impl TrainConfig {
    /// 100 epochs with drops at 30/60/90.
    pub fn paper_schedule(mut self) -> Self {
        self.epochs = 100;
        self.lr_drops = vec![30, 60, 90];
        self
    }

    /// Checks hyperparameters. Centroid losses need `n >= k - 1`, except with
    /// circle centroids, which are 2-D by construction.
    pub fn validate(&self, classes: usize, mode: CentroidMode) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_factor", self.lr_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("{name} = {v} must be positive")));
            }
        }
        let nonneg = [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("{name} = {v} must be nonnegative")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.latent_dim == 0 {
            return Err(Error::Argument("epochs, batch_size, eval_every and latent_dim must be positive".into()));
        }
        let planar = mode == CentroidMode::Circle && self.latent_dim == 2;
        if self.loss.uses_centroids() && self.latent_dim + 1 < classes && !planar {
            return Err(Error::Dimension { k: classes, n: self.latent_dim });
        }
        Ok(())
    }

    pub fn sgd(&self, epoch: usize) -> SgdConfig {
        SgdConfig {
            lr: lr_at(self, epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Layer specs and latent layer count for `input` and `classes`.
    pub fn network_specs(&self, input: Shape, classes: usize) -> (Vec<LayerSpec>, usize) {
        let specs = self.backbone.specs(input, self.latent_dim);
        let latent_layers = specs.len();
        if self.loss.uses_centroids() {
            (specs, latent_layers)
        } else {
            (with_linear_head(specs, self.latent_dim, classes), latent_layers)
        }
    }

    pub fn build_network(&self, input: Shape, classes: usize) -> Result<Network> {
        let (specs, latent_layers) = self.network_specs(input, classes);
        Network::new(input, &specs, latent_layers, self.seed)
    }
}

/// Step schedule: the base rate times `lr_factor` for every drop epoch `<= epoch`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = cfg.lr_drops.iter().filter(|&&d| d <= epoch).count();
    cfg.lr * cfg.lr_factor.powi(drops as i32)
}

/// `δ = α · e · M` for 1-based epoch `e`.
pub fn delta_for(alpha: f64, epoch: usize, mean_norm: f64) -> f64 {
    alpha * epoch as f64 * mean_norm
}

/// Latent features of every sample, computed in chunks on standardised inputs.
pub fn latents_of(net: &Network, ds: &Dataset) -> Result<Array2<f64>> {
    Ok(outputs_of(net, ds)?.1)
}

/// `(outputs, latents)` of every sample.
pub fn outputs_of(net: &Network, ds: &Dataset) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = ds.len();
    let mut out = Array2::<f64>::zeros((n, net.output_dim()));
    let mut lat = Array2::<f64>::zeros((n, net.latent_dim()));
    let mut start = 0;
    while start < n {
        let end = (start + INFER_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = ds.normalized_rows(&idx);
        let (o, l) = net.infer(x.view())?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&o);
        lat.slice_mut(ndarray::s![start..end, ..]).assign(&l);
        start = end;
    }
    Ok((out, lat))
}

/// Mean raw latent norm over the whole (training) set, or the initial value
/// when the set is empty.
pub fn update_norm_mean(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(INITIAL_MEAN_NORM);
    }
    Ok(crate::losses::mean_row_norm(latents_of(net, ds)?.view()))
}

/// Loss of one batch of network outputs. Single-sample batches drop the
/// self-correlation term, which needs two rows.
pub fn batch_loss(
    cfg: &TrainConfig,
    output: ArrayView2<f64>,
    labels: &[usize],
    cs: &CentroidSet,
    delta: f64,
) -> Result<LossBundle> {
    match cfg.loss {
        LossKind::SoftmaxCe => softmax_ce_loss(&Logits { values: output }, labels),
        kind => {
            let batch = LatentBatch::new(output, labels)?;
            match kind {
                LossKind::Cosine => cosine_loss(&batch, cs),
                LossKind::Nac => nac_loss(&batch, cs, delta),
                _ => {
                    let lambda = if labels.len() < 2 { 0.0 } else { cfg.lambda };
                    pod_loss_with(&batch, cs, delta, lambda, cfg.sc_mode)
                }
            }
        }
    }
}

/// Class decisions: cosine to centroids for centroid losses, arg-max of the
/// head's logits for the softmax baseline.
pub fn predict(net: &Network, cs: &CentroidSet, ds: &Dataset) -> Result<(Array2<f64>, Vec<usize>)> {
    let (out, lat) = outputs_of(net, ds)?;
    let preds = if net.has_head() {
        argmax_rows(out.view())
    } else {
        classify_cosine_batch(lat.view(), cs)
    };
    Ok((lat, preds))
}

pub fn evaluate(net: &Network, cs: &CentroidSet, ds: &Dataset) -> Result<EvalMetrics> {
    if net.latent_dim() != cs.n() {
        return Err(Error::Shape(format!("latent dim {} but centroids have n = {}", net.latent_dim(), cs.n())));
    }
    let (lat, preds) = predict(net, cs, ds)?;
    let projector = subspace_projector(cs)?;
    metrics_from_predictions(lat.view(), &ds.labels, &preds, cs, &projector)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub delta: f64,
    pub train_loss: f64,
    /// Mean latent norm over the training set after this epoch.
    pub mean_norm: f64,
    /// `None` on epochs skipped by the evaluation cadence.
    pub eval: Option<EvalMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,lr,delta,train_loss,mean_norm,test_accuracy,low_norm_accuracy,high_norm_accuracy,offdiag_energy,subspace_alignment";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let e = self.eval.as_ref();
        format!(
            "{},{:e},{:e},{:e},{:e},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.delta,
            self.train_loss,
            self.mean_norm,
            opt(e.map(|m| m.accuracy)),
            opt(e.and_then(|m| m.low_norm_accuracy)),
            opt(e.and_then(|m| m.high_norm_accuracy)),
            opt(e.map(|m| m.offdiag_energy)),
            opt(e.map(|m| m.subspace_alignment)),
        )
    }
}

impl TrainHistory {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{HISTORY_HEADER}")?;
        for r in &self.records {
            writeln!(out, "{}", r.csv_row())?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Metrics of the most recent evaluated epoch.
    pub fn final_eval(&self) -> Option<&EvalMetrics> {
        self.records.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

pub struct TrainOutcome {
    pub net: Network,
    pub momentum: Momentum,
    pub history: TrainHistory,
}

pub fn run_training(cfg: &TrainConfig, train: &Dataset, test: &Dataset, cs: &CentroidSet) -> Result<TrainOutcome> {
    run_training_with(cfg, train, test, cs, |_, _, _| Ok(()))
}

/// Trains from a fresh network. `on_epoch` sees each record as soon as it is
/// complete, together with the current parameters and momentum.
pub fn run_training_with<F>(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    cs: &CentroidSet,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &Network, &Momentum) -> Result<()>,
{
    let k = train.num_classes;
    cfg.validate(k, cs.mode())?;
    if cs.k() != k || cs.n() != cfg.latent_dim {
        return Err(Error::Shape(format!(
            "centroids are {}x{}, run needs k = {k}, n = {}",
            cs.k(),
            cs.n(),
            cfg.latent_dim
        )));
    }
    if train.shape != test.shape || test.num_classes != k {
        return Err(Error::Shape("train and test splits disagree on shape or class count".into()));
    }
    if train.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let mut net = cfg.build_network(train.shape, k)?;
    let mut momentum = Momentum::zeros_for(&net);
    let mut history = TrainHistory::default();
    let mut mean_norm = INITIAL_MEAN_NORM;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let sgd = cfg.sgd(epoch);
        let delta = delta_for(cfg.alpha, epoch, mean_norm);
        order.sort_unstable();
        order.shuffle(&mut seed::rng_for(cfg.seed, seed::STREAM_SHUFFLE + epoch as u64));
        let mut aug_rng = seed::rng_for(cfg.seed, seed::STREAM_AUGMENT + epoch as u64);

        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut x = train.images.select(ndarray::Axis(0), chunk);
            if cfg.augment {
                augment_batch(&mut x, train.shape, AugmentPolicy::default(), &mut aug_rng);
            }
            train.normalization.apply(&mut x, train.shape);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let pass = net.forward(x.view())?;
            let bundle = match batch_loss(cfg, pass.output.view(), &labels, cs, delta) {
                Ok(b) => b,
                Err(Error::Argument(_)) if pass.output.iter().any(|v| !v.is_finite()) => {
                    return Err(Error::Diverged { epoch, batch: bi, loss: f64::NAN });
                }
                Err(e) => return Err(e),
            };
            if !bundle.value.is_finite() || bundle.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, batch: bi, loss: bundle.value });
            }
            loss_sum += bundle.value * chunk.len() as f64;
            let (grads, _) = net.backward(&pass.cache, bundle.grad.view(), false)?;
            sgd_step(&mut net, &grads, &mut momentum, sgd)?;
        }

        mean_norm = update_norm_mean(&net, train)?;
        if !mean_norm.is_finite() {
            return Err(Error::Diverged { epoch, batch: order.len().div_ceil(cfg.batch_size), loss: f64::NAN });
        }
        let eval = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            Some(evaluate(&net, cs, test)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr: sgd.lr,
            delta,
            train_loss: loss_sum / train.len() as f64,
            mean_norm,
            eval,
        };
        on_epoch(&record, &net, &momentum)?;
        history.records.push(record);
    }
    Ok(TrainOutcome { net, momentum, history })
}

/// Standardisation statistics fitted on `train` and shared with `test`.
pub fn share_normalization(train: &mut Dataset, test: &mut Dataset) {
    train.fit_normalization();
    test.normalization = train.normalization.clone();
}
