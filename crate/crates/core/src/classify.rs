//! Decision rules on latent features (cosine to fixed centroids, Gaussian
//! discriminant analysis) and evaluation diagnostics.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::losses::{sc_from_differences, ScMode};
use crate::pedcc::{CentroidSet, SubspaceProjector};

pub const DEFAULT_SHRINKAGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub class: usize,
    /// The input was the zero vector, so every score tied and class 0 was
    /// returned by the tie-break.
    pub degenerate: bool,
}

/// Largest power of two not exceeding `max |x_i|`, so that dividing by it is exact.
fn binary_scale(x: ArrayView1<f64>) -> f64 {
    let max = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if max == 0.0 || !max.is_finite() {
        return 1.0;
    }
    2f64.powi(max.log2().floor() as i32)
}

/// Index of the centroid with the largest dot product with `x`, which is the
/// largest cosine because the centroids have unit norm and `‖x‖` is common to
/// every class. Ties go to the smallest index.
pub fn classify_cosine(x: ArrayView1<f64>, cs: &CentroidSet) -> Decision {
    // Rescaling by a power of two is exact and keeps the dot products away
    // from overflow and underflow.
    let scale = binary_scale(x);
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, p) in cs.points().rows().into_iter().enumerate() {
        let score: f64 = x.iter().zip(p.iter()).map(|(a, b)| (a / scale) * b).sum();
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Decision {
        class: best,
        degenerate: x.iter().all(|v| *v == 0.0),
    }
}

pub fn classify_cosine_batch(latents: ArrayView2<f64>, cs: &CentroidSet) -> Vec<usize> {
    latents.rows().into_iter().map(|x| classify_cosine(x, cs).class).collect()
}

/// Argmax per row with ties to the smallest index.
pub fn argmax_rows(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Per-class Gaussian model with its own covariance.
#[derive(Debug, Clone)]
pub struct GdaModel {
    means: Array2<f64>,
    covariances: Vec<Array2<f64>>,
    log_priors: Vec<f64>,
    chol: Vec<Array2<f64>>,
    half_log_det: Vec<f64>,
    shrinkage: f64,
}

impl GdaModel {
    /// Builds a model from explicit parameters. `priors` must be positive and
    /// are renormalised to sum to one.
    pub fn from_parts(means: Array2<f64>, covariances: Vec<Array2<f64>>, priors: &[f64], shrinkage: f64) -> Result<Self> {
        let k = means.nrows();
        let n = means.ncols();
        if covariances.len() != k || priors.len() != k {
            return Err(Error::Shape("means, covariances and priors disagree on class count".into()));
        }
        if priors.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Argument("class priors must be positive".into()));
        }
        let total: f64 = priors.iter().sum();
        let mut chol = Vec::with_capacity(k);
        let mut half_log_det = Vec::with_capacity(k);
        for (class, cov) in covariances.iter().enumerate() {
            if cov.dim() != (n, n) {
                return Err(Error::Shape(format!("covariance {class} is {:?}, expected ({n}, {n})", cov.dim())));
            }
            let l = linalg::cholesky(cov.view()).ok_or(Error::SingularCovariance { class })?;
            half_log_det.push(l.diag().iter().map(|d| d.ln()).sum());
            chol.push(l);
        }
        Ok(Self {
            means,
            covariances,
            log_priors: priors.iter().map(|p| (p / total).ln()).collect(),
            chol,
            half_log_det,
            shrinkage,
        })
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.means.view()
    }

    pub fn covariance(&self, class: usize) -> ArrayView2<'_, f64> {
        self.covariances[class].view()
    }

    pub fn priors(&self) -> Vec<f64> {
        self.log_priors.iter().map(|l| l.exp()).collect()
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    /// Log prior plus Gaussian log density, without the shared `-(n/2) ln 2π`.
    pub fn log_score(&self, x: ArrayView1<f64>, class: usize) -> f64 {
        let centred = &x - &self.means.row(class);
        let z = linalg::forward_substitute(self.chol[class].view(), centred.view());
        self.log_priors[class] - self.half_log_det[class] - 0.5 * z.dot(&z)
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for class in 0..self.means.nrows() {
            let s = self.log_score(x, class);
            if s > best_score {
                best = class;
                best_score = s;
            }
        }
        best
    }
}

/// Fits per-class means and covariances, shrinking each covariance towards
/// `trace(Σ)/n · I` by `shrinkage`, with priors from class frequencies.
pub fn gda_fit(features: ArrayView2<f64>, labels: &[usize], classes: usize, shrinkage: f64) -> Result<GdaModel> {
    let (b, n) = features.dim();
    if b != labels.len() {
        return Err(Error::Shape(format!("{b} rows but {} labels", labels.len())));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::Argument(format!("shrinkage {shrinkage} outside [0, 1]")));
    }
    let mut counts = vec![0usize; classes];
    let mut means = Array2::<f64>::zeros((classes, n));
    for (row, (x, &y)) in features.rows().into_iter().zip(labels).enumerate() {
        if y >= classes {
            return Err(Error::Label { row, label: y, classes });
        }
        counts[y] += 1;
        let mut m = means.row_mut(y);
        m += &x;
    }
    for (class, &c) in counts.iter().enumerate() {
        if c < 2 {
            return Err(Error::Argument(format!("class {class} has {c} samples, need at least 2")));
        }
        let mut m = means.row_mut(class);
        m /= c as f64;
    }
    let mut covs = vec![Array2::<f64>::zeros((n, n)); classes];
    for (x, &y) in features.rows().into_iter().zip(labels) {
        let d = &x - &means.row(y);
        let outer = d.view().insert_axis(ndarray::Axis(1)).dot(&d.view().insert_axis(ndarray::Axis(0)));
        covs[y] += &outer;
    }
    for (cov, &c) in covs.iter_mut().zip(&counts) {
        *cov /= c as f64 - 1.0;
        let target = cov.diag().sum() / n as f64;
        *cov *= 1.0 - shrinkage;
        for i in 0..n {
            cov[[i, i]] += shrinkage * target;
        }
    }
    let priors: Vec<f64> = counts.iter().map(|&c| c as f64 / b as f64).collect();
    GdaModel::from_parts(means, covs, &priors, shrinkage)
}

pub fn gda_predict(model: &GdaModel, x: ArrayView1<f64>) -> usize {
    model.predict(x)
}

/// Accuracy below and at-or-above the mean latent norm of the set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StratifiedAccuracy {
    pub threshold: f64,
    /// `None` when the stratum is empty.
    pub low: Option<f64>,
    pub high: Option<f64>,
    pub low_count: usize,
    pub high_count: usize,
}

pub fn norm_stratified_accuracy(latents: ArrayView2<f64>, labels: &[usize], predictions: &[usize]) -> Result<StratifiedAccuracy> {
    let b = latents.nrows();
    if b == 0 {
        return Err(Error::Shape("empty evaluation set".into()));
    }
    if labels.len() != b || predictions.len() != b {
        return Err(Error::Shape("latents, labels and predictions differ in length".into()));
    }
    let norms: Vec<f64> = latents.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let threshold = norms.iter().sum::<f64>() / b as f64;
    let (mut low_n, mut low_ok, mut high_n, mut high_ok) = (0usize, 0usize, 0usize, 0usize);
    for ((norm, y), p) in norms.iter().zip(labels).zip(predictions) {
        if *norm < threshold {
            low_n += 1;
            low_ok += usize::from(y == p);
        } else {
            high_n += 1;
            high_ok += usize::from(y == p);
        }
    }
    let frac = |ok: usize, n: usize| (n > 0).then(|| ok as f64 / n as f64);
    Ok(StratifiedAccuracy {
        threshold,
        low: frac(low_ok, low_n),
        high: frac(high_ok, high_n),
        low_count: low_n,
        high_count: high_n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Alignment {
    /// Mean of `‖P x‖ / ‖x‖` over nonzero rows.
    pub mean_ratio: f64,
    pub skipped_zero: usize,
}

pub fn subspace_alignment(latents: ArrayView2<f64>, projector: &SubspaceProjector) -> Alignment {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for x in latents.rows() {
        let norm = x.dot(&x).sqrt();
        if norm == 0.0 {
            skipped += 1;
            continue;
        }
        sum += (projector.projected_norm(x) / norm).min(1.0);
        used += 1;
    }
    Alignment {
        mean_ratio: if used > 0 { sum / used as f64 } else { 0.0 },
        skipped_zero: skipped,
    }
}

/// Self-correlation energy (sum of squared off-diagonal entries) of the whole
/// evaluation set, without a gradient.
pub fn offdiag_energy(latents: ArrayView2<f64>, labels: &[usize], cs: &CentroidSet) -> Result<f64> {
    let (b, n) = latents.dim();
    if b < 2 {
        return Err(Error::BatchSize(b));
    }
    if n != cs.n() || labels.len() != b {
        return Err(Error::Shape("latents do not match centroids or labels".into()));
    }
    let mut diff = latents.to_owned();
    for (row, (mut d, &y)) in diff.rows_mut().into_iter().zip(labels).enumerate() {
        if y >= cs.k() {
            return Err(Error::Label { row, label: y, classes: cs.k() });
        }
        let norm = d.dot(&d).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector(row));
        }
        d /= norm;
        d -= &cs.centroid(y);
    }
    Ok(sc_from_differences(diff.view(), ScMode::Covariance)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub accuracy: f64,
    /// `None` for classes absent from the set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub low_norm_accuracy: Option<f64>,
    pub high_norm_accuracy: Option<f64>,
    pub norm_threshold: f64,
    pub mean_norm: f64,
    pub offdiag_energy: f64,
    pub subspace_alignment: f64,
}

/// Computes every metric from latents, labels and predictions.
pub fn metrics_from_predictions(
    latents: ArrayView2<f64>,
    labels: &[usize],
    predictions: &[usize],
    cs: &CentroidSet,
    projector: &SubspaceProjector,
) -> Result<EvalMetrics> {
    let b = labels.len();
    let strata = norm_stratified_accuracy(latents, labels, predictions)?;
    let mut hits = vec![0usize; cs.k()];
    let mut totals = vec![0usize; cs.k()];
    for (y, p) in labels.iter().zip(predictions) {
        if *y < cs.k() {
            totals[*y] += 1;
            hits[*y] += usize::from(y == p);
        }
    }
    let correct: usize = hits.iter().sum();
    let energy = if b >= 2 {
        offdiag_energy(latents, labels, cs)?
    } else {
        0.0
    };
    Ok(EvalMetrics {
        samples: b,
        accuracy: correct as f64 / b as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&totals)
            .map(|(h, t)| (*t > 0).then(|| *h as f64 / *t as f64))
            .collect(),
        low_norm_accuracy: strata.low,
        high_norm_accuracy: strata.high,
        norm_threshold: strata.threshold,
        mean_norm: strata.threshold,
        offdiag_energy: energy,
        subspace_alignment: subspace_alignment(latents, projector).mean_ratio,
    })
}

/// CSV with header `id,label,pred,norm,f0..f{n-1}`.
pub fn write_features_csv(
    mut out: impl Write,
    latents: ArrayView2<f64>,
    labels: &[usize],
    predictions: &[usize],
) -> std::io::Result<()> {
    let n = latents.ncols();
    let mut header = String::from("id,label,pred,norm");
    for j in 0..n {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(out, "{header}")?;
    for (i, ((x, y), p)) in latents.rows().into_iter().zip(labels).zip(predictions).enumerate() {
        let norm = x.dot(&x).sqrt();
        write!(out, "{i},{y},{p},{norm:e}")?;
        for v in x.iter() {
            write!(out, ",{v:e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Rows read back from a features CSV: `(labels, predictions, features)`.
pub fn read_features_csv(text: &str) -> Result<(Vec<usize>, Vec<usize>, Array2<f64>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Argument("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..4] != ["id", "label", "pred", "norm"] {
        return Err(Error::Argument(format!("unexpected CSV header `{header}`")));
    }
    let n = cols.len() - 4;
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 4 {
            return Err(Error::Argument(format!("CSV row {} has {} fields", i + 1, fields.len())));
        }
        let bad = |_| Error::Argument(format!("CSV row {} is malformed", i + 1));
        labels.push(fields[1].parse().map_err(bad)?);
        preds.push(fields[2].parse().map_err(bad)?);
        for f in &fields[4..] {
            data.push(f.parse::<f64>().map_err(|_| Error::Argument(format!("CSV row {} is malformed", i + 1)))?);
        }
    }
    let rows = labels.len();
    let feats = Array2::from_shape_vec((rows, n), data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((labels, preds, feats))
}

/// Mean cosine of each class's latents to its own centroid, and the angle in
/// degrees between each class mean and its centroid. `None` for absent classes.
pub fn class_alignment(latents: ArrayView2<f64>, labels: &[usize], cs: &CentroidSet) -> Vec<Option<(f64, f64)>> {
    let k = cs.k();
    let mut cos_sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    let mut mean = Array2::<f64>::zeros((k, cs.n()));
    for (x, &y) in latents.rows().into_iter().zip(labels) {
        if y >= k {
            continue;
        }
        let norm = x.dot(&x).sqrt();
        if norm > 0.0 {
            cos_sum[y] += x.dot(&cs.centroid(y)) / norm;
        }
        count[y] += 1;
        let mut m = mean.row_mut(y);
        m += &x;
    }
    (0..k)
        .map(|c| {
            (count[c] > 0).then(|| {
                let m: Array1<f64> = mean.row(c).to_owned();
                let cosine = m.dot(&cs.centroid(c)) / m.dot(&m).sqrt().max(f64::MIN_POSITIVE);
                (cos_sum[c] / count[c] as f64, cosine.clamp(-1.0, 1.0).acos().to_degrees())
            })
        })
        .collect()
}
