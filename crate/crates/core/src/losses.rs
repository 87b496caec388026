//! Loss functions on latent features and their analytic gradients.
//!
//! Every loss here takes the raw (unnormalised) latent matrix of a batch and
//! returns the scalar value together with `∂loss/∂features`. Per-sample
//! losses are averaged over the batch.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::pedcc::CentroidSet;

/// Denominator floor for the cosine.
pub const EPS: f64 = 1e-12;

/// Mean latent norm assumed before the first epoch has been observed.
pub const INITIAL_MEAN_NORM: f64 = 0.05;

/// Latent features of a mini-batch (one sample per row) with their labels.
#[derive(Debug, Clone, Copy)]
pub struct LatentBatch<'a> {
    features: ArrayView2<'a, f64>,
    labels: &'a [usize],
}

impl<'a> LatentBatch<'a> {
    pub fn new(features: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(((row, _), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite feature in row {row}")));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> ArrayView2<'a, f64> {
        self.features
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check_against(&self, cs: &CentroidSet) -> Result<()> {
        if self.features.ncols() != cs.n() {
            return Err(Error::Shape(format!(
                "latent dimension {} does not match centroid dimension {}",
                self.features.ncols(),
                cs.n()
            )));
        }
        for (row, &label) in self.labels.iter().enumerate() {
            if label >= cs.k() {
                return Err(Error::Label {
                    row,
                    label,
                    classes: cs.k(),
                });
            }
        }
        Ok(())
    }
}

/// Arguments of the additive denominator term `δ = α · e · M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaState {
    pub alpha: f64,
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean raw latent L2 norm over the training set after the previous epoch.
    pub mean_norm: f64,
    pub eps: f64,
}

impl DeltaState {
    pub fn new(alpha: f64, epoch: usize, mean_norm: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::Argument(format!("alpha = {alpha} must be >= 0")));
        }
        if !(mean_norm > 0.0) {
            return Err(Error::Argument(format!("mean norm M = {mean_norm} must be > 0")));
        }
        Ok(Self {
            alpha,
            epoch,
            mean_norm,
            eps: EPS,
        })
    }
}

pub fn delta_schedule(state: &DeltaState) -> f64 {
    state.alpha * state.epoch as f64 * state.mean_norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// `(x · p) / (‖x‖ + eps)` for a unit centroid `p`. Zero `x` gives 0.
pub fn cosine_to_centroid(x: ArrayView1<f64>, p: ArrayView1<f64>, eps: f64) -> f64 {
    let norm = x.dot(&x).sqrt();
    x.dot(&p) / (norm + eps)
}

/// `(x · p) / (‖x‖ + max(δ, eps))`, i.e. `cos θ / (1 + δ/‖x‖)` up to the floor.
pub fn norm_adaptive_cosine(x: ArrayView1<f64>, p: ArrayView1<f64>, delta: f64, eps: f64) -> f64 {
    cosine_to_centroid(x, p, delta.max(eps))
}

/// Norm-adaptive cosine loss: mean over the batch of `(1 - cos_Na)^2`.
pub fn nac_loss(batch: &LatentBatch, cs: &CentroidSet, delta: f64) -> Result<LossBundle> {
    batch.check_against(cs)?;
    if !(delta >= 0.0) {
        return Err(Error::Argument(format!("delta = {delta} must be >= 0")));
    }
    let guard = delta.max(EPS);
    let b = batch.len() as f64;
    let mut grad = Array2::<f64>::zeros(batch.features.raw_dim());
    let mut total = 0.0;

    for ((x, &label), mut g) in batch
        .features
        .rows()
        .into_iter()
        .zip(batch.labels)
        .zip(grad.rows_mut())
    {
        let p = cs.centroid(label);
        let norm = x.dot(&x).sqrt();
        let denom = norm + guard;
        let dot = x.dot(&p);
        let cos = dot / denom;
        let miss = 1.0 - cos;
        total += miss * miss;

        // d cos / dx = p/denom - dot * x / (‖x‖ denom²)
        let coef = -2.0 * miss / b;
        Zip::from(&mut g).and(&p).for_each(|g, &p| *g = coef * p / denom);
        if norm > 0.0 {
            g.scaled_add(-coef * dot / (norm * denom * denom), &x);
        }
    }
    Ok(LossBundle {
        value: total / b,
        grad,
    })
}

/// Cosine loss, the `δ = 0` case of [`nac_loss`].
pub fn cosine_loss(batch: &LatentBatch, cs: &CentroidSet) -> Result<LossBundle> {
    nac_loss(batch, cs, 0.0)
}

fn unit_rows(features: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut unit = features.to_owned();
    let mut norms = Vec::with_capacity(features.nrows());
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector(i));
        }
        row /= norm;
        norms.push(norm);
    }
    Ok((unit, norms))
}

/// Pulls a gradient taken w.r.t. unit-normalised rows back to the raw rows:
/// `(g - x̃ (x̃ · g)) / ‖x‖`.
fn backprop_normalisation(unit: &Array2<f64>, norms: &[f64], grad_unit: &mut Array2<f64>) {
    for ((u, &norm), mut g) in unit.rows().into_iter().zip(norms).zip(grad_unit.rows_mut()) {
        let radial = u.dot(&g);
        g.scaled_add(-radial, &u);
        g /= norm;
    }
}

/// `1/(2B) Σ ‖x̃ - p̃‖²` on unit-normalised vectors, which equals `mean(1 - cos θ)`.
pub fn mse_loss_normalized(batch: &LatentBatch, cs: &CentroidSet) -> Result<LossBundle> {
    batch.check_against(cs)?;
    let (unit, norms) = unit_rows(batch.features)?;
    let b = batch.len() as f64;
    let mut grad = Array2::<f64>::zeros(unit.raw_dim());
    let mut total = 0.0;
    for ((u, &label), mut g) in unit.rows().into_iter().zip(batch.labels).zip(grad.rows_mut()) {
        let p = cs.centroid(label);
        let pn = p.dot(&p).sqrt();
        Zip::from(&mut g).and(&u).and(&p).for_each(|g, &u, &p| *g = u - p / pn);
        total += g.dot(&g);
        g /= b;
    }
    backprop_normalisation(&unit, &norms, &mut grad);
    Ok(LossBundle {
        value: total / (2.0 * b),
        grad,
    })
}

/// How the self-correlation matrix is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScMode {
    /// `R = D Dᵀ / (B - 1)` exactly.
    #[default]
    Covariance,
    /// `R_ij / sqrt(R_ii R_jj)`, a correlation-coefficient variant for ablation.
    Pearson,
}

/// Self-correlation loss from the `B × n` matrix of differences `x̃_i - p_{y_i}`.
/// Returns the value and its gradient with respect to the differences.
pub fn sc_from_differences(diff: ArrayView2<f64>, mode: ScMode) -> Result<(f64, Array2<f64>)> {
    let b = diff.nrows();
    if b < 2 {
        return Err(Error::BatchSize(b));
    }
    let scale = 1.0 / (b as f64 - 1.0);
    let mut r = diff.t().dot(&diff);
    r *= scale;
    let n = r.nrows();

    let grad_r = match mode {
        ScMode::Covariance => {
            let mut value = 0.0;
            let mut g = r.clone();
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        g[[i, j]] = 0.0;
                    } else {
                        value += r[[i, j]] * r[[i, j]];
                        g[[i, j]] *= 2.0;
                    }
                }
            }
            (value, g)
        }
        ScMode::Pearson => {
            let sd: Vec<f64> = r.diag().iter().map(|v| v.max(EPS).sqrt()).collect();
            let mut value = 0.0;
            let mut g = Array2::<f64>::zeros((n, n));
            let mut row_energy = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let c = r[[i, j]] / (sd[i] * sd[j]);
                        value += c * c;
                        row_energy[i] += c * c;
                        g[[i, j]] = 2.0 * c / (sd[i] * sd[j]);
                    }
                }
            }
            for k in 0..n {
                if r[[k, k]] > EPS {
                    g[[k, k]] = -2.0 * row_energy[k] / r[[k, k]];
                }
            }
            (value, g)
        }
    };
    let (value, g) = grad_r;
    let sym = &g + &g.t();
    let mut grad_diff = diff.dot(&sym);
    grad_diff *= scale;
    Ok((value, grad_diff))
}

/// Self-correlation constraint loss: the sum of squared off-diagonal entries
/// of the `n × n` self-correlation of `X - X_pedcc`, where `X` holds the
/// unit-normalised features. The gradient passes through the normalisation.
pub fn sc_loss(batch: &LatentBatch, cs: &CentroidSet) -> Result<LossBundle> {
    sc_loss_with(batch, cs, ScMode::Covariance)
}

pub fn sc_loss_with(batch: &LatentBatch, cs: &CentroidSet, mode: ScMode) -> Result<LossBundle> {
    batch.check_against(cs)?;
    if batch.len() < 2 {
        return Err(Error::BatchSize(batch.len()));
    }
    let (unit, norms) = unit_rows(batch.features)?;
    let mut diff = unit.clone();
    for (mut d, &label) in diff.rows_mut().into_iter().zip(batch.labels) {
        d -= &cs.centroid(label);
    }
    let (value, mut grad) = sc_from_differences(diff.view(), mode)?;
    backprop_normalisation(&unit, &norms, &mut grad);
    Ok(LossBundle { value, grad })
}

/// `L_NaC + λ L_SC`. With `λ = 0` the SC term is not evaluated at all, so the
/// result is bit-identical to [`nac_loss`] and single-sample batches work.
pub fn pod_loss(batch: &LatentBatch, cs: &CentroidSet, delta: f64, lambda: f64) -> Result<LossBundle> {
    pod_loss_with(batch, cs, delta, lambda, ScMode::Covariance)
}

pub fn pod_loss_with(
    batch: &LatentBatch,
    cs: &CentroidSet,
    delta: f64,
    lambda: f64,
    mode: ScMode,
) -> Result<LossBundle> {
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("lambda = {lambda} must be >= 0")));
    }
    let mut nac = nac_loss(batch, cs, delta)?;
    if lambda == 0.0 {
        return Ok(nac);
    }
    let sc = sc_loss_with(batch, cs, mode)?;
    nac.value += lambda * sc.value;
    nac.grad.scaled_add(lambda, &sc.grad);
    Ok(nac)
}

/// Outputs of a trainable linear head (baseline path only), `B × k`.
#[derive(Debug, Clone, Copy)]
pub struct Logits<'a> {
    pub values: ArrayView2<'a, f64>,
}

/// Softmax cross-entropy averaged over the batch, with the row maximum
/// subtracted before exponentiation. Gradient is `(softmax - onehot) / B`.
pub fn softmax_ce_loss(logits: &Logits, labels: &[usize]) -> Result<LossBundle> {
    let z = logits.values;
    let (b, k) = z.dim();
    if b != labels.len() || b == 0 {
        return Err(Error::Shape(format!("{b} logit rows but {} labels", labels.len())));
    }
    let mut grad = Array2::<f64>::zeros((b, k));
    let mut total = 0.0;
    for (row, ((zr, &label), mut g)) in z.rows().into_iter().zip(labels).zip(grad.rows_mut()).enumerate() {
        if label >= k {
            return Err(Error::Label { row, label, classes: k });
        }
        let max = zr.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut sum = 0.0;
        Zip::from(&mut g).and(&zr).for_each(|g, &v| {
            *g = (v - max).exp();
            sum += *g;
        });
        total += sum.ln() + max - zr[label];
        g /= sum;
        g[label] -= 1.0;
        g /= b as f64;
    }
    Ok(LossBundle {
        value: total / b as f64,
        grad,
    })
}

/// The two per-sample angular penalties whose derivatives are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngularPenalty {
    /// `1 - cos θ`, derivative `sin θ`.
    OneMinusCos,
    /// `(1 - cos θ)^2`, derivative `2 (1 - cos θ) sin θ`.
    SquaredOneMinusCos,
}

impl AngularPenalty {
    pub fn derivative(self, theta: f64) -> f64 {
        match self {
            AngularPenalty::OneMinusCos => theta.sin(),
            AngularPenalty::SquaredOneMinusCos => 2.0 * (1.0 - theta.cos()) * theta.sin(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DerivativeProfile {
    pub degrees: Vec<f64>,
    pub values: Vec<f64>,
}

impl DerivativeProfile {
    /// `(degrees, value)` of the maximum; first occurrence on ties.
    pub fn peak(&self) -> (f64, f64) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (self.degrees[best], self.values[best])
    }

    pub fn at(&self, degrees: f64) -> Option<f64> {
        self.degrees
            .iter()
            .position(|d| (d - degrees).abs() < 1e-9)
            .map(|i| self.values[i])
    }
}

/// Samples `d penalty / dθ` on `[0°, 180°]` with the given step (at most 0.5°).
pub fn derivative_profile(kind: AngularPenalty, step_degrees: f64) -> Result<DerivativeProfile> {
    if !(step_degrees > 0.0 && step_degrees <= 0.5) {
        return Err(Error::Argument(format!(
            "grid step {step_degrees}° must lie in (0, 0.5]"
        )));
    }
    let steps = (180.0 / step_degrees).round() as usize;
    let degrees: Vec<f64> = (0..=steps)
        .map(|i| (i as f64 * step_degrees).min(180.0))
        .collect();
    let values = degrees
        .iter()
        .map(|d| kind.derivative(d.to_radians()))
        .collect();
    Ok(DerivativeProfile { degrees, values })
}

/// Mean raw L2 norm of the rows; [`INITIAL_MEAN_NORM`] for an empty matrix.
pub fn mean_row_norm(features: ArrayView2<f64>) -> f64 {
    if features.nrows() == 0 {
        return INITIAL_MEAN_NORM;
    }
    features
        .map_axis(Axis(1), |r| r.dot(&r).sqrt())
        .mean()
        .unwrap_or(INITIAL_MEAN_NORM)
}
