//! Finite-difference gradient checks of every loss through small MLP and CNN
//! backbones.

use std::fmt;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    cosine_loss, mse_loss_normalized, nac_loss, pod_loss_with, sc_loss_with, softmax_ce_loss, LatentBatch, Logits,
    LossBundle, ScMode,
};
use crate::net::{grad_check, mlp_specs, small_cnn_specs, with_linear_head, GradCheckOptions, Network, Shape};
use crate::pedcc::generate_simplex_centroids;
use crate::seed;

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

const CLASSES: usize = 3;
const LATENT: usize = 4;
const BATCH: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckLoss {
    Nac,
    Cosine,
    Sc,
    ScPearson,
    Pod,
    SoftmaxCe,
    Mse,
}

impl CheckLoss {
    pub const ALL: [CheckLoss; 7] = [
        CheckLoss::Nac,
        CheckLoss::Cosine,
        CheckLoss::Sc,
        CheckLoss::ScPearson,
        CheckLoss::Pod,
        CheckLoss::SoftmaxCe,
        CheckLoss::Mse,
    ];
}

impl fmt::Display for CheckLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckLoss::Nac => "nac",
            CheckLoss::Cosine => "cosine",
            CheckLoss::Sc => "sc",
            CheckLoss::ScPearson => "sc_pearson",
            CheckLoss::Pod => "pod",
            CheckLoss::SoftmaxCe => "softmax_ce",
            CheckLoss::Mse => "mse",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckBackbone {
    Mlp,
    Cnn,
}

impl fmt::Display for CheckBackbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckBackbone::Mlp => "mlp",
            CheckBackbone::Cnn => "cnn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CaseReport {
    pub loss: CheckLoss,
    pub backbone: CheckBackbone,
    pub instances: usize,
    pub checked: usize,
    /// Probes skipped at kinks; see [`crate::net::GradCheckReport::kinks`].
    pub kinks: usize,
    pub max_rel_error: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < GRADCHECK_THRESHOLD
    }
}

fn network(backbone: CheckBackbone, head: bool, seed: u64) -> Result<Network> {
    let (input, specs) = match backbone {
        CheckBackbone::Mlp => (Shape::flat(6), mlp_specs(6, &[8], LATENT)),
        CheckBackbone::Cnn => {
            let input = Shape::image(2, 8, 8);
            (input, small_cnn_specs(input, [2, 3, 3], LATENT))
        }
    };
    let latent_layers = specs.len();
    let specs = if head { with_linear_head(specs, LATENT, CLASSES) } else { specs };
    Network::new(input, &specs, latent_layers, seed)
}

/// Checks `loss ∘ backbone` on `instances` random networks, inputs and labels.
pub fn check_case(
    loss: CheckLoss,
    backbone: CheckBackbone,
    instances: usize,
    params_per_instance: usize,
    seed: u64,
    corrupt: bool,
) -> Result<CaseReport> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut kinks = 0;
    for i in 0..instances {
        // Redraw instances whose latents contain a zero row (every unit dead),
        // where the normalised losses are undefined.
        let mut attempt = 0u64;
        let (s, net, input, mut rng) = loop {
            let s = seed::derive_seed(seed, ((i as u64) << 32) | attempt);
            let net = network(backbone, loss == CheckLoss::SoftmaxCe, s)?;
            let mut rng = seed::rng_for(s, seed::STREAM_GRADCHECK);
            let input =
                Array2::from_shape_simple_fn((BATCH, net.input_shape().len()), || StandardNormal.sample(&mut rng));
            let latent = net.infer(input.view())?.1;
            if latent.rows().into_iter().all(|r| r.iter().any(|v| *v != 0.0)) {
                break (s, net, input, rng);
            }
            attempt += 1;
        };
        // Every class appears at least once so SC sees varied centroids.
        let labels: Vec<usize> = (0..BATCH)
            .map(|j| if j < CLASSES { j } else { rng.random_range(0..CLASSES) })
            .collect();
        let delta: f64 = rng.random_range(0.1..1.0);
        let cs = generate_simplex_centroids(CLASSES, LATENT, s)?;
        let f = |out: ndarray::ArrayView2<f64>| -> Result<LossBundle> {
            if loss == CheckLoss::SoftmaxCe {
                return softmax_ce_loss(&Logits { values: out }, &labels);
            }
            let batch = LatentBatch::new(out, &labels)?;
            match loss {
                CheckLoss::Nac => nac_loss(&batch, &cs, delta),
                CheckLoss::Cosine => cosine_loss(&batch, &cs),
                CheckLoss::Sc => sc_loss_with(&batch, &cs, ScMode::Covariance),
                CheckLoss::ScPearson => sc_loss_with(&batch, &cs, ScMode::Pearson),
                CheckLoss::Pod => pod_loss_with(&batch, &cs, delta, 1.0, ScMode::Covariance),
                CheckLoss::Mse => mse_loss_normalized(&batch, &cs),
                CheckLoss::SoftmaxCe => unreachable!(),
            }
        };
        let opts = GradCheckOptions {
            samples: params_per_instance,
            step: 1e-5,
            seed: s,
            corrupt,
        };
        let r = grad_check(&net, input.view(), f, opts)?;
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        kinks += r.kinks;
    }
    Ok(CaseReport {
        loss,
        backbone,
        instances,
        checked,
        kinks,
        max_rel_error: worst,
    })
}

/// Every loss against both backbones.
pub fn gradcheck_matrix(instances: usize, params_per_instance: usize, seed: u64, corrupt: bool) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for backbone in [CheckBackbone::Mlp, CheckBackbone::Cnn] {
        for loss in CheckLoss::ALL {
            out.push(check_case(loss, backbone, instances, params_per_instance, seed, corrupt)?);
        }
    }
    Ok(out)
}
