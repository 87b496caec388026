//! Independent reference implementations of the losses on plain vectors, and
//! a central-difference oracle over them.

#![allow(dead_code)]

use ndarray::Array2;
use podloss::losses::{
    cosine_loss, mse_loss_normalized, nac_loss, pod_loss_with, sc_loss_with, softmax_ce_loss, LatentBatch, Logits,
    LossBundle, ScMode,
};
use podloss::pedcc::generate_simplex_centroids;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Nac,
    Cosine,
    Sc,
    ScPearson,
    Pod,
    SoftmaxCe,
    Mse,
}

pub const KINDS: [Kind; 7] = [Kind::Nac, Kind::Cosine, Kind::Sc, Kind::ScPearson, Kind::Pod, Kind::SoftmaxCe, Kind::Mse];

pub struct Instance {
    pub x: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub delta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub k: usize,
    pub n: usize,
}

pub fn random_instance(rng: &mut ChaCha8Rng, logits: bool) -> Instance {
    let n = rng.random_range(2..=6);
    let k = if logits { n } else { rng.random_range(2..=n + 1) };
    let b = rng.random_range(2..=8);
    let scale: f64 = 10f64.powf(rng.random_range(-1.0..1.0));
    let x = (0..b)
        .map(|_| (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut *rng); scale * z }).collect())
        .collect();
    let labels = (0..b).map(|_| rng.random_range(0..k)).collect();
    let seed = rng.random();
    let centroids = if logits {
        Vec::new()
    } else {
        let cs = generate_simplex_centroids(k, n, seed).unwrap();
        cs.points().rows().into_iter().map(|r| r.to_vec()).collect()
    };
    Instance {
        x,
        labels,
        centroids,
        delta: rng.random_range(0.0..2.0) * scale,
        lambda: 10f64.powf(rng.random_range(-2.0..1.0)),
        seed,
        k,
        n,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn ref_nac(x: &[Vec<f64>], labels: &[usize], p: &[Vec<f64>], delta: f64) -> f64 {
    let guard = delta.max(1e-12);
    let total: f64 = x
        .iter()
        .zip(labels)
        .map(|(xi, &y)| {
            let c = dot(xi, &p[y]) / (norm(xi) + guard);
            (1.0 - c).powi(2)
        })
        .sum();
    total / x.len() as f64
}

pub fn ref_mse(x: &[Vec<f64>], labels: &[usize], p: &[Vec<f64>]) -> f64 {
    let total: f64 = x
        .iter()
        .zip(labels)
        .map(|(xi, &y)| {
            let nx = norm(xi);
            xi.iter().zip(&p[y]).map(|(a, b)| (a / nx - b).powi(2)).sum::<f64>()
        })
        .sum();
    total / (2.0 * x.len() as f64)
}

pub fn ref_sc(x: &[Vec<f64>], labels: &[usize], p: &[Vec<f64>], pearson: bool) -> f64 {
    let b = x.len();
    let n = x[0].len();
    let d: Vec<Vec<f64>> = x
        .iter()
        .zip(labels)
        .map(|(xi, &y)| {
            let nx = norm(xi);
            xi.iter().zip(&p[y]).map(|(a, c)| a / nx - c).collect()
        })
        .collect();
    let r = |i: usize, j: usize| d.iter().map(|row| row[i] * row[j]).sum::<f64>() / (b as f64 - 1.0);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut v = r(i, j);
            if pearson {
                v /= (r(i, i).max(1e-12) * r(j, j).max(1e-12)).sqrt();
            }
            total += v * v;
        }
    }
    total
}

pub fn ref_softmax(z: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = z
        .iter()
        .zip(labels)
        .map(|(zi, &y)| zi.iter().map(|v| v.exp()).sum::<f64>().ln() - zi[y])
        .sum();
    total / z.len() as f64
}

pub fn reference(kind: Kind, inst: &Instance, x: &[Vec<f64>]) -> f64 {
    let (l, p) = (&inst.labels, &inst.centroids);
    match kind {
        Kind::Nac => ref_nac(x, l, p, inst.delta),
        Kind::Cosine => ref_nac(x, l, p, 0.0),
        Kind::Sc => ref_sc(x, l, p, false),
        Kind::ScPearson => ref_sc(x, l, p, true),
        Kind::Pod => ref_nac(x, l, p, inst.delta) + inst.lambda * ref_sc(x, l, p, false),
        Kind::SoftmaxCe => ref_softmax(x, l),
        Kind::Mse => ref_mse(x, l, p),
    }
}

pub fn library(kind: Kind, inst: &Instance) -> LossBundle {
    let b = inst.x.len();
    let n = inst.x[0].len();
    let x = Array2::from_shape_fn((b, n), |(i, j)| inst.x[i][j]);
    if kind == Kind::SoftmaxCe {
        return softmax_ce_loss(&Logits { values: x.view() }, &inst.labels).unwrap();
    }
    let cs = generate_simplex_centroids(inst.k, inst.n, inst.seed).unwrap();
    let batch = LatentBatch::new(x.view(), &inst.labels).unwrap();
    match kind {
        Kind::Nac => nac_loss(&batch, &cs, inst.delta),
        Kind::Cosine => cosine_loss(&batch, &cs),
        Kind::Sc => sc_loss_with(&batch, &cs, ScMode::Covariance),
        Kind::ScPearson => sc_loss_with(&batch, &cs, ScMode::Pearson),
        Kind::Pod => pod_loss_with(&batch, &cs, inst.delta, inst.lambda, ScMode::Covariance),
        Kind::Mse => mse_loss_normalized(&batch, &cs),
        Kind::SoftmaxCe => unreachable!(),
    }
    .unwrap()
}

/// Comparison floor: a central difference cannot resolve gradients below a
/// few ulps of the loss divided by the step.
pub fn floor(value: f64, h: f64) -> f64 {
    (1e5 * f64::EPSILON * value.abs().max(1.0) / h).max(1e-8)
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub struct LevelReport {
    pub instances: usize,
    pub max_rel_error: f64,
    pub max_value_error: f64,
}

/// Checks analytic value and gradient of `kind` against the reference value
/// and central differences of the reference, over `instances` draws.
/// `corrupt` flips the analytic gradient's sign.
pub fn loss_level_check(kind: Kind, instances: usize, seed: u64, corrupt: bool) -> LevelReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_value = 0.0f64;
    for _ in 0..instances {
        let inst = random_instance(&mut rng, kind == Kind::SoftmaxCe);
        let got = library(kind, &inst);
        let want = reference(kind, &inst, &inst.x);
        worst_value = worst_value.max((got.value - want).abs() / want.abs().max(1.0));
        let fl = floor(want, STEP);
        let mut x = inst.x.clone();
        for i in 0..x.len() {
            for j in 0..x[i].len() {
                let orig = x[i][j];
                x[i][j] = orig + STEP;
                let up = reference(kind, &inst, &x);
                x[i][j] = orig - STEP;
                let down = reference(kind, &inst, &x);
                x[i][j] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let analytic = if corrupt { -got.grad[[i, j]] } else { got.grad[[i, j]] };
                worst = worst.max(rel_err(analytic, numeric, fl));
            }
        }
    }
    LevelReport {
        instances,
        max_rel_error: worst,
        max_value_error: worst_value,
    }
}

/// IDX image and label files built byte by byte.
pub fn idx_fixture(count: usize, rows: usize, cols: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0x00, 0x00, 0x08, 0x03];
    for v in [count, rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    img.extend((0..count * rows * cols).map(|_| rng.random::<u8>()));
    let mut lbl = vec![0x00, 0x00, 0x08, 0x01];
    lbl.extend_from_slice(&(count as u32).to_be_bytes());
    lbl.extend((0..count).map(|_| rng.random_range(0..10u8)));
    (img, lbl)
}

/// CIFAR-10 binary records built byte by byte.
pub fn cifar_fixture(records: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..records {
        out.push(rng.random_range(0..10u8));
        out.extend((0..3072).map(|_| rng.random::<u8>()));
    }
    out
}
