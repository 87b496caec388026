use std::ffi::CString;
use std::ptr;

use ndarray::Array2;
use podloss::losses::{nac_loss, sc_loss_with, LatentBatch, ScMode};
use podloss::net::{mlp_specs, save_checkpoint, Network, Shape};
use podloss::pedcc::generate_simplex_centroids;
use podloss_ffi::*;

fn simplex(k: usize, n: usize, seed: u64) -> *mut PodCentroids {
    let mut cs = ptr::null_mut();
    assert_eq!(unsafe { pod_centroids_simplex(k, n, seed, &mut cs) }, PodStatus::Ok);
    cs
}

fn features(rows: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, n), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0 + 0.01 * i as f64)
}

#[test]
fn save_load_preserves_points_bitwise() {
    let cs = simplex(5, 6, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("c.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pod_centroids_save(cs, path.as_ptr()) }, PodStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { pod_centroids_load(path.as_ptr(), &mut back) }, PodStatus::Ok);
    let (mut a, mut b) = (vec![0.0; 30], vec![0.0; 30]);
    unsafe {
        assert_eq!(pod_centroids_copy_points(cs, a.as_mut_ptr(), 30), PodStatus::Ok);
        assert_eq!(pod_centroids_copy_points(back, b.as_mut_ptr(), 30), PodStatus::Ok);
        assert_eq!(pod_centroids_copy_points(back, b.as_mut_ptr(), 29), PodStatus::Shape);
        assert_eq!((pod_centroids_k(back), pod_centroids_n(back)), (5, 6));
    }
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let core = generate_simplex_centroids(5, 6, 3).unwrap();
    assert_eq!(core.points().iter().copied().collect::<Vec<_>>(), a);
    unsafe {
        pod_centroids_free(cs);
        pod_centroids_free(back);
    }
}

#[test]
fn missing_file_is_io_error() {
    let path = CString::new("/nonexistent/podloss/c.bin").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { pod_centroids_load(path.as_ptr(), &mut out) }, PodStatus::Io);
    assert!(out.is_null());
    assert_eq!(unsafe { pod_model_load(ptr::null(), &mut ptr::null_mut()) }, PodStatus::NullPointer);
}

#[test]
fn losses_match_core_bitwise() {
    let (rows, n) = (6, 4);
    let cs = simplex(3, n, 1);
    let core = generate_simplex_centroids(3, n, 1).unwrap();
    let x = features(rows, n);
    let labels = [0usize, 1, 2, 0, 1, 2];
    let batch = LatentBatch::new(x.view(), &labels).unwrap();

    let mut value = 0.0;
    let mut grad = vec![0.0; rows * n];
    let st = unsafe {
        pod_nac_loss(cs, x.as_ptr(), rows, n, labels.as_ptr(), 0.3, &mut value, grad.as_mut_ptr(), grad.len())
    };
    assert_eq!(st, PodStatus::Ok);
    let want = nac_loss(&batch, &core, 0.3).unwrap();
    assert_eq!(value.to_bits(), want.value.to_bits());
    assert_eq!(grad, want.grad.iter().copied().collect::<Vec<_>>());

    let st = unsafe {
        pod_sc_loss(cs, x.as_ptr(), rows, n, labels.as_ptr(), PodScMode::Pearson, &mut value, ptr::null_mut(), 0)
    };
    assert_eq!(st, PodStatus::Ok);
    assert_eq!(value.to_bits(), sc_loss_with(&batch, &core, ScMode::Pearson).unwrap().value.to_bits());

    let bad = [0usize, 1, 2, 0, 1, 3];
    let st = unsafe { pod_nac_loss(cs, x.as_ptr(), rows, n, bad.as_ptr(), 0.3, &mut value, ptr::null_mut(), 0) };
    assert_eq!(st, PodStatus::Label);
    let st = unsafe { pod_nac_loss(cs, x.as_ptr(), rows, n + 1, labels.as_ptr(), 0.3, &mut value, ptr::null_mut(), 0) };
    assert_eq!(st, PodStatus::Shape);
    unsafe { pod_centroids_free(cs) };
}

#[test]
fn pod_with_zero_lambda_equals_nac() {
    let (rows, n) = (5, 3);
    let cs = simplex(4, n, 9);
    let x = features(rows, n);
    let labels = [3usize, 2, 1, 0, 1];
    let (mut a, mut b) = (0.0, 0.0);
    unsafe {
        pod_nac_loss(cs, x.as_ptr(), rows, n, labels.as_ptr(), 0.2, &mut a, ptr::null_mut(), 0);
        pod_pod_loss(cs, x.as_ptr(), rows, n, labels.as_ptr(), 0.2, 0.0, PodScMode::Covariance, &mut b, ptr::null_mut(), 0);
        pod_centroids_free(cs);
    }
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn classify_is_scale_invariant_and_flags_zero() {
    let cs = simplex(6, 8, 2);
    let x: Vec<f64> = (0..8).map(|j| (j as f64 - 3.5) / 3.0).collect();
    let mut classes = Vec::new();
    for c in [1e-6, 1.0, 1e6] {
        let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
        let mut class = 0;
        assert_eq!(unsafe { pod_classify_cosine(cs, xs.as_ptr(), 8, &mut class, ptr::null_mut()) }, PodStatus::Ok);
        classes.push(class);
    }
    assert!(classes.windows(2).all(|w| w[0] == w[1]));
    let zero = [0.0; 8];
    let (mut class, mut degenerate) = (7, false);
    unsafe { pod_classify_cosine(cs, zero.as_ptr(), 8, &mut class, &mut degenerate) };
    assert_eq!((class, degenerate), (0, true));
    unsafe { pod_centroids_free(cs) };
}

#[test]
fn model_forward_matches_core() {
    let specs = mlp_specs(5, &[7], 3);
    let net = Network::new(Shape::flat(5), &specs, specs.len(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("m.bin");
    save_checkpoint(&net, None, &file).unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { pod_model_load(path.as_ptr(), &mut m) }, PodStatus::Ok);
    unsafe {
        assert_eq!((pod_model_input_dim(m), pod_model_latent_dim(m), pod_model_output_dim(m)), (5, 3, 3));
    }
    let x = features(4, 5);
    let mut lat = vec![0.0; 12];
    let st = unsafe { pod_model_forward(m, x.as_ptr(), 4, 5, ptr::null_mut(), 0, lat.as_mut_ptr(), 12) };
    assert_eq!(st, PodStatus::Ok);
    let (_, want) = net.infer(x.view()).unwrap();
    assert_eq!(lat, want.iter().copied().collect::<Vec<_>>());
    let st = unsafe { pod_model_forward(m, x.as_ptr(), 4, 4, ptr::null_mut(), 0, ptr::null_mut(), 0) };
    assert_eq!(st, PodStatus::Shape);
    unsafe { pod_model_free(m) };
}
