//! C ABI over `podloss`.
//!
//! Every fallible call returns a [`PodStatus`]. On failure a message is kept
//! per thread and can be read with [`pod_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function.
//!
//! Matrices are row-major `double` buffers. Lengths are element counts.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::{ArrayView1, ArrayView2};
use podloss::classify::classify_cosine;
use podloss::losses::{nac_loss, pod_loss_with, sc_loss_with, softmax_ce_loss, LatentBatch, Logits, LossBundle, ScMode};
use podloss::net::{load_checkpoint, Network};
use podloss::pedcc::{
    generate_circle_centroids, generate_simplex_centroids, load_centroids, save_centroids, verify_centroids,
    CentroidSet,
};
use podloss::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PodStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// `k > n + 1` for a simplex.
    Dimension = 3,
    Shape = 4,
    ZeroVector = 5,
    Label = 6,
    /// Malformed centroid or checkpoint file.
    Format = 7,
    Io = 8,
    /// Rank loss, divergence or a singular covariance.
    Numerical = 9,
    /// A Rust panic was caught at the boundary.
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PodScMode {
    Covariance = 0,
    Pearson = 1,
}

impl From<PodScMode> for ScMode {
    fn from(m: PodScMode) -> Self {
        match m {
            PodScMode::Covariance => ScMode::Covariance,
            PodScMode::Pearson => ScMode::Pearson,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PodCentroidReport {
    pub k: usize,
    pub n: usize,
    pub max_norm_deviation: f64,
    pub max_geometry_deviation: f64,
    pub passed: bool,
}

/// Opaque set of fixed class centroids.
pub struct PodCentroids(CentroidSet);

/// Opaque trained network loaded from a checkpoint.
pub struct PodModel(Network);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PodStatus {
    match e {
        Error::Argument(_) | Error::BatchSize(_) | Error::Config { .. } | Error::StaleCache(_) => {
            PodStatus::InvalidArgument
        }
        Error::Dimension { .. } => PodStatus::Dimension,
        Error::Shape(_) => PodStatus::Shape,
        Error::ZeroVector(_) => PodStatus::ZeroVector,
        Error::Label { .. } => PodStatus::Label,
        Error::Format { .. } => PodStatus::Format,
        Error::Io(_) => PodStatus::Io,
        Error::NumericalRank { .. } | Error::Diverged { .. } | Error::SingularCovariance { .. } => {
            PodStatus::Numerical
        }
    }
}

struct Fail(PodStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PodStatus::NullPointer, format!("{what} is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PodStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside podloss".into());
            PodStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn matrix<'a>(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<ArrayView2<'a, f64>, Fail> {
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Fail(PodStatus::InvalidArgument, format!("{what}: size overflow")))?;
    let s = slice(p, len, what)?;
    Ok(ArrayView2::from_shape((rows, cols), s).expect("length checked"))
}

unsafe fn centroids<'a>(cs: *const PodCentroids) -> Result<&'a CentroidSet, Fail> {
    cs.as_ref().map(|c| &c.0).ok_or_else(|| null("centroids"))
}

unsafe fn path_of(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PodStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn write_bundle(b: LossBundle, value: *mut f64, grad: *mut f64, grad_len: usize) -> Result<(), Fail> {
    if value.is_null() {
        return Err(null("value"));
    }
    if !grad.is_null() {
        if grad_len != b.grad.len() {
            return Err(Fail(
                PodStatus::Shape,
                format!("gradient buffer holds {grad_len} values, need {}", b.grad.len()),
            ));
        }
        let dst = slice_mut(grad, grad_len, "grad")?;
        for (d, s) in dst.iter_mut().zip(b.grad.iter()) {
            *d = *s;
        }
    }
    *value = b.value;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pod_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the full message length
/// including the NUL, or 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be NULL or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pod_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Regular simplex of `k` unit vectors in `n` dimensions, randomly rotated by `seed`.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn pod_centroids_simplex(k: usize, n: usize, seed: u64, out: *mut *mut PodCentroids) -> PodStatus {
    guard(|| store(out, PodCentroids(generate_simplex_centroids(k, n, seed)?)))
}

/// `k` evenly spaced points on the unit circle starting at angle `phase`.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn pod_centroids_circle(k: usize, phase: f64, out: *mut *mut PodCentroids) -> PodStatus {
    guard(|| store(out, PodCentroids(generate_circle_centroids(k, phase)?)))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pod_centroids_load(path: *const c_char, out: *mut *mut PodCentroids) -> PodStatus {
    guard(|| store(out, PodCentroids(load_centroids(&path_of(path)?)?)))
}

/// # Safety
/// `cs` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pod_centroids_save(cs: *const PodCentroids, path: *const c_char) -> PodStatus {
    guard(|| Ok(save_centroids(centroids(cs)?, &path_of(path)?)?))
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `cs` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pod_centroids_k(cs: *const PodCentroids) -> usize {
    cs.as_ref().map_or(0, |c| c.0.k())
}

/// Latent dimension, or 0 for NULL.
///
/// # Safety
/// `cs` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pod_centroids_n(cs: *const PodCentroids) -> usize {
    cs.as_ref().map_or(0, |c| c.0.n())
}

/// Copies the `k × n` centroid matrix into `out`, which must hold exactly `k * n` values.
///
/// # Safety
/// `cs` must be a live handle and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pod_centroids_copy_points(cs: *const PodCentroids, out: *mut f64, len: usize) -> PodStatus {
    guard(|| {
        let cs = centroids(cs)?;
        let pts = cs.points();
        if len != pts.len() {
            return Err(Fail(PodStatus::Shape, format!("buffer holds {len} values, need {}", pts.len())));
        }
        for (d, s) in slice_mut(out, len, "out")?.iter_mut().zip(pts.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// # Safety
/// `cs` must be a live handle and `report` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pod_centroids_verify(cs: *const PodCentroids, report: *mut PodCentroidReport) -> PodStatus {
    guard(|| {
        let r = verify_centroids(centroids(cs)?);
        let report = report.as_mut().ok_or_else(|| null("report"))?;
        *report = PodCentroidReport {
            k: r.k,
            n: r.n,
            max_norm_deviation: r.max_norm_deviation,
            max_geometry_deviation: r.max_geometry_deviation,
            passed: r.passed,
        };
        Ok(())
    })
}

/// # Safety
/// `cs` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pod_centroids_free(cs: *mut PodCentroids) {
    if !cs.is_null() {
        drop(Box::from_raw(cs));
    }
}

/// Nearest centroid by cosine. `degenerate` (optional) is set when `x` is zero.
///
/// # Safety
/// `x` must point to `n` doubles; `class_out` must be valid; `degenerate` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn pod_classify_cosine(
    cs: *const PodCentroids,
    x: *const f64,
    n: usize,
    class_out: *mut usize,
    degenerate: *mut bool,
) -> PodStatus {
    guard(|| {
        let cs = centroids(cs)?;
        if n != cs.n() {
            return Err(Fail(PodStatus::Shape, format!("x has {n} values, centroids have n = {}", cs.n())));
        }
        let x = ArrayView1::from(slice(x, n, "x")?);
        let d = classify_cosine(x, cs);
        *class_out.as_mut().ok_or_else(|| null("class_out"))? = d.class;
        if let Some(flag) = degenerate.as_mut() {
            *flag = d.degenerate;
        }
        Ok(())
    })
}

unsafe fn latent_loss(
    features: *const f64,
    rows: usize,
    n: usize,
    labels: *const usize,
    f: impl FnOnce(&LatentBatch) -> podloss::Result<LossBundle>,
) -> Result<LossBundle, Fail> {
    let x = matrix(features, rows, n, "features")?;
    let labels = slice(labels, rows, "labels")?;
    let batch = LatentBatch::new(x, labels)?;
    Ok(f(&batch)?)
}

/// Norm-adaptive cosine loss. `grad` may be NULL; otherwise it receives
/// `rows × n` values.
///
/// # Safety
/// `features` must hold `rows * n` doubles, `labels` `rows` entries, `value`
/// must be valid, and `grad` NULL or `grad_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pod_nac_loss(
    cs: *const PodCentroids,
    features: *const f64,
    rows: usize,
    n: usize,
    labels: *const usize,
    delta: f64,
    value: *mut f64,
    grad: *mut f64,
    grad_len: usize,
) -> PodStatus {
    guard(|| {
        let cs = centroids(cs)?;
        let b = latent_loss(features, rows, n, labels, |batch| nac_loss(batch, cs, delta))?;
        write_bundle(b, value, grad, grad_len)
    })
}

/// Self-correlation loss of the residuals to each sample's centroid.
///
/// # Safety
/// As for [`pod_nac_loss`].
#[no_mangle]
pub unsafe extern "C" fn pod_sc_loss(
    cs: *const PodCentroids,
    features: *const f64,
    rows: usize,
    n: usize,
    labels: *const usize,
    mode: PodScMode,
    value: *mut f64,
    grad: *mut f64,
    grad_len: usize,
) -> PodStatus {
    guard(|| {
        let cs = centroids(cs)?;
        let b = latent_loss(features, rows, n, labels, |batch| sc_loss_with(batch, cs, mode.into()))?;
        write_bundle(b, value, grad, grad_len)
    })
}

/// NaC loss plus `lambda` times the SC loss.
///
/// # Safety
/// As for [`pod_nac_loss`].
#[no_mangle]
pub unsafe extern "C" fn pod_pod_loss(
    cs: *const PodCentroids,
    features: *const f64,
    rows: usize,
    n: usize,
    labels: *const usize,
    delta: f64,
    lambda: f64,
    mode: PodScMode,
    value: *mut f64,
    grad: *mut f64,
    grad_len: usize,
) -> PodStatus {
    guard(|| {
        let cs = centroids(cs)?;
        let b = latent_loss(features, rows, n, labels, |batch| pod_loss_with(batch, cs, delta, lambda, mode.into()))?;
        write_bundle(b, value, grad, grad_len)
    })
}

/// Mean softmax cross-entropy over `rows` logit rows of width `classes`.
///
/// # Safety
/// `logits` must hold `rows * classes` doubles, `labels` `rows` entries,
/// `value` must be valid, and `grad` NULL or `grad_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pod_softmax_ce_loss(
    logits: *const f64,
    rows: usize,
    classes: usize,
    labels: *const usize,
    value: *mut f64,
    grad: *mut f64,
    grad_len: usize,
) -> PodStatus {
    guard(|| {
        let values = matrix(logits, rows, classes, "logits")?;
        let labels = slice(labels, rows, "labels")?;
        let b = softmax_ce_loss(&Logits { values }, labels)?;
        write_bundle(b, value, grad, grad_len)
    })
}

/// Loads a network checkpoint written by `podloss train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pod_model_load(path: *const c_char, out: *mut *mut PodModel) -> PodStatus {
    guard(|| store(out, PodModel(load_checkpoint(&path_of(path)?)?.0)))
}

/// Flattened input length, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pod_model_input_dim(m: *const PodModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.input_shape().len())
}

/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pod_model_latent_dim(m: *const PodModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.latent_dim())
}

/// Width of the final layer: the latent dimension, or the class count for
/// models with a softmax head.
///
/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pod_model_output_dim(m: *const PodModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.output_dim())
}

/// Runs `rows` standardised inputs through the network. Either output buffer
/// may be NULL; otherwise its length must match exactly.
///
/// # Safety
/// `input` must hold `rows * input_dim` doubles and each non-NULL output
/// buffer its stated number of writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pod_model_forward(
    m: *const PodModel,
    input: *const f64,
    rows: usize,
    input_dim: usize,
    output: *mut f64,
    output_len: usize,
    latent: *mut f64,
    latent_len: usize,
) -> PodStatus {
    guard(|| {
        let net = &m.as_ref().ok_or_else(|| null("model"))?.0;
        let x = matrix(input, rows, input_dim, "input")?;
        let (out, lat) = net.infer(x)?;
        for (buf, len, src, what) in [(output, output_len, &out, "output"), (latent, latent_len, &lat, "latent")] {
            if buf.is_null() {
                continue;
            }
            if len != src.len() {
                return Err(Fail(PodStatus::Shape, format!("{what} buffer holds {len} values, need {}", src.len())));
            }
            for (d, s) in slice_mut(buf, len, what)?.iter_mut().zip(src.iter()) {
                *d = *s;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `m` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pod_model_free(m: *mut PodModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
