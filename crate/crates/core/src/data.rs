//! Dataset readers (MNIST IDX, CIFAR-10 binary), augmentation, and synthetic
//! Gaussian blobs.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::Shape;
use crate::pedcc::generate_simplex_centroids;
use crate::seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;

/// Distance of blob means from the origin.
pub const BLOB_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Per-channel standardisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel mean and population standard deviation over all samples
    /// and pixels. Constant channels get `std = 1`.
    pub fn fit(images: ArrayView2<f64>, shape: Shape) -> Self {
        let plane = shape.h * shape.w;
        let mut mean = vec![0.0; shape.c];
        let mut std = vec![1.0; shape.c];
        let count = (images.nrows() * plane) as f64;
        if count == 0.0 {
            return Self::identity(shape.c);
        }
        for c in 0..shape.c {
            let (lo, hi) = (c * plane, (c + 1) * plane);
            let mut sum = 0.0;
            for row in images.rows() {
                sum += row.slice(ndarray::s![lo..hi]).sum();
            }
            let m = sum / count;
            let mut sq = 0.0;
            for row in images.rows() {
                sq += row.slice(ndarray::s![lo..hi]).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            let s = (sq / count).sqrt();
            mean[c] = m;
            std[c] = if s > 0.0 { s } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, images: &mut Array2<f64>, shape: Shape) {
        let plane = shape.h * shape.w;
        for mut row in images.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                let c = i / plane;
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Samples stored one per row, channel-major. Image pixels are in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub shape: Shape,
    pub num_classes: usize,
    pub split: Split,
    /// Statistics used to standardise inputs. Always taken from the training
    /// split; see [`Dataset::with_normalization`].
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<usize>, shape: Shape, num_classes: usize, split: Split) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.nrows(), labels.len())));
        }
        if images.ncols() != shape.len() {
            return Err(Error::Shape(format!("rows have {} values, shape {shape} needs {}", images.ncols(), shape.len())));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, l)| **l >= num_classes) {
            return Err(Error::Label { row, label, classes: num_classes });
        }
        let normalization = Normalization::identity(shape.c);
        Ok(Self {
            images,
            labels,
            shape,
            num_classes,
            split,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fits normalisation statistics on this (training) split.
    pub fn fit_normalization(&mut self) {
        self.normalization = Normalization::fit(self.images.view(), self.shape);
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Self {
        self.normalization = norm;
        self
    }

    /// Standardised copy of the given rows.
    pub fn normalized_rows(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = self.images.select(Axis(0), indices);
        self.normalization.apply(&mut out, self.shape);
        out
    }

    /// Standardised copy of the whole set.
    pub fn normalized(&self) -> Array2<f64> {
        let mut out = self.images.clone();
        self.normalization.apply(&mut out, self.shape);
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            num_classes: self.num_classes,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Keeps samples whose label is in `classes` and relabels them to their
    /// position in that list.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let mut idx = Vec::new();
        let mut labels = Vec::new();
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(pos) = classes.iter().position(|c| c == l) {
                idx.push(i);
                labels.push(pos);
            }
        }
        let mut out = self.subset(&idx);
        out.labels = labels;
        out.num_classes = classes.len();
        out
    }

    /// SHA-256 over shape, labels and the little-endian sample values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.shape.c, self.shape.h, self.shape.w, self.num_classes, self.len()] {
            h.update((v as u64).to_le_bytes());
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        for v in self.images.iter() {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, offset as u64, "truncated header"))
}

pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = std::fs::read(images)?;
    let lbl = std::fs::read(labels)?;
    parse_mnist_idx(&img, images, &lbl, labels, split)
}

/// Parses an IDX image file (`u8`, rank 3) and an IDX label file (`u8`, rank 1).
pub fn parse_mnist_idx(img: &[u8], img_path: &Path, lbl: &[u8], lbl_path: &Path, split: Split) -> Result<Dataset> {
    let magic = be_u32(img, 0, img_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(img_path, 0, format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")));
    }
    let count = be_u32(img, 4, img_path)? as usize;
    let rows = be_u32(img, 8, img_path)? as usize;
    let cols = be_u32(img, 12, img_path)? as usize;
    let plane = rows * cols;
    let need = 16 + count * plane;
    if img.len() < need {
        return Err(Error::format(img_path, img.len() as u64, format!("truncated: {count} images need {need} bytes")));
    }
    if img.len() > need {
        return Err(Error::format(img_path, need as u64, "trailing bytes after last image"));
    }

    let magic = be_u32(lbl, 0, lbl_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(lbl_path, 0, format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")));
    }
    let lcount = be_u32(lbl, 4, lbl_path)? as usize;
    if lbl.len() < 8 + lcount {
        return Err(Error::format(lbl_path, lbl.len() as u64, format!("truncated: {lcount} labels need {} bytes", 8 + lcount)));
    }
    if lbl.len() > 8 + lcount {
        return Err(Error::format(lbl_path, (8 + lcount) as u64, "trailing bytes after last label"));
    }
    if lcount != count {
        return Err(Error::format(lbl_path, 4, format!("{lcount} labels but {count} images")));
    }
    let labels: Vec<usize> = lbl[8..].iter().map(|&b| b as usize).collect();
    if let Some((i, &b)) = lbl[8..].iter().enumerate().find(|(_, b)| **b > 9) {
        return Err(Error::format(lbl_path, (8 + i) as u64, format!("label {b} > 9")));
    }
    let pixels: Vec<f64> = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let images = Array2::from_shape_vec((count, plane), pixels).map_err(|e| Error::Shape(e.to_string()))?;
    Dataset::new(images, labels, Shape::image(1, rows, cols), 10, split)
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes IDX image and label files. Pixel values are mapped back with
/// `round(255 v)`, which inverts the reader exactly.
pub fn write_mnist_idx(ds: &Dataset, mut images: impl Write, mut labels: impl Write) -> Result<()> {
    if ds.shape.c != 1 {
        return Err(Error::Shape(format!("IDX images are single-channel, got {}", ds.shape)));
    }
    images.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    for v in [ds.len(), ds.shape.h, ds.shape.w] {
        images.write_all(&(v as u32).to_be_bytes())?;
    }
    let bytes: Vec<u8> = ds.images.iter().map(|&v| to_byte(v)).collect();
    images.write_all(&bytes)?;
    labels.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    labels.write_all(&(ds.len() as u32).to_be_bytes())?;
    let lb: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    labels.write_all(&lb)?;
    Ok(())
}

/// Reads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10_bin(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut parts = Vec::with_capacity(paths.len());
    for p in paths {
        parts.push((std::fs::read(p)?, p.clone()));
    }
    let refs: Vec<(&[u8], &Path)> = parts.iter().map(|(b, p)| (b.as_slice(), p.as_path())).collect();
    parse_cifar10_bin(&refs, split)
}

pub fn parse_cifar10_bin(files: &[(&[u8], &Path)], split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for (bytes, path) in files {
        if bytes.len() % CIFAR_RECORD != 0 {
            let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
            return Err(Error::format(
                *path,
                offset as u64,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(Error::format(*path, (r * CIFAR_RECORD) as u64, format!("label byte {} > 9", rec[0])));
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    let images = Array2::from_shape_vec((n, CIFAR_RECORD - 1), pixels).map_err(|e| Error::Shape(e.to_string()))?;
    Dataset::new(images, labels, Shape::image(3, 32, 32), CIFAR_CLASSES, split)
}

pub fn write_cifar10_bin(ds: &Dataset, mut out: impl Write) -> Result<()> {
    if ds.shape != Shape::image(3, 32, 32) {
        return Err(Error::Shape(format!("CIFAR records are 3x32x32, got {}", ds.shape)));
    }
    let mut rec = Vec::with_capacity(CIFAR_RECORD);
    for (row, &label) in ds.images.rows().into_iter().zip(&ds.labels) {
        rec.clear();
        rec.push(label as u8);
        rec.extend(row.iter().map(|&v| to_byte(v)));
        out.write_all(&rec)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub pad: usize,
    pub flip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { pad: 4, flip_prob: 0.5 }
    }
}

/// Zero-pads by `pad`, crops the original size at `(dy, dx)` in the padded
/// image, then optionally mirrors horizontally.
pub fn crop_and_flip(image: ArrayView1<f64>, shape: Shape, pad: usize, dy: usize, dx: usize, flip: bool) -> Array1<f64> {
    let (h, w) = (shape.h, shape.w);
    let mut out = Array1::<f64>::zeros(shape.len());
    for c in 0..shape.c {
        for y in 0..h {
            // Source row in the unpadded image.
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[c * h * w + y * w + ox] = image[c * h * w + sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// Random pad-crop-flip of one image.
pub fn augment(image: ArrayView1<f64>, shape: Shape, policy: AugmentPolicy, rng: &mut impl Rng) -> Array1<f64> {
    let dy = rng.random_range(0..=2 * policy.pad);
    let dx = rng.random_range(0..=2 * policy.pad);
    let flip = rng.random::<f64>() < policy.flip_prob;
    crop_and_flip(image, shape, policy.pad, dy, dx, flip)
}

/// Augments every row of a batch in place.
pub fn augment_batch(images: &mut Array2<f64>, shape: Shape, policy: AugmentPolicy, rng: &mut impl Rng) {
    for mut row in images.rows_mut() {
        let out = augment(row.view(), shape, policy, rng);
        row.assign(&out);
    }
}

/// Gaussian blobs around the vertices of a regular simplex at distance
/// [`BLOB_RADIUS`] from the origin, with isotropic noise `sigma`. The means
/// depend only on `seed`; the two splits use independent noise streams.
/// Requires `dim >= k - 1`.
pub fn synth_blobs(k: usize, dim: usize, per_class: usize, sigma: f64, seed: u64, split: Split) -> Result<Dataset> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Argument(format!("spread {sigma} must be finite and nonnegative")));
    }
    let means = generate_simplex_centroids(k, dim, seed)?;
    let stream = match split {
        Split::Train => seed::STREAM_DATA,
        Split::Test => seed::STREAM_DATA + 0x1000,
    };
    let mut rng = seed::rng_for(seed, stream);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let total = k * per_class;
    let mut images = Array2::<f64>::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    // Interleave classes so prefixes stay balanced.
    for i in 0..total {
        let class = i % k;
        let mut row = images.row_mut(i);
        for (v, m) in row.iter_mut().zip(means.centroid(class).iter()) {
            *v = BLOB_RADIUS * m + sigma * noise.sample(&mut rng);
        }
        labels.push(class);
    }
    Dataset::new(images, labels, Shape::flat(dim), k, split)
}
