//! Predefined evenly distributed class centroids.
//!
//! A [`CentroidSet`] holds `k` fixed unit vectors in `n` dimensions. In
//! simplex mode (`k <= n + 1`) every pair has inner product `-1/(k-1)`, the
//! vertices of a regular simplex centred at the origin. Circle mode places
//! `k` points evenly on the unit circle and exists for 2-D visualisation.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::seed;

pub const SIMPLEX_DOT_TOL: f64 = 1e-9;
pub const NORM_TOL: f64 = 1e-12;
pub const CIRCLE_GAP_TOL: f64 = 1e-12;

const MAGIC: &[u8; 4] = b"PEDC";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidMode {
    Simplex,
    Circle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    points: Array2<f64>,
    seed: u64,
    mode: CentroidMode,
}

impl CentroidSet {
    /// Wraps an arbitrary `k × n` matrix without checking it. Use
    /// [`verify_centroids`] to test the geometric invariants.
    pub fn from_points(points: Array2<f64>, seed: u64, mode: CentroidMode) -> Self {
        Self { points, seed, mode }
    }

    pub fn k(&self) -> usize {
        self.points.nrows()
    }

    pub fn n(&self) -> usize {
        self.points.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> CentroidMode {
        self.mode
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn centroid(&self, class: usize) -> ArrayView1<'_, f64> {
        self.points.row(class)
    }

    /// Dimension of the span of the centroids.
    pub fn expected_rank(&self) -> usize {
        (self.k() - 1).min(self.n())
    }

    pub fn gram(&self) -> Array2<f64> {
        self.points.dot(&self.points.t())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    /// Apply the seeded random rotation. Disable only for debugging: the
    /// unrotated simplex lives in the first `k-1` coordinates.
    pub rotate: bool,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { rotate: true }
    }
}

pub fn generate_simplex_centroids(k: usize, n: usize, seed: u64) -> Result<CentroidSet> {
    generate_simplex_centroids_with(k, n, seed, SimplexOptions::default())
}

/// Builds the regular simplex analytically.
///
/// Vertex `i` of the centred simplex is `sqrt(k/(k-1)) (e_i - 1/k)`. Its
/// coordinates in the Helmert basis of the hyperplane orthogonal to the
/// all-ones vector are `sqrt(k/(k-1)) h_j[i]`, giving `k-1` coordinates per
/// vertex. These are then mapped into `n` dimensions through the first `k-1`
/// columns of a seeded orthogonal matrix (thin QR of a Gaussian matrix).
pub fn generate_simplex_centroids_with(
    k: usize,
    n: usize,
    seed: u64,
    opts: SimplexOptions,
) -> Result<CentroidSet> {
    if k < 2 {
        return Err(Error::Argument(format!("class count k = {k} must be >= 2")));
    }
    if n == 0 || k > n + 1 {
        return Err(Error::Dimension { k, n });
    }
    let m = k - 1;
    let scale = (k as f64 / m as f64).sqrt();

    // Helmert coordinates: column j (0-based) is (1,..,1, -(j+1), 0,..)/sqrt((j+1)(j+2)).
    let mut coords = Array2::<f64>::zeros((k, m));
    for j in 0..m {
        let jj = (j + 1) as f64;
        let norm = (jj * (jj + 1.0)).sqrt();
        for i in 0..=j {
            coords[[i, j]] = scale / norm;
        }
        coords[[j + 1, j]] = -scale * jj / norm;
    }

    let frame = if opts.rotate {
        let mut rng = seed::rng_for(seed, seed::STREAM_CENTROIDS);
        let gauss = Array2::from_shape_simple_fn((n, m), || StandardNormal.sample(&mut rng));
        linalg::thin_qr_q(gauss.view())
    } else {
        let mut eye = Array2::<f64>::zeros((n, m));
        for j in 0..m {
            eye[[j, j]] = 1.0;
        }
        eye
    };

    let mut points = coords.dot(&frame.t());
    // Renormalise so unit norm holds to the last ulp rather than to the
    // accumulated rounding of the construction.
    for mut row in points.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    Ok(CentroidSet {
        points,
        seed,
        mode: CentroidMode::Simplex,
    })
}

/// `k` unit vectors at angles `phase + 2 pi i / k` in the plane.
pub fn generate_circle_centroids(k: usize, phase: f64) -> Result<CentroidSet> {
    if k < 2 {
        return Err(Error::Argument(format!("class count k = {k} must be >= 2")));
    }
    let mut points = Array2::<f64>::zeros((k, 2));
    for i in 0..k {
        let angle = phase + 2.0 * PI * i as f64 / k as f64;
        points[[i, 0]] = angle.cos();
        points[[i, 1]] = angle.sin();
    }
    Ok(CentroidSet {
        points,
        seed: 0,
        mode: CentroidMode::Circle,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CentroidReport {
    pub k: usize,
    pub n: usize,
    pub max_norm_deviation: f64,
    /// Simplex mode: max |<a_i, a_j> + 1/(k-1)| over pairs.
    /// Circle mode: max |gap - 2 pi / k| over consecutive angular gaps.
    pub max_geometry_deviation: f64,
    pub passed: bool,
}

pub fn verify_centroids(cs: &CentroidSet) -> CentroidReport {
    let k = cs.k();
    let max_norm_deviation = cs
        .points
        .rows()
        .into_iter()
        .map(|r| (r.dot(&r).sqrt() - 1.0).abs())
        .fold(0.0, f64::max);

    let (max_geometry_deviation, tol) = match cs.mode {
        CentroidMode::Simplex => {
            let target = -1.0 / (k as f64 - 1.0);
            let gram = cs.gram();
            let mut worst = 0.0f64;
            for i in 0..k {
                for j in (i + 1)..k {
                    worst = worst.max((gram[[i, j]] - target).abs());
                }
            }
            (worst, SIMPLEX_DOT_TOL)
        }
        CentroidMode::Circle => {
            let target = 2.0 * PI / k as f64;
            let angles: Vec<f64> = cs
                .points
                .rows()
                .into_iter()
                .map(|r| r[1].atan2(r[0]))
                .collect();
            let mut worst = 0.0f64;
            for i in 0..k {
                let next = angles[(i + 1) % k];
                let gap = (next - angles[i]).rem_euclid(2.0 * PI);
                worst = worst.max((gap - target).abs());
            }
            (worst, CIRCLE_GAP_TOL)
        }
    };

    CentroidReport {
        k,
        n: cs.n(),
        max_norm_deviation,
        max_geometry_deviation,
        passed: max_norm_deviation <= NORM_TOL && max_geometry_deviation <= tol,
    }
}

/// Orthonormal basis of the centroid span plus the matching orthogonal
/// projector in the full latent space.
#[derive(Debug, Clone)]
pub struct SubspaceProjector {
    basis: Array2<f64>,
    projector: Array2<f64>,
}

impl SubspaceProjector {
    /// `rank × n`, orthonormal rows.
    pub fn basis(&self) -> ArrayView2<'_, f64> {
        self.basis.view()
    }

    /// `n × n`, symmetric and idempotent.
    pub fn projector(&self) -> ArrayView2<'_, f64> {
        self.projector.view()
    }

    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }

    /// Norm of the projection of `x` onto the span.
    pub fn projected_norm(&self, x: ArrayView1<f64>) -> f64 {
        let coords = self.basis.dot(&x);
        coords.dot(&coords).sqrt()
    }
}

pub fn subspace_projector(cs: &CentroidSet) -> Result<SubspaceProjector> {
    let basis = linalg::row_span_basis(cs.points(), 1e-8);
    let expected = cs.expected_rank();
    if basis.nrows() != expected {
        return Err(Error::NumericalRank {
            expected,
            found: basis.nrows(),
        });
    }
    let mut projector = basis.t().dot(&basis);
    // Symmetrise against rounding in the product.
    let n = projector.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (projector[[i, j]] + projector[[j, i]]);
            projector[[i, j]] = avg;
            projector[[j, i]] = avg;
        }
    }
    Ok(SubspaceProjector { basis, projector })
}

/// Binary layout: `"PEDC"`, version `u32`, `k u32`, `n u32`, seed `u64`, then
/// `k*n` little-endian `f64` in row-major order.
pub fn write_centroids(cs: &CentroidSet, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(cs.k() as u32).to_le_bytes())?;
    out.write_all(&(cs.n() as u32).to_le_bytes())?;
    out.write_all(&cs.seed.to_le_bytes())?;
    for v in cs.points.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_centroids(cs: &CentroidSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_centroids(cs, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_centroids(path: &Path) -> Result<CentroidSet> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_centroids(&bytes, path)
}

/// The file does not record the generation mode. A 2-D set that fails the
/// simplex Gram property is taken to be a circle set.
pub fn parse_centroids(bytes: &[u8], path: &Path) -> Result<CentroidSet> {
    const HEADER: usize = 24;
    if bytes.len() < HEADER {
        return Err(Error::format(path, bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected \"PEDC\""));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let k = u32_at(8) as usize;
    let n = u32_at(12) as usize;
    let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = HEADER + k * n * 8;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected) as u64,
            format!("payload length {} does not match k*n = {}", bytes.len() - HEADER, k * n),
        ));
    }
    let data: Vec<f64> = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let points = Array2::from_shape_vec((k, n), data).map_err(|e| Error::Shape(e.to_string()))?;
    let mut cs = CentroidSet::from_points(points, seed, CentroidMode::Simplex);
    if n == 2 && !verify_centroids(&cs).passed {
        cs.mode = CentroidMode::Circle;
    }
    Ok(cs)
}

/// One row per line, space separated, 17 significant digits.
pub fn write_centroids_text(cs: &CentroidSet, mut out: impl Write) -> std::io::Result<()> {
    for row in cs.points.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Rotation-free copy of the first `k-1` coordinates; handy for debugging.
pub fn leading_coordinates(cs: &CentroidSet) -> Array2<f64> {
    let m = cs.expected_rank();
    cs.points.slice(s![.., ..m]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn max_pair_dev(cs: &CentroidSet) -> f64 {
        // Direct dot-product loop, independent of `gram`.
        let k = cs.k();
        let target = -1.0 / (k as f64 - 1.0);
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let mut dot = 0.0;
                for d in 0..cs.n() {
                    dot += cs.points[[i, d]] * cs.points[[j, d]];
                }
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    #[test]
    fn two_classes_in_one_dimension_are_antipodal() {
        let cs = generate_simplex_centroids(2, 1, 99).unwrap();
        let a = cs.points[[0, 0]];
        let b = cs.points[[1, 0]];
        assert!((a.abs() - 1.0).abs() < 1e-15);
        assert!((a * b + 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_classes_in_plane() {
        let cs = generate_simplex_centroids(3, 2, 1).unwrap();
        assert!(max_pair_dev(&cs) < 1e-12);
        let g = cs.gram();
        assert!((g[[0, 1]] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn ten_classes_in_256_dimensions() {
        let cs = generate_simplex_centroids(10, 256, 7).unwrap();
        assert_eq!(cs.points().dim(), (10, 256));
        assert!(max_pair_dev(&cs) < 1e-9);
        let report = verify_centroids(&cs);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(
            generate_simplex_centroids(10, 4, 0),
            Err(Error::Dimension { k: 10, n: 4 })
        ));
        assert!(matches!(generate_simplex_centroids(1, 4, 0), Err(Error::Argument(_))));
        assert!(matches!(generate_circle_centroids(1, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn deterministic_per_seed_and_rotation_only_across_seeds() {
        let a = generate_simplex_centroids(6, 12, 3).unwrap();
        let b = generate_simplex_centroids(6, 12, 3).unwrap();
        assert_eq!(a.points(), b.points());
        let c = generate_simplex_centroids(6, 12, 4).unwrap();
        assert_ne!(a.points(), c.points());
        let ga = a.gram();
        let gc = c.gram();
        for (x, y) in ga.iter().zip(gc.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_sum_to_zero() {
        let cs = generate_simplex_centroids(10, 40, 11).unwrap();
        let sum = cs.points().sum_axis(ndarray::Axis(0));
        assert!(sum.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn unrotated_simplex_uses_leading_coordinates() {
        let cs = generate_simplex_centroids_with(4, 8, 0, SimplexOptions { rotate: false }).unwrap();
        assert!(cs.points().slice(s![.., 3..]).iter().all(|v| *v == 0.0));
        assert!(verify_centroids(&cs).passed);
        assert_eq!(leading_coordinates(&cs).dim(), (4, 3));
    }

    #[test]
    fn circle_quarter_turns() {
        let cs = generate_circle_centroids(4, 0.0).unwrap();
        let want = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for (row, w) in cs.points().rows().into_iter().zip(want) {
            assert!((row[0] - w[0]).abs() < 1e-15 && (row[1] - w[1]).abs() < 1e-15);
        }
        let two = generate_circle_centroids(2, 0.0).unwrap();
        assert!((two.gram()[[0, 1]] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn circle_five_adjacent_dots() {
        let cs = generate_circle_centroids(5, 0.0).unwrap();
        let want = (72.0f64).to_radians().cos();
        assert!((want - 0.309_017).abs() < 1e-6);
        let g = cs.gram();
        for i in 0..5 {
            assert!((g[[i, (i + 1) % 5]] - want).abs() < 1e-12);
        }
        let report = verify_centroids(&cs);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn verify_reports_scaled_row() {
        let cs = generate_simplex_centroids(5, 8, 2).unwrap();
        let mut pts = cs.points().to_owned();
        pts.row_mut(2).mapv_inplace(|v| v * 2.0);
        let report = verify_centroids(&CentroidSet::from_points(pts, 2, CentroidMode::Simplex));
        assert!((report.max_norm_deviation - 1.0).abs() < 1e-12);
        assert!(!report.passed);
    }

    #[test]
    fn verify_reports_perturbation_magnitude() {
        let cs = generate_simplex_centroids(10, 32, 5).unwrap();
        let mut rng = seed::rng_for(1, 9);
        let mut pts = cs.points().to_owned();
        pts.mapv_inplace(|v| v + rng.random_range(-1e-6..1e-6));
        let perturbed = CentroidSet::from_points(pts.clone(), 5, CentroidMode::Simplex);
        let report = verify_centroids(&perturbed);

        let mut norm_dev = 0.0f64;
        for r in pts.rows() {
            norm_dev = norm_dev.max((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs());
        }
        assert!((report.max_norm_deviation - norm_dev).abs() < 1e-15);
        assert!((max_pair_dev(&perturbed) - report.max_geometry_deviation).abs() < 1e-15);
        for d in [report.max_norm_deviation, report.max_geometry_deviation] {
            assert!((1e-7..=1e-5).contains(&d), "deviation {d}");
        }
        assert!(!report.passed);
    }

    #[test]
    fn projector_of_antipodal_pair() {
        let cs = generate_circle_centroids(2, 0.0).unwrap();
        let proj = subspace_projector(&cs).unwrap();
        let p = proj.projector();
        assert!((p[[0, 0]] - 1.0).abs() < 1e-15);
        assert!(p[[0, 1]].abs() < 1e-15 && p[[1, 1]].abs() < 1e-15);
    }

    #[test]
    fn projector_fixes_centroids_and_is_idempotent() {
        for (k, n) in [(3, 5), (10, 64), (4, 3)] {
            let cs = generate_simplex_centroids(k, n, 17).unwrap();
            let proj = subspace_projector(&cs).unwrap();
            assert_eq!(proj.rank(), k - 1);
            let p = proj.projector();
            for row in cs.points().rows() {
                let pr = p.dot(&row);
                for (a, b) in pr.iter().zip(row.iter()) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
            let p2 = p.dot(&p);
            for (a, b) in p2.iter().zip(p.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
            let trace: f64 = p.diag().sum();
            assert!((trace - (k - 1) as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn projector_rank_error() {
        let pts = ndarray::array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let cs = CentroidSet::from_points(pts, 0, CentroidMode::Simplex);
        assert!(matches!(
            subspace_projector(&cs),
            Err(Error::NumericalRank { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn binary_round_trip_and_bad_magic() {
        let cs = generate_simplex_centroids(4, 6, 123).unwrap();
        let mut buf = Vec::new();
        write_centroids(&cs, &mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 4 * 6 * 8);
        assert_eq!(&buf[..4], b"PEDC");
        let back = parse_centroids(&buf, Path::new("mem")).unwrap();
        assert_eq!(back, cs);

        let circle = generate_circle_centroids(5, 0.3).unwrap();
        let mut buf2 = Vec::new();
        write_centroids(&circle, &mut buf2).unwrap();
        assert_eq!(parse_centroids(&buf2, Path::new("mem")).unwrap().mode(), CentroidMode::Circle);

        buf[0] = b'X';
        let err = parse_centroids(&buf, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        assert!(parse_centroids(&buf2[..30], Path::new("mem")).is_err());
    }

    #[test]
    fn text_export_has_seventeen_digits() {
        let cs = generate_circle_centroids(3, 0.1).unwrap();
        let mut buf = Vec::new();
        write_centroids_text(&cs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let first: Vec<f64> = lines[0].split(' ').map(|t| t.parse().unwrap()).collect();
        assert_eq!(first[0], cs.points()[[0, 0]]);
        assert_eq!(first[1], cs.points()[[0, 1]]);
    }
}
