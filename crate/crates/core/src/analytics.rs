//! Cohort-level metrics: improved precision/recall on normalized feature
//! clouds, Fréchet distance between fitted Gaussians, and spatial occupancy
//! heatmaps with masked difference views.
//!
//! Feature clouds are dimension-generic (any consistent row width), so the
//! same estimators serve 12-feature anatomy vectors and the low-dimensional
//! planted configurations used as oracles in tests.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::grid::LabelMap;
use crate::morphometry::MorphVector;
use crate::tissue::TISSUE_COUNT;

// ── feature clouds ──────────────────────────────────────────────────────

/// Diagonal ridge added to fitted covariances before the Fréchet matrix
/// square roots; closed-form oracles must include it too.
pub const FRECHET_RIDGE: f64 = 1e-6;

/// A set of feature rows in a common normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCloud {
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl FeatureCloud {
    /// Adopt raw rows. Rows must be nonempty and share one width.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::EmptyCohort);
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::ShapeMismatch("feature rows must have width > 0".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch(format!(
                "feature rows disagree on width: {} vs {}",
                dim,
                bad.len()
            )));
        }
        Ok(FeatureCloud { rows, dim })
    }

    /// Normalize anatomy features by the per-dimension mean and standard
    /// deviation of `reference` (and only of `reference` — the same constants
    /// must be reused for every cloud that will be compared). Dimensions that
    /// are constant in the reference (or a reference of one member) keep
    /// their raw deviations: the divisor falls back to 1.
    pub fn from_features(features: &[MorphVector], reference: &[MorphVector]) -> Result<Self> {
        if features.is_empty() || reference.is_empty() {
            return Err(Error::EmptyCohort);
        }
        let d = MorphVector::DIM;
        let n = reference.len() as f64;
        let mut mean = vec![0.0; d];
        for f in reference {
            for (m, &v) in mean.iter_mut().zip(f.as_slice()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; d];
        if reference.len() > 1 {
            for f in reference {
                for ((s, &m), &v) in std.iter_mut().zip(&mean).zip(f.as_slice()) {
                    *s += (v - m) * (v - m);
                }
            }
            for s in &mut std {
                *s = (*s / (n - 1.0)).sqrt();
            }
        }
        for s in &mut std {
            if *s <= 0.0 {
                *s = 1.0;
            }
        }
        let rows = features
            .iter()
            .map(|f| {
                f.as_slice()
                    .iter()
                    .zip(&mean)
                    .zip(&std)
                    .map(|((&v, &m), &s)| (v - m) / s)
                    .collect()
            })
            .collect();
        Ok(FeatureCloud { rows, dim: d })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn ensure_same_dim(&self, other: &FeatureCloud) -> Result<()> {
        if self.dim == other.dim {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "feature clouds of width {} vs {}",
                self.dim, other.dim
            )))
        }
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

// ── improved precision / recall ─────────────────────────────────────────

/// Squared k-th-nearest-neighbor radius of every member within its own
/// cloud, self excluded.
fn knn_radii_sq(cloud: &FeatureCloud, k: usize) -> Vec<f64> {
    let n = cloud.len();
    let mut radii = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n - 1);
    for (i, row) in cloud.rows.iter().enumerate() {
        dists.clear();
        for (j, other) in cloud.rows.iter().enumerate() {
            if i != j {
                dists.push(dist_sq(row, other));
            }
        }
        let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
        radii.push(*kth);
    }
    radii
}

/// Fraction of `points` lying inside the union of balls centered on
/// `manifold`'s members with their k-NN radii.
fn covered_fraction(points: &FeatureCloud, manifold: &FeatureCloud, radii_sq: &[f64]) -> f64 {
    let hits = points
        .rows
        .iter()
        .filter(|p| {
            manifold
                .rows
                .iter()
                .zip(radii_sq)
                .any(|(m, &r)| dist_sq(p, m) <= r)
        })
        .count();
    hits as f64 / points.len() as f64
}

/// Improved precision and recall between a reference (`real`) and a
/// generated (`synth`) cloud. A point is covered by a cloud when it lies
/// within some member's k-th-nearest-neighbor radius (neighbors taken inside
/// that cloud, self excluded). Precision is the covered fraction of `synth`
/// under the real manifold; recall the covered fraction of `real` under the
/// synthetic manifold.
pub fn precision_recall(
    real: &FeatureCloud,
    synth: &FeatureCloud,
    k: usize,
) -> Result<(f64, f64)> {
    real.ensure_same_dim(synth)?;
    if k == 0 {
        return Err(Error::Config("precision/recall needs k >= 1".into()));
    }
    if real.len() <= k {
        return Err(Error::CloudTooSmall { k, n: real.len() });
    }
    if synth.len() <= k {
        return Err(Error::CloudTooSmall { k, n: synth.len() });
    }
    let real_radii = knn_radii_sq(real, k);
    let synth_radii = knn_radii_sq(synth, k);
    let precision = covered_fraction(synth, real, &real_radii);
    let recall = covered_fraction(real, synth, &synth_radii);
    Ok((precision, recall))
}

/// Default neighbor count for improved precision/recall.
pub const DEFAULT_PR_K: usize = 3;

// ── Fréchet distance ────────────────────────────────────────────────────

struct GaussianFit {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
}

/// Mean and ridge-regularized sample covariance (n−1 normalization).
fn fit_gaussian(cloud: &FeatureCloud) -> GaussianFit {
    let n = cloud.len();
    let d = cloud.dim();
    let mut mean = vec![0.0; d];
    for row in &cloud.rows {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for row in &cloud.rows {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += FRECHET_RIDGE;
    }
    GaussianFit { mean, cov }
}

/// Symmetric PSD square root via eigen-decomposition; eigenvalues that round
/// slightly negative are clamped to zero.
fn sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("covariance eigen-decomposition failed".into()));
    }
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&sqrt_vals) * q.transpose())
}

/// Squared Fréchet distance between the Gaussians fitted to two clouds:
/// `‖μ_a−μ_b‖² + Tr(Σ_a + Σ_b − 2·(Σ_a^½ Σ_b Σ_a^½)^½)`. Both covariances
/// carry the [`FRECHET_RIDGE`] on their diagonals.
pub fn frechet_distance(a: &FeatureCloud, b: &FeatureCloud) -> Result<f64> {
    a.ensure_same_dim(b)?;
    let need = a.dim() + 1;
    for cloud in [a, b] {
        if cloud.len() < need {
            return Err(Error::TooFewMembers { need, got: cloud.len() });
        }
    }
    let fa = fit_gaussian(a);
    let fb = fit_gaussian(b);
    let mean_term = dist_sq(&fa.mean, &fb.mean);
    let sa = sqrt_spd(&fa.cov)?;
    let inner = &sa * &fb.cov * &sa;
    let cross = sqrt_spd(&inner)?;
    let trace_term = fa.cov.trace() + fb.cov.trace() - 2.0 * cross.trace();
    // Exactly zero for identical clouds up to rounding, which can land a
    // hair below zero; clamp so a distance is never negative.
    Ok((mean_term + trace_term).max(0.0))
}

// ── occupancy heatmaps ──────────────────────────────────────────────────

/// Per-channel mean occupancy over a cohort: channel `c` at a voxel holds
/// the fraction of members labeling that voxel `c`. Layout matches latents
/// (x fastest, channel slowest).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    dims: (usize, usize, usize),
    voxel_size: f64,
    members: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    /// Cohort size the mean was taken over.
    pub fn members(&self) -> usize {
        self.members
    }

    pub fn channels(&self) -> usize {
        TISSUE_COUNT
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        let (nx, ny, nz) = self.dims;
        debug_assert!(c < TISSUE_COUNT && x < nx && y < ny && z < nz);
        x + nx * (y + ny * (z + nz * c))
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(c, x, y, z)]
    }

    /// Foreground occupancy `1 − P_background`.
    pub fn foreground(&self, x: usize, y: usize, z: usize) -> f64 {
        1.0 - self.get(0, x, y, z)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spatial_len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    /// Build from raw values (file IO path). Length must be
    /// `TISSUE_COUNT · nx·ny·nz`.
    pub fn from_values(
        dims: (usize, usize, usize),
        voxel_size: f64,
        members: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let want = TISSUE_COUNT * dims.0 * dims.1 * dims.2;
        if values.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "heatmap buffer has {} values, dims {:?} need {}",
                values.len(),
                dims,
                want
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Heatmap { dims, voxel_size, members, values })
    }
}

/// Voxel-wise mean of the members' one-hot views.
pub fn occupancy_heatmap(cohort: &Cohort) -> Result<Heatmap> {
    let Some(first) = cohort.get(0) else {
        return Err(Error::EmptyCohort);
    };
    let dims = first.dims();
    let spatial = first.len();
    let n = cohort.len();
    let mut counts = vec![0u32; TISSUE_COUNT * spatial];
    for map in cohort.iter() {
        for (i, &b) in map.bytes().iter().enumerate() {
            counts[i + spatial * b as usize] += 1;
        }
    }
    let inv = 1.0 / n as f64;
    let values = counts.iter().map(|&c| c as f64 * inv).collect();
    Ok(Heatmap { dims, voxel_size: first.voxel_size(), members: n, values })
}

/// Convenience: heatmap over a plain slice of maps (all must share dims).
pub fn occupancy_heatmap_of(maps: &[LabelMap]) -> Result<Heatmap> {
    let mut cohort = Cohort::new();
    for (i, m) in maps.iter().enumerate() {
        cohort.push(m.clone(), crate::cohort::Provenance::new("adhoc", 0, i as u64))?;
    }
    occupancy_heatmap(&cohort)
}

/// Signed foreground-occupancy difference with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapDiff {
    dims: (usize, usize, usize),
    voxel_size: f64,
    values: Vec<f64>,
    masked: Vec<bool>,
}

impl HeatmapDiff {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    /// Signed difference `fg_a − fg_b` (meaningless where [`Self::is_masked`]).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// True where either side has zero foreground occupancy.
    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    pub fn is_masked(&self, x: usize, y: usize, z: usize) -> bool {
        self.masked[self.index(x, y, z)]
    }
}

/// Foreground-occupancy difference `(1−P_bg,a) − (1−P_bg,b)`, masked
/// wherever either side's foreground occupancy is exactly zero (no member of
/// that cohort ever labels the voxel).
pub fn heatmap_diff(a: &Heatmap, b: &Heatmap) -> Result<HeatmapDiff> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch(format!(
            "heatmaps {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    let (nx, ny, nz) = a.dims;
    let spatial = a.spatial_len();
    let mut values = vec![0.0; spatial];
    let mut masked = vec![false; spatial];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let fa = a.foreground(x, y, z);
                let fb = b.foreground(x, y, z);
                values[i] = fa - fb;
                masked[i] = fa == 0.0 || fb == 0.0;
            }
        }
    }
    Ok(HeatmapDiff { dims: a.dims, voxel_size: a.voxel_size, values, masked })
}
