//! Per-chamber shape features.
//!
//! For each blood-pool chamber (LV, RV, LA, RA, in that fixed order) the
//! feature vector carries volume in millilitres and the major/minor principal
//! axis lengths in millimetres — twelve numbers per map.
//!
//! Axis lengths come from the eigenvalues λ of the covariance of member-voxel
//! coordinates: for a uniform solid ellipsoid with semi-axis `a`, the second
//! moment along that axis is `a²/5`, so the full axis length is recovered as
//! `2·√(5λ)`. A single voxel (or an absent chamber) has zero-length axes.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::grid::LabelMap;
use crate::tissue::{TissueId, CHAMBERS};

/// Full-axis length per unit √eigenvalue for a uniform solid ellipsoid.
const AXIS_FACTOR: f64 = 4.472135954999579; // 2·√5

/// Names of the twelve features, in vector order (CSV headers).
pub const FEATURE_NAMES: [&str; 12] = [
    "lv_volume_ml",
    "lv_major_mm",
    "lv_minor_mm",
    "rv_volume_ml",
    "rv_major_mm",
    "rv_minor_mm",
    "la_volume_ml",
    "la_major_mm",
    "la_minor_mm",
    "ra_volume_ml",
    "ra_major_mm",
    "ra_minor_mm",
];

/// The 12-dimensional morphology vector of one label map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorphVector(pub [f64; 12]);

impl MorphVector {
    pub const DIM: usize = 12;

    pub fn as_slice(&self) -> &[f64; 12] {
        &self.0
    }

    fn chamber_base(chamber: TissueId) -> usize {
        3 * CHAMBERS
            .iter()
            .position(|&c| c == chamber)
            .expect("chamber must be one of LV/RV/LA/RA")
    }

    pub fn volume_ml(&self, chamber: TissueId) -> f64 {
        self.0[Self::chamber_base(chamber)]
    }

    pub fn major_mm(&self, chamber: TissueId) -> f64 {
        self.0[Self::chamber_base(chamber) + 1]
    }

    pub fn minor_mm(&self, chamber: TissueId) -> f64 {
        self.0[Self::chamber_base(chamber) + 2]
    }
}

/// Volume and axis lengths of one tissue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeStats {
    pub volume_ml: f64,
    pub major_mm: f64,
    pub minor_mm: f64,
}

/// Shape statistics of a single tissue. Absent tissue reports all zeros.
pub fn shape_stats(map: &LabelMap, tissue: TissueId) -> ShapeStats {
    let (nx, ny, nz) = map.dims();
    let h = map.voxel_size();
    let target = tissue.as_byte();
    let bytes = map.bytes();

    // First pass: count and mean of voxel-center coordinates (voxel units).
    let mut n = 0usize;
    let mut sum = [0.0f64; 3];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if bytes[x + nx * (y + ny * z)] == target {
                    n += 1;
                    sum[0] += x as f64;
                    sum[1] += y as f64;
                    sum[2] += z as f64;
                }
            }
        }
    }
    if n == 0 {
        return ShapeStats { volume_ml: 0.0, major_mm: 0.0, minor_mm: 0.0 };
    }
    let mean = [sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64];

    // Second pass: central second moments (population covariance, 1/n).
    let mut m = [[0.0f64; 3]; 3];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if bytes[x + nx * (y + ny * z)] == target {
                    let d = [x as f64 - mean[0], y as f64 - mean[1], z as f64 - mean[2]];
                    for i in 0..3 {
                        for j in 0..3 {
                            m[i][j] += d[i] * d[j];
                        }
                    }
                }
            }
        }
    }
    let scale = h * h / n as f64; // voxel units → mm²
    let cov = Matrix3::from_fn(|i, j| m[i][j] * scale);
    let eig = SymmetricEigen::new(cov);
    let mut lambda: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    lambda.sort_by(|a, b| b.partial_cmp(a).unwrap());

    ShapeStats {
        volume_ml: n as f64 * map.voxel_volume_ml(),
        major_mm: AXIS_FACTOR * lambda[0].sqrt(),
        minor_mm: AXIS_FACTOR * lambda[2].sqrt(),
    }
}

/// The full 12-feature morphology vector (LV, RV, LA, RA ×
/// volume/major/minor).
pub fn morph_features(map: &LabelMap) -> MorphVector {
    let mut out = [0.0; 12];
    for (i, chamber) in CHAMBERS.into_iter().enumerate() {
        let s = shape_stats(map, chamber);
        out[3 * i] = s.volume_ml;
        out[3 * i + 1] = s.major_mm;
        out[3 * i + 2] = s.minor_mm;
    }
    MorphVector(out)
}

/// Morphology vectors for every member of a cohort slice.
pub fn cohort_features(maps: &[LabelMap]) -> Vec<MorphVector> {
    maps.iter().map(morph_features).collect()
}

/// Paint a solid axis-aligned ellipsoid of `tissue` into `map` (voxel-center
/// inclusion test; center and semi-axes in voxel units). Used by tests and
/// the sensitivity pipeline's synthetic shapes.
pub fn paint_ellipsoid(
    map: &mut LabelMap,
    center: [f64; 3],
    semi_axes: [f64; 3],
    tissue: TissueId,
) {
    let (nx, ny, nz) = map.dims();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let dx = (x as f64 + 0.5 - center[0]) / semi_axes[0];
                let dy = (y as f64 + 0.5 - center[1]) / semi_axes[1];
                let dz = (z as f64 + 0.5 - center[2]) / semi_axes[2];
                if dx * dx + dy * dy + dz * dz <= 1.0 {
                    map.set(x, y, z, tissue);
                }
            }
        }
    }
}
