//! Anatomical plausibility checks for cardiac label maps.
//!
//! A map is scored against twelve named checks:
//!
//! * five component counts — Myo, LV, RV, LA, RA must each form exactly one
//!   connected component (26-connectivity by default; the aorta is exempt
//!   because it may legitimately leave the grid),
//! * five required adjacencies — LV↔Ao, LV↔Myo, LV↔LA, RV↔Myo, RV↔RA,
//! * two forbidden adjacencies — LV↔RV and LA↔RA must *not* touch (the
//!   septum/background has to separate them).
//!
//! Adjacency always means the 6-neighborhood: two tissues are adjacent iff
//! some voxel of one has a face-neighbor in the other.

use serde::{Deserialize, Serialize};

use crate::grid::LabelMap;
use crate::tissue::{TissueId, TISSUE_COUNT};

/// Voxel connectivity used for component counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Face, edge and corner neighbors.
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> &'static [(i64, i64, i64)] {
        const SIX: &[(i64, i64, i64)] =
            &[(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
        const TWENTY_SIX: &[(i64, i64, i64)] = &{
            let mut out = [(0i64, 0i64, 0i64); 26];
            let mut i = 0;
            let mut dx = -1i64;
            while dx <= 1 {
                let mut dy = -1i64;
                while dy <= 1 {
                    let mut dz = -1i64;
                    while dz <= 1 {
                        if dx != 0 || dy != 0 || dz != 0 {
                            out[i] = (dx, dy, dz);
                            i += 1;
                        }
                        dz += 1;
                    }
                    dy += 1;
                }
                dx += 1;
            }
            out
        };
        match self {
            Connectivity::Six => SIX,
            Connectivity::TwentySix => TWENTY_SIX,
        }
    }
}

/// The five tissues whose component count is checked, in report order.
pub const COUNTED_TISSUES: [TissueId; 5] =
    [TissueId::Myo, TissueId::Lv, TissueId::Rv, TissueId::La, TissueId::Ra];

/// Required adjacency pairs, in report order.
pub const REQUIRED_ADJACENT: [(TissueId, TissueId); 5] = [
    (TissueId::Lv, TissueId::Ao),
    (TissueId::Lv, TissueId::Myo),
    (TissueId::Lv, TissueId::La),
    (TissueId::Rv, TissueId::Myo),
    (TissueId::Rv, TissueId::Ra),
];

/// Forbidden adjacency pairs, in report order.
pub const FORBIDDEN_ADJACENT: [(TissueId, TissueId); 2] =
    [(TissueId::Lv, TissueId::Rv), (TissueId::La, TissueId::Ra)];

/// Stable names of the twelve checks, in report order. These are the CSV
/// column names emitted by cohort evaluation.
pub const CHECK_NAMES: [&str; 12] = [
    "myo_one_component",
    "lv_one_component",
    "rv_one_component",
    "la_one_component",
    "ra_one_component",
    "lv_ao_adjacent",
    "lv_myo_adjacent",
    "lv_la_adjacent",
    "rv_myo_adjacent",
    "rv_ra_adjacent",
    "lv_rv_separated",
    "la_ra_separated",
];

/// Outcome of the twelve checks on one map, plus component diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyReport {
    /// Connected-component count per [`COUNTED_TISSUES`] entry.
    pub component_counts: [usize; 5],
    /// Voxel count of each component, per counted tissue (diagnostic).
    pub component_sizes: [Vec<usize>; 5],
    /// Whether each required pair is adjacent.
    pub required_adjacent: [bool; 5],
    /// Whether each forbidden pair is adjacent (true = violation).
    pub forbidden_adjacent: [bool; 2],
}

impl TopologyReport {
    /// Pass flags in [`CHECK_NAMES`] order.
    pub fn checks(&self) -> [bool; 12] {
        let mut out = [false; 12];
        for i in 0..5 {
            out[i] = self.component_counts[i] == 1;
        }
        for i in 0..5 {
            out[5 + i] = self.required_adjacent[i];
        }
        for i in 0..2 {
            out[10 + i] = !self.forbidden_adjacent[i];
        }
        out
    }

    /// Number of failed checks (0..=12).
    pub fn violations(&self) -> usize {
        self.checks().iter().filter(|&&ok| !ok).count()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }

    /// Names of the failed checks, for diagnostics.
    pub fn failed_names(&self) -> Vec<&'static str> {
        self.checks()
            .iter()
            .zip(CHECK_NAMES)
            .filter(|(ok, _)| !**ok)
            .map(|(_, name)| name)
            .collect()
    }
}

/// Run all twelve checks with 26-connectivity component counting.
pub fn check_topology(map: &LabelMap) -> TopologyReport {
    check_topology_with(map, Connectivity::TwentySix)
}

/// Run all twelve checks with an explicit component connectivity.
pub fn check_topology_with(map: &LabelMap, connectivity: Connectivity) -> TopologyReport {
    let mut component_counts = [0usize; 5];
    let mut component_sizes: [Vec<usize>; 5] = Default::default();
    for (i, t) in COUNTED_TISSUES.into_iter().enumerate() {
        let sizes = component_voxel_counts(map, t, connectivity);
        component_counts[i] = sizes.len();
        component_sizes[i] = sizes;
    }

    let adj = adjacency_matrix(map);
    let required_adjacent =
        REQUIRED_ADJACENT.map(|(a, b)| adj[a.channel()][b.channel()]);
    let forbidden_adjacent =
        FORBIDDEN_ADJACENT.map(|(a, b)| adj[a.channel()][b.channel()]);

    TopologyReport { component_counts, component_sizes, required_adjacent, forbidden_adjacent }
}

/// Sizes of the connected components of one tissue (any order is the
/// discovery order of a raster scan, so it is deterministic).
pub fn component_voxel_counts(
    map: &LabelMap,
    tissue: TissueId,
    connectivity: Connectivity,
) -> Vec<usize> {
    let (nx, ny, nz) = map.dims();
    let bytes = map.bytes();
    let target = tissue.as_byte();
    let offsets = connectivity.offsets();
    let mut visited = vec![false; bytes.len()];
    let mut sizes = Vec::new();
    let mut stack: Vec<usize> = Vec::new();

    for start in 0..bytes.len() {
        if bytes[start] != target || visited[start] {
            continue;
        }
        // Flood fill one component with an explicit stack.
        visited[start] = true;
        stack.push(start);
        let mut size = 0usize;
        while let Some(i) = stack.pop() {
            size += 1;
            let x = (i % nx) as i64;
            let y = ((i / nx) % ny) as i64;
            let z = (i / (nx * ny)) as i64;
            for &(dx, dy, dz) in offsets {
                let (qx, qy, qz) = (x + dx, y + dy, z + dz);
                if qx < 0 || qy < 0 || qz < 0 {
                    continue;
                }
                let (qx, qy, qz) = (qx as usize, qy as usize, qz as usize);
                if qx >= nx || qy >= ny || qz >= nz {
                    continue;
                }
                let j = qx + nx * (qy + ny * qz);
                if bytes[j] == target && !visited[j] {
                    visited[j] = true;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    sizes
}

/// Symmetric tissue adjacency over the 6-neighborhood: `adj[a][b]` is true iff
/// some voxel labelled `a` has a face neighbor labelled `b` (a ≠ b).
pub fn adjacency_matrix(map: &LabelMap) -> [[bool; TISSUE_COUNT]; TISSUE_COUNT] {
    let (nx, ny, nz) = map.dims();
    let bytes = map.bytes();
    let mut adj = [[false; TISSUE_COUNT]; TISSUE_COUNT];
    // Checking only the +x/+y/+z neighbor of every voxel visits each
    // unordered face pair exactly once.
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let a = bytes[i] as usize;
                if x + 1 < nx {
                    let b = bytes[i + 1] as usize;
                    adj[a][b] = true;
                    adj[b][a] = true;
                }
                if y + 1 < ny {
                    let b = bytes[i + nx] as usize;
                    adj[a][b] = true;
                    adj[b][a] = true;
                }
                if z + 1 < nz {
                    let b = bytes[i + nx * ny] as usize;
                    adj[a][b] = true;
                    adj[b][a] = true;
                }
            }
        }
    }
    for c in 0..TISSUE_COUNT {
        adj[c][c] = false;
    }
    adj
}

// ── cohort aggregation ──────────────────────────────────────────────────

/// Violation tallies across a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationStats {
    pub maps: usize,
    /// Total failed checks over all maps.
    pub failed_checks: usize,
    /// Failure count per check, in [`CHECK_NAMES`] order.
    pub per_check_failures: [usize; 12],
    /// Failed-check count per map, in cohort order.
    pub per_map_failures: Vec<usize>,
}

impl ViolationStats {
    pub fn from_reports(reports: &[TopologyReport]) -> Self {
        let mut per_check_failures = [0usize; 12];
        let mut per_map_failures = Vec::with_capacity(reports.len());
        for r in reports {
            let checks = r.checks();
            for (slot, ok) in per_check_failures.iter_mut().zip(checks) {
                *slot += !ok as usize;
            }
            per_map_failures.push(checks.iter().filter(|&&ok| !ok).count());
        }
        ViolationStats {
            maps: reports.len(),
            failed_checks: per_map_failures.iter().sum(),
            per_check_failures,
            per_map_failures,
        }
    }

    /// Failed checks as a percentage of all checks run (12 per map).
    /// An empty cohort has rate 0 by convention.
    pub fn check_rate_pct(&self) -> f64 {
        if self.maps == 0 {
            return 0.0;
        }
        100.0 * self.failed_checks as f64 / (12 * self.maps) as f64
    }

    /// Percentage of maps with at least one failed check.
    pub fn map_rate_pct(&self) -> f64 {
        if self.maps == 0 {
            return 0.0;
        }
        let bad = self.per_map_failures.iter().filter(|&&n| n > 0).count();
        100.0 * bad as f64 / self.maps as f64
    }
}

/// Convenience: check every member of a slice of maps.
pub fn check_cohort(maps: &[LabelMap]) -> Vec<TopologyReport> {
    maps.iter().map(check_topology).collect()
}
