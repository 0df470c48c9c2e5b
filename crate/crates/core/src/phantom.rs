//! Procedural cardiac phantom.
//!
//! The phantom composes six structures from implicit solids, painted in a
//! fixed priority order (first match wins):
//!
//! 1. **LV** — an axis-aligned ellipsoid.
//! 2. **Ao** — a vertical tube whose bottom dips into the LV dome.
//! 3. **LA** — an ellipsoid whose lower tip penetrates the LV top (through
//!    the myocardial shell, which it carves open like a valve plane).
//! 4. **RA** — an ellipsoid whose lower tip penetrates the RV top.
//! 5. **Myo** — the shell between the LV ellipsoid and a copy grown by
//!    `wall` in every semi-axis; the part of the shell facing the RV is the
//!    septum.
//! 6. **RV** — an ellipsoid to the +x side, clipped against the outer shell
//!    ellipsoid, so the shell always separates it from the LV.
//!
//! Placement is derived from the parameters (sizes anchor the centers), so a
//! parameter set inside the documented envelope rasterizes to a map that
//! passes every topology check *by construction*: overlaps that create the
//! required adjacencies are forced to be at least ~2 voxels deep, and the
//! LA/RA gap at least ~2 voxels wide.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelMap;
use crate::rng::RngStream;
use crate::tissue::TissueId;

// ── parameters ──────────────────────────────────────────────────────────

/// Full parameter set of one phantom, all lengths in millimetres.
///
/// Centers are derived: the LV sits `lv_shift_x` left of and `ventricle_drop`
/// below the grid center (plus `jitter`); the RV is placed so the outer shell
/// bites `rv_bite` into its ellipsoid; each atrium hangs above its ventricle
/// with its tip `la_dip`/`ra_dip` below the ventricle surface; the aortic
/// tube starts `ao_dip` below the LV dome surface at a horizontal offset
/// `ao_off` from the LV center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub lv_semi: [f64; 3],
    pub rv_semi: [f64; 3],
    pub la_semi: [f64; 3],
    pub ra_semi: [f64; 3],
    /// Myocardial shell thickness.
    pub wall: f64,
    pub ao_radius: f64,
    /// Tube length measured from its (embedded) bottom end.
    pub ao_length: f64,
    pub ventricle_drop: f64,
    pub lv_shift_x: f64,
    /// How deep the outer shell overlaps the RV ellipsoid (+x direction).
    pub rv_bite: f64,
    /// Penetration of the LA tip below the LV surface.
    pub la_dip: f64,
    /// Penetration of the RA tip below the RV top.
    pub ra_dip: f64,
    /// Penetration of the tube bottom below the LV dome surface.
    pub ao_dip: f64,
    /// Forward offset of the LA center from the LV axis (y).
    pub la_off_y: f64,
    /// Horizontal offset of the tube axis from the LV center (x, y).
    pub ao_off: [f64; 2],
    /// Whole-heart translation.
    pub jitter: [f64; 3],
}

impl Default for PhantomParams {
    /// Canonical anatomy sized for a 32³ grid at 1.4 mm spacing (a ~45 mm
    /// box). All other grids work as long as the envelope's fit checks pass.
    fn default() -> Self {
        PhantomParams {
            lv_semi: [7.0, 6.4, 8.2],
            rv_semi: [5.2, 5.6, 7.0],
            la_semi: [4.4, 3.8, 4.6],
            ra_semi: [4.2, 4.0, 4.4],
            wall: 3.2,
            ao_radius: 2.4,
            ao_length: 12.0,
            ventricle_drop: 5.5,
            lv_shift_x: 5.0,
            rv_bite: 3.2,
            la_dip: 3.3,
            ra_dip: 3.3,
            ao_dip: 3.4,
            la_off_y: 2.6,
            ao_off: [1.2, -3.4],
            jitter: [0.0; 3],
        }
    }
}

/// Derived world-space geometry of a parameter set on a given grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub lv_center: [f64; 3],
    pub outer_semi: [f64; 3],
    pub rv_center: [f64; 3],
    pub la_center: [f64; 3],
    pub ra_center: [f64; 3],
    pub ao_xy: [f64; 2],
    pub ao_bottom: f64,
    pub ao_top: f64,
}

fn ellipsoid_implicit(p: [f64; 3], c: [f64; 3], semi: [f64; 3]) -> f64 {
    let dx = (p[0] - c[0]) / semi[0];
    let dy = (p[1] - c[1]) / semi[1];
    let dz = (p[2] - c[2]) / semi[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn geometry(p: &PhantomParams, dims: (usize, usize, usize), h: f64) -> Geometry {
    let g = [
        dims.0 as f64 * h / 2.0,
        dims.1 as f64 * h / 2.0,
        dims.2 as f64 * h / 2.0,
    ];
    let lv_center = [
        g[0] - p.lv_shift_x + p.jitter[0],
        g[1] + p.jitter[1],
        g[2] - p.ventricle_drop + p.jitter[2],
    ];
    let outer_semi = [
        p.lv_semi[0] + p.wall,
        p.lv_semi[1] + p.wall,
        p.lv_semi[2] + p.wall,
    ];
    let rv_center = [
        lv_center[0] + p.lv_semi[0] + p.wall + p.rv_semi[0] - p.rv_bite,
        lv_center[1],
        lv_center[2],
    ];
    // LV surface height under the LA axis (the LA is shifted by la_off_y).
    let la_dome = (1.0 - (p.la_off_y / p.lv_semi[1]).powi(2)).max(0.0).sqrt();
    let la_center = [
        lv_center[0],
        lv_center[1] + p.la_off_y,
        lv_center[2] + p.lv_semi[2] * la_dome - p.la_dip + p.la_semi[2],
    ];
    let ra_center = [
        rv_center[0],
        rv_center[1],
        rv_center[2] + p.rv_semi[2] - p.ra_dip + p.ra_semi[2],
    ];
    let ao_xy = [lv_center[0] + p.ao_off[0], lv_center[1] + p.ao_off[1]];
    let ao_dome = (1.0
        - (p.ao_off[0] / p.lv_semi[0]).powi(2)
        - (p.ao_off[1] / p.lv_semi[1]).powi(2))
    .max(0.0)
    .sqrt();
    let ao_bottom = lv_center[2] + p.lv_semi[2] * ao_dome - p.ao_dip;
    let ao_top = ao_bottom + p.ao_length;
    Geometry { lv_center, outer_semi, rv_center, la_center, ra_center, ao_xy, ao_bottom, ao_top }
}

// ── envelope ────────────────────────────────────────────────────────────

/// Validate that `params` lie in the valid-by-construction envelope for the
/// given grid. `m = 2.2·h` is the contact margin: every required overlap must
/// be at least that deep and every required separation at least that wide, so
/// adjacency survives voxelization.
///
/// The inequalities, per parameter group:
/// * all lengths positive and finite;
/// * `wall ≥ m` (the septum keeps LV and RV ≥ 1 voxel apart);
/// * `m ≤ rv_bite ≤ 0.7·rv_semi.x` (RV↔Myo contact; shallow enough that the
///   clipped RV stays one piece);
/// * `m ≤ la_dip ≤ 0.8·min(la_semi.z, lv_semi.z)` and the same for `ra_dip`
///   against `ra_semi.z`/`rv_semi.z` (atrium↔ventricle contact, tip stays in
///   the upper half);
/// * `m ≤ ao_dip ≤ 0.8·lv_semi.z`, `ao_radius ≥ 1.6·h` (tube rasterizes to a
///   connected column), and the tube must emerge `m` above the outer shell;
/// * `(ao_off.x/lv_semi.x)² + (ao_off.y/lv_semi.y)² ≤ 0.5` and
///   `|la_off_y| ≤ 0.6·lv_semi.y` (both stay on the LV dome);
/// * LA/RA bounding boxes separated by `≥ m` along x;
/// * the RA–RV contact lens lies outside the outer shell (probed at the RA
///   axis), so the shell cannot eat the required RV↔RA adjacency;
/// * the tube axis stays `≥ ao_radius + 1.2·h` away from the LA apex (it may
///   graze the LA body — that adjacency is legal) and clear of the RA;
/// * every structure's bounding box stays one voxel inside the grid.
pub fn check_envelope(params: &PhantomParams, dims: (usize, usize, usize), h: f64) -> Result<()> {
    let p = params;
    let geo = geometry(p, dims, h);
    let m = 2.2 * h;
    let mut bad: Vec<String> = Vec::new();

    let mut positive = |name: &str, v: f64| {
        if !(v.is_finite() && v > 0.0) {
            bad.push(format!("{name} must be positive, got {v}"));
        }
    };
    for (name, arr) in [
        ("lv_semi", p.lv_semi),
        ("rv_semi", p.rv_semi),
        ("la_semi", p.la_semi),
        ("ra_semi", p.ra_semi),
    ] {
        for (i, v) in arr.into_iter().enumerate() {
            positive(&format!("{name}[{i}]"), v);
        }
    }
    positive("wall", p.wall);
    positive("ao_radius", p.ao_radius);
    positive("ao_length", p.ao_length);
    positive("rv_bite", p.rv_bite);
    positive("la_dip", p.la_dip);
    positive("ra_dip", p.ra_dip);
    positive("ao_dip", p.ao_dip);
    if !bad.is_empty() {
        return Err(Error::OutsideEnvelope(bad.join("; ")));
    }

    let mut range = |name: &str, v: f64, lo: f64, hi: f64| {
        if v < lo || v > hi {
            bad.push(format!("{name} = {v:.3} outside [{lo:.3}, {hi:.3}]"));
        }
    };
    range("wall", p.wall, m, f64::INFINITY);
    range("rv_bite", p.rv_bite, m, 0.7 * p.rv_semi[0]);
    range("la_dip", p.la_dip, m, 0.8 * p.la_semi[2].min(p.lv_semi[2]));
    range("ra_dip", p.ra_dip, m, 0.8 * p.ra_semi[2].min(p.rv_semi[2]));
    range("ao_dip", p.ao_dip, m, 0.8 * p.lv_semi[2]);
    range("ao_radius", p.ao_radius, 1.6 * h, f64::INFINITY);

    let dome = (p.ao_off[0] / p.lv_semi[0]).powi(2) + (p.ao_off[1] / p.lv_semi[1]).powi(2);
    if dome > 0.5 {
        bad.push(format!("ao_off leaves the LV dome (offset measure {dome:.3} > 0.5)"));
    }
    if p.la_off_y.abs() > 0.6 * p.lv_semi[1] {
        bad.push(format!(
            "la_off_y = {:.3} exceeds 0.6·lv_semi.y = {:.3}",
            p.la_off_y,
            0.6 * p.lv_semi[1]
        ));
    }

    // LA/RA separation along x (bounding boxes; a gap along one axis bounds
    // the true distance from below).
    let gap = (geo.ra_center[0] - p.ra_semi[0]) - (geo.la_center[0] + p.la_semi[0]);
    if gap < m {
        bad.push(format!("LA/RA gap {gap:.3} below margin {m:.3}"));
    }

    // The RA–RV contact lens must lie outside the outer shell.
    let rv_top = geo.rv_center[2] + p.rv_semi[2];
    for (probe, min_val) in [
        ([geo.ra_center[0], geo.ra_center[1], rv_top - 0.5 * p.ra_dip], 1.1),
        ([geo.ra_center[0], geo.ra_center[1], rv_top], 1.05),
    ] {
        let v = ellipsoid_implicit(probe, geo.lv_center, geo.outer_semi);
        if v < min_val {
            bad.push(format!(
                "RA/RV contact region intrudes into the shell (implicit {v:.3} < {min_val})"
            ));
        }
    }

    // Tube clearance: LA apex and RA body.
    let dla = [geo.ao_xy[0] - geo.la_center[0], geo.ao_xy[1] - geo.la_center[1]];
    let dla_norm = (dla[0] * dla[0] + dla[1] * dla[1]).sqrt();
    if dla_norm < p.ao_radius + 1.2 * h {
        bad.push(format!("aortic tube too close to the LA apex ({dla_norm:.3})"));
    }
    let dra = [geo.ao_xy[0] - geo.ra_center[0], geo.ao_xy[1] - geo.ra_center[1]];
    let dra_norm = (dra[0] * dra[0] + dra[1] * dra[1]).sqrt();
    let ra_reach = p.ra_semi[0].max(p.ra_semi[1]);
    if dra_norm < p.ao_radius + ra_reach + 1.2 * h {
        bad.push(format!("aortic tube too close to the RA ({dra_norm:.3})"));
    }

    // Tube must emerge above the outer shell by the contact margin.
    let shell_dome = (1.0
        - (p.ao_off[0] / geo.outer_semi[0]).powi(2)
        - (p.ao_off[1] / geo.outer_semi[1]).powi(2))
    .max(0.0)
    .sqrt();
    let shell_top_at_axis = geo.lv_center[2] + geo.outer_semi[2] * shell_dome;
    if geo.ao_top < shell_top_at_axis + m {
        bad.push(format!(
            "aortic tube top {:.3} does not clear the shell ({:.3} + margin)",
            geo.ao_top, shell_top_at_axis
        ));
    }

    // Everything fits one voxel inside the grid.
    let extent = [dims.0 as f64 * h, dims.1 as f64 * h, dims.2 as f64 * h];
    let fit = h;
    let mut fit_box = |name: &str, lo: [f64; 3], hi: [f64; 3]| {
        for a in 0..3 {
            if lo[a] < fit || hi[a] > extent[a] - fit {
                bad.push(format!(
                    "{name} spans [{:.2}, {:.2}] on axis {a}, grid allows [{fit:.2}, {:.2}]",
                    lo[a],
                    hi[a],
                    extent[a] - fit
                ));
                return;
            }
        }
    };
    let bbox = |c: [f64; 3], s: [f64; 3]| {
        ([c[0] - s[0], c[1] - s[1], c[2] - s[2]], [c[0] + s[0], c[1] + s[1], c[2] + s[2]])
    };
    let (lo, hi) = bbox(geo.lv_center, geo.outer_semi);
    fit_box("outer shell", lo, hi);
    let (lo, hi) = bbox(geo.rv_center, p.rv_semi);
    fit_box("RV", lo, hi);
    let (lo, hi) = bbox(geo.la_center, p.la_semi);
    fit_box("LA", lo, hi);
    let (lo, hi) = bbox(geo.ra_center, p.ra_semi);
    fit_box("RA", lo, hi);
    fit_box(
        "aortic tube",
        [geo.ao_xy[0] - p.ao_radius, geo.ao_xy[1] - p.ao_radius, geo.ao_bottom],
        [geo.ao_xy[0] + p.ao_radius, geo.ao_xy[1] + p.ao_radius, geo.ao_top],
    );

    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::OutsideEnvelope(bad.join("; ")))
    }
}

// ── rasterization ───────────────────────────────────────────────────────

/// Paint the phantom onto a fresh grid. Errors if `params` fall outside the
/// envelope for this grid. Deterministic: no randomness is involved.
pub fn rasterize(
    params: &PhantomParams,
    dims: (usize, usize, usize),
    voxel_size: f64,
) -> Result<LabelMap> {
    check_envelope(params, dims, voxel_size)?;
    let geo = geometry(params, dims, voxel_size);
    let mut map = LabelMap::new(dims, voxel_size)?;
    let r2 = params.ao_radius * params.ao_radius;
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                let p = [
                    (x as f64 + 0.5) * voxel_size,
                    (y as f64 + 0.5) * voxel_size,
                    (z as f64 + 0.5) * voxel_size,
                ];
                let label = if ellipsoid_implicit(p, geo.lv_center, params.lv_semi) <= 1.0 {
                    TissueId::Lv
                } else if in_tube(p, &geo, r2) {
                    TissueId::Ao
                } else if ellipsoid_implicit(p, geo.la_center, params.la_semi) <= 1.0 {
                    TissueId::La
                } else if ellipsoid_implicit(p, geo.ra_center, params.ra_semi) <= 1.0 {
                    TissueId::Ra
                } else if ellipsoid_implicit(p, geo.lv_center, geo.outer_semi) <= 1.0 {
                    TissueId::Myo
                } else if ellipsoid_implicit(p, geo.rv_center, params.rv_semi) <= 1.0 {
                    TissueId::Rv
                } else {
                    continue;
                };
                map.set(x, y, z, label);
            }
        }
    }
    Ok(map)
}

fn in_tube(p: [f64; 3], geo: &Geometry, radius_sq: f64) -> bool {
    if p[2] < geo.ao_bottom || p[2] > geo.ao_top {
        return false;
    }
    let dx = p[0] - geo.ao_xy[0];
    let dy = p[1] - geo.ao_xy[1];
    dx * dx + dy * dy <= radius_sq
}

// ── population model ────────────────────────────────────────────────────

/// Multiplicative log-normal law: `value = median · exp(scale · ξ)`,
/// ξ ~ N(0,1). `scale = 0` degenerates to exactly `median`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalSpec {
    pub median: f64,
    pub scale: f64,
}

impl LogNormalSpec {
    pub fn new(median: f64, scale: f64) -> Self {
        LogNormalSpec { median, scale }
    }

    /// Always consumes exactly one draw, so stream accounting is independent
    /// of `scale`.
    fn sample(&self, rng: &mut RngStream) -> f64 {
        self.median * (self.scale * rng.normal()).exp()
    }

    /// Mean of the law: `median · exp(scale²/2)`.
    pub fn mean(&self) -> f64 {
        self.median * (self.scale * self.scale / 2.0).exp()
    }
}

/// Per-parameter laws of one population mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub lv_semi: [LogNormalSpec; 3],
    pub rv_semi: [LogNormalSpec; 3],
    pub la_semi: [LogNormalSpec; 3],
    pub ra_semi: [LogNormalSpec; 3],
    pub wall: LogNormalSpec,
    pub ao_radius: LogNormalSpec,
    pub ao_length: LogNormalSpec,
    pub ventricle_drop: LogNormalSpec,
    pub lv_shift_x: LogNormalSpec,
    pub rv_bite: LogNormalSpec,
    pub la_dip: LogNormalSpec,
    pub ra_dip: LogNormalSpec,
    pub ao_dip: LogNormalSpec,
    pub la_off_y: LogNormalSpec,
    pub ao_off: [f64; 2],
}

impl ModeSpec {
    /// A mode whose medians are the canonical parameters, with mild
    /// multiplicative spread on sizes and placements.
    pub fn dominant() -> Self {
        let c = PhantomParams::default();
        let semi = |s: [f64; 3]| s.map(|v| LogNormalSpec::new(v, 0.07));
        ModeSpec {
            lv_semi: semi(c.lv_semi),
            rv_semi: semi(c.rv_semi),
            la_semi: semi(c.la_semi),
            ra_semi: semi(c.ra_semi),
            wall: LogNormalSpec::new(c.wall, 0.04),
            ao_radius: LogNormalSpec::new(c.ao_radius, 0.05),
            ao_length: LogNormalSpec::new(c.ao_length, 0.05),
            ventricle_drop: LogNormalSpec::new(c.ventricle_drop, 0.05),
            lv_shift_x: LogNormalSpec::new(c.lv_shift_x, 0.05),
            rv_bite: LogNormalSpec::new(c.rv_bite, 0.03),
            la_dip: LogNormalSpec::new(c.la_dip, 0.02),
            ra_dip: LogNormalSpec::new(c.ra_dip, 0.02),
            ao_dip: LogNormalSpec::new(c.ao_dip, 0.02),
            la_off_y: LogNormalSpec::new(c.la_off_y, 0.05),
            ao_off: c.ao_off,
        }
    }

    /// The rare mode: same anatomy with a substantially enlarged right
    /// ventricle (volume roughly 2.6× the dominant median).
    pub fn rare_large_rv() -> Self {
        let mut mode = ModeSpec::dominant();
        mode.rv_semi = [
            LogNormalSpec::new(7.4, 0.09),
            LogNormalSpec::new(7.6, 0.09),
            LogNormalSpec::new(9.4, 0.09),
        ];
        mode
    }

    /// Zero out every scale so draws return the medians exactly.
    pub fn frozen(mut self) -> Self {
        let z = |l: &mut LogNormalSpec| l.scale = 0.0;
        for s in self
            .lv_semi
            .iter_mut()
            .chain(self.rv_semi.iter_mut())
            .chain(self.la_semi.iter_mut())
            .chain(self.ra_semi.iter_mut())
        {
            z(s);
        }
        for s in [
            &mut self.wall,
            &mut self.ao_radius,
            &mut self.ao_length,
            &mut self.ventricle_drop,
            &mut self.lv_shift_x,
            &mut self.rv_bite,
            &mut self.la_dip,
            &mut self.ra_dip,
            &mut self.ao_dip,
            &mut self.la_off_y,
        ] {
            z(s);
        }
        self
    }

    fn sample(&self, rng: &mut RngStream) -> PhantomParams {
        // Draw order is part of the determinism contract; do not reorder.
        let tri = |a: &[LogNormalSpec; 3], rng: &mut RngStream| {
            [a[0].sample(rng), a[1].sample(rng), a[2].sample(rng)]
        };
        PhantomParams {
            lv_semi: tri(&self.lv_semi, rng),
            rv_semi: tri(&self.rv_semi, rng),
            la_semi: tri(&self.la_semi, rng),
            ra_semi: tri(&self.ra_semi, rng),
            wall: self.wall.sample(rng),
            ao_radius: self.ao_radius.sample(rng),
            ao_length: self.ao_length.sample(rng),
            ventricle_drop: self.ventricle_drop.sample(rng),
            lv_shift_x: self.lv_shift_x.sample(rng),
            rv_bite: self.rv_bite.sample(rng),
            la_dip: self.la_dip.sample(rng),
            ra_dip: self.ra_dip.sample(rng),
            ao_dip: self.ao_dip.sample(rng),
            la_off_y: self.la_off_y.sample(rng),
            ao_off: self.ao_off,
            jitter: [0.0; 3],
        }
    }

    /// Mean RV blood-pool volume (ml) of this mode's continuum ellipsoid,
    /// ignoring the shell clip: `4/3·π·Πᵢ E[semiᵢ]`.
    pub fn rv_ellipsoid_volume_mean_ml(&self) -> f64 {
        let prod: f64 = self.rv_semi.iter().map(|l| l.mean()).product();
        4.0 / 3.0 * std::f64::consts::PI * prod / 1000.0
    }
}

/// Two-mode population with an imbalance knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub dominant: ModeSpec,
    pub rare: ModeSpec,
    /// Probability of drawing the rare mode, in `[0, 1]`.
    pub rare_weight: f64,
    /// Std (mm) of the whole-heart translation jitter (normal, per axis).
    pub jitter_scale: f64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec {
            dominant: ModeSpec::dominant(),
            rare: ModeSpec::rare_large_rv(),
            rare_weight: 0.1,
            jitter_scale: 0.8,
        }
    }
}

/// Attempt budget for rejection resampling.
const MAX_SAMPLE_ATTEMPTS: usize = 1000;

/// Draw one parameter set from the population, rejection-resampling until it
/// lands inside the envelope for `(dims, voxel_size)`. Returns the parameters
/// and whether the rare mode was drawn.
///
/// Draw order per attempt (fixed contract): mode Bernoulli, the 22 scalar
/// log-normals in struct order, then 3 jitter normals.
pub fn sample_params(
    spec: &PopulationSpec,
    dims: (usize, usize, usize),
    voxel_size: f64,
    rng: &mut RngStream,
) -> Result<(PhantomParams, bool)> {
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let rare = rng.bernoulli(spec.rare_weight);
        let mode = if rare { &spec.rare } else { &spec.dominant };
        let mut params = mode.sample(rng);
        params.jitter = [
            spec.jitter_scale * rng.normal(),
            spec.jitter_scale * rng.normal(),
            spec.jitter_scale * rng.normal(),
        ];
        if check_envelope(&params, dims, voxel_size).is_ok() {
            return Ok((params, rare));
        }
    }
    Err(Error::ResampleBudget(MAX_SAMPLE_ATTEMPTS))
}

/// Sample parameters and rasterize in one step.
pub fn generate(
    spec: &PopulationSpec,
    dims: (usize, usize, usize),
    voxel_size: f64,
    rng: &mut RngStream,
) -> Result<(LabelMap, PhantomParams, bool)> {
    let (params, rare) = sample_params(spec, dims, voxel_size, rng)?;
    let map = rasterize(&params, dims, voxel_size)?;
    Ok((map, params, rare))
}

// ── defect injectors ────────────────────────────────────────────────────

/// Deliberate anatomical corruptions. Each one is built to trip exactly one
/// topology check on a valid phantom, covering the three check families:
/// a component count, a forbidden adjacency and a required adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Defect {
    /// Carve the full mid-height LV cross-section to background: the LV
    /// splits into two components (`lv_one_component` fails).
    SplitLv,
    /// Paint a one-voxel LA line through the background gap between the
    /// atria until it touches the RA (`la_ra_separated` fails).
    AtrialBridge,
    /// Delete every aortic voxel that touches the LV, leaving a gap
    /// (`lv_ao_adjacent` fails).
    DetachAorta,
}

pub const ALL_DEFECTS: [Defect; 3] = [Defect::SplitLv, Defect::AtrialBridge, Defect::DetachAorta];

/// Apply a defect to a copy of `map`.
pub fn inject_defect(map: &LabelMap, defect: Defect) -> Result<LabelMap> {
    match defect {
        Defect::SplitLv => split_lv(map),
        Defect::AtrialBridge => atrial_bridge(map),
        Defect::DetachAorta => detach_aorta(map),
    }
}

fn split_lv(map: &LabelMap) -> Result<LabelMap> {
    let (nx, ny, nz) = map.dims();
    let mut z_min = nz;
    let mut z_max = 0usize;
    for z in 0..nz {
        let has_lv = (0..ny).any(|y| (0..nx).any(|x| map.get(x, y, z) == TissueId::Lv));
        if has_lv {
            z_min = z_min.min(z);
            z_max = z_max.max(z);
        }
    }
    if z_min >= z_max || z_max - z_min < 2 {
        return Err(Error::DefectInjection(
            "LV spans fewer than 3 slices; cannot split".into(),
        ));
    }
    let z_cut = (z_min + z_max) / 2;
    let mut out = map.clone();
    for y in 0..ny {
        for x in 0..nx {
            if out.get(x, y, z_cut) == TissueId::Lv {
                out.set(x, y, z_cut, TissueId::Background);
            }
        }
    }
    Ok(out)
}

fn centroid(map: &LabelMap, t: TissueId) -> Option<[f64; 3]> {
    let (nx, ny, nz) = map.dims();
    let mut n = 0usize;
    let mut s = [0.0f64; 3];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if map.get(x, y, z) == t {
                    n += 1;
                    s[0] += x as f64;
                    s[1] += y as f64;
                    s[2] += z as f64;
                }
            }
        }
    }
    (n > 0).then(|| s.map(|v| v / n as f64))
}

fn atrial_bridge(map: &LabelMap) -> Result<LabelMap> {
    let (nx, _, _) = map.dims();
    let cla = centroid(map, TissueId::La)
        .ok_or_else(|| Error::DefectInjection("no LA voxels".into()))?;
    let cra = centroid(map, TissueId::Ra)
        .ok_or_else(|| Error::DefectInjection("no RA voxels".into()))?;
    let base_y = ((cla[1] + cra[1]) / 2.0).round() as i64;
    let base_z = ((cla[2] + cra[2]) / 2.0).round() as i64;

    // Try rows near the midline, closest first.
    let mut offsets: Vec<(i64, i64)> = (-3..=3)
        .flat_map(|dy| (-3..=3).map(move |dz| (dy, dz)))
        .collect();
    offsets.sort_by_key(|&(dy, dz)| dy * dy + dz * dz);

    for (dy, dz) in offsets {
        let (y, z) = (base_y + dy, base_z + dz);
        if y < 0 || z < 0 || y as usize >= map.dims().1 || z as usize >= map.dims().2 {
            continue;
        }
        let (y, z) = (y as usize, z as usize);
        let row: Vec<TissueId> = (0..nx).map(|x| map.get(x, y, z)).collect();
        let la_max = row.iter().rposition(|&t| t == TissueId::La);
        let ra_min = row.iter().position(|&t| t == TissueId::Ra);
        let (Some(a), Some(b)) = (la_max, ra_min) else { continue };
        if a + 1 >= b {
            continue;
        }
        if row[a + 1..b].iter().all(|&t| t == TissueId::Background) {
            let mut out = map.clone();
            for x in a + 1..b {
                out.set(x, y, z, TissueId::La);
            }
            return Ok(out);
        }
    }
    Err(Error::DefectInjection(
        "no clear background row between the atria".into(),
    ))
}

fn detach_aorta(map: &LabelMap) -> Result<LabelMap> {
    let (nx, ny, nz) = map.dims();
    let mut out = map.clone();
    let mut removed = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if map.get(x, y, z) != TissueId::Ao {
                    continue;
                }
                let touches_lv = [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .into_iter()
                    .any(|(dx, dy, dz)| {
                        let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        qx >= 0
                            && qy >= 0
                            && qz >= 0
                            && (qx as usize) < nx
                            && (qy as usize) < ny
                            && (qz as usize) < nz
                            && map.get(qx as usize, qy as usize, qz as usize) == TissueId::Lv
                    });
                if touches_lv {
                    out.set(x, y, z, TissueId::Background);
                    removed += 1;
                }
            }
        }
    }
    if removed == 0 {
        return Err(Error::DefectInjection("aorta does not touch the LV".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tissue::ALL_TISSUES;
    use crate::topology::{check_topology, CHECK_NAMES};

    const DIMS: (usize, usize, usize) = (32, 32, 32);
    const H: f64 = 1.4;

    #[test]
    fn canonical_phantom_passes_all_topology_checks() {
        let map = rasterize(&PhantomParams::default(), DIMS, H).unwrap();
        let report = check_topology(&map);
        assert!(
            report.passed(),
            "canonical phantom violates: {:?}",
            report.failed_names()
        );
        // Every tissue actually present.
        for t in ALL_TISSUES.into_iter().skip(1) {
            assert!(map.count(t) > 0, "{t} missing");
        }
    }

    #[test]
    fn lv_is_shielded_from_background_and_rv() {
        let map = rasterize(&PhantomParams::default(), DIMS, H).unwrap();
        let adj = crate::topology::adjacency_matrix(&map);
        assert!(
            !adj[TissueId::Lv.channel()][TissueId::Background.channel()],
            "LV leaks to background"
        );
        assert!(!adj[TissueId::Lv.channel()][TissueId::Rv.channel()]);
        assert!(!adj[TissueId::La.channel()][TissueId::Ra.channel()]);
    }

    #[test]
    fn rasterize_rejects_out_of_envelope_params() {
        let mut p = PhantomParams::default();
        p.wall = 0.5; // thinner than the 2.2·h contact margin
        assert!(matches!(rasterize(&p, DIMS, H), Err(Error::OutsideEnvelope(_))));
        let mut p = PhantomParams::default();
        p.lv_semi = [40.0, 40.0, 40.0]; // cannot fit the grid
        assert!(check_envelope(&p, DIMS, H).is_err());
    }

    #[test]
    fn lv_volume_matches_continuum_at_fine_resolution() {
        // Finer grid, same world box: semi-axes are ≥ 9 voxels at h = 0.66.
        let p = PhantomParams::default();
        let map = rasterize(&p, (68, 68, 68), 0.66).unwrap();
        let count = map.count(TissueId::Lv) as f64;
        let vol_vox = 4.0 / 3.0 * std::f64::consts::PI * p.lv_semi.iter().product::<f64>()
            / 0.66f64.powi(3);
        assert!(
            (count / vol_vox - 1.0).abs() < 0.05,
            "LV voxel count {count} vs continuum {vol_vox}"
        );
    }

    #[test]
    fn zero_variance_spec_returns_medians_exactly() {
        let spec = PopulationSpec {
            dominant: ModeSpec::dominant().frozen(),
            rare: ModeSpec::rare_large_rv().frozen(),
            rare_weight: 0.0,
            jitter_scale: 0.0,
        };
        let mut rng = RngStream::new(1, 0);
        let (params, rare) = sample_params(&spec, DIMS, H, &mut rng).unwrap();
        assert!(!rare);
        let want = PhantomParams::default();
        assert_eq!(params, want);
    }

    #[test]
    fn mixture_weight_routes_modes() {
        let mut rng = RngStream::new(2, 0);
        let spec = PopulationSpec { rare_weight: 0.0, ..Default::default() };
        for _ in 0..100 {
            let (_, rare) = sample_params(&spec, DIMS, H, &mut rng).unwrap();
            assert!(!rare);
        }
        let spec = PopulationSpec { rare_weight: 1.0, ..Default::default() };
        for _ in 0..100 {
            let (_, rare) = sample_params(&spec, DIMS, H, &mut rng).unwrap();
            assert!(rare);
        }
    }

    #[test]
    fn rv_volume_mean_matches_the_mode_law() {
        // Dominant-only population; the empirical mean of the RV ellipsoid
        // volume over 500 draws must sit within 5% of the analytic mean
        // (rejection resampling may bias it slightly; the envelope is roomy).
        let spec = PopulationSpec { rare_weight: 0.0, ..Default::default() };
        let mut rng = RngStream::new(3, 0);
        let mut acc = 0.0;
        let n = 500;
        for _ in 0..n {
            let (p, _) = sample_params(&spec, DIMS, H, &mut rng).unwrap();
            acc += 4.0 / 3.0 * std::f64::consts::PI * p.rv_semi.iter().product::<f64>() / 1000.0;
        }
        let got = acc / n as f64;
        let want = spec.dominant.rv_ellipsoid_volume_mean_ml();
        assert!(
            (got / want - 1.0).abs() < 0.05,
            "empirical {got} vs analytic {want}"
        );
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let spec = PopulationSpec::default();
        let a = sample_params(&spec, DIMS, H, &mut RngStream::new(7, 3)).unwrap();
        let b = sample_params(&spec, DIMS, H, &mut RngStream::new(7, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_spec_exhausts_the_resample_budget() {
        let mut dominant = ModeSpec::dominant().frozen();
        dominant.wall = LogNormalSpec::new(0.1, 0.0); // always below margin
        let spec = PopulationSpec {
            dominant,
            rare: ModeSpec::rare_large_rv().frozen(),
            rare_weight: 0.0,
            jitter_scale: 0.0,
        };
        let err = sample_params(&spec, DIMS, H, &mut RngStream::new(1, 1));
        assert!(matches!(err, Err(Error::ResampleBudget(_))));
    }

    #[test]
    fn sampled_phantoms_pass_topology_checks() {
        let spec = PopulationSpec::default();
        let mut rng = RngStream::new(11, 0);
        for i in 0..25 {
            let (map, _, _) = generate(&spec, DIMS, H, &mut rng).unwrap();
            let report = check_topology(&map);
            assert!(
                report.passed(),
                "sampled phantom {i} violates {:?}",
                report.failed_names()
            );
        }
    }

    #[test]
    fn defects_trip_exactly_their_intended_check() {
        let spec = PopulationSpec::default();
        let mut rng = RngStream::new(13, 0);
        let intended = [
            (Defect::SplitLv, "lv_one_component"),
            (Defect::AtrialBridge, "la_ra_separated"),
            (Defect::DetachAorta, "lv_ao_adjacent"),
        ];
        for i in 0..5 {
            let (map, _, _) = generate(&spec, DIMS, H, &mut rng).unwrap();
            assert!(check_topology(&map).passed(), "baseline {i} invalid");
            for (defect, check) in intended {
                let broken = inject_defect(&map, defect).unwrap();
                let report = check_topology(&broken);
                let idx = CHECK_NAMES.iter().position(|&n| n == check).unwrap();
                let checks = report.checks();
                assert!(!checks[idx], "{defect:?} did not trip {check} (map {i})");
                assert_eq!(
                    report.violations(),
                    1,
                    "{defect:?} tripped extra checks: {:?}",
                    report.failed_names()
                );
            }
        }
    }
}
