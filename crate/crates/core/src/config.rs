//! Experiment configuration: one TOML-serializable struct that pins every
//! knob a pipeline run depends on — population, grid geometry, sampler
//! settings, edit grids, filter thresholds, seed-selection rules — plus a
//! content hash so results directories can prove which config produced them.
//!
//! Every field has a default, so a TOML file only needs the overrides.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::Codec;
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::editing::EditMaskSpec;
use crate::error::{Error, Result};
use crate::phantom::PopulationSpec;
use crate::tissue::TissueId;

// ── sub-configs ─────────────────────────────────────────────────────────

/// How the data-driven denoiser is assembled from the reference latents.
///
/// Responsibilities are computed per spatial block (edge length `block`
/// latent cells) over the reference set, with the kernel bandwidth inflated
/// to `kappa·σ`. `kappa = 1` is the exact posterior mean of the blockwise
/// empirical distribution; `kappa > 1` over-smooths the same way a weight-
/// regularized network does, biasing flows toward dense regions of the
/// population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Spatial block edge, in latent cells. Blocks at the high edge are
    /// truncated; a block covering the whole grid reproduces the plain
    /// empirical denoiser.
    pub block: usize,
    /// Bandwidth inflation factor, `>= 1`.
    pub kappa: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        // Block 2 on the canonical 8³ latent grid gives 64 blocks — small
        // enough that localized edits have whole blocks to resample freely,
        // large enough that each block carries joint structure.
        DenoiserConfig { block: 2, kappa: 1.6 }
    }
}

/// A named localized-edit mask: which tissues to hold fixed, and how far the
/// preserved region is dilated at latent resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEditConfig {
    pub name: String,
    /// Tissue names to preserve (case-insensitive). The myocardium must be
    /// left editable so the wall can adapt around the resampled chamber.
    pub preserve: Vec<String>,
    #[serde(default = "default_dilation")]
    pub dilation_rounds: usize,
}

fn default_dilation() -> usize {
    EditMaskSpec::DEFAULT_DILATION_ROUNDS
}

impl MaskEditConfig {
    /// Parse the tissue names and build the editing-module spec.
    pub fn to_spec(&self) -> Result<EditMaskSpec> {
        let mut preserve = BTreeSet::new();
        for name in &self.preserve {
            let id = TissueId::from_name(name).ok_or_else(|| {
                Error::Config(format!("mask \"{}\": unknown tissue \"{name}\"", self.name))
            })?;
            if id == TissueId::Myo {
                return Err(Error::Config(format!(
                    "mask \"{}\": the myocardium cannot be preserved — the wall must \
                     stay editable around the resampled chamber",
                    self.name
                )));
            }
            preserve.insert(id);
        }
        Ok(EditMaskSpec::new(preserve)?.with_dilation_rounds(self.dilation_rounds))
    }
}

/// Volume band used by seed selection, as a rank-percentile interval over
/// the reference cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    /// Bottom decile.
    Low,
    /// Middle quintile.
    Mid,
    /// Top decile.
    High,
}

impl Band {
    /// Inclusive percentile interval `[lo, hi]`.
    pub fn interval(self) -> (f64, f64) {
        match self {
            Band::Low => (0.0, 0.1),
            Band::Mid => (0.4, 0.6),
            Band::High => (0.9, 1.0),
        }
    }
}

/// Seed archetype: pick the reference member whose LV/RV volumes fall in the
/// configured percentile bands (ties broken by member index).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRule {
    pub name: String,
    pub lv: Band,
    pub rv: Band,
}

// ── the experiment config ───────────────────────────────────────────────

/// Everything a pipeline run depends on. All fields default, so a config
/// file only states overrides; [`ExperimentConfig::validate`] enforces the
/// cross-field invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root seed every stream index is derived from.
    pub master_seed: u64,
    /// Label-map grid dimensions; must be divisible by `codec_factor`.
    pub dims: (usize, usize, usize),
    /// Voxel edge length in mm.
    pub voxel_size: f64,
    /// Downsampling factor of the one-hot codec.
    pub codec_factor: usize,
    /// Reverse-ODE ladder length for generation and editing.
    pub steps: usize,
    /// Two-mode phantom population the reference cohort is drawn from.
    pub population: PopulationSpec,
    /// Members in the reference cohort (the "real" data).
    pub reference_size: usize,
    /// Members per unconditional synthetic cohort.
    pub cohort_size: usize,
    /// Members per (seed, ψ) cohort in the perturbation sweep.
    pub edit_cohort_size: usize,
    /// Members per (seed, mask) cohort in the localized-edit sweep.
    pub mask_cohort_size: usize,
    /// Members per filtered augmentation cohort.
    pub augment_size: usize,
    /// Members per grid point in sensitivity runs.
    pub sensitivity_size: usize,
    /// Perturbation strengths for the ψ sweep, each in (0, 1].
    pub psi_grid: Vec<f64>,
    /// Localized-edit masks.
    pub masks: Vec<MaskEditConfig>,
    /// Seed archetypes for the edit sweeps.
    pub seed_rules: Vec<SeedRule>,
    /// Data-driven denoiser construction.
    pub denoiser: DenoiserConfig,
    /// RV-volume filter threshold as a reference-cohort quantile, in (0, 1).
    pub threshold_quantile: f64,
    /// Absolute RV-volume filter threshold (ml); overrides the quantile.
    pub threshold_ml: Option<f64>,
    /// Neighbor count for precision/recall.
    pub pr_k: usize,
    /// Ladder lengths scanned by the sensitivity pipeline.
    pub steps_grid: Vec<usize>,
    /// Cohort sizes scanned by the sensitivity pipeline.
    pub size_grid: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 2026,
            dims: (32, 32, 32),
            voxel_size: 1.4,
            codec_factor: 4,
            steps: 20,
            population: PopulationSpec::default(),
            reference_size: 150,
            cohort_size: DEFAULT_COHORT_PRESET,
            edit_cohort_size: 60,
            mask_cohort_size: 50,
            augment_size: 40,
            sensitivity_size: 40,
            psi_grid: vec![0.35, 0.5, 0.65, 0.8, 1.0],
            masks: vec![
                MaskEditConfig {
                    name: "edit-lv".into(),
                    preserve: ["RV", "RA", "LA", "Ao"].map(String::from).to_vec(),
                    dilation_rounds: default_dilation(),
                },
                MaskEditConfig {
                    name: "edit-rv".into(),
                    preserve: ["LV", "RA", "LA", "Ao"].map(String::from).to_vec(),
                    dilation_rounds: default_dilation(),
                },
            ],
            seed_rules: vec![
                SeedRule { name: "lv_hi_rv_hi".into(), lv: Band::High, rv: Band::High },
                SeedRule { name: "lv_hi_rv_lo".into(), lv: Band::High, rv: Band::Low },
                SeedRule { name: "lv_lo_rv_hi".into(), lv: Band::Low, rv: Band::High },
                SeedRule { name: "lv_lo_rv_lo".into(), lv: Band::Low, rv: Band::Low },
            ],
            denoiser: DenoiserConfig::default(),
            threshold_quantile: 0.9,
            threshold_ml: None,
            pr_k: 3,
            steps_grid: vec![5, 10, 20, 50, 100, 200],
            size_grid: vec![20, 40, 80, 160],
        }
    }
}

/// Default unconditional cohort size.
pub const DEFAULT_COHORT_PRESET: usize = 100;
/// Larger preset matching the biggest single-run cohort we reproduce trends
/// against.
pub const LARGE_COHORT_PRESET: usize = 360;

impl ExperimentConfig {
    /// Enforce cross-field invariants. Called by the pipelines before any
    /// work starts; config files are validated on load.
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        let (nx, ny, nz) = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::EmptyDims(self.dims));
        }
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(Error::BadVoxelSize(self.voxel_size));
        }
        if self.codec_factor == 0 {
            return cfg("codec_factor must be >= 1".into());
        }
        if nx % self.codec_factor != 0 || ny % self.codec_factor != 0
            || nz % self.codec_factor != 0
        {
            return Err(Error::NotDivisible { dims: self.dims, factor: self.codec_factor });
        }
        if self.steps < 2 {
            return Err(Error::ScheduleTooShort(self.steps));
        }
        if self.reference_size == 0 {
            return cfg("reference_size must be >= 1".into());
        }
        if self.psi_grid.is_empty() {
            return cfg("psi_grid must not be empty".into());
        }
        for &psi in &self.psi_grid {
            if !(psi.is_finite() && psi > 0.0 && psi <= 1.0) {
                return Err(Error::BadPsi(psi));
            }
        }
        let mut names = BTreeSet::new();
        for mask in &self.masks {
            if mask.name.is_empty() {
                return cfg("mask names must not be empty".into());
            }
            if !names.insert(&mask.name) {
                return cfg(format!("duplicate mask name \"{}\"", mask.name));
            }
            mask.to_spec()?;
        }
        let mut rules = BTreeSet::new();
        for rule in &self.seed_rules {
            if rule.name.is_empty() {
                return cfg("seed-rule names must not be empty".into());
            }
            if !rules.insert(&rule.name) {
                return cfg(format!("duplicate seed rule \"{}\"", rule.name));
            }
        }
        if self.denoiser.block == 0 {
            return cfg("denoiser.block must be >= 1".into());
        }
        if !(self.denoiser.kappa.is_finite() && self.denoiser.kappa >= 1.0) {
            return cfg(format!(
                "denoiser.kappa must be finite and >= 1, got {}",
                self.denoiser.kappa
            ));
        }
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile < 1.0) {
            return cfg(format!(
                "threshold_quantile must lie in (0, 1), got {}",
                self.threshold_quantile
            ));
        }
        if let Some(ml) = self.threshold_ml {
            if !(ml.is_finite() && ml > 0.0) {
                return cfg(format!("threshold_ml must be positive, got {ml}"));
            }
        }
        if self.pr_k == 0 {
            return cfg("pr_k must be >= 1".into());
        }
        if !(self.population.rare_weight >= 0.0 && self.population.rare_weight <= 1.0) {
            return cfg(format!(
                "population.rare_weight must lie in [0, 1], got {}",
                self.population.rare_weight
            ));
        }
        for &s in &self.steps_grid {
            if s < 2 {
                return Err(Error::ScheduleTooShort(s));
            }
        }
        if self.size_grid.iter().any(|&s| s == 0) {
            return cfg("size_grid entries must be >= 1".into());
        }
        Ok(())
    }

    /// The noise ladder this config runs on.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(&ScheduleConfig::with_steps(self.steps))
    }

    /// The one-hot codec this config runs on.
    pub fn codec(&self) -> Result<Codec> {
        Codec::new(self.codec_factor)
    }

    /// Parse from TOML text and validate.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML rendering (also the hash input).
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load and validate a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Write the canonical TOML rendering.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical TOML rendering, as lowercase hex. Stored in
    /// manifests so a results directory can prove which config produced it.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml_string()?;
        let digest = Sha256::digest(text.as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write;
            write!(hex, "{byte:02x}").expect("writing to a String cannot fail");
        }
        Ok(hex)
    }
}
