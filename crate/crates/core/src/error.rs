//! Crate-wide error type.
//!
//! One enum, grouped roughly by subsystem. Variants carry enough context to be
//! actionable from a CLI message (paths, offending values, expected sizes).

use std::path::PathBuf;

/// Convenience alias used across the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // ── grids and tensors ───────────────────────────────────────────────
    #[error("grid dimensions must all be positive, got {0:?}")]
    EmptyDims((usize, usize, usize)),
    #[error("voxel size must be positive and finite, got {0}")]
    BadVoxelSize(f64),
    #[error("byte {value} at voxel {index} is not a valid tissue id (0..=6)")]
    BadLabel { value: u8, index: usize },
    #[error("non-finite value at cell {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    // ── diffusion ───────────────────────────────────────────────────────
    #[error("noise schedule needs at least 2 levels, got {0}")]
    ScheduleTooShort(usize),
    #[error("schedule bounds must satisfy 0 < sigma_min < sigma_max, got ({min}, {max})")]
    BadSigmaBounds { min: f64, max: f64 },
    #[error("schedule exponent rho must be positive and finite, got {0}")]
    BadRho(f64),
    #[error("preconditioner is undefined at sigma = 0 (c_noise = ln(sigma)/4 diverges)")]
    SigmaZero,
    #[error("sigma must be non-negative and finite, got {0}")]
    BadSigma(f64),
    #[error("mixture needs at least one component")]
    EmptyMixture,
    #[error("mixture weights must be positive and sum to 1, got sum {0}")]
    BadMixtureWeights(f64),
    #[error("mixture component {comp} has std {std}, must be >= 0 and finite")]
    BadMixtureStd { comp: usize, std: f64 },
    #[error("empirical denoiser needs a non-empty dataset")]
    EmptyDataset,
    #[error("loss evaluation needs at least one draw")]
    NoDraws,

    // ── codec / editing ─────────────────────────────────────────────────
    #[error("grid dims {dims:?} are not divisible by downsample factor {factor}")]
    NotDivisible { dims: (usize, usize, usize), factor: usize },
    #[error("expected a 7-channel latent, got {0} channels")]
    WrongChannels(usize),
    #[error("edit strength psi must lie in (0, 1], got {0}")]
    BadPsi(f64),
    #[error("edit masks preserve tissue regions; Background is not preservable")]
    MaskPreservesBackground,

    // ── cohorts / analytics ─────────────────────────────────────────────
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("feature cloud needs more than k = {k} members for k-NN radii, got {n}")]
    CloudTooSmall { k: usize, n: usize },
    #[error("feature cloud needs at least {need} members, got {got}")]
    TooFewMembers { need: usize, got: usize },

    // ── phantom ─────────────────────────────────────────────────────────
    #[error("phantom parameters outside the valid-by-construction envelope: {0}")]
    OutsideEnvelope(String),
    #[error("parameter resampling budget exhausted after {0} attempts")]
    ResampleBudget(usize),
    #[error("defect injection failed: {0}")]
    DefectInjection(String),

    // ── pipelines ───────────────────────────────────────────────────────
    #[error("filter yield insufficient: needed {needed} members, got {got} from a budget of {budget} draws")]
    FilterYield { needed: usize, got: usize, budget: usize },
    #[error("config error: {0}")]
    Config(String),

    // ── file formats ────────────────────────────────────────────────────
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: unsupported format version {found}, this build reads version {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated payload, header implies {expected} bytes but only {found} follow")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: header/payload size disagreement, header implies {expected} bytes but {found} follow")]
    SizeMismatch { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: malformed header: {msg}")]
    BadHeader { path: PathBuf, msg: String },
    #[error("{path}: expected a {expected} file, found kind \"{found}\"")]
    WrongKind { path: PathBuf, expected: &'static str, found: String },
    #[error("manifest references a missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: invalid JSON: {msg}")]
    BadJson { path: PathBuf, msg: String },
    #[error("{path}: config hashes to {found}, but the manifest records {expected}")]
    HashMismatch { path: PathBuf, found: String, expected: String },
    #[error("{path}: image encoding failed: {msg}")]
    ImageEncode { path: PathBuf, msg: String },
}

impl Error {
    /// Wrap an io error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-parsable code, stable across releases; used by the CLI's
    /// `error[code]: message` output contract.
    pub fn code(&self) -> &'static str {
        use Error::*;
        match self {
            EmptyDims(_) | BadVoxelSize(_) | BadLabel { .. } | NonFinite(_)
            | ShapeMismatch(_) => "grid",
            ScheduleTooShort(_) | BadSigmaBounds { .. } | BadRho(_) | SigmaZero
            | BadSigma(_) => "schedule",
            EmptyMixture | BadMixtureWeights(_) | BadMixtureStd { .. } | EmptyDataset
            | NoDraws => "denoiser",
            NotDivisible { .. } | WrongChannels(_) => "codec",
            BadPsi(_) | MaskPreservesBackground => "edit",
            EmptyCohort | CloudTooSmall { .. } | TooFewMembers { .. } => "analytics",
            OutsideEnvelope(_) | ResampleBudget(_) | DefectInjection(_) => "phantom",
            FilterYield { .. } => "pipeline",
            Config(_) => "config",
            Io { .. } => "io",
            VersionMismatch { .. } => "version",
            Truncated { .. } => "truncated",
            SizeMismatch { .. } => "size-mismatch",
            BadHeader { .. } | WrongKind { .. } => "header",
            MissingFile(_) => "missing-file",
            BadJson { .. } => "json",
            HashMismatch { .. } => "hash-mismatch",
            ImageEncode { .. } => "image",
        }
    }
}
