//! Synthesis, editing and evaluation of 3-D cardiac-style label-map cohorts.
//!
//! The crate builds a complete, exactly computable stand-in for a latent
//! diffusion pipeline on segmentation maps:
//!
//! * [`phantom`] — a procedural cardiac phantom (ellipsoid chambers, a
//!   myocardial shell, an aortic tube) with a parametric population model,
//!   plus deliberate defect injectors for validating the topology checker.
//! * [`codec`] — a fixed, training-free stand-in for a segmentation
//!   autoencoder: block-averaged one-hot encoding and trilinear-argmax
//!   decoding.
//! * [`diffusion`] — noise schedule, preconditioning coefficients, exact
//!   posterior-mean denoisers (Gaussian mixture / empirical), the weighted
//!   denoising loss, and a deterministic Heun/Euler probability-flow sampler.
//! * [`editing`] — perturbational (noise-and-resample) and mask-localized
//!   (inpainting-style) anatomy editing in latent space.
//! * [`morphometry`] / [`topology`] — per-chamber shape features and the
//!   12-check anatomical plausibility validator.
//! * [`analytics`] — cohort-level metrics: improved precision/recall,
//!   Fréchet distance, occupancy heatmaps.
//! * [`pipelines`] — end-to-end experiment drivers (unconditional cohorts,
//!   edit-strength sweeps, mask sweeps, targeted augmentation, sensitivity
//!   grids), all bit-reproducible for a given config and master seed.
//! * [`io`] — simple self-describing file formats (JSON header + raw
//!   payload) for label maps, latents and heatmaps, plus cohort manifests.
//!
//! Determinism is a hard contract throughout: every random draw flows through
//! [`rng::RngStream`], addressed by `(master_seed, stream_index)`.

pub mod analytics;
pub use analytics::{
    frechet_distance, heatmap_diff, occupancy_heatmap, precision_recall, FeatureCloud, Heatmap,
    HeatmapDiff, DEFAULT_PR_K, FRECHET_RIDGE,
};
pub mod codec;
pub mod cohort;
pub mod config;
pub mod diffusion;
pub mod editing;
pub mod error;
pub mod grid;
pub mod io;
pub mod morphometry;
pub mod phantom;
pub mod pipelines;
pub mod rng;
pub mod tissue;
pub mod topology;

pub use cohort::{Cohort, Provenance};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use io::{Manifest, ManifestEntry};
pub use pipelines::Workbench;
pub use grid::{onehot, LabelMap, Latent, LatentMask, LatentShape};
pub use rng::RngStream;
pub use tissue::{TissueId, ALL_TISSUES, CHAMBERS, TISSUE_COUNT};
