//! End-to-end experiment drivers: reference-cohort construction, a
//! data-driven block denoiser, unconditional generation, perturbation and
//! localized-edit sweeps, filtered augmentation, and sensitivity scans.
//!
//! Every driver is bit-reproducible from `(config, master_seed)` regardless
//! of worker count: each member draws from its own RNG stream, parallel maps
//! preserve index order, and floating-point reductions run sequentially.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analytics::{frechet_distance, heatmap_diff, occupancy_heatmap_of, FeatureCloud,
    HeatmapDiff, precision_recall};
use crate::codec::Codec;
use crate::cohort::{Cohort, Provenance};
use crate::config::{Band, ExperimentConfig};
use crate::diffusion::{sample, Denoiser, IntegrationOrder, NoiseSchedule, Precond,
    ScheduleConfig};
use crate::editing::{local_edit, perturb_edit, PerturbSpec};
use crate::error::{Error, Result};
use crate::grid::{LabelMap, Latent, LatentMask, LatentShape};
use crate::morphometry::{morph_features, MorphVector};
use crate::phantom::{generate, PopulationSpec};
use crate::rng::RngStream;
use crate::tissue::TissueId;
use crate::topology::{check_cohort, ViolationStats};

// ── RNG stream layout ───────────────────────────────────────────────────

/// Namespaces for stream indices: `stream = phase << 40 | run << 20 | member`.
/// Every (phase, run, member) triple maps to a distinct stream of the master
/// seed, so no two pipeline stages ever share randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Reference = 1,
    Unconditional = 2,
    PsiSweep = 3,
    MaskSweep = 4,
    AugmentUnconditional = 5,
    AugmentPerturb = 6,
    AugmentLocal = 7,
    Sensitivity = 8,
}

const RUN_BITS: u32 = 20;
const MEMBER_BITS: u32 = 20;

/// Compose a stream index. Run and member ids must fit their 20-bit fields.
pub fn stream_index(phase: Phase, run: usize, member: usize) -> u64 {
    debug_assert!(run < 1 << RUN_BITS && member < 1 << MEMBER_BITS);
    ((phase as u64) << (RUN_BITS + MEMBER_BITS)) | ((run as u64) << MEMBER_BITS) | member as u64
}

/// Run an indexed job in parallel, keeping results in index order and
/// reporting the lowest-index error when several fail.
fn par_try<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Send + Sync) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = (0..n).into_par_iter().map(f).collect();
    results.into_iter().collect()
}

// ── block-empirical denoiser ────────────────────────────────────────────

/// Posterior-mean denoiser of a blockwise-factorized empirical distribution
/// over the reference latents.
///
/// The grid is partitioned into spatial blocks of edge `block` (latent
/// cells, all channels together; edge blocks are truncated). Within each
/// block, member responsibilities are softmax weights of the squared
/// distance restricted to that block, with the kernel bandwidth inflated to
/// `kappa·σ`. Blocks recombine independently, so samples are novel
/// member-block compositions rather than copies.
///
/// With one grid-covering block and `kappa = 1` this reduces to the plain
/// empirical posterior mean. `kappa > 1` over-smooths the responsibilities
/// — the same mean-seeking bias a regularized trained model shows — pulling
/// flows toward densely populated regions of the reference set.
#[derive(Debug, Clone)]
pub struct BlockEmpiricalDenoiser {
    data: Vec<Latent>,
    kappa: f64,
    /// Spatial cell indices per block; a disjoint cover of the grid.
    blocks: Vec<Vec<usize>>,
}

impl BlockEmpiricalDenoiser {
    pub fn new(data: Vec<Latent>, block: usize, kappa: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for x in &data[1..] {
            data[0].ensure_same_shape(x, "dataset element")?;
        }
        if block == 0 {
            return Err(Error::Config("denoiser block edge must be >= 1".into()));
        }
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::Config(format!(
                "denoiser bandwidth factor must be positive and finite, got {kappa}"
            )));
        }
        let blocks = partition_blocks(data[0].shape().dims, block);
        Ok(BlockEmpiricalDenoiser { data, kappa, blocks })
    }

    pub fn data(&self) -> &[Latent] {
        &self.data
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Number of spatial blocks in the partition.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

/// Disjoint cover of the spatial grid by cubes of edge `block` (truncated at
/// the high faces), each listed as spatial cell indices.
fn partition_blocks(dims: (usize, usize, usize), block: usize) -> Vec<Vec<usize>> {
    let (nx, ny, nz) = dims;
    let mut blocks = Vec::new();
    for z0 in (0..nz).step_by(block) {
        for y0 in (0..ny).step_by(block) {
            for x0 in (0..nx).step_by(block) {
                let mut cells = Vec::new();
                for z in z0..(z0 + block).min(nz) {
                    for y in y0..(y0 + block).min(ny) {
                        for x in x0..(x0 + block).min(nx) {
                            cells.push(x + nx * (y + ny * z));
                        }
                    }
                }
                blocks.push(cells);
            }
        }
    }
    blocks
}

impl Denoiser for BlockEmpiricalDenoiser {
    fn denoise(&self, z_sigma: &Latent, sigma: f64) -> Result<Latent> {
        Precond::check_sigma(sigma)?;
        self.data[0].ensure_same_shape(z_sigma, "denoiser input")?;
        if sigma == 0.0 {
            return Ok(z_sigma.clone());
        }
        let shape = z_sigma.shape();
        let spatial = shape.spatial_len();
        let channels = shape.channels;
        let band = self.kappa * sigma;
        let inv = 1.0 / (2.0 * band * band);
        let z = z_sigma.values();
        let mut out = Latent::zeros(shape)?;
        let mut logs = vec![0.0; self.data.len()];
        for cells in &self.blocks {
            for (log, x) in logs.iter_mut().zip(&self.data) {
                let xv = x.values();
                let mut d2 = 0.0;
                for c in 0..channels {
                    let off = spatial * c;
                    for &s in cells {
                        let d = z[s + off] - xv[s + off];
                        d2 += d * d;
                    }
                }
                *log = -d2 * inv;
            }
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            for (x, &log) in self.data.iter().zip(&logs) {
                let w = (log - lse).exp();
                if w == 0.0 {
                    continue;
                }
                let xv = x.values();
                let ov = out.values_mut();
                for c in 0..channels {
                    let off = spatial * c;
                    for &s in cells {
                        ov[s + off] += w * xv[s + off];
                    }
                }
            }
        }
        out.set_sigma_tag(0.0);
        Ok(out)
    }
}

// ── reference set and workbench ─────────────────────────────────────────

/// The "real" data of an experiment: a phantom cohort with everything the
/// downstream stages need precomputed.
///
/// Features are measured on each member's codec round-trip, not the raw
/// rasterization: synthetic members only ever exist behind the codec, so
/// comparing both sides through it keeps codec bias out of every metric.
/// Violation statistics, by contrast, are reported on the raw maps.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    /// Raw rasterized members.
    pub maps: Vec<LabelMap>,
    /// Which members were drawn from the rare population mode.
    pub rare: Vec<bool>,
    /// Encoded members; also the denoiser's dataset.
    pub latents: Vec<Latent>,
    /// Codec round-trips of the members.
    pub roundtrip: Vec<LabelMap>,
    /// Morphology of the round-tripped members.
    pub features: Vec<MorphVector>,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// A validated config with its reference cohort, codec, noise ladder, and
/// constructed denoiser — the shared substrate of every pipeline run.
pub struct Workbench {
    cfg: ExperimentConfig,
    codec: Codec,
    schedule: NoiseSchedule,
    reference: ReferenceSet,
    denoiser: BlockEmpiricalDenoiser,
    shape: LatentShape,
    /// RV volume (ml) separating dominant-sized from rare-sized members;
    /// `None` when the population modes are not separable by RV volume.
    rare_split_ml: Option<f64>,
}

impl Workbench {
    /// Validate the config, draw the reference cohort, and construct the
    /// denoiser from its latents.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let codec = cfg.codec()?;
        let schedule = cfg.schedule()?;
        let population = cfg.population.clone();
        let (dims, voxel) = (cfg.dims, cfg.voxel_size);
        let master = cfg.master_seed;
        let members = par_try(cfg.reference_size, |i| {
            let mut rng = RngStream::new(master, stream_index(Phase::Reference, 0, i));
            let (map, _, rare) = generate(&population, dims, voxel, &mut rng)?;
            let latent = codec.encode(&map)?;
            let roundtrip = codec.decode(&latent)?;
            let features = morph_features(&roundtrip);
            Ok((map, rare, latent, roundtrip, features))
        })?;
        let mut reference = ReferenceSet {
            maps: Vec::with_capacity(members.len()),
            rare: Vec::with_capacity(members.len()),
            latents: Vec::with_capacity(members.len()),
            roundtrip: Vec::with_capacity(members.len()),
            features: Vec::with_capacity(members.len()),
        };
        for (map, rare, latent, roundtrip, features) in members {
            reference.maps.push(map);
            reference.rare.push(rare);
            reference.latents.push(latent);
            reference.roundtrip.push(roundtrip);
            reference.features.push(features);
        }
        let denoiser = BlockEmpiricalDenoiser::new(
            reference.latents.clone(),
            cfg.denoiser.block,
            cfg.denoiser.kappa,
        )?;
        let shape = reference.latents[0].shape();
        let rare_split_ml = rare_split(&cfg.population, &reference);
        Ok(Workbench { cfg, codec, schedule, reference, denoiser, shape, rare_split_ml })
    }

    pub fn cfg(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn reference(&self) -> &ReferenceSet {
        &self.reference
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn denoiser(&self) -> &BlockEmpiricalDenoiser {
        &self.denoiser
    }

    /// Classify a member as rare-mode sized by its RV volume. `false` when
    /// the modes are not separable.
    pub fn is_rare_sized(&self, features: &MorphVector) -> bool {
        match self.rare_split_ml {
            Some(split) => features.volume_ml(TissueId::Rv) > split,
            None => false,
        }
    }

    // ── member generation ───────────────────────────────────────────────

    fn sample_member(&self, stream: u64) -> Result<GenMember> {
        let mut rng = RngStream::new(self.cfg.master_seed, stream);
        let latent =
            sample(&self.denoiser, &self.schedule, self.shape, IntegrationOrder::Heun, &mut rng)?;
        let map = self.codec.decode(&latent)?;
        let features = morph_features(&map);
        Ok(GenMember { map, features })
    }

    fn perturb_member(&self, seed: &LabelMap, psi: f64, stream: u64) -> Result<GenMember> {
        let mut rng = RngStream::new(self.cfg.master_seed, stream);
        let spec = PerturbSpec::new(psi)?;
        let map = perturb_edit(seed, &spec, &self.denoiser, &self.schedule, &self.codec, &mut rng)?;
        let features = morph_features(&map);
        Ok(GenMember { map, features })
    }

    fn local_edit_member(
        &self,
        seed: &LabelMap,
        mask: &LatentMask,
        stream: u64,
    ) -> Result<GenMember> {
        let mut rng = RngStream::new(self.cfg.master_seed, stream);
        let map = local_edit(
            seed,
            mask,
            &self.denoiser,
            &self.schedule,
            &self.codec,
            IntegrationOrder::Heun,
            &mut rng,
        )?;
        let features = morph_features(&map);
        Ok(GenMember { map, features })
    }

    /// Cohort report for synthetic members, compared against a reference
    /// feature set (the full reference cohort unless stated otherwise).
    fn report_against(
        &self,
        maps: &[LabelMap],
        features: &[MorphVector],
        reference: &[MorphVector],
    ) -> Result<CohortReport> {
        let violations = ViolationStats::from_reports(&check_cohort(maps));
        let real = FeatureCloud::from_features(reference, reference)?;
        let synth = FeatureCloud::from_features(features, reference)?;
        let (precision, recall) = precision_recall(&real, &synth, self.cfg.pr_k)?;
        let frechet = frechet_distance(&real, &synth)?;
        Ok(CohortReport {
            members: maps.len(),
            check_rate_pct: violations.check_rate_pct(),
            map_rate_pct: violations.map_rate_pct(),
            violations,
            precision,
            recall,
            frechet,
        })
    }

    // ── seed selection ──────────────────────────────────────────────────

    /// Pick one reference member per configured archetype rule: the member
    /// whose LV/RV volume percentiles fall inside the rule's bands, or —
    /// when the joint band is empty — the member closest to them. Ties break
    /// toward the lower member index, so selection is deterministic given
    /// the reference cohort.
    pub fn select_seeds(&self) -> Result<Vec<SelectedSeed>> {
        if self.reference.is_empty() {
            return Err(Error::EmptyCohort);
        }
        let lv = percentile_ranks(&self.reference.features, TissueId::Lv);
        let rv = percentile_ranks(&self.reference.features, TissueId::Rv);
        let mut seeds = Vec::with_capacity(self.cfg.seed_rules.len());
        for rule in &self.cfg.seed_rules {
            let mut best = (f64::INFINITY, 0usize);
            for i in 0..self.reference.len() {
                let score = band_distance(lv[i], rule.lv) + band_distance(rv[i], rule.rv);
                if score < best.0 {
                    best = (score, i);
                }
            }
            let index = best.1;
            seeds.push(SelectedSeed {
                rule: rule.name.clone(),
                index: Some(index),
                map: self.reference.maps[index].clone(),
            });
        }
        Ok(seeds)
    }

    // ── pipeline drivers ────────────────────────────────────────────────

    /// Sample an unconditional cohort of `cfg.cohort_size` members and
    /// report it against the reference. A size of zero yields an empty
    /// cohort and no report.
    pub fn run_unconditional(&self) -> Result<UnconditionalOutcome> {
        let n = self.cfg.cohort_size;
        let members =
            par_try(n, |i| self.sample_member(stream_index(Phase::Unconditional, 0, i)))?;
        let mut cohort = Cohort::new();
        let mut features = Vec::with_capacity(n);
        let mut rare = Vec::with_capacity(n);
        for (i, m) in members.into_iter().enumerate() {
            let stream = stream_index(Phase::Unconditional, 0, i);
            let prov = Provenance::new("sample", self.cfg.master_seed, stream)
                .with_params(json!({ "steps": self.cfg.steps }));
            rare.push(self.is_rare_sized(&m.features));
            features.push(m.features);
            cohort.push(m.map, prov)?;
        }
        let report = if cohort.is_empty() {
            None
        } else {
            Some(self.report_against(cohort.members(), &features, &self.reference.features)?)
        };
        Ok(UnconditionalOutcome { cohort, features, rare, report })
    }

    /// Re-noise each seed to every ψ on the grid and replay the tail of the
    /// ladder, `cfg.edit_cohort_size` members per (seed, ψ) cell.
    pub fn run_psi_sweep(&self, seeds: &[SelectedSeed]) -> Result<PsiSweepOutcome> {
        let per = self.cfg.edit_cohort_size;
        let mut runs = Vec::with_capacity(seeds.len() * self.cfg.psi_grid.len());
        for (si, seed) in seeds.iter().enumerate() {
            let seed_roundtrip = self.codec.decode(&self.codec.encode(&seed.map)?)?;
            let seed_heat = occupancy_heatmap_of(std::slice::from_ref(&seed_roundtrip))?;
            for (pi, &psi) in self.cfg.psi_grid.iter().enumerate() {
                let run_id = si * self.cfg.psi_grid.len() + pi;
                let members = par_try(per, |j| {
                    self.perturb_member(&seed.map, psi, stream_index(Phase::PsiSweep, run_id, j))
                })?;
                let mut cohort = Cohort::new();
                let mut features = Vec::with_capacity(per);
                for (j, m) in members.into_iter().enumerate() {
                    let stream = stream_index(Phase::PsiSweep, run_id, j);
                    let prov = Provenance::new("perturb-edit", self.cfg.master_seed, stream)
                        .with_seed_id(seed.id())
                        .with_params(json!({ "psi": psi }));
                    features.push(m.features);
                    cohort.push(m.map, prov)?;
                }
                let report =
                    self.report_against(cohort.members(), &features, &self.reference.features)?;
                let cohort_heat = occupancy_heatmap_of(cohort.members())?;
                let diff = heatmap_diff(&cohort_heat, &seed_heat)?;
                runs.push(PsiRun {
                    rule: seed.rule.clone(),
                    seed_index: seed.index,
                    psi,
                    cohort,
                    features,
                    report,
                    diff,
                    seed_features: morph_features(&seed_roundtrip),
                });
            }
        }
        Ok(PsiSweepOutcome { runs })
    }

    /// Localized edits: for each (seed, mask) pair, hold the mask's tissues
    /// fixed and resample the rest, `cfg.mask_cohort_size` members per pair.
    pub fn run_mask_sweep(&self, seeds: &[SelectedSeed]) -> Result<MaskSweepOutcome> {
        let per = self.cfg.mask_cohort_size;
        let mut runs = Vec::with_capacity(seeds.len() * self.cfg.masks.len());
        for (si, seed) in seeds.iter().enumerate() {
            let seed_roundtrip = self.codec.decode(&self.codec.encode(&seed.map)?)?;
            let seed_features = morph_features(&seed_roundtrip);
            for (mi, mask_cfg) in self.cfg.masks.iter().enumerate() {
                let spec = mask_cfg.to_spec()?;
                let mask = crate::editing::build_mask(&seed.map, &spec, &self.codec)?;
                let run_id = si * self.cfg.masks.len() + mi;
                let members = par_try(per, |j| {
                    self.local_edit_member(
                        &seed.map,
                        &mask,
                        stream_index(Phase::MaskSweep, run_id, j),
                    )
                })?;
                let mut cohort = Cohort::new();
                let mut features = Vec::with_capacity(per);
                for (j, m) in members.into_iter().enumerate() {
                    let stream = stream_index(Phase::MaskSweep, run_id, j);
                    let prov = Provenance::new("local-edit", self.cfg.master_seed, stream)
                        .with_seed_id(seed.id())
                        .with_params(json!({ "mask": mask_cfg.name }));
                    features.push(m.features);
                    cohort.push(m.map, prov)?;
                }
                let report =
                    self.report_against(cohort.members(), &features, &self.reference.features)?;
                runs.push(MaskRun {
                    rule: seed.rule.clone(),
                    seed_index: seed.index,
                    mask: mask_cfg.name.clone(),
                    preserved: spec.preserve().iter().copied().collect(),
                    cohort,
                    features,
                    seed_features,
                    report,
                });
            }
        }
        Ok(MaskSweepOutcome { runs })
    }

    /// The RV-volume filter threshold in ml: the explicit override if set,
    /// otherwise the configured quantile of the reference RV volumes
    /// (nearest-rank).
    pub fn filter_threshold_ml(&self) -> f64 {
        if let Some(ml) = self.cfg.threshold_ml {
            return ml;
        }
        let mut vols: Vec<f64> = self
            .reference
            .features
            .iter()
            .map(|f| f.volume_ml(TissueId::Rv))
            .collect();
        vols.sort_by(f64::total_cmp);
        quantile_nearest_rank(&vols, self.cfg.threshold_quantile)
    }

    /// Generate-and-filter augmentation: three strategies, each filtered to
    /// `cfg.augment_size` members with RV volume ≥ the threshold, each
    /// reported against the target sub-cohort (the reference members already
    /// past the threshold).
    pub fn run_augmentation(&self) -> Result<AugmentationOutcome> {
        let threshold = self.filter_threshold_ml();
        let target: Vec<usize> = (0..self.reference.len())
            .filter(|&i| self.reference.features[i].volume_ml(TissueId::Rv) >= threshold)
            .collect();
        if target.is_empty() {
            return Err(Error::Config(format!(
                "no reference member reaches the RV-volume threshold of {threshold:.3} ml"
            )));
        }
        let target_features: Vec<MorphVector> =
            target.iter().map(|&i| self.reference.features[i]).collect();
        let pass = |f: &MorphVector| f.volume_ml(TissueId::Rv) >= threshold;
        let needed = self.cfg.augment_size;

        // A: unconditional generation, then filter.
        let a = self.generate_filtered(needed, &pass, |i| {
            self.sample_member(stream_index(Phase::AugmentUnconditional, 0, i))
        })?;
        let a = self.strategy_outcome("augment-unconditional", a, &target_features, |i| {
            (Provenance::new("sample", self.cfg.master_seed,
                stream_index(Phase::AugmentUnconditional, 0, i)))
            .with_params(json!({ "filter_ml": threshold }))
        })?;

        // B: perturbational siblings of the target members, alternating
        // between a stronger and a weaker re-noise.
        let b_gen = |i: usize| {
            let psi = AUGMENT_PSI[i % AUGMENT_PSI.len()];
            let seed_pos = (i / AUGMENT_PSI.len()) % target.len();
            let seed = &self.reference.maps[target[seed_pos]];
            self.perturb_member(seed, psi, stream_index(Phase::AugmentPerturb, 0, i))
        };
        let b = self.generate_filtered(needed, &pass, b_gen)?;
        let b = self.strategy_outcome("augment-perturb", b, &target_features, |i| {
            let psi = AUGMENT_PSI[i % AUGMENT_PSI.len()];
            let seed_pos = (i / AUGMENT_PSI.len()) % target.len();
            Provenance::new("perturb-edit", self.cfg.master_seed,
                stream_index(Phase::AugmentPerturb, 0, i))
                .with_seed_id(format!("ref:{}", target[seed_pos]))
                .with_params(json!({ "psi": psi, "filter_ml": threshold }))
        })?;

        // C: localized siblings of the target members, cycling the masks.
        let n_masks = self.cfg.masks.len().max(1);
        let mut target_masks = Vec::with_capacity(target.len());
        for &ti in &target {
            let mut per_mask = Vec::with_capacity(n_masks);
            for mask_cfg in &self.cfg.masks {
                let spec = mask_cfg.to_spec()?;
                per_mask.push(crate::editing::build_mask(
                    &self.reference.maps[ti],
                    &spec,
                    &self.codec,
                )?);
            }
            target_masks.push(per_mask);
        }
        let c_gen = |i: usize| {
            let mask_pos = i % n_masks;
            let seed_pos = (i / n_masks) % target.len();
            self.local_edit_member(
                &self.reference.maps[target[seed_pos]],
                &target_masks[seed_pos][mask_pos],
                stream_index(Phase::AugmentLocal, 0, i),
            )
        };
        let c = self.generate_filtered(needed, &pass, c_gen)?;
        let c = self.strategy_outcome("augment-local", c, &target_features, |i| {
            let mask_pos = i % n_masks;
            let seed_pos = (i / n_masks) % target.len();
            Provenance::new("local-edit", self.cfg.master_seed,
                stream_index(Phase::AugmentLocal, 0, i))
                .with_seed_id(format!("ref:{}", target[seed_pos]))
                .with_params(json!({
                    "mask": self.cfg.masks.get(mask_pos).map(|m| m.name.as_str()),
                    "filter_ml": threshold,
                }))
        })?;

        Ok(AugmentationOutcome {
            threshold_ml: threshold,
            target,
            target_features,
            strategies: vec![a, b, c],
        })
    }

    /// Generate members until `needed` pass the filter, in chunks, stopping
    /// at a budget of [`FILTER_BUDGET_FACTOR`]× the request. Chunk
    /// boundaries and the kept set depend only on the config, never on
    /// worker count.
    fn generate_filtered(
        &self,
        needed: usize,
        pass: &(impl Fn(&MorphVector) -> bool + Sync),
        gen: impl Fn(usize) -> Result<GenMember> + Sync,
    ) -> Result<FilteredBatch> {
        let budget = needed * FILTER_BUDGET_FACTOR;
        let chunk = needed.max(32);
        let mut kept: Vec<(usize, GenMember)> = Vec::with_capacity(needed);
        let mut generated = 0;
        while kept.len() < needed && generated < budget {
            let end = (generated + chunk).min(budget);
            let batch = par_try(end - generated, |k| gen(generated + k))?;
            for (k, member) in batch.into_iter().enumerate() {
                if kept.len() < needed && pass(&member.features) {
                    kept.push((generated + k, member));
                }
            }
            generated = end;
        }
        if kept.len() < needed {
            return Err(Error::FilterYield { needed, got: kept.len(), budget });
        }
        Ok(FilteredBatch { kept, generated })
    }

    fn strategy_outcome(
        &self,
        name: &str,
        batch: FilteredBatch,
        target_features: &[MorphVector],
        prov: impl Fn(usize) -> Provenance,
    ) -> Result<StrategyOutcome> {
        let mut cohort = Cohort::new();
        let mut features = Vec::with_capacity(batch.kept.len());
        for (i, member) in batch.kept {
            features.push(member.features);
            cohort.push(member.map, prov(i))?;
        }
        let report = self.report_against(cohort.members(), &features, target_features)?;
        Ok(StrategyOutcome {
            name: name.to_string(),
            generated: batch.generated,
            cohort,
            features,
            report,
        })
    }

    /// Metric curves over ladder length and cohort size, one report row per
    /// grid point.
    pub fn run_sensitivity(&self) -> Result<SensitivityOutcome> {
        if self.cfg.steps_grid.is_empty() && self.cfg.size_grid.is_empty() {
            return Err(Error::Config("sensitivity grids are both empty".into()));
        }
        let mut rows = Vec::new();
        for (gi, &steps) in self.cfg.steps_grid.iter().enumerate() {
            let schedule = NoiseSchedule::build(&ScheduleConfig::with_steps(steps))?;
            let n = self.cfg.sensitivity_size;
            let members = par_try(n, |j| {
                let stream = stream_index(Phase::Sensitivity, gi, j);
                let mut rng = RngStream::new(self.cfg.master_seed, stream);
                let latent =
                    sample(&self.denoiser, &schedule, self.shape, IntegrationOrder::Heun, &mut rng)?;
                let map = self.codec.decode(&latent)?;
                let features = morph_features(&map);
                Ok(GenMember { map, features })
            })?;
            let (maps, features): (Vec<_>, Vec<_>) =
                members.into_iter().map(|m| (m.map, m.features)).unzip();
            let report = self.report_against(&maps, &features, &self.reference.features)?;
            rows.push(SensitivityRow { axis: SweepAxis::Steps, value: steps, report });
        }
        for (gi, &size) in self.cfg.size_grid.iter().enumerate() {
            let members = par_try(size, |j| {
                self.sample_member(stream_index(Phase::Sensitivity, SIZE_AXIS_RUN_BASE + gi, j))
            })?;
            let (maps, features): (Vec<_>, Vec<_>) =
                members.into_iter().map(|m| (m.map, m.features)).unzip();
            let report = self.report_against(&maps, &features, &self.reference.features)?;
            rows.push(SensitivityRow { axis: SweepAxis::Size, value: size, report });
        }
        Ok(SensitivityOutcome { rows })
    }
}

/// Generation budget for filtered strategies, as a multiple of the request.
pub const FILTER_BUDGET_FACTOR: usize = 10;

/// Re-noise strengths strategy B alternates between.
pub const AUGMENT_PSI: [f64; 2] = [0.5, 0.35];

/// Run-id offset separating the size axis from the steps axis in the
/// sensitivity phase's stream namespace.
const SIZE_AXIS_RUN_BASE: usize = 1000;

#[derive(Debug)]
struct GenMember {
    map: LabelMap,
    features: MorphVector,
}

#[derive(Debug)]
struct FilteredBatch {
    /// (generation index, member) for each kept member, in index order.
    kept: Vec<(usize, GenMember)>,
    /// Total members generated before the filter was satisfied.
    generated: usize,
}

// ── selection helpers ───────────────────────────────────────────────────

/// Percentile rank of each member's volume of `chamber`, tie-broken by
/// index; `0` is the smallest, `1` the largest, `0.5` for a singleton.
fn percentile_ranks(features: &[MorphVector], chamber: TissueId) -> Vec<f64> {
    let n = features.len();
    if n == 1 {
        return vec![0.5];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        f64::total_cmp(&features[a].volume_ml(chamber), &features[b].volume_ml(chamber))
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0.0; n];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos as f64 / (n - 1) as f64;
    }
    ranks
}

/// Distance from a percentile to a band's interval; zero inside it.
fn band_distance(pct: f64, band: Band) -> f64 {
    let (lo, hi) = band.interval();
    if pct < lo {
        lo - pct
    } else if pct > hi {
        pct - hi
    } else {
        0.0
    }
}

/// Nearest-rank quantile of an ascending-sorted slice.
fn quantile_nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// RV-volume split separating dominant-sized from rare-sized members: the
/// measured dominant mean shifted halfway (geometrically) toward the rare
/// mode. `None` when the configured modes do not differ enough in RV volume
/// to classify by it.
fn rare_split(population: &PopulationSpec, reference: &ReferenceSet) -> Option<f64> {
    let ratio = population.rare.rv_ellipsoid_volume_mean_ml()
        / population.dominant.rv_ellipsoid_volume_mean_ml();
    if !(ratio.is_finite() && ratio > 1.05) {
        return None;
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (f, &rare) in reference.features.iter().zip(&reference.rare) {
        if !rare {
            sum += f.volume_ml(TissueId::Rv);
            n += 1;
        }
    }
    if n > 0 {
        return Some(sum / n as f64 * ratio.sqrt());
    }
    // An all-rare draw: anchor on the measured rare mean instead.
    let mean_rare: f64 = reference
        .features
        .iter()
        .map(|f| f.volume_ml(TissueId::Rv))
        .sum::<f64>()
        / reference.len() as f64;
    Some(mean_rare / ratio.sqrt())
}

// ── outcome types ───────────────────────────────────────────────────────

/// A reference member chosen by an archetype rule (or supplied directly).
#[derive(Debug, Clone)]
pub struct SelectedSeed {
    /// Rule name, or a caller-chosen label for external seeds.
    pub rule: String,
    /// Reference-member index, when the seed came from the reference.
    pub index: Option<usize>,
    pub map: LabelMap,
}

impl SelectedSeed {
    /// Provenance label: `rule` or `rule:ref:<index>`.
    pub fn id(&self) -> String {
        match self.index {
            Some(i) => format!("{}:ref:{i}", self.rule),
            None => self.rule.clone(),
        }
    }
}

/// Violation statistics plus cohort-level fidelity metrics against a
/// reference feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub members: usize,
    pub violations: ViolationStats,
    /// Failed checks as a percentage of all checks run.
    pub check_rate_pct: f64,
    /// Percentage of members with at least one failed check.
    pub map_rate_pct: f64,
    pub precision: f64,
    pub recall: f64,
    /// Squared Fréchet distance between fitted feature Gaussians.
    pub frechet: f64,
}

/// Unconditional generation plus its report.
#[derive(Debug)]
pub struct UnconditionalOutcome {
    pub cohort: Cohort,
    pub features: Vec<MorphVector>,
    /// Per-member rare-mode classification by RV volume.
    pub rare: Vec<bool>,
    /// `None` when the cohort is empty.
    pub report: Option<CohortReport>,
}

impl UnconditionalOutcome {
    pub fn rare_count(&self) -> usize {
        self.rare.iter().filter(|&&r| r).count()
    }
}

/// One (seed, ψ) cell of the perturbation sweep.
#[derive(Debug)]
pub struct PsiRun {
    pub rule: String,
    pub seed_index: Option<usize>,
    pub psi: f64,
    pub cohort: Cohort,
    pub features: Vec<MorphVector>,
    /// Morphology of the codec-roundtripped seed.
    pub seed_features: MorphVector,
    pub report: CohortReport,
    /// Foreground-occupancy difference: cohort minus seed.
    pub diff: HeatmapDiff,
}

#[derive(Debug)]
pub struct PsiSweepOutcome {
    pub runs: Vec<PsiRun>,
}

/// One (seed, mask) cell of the localized-edit sweep.
#[derive(Debug)]
pub struct MaskRun {
    pub rule: String,
    pub seed_index: Option<usize>,
    pub mask: String,
    /// Tissues held fixed by the mask.
    pub preserved: Vec<TissueId>,
    pub cohort: Cohort,
    pub features: Vec<MorphVector>,
    /// Morphology of the codec-roundtripped seed.
    pub seed_features: MorphVector,
    pub report: CohortReport,
}

#[derive(Debug)]
pub struct MaskSweepOutcome {
    pub runs: Vec<MaskRun>,
}

/// One filtered augmentation strategy.
#[derive(Debug)]
pub struct StrategyOutcome {
    pub name: String,
    /// Members generated before the filter was satisfied.
    pub generated: usize,
    pub cohort: Cohort,
    pub features: Vec<MorphVector>,
    /// Report against the target sub-cohort.
    pub report: CohortReport,
}

#[derive(Debug)]
pub struct AugmentationOutcome {
    pub threshold_ml: f64,
    /// Reference indices of the target sub-cohort.
    pub target: Vec<usize>,
    pub target_features: Vec<MorphVector>,
    /// Unconditional-filter, perturbational, localized — in that order.
    pub strategies: Vec<StrategyOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Steps,
    Size,
}

/// One sensitivity grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub report: CohortReport,
}

#[derive(Debug)]
pub struct SensitivityOutcome {
    pub rows: Vec<SensitivityRow>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::EmpiricalDenoiser;
    use crate::phantom::ModeSpec;

    // ── block denoiser ──────────────────────────────────────────────────

    fn shape(ch: usize, dims: (usize, usize, usize)) -> LatentShape {
        LatentShape { channels: ch, dims, voxel_size: 1.0 }
    }

    fn latent(sh: LatentShape, values: Vec<f64>) -> Latent {
        Latent::from_values(sh, 0.0, values).unwrap()
    }

    #[test]
    fn partition_covers_every_cell_exactly_once() {
        for (dims, block) in [((5, 3, 2), 2), ((4, 4, 4), 4), ((6, 6, 6), 5), ((2, 2, 2), 7)] {
            let blocks = partition_blocks(dims, block);
            let mut seen = vec![0usize; dims.0 * dims.1 * dims.2];
            for cells in &blocks {
                for &c in cells {
                    seen[c] += 1;
                }
            }
            assert!(seen.iter().all(|&n| n == 1), "dims {dims:?} block {block}");
        }
    }

    #[test]
    fn whole_grid_block_with_unit_bandwidth_matches_the_plain_empirical_denoiser() {
        let sh = shape(2, (3, 2, 2));
        let mut rng = RngStream::new(51, 0);
        let data: Vec<Latent> =
            (0..4).map(|_| Latent::noise(sh, 1.0, &mut rng).unwrap()).collect();
        let blocky = BlockEmpiricalDenoiser::new(data.clone(), 3, 1.0).unwrap();
        assert_eq!(blocky.block_count(), 1);
        let plain = EmpiricalDenoiser::new(data).unwrap();
        let z = Latent::noise(sh, 1.3, &mut rng).unwrap();
        for sigma in [0.05, 0.7, 4.0] {
            let a = blocky.denoise(&z, sigma).unwrap();
            let b = plain.denoise(&z, sigma).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "sigma {sigma}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn single_member_dataset_returns_that_member_exactly() {
        let sh = shape(1, (4, 1, 1));
        let x = latent(sh, vec![0.3, -1.2, 5.0, 0.01]);
        let d = BlockEmpiricalDenoiser::new(vec![x.clone()], 2, 1.5).unwrap();
        let z = latent(sh, vec![9.0, -2.0, 0.0, 3.0]);
        let out = d.denoise(&z, 2.0).unwrap();
        assert_eq!(out.values(), x.values());
    }

    #[test]
    fn zero_sigma_returns_the_input_unchanged() {
        let sh = shape(1, (2, 2, 1));
        let x = latent(sh, vec![1.0, 2.0, 3.0, 4.0]);
        let d = BlockEmpiricalDenoiser::new(vec![x], 2, 1.0).unwrap();
        let z = latent(sh, vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(d.denoise(&z, 0.0).unwrap().values(), z.values());
    }

    #[test]
    fn tiny_sigma_snaps_each_block_to_its_nearest_member() {
        // Two members, two blocks of 2 cells along x. z sits near member 0
        // in the first block and near member 1 in the second: the output
        // must be the cross-stitched composition, exactly.
        let sh = shape(1, (4, 1, 1));
        let m0 = latent(sh, vec![0.0, 0.0, 0.0, 0.0]);
        let m1 = latent(sh, vec![1.0, 1.0, 1.0, 1.0]);
        let d = BlockEmpiricalDenoiser::new(vec![m0, m1], 2, 1.0).unwrap();
        assert_eq!(d.block_count(), 2);
        let z = latent(sh, vec![0.01, -0.02, 0.98, 1.03]);
        let out = d.denoise(&z, 1e-3).unwrap();
        assert_eq!(out.values(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn inflated_bandwidth_softens_responsibilities_toward_the_mean() {
        let sh = shape(1, (2, 1, 1));
        let m0 = latent(sh, vec![0.0, 0.0]);
        let m1 = latent(sh, vec![1.0, 1.0]);
        let z = latent(sh, vec![0.2, 0.2]); // closer to m0
        let sharp = BlockEmpiricalDenoiser::new(vec![m0.clone(), m1.clone()], 2, 1.0)
            .unwrap()
            .denoise(&z, 0.5)
            .unwrap();
        let soft = BlockEmpiricalDenoiser::new(vec![m0, m1], 2, 3.0)
            .unwrap()
            .denoise(&z, 0.5)
            .unwrap();
        // Larger bandwidth gives the far member more weight, pulling the
        // estimate toward the dataset mean of 0.5.
        assert!(soft.values()[0] > sharp.values()[0]);
        assert!(soft.values()[0] < 0.5);
    }

    #[test]
    fn block_denoiser_is_the_posterior_mean_of_the_blockwise_product_law() {
        // Data drawn as independent block choices: per block, pick one
        // member's content. The block denoiser is the exact posterior mean
        // of that product law, so its Monte-Carlo denoising loss must beat
        // the global empirical denoiser (which models only the joint
        // members), the identity, and the best constant.
        let sh = shape(2, (4, 1, 1));
        let mut rng = RngStream::new(52, 0);
        let data: Vec<Latent> =
            (0..3).map(|_| Latent::noise(sh, 1.0, &mut rng).unwrap()).collect();
        let block = BlockEmpiricalDenoiser::new(data.clone(), 2, 1.0).unwrap();
        let global = EmpiricalDenoiser::new(data.clone()).unwrap();
        let blocks = partition_blocks(sh.dims, 2);
        let sigma = 0.6;
        let draws = 4000;
        let mut mean = Latent::zeros(sh).unwrap();
        for x in &data {
            for (m, &v) in mean.values_mut().iter_mut().zip(x.values()) {
                *m += v / data.len() as f64;
            }
        }
        let (mut l_block, mut l_global, mut l_id, mut l_const) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..draws {
            // One clean draw from the product law.
            let mut clean = Latent::zeros(sh).unwrap();
            for cells in &blocks {
                let pick = rng.index(data.len());
                for c in 0..sh.channels {
                    let off = sh.spatial_len() * c;
                    for &s in cells {
                        clean.values_mut()[s + off] = data[pick].values()[s + off];
                    }
                }
            }
            let noisy = {
                let mut n = Latent::noise(sh, sigma, &mut rng).unwrap();
                for (nv, &cv) in n.values_mut().iter_mut().zip(clean.values()) {
                    *nv += cv;
                }
                n
            };
            l_block += block.denoise(&noisy, sigma).unwrap().distance_sq(&clean);
            l_global += global.denoise(&noisy, sigma).unwrap().distance_sq(&clean);
            l_id += noisy.distance_sq(&clean);
            l_const += mean.distance_sq(&clean);
        }
        assert!(l_block < l_global, "block {l_block} vs global {l_global}");
        assert!(l_block < l_id, "block {l_block} vs identity {l_id}");
        assert!(l_block < l_const, "block {l_block} vs constant {l_const}");
    }

    // ── selection helpers ───────────────────────────────────────────────

    #[test]
    fn percentile_ranks_order_members_and_break_ties_by_index() {
        let mut feats = vec![MorphVector([0.0; 12]); 4];
        // lv_volume_ml is feature 0.
        feats[0].0[0] = 5.0;
        feats[1].0[0] = 1.0;
        feats[2].0[0] = 5.0;
        feats[3].0[0] = 9.0;
        let ranks = percentile_ranks(&feats, TissueId::Lv);
        let third = 1.0 / 3.0;
        assert!((ranks[1] - 0.0).abs() < 1e-15);
        assert!((ranks[0] - third).abs() < 1e-15);
        assert!((ranks[2] - 2.0 * third).abs() < 1e-15, "tie broken toward index 0 first");
        assert!((ranks[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nearest_rank_quantile_matches_hand_values() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(quantile_nearest_rank(&v, 0.9), 9.0);
        assert_eq!(quantile_nearest_rank(&v, 0.95), 10.0);
        assert_eq!(quantile_nearest_rank(&v, 0.5), 5.0);
        assert_eq!(quantile_nearest_rank(&v, 0.05), 1.0);
        assert_eq!(quantile_nearest_rank(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn band_distance_is_zero_inside_and_linear_outside() {
        assert_eq!(band_distance(0.95, Band::High), 0.0);
        assert!((band_distance(0.7, Band::High) - 0.2).abs() < 1e-15);
        assert_eq!(band_distance(0.05, Band::Low), 0.0);
        assert!((band_distance(0.5, Band::Low) - 0.4).abs() < 1e-15);
        assert_eq!(band_distance(0.5, Band::Mid), 0.0);
    }

    // ── workbench pipelines (small configs) ─────────────────────────────

    fn quick_cfg() -> ExperimentConfig {
        ExperimentConfig {
            master_seed: 11,
            reference_size: 24,
            cohort_size: 16,
            edit_cohort_size: 16,
            mask_cohort_size: 16,
            augment_size: 14,
            sensitivity_size: 14,
            steps: 12,
            psi_grid: vec![0.4, 1.0],
            steps_grid: vec![8],
            size_grid: vec![14],
            threshold_quantile: 0.4,
            ..Default::default()
        }
    }

    #[test]
    fn workbench_reference_is_deterministic_and_classified_consistently() {
        let a = Workbench::new(quick_cfg()).unwrap();
        let b = Workbench::new(quick_cfg()).unwrap();
        assert_eq!(a.reference.len(), 24);
        for (x, y) in a.reference.maps.iter().zip(&b.reference.maps) {
            assert_eq!(x.bytes(), y.bytes());
        }
        assert_eq!(a.reference.rare, b.reference.rare);
        // The RV-volume classifier agrees with the ground-truth mode flags.
        for (f, &rare) in a.reference.features.iter().zip(&a.reference.rare) {
            assert_eq!(a.is_rare_sized(f), rare);
        }
    }

    #[test]
    fn size_zero_yields_an_empty_cohort_and_no_report() {
        let cfg = ExperimentConfig { cohort_size: 0, ..quick_cfg() };
        let wb = Workbench::new(cfg).unwrap();
        let out = wb.run_unconditional().unwrap();
        assert!(out.cohort.is_empty());
        assert!(out.report.is_none());
    }

    #[test]
    fn point_mass_population_collapses_sampling_onto_one_anatomy() {
        let mode = ModeSpec::dominant().frozen();
        let cfg = ExperimentConfig {
            population: PopulationSpec {
                dominant: mode.clone(),
                rare: mode,
                rare_weight: 0.0,
                jitter_scale: 0.0,
            },
            reference_size: 16,
            cohort_size: 16,
            ..quick_cfg()
        };
        let wb = Workbench::new(cfg).unwrap();
        let out = wb.run_unconditional().unwrap();
        let first = out.cohort.get(0).unwrap();
        for m in out.cohort.iter() {
            assert_eq!(m.bytes(), first.bytes());
        }
        let report = out.report.unwrap();
        assert_eq!(report.recall, 1.0);
        assert_eq!(report.precision, 1.0);
        assert!(report.frechet.abs() <= 1e-9);
    }

    #[test]
    fn unconditional_cohort_under_represents_the_rare_mode() {
        let cfg = ExperimentConfig {
            reference_size: 60,
            cohort_size: 150,
            ..quick_cfg()
        };
        let wb = Workbench::new(cfg).unwrap();
        let out = wb.run_unconditional().unwrap();
        // One-sided binomial bound at α = 0.05 for p = 0.1, n = 150: mean 15,
        // σ = √13.5 ≈ 3.67, so counts above 21 would contradict
        // at-or-below-weight occupancy.
        assert!(out.rare_count() <= 21, "rare count {}", out.rare_count());
        assert!(out.report.is_some());
    }

    #[test]
    fn seed_selection_is_deterministic_and_respects_bands() {
        let wb = Workbench::new(quick_cfg()).unwrap();
        let seeds = wb.select_seeds().unwrap();
        assert_eq!(seeds.len(), 4);
        let again = wb.select_seeds().unwrap();
        for (a, b) in seeds.iter().zip(&again) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.rule, b.rule);
        }
        // The high-RV rules must pick members with larger RV volume than
        // the low-RV rules.
        let vol = |s: &SelectedSeed| {
            wb.reference.features[s.index.unwrap()].volume_ml(TissueId::Rv)
        };
        assert!(vol(&seeds[0]) > vol(&seeds[1]), "lv_hi_rv_hi vs lv_hi_rv_lo");
        assert!(vol(&seeds[2]) > vol(&seeds[3]), "lv_lo_rv_hi vs lv_lo_rv_lo");
    }

    #[test]
    fn vanishing_psi_reproduces_the_roundtripped_seed() {
        let cfg = ExperimentConfig {
            psi_grid: vec![0.02],
            edit_cohort_size: 14,
            ..quick_cfg()
        };
        let wb = Workbench::new(cfg).unwrap();
        let seeds = wb.select_seeds().unwrap();
        let out = wb.run_psi_sweep(&seeds[..1]).unwrap();
        let seed_rt = wb
            .codec
            .decode(&wb.codec.encode(&seeds[0].map).unwrap())
            .unwrap();
        for m in out.runs[0].cohort.iter() {
            assert_eq!(m.bytes(), seed_rt.bytes(), "ψ→0 must return the seed round-trip");
        }
    }

    #[test]
    fn full_psi_regeneration_matches_the_unconditional_distribution() {
        // ψ = 1 replays the whole ladder from (clean + σ_max·noise); the
        // clean offset is a 1e-2-relative perturbation of the start state,
        // so per-chamber volume means must agree with unconditional
        // sampling. Two-sample z-test on LV and RV volume at α = 0.01.
        let cfg = ExperimentConfig {
            psi_grid: vec![1.0],
            edit_cohort_size: 60,
            cohort_size: 60,
            reference_size: 30,
            ..quick_cfg()
        };
        let wb = Workbench::new(cfg).unwrap();
        let seeds = wb.select_seeds().unwrap();
        let sweep = wb.run_psi_sweep(&seeds[..1]).unwrap();
        let uncond = wb.run_unconditional().unwrap();
        for chamber in [TissueId::Lv, TissueId::Rv] {
            let a: Vec<f64> =
                sweep.runs[0].features.iter().map(|f| f.volume_ml(chamber)).collect();
            let b: Vec<f64> =
                uncond.features.iter().map(|f| f.volume_ml(chamber)).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let var = |v: &[f64], m: f64| {
                v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
            };
            let (ma, mb) = (mean(&a), mean(&b));
            let se = (var(&a, ma) / a.len() as f64 + var(&b, mb) / b.len() as f64).sqrt();
            let z = (ma - mb) / se;
            assert!(z.abs() < 2.576, "{chamber:?}: z = {z}");
        }
    }

    #[test]
    fn psi_spread_grows_from_weak_to_full_perturbation() {
        let cfg = ExperimentConfig {
            psi_grid: vec![0.35, 1.0],
            edit_cohort_size: 24,
            ..quick_cfg()
        };
        let wb = Workbench::new(cfg).unwrap();
        let seeds = wb.select_seeds().unwrap();
        let out = wb.run_psi_sweep(&seeds[..1]).unwrap();
        let spread = |run: &PsiRun| {
            let cloud =
                FeatureCloud::from_features(&run.features, &wb.reference.features).unwrap();
            let rows = cloud.rows();
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..rows.len() {
                for j in (i + 1)..rows.len() {
                    let d2: f64 = rows[i]
                        .iter()
                        .zip(&rows[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    sum += d2.sqrt();
                    pairs += 1;
                }
            }
            sum / pairs as f64
        };
        assert!(
            spread(&out.runs[1]) > spread(&out.runs[0]),
            "ψ=1 spread {} must exceed ψ=0.35 spread {}",
            spread(&out.runs[1]),
            spread(&out.runs[0])
        );
    }

    #[test]
    fn grid_covering_mask_reproduces_the_seed_exactly() {
        // Preserving every chamber plus the tube with enough dilation marks
        // the whole latent grid, so the "edit" must return the seed
        // round-trip bit-exactly for every member.
        let cfg = ExperimentConfig {
            masks: vec![crate::config::MaskEditConfig {
                name: "hold-everything".into(),
                preserve: ["LV", "RV", "LA", "RA", "Ao"].map(String::from).to_vec(),
                dilation_rounds: 8,
            }],
            mask_cohort_size: 14,
            ..quick_cfg()
        };
        let wb = Workbench::new(cfg).unwrap();
        let seeds = wb.select_seeds().unwrap();
        let spec = wb.cfg.masks[0].to_spec().unwrap();
        let mask = crate::editing::build_mask(&seeds[0].map, &spec, &wb.codec).unwrap();
        assert!(mask.all(), "8 dilation rounds must flood the 8³ latent grid");
        let out = wb.run_mask_sweep(&seeds[..1]).unwrap();
        let seed_rt = wb
            .codec
            .decode(&wb.codec.encode(&seeds[0].map).unwrap())
            .unwrap();
        for m in out.runs[0].cohort.iter() {
            assert_eq!(m.bytes(), seed_rt.bytes());
        }
    }

    #[test]
    fn lv_edit_preserves_the_other_chambers_and_varies_the_lv() {
        let cfg = ExperimentConfig {
            masks: vec![ExperimentConfig::default().masks[0].clone()], // edit-lv
            mask_cohort_size: 20,
            ..quick_cfg()
        };
        let wb = Workbench::new(cfg).unwrap();
        let seeds = wb.select_seeds().unwrap();
        let out = wb.run_mask_sweep(&seeds[..1]).unwrap();
        let run = &out.runs[0];
        for kept in [TissueId::Rv, TissueId::Ra, TissueId::La] {
            let seed_vol = run.seed_features.volume_ml(kept);
            for f in &run.features {
                let dev = (f.volume_ml(kept) - seed_vol).abs() / seed_vol;
                assert!(dev <= 0.05, "{kept:?} volume drifted {:.1}%", 100.0 * dev);
            }
        }
        let lv: Vec<f64> = run.features.iter().map(|f| f.volume_ml(TissueId::Lv)).collect();
        let mean = lv.iter().sum::<f64>() / lv.len() as f64;
        let var = lv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (lv.len() - 1) as f64;
        assert!(var.sqrt() > 0.0, "edited LV volumes must vary");
    }

    #[test]
    fn rv_edit_on_a_rare_seed_reverts_toward_the_dominant_mode() {
        let cfg = ExperimentConfig {
            masks: vec![ExperimentConfig::default().masks[1].clone()], // edit-rv
            mask_cohort_size: 20,
            reference_size: 40,
            ..quick_cfg()
        };
        let wb = Workbench::new(cfg).unwrap();
        let seeds = wb.select_seeds().unwrap();
        // lv_lo_rv_hi: a rare-mode (large RV) seed.
        let rare_seed = seeds.into_iter().find(|s| s.rule == "lv_lo_rv_hi").unwrap();
        let seed_rv = wb.reference.features[rare_seed.index.unwrap()].volume_ml(TissueId::Rv);
        assert!(
            wb.is_rare_sized(&wb.reference.features[rare_seed.index.unwrap()]),
            "the high-RV rule should land on a rare member"
        );
        let out = wb.run_mask_sweep(std::slice::from_ref(&rare_seed)).unwrap();
        let mean_rv = out.runs[0]
            .features
            .iter()
            .map(|f| f.volume_ml(TissueId::Rv))
            .sum::<f64>()
            / out.runs[0].features.len() as f64;
        assert!(
            mean_rv < seed_rv,
            "resampled RV mean {mean_rv:.3} ml should fall below the rare seed's {seed_rv:.3} ml"
        );
    }

    #[test]
    fn augmentation_respects_the_filter_and_reports_against_the_target() {
        let wb = Workbench::new(quick_cfg()).unwrap();
        let out = wb.run_augmentation().unwrap();
        assert_eq!(out.strategies.len(), 3);
        assert!(out.threshold_ml > 0.0);
        assert!(!out.target.is_empty());
        for strat in &out.strategies {
            assert_eq!(strat.cohort.len(), wb.cfg.augment_size);
            for f in &strat.features {
                assert!(f.volume_ml(TissueId::Rv) >= out.threshold_ml);
            }
            assert!(strat.generated >= strat.cohort.len());
        }
    }

    #[test]
    fn explicit_threshold_overrides_the_quantile() {
        let cfg = ExperimentConfig { threshold_ml: Some(0.123), ..quick_cfg() };
        let wb = Workbench::new(cfg).unwrap();
        assert_eq!(wb.filter_threshold_ml(), 0.123);
    }

    #[test]
    fn impossible_filter_reports_yield_within_budget() {
        let wb = Workbench::new(ExperimentConfig { augment_size: 4, ..quick_cfg() }).unwrap();
        let err = wb
            .generate_filtered(4, &|_: &MorphVector| false, |i| {
                wb.sample_member(stream_index(Phase::AugmentUnconditional, 9, i))
            })
            .unwrap_err();
        match err {
            Error::FilterYield { needed, got, budget } => {
                assert_eq!((needed, got, budget), (4, 0, 40));
            }
            other => panic!("expected FilterYield, got {other:?}"),
        }
    }

    #[test]
    fn permissive_filter_keeps_the_first_members() {
        let wb = Workbench::new(ExperimentConfig { augment_size: 4, ..quick_cfg() }).unwrap();
        let batch = wb
            .generate_filtered(4, &|_: &MorphVector| true, |i| {
                wb.sample_member(stream_index(Phase::AugmentUnconditional, 9, i))
            })
            .unwrap();
        let indices: Vec<usize> = batch.kept.iter().map(|(i, _)| *i).collect();
        assert_eq!(indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn sensitivity_emits_one_row_per_grid_point() {
        let cfg = ExperimentConfig {
            steps_grid: vec![8],
            size_grid: vec![14],
            ..quick_cfg()
        };
        let wb = Workbench::new(cfg).unwrap();
        let out = wb.run_sensitivity().unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.rows[0].axis, SweepAxis::Steps);
        assert_eq!(out.rows[0].value, 8);
        assert_eq!(out.rows[1].axis, SweepAxis::Size);
        assert_eq!(out.rows[1].report.members, 14);
        let empty = ExperimentConfig { steps_grid: vec![], size_grid: vec![], ..quick_cfg() };
        let wb = Workbench::new(empty).unwrap();
        assert!(matches!(wb.run_sensitivity(), Err(Error::Config(_))));
    }

    /// Best non-increasing fit by pool-adjacent-violators, returned with its
    /// root-mean-square residual.
    fn antitonic_rms_residual(values: &[f64]) -> f64 {
        // PAV on the negated sequence gives the non-increasing fit.
        let mut pools: Vec<(f64, usize)> = Vec::new(); // (pool mean of -v, count)
        for &v in values {
            pools.push((-v, 1));
            while pools.len() >= 2 {
                let (m2, c2) = pools[pools.len() - 1];
                let (m1, c1) = pools[pools.len() - 2];
                if m1 <= m2 {
                    break;
                }
                pools.pop();
                pools.pop();
                let c = c1 + c2;
                pools.push(((m1 * c1 as f64 + m2 * c2 as f64) / c as f64, c));
            }
        }
        let mut fit = Vec::with_capacity(values.len());
        for (m, c) in pools {
            fit.extend(std::iter::repeat(-m).take(c));
        }
        let ss: f64 = values.iter().zip(&fit).map(|(v, f)| (v - f) * (v - f)).sum();
        (ss / values.len() as f64).sqrt()
    }

    #[test]
    fn frechet_distance_is_non_increasing_in_steps_up_to_noise() {
        let cfg = ExperimentConfig {
            steps_grid: vec![3, 6, 12, 24],
            size_grid: vec![],
            sensitivity_size: 20,
            ..quick_cfg()
        };
        let wb = Workbench::new(cfg).unwrap();
        let out = wb.run_sensitivity().unwrap();
        let fd: Vec<f64> = out.rows.iter().map(|r| r.report.frechet).collect();
        assert!(
            fd.last().unwrap() < fd.first().unwrap(),
            "coarsest ladder should score worst: {fd:?}"
        );
        let spread = fd.first().unwrap() - fd.last().unwrap();
        let residual = antitonic_rms_residual(&fd);
        assert!(
            residual <= 0.25 * spread,
            "steps trend too noisy: residual {residual:.4} vs spread {spread:.4} ({fd:?})"
        );
    }

    #[test]
    fn recall_standard_error_shrinks_with_cohort_size() {
        let cfg = ExperimentConfig { steps_grid: vec![], size_grid: vec![14, 56], ..quick_cfg() };
        let wb = Workbench::new(cfg).unwrap();
        let out = wb.run_sensitivity().unwrap();
        let real =
            FeatureCloud::from_features(&wb.reference().features, &wb.reference().features)
                .unwrap();
        let mut se = Vec::new();
        for (gi, row) in out.rows.iter().enumerate() {
            // Regenerate the row's cohort from the same streams, proving the
            // stream layout, then bootstrap the synthetic side of the recall.
            let members = par_try(row.value, |j| {
                wb.sample_member(stream_index(Phase::Sensitivity, SIZE_AXIS_RUN_BASE + gi, j))
            })
            .unwrap();
            let features: Vec<_> = members.iter().map(|m| m.features.clone()).collect();
            let synth = FeatureCloud::from_features(&features, &wb.reference().features).unwrap();
            let (_, recall) = precision_recall(&real, &synth, wb.cfg.pr_k).unwrap();
            assert!((recall - row.report.recall).abs() < 1e-12, "stream drift on row {gi}");
            let mut rng = RngStream::new(97, gi as u64);
            let n = synth.rows().len();
            let reps: Vec<f64> = (0..200)
                .map(|_| {
                    let rows: Vec<Vec<f64>> =
                        (0..n).map(|_| synth.rows()[rng.index(n)].clone()).collect();
                    let boot = FeatureCloud::from_rows(rows).unwrap();
                    precision_recall(&real, &boot, wb.cfg.pr_k).unwrap().1
                })
                .collect();
            let mean = reps.iter().sum::<f64>() / reps.len() as f64;
            let var =
                reps.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (reps.len() - 1) as f64;
            se.push(var.sqrt());
        }
        assert!(
            se[1] < se[0],
            "bootstrap SE should shrink: size 14 gives {:.4}, size 56 gives {:.4}",
            se[0],
            se[1]
        );
    }

    #[test]
    fn pipelines_are_bit_reproducible_across_worker_counts() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let wb = Workbench::new(quick_cfg()).unwrap();
                let uncond = wb.run_unconditional().unwrap();
                let seeds = wb.select_seeds().unwrap();
                let sweep = wb.run_psi_sweep(&seeds[..1]).unwrap();
                let bytes: Vec<Vec<u8>> = uncond
                    .cohort
                    .iter()
                    .chain(sweep.runs.iter().flat_map(|r| r.cohort.iter()))
                    .map(|m| m.bytes().to_vec())
                    .collect();
                (bytes, uncond.report.unwrap(), sweep.runs[0].report.clone())
            })
        };
        let (bytes1, rep1, sweep1) = run(1);
        let (bytes4, rep4, sweep4) = run(4);
        assert_eq!(bytes1, bytes4);
        assert_eq!(rep1, rep4);
        assert_eq!(sweep1, sweep4);
    }
}

