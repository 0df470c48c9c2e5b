//! Command-line front end: generate, edit, evaluate, and scan cardiac-style
//! label-map cohorts from one reproducible experiment configuration.
//!
//! Every subcommand writes a self-contained results directory: a snapshot of
//! the effective config, the volumes it produced, metrics as CSV and JSON,
//! PNG slice renderings, a human-readable summary, and a manifest listing
//! every file with per-member provenance. Directories are append-only — a
//! command refuses to write into an existing path, so a finished run is
//! never silently overwritten, and no command mutates its inputs.
//!
//! Reproducibility: `--seed` pins the master seed, and output bytes are
//! independent of `--workers` (or the `CARDIOSYNTH_WORKERS` environment
//! variable), so the same invocation always produces the same directory.
//! Failures print one machine-parsable line, `error[<code>]: <message>`, and
//! exit nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cardiosynth::analytics::{
    frechet_distance, occupancy_heatmap, occupancy_heatmap_of, precision_recall, FeatureCloud,
    Heatmap,
};
use cardiosynth::io::{self, Manifest};
use cardiosynth::morphometry::{morph_features, MorphVector};
use cardiosynth::pipelines::{stream_index, CohortReport, Phase, SweepAxis};
use cardiosynth::topology::{check_cohort, ViolationStats, CHECK_NAMES};
use cardiosynth::{
    Cohort, Error, ExperimentConfig, LabelMap, Provenance, Result, Workbench,
};

// ── argument surface ────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "cardiosynth",
    version,
    about = "Generate, edit, and evaluate 3-D cardiac label-map cohorts",
    propagate_version = true
)]
struct Cli {
    /// Experiment config TOML; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed override (wins over the config file).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads; default $CARDIOSYNTH_WORKERS, then all cores.
    /// Output bytes do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rasterize a reference phantom cohort and report its topology.
    PhantomGen {
        /// Fresh directory to write results into.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of phantoms (default: the config's reference size).
        #[arg(long, value_name = "N")]
        count: Option<usize>,
        /// Write codec round-trips instead of raw rasterizations, so the
        /// cohort is directly comparable to sampled cohorts (which only
        /// exist behind the codec).
        #[arg(long)]
        roundtrip: bool,
    },
    /// Sample an unconditional synthetic cohort and report it.
    Sample {
        /// Fresh directory to write results into.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Cohort size (default: the config's cohort size).
        #[arg(long, value_name = "N")]
        count: Option<usize>,
        /// Sampler ladder length (default: the config's steps).
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
    },
    /// Re-noise and re-denoise archetype seeds over the psi grid.
    PerturbEdit {
        /// Fresh directory to write results into.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Members per (seed, psi) cohort.
        #[arg(long, value_name = "N")]
        count: Option<usize>,
        /// Psi grid override; repeatable (e.g. --psi 0.35 --psi 1.0).
        #[arg(long, value_name = "PSI")]
        psi: Vec<f64>,
    },
    /// Resample archetype seeds outside each mask's preserved region.
    LocalEdit {
        /// Fresh directory to write results into.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Members per (seed, mask) cohort.
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Compare two cohort directories: topology, precision/recall, Fréchet.
    Evaluate {
        /// Directory holding the reference cohort.
        #[arg(long, value_name = "DIR")]
        real: PathBuf,
        /// Directory holding the cohort under evaluation.
        #[arg(long, value_name = "DIR")]
        synth: PathBuf,
        /// Fresh directory to write results into.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Build the three filtered large-RV augmentation cohorts.
    Augment {
        /// Fresh directory to write results into.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Members per strategy (default: the config's augment size).
        #[arg(long, value_name = "N")]
        count: Option<usize>,
        /// Absolute RV-volume filter threshold in ml (default: the
        /// config's reference quantile).
        #[arg(long, value_name = "ML")]
        threshold_ml: Option<f64>,
    },
    /// Scan sampler steps and cohort size, emitting metric curves.
    Sweep {
        /// Fresh directory to write results into.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

// ── entry point ─────────────────────────────────────────────────────────

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_workers(cli.workers);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::PhantomGen { out, count, roundtrip } => phantom_gen(cfg, out, *count, *roundtrip),
        Cmd::Sample { out, count, steps } => sample(cfg, out, *count, *steps),
        Cmd::PerturbEdit { out, count, psi } => perturb_edit(cfg, out, *count, psi),
        Cmd::LocalEdit { out, count } => local_edit(cfg, out, *count),
        Cmd::Evaluate { real, synth, out } => evaluate(cfg, real, synth, out),
        Cmd::Augment { out, count, threshold_ml } => augment(cfg, out, *count, *threshold_ml),
        Cmd::Sweep { out } => sweep(cfg, out),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

/// Pick the worker count: flag, then environment, then rayon's default.
/// Results never depend on it, so a failure to install the pool (possible
/// only if one is already running) is ignored.
fn init_workers(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("CARDIOSYNTH_WORKERS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        if n >= 1 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

// ── results directories ─────────────────────────────────────────────────

/// A results directory under construction. Files are recorded as they are
/// written; `finish` seals the directory with the summary and manifest.
struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Create a fresh directory and snapshot the effective config into it.
    /// Refuses to touch an existing path: results are append-only.
    fn create(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        if root.exists() {
            return Err(Error::Config(format!(
                "results directory {} already exists; runs never overwrite — pick a fresh path",
                root.display()
            )));
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut dir = RunDir { root: root.to_path_buf(), manifest: Manifest::new(cfg.hash()?) };
        cfg.save(&dir.root.join("config.toml"))?;
        dir.manifest.push("config.toml", "config");
        Ok(dir)
    }

    /// Ensure a subdirectory exists.
    fn subdir(&self, rel: &str) -> Result<()> {
        let full = self.root.join(rel);
        fs::create_dir_all(&full).map_err(|e| Error::io(&full, e))
    }

    /// Record a produced file and return its full path for writing.
    fn file(&mut self, rel: &str, kind: &str) -> PathBuf {
        self.manifest.push(rel, kind);
        self.root.join(rel)
    }

    /// Write one cohort: volumes under `sub/`, its occupancy heatmap, and a
    /// mid-plane PNG; provenance goes into the manifest.
    fn write_cohort(&mut self, sub: &str, cohort: &Cohort) -> Result<()> {
        self.subdir(sub)?;
        for (i, map) in cohort.iter().enumerate() {
            let rel = format!("{sub}/member_{i:04}.cvol");
            io::write_labelmap(self.file(&rel, "labelmap"), map)?;
        }
        self.manifest.provenance.extend_from_slice(cohort.provenance());
        if !cohort.is_empty() {
            let heat = occupancy_heatmap(cohort)?;
            let rel = format!("{sub}/occupancy.cvol");
            io::write_heatmap(self.file(&rel, "heatmap"), &heat)?;
            self.write_heatmap_png(&format!("{sub}/occupancy_mid.png"), &heat)?;
        }
        Ok(())
    }

    fn write_heatmap_png(&mut self, rel: &str, heat: &Heatmap) -> Result<()> {
        let img = io::heatmap_slice_image(heat, heat.dims().2 / 2)?;
        io::save_png(self.file(rel, "png"), &img)
    }

    fn write_json<T: serde::Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        io::write_json(self.file(rel, "json"), value)
    }

    fn write_csv(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.file(rel, "csv");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Seal the directory: summary, then the manifest itself.
    fn finish(mut self, summary: &str) -> Result<()> {
        let path = self.file("summary.txt", "text");
        fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
        self.manifest.save(self.root.join("manifest.json"))
    }
}

// ── CSV assembly ────────────────────────────────────────────────────────

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Shared metric columns: the twelve per-check failure counts, the two
/// violation rates, and the cohort-fidelity metrics.
fn metric_columns() -> String {
    let mut cols: Vec<String> = CHECK_NAMES.iter().map(|s| s.to_string()).collect();
    cols.extend(
        ["check_rate_pct", "map_rate_pct", "precision", "recall", "frechet"].map(String::from),
    );
    cols.join(",")
}

fn metric_fields(r: &CohortReport) -> String {
    let mut fields: Vec<String> =
        r.violations.per_check_failures.iter().map(|n| n.to_string()).collect();
    for v in [r.check_rate_pct, r.map_rate_pct, r.precision, r.recall, r.frechet] {
        fields.push(v.to_string());
    }
    fields.join(",")
}

fn report_csv(rows: &[(String, &CohortReport)]) -> String {
    let mut text = format!("cohort,members,{}\n", metric_columns());
    for (label, r) in rows {
        text.push_str(&format!("{},{},{}\n", csv_escape(label), r.members, metric_fields(r)));
    }
    text
}

fn violations_line(v: &ViolationStats) -> String {
    format!(
        "{} maps, {} failed checks ({:.2}% of checks, {:.2}% of maps affected)",
        v.maps,
        v.failed_checks,
        v.check_rate_pct(),
        v.map_rate_pct()
    )
}

fn report_lines(label: &str, r: &CohortReport) -> String {
    format!(
        "{label}: {} members\n  violations: {}\n  precision {:.4}, recall {:.4}, frechet {:.6}\n",
        r.members,
        violations_line(&r.violations),
        r.precision,
        r.recall,
        r.frechet
    )
}

// ── subcommands ─────────────────────────────────────────────────────────

fn phantom_gen(
    mut cfg: ExperimentConfig,
    out: &Path,
    count: Option<usize>,
    roundtrip: bool,
) -> Result<()> {
    if let Some(n) = count {
        cfg.reference_size = n;
    }
    let wb = Workbench::new(cfg)?;
    let reference = wb.reference();
    let maps = if roundtrip { &reference.roundtrip } else { &reference.maps };
    let label = if roundtrip { "phantom (codec round-trip)" } else { "phantom" };
    let mut dir = RunDir::create(out, wb.cfg())?;

    let mut cohort = Cohort::new();
    for (i, map) in maps.iter().enumerate() {
        let prov = Provenance::new(
            "phantom",
            wb.cfg().master_seed,
            stream_index(Phase::Reference, 0, i),
        )
        .with_params(serde_json::json!({ "rare": reference.rare[i], "roundtrip": roundtrip }));
        cohort.push(map.clone(), prov)?;
    }
    dir.write_cohort("volumes", &cohort)?;

    let mid = maps[0].dims().2 / 2;
    let img = io::labelmap_slice_image(&maps[0], mid)?;
    io::save_png(dir.file("volumes/member_0000_mid.png", "png"), &img)?;

    let stats = ViolationStats::from_reports(&check_cohort(maps));
    let rare = reference.rare.iter().filter(|&&r| r).count();
    dir.write_json(
        "report.json",
        &serde_json::json!({
            "members": maps.len(),
            "rare_members": rare,
            "roundtrip": roundtrip,
            "violations": stats,
        }),
    )?;
    let mut csv =
        format!("cohort,members,{},check_rate_pct,map_rate_pct\n", CHECK_NAMES.join(","));
    let fields: Vec<String> = stats.per_check_failures.iter().map(|n| n.to_string()).collect();
    csv.push_str(&format!(
        "phantom,{},{},{},{}\n",
        stats.maps,
        fields.join(","),
        stats.check_rate_pct(),
        stats.map_rate_pct()
    ));
    dir.write_csv("metrics.csv", &csv)?;

    dir.finish(&format!(
        "{label} reference cohort\n  members: {} ({} rare-mode)\n  topology: {}\n",
        maps.len(),
        rare,
        violations_line(&stats)
    ))
}

fn sample(
    mut cfg: ExperimentConfig,
    out: &Path,
    count: Option<usize>,
    steps: Option<usize>,
) -> Result<()> {
    if let Some(n) = count {
        cfg.cohort_size = n;
    }
    if let Some(n) = steps {
        cfg.steps = n;
    }
    let wb = Workbench::new(cfg)?;
    let outcome = wb.run_unconditional()?;
    let mut dir = RunDir::create(out, wb.cfg())?;
    dir.write_cohort("volumes", &outcome.cohort)?;

    let mut summary = format!(
        "unconditional cohort\n  members: {} ({} classified rare-sized)\n",
        outcome.cohort.len(),
        outcome.rare_count()
    );
    match &outcome.report {
        Some(report) => {
            dir.write_csv("metrics.csv", &report_csv(&[("unconditional".into(), report)]))?;
            dir.write_json(
                "report.json",
                &serde_json::json!({ "rare_members": outcome.rare_count(), "report": report }),
            )?;
            summary.push_str(&report_lines("unconditional", report));
        }
        None => summary.push_str("  empty cohort: no report\n"),
    }
    dir.finish(&summary)
}

fn perturb_edit(
    mut cfg: ExperimentConfig,
    out: &Path,
    count: Option<usize>,
    psi: &[f64],
) -> Result<()> {
    if let Some(n) = count {
        cfg.edit_cohort_size = n;
    }
    if !psi.is_empty() {
        cfg.psi_grid = psi.to_vec();
    }
    let wb = Workbench::new(cfg)?;
    let seeds = wb.select_seeds()?;
    let outcome = wb.run_psi_sweep(&seeds)?;
    let mut dir = RunDir::create(out, wb.cfg())?;

    let mut rows = Vec::new();
    let mut summary = String::from("perturbational edits\n");
    let mut json_rows = Vec::new();
    for run in &outcome.runs {
        let label = format!("{}:psi={}", run.rule, run.psi);
        let sub = format!("runs/{}_psi{}", run.rule, run.psi);
        dir.write_cohort(&sub, &run.cohort)?;
        let diff = io::diff_slice_image(&run.diff, run.diff.dims().2 / 2)?;
        io::save_png(dir.file(&format!("{sub}/diff_mid.png"), "png"), &diff)?;
        summary.push_str(&report_lines(&label, &run.report));
        json_rows.push(serde_json::json!({
            "rule": run.rule,
            "seed_index": run.seed_index,
            "psi": run.psi,
            "seed_features": run.seed_features,
            "report": run.report,
        }));
        rows.push((label, &run.report));
    }
    dir.write_csv("metrics.csv", &report_csv(&rows))?;
    dir.write_json("report.json", &serde_json::json!({ "runs": json_rows }))?;
    dir.finish(&summary)
}

fn local_edit(mut cfg: ExperimentConfig, out: &Path, count: Option<usize>) -> Result<()> {
    if let Some(n) = count {
        cfg.mask_cohort_size = n;
    }
    let wb = Workbench::new(cfg)?;
    let seeds = wb.select_seeds()?;
    let outcome = wb.run_mask_sweep(&seeds)?;
    let mut dir = RunDir::create(out, wb.cfg())?;

    let mut rows = Vec::new();
    let mut summary = String::from("localized edits\n");
    let mut json_rows = Vec::new();
    for run in &outcome.runs {
        let label = format!("{}:{}", run.rule, run.mask);
        let sub = format!("runs/{}_{}", run.rule, run.mask);
        dir.write_cohort(&sub, &run.cohort)?;
        summary.push_str(&report_lines(&label, &run.report));
        json_rows.push(serde_json::json!({
            "rule": run.rule,
            "seed_index": run.seed_index,
            "mask": run.mask,
            "preserved": run.preserved,
            "seed_features": run.seed_features,
            "report": run.report,
        }));
        rows.push((label, &run.report));
    }
    dir.write_csv("metrics.csv", &report_csv(&rows))?;
    dir.write_json("report.json", &serde_json::json!({ "runs": json_rows }))?;
    dir.finish(&summary)
}

fn evaluate(cfg: ExperimentConfig, real: &Path, synth: &Path, out: &Path) -> Result<()> {
    let real_maps = load_cohort_dir(real)?;
    let synth_maps = load_cohort_dir(synth)?;
    let real_features: Vec<MorphVector> = real_maps.iter().map(morph_features).collect();
    let synth_features: Vec<MorphVector> = synth_maps.iter().map(morph_features).collect();

    let real_report = cohort_report(&real_maps, &real_features, &real_features, cfg.pr_k)?;
    let synth_report = cohort_report(&synth_maps, &synth_features, &real_features, cfg.pr_k)?;

    let mut dir = RunDir::create(out, &cfg)?;
    dir.write_csv(
        "metrics.csv",
        &report_csv(&[("real".into(), &real_report), ("synth".into(), &synth_report)]),
    )?;
    dir.write_json(
        "report.json",
        &serde_json::json!({ "real": real_report, "synth": synth_report }),
    )?;

    let diff = cardiosynth::analytics::heatmap_diff(
        &occupancy_heatmap_of(&synth_maps)?,
        &occupancy_heatmap_of(&real_maps)?,
    )?;
    let img = io::diff_slice_image(&diff, diff.dims().2 / 2)?;
    io::save_png(dir.file("diff_mid.png", "png"), &img)?;

    let mut summary = String::from("cohort evaluation\n");
    summary.push_str(&report_lines("real (self-reference)", &real_report));
    summary.push_str(&report_lines("synth (vs real)", &synth_report));
    dir.finish(&summary)
}

fn augment(
    mut cfg: ExperimentConfig,
    out: &Path,
    count: Option<usize>,
    threshold_ml: Option<f64>,
) -> Result<()> {
    if let Some(n) = count {
        cfg.augment_size = n;
    }
    if threshold_ml.is_some() {
        cfg.threshold_ml = threshold_ml;
    }
    let wb = Workbench::new(cfg)?;
    let outcome = wb.run_augmentation()?;
    let mut dir = RunDir::create(out, wb.cfg())?;

    let mut rows = Vec::new();
    let mut summary = format!(
        "filtered augmentation\n  RV-volume threshold: {:.3} ml\n  target sub-cohort: {} reference members\n",
        outcome.threshold_ml,
        outcome.target.len()
    );
    let mut json_rows = Vec::new();
    for strat in &outcome.strategies {
        dir.write_cohort(&format!("strategies/{}", strat.name), &strat.cohort)?;
        summary.push_str(&report_lines(&strat.name, &strat.report));
        summary.push_str(&format!("  generated {} to keep {}\n", strat.generated, strat.cohort.len()));
        json_rows.push(serde_json::json!({
            "name": strat.name,
            "generated": strat.generated,
            "kept": strat.cohort.len(),
            "report": strat.report,
        }));
        rows.push((strat.name.clone(), &strat.report));
    }
    dir.write_csv("metrics.csv", &report_csv(&rows))?;
    dir.write_json(
        "report.json",
        &serde_json::json!({
            "threshold_ml": outcome.threshold_ml,
            "target_reference_indices": outcome.target,
            "strategies": json_rows,
        }),
    )?;
    dir.finish(&summary)
}

fn sweep(cfg: ExperimentConfig, out: &Path) -> Result<()> {
    let wb = Workbench::new(cfg)?;
    let outcome = wb.run_sensitivity()?;
    let mut dir = RunDir::create(out, wb.cfg())?;

    let mut csv = format!("axis,value,members,{}\n", metric_columns());
    let mut summary = String::from("sensitivity scan\n");
    for row in &outcome.rows {
        let axis = match row.axis {
            SweepAxis::Steps => "steps",
            SweepAxis::Size => "size",
        };
        csv.push_str(&format!(
            "{axis},{},{},{}\n",
            row.value,
            row.report.members,
            metric_fields(&row.report)
        ));
        summary.push_str(&report_lines(&format!("{axis}={}", row.value), &row.report));
    }
    dir.write_csv("metrics.csv", &csv)?;
    dir.write_json("report.json", &serde_json::json!({ "rows": outcome.rows }))?;
    dir.finish(&summary)
}

// ── evaluate helpers ────────────────────────────────────────────────────

/// Load a cohort from a directory: via its manifest when present, otherwise
/// every `.cvol` label map in the directory in name order.
fn load_cohort_dir(dir: &Path) -> Result<Vec<LabelMap>> {
    let manifest_path = dir.join("manifest.json");
    let mut maps = Vec::new();
    if manifest_path.exists() {
        let manifest = Manifest::load(&manifest_path)?;
        for entry in &manifest.files {
            if entry.kind == "labelmap" {
                maps.push(io::read_labelmap(dir.join(&entry.path))?);
            }
        }
    } else {
        let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "cvol"))
            .collect();
        paths.sort();
        for path in paths {
            match io::read_labelmap(&path) {
                Ok(map) => maps.push(map),
                Err(Error::WrongKind { .. }) => {} // latents/heatmaps may share the dir
                Err(e) => return Err(e),
            }
        }
    }
    if maps.is_empty() {
        return Err(Error::EmptyCohort);
    }
    Ok(maps)
}

/// Violations on the maps as given, fidelity metrics against the reference
/// features (reference statistics normalize both clouds).
fn cohort_report(
    maps: &[LabelMap],
    features: &[MorphVector],
    reference: &[MorphVector],
    pr_k: usize,
) -> Result<CohortReport> {
    let violations = ViolationStats::from_reports(&check_cohort(maps));
    let real = FeatureCloud::from_features(reference, reference)?;
    let synth = FeatureCloud::from_features(features, reference)?;
    let (precision, recall) = precision_recall(&real, &synth, pr_k)?;
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_escaping_quotes_only_when_needed() {
        assert_eq!(csv_escape("plain"), "plain");
        assert_eq!(csv_escape("a,b"), "\"a,b\"");
        assert_eq!(csv_escape("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn metric_header_carries_all_twelve_checks() {
        let header = metric_columns();
        for name in CHECK_NAMES {
            assert!(header.contains(name));
        }
        for field in ["precision", "recall", "frechet"] {
            assert!(header.contains(field));
        }
    }
}
