//! End-to-end experiment grid: synthesize a bundle, train each
//! (family, loss, fold, seed) cell, evaluate on held-out windows, and render
//! the comparison report. Completed cells are cached on disk keyed by a
//! content hash, so interrupted runs resume without retraining.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::correlation::LossKind;
use crate::dataset::{load_bundle, save_bundle, segment, Bundle, NormalizePolicy, WindowSpec};
use crate::decoder::{DecoderConfig, DecoderFamily};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_segments, paired_test, pool_cells, relative_delta_improvement, report, trend_fit,
    CellSummary, EvalSummary, MetricsTable, NamedTest, NamedTrend,
};
use crate::signal::EnvelopePipelineConfig;
use crate::synth::{gen_bundle, SynthConfig};
use crate::train::{loto_folds, train_model, Fold, Sample, TrainConfig};

/// Full grid description, read from a TOML spec file. Every field has a
/// default so a minimal spec can be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Echoed for provenance; the synthetic bundle carries envelopes
    /// directly, so this only matters for the audio entry point.
    pub envelope: EnvelopePipelineConfig,
    pub families: Vec<DecoderFamily>,
    pub losses: Vec<LossKind>,
    pub seeds: Vec<u64>,
    pub n_folds: usize,
    /// Evaluation window lengths in seconds.
    pub windows_seconds: Vec<f64>,
    /// Window length used to cut training/validation segments.
    pub train_window_seconds: f64,
    pub edge_trim_seconds: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            envelope: EnvelopePipelineConfig::default(),
            families: vec![DecoderFamily::LinearLagged { lag_samples: 32 }],
            losses: vec![LossKind::Pcc, LossKind::DeltaPcc],
            seeds: vec![0, 1, 2, 3, 4],
            n_folds: 4,
            windows_seconds: vec![1.0, 10.0],
            train_window_seconds: 5.0,
            edge_trim_seconds: 0.5,
            out_dir: None,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<ExperimentSpec> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::SpecParse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<ExperimentSpec> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.families.is_empty() {
            return Err(Error::Config("at least one decoder family required".into()));
        }
        if self.losses.is_empty() {
            return Err(Error::Config("at least one loss kind required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        let distinct: BTreeSet<&u64> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::Config("n_folds must be at least 2".into()));
        }
        if self.windows_seconds.is_empty()
            || self.windows_seconds.iter().any(|w| !w.is_finite() || *w <= 0.0)
        {
            return Err(Error::Config("windows_seconds must be positive".into()));
        }
        if !(self.train_window_seconds.is_finite() && self.train_window_seconds > 0.0) {
            return Err(Error::Config("train_window_seconds must be positive".into()));
        }
        if !(self.edge_trim_seconds.is_finite() && self.edge_trim_seconds >= 0.0) {
            return Err(Error::Config("edge_trim_seconds must be nonnegative".into()));
        }
        Ok(())
    }

    /// Provenance block written into the report: the fully resolved spec,
    /// defaults included.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_else(|e| format!("<unserializable spec: {e}>"))
    }
}

/// One grid cell: a single training run evaluated at every window length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellKey {
    family: DecoderFamily,
    loss: LossKind,
    fold: usize,
    seed: u64,
}

/// On-disk cache entry for a completed (or failed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellRecord {
    status: String,
    family: String,
    loss: LossKind,
    fold: usize,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(default)]
    summaries: Vec<EvalSummary>,
}

/// Content hash identifying a cell: covers the cell coordinates, everything
/// that influences its training, and the bundle manifest, so editing the
/// spec or regenerating the data invalidates stale cache entries.
fn cell_hash(spec: &ExperimentSpec, key: &CellKey, fold: &Fold, manifest: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"aad-lab cell v1\n");
    h.update(format!(
        "family={:?};loss={};fold={};seed={}\n",
        key.family, key.loss, key.fold, key.seed
    ));
    h.update(toml::to_string(&spec.train).unwrap_or_default());
    h.update(format!(
        "train_window={};windows={:?};edge_trim={}\n",
        spec.train_window_seconds, spec.windows_seconds, spec.edge_trim_seconds
    ));
    h.update(toml::to_string(fold).unwrap_or_default());
    h.update(manifest);
    let digest = h.finalize();
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub table: MetricsTable,
    pub tests: Vec<NamedTest>,
    pub trends: Vec<NamedTrend>,
    pub relative_improvement: Option<f64>,
    pub n_cells: usize,
    pub n_failed: usize,
    pub out_dir: PathBuf,
}

/// Cuts one normalized per-trial segment set for each window length, keyed
/// for later fold filtering.
fn cut_windows(bundle: &Bundle, length_seconds: f64, edge_trim: f64) -> Result<Vec<Sample>> {
    let mut set = segment(bundle, &WindowSpec::non_overlapping(length_seconds), edge_trim)?;
    crate::dataset::normalize(&mut set, NormalizePolicy::PerTrialZscore)?;
    Ok(set.items.into_iter().map(|it| (it.eeg, it.env)).collect())
}

fn filter_samples<'a>(samples: &'a [Sample], ids: &[String]) -> Vec<&'a Sample> {
    samples.iter().filter(|(x, _)| ids.contains(&x.trial_id)).collect()
}

/// Runs the whole grid. `jobs = 0` means one worker per logical CPU. With
/// `resume`, cells whose cache entry matches the content hash are reused.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: &Path,
    jobs: usize,
    resume: bool,
) -> Result<ExperimentOutput> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let cells_dir = out_dir.join("cells");
    std::fs::create_dir_all(&cells_dir)?;

    // Bundle: reuse an existing one under the output root when resuming so
    // the cache keys stay stable, otherwise synthesize and persist it.
    let bundle_dir = out_dir.join("bundle");
    let bundle = if resume && bundle_dir.join("manifest").exists() {
        load_bundle(&bundle_dir)?
    } else {
        let b = gen_bundle(&spec.synth)?;
        save_bundle(&b, &bundle_dir)?;
        b
    };
    let manifest = bundle.manifest_text();
    let folds = loto_folds(&bundle.trial_ids(), spec.n_folds, spec.synth.seed)?;

    // Shared segment sets, cut once.
    let train_samples = cut_windows(&bundle, spec.train_window_seconds, spec.edge_trim_seconds)?;
    let eval_samples: Vec<(f64, Vec<Sample>)> = spec
        .windows_seconds
        .iter()
        .map(|&w| Ok((w, cut_windows(&bundle, w, spec.edge_trim_seconds)?)))
        .collect::<Result<_>>()?;

    // Grid in deterministic order.
    let mut keys = Vec::new();
    for family in &spec.families {
        for &loss in &spec.losses {
            for fold in 0..folds.len() {
                for &seed in &spec.seeds {
                    keys.push(CellKey { family: *family, loss, fold, seed });
                }
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<(CellKey, std::result::Result<Vec<EvalSummary>, String>)> =
        pool.install(|| {
            keys.par_iter()
                .map(|key| {
                    let r = run_cell(
                        spec,
                        key,
                        &folds[key.fold],
                        &manifest,
                        &bundle,
                        &train_samples,
                        &eval_samples,
                        &cells_dir,
                        resume,
                    );
                    (key.clone(), r.map_err(|e| e.to_string()))
                })
                .collect()
        });

    let n_cells = results.len();
    let n_failed = results.iter().filter(|(_, r)| r.is_err()).count();
    if n_failed * 2 > n_cells {
        return Err(Error::Evaluation(format!("{n_failed} of {n_cells} grid cells failed")));
    }

    // Pool per (family, loss, window) in spec order.
    let mut table = MetricsTable::default();
    for family in &spec.families {
        for &loss in &spec.losses {
            for (wi, &w) in spec.windows_seconds.iter().enumerate() {
                let cells: Vec<CellSummary> = results
                    .iter()
                    .filter(|(k, r)| k.family == *family && k.loss == loss && r.is_ok())
                    .map(|(k, r)| CellSummary {
                        fold: k.fold,
                        seed: k.seed,
                        summary: r.as_ref().unwrap()[wi].clone(),
                    })
                    .collect();
                if cells.is_empty() {
                    continue;
                }
                table.rows.push(pool_cells(family.name(), &loss.to_string(), w, cells)?);
            }
        }
    }

    // Paired tests: contrastive vs plain loss per (family, window), paired
    // by (fold, seed) over held-out mean DeltaPCC.
    let mut tests = Vec::new();
    if spec.losses.contains(&LossKind::Pcc) && spec.losses.contains(&LossKind::DeltaPcc) {
        for family in &spec.families {
            for (wi, &w) in spec.windows_seconds.iter().enumerate() {
                let series = |loss: LossKind| -> Vec<f64> {
                    let mut v: Vec<(usize, u64, f64)> = results
                        .iter()
                        .filter(|(k, r)| k.family == *family && k.loss == loss && r.is_ok())
                        .map(|(k, r)| (k.fold, k.seed, r.as_ref().unwrap()[wi].mean_delta))
                        .collect();
                    v.sort_by_key(|a| (a.0, a.1));
                    v.into_iter().map(|(_, _, d)| d).collect()
                };
                let a = series(LossKind::DeltaPcc);
                let b = series(LossKind::Pcc);
                if a.len() != b.len() {
                    continue; // asymmetric failures: pairing broken, skip
                }
                match paired_test(&a, &b) {
                    Ok(result) => {
                        tests.push(NamedTest { label: format!("{}/{}s", family.name(), w), result })
                    }
                    Err(Error::InsufficientPairs { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }

    // Accuracy-vs-correlation trends over every successful cell x window.
    let mut acc = Vec::new();
    let mut deltas = Vec::new();
    let mut rho_as = Vec::new();
    for row in &table.rows {
        for c in &row.cells {
            acc.push(c.summary.accuracy);
            deltas.push(c.summary.mean_delta);
            rho_as.push(c.summary.mean_rho_a);
        }
    }
    let mut trends = Vec::new();
    for (label, x) in [("accuracy_vs_delta", &deltas), ("accuracy_vs_rho_a", &rho_as)] {
        match trend_fit(x, &acc) {
            Ok(fit) => trends.push(NamedTrend { label: label.into(), fit, n_points: acc.len() }),
            Err(Error::DegenerateRegressor) | Err(Error::Config(_)) => {}
            Err(e) => return Err(e),
        }
    }

    let mut echo = spec.echo();
    if n_failed > 0 {
        let failed: Vec<String> = results
            .iter()
            .filter_map(|(k, r)| {
                r.as_ref().err().map(|e| {
                    format!("# failed cell {}/{}/fold{}/seed{}: {e}", k.family.name(), k.loss, k.fold, k.seed)
                })
            })
            .collect();
        echo.push('\n');
        echo.push_str(&failed.join("\n"));
        echo.push('\n');
    }
    report(&table, &tests, &trends, &echo, out_dir)?;

    Ok(ExperimentOutput {
        relative_improvement: relative_delta_improvement(&table),
        table,
        tests,
        trends,
        n_cells,
        n_failed,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Trains and evaluates one cell, consulting / updating the on-disk cache.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    spec: &ExperimentSpec,
    key: &CellKey,
    fold: &Fold,
    manifest: &str,
    bundle: &Bundle,
    train_samples: &[Sample],
    eval_samples: &[(f64, Vec<Sample>)],
    cells_dir: &Path,
    resume: bool,
) -> Result<Vec<EvalSummary>> {
    let hash = cell_hash(spec, key, fold, manifest);
    let record_path = cells_dir.join(format!("{hash}.toml"));
    if resume && record_path.exists() {
        let text = std::fs::read_to_string(&record_path)?;
        if let Ok(rec) = toml::from_str::<CellRecord>(&text) {
            if rec.status == "ok" && rec.summaries.len() == spec.windows_seconds.len() {
                return Ok(rec.summaries);
            }
        }
    }

    let outcome = train_and_eval(spec, key, fold, bundle, train_samples, eval_samples, cells_dir, &hash);
    let rec = match &outcome {
        Ok(summaries) => CellRecord {
            status: "ok".into(),
            family: key.family.name().into(),
            loss: key.loss,
            fold: key.fold,
            seed: key.seed,
            error: None,
            summaries: summaries.clone(),
        },
        Err(e) => CellRecord {
            status: "failed".into(),
            family: key.family.name().into(),
            loss: key.loss,
            fold: key.fold,
            seed: key.seed,
            error: Some(e.to_string()),
            summaries: Vec::new(),
        },
    };
    let text = toml::to_string(&rec).map_err(|e| Error::Config(format!("cell record: {e}")))?;
    std::fs::write(&record_path, text)?;
    outcome
}

#[allow(clippy::too_many_arguments)]
fn train_and_eval(
    spec: &ExperimentSpec,
    key: &CellKey,
    fold: &Fold,
    bundle: &Bundle,
    train_samples: &[Sample],
    eval_samples: &[(f64, Vec<Sample>)],
    cells_dir: &Path,
    hash: &str,
) -> Result<Vec<EvalSummary>> {
    let dcfg = DecoderConfig { channels: bundle.n_channels, family: key.family, init_seed: key.seed };
    let mut tcfg = spec.train;
    tcfg.loss = key.loss;
    tcfg.seed = key.seed;

    let train: Vec<Sample> =
        filter_samples(train_samples, &fold.train_ids).into_iter().cloned().collect();
    let val: Vec<Sample> =
        filter_samples(train_samples, &fold.val_ids).into_iter().cloned().collect();
    let (params, history) = train_model(&dcfg, &tcfg, &train, &val)?;

    params.save(&cells_dir.join(format!("{hash}.params")))?;
    std::fs::write(cells_dir.join(format!("{hash}.history.txt")), history.to_table())?;

    let mut summaries = Vec::with_capacity(eval_samples.len());
    for (w, samples) in eval_samples {
        let test: Vec<Sample> =
            filter_samples(samples, &fold.test_ids).into_iter().cloned().collect();
        let set = crate::dataset::SegmentSet {
            items: test
                .into_iter()
                .enumerate()
                .map(|(i, (eeg, env))| crate::dataset::SegmentItem {
                    trial_id: eeg.trial_id.clone(),
                    window_index: i,
                    eeg,
                    env,
                })
                .collect(),
            skipped_trials: 0,
        };
        let (summary, _records) = evaluate_segments(&params, &dcfg, &set, *w)?;
        summaries.push(summary);
    }
    Ok(summaries)
}
