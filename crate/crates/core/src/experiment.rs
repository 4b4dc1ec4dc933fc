//! Multi-fold train/evaluate runs with a summary table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{validation_err, Error, Result};
use crate::metrics::{aggregate_folds, render_table, FoldSummary, MetricsReport, TableRow};
use crate::seed::derive_indexed;
use crate::training::{evaluate, train, PatchSource, Subset, TrainConfig, TrainHistory};
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Row label in the summary table, e.g. `2k (grid)`.
    pub dataset_label: String,
    /// Free-form protocol description stored with the summary.
    pub protocol: String,
    pub train: TrainConfig,
    pub vit: ViTConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: MetricsReport,
    pub training_seconds: f64,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub dataset_label: String,
    pub protocol: String,
    pub n_patches: usize,
    pub folds: usize,
    pub aggregate: FoldSummary,
    /// Mean per-fold training time.
    pub training_seconds: f64,
    pub table: String,
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn fold_file(out_dir: &Path, fold: usize) -> PathBuf {
    out_dir.join(format!("fold_{fold}.json"))
}

pub fn summary_file(out_dir: &Path) -> PathBuf {
    out_dir.join("summary.json")
}

fn check_splits<S: PatchSource + ?Sized>(source: &S, splits: &[Split]) -> Result<()> {
    if splits.is_empty() {
        return Err(validation_err!("experiment has no splits"));
    }
    for (f, s) in splits.iter().enumerate() {
        if s.test.is_empty() || s.train.is_empty() {
            return Err(validation_err!("split {f} has an empty train or test side"));
        }
        if let Some(&i) = s.train.iter().chain(&s.test).find(|&&i| i >= source.len()) {
            return Err(validation_err!("split {f} refers to patch {i} of {}", source.len()));
        }
        let mut seen = [false; 2];
        for &i in &s.train {
            if let Some(slot) = seen.get_mut(source.label(i) as usize) {
                *slot = true;
            }
        }
        if !(seen[0] && seen[1]) {
            return Err(validation_err!("split {f} trains on a single class"));
        }
    }
    Ok(())
}

/// Trains and evaluates one model per split. With `out_dir`, each fold's
/// result is written as `fold_{i}.json` when it finishes and the summary
/// (`summary.json`, `summary.txt`) only after every fold succeeded, so an
/// interrupted run leaves completed folds and no summary.
pub fn run_experiment<S: PatchSource + ?Sized>(
    manifest: &DatasetManifest,
    source: &S,
    splits: &[Split],
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentSummary> {
    cfg.train.validate()?;
    cfg.vit.validate()?;
    if manifest.len() != source.len() {
        return Err(validation_err!(
            "manifest lists {} patches but the source holds {}",
            manifest.len(),
            source.len()
        ));
    }
    check_splits(source, splits)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let _ = fs::remove_file(summary_file(dir));
    }

    let mut results = Vec::with_capacity(splits.len());
    for (fold, split) in splits.iter().enumerate() {
        log::info!(
            "fold {}/{}: {} train, {} test",
            fold + 1,
            splits.len(),
            split.train.len(),
            split.test.len()
        );
        let train_set = Subset::new(source, split.train.clone())?;
        let test_set = Subset::new(source, split.test.clone())?;
        let train_cfg = TrainConfig {
            seed: derive_indexed(cfg.train.seed, fold as u64),
            ..cfg.train.clone()
        };
        let none: Option<&Subset<S>> = None;
        let (ckpt, history) = train(&train_set, &train_cfg, &cfg.vit, none)?;
        let metrics = evaluate(&ckpt, &test_set, cfg.train.positive_class)?;
        let result = FoldResult {
            fold,
            n_train: split.train.len(),
            n_test: split.test.len(),
            metrics,
            training_seconds: history.training_seconds,
            history,
        };
        if let Some(dir) = out_dir {
            write_atomic(&fold_file(dir, fold), &serde_json::to_vec_pretty(&result)?)?;
        }
        results.push(result);
    }

    let reports: Vec<MetricsReport> = results.iter().map(|r| r.metrics.clone()).collect();
    let aggregate = aggregate_folds(&reports)?;
    let training_seconds =
        results.iter().map(|r| r.training_seconds).sum::<f64>() / results.len() as f64;
    let table = render_table(&[TableRow::from_report(
        cfg.dataset_label.clone(),
        &aggregate.mean,
        training_seconds,
    )]);
    let summary = ExperimentSummary {
        dataset_label: cfg.dataset_label.clone(),
        protocol: cfg.protocol.clone(),
        n_patches: manifest.len(),
        folds: splits.len(),
        aggregate,
        training_seconds,
        table,
    };
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("summary.txt"), summary.table.as_bytes())?;
        write_atomic(&summary_file(dir), &serde_json::to_vec_pretty(&summary)?)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_folds, ManifestEntry, SplitMode};
    use crate::tiling::{ExtractionMethod, PatchRecord};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn toy() -> (DatasetManifest, Vec<PatchRecord>) {
        let patches: Vec<PatchRecord> = (0..24)
            .map(|i| {
                let label = (i % 2) as u8;
                let pixels = (0..8 * 8)
                    .flat_map(|p| {
                        let v = if ((p % 8) < 4) == (label == 0) { 40 } else { 220 };
                        [v, v, v]
                    })
                    .collect();
                PatchRecord {
                    patch_id: format!("s{}_{i}_0", i % 4),
                    slide_id: format!("s{}", i % 4),
                    x: i,
                    y: 0,
                    size: 8,
                    pixels,
                    weak_label: label,
                    method: ExtractionMethod::Grid,
                }
            })
            .collect();
        let entries = patches
            .iter()
            .map(|p| ManifestEntry {
                patch_id: p.patch_id.clone(),
                slide_id: p.slide_id.clone(),
                path: String::new(),
                weak_label: p.weak_label,
                method: p.method,
            })
            .collect();
        (DatasetManifest::from_entries(entries).unwrap(), patches)
    }

    fn cfg() -> ExperimentConfig {
        ExperimentConfig {
            dataset_label: "24 (toy)".into(),
            protocol: "2-fold".into(),
            train: TrainConfig { epochs: 2, batch_size: 8, learning_rate: 1e-3, seed: 3, ..TrainConfig::default() },
            vit: ViTConfig::tiny(),
        }
    }

    #[test]
    fn two_fold_run_writes_table_and_is_reproducible() {
        let (m, patches) = toy();
        let plan = make_folds(&m, 2, SplitMode::PatchLevel, 1).unwrap();
        let splits = plan.splits(&m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = run_experiment(&m, &patches, &splits, &cfg(), Some(dir.path())).unwrap();
        assert_eq!(a.aggregate.per_fold.len(), 2);
        assert_eq!(a.table.lines().count(), 2);
        assert!(a.table.starts_with("Dataset size"));
        let mean = (a.aggregate.per_fold[0].accuracy + a.aggregate.per_fold[1].accuracy) / 2.0;
        assert!((a.aggregate.mean.accuracy - mean).abs() < 1e-15);
        assert!(fold_file(dir.path(), 1).is_file() && summary_file(dir.path()).is_file());
        let b = run_experiment(&m, &patches, &splits, &cfg(), None).unwrap();
        assert_eq!(a.aggregate, b.aggregate);
    }

    /// Stops serving pixels after `budget` reads.
    struct Flaky<'a> {
        inner: &'a Vec<PatchRecord>,
        budget: usize,
        reads: AtomicUsize,
    }

    impl PatchSource for Flaky<'_> {
        fn len(&self) -> usize {
            self.inner.len()
        }
        fn label(&self, i: usize) -> u8 {
            self.inner[i].weak_label
        }
        fn pixels(&self, i: usize) -> Result<Arc<[u8]>> {
            if self.reads.fetch_add(1, Ordering::SeqCst) >= self.budget {
                return Err(validation_err!("disk went away"));
            }
            self.inner.pixels(i)
        }
    }

    #[test]
    fn interrupted_run_keeps_finished_folds_and_no_summary() {
        let (m, patches) = toy();
        let plan = make_folds(&m, 3, SplitMode::PatchLevel, 1).unwrap();
        let splits = plan.splits(&m).unwrap();
        // enough reads for fold 0 (training epochs plus evaluation), then fail
        let c = cfg();
        let budget = splits[0].train.len() * c.train.epochs + splits[0].test.len();
        let flaky = Flaky { inner: &patches, budget, reads: AtomicUsize::new(0) };
        let dir = tempfile::tempdir().unwrap();
        assert!(run_experiment(&m, &flaky, &splits, &cfg(), Some(dir.path())).is_err());
        assert!(fold_file(dir.path(), 0).is_file());
        assert!(!fold_file(dir.path(), 1).exists());
        assert!(!summary_file(dir.path()).exists());
    }

    #[test]
    fn bad_inputs_fail_before_training() {
        let (m, patches) = toy();
        assert!(run_experiment(&m, &patches, &[], &cfg(), None).is_err());
        let one_class = Split { train: vec![0, 2, 4], test: vec![1] };
        assert!(run_experiment(&m, &patches, &[one_class], &cfg(), None).is_err());
        let short = patches[..10].to_vec();
        let s = Split { train: vec![0, 1], test: vec![2] };
        assert!(run_experiment(&m, &short, &[s], &cfg(), None).is_err());
    }
}
