use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use wsivit_core::dataset::{
    build_manifest, make_folds, merge_manifests, repeated_holdout, DatasetManifest, FoldPlan,
    HoldoutPlan, ManifestEntry, Split,
};
use wsivit_core::experiment::{run_experiment, ExperimentConfig};
use wsivit_core::inference::run_production;
use wsivit_core::seed::derive_seed;
use wsivit_core::synthetic::{synthetic_corpus, write_corpus};
use wsivit_core::tiling::{
    extract_slide, load_slide, read_regions, read_slide_manifest, ExtractionMethod, Slide,
    SlideMeta,
};
use wsivit_core::training::{
    evaluate, load_checkpoint, save_checkpoint, train, DiskPatches, PatchSource, Subset,
};

use crate::args::*;

pub const EXIT_INDETERMINATE: u8 = 3;

/// Resolves output paths against the optional base directory.
struct Outputs {
    base: Option<PathBuf>,
}

impl Outputs {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.base {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Resolved path with its parent directory created.
    fn file(&self, p: &Path) -> Result<PathBuf> {
        let p = self.path(p);
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    fn dir(&self, p: &Path) -> Result<PathBuf> {
        let p = self.path(p);
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let out = Outputs { base: cli.out_dir.clone() };
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(a, seed, &out),
        Command::Extract(a) => extract(a, &out),
        Command::Dataset(a) => dataset(a, &out),
        Command::Folds(a) => folds(a, seed, &out),
        Command::Train(a) => train_cmd(a, seed, &out),
        Command::Eval(a) => eval(a, &out),
        Command::Experiment(a) => experiment(a, seed, &out),
        Command::Predict(a) => predict(a, seed, &out),
    }
}

fn synth(a: SynthArgs, seed: u64, out: &Outputs) -> Result<ExitCode> {
    if a.per_class == 0 || a.size == 0 {
        bail!("--per-class and --size must be positive");
    }
    let dir = out.dir(&a.out)?;
    let slides = synthetic_corpus(a.per_class, a.size, derive_seed(seed, "synth"));
    write_corpus(&slides, &dir)?;
    println!("wrote {} slides to {}", slides.len(), dir.join("slides.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn extract(a: ExtractArgs, out: &Outputs) -> Result<ExitCode> {
    let tile = a.tile.config();
    tile.validate()?;
    let method = ExtractionMethod::from(a.method);
    let metas = read_slide_manifest(&a.manifest)?;
    // check every input before writing anything
    for m in &metas {
        require_file(Path::new(&m.path), "slide")?;
        if let Some(dir) = &a.regions {
            require_file(&region_file(dir, m), "region file")?;
        }
    }
    let dir = out.dir(&a.out)?;
    let mut records = Vec::new();
    for m in &metas {
        let slide = load_slide(m)?;
        let regions = match &a.regions {
            Some(rd) if method == ExtractionMethod::Region => read_regions(&region_file(rd, m))?,
            _ => Vec::new(),
        };
        let patches = extract_slide(&slide, method, &regions, &tile)?;
        log::info!("{}: {} patches", m.slide_id, patches.len());
        for p in &patches {
            p.write_png(&dir)?;
        }
        records.extend(patches);
    }
    // paths relative to the manifest so the directory can be moved
    let manifest = build_manifest(&records, Path::new(""))?;
    let path = dir.join("manifest.jsonl");
    manifest.write_jsonl(&path)?;
    println!(
        "{} patches from {} slides ({method}) -> {}",
        manifest.len(),
        metas.len(),
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn region_file(dir: &Path, meta: &SlideMeta) -> PathBuf {
    dir.join(format!("{}.csv", meta.slide_id))
}

/// Reads a manifest and rewrites relative patch paths against its directory.
fn read_manifest_absolute(path: &Path) -> Result<DatasetManifest> {
    let m = DatasetManifest::read_jsonl(path)?;
    let base = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let base = fs::canonicalize(base).with_context(|| format!("resolving {}", base.display()))?;
    let entries: Vec<ManifestEntry> = m
        .entries()
        .iter()
        .map(|e| {
            let p = Path::new(&e.path);
            let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            ManifestEntry { path: path.to_string_lossy().into_owned(), ..e.clone() }
        })
        .collect();
    Ok(DatasetManifest::from_entries(entries)?)
}

fn dataset(a: DatasetArgs, out: &Outputs) -> Result<ExitCode> {
    let mut merged: Option<DatasetManifest> = None;
    for input in &a.inputs {
        let m = read_manifest_absolute(input)
            .with_context(|| format!("reading {}", input.display()))?;
        merged = Some(match merged {
            None => m,
            Some(acc) => merge_manifests(&acc, &m)?,
        });
    }
    let merged = merged.context("no input manifests")?;
    let path = out.file(&a.out)?;
    merged.write_jsonl(&path)?;
    println!("{} patches, classes {:?}, methods {:?} -> {}", merged.len(), merged.class_counts(), merged.method_counts(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn folds(a: FoldsArgs, seed: u64, out: &Outputs) -> Result<ExitCode> {
    let manifest = DatasetManifest::read_jsonl(&a.manifest)?;
    let seed = derive_seed(seed, "folds");
    let path = out.file(&a.out)?;
    match a.holdout_rounds {
        Some(rounds) => {
            let plan = repeated_holdout(&manifest, rounds, a.test_fraction, a.mode.into(), seed)?;
            write_json(&path, &plan)?;
            println!(
                "{rounds} holdout rounds, {:.1}% of patches tested at least once -> {}",
                plan.coverage * 100.0,
                path.display()
            );
        }
        None => {
            let plan = make_folds(&manifest, a.k, a.mode.into(), seed)?;
            plan.save(&path)?;
            println!("{} folds of sizes {:?} -> {}", plan.k, plan.fold_sizes(), path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_patches(manifest_path: &Path, image_size: usize, cache: usize) -> Result<(DatasetManifest, DiskPatches)> {
    let manifest = DatasetManifest::read_jsonl(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(""));
    let source = DiskPatches::new(&manifest, root, image_size, cache);
    source.check_paths()?;
    Ok((manifest, source))
}

fn fold_split(plan_path: &Path, fold: usize, manifest: &DatasetManifest) -> Result<Split> {
    let plan = FoldPlan::load(plan_path)?;
    if fold >= plan.k {
        bail!("fold {fold} out of range for a {}-fold plan", plan.k);
    }
    Ok(plan.split_indices(manifest, fold)?)
}

fn train_cmd(a: TrainArgs, seed: u64, out: &Outputs) -> Result<ExitCode> {
    let vit = a.model.config();
    let cfg = a.optim.config(derive_seed(seed, "train"));
    vit.validate()?;
    cfg.validate()?;
    let (manifest, source) = load_patches(&a.manifest, vit.image_size, a.optim.cache)?;
    let split = match (&a.folds, a.fold) {
        (Some(plan), Some(fold)) => fold_split(plan, fold, &manifest)?,
        _ => Split { train: (0..manifest.len()).collect(), test: Vec::new() },
    };
    let ckpt_path = out.file(&a.out)?;
    let history_path = match &a.history {
        Some(h) => out.file(h)?,
        None => ckpt_path.with_extension("history.json"),
    };
    let train_set = Subset::new(&source, split.train)?;
    let test_set = Subset::new(&source, split.test)?;
    let eval_set = (!test_set.is_empty()).then_some(&test_set);
    let (ckpt, history) = train(&train_set, &cfg, &vit, eval_set)?;
    save_checkpoint(&ckpt, &ckpt_path)?;
    history.save(&history_path)?;
    if let Some(last) = history.last() {
        print!("epoch {}: loss {:.4}, train accuracy {:.4}", last.epoch, last.mean_loss, last.train_accuracy);
        if let Some(r) = &last.eval {
            print!(", test accuracy {:.4}", r.accuracy);
            if let Some(auc) = r.auc {
                print!(", AUC {auc:.4}");
            }
        }
        println!();
    }
    println!("checkpoint -> {}", ckpt_path.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs, out: &Outputs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (manifest, source) = load_patches(&a.manifest, ckpt.config.image_size, a.cache)?;
    let indices = match (&a.folds, a.fold) {
        (Some(plan), Some(fold)) => fold_split(plan, fold, &manifest)?.test,
        _ => (0..manifest.len()).collect(),
    };
    let set = Subset::new(&source, indices)?;
    let report = evaluate(&ckpt, &set, a.positive_class)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(p) = &a.out {
        write_json(&out.file(p)?, &report)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn experiment(a: ExperimentArgs, seed: u64, out: &Outputs) -> Result<ExitCode> {
    let vit = a.model.config();
    let train_cfg = a.optim.config(derive_seed(seed, "train"));
    vit.validate()?;
    train_cfg.validate()?;
    let (manifest, source) = load_patches(&a.manifest, vit.image_size, a.optim.cache)?;
    let (splits, protocol) = match (&a.folds, &a.holdout) {
        (Some(p), None) => {
            require_file(p, "fold plan")?;
            let plan = FoldPlan::load(p)?;
            (plan.splits(&manifest)?, format!("{}-fold {:?}", plan.k, plan.mode))
        }
        (None, Some(p)) => {
            require_file(p, "holdout plan")?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let plan: HoldoutPlan = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", p.display()))?;
            let protocol = format!(
                "{} holdout rounds at {} {:?}, coverage {:.3}",
                plan.rounds, plan.test_fraction, plan.mode, plan.coverage
            );
            (plan.splits(&manifest), protocol)
        }
        _ => unreachable!("clap enforces exactly one plan"),
    };
    let label = a.label.clone().unwrap_or_else(|| {
        let methods: Vec<String> = manifest.method_counts().keys().map(|m| m.to_string()).collect();
        format!("{} ({})", manifest.len(), methods.join("+"))
    });
    let cfg = ExperimentConfig { dataset_label: label, protocol, train: train_cfg, vit };
    let dir = out.dir(&a.out)?;
    let summary = run_experiment(&manifest, &source, &splits, &cfg, Some(&dir))?;
    print!("{}", summary.table);
    println!("results -> {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn predict(a: PredictArgs, seed: u64, out: &Outputs) -> Result<ExitCode> {
    let tile = a.tile.config();
    let vote = a.vote(derive_seed(seed, "predict"));
    tile.validate()?;
    vote.validate()?;
    require_file(&a.checkpoint, "checkpoint")?;
    let slide_id = a.slide_id.clone().unwrap_or_else(|| {
        a.slide.file_stem().map_or_else(|| "slide".into(), |s| s.to_string_lossy().into_owned())
    });
    let meta = SlideMeta {
        slide_id,
        path: a.slide.to_string_lossy().into_owned(),
        // the diagnosis is unknown; the label is not used for prediction
        label: 0,
        scan_magnification: a.scan_magnification,
    };
    let slide: Slide = load_slide(&meta)?;
    let (report, text) = run_production(&a.checkpoint, &slide, &vote, &tile)?;
    print!("{text}");
    if let Some(p) = &a.json {
        write_json(&out.file(p)?, &report)?;
    }
    Ok(if report.is_indeterminate() {
        ExitCode::from(EXIT_INDETERMINATE)
    } else {
        ExitCode::SUCCESS
    })
}
