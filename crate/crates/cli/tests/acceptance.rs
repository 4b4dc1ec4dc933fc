//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! `WSIVIT_ACCEPTANCE_EPOCHS` overrides the number of training epochs used
//! by the end-to-end criteria (default 5).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::error::Error as StdError;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::Instant;

use image::{GenericImage, GenericImageView, Rgb, RgbImage};
use rand::Rng;
use wsivit_core::dataset::{build_manifest, make_folds, DatasetManifest, ManifestEntry, SplitMode};
use wsivit_core::inference::{majority_vote, PredictionReport, Verdict, VoteConfig};
use wsivit_core::metrics::{classification_metrics, confusion, roc_auc, MetricsReport};
use wsivit_core::numerics::{grad, Tape};
use wsivit_core::seed::{derive_seed, rng};
use wsivit_core::synthetic::synthetic_slide;
use wsivit_core::tiling::{
    extract_grid_patches, extract_region_patches, extract_slide, read_slide_manifest,
    tissue_mask, ExtractionMethod, PatchRecord, Region, Slide, ThresholdMode, TileConfig,
};
use wsivit_core::training::{
    evaluate, load_checkpoint, save_checkpoint, train, Checkpoint, Subset, TrainConfig,
};
use wsivit_core::vit::{forward_tape, patchify, ModelParams, ViTConfig};
use wsivit_core::{Error, ALCL, CHL};

const SEED: u64 = 1;
const BIN: &str = env!("CARGO_BIN_EXE_wsivit");

type Check = Result<String, Box<dyn StdError>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+).into());
        }
    };
}

/// State shared between criteria.
struct Ctx {
    dir: PathBuf,
    epochs: usize,
    patches: Vec<PatchRecord>,
    manifest: Option<DatasetManifest>,
    checkpoint: Option<PathBuf>,
    patch_level: Option<MetricsReport>,
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn tile() -> TileConfig {
    TileConfig { workers: workers(), ..TileConfig::default() }
}

fn wsivit(args: &[&str]) -> Result<Output, Box<dyn StdError>> {
    Ok(Command::new(BIN).args(args).output()?)
}

fn run_ok(args: &[&str]) -> Result<String, Box<dyn StdError>> {
    let out = wsivit(args)?;
    ensure!(
        out.status.success(),
        "wsivit {} exited with {}: {}",
        args.join(" "),
        out.status,
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(String::from_utf8(out.stdout)?)
}

fn p(path: &Path) -> &str {
    path.to_str().expect("temp paths are UTF-8")
}

// 1 ------------------------------------------------------------------------

fn gradients(_: &mut Ctx) -> Check {
    let cfg = ViTConfig::tiny();
    let base = ModelParams::<f64>::init(&cfg, derive_seed(SEED, "grad-init"))?;
    let mut r = rng(derive_seed(SEED, "grad"));
    // Scaled up from the init so the nonlinearities leave their linear range.
    let params = base.map(|t| t.map(|v| v * 10.0 + r.random_range(-0.3..0.3)));
    let h = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for _ in 0..5 {
        let img: Vec<u8> = (0..cfg.image_size * cfg.image_size * cfg.channels)
            .map(|_| r.random())
            .collect();
        let label = r.random_range(0..cfg.n_classes);
        let tokens = patchify::<f64>(&img, cfg.image_size, cfg.image_size, cfg.channels, cfg.token_patch_size)?;
        let loss_of = |p: &ModelParams<f64>| -> Result<f64, Error> {
            let mut tape = Tape::new();
            let vars = p.register(&mut tape);
            let tv = tape.constant(tokens.clone());
            let out = forward_tape(&mut tape, &vars, tv, &cfg, None)?;
            let loss = tape.cross_entropy(out.logits, label)?;
            Ok(tape.value(loss).data()[0])
        };
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let tv = tape.constant(tokens.clone());
        let out = forward_tape(&mut tape, &vars, tv, &cfg, None)?;
        let loss = tape.cross_entropy(out.logits, label)?;
        let g = grad(&tape, loss)?;
        for (slot, &v) in vars.iter().enumerate() {
            let analytic = g.get(v).ok_or("parameter without gradient")?;
            for i in 0..analytic.numel() {
                let bumped = |delta: f64| -> Result<f64, Error> {
                    let mut q = params.clone();
                    q.iter_mut().nth(slot).expect("slot exists").data_mut()[i] += delta;
                    loss_of(&q)
                };
                let numeric = (bumped(h)? - bumped(-h)?) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    ensure!(worst < 1e-3, "worst relative error {worst:.3e} over {checked} entries");
    Ok(format!("{checked} gradient entries on 5 inputs, worst relative error {worst:.2e}"))
}

// 2 ------------------------------------------------------------------------

fn metric_oracles(_: &mut Ctx) -> Check {
    let worked = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1], 1)?.auc;
    ensure!((worked - 0.75).abs() < 1e-12, "worked example AUC {worked}");

    let mut r = rng(derive_seed(SEED, "metrics"));
    let mut worst_auc = 0.0f64;
    let mut undefined = 0;
    for inst in 0..200 {
        let n = r.random_range(1..=500);
        let pos = r.random_range(0..2u8);
        // a skewed class balance now and then, so one class is sometimes absent
        let p_one: f64 = if inst % 10 == 0 { 0.995 } else { r.random_range(0.2..0.8) };
        let labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(p_one))).collect();
        let preds: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        // coarse scores on odd instances to force ties
        let scores: Vec<f64> = (0..n)
            .map(|_| if inst % 2 == 1 { r.random_range(0..8) as f64 / 8.0 } else { r.random() })
            .collect();

        let count = |pred: u8, lab: u8| {
            preds.iter().zip(&labels).filter(|&(&p, &l)| (p == pos) == (pred == pos) && (l == pos) == (lab == pos)).count() as u64
        };
        let neg = 1 - pos;
        let (tp, fp, fn_, tn) = (count(pos, pos), count(pos, neg), count(neg, pos), count(neg, neg));
        let cm = confusion(&preds, &labels, pos)?;
        ensure!(
            (cm.tp, cm.fp, cm.fn_, cm.tn) == (tp, fp, fn_, tn),
            "instance {inst}: confusion {cm:?} vs recount {tp} {fp} {fn_} {tn}"
        );
        let m = classification_metrics(&cm)?;
        let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let expect = (
            div(tp + tn, n as u64),
            div(tp, tp + fp),
            div(tp, tp + fn_),
            div(2 * tp, 2 * tp + fp + fn_),
        );
        ensure!(
            (m.accuracy, m.precision, m.recall, m.f1) == expect,
            "instance {inst}: metrics {:?} vs recount {expect:?}",
            (m.accuracy, m.precision, m.recall, m.f1)
        );

        let positives: Vec<f64> = labels.iter().zip(&scores).filter(|(&l, _)| l == pos).map(|(_, &s)| s).collect();
        let negatives: Vec<f64> = labels.iter().zip(&scores).filter(|(&l, _)| l != pos).map(|(_, &s)| s).collect();
        match roc_auc(&scores, &labels, pos) {
            Ok(roc) => {
                ensure!(!positives.is_empty() && !negatives.is_empty(), "instance {inst}: AUC on one class");
                let mut wins = 0.0;
                for &sp in &positives {
                    for &sn in &negatives {
                        wins += if sp > sn { 1.0 } else if sp == sn { 0.5 } else { 0.0 };
                    }
                }
                let oracle = wins / (positives.len() * negatives.len()) as f64;
                let err = (roc.auc - oracle).abs();
                ensure!(err <= 1e-12, "instance {inst}: AUC {} vs pairwise {oracle}", roc.auc);
                worst_auc = worst_auc.max(err);
            }
            Err(Error::UndefinedAuc(_)) => {
                ensure!(positives.is_empty() || negatives.is_empty(), "instance {inst}: AUC undefined with both classes");
                undefined += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(format!(
        "200 instances exact, worst AUC deviation {worst_auc:.1e} ({undefined} single-class), worked example 0.75"
    ))
}

// 3 ------------------------------------------------------------------------

fn corpus_patches(ctx: &mut Ctx) -> Result<(), Box<dyn StdError>> {
    if !ctx.patches.is_empty() {
        return Ok(());
    }
    let seed = derive_seed(SEED, "corpus");
    let cfg = tile();
    for i in 0..20 {
        let label = (i % 2) as u8;
        let slide = synthetic_slide(&format!("slide_{i:02}"), label, 1000, derive_seed(seed, &i.to_string()));
        ctx.patches.extend(extract_slide(&slide, ExtractionMethod::Grid, &[], &cfg)?);
    }
    ctx.manifest = Some(build_manifest(&ctx.patches, Path::new(""))?);
    Ok(())
}

fn train_fold(ctx: &Ctx, train_idx: Vec<usize>, test_idx: Vec<usize>) -> Result<(Checkpoint, MetricsReport, f64), Box<dyn StdError>> {
    let train_set = Subset::new(&ctx.patches, train_idx)?;
    let test_set = Subset::new(&ctx.patches, test_idx)?;
    let cfg = TrainConfig { epochs: ctx.epochs, seed: derive_seed(SEED, "train"), ..TrainConfig::default() };
    let none: Option<&Subset<Vec<PatchRecord>>> = None;
    let (ckpt, history) = train(&train_set, &cfg, &ViTConfig::default(), none)?;
    let report = evaluate(&ckpt, &test_set, ALCL)?;
    Ok((ckpt, report, history.training_seconds))
}

fn end_to_end(ctx: &mut Ctx) -> Check {
    let started = Instant::now();
    corpus_patches(ctx)?;
    let manifest = ctx.manifest.as_ref().expect("corpus built");
    let mut per_slide: BTreeMap<&str, usize> = BTreeMap::new();
    for e in manifest.entries() {
        *per_slide.entry(&e.slide_id).or_default() += 1;
    }
    let (lo, hi) = (per_slide.values().min().copied().unwrap_or(0), per_slide.values().max().copied().unwrap_or(0));
    ensure!(per_slide.len() == 20 && lo >= 80 && hi <= 100, "patches per slide {lo}..{hi} over {} slides", per_slide.len());

    let plan = make_folds(manifest, 10, SplitMode::PatchLevel, derive_seed(SEED, "folds"))?;
    let split = plan.split_indices(manifest, 0)?;
    let (n_train, n_test) = (split.train.len(), split.test.len());
    let (ckpt, report, train_s) = train_fold(ctx, split.train, split.test)?;
    let path = ctx.dir.join("model.ckpt");
    save_checkpoint(&ckpt, &path)?;
    ctx.checkpoint = Some(path);
    ctx.patch_level = Some(report.clone());

    let auc = report.auc.ok_or("AUC undefined on the test split")?;
    let total = started.elapsed().as_secs_f64();
    let detail = format!(
        "{} patches ({lo}..{hi}/slide), {n_train}/{n_test} split, {} epochs: accuracy {:.4}, AUC {auc:.4}, F1 {:.4}, train {train_s:.0} s, total {total:.0} s",
        manifest.len(), ctx.epochs, report.accuracy, report.f1
    );
    ensure!(report.accuracy >= 0.95 && auc >= 0.98 && total < 1800.0, "{detail}");
    Ok(detail)
}

// 4 ------------------------------------------------------------------------

fn fold_invariants(_: &mut Ctx) -> Check {
    let mut r = rng(derive_seed(SEED, "fold-manifest"));
    let n_slides = 23;
    let entries: Vec<ManifestEntry> = (0..1000)
        .map(|i| {
            let s = r.random_range(0..n_slides);
            ManifestEntry {
                patch_id: format!("s{s}_{i}_0"),
                slide_id: format!("s{s}"),
                path: String::new(),
                weak_label: (s % 2) as u8,
                method: ExtractionMethod::Grid,
            }
        })
        .collect();
    let slide_of: Vec<String> = entries.iter().map(|e| e.slide_id.clone()).collect();
    let manifest = DatasetManifest::from_entries(entries)?;
    let n = manifest.len();
    let mut plans = 0;
    for k in [2, 7, 10] {
        for mode in [SplitMode::PatchLevel, SplitMode::SlideLevel] {
            let plan = make_folds(&manifest, k, mode, 11)?;
            ensure!(plan == make_folds(&manifest, k, mode, 11)?, "k={k} {mode:?}: same seed, different plan");
            ensure!(plan != make_folds(&manifest, k, mode, 12)?, "k={k} {mode:?}: seed has no effect");

            let splits = plan.splits(&manifest)?;
            ensure!(splits.len() == k, "k={k} {mode:?}: {} splits", splits.len());
            let mut tested = vec![0usize; n];
            for (f, s) in splits.iter().enumerate() {
                let train: BTreeSet<usize> = s.train.iter().copied().collect();
                let test: BTreeSet<usize> = s.test.iter().copied().collect();
                ensure!(train.is_disjoint(&test), "k={k} {mode:?} fold {f}: train and test overlap");
                ensure!(train.len() + test.len() == n, "k={k} {mode:?} fold {f}: split misses patches");
                for &i in &test {
                    tested[i] += 1;
                }
            }
            ensure!(tested.iter().all(|&c| c == 1), "k={k} {mode:?}: folds do not partition the manifest");

            let sizes: Vec<usize> = match mode {
                SplitMode::PatchLevel => plan.fold_sizes(),
                SplitMode::SlideLevel => {
                    let mut fold_slides: HashMap<&str, BTreeSet<usize>> = HashMap::new();
                    for (i, e) in manifest.entries().iter().enumerate() {
                        let f = plan.fold_of(&e.patch_id).ok_or("unassigned patch")?;
                        fold_slides.entry(slide_of[i].as_str()).or_default().insert(f);
                    }
                    ensure!(fold_slides.values().all(|f| f.len() == 1), "k={k}: a slide spans folds");
                    let mut counts = vec![0usize; k];
                    for f in fold_slides.values() {
                        counts[*f.iter().next().expect("one fold")] += 1;
                    }
                    counts
                }
            };
            let (lo, hi) = (sizes.iter().min().copied().unwrap_or(0), sizes.iter().max().copied().unwrap_or(0));
            ensure!(hi - lo <= 1, "k={k} {mode:?}: fold sizes {sizes:?}");
            plans += 1;
        }
    }
    Ok(format!("{plans} plans over {n} patches / {n_slides} slides: partition, balance, slide integrity, seed reproducibility"))
}

// 5 ------------------------------------------------------------------------

fn weak_labels(ctx: &mut Ctx) -> Check {
    let dir = ctx.dir.join("weak");
    let corpus = dir.join("corpus");
    let seed = SEED.to_string();
    run_ok(&["--seed", &seed, "synth", "--out", p(&corpus), "--per-class", "10", "--size", "1000"])?;
    let slides = read_slide_manifest(&corpus.join("slides.csv"))?;
    let regions = dir.join("regions");
    fs::create_dir_all(&regions)?;
    for s in &slides {
        fs::write(regions.join(format!("{}.csv", s.slide_id)), "x,y,w,h\n150,150,300,200\n550,420,250,300\n550,420,250,300\n")?;
    }
    let grid = dir.join("grid");
    let region = dir.join("region");
    let manifest = corpus.join("slides.csv");
    run_ok(&["extract", "--manifest", p(&manifest), "--method", "grid", "--out", p(&grid)])?;
    run_ok(&["extract", "--manifest", p(&manifest), "--method", "region", "--regions", p(&regions), "--out", p(&region)])?;

    let label_of: HashMap<&str, u8> = slides.iter().map(|s| (s.slide_id.as_str(), s.label)).collect();
    let mut summary = Vec::new();
    for (name, d) in [("grid", &grid), ("region", &region)] {
        let m = DatasetManifest::read_jsonl(&d.join("manifest.jsonl"))?;
        ensure!(!m.is_empty(), "{name} extraction produced no patches");
        let wrong = m.entries().iter().filter(|e| label_of.get(e.slide_id.as_str()) != Some(&e.weak_label)).count();
        ensure!(wrong == 0, "{name}: {wrong} of {} patches carry a label other than their slide's", m.len());
        let missing = m.entries().iter().filter(|e| !d.join(&e.path).is_file()).count();
        ensure!(missing == 0, "{name}: {missing} patch files missing");
        summary.push(format!("{} {name}", m.len()));
    }
    Ok(format!("{} patches match their slide label ({} slides)", summary.join(" + "), slides.len()))
}

// 6 ------------------------------------------------------------------------

fn full_tissue_slide(textured: bool) -> Result<Slide, Error> {
    let mut r = rng(derive_seed(SEED, "full-tissue"));
    let img = RgbImage::from_fn(1000, 1000, |_, _| {
        let base = [100.0, 80.0, 120.0];
        let jitter = if textured { 25.0 } else { 0.0 };
        Rgb(base.map(|c: f64| (c + r.random_range(-jitter..=jitter)).round() as u8))
    });
    Slide::new("full", img, 20, CHL)
}

fn extraction_counts(_: &mut Ctx) -> Check {
    let otsu = TileConfig { workers: 1, ..TileConfig::default() };
    let fixed = TileConfig { threshold_mode: ThresholdMode::Fixed, ..otsu.clone() };
    let mut counts = Vec::new();
    for (slide, cfg) in [(full_tissue_slide(false)?, &otsu), (full_tissue_slide(true)?, &fixed)] {
        let mask = tissue_mask(&slide, cfg);
        let n = extract_grid_patches(&slide, &mask, cfg)?.len();
        ensure!(n == 100, "fully-tissue slide gave {n} grid patches");
        let region = extract_region_patches(&slide, &mask, &[Region::new(100, 200, 200, 300)], cfg)?;
        ensure!(region.len() == 6, "200x300 region gave {} patches", region.len());
        counts.push(n);
    }

    let slide = synthetic_slide("mixed", ALCL, 1000, derive_seed(SEED, "workers"));
    let regions = [Region::new(40, 60, 420, 380), Region::new(300, 300, 500, 400)];
    let mut lists = Vec::new();
    for w in [1, 8] {
        let cfg = TileConfig { workers: w, ..TileConfig::default() };
        let grid = extract_slide(&slide, ExtractionMethod::Grid, &[], &cfg)?;
        let region = extract_slide(&slide, ExtractionMethod::Region, &regions, &cfg)?;
        lists.push((grid, region));
    }
    ensure!(lists[0] == lists[1], "1-worker and 8-worker extractions differ");
    Ok(format!(
        "fully-tissue slide: {} grid patches (otsu and fixed), region 200x300: 6; workers 1 vs 8 identical ({} grid, {} region)",
        counts[0],
        lists[0].0.len(),
        lists[0].1.len()
    ))
}

// 7 ------------------------------------------------------------------------

fn production(ctx: &mut Ctx) -> Check {
    let ckpt = ctx.checkpoint.clone().ok_or("no checkpoint from the end-to-end run")?;
    let dir = ctx.dir.join("production");
    fs::create_dir_all(&dir)?;

    // a slide the model never saw, with a seed outside the training corpus
    let held = synthetic_slide("heldout", CHL, 1000, derive_seed(SEED, "held-out"));
    let slide_path = dir.join("heldout.png");
    held.pixels.save(&slide_path)?;
    let json = dir.join("heldout.json");
    let seed = SEED.to_string();
    let out = wsivit(&["--seed", &seed, "predict", "--checkpoint", p(&ckpt), "--slide", p(&slide_path), "--n", "5", "--json", p(&json)])?;
    let text = String::from_utf8(out.stdout)?;
    ensure!(
        matches!(out.status.code(), Some(0) | Some(3)),
        "predict failed with {}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr).trim()
    );
    let report: PredictionReport = serde_json::from_str(&fs::read_to_string(&json)?)?;
    let patch_lines = text.lines().filter(|l| l.starts_with("Predicted DX: ")).count();
    ensure!(patch_lines == 5, "{patch_lines} per-patch 'Predicted DX' lines");
    ensure!(text.contains("Predicted DX (with majority voting;"), "missing verdict header");
    let verdict_line = format!("  at least 3 out of 5): {}", report.diagnosis);
    ensure!(text.lines().any(|l| l == verdict_line), "missing verdict line {verdict_line:?}");
    ensure!(text.lines().any(|l| l.starts_with("Elapsed time: ") && l.ends_with(" seconds")), "missing elapsed time");
    ensure!(report.elapsed_seconds < 5.0, "prediction took {:.2} s", report.elapsed_seconds);

    let lib_vote = majority_vote(&[ALCL, ALCL, CHL, CHL], &VoteConfig { n_patches: 4, required_majority: 3, ..VoteConfig::default() })?;
    ensure!(lib_vote.verdict == Verdict::Indeterminate, "2-2 vote gave {:?}", lib_vote.verdict);

    // exactly four tissue squares on glass: two from a blob slide, two from a stripe slide
    let blob = synthetic_slide("b", ALCL, 1000, derive_seed(SEED, "tie-0"));
    let stripe = synthetic_slide("s", CHL, 1000, derive_seed(SEED, "tie-1"));
    let mut composite = RgbImage::from_pixel(400, 400, Rgb([250, 250, 252]));
    for (src, x, y) in [(&blob, 0, 0), (&blob, 200, 200), (&stripe, 200, 0), (&stripe, 0, 200)] {
        composite.copy_from(&*src.pixels.view(300 + x, 300 + y, 100, 100), x, y)?;
    }
    let tie_path = dir.join("tie.png");
    composite.save(&tie_path)?;
    let tie = wsivit(&["predict", "--checkpoint", p(&ckpt), "--slide", p(&tie_path), "--n", "4", "--majority", "3"])?;
    let tie_text = String::from_utf8(tie.stdout)?;
    ensure!(
        tie.status.code() == Some(3) && tie_text.contains("at least 3 out of 4): indeterminate"),
        "composite 2-2 slide: status {}, output {:?} {}",
        tie.status,
        tie_text.lines().filter(|l| l.starts_with("Predicted DX")).collect::<Vec<_>>(),
        String::from_utf8_lossy(&tie.stderr).trim()
    );
    Ok(format!(
        "held-out cHL slide -> {} (tally {:?}) in {:.2} s; 2-2 composite -> indeterminate, exit 3",
        report.diagnosis, report.tally, report.elapsed_seconds
    ))
}

// 8 ------------------------------------------------------------------------

fn checkpoints(ctx: &mut Ctx) -> Check {
    let original = match &ctx.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let cfg = ViTConfig::default();
            Checkpoint::new(cfg.clone(), ModelParams::init(&cfg, derive_seed(SEED, "ckpt"))?, SEED)
        }
    };
    let path = ctx.dir.join("roundtrip.ckpt");
    save_checkpoint(&original, &path)?;
    let back = load_checkpoint(&path)?;
    ensure!(back.config == original.config && back.label_map == original.label_map, "config or label map changed");
    let bits = |c: &Checkpoint| c.params.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<u32>>();
    let (a, b) = (bits(&original), bits(&back));
    ensure!(a == b, "parameters differ after the round trip");

    let bytes = fs::read(&path)?;
    let mut rejected = 0;
    for (what, offset) in [("payload", bytes.len() - 7), ("header", 140), ("payload start", bytes.len() - 4 * a.len())] {
        let mut bad = bytes.clone();
        bad[offset] ^= 0x5a;
        let bad_path = ctx.dir.join("corrupt.ckpt");
        fs::write(&bad_path, &bad)?;
        match load_checkpoint(&bad_path) {
            Err(Error::CheckpointChecksum) | Err(Error::CheckpointCorrupt(_)) => rejected += 1,
            other => return Err(format!("{what} flip at {offset}: {:?}", other.map(|_| ())).into()),
        }
    }
    let truncated = ctx.dir.join("truncated.ckpt");
    fs::write(&truncated, &bytes[..bytes.len() / 2])?;
    ensure!(load_checkpoint(&truncated).is_err(), "truncated checkpoint loaded");
    Ok(format!("{} parameters bit-exact; {rejected} corrupted copies and a truncated one rejected", a.len()))
}

// 9 ------------------------------------------------------------------------

fn leakage_modes(ctx: &mut Ctx) -> Check {
    corpus_patches(ctx)?;
    let manifest = ctx.manifest.clone().expect("corpus built");
    let plan = make_folds(&manifest, 10, SplitMode::SlideLevel, derive_seed(SEED, "folds"))?;
    // first fold whose held-out slides cover both classes, so AUC is defined
    let (fold, split) = (0..plan.k)
        .map(|f| plan.split_indices(&manifest, f).map(|s| (f, s)))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .find(|(_, s)| s.test.iter().map(|&i| manifest.entries()[i].weak_label).collect::<BTreeSet<_>>().len() == 2)
        .ok_or("no slide-level fold tests both classes")?;
    let slides = |idx: &[usize]| idx.iter().map(|&i| manifest.entries()[i].slide_id.clone()).collect::<BTreeSet<_>>();
    let (train_slides, test_slides) = (slides(&split.train), slides(&split.test));
    ensure!(train_slides.is_disjoint(&test_slides), "slide-level split shares slides");
    let n_test = split.test.len();
    let (_, report, _) = train_fold(ctx, split.train, split.test)?;
    ensure!(report.n_samples as usize == n_test, "slide-level report covers {} of {n_test}", report.n_samples);
    let patch = ctx.patch_level.as_ref().ok_or("no patch-level result from the end-to-end run")?;
    let fmt = |m: &MetricsReport| {
        format!("accuracy {:.4}, AUC {}", m.accuracy, m.auc.map_or("undefined".into(), |a| format!("{a:.4}")))
    };
    Ok(format!(
        "patch-level: {}; slide-level fold {fold} ({} held-out slides, {n_test} patches): {}",
        fmt(patch),
        test_slides.len(),
        fmt(&report)
    ))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let epochs = std::env::var("WSIVIT_ACCEPTANCE_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(5);
    let mut ctx = Ctx {
        dir: dir.path().to_path_buf(),
        epochs,
        patches: Vec::new(),
        manifest: None,
        checkpoint: None,
        patch_level: None,
    };
    let criteria: [(&str, fn(&mut Ctx) -> Check); 9] = [
        ("gradient correctness", gradients),
        ("metric oracle equivalence", metric_oracles),
        ("synthetic end-to-end", end_to_end),
        ("fold-plan invariants", fold_invariants),
        ("weak-label contract", weak_labels),
        ("extraction determinism and counts", extraction_counts),
        ("production module", production),
        ("checkpoint round trip", checkpoints),
        ("leakage study modes", leakage_modes),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut ctx))).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}").into())
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail} [{secs:.1} s]", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {} {name}: {e} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
