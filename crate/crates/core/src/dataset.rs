//! Patch manifests, fold plans and train/test splits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{validation_err, Error, Result};
use crate::seed::{derive_indexed, rng};
use crate::tiling::{ExtractionMethod, PatchRecord};

/// One line of the JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub patch_id: String,
    pub slide_id: String,
    pub path: String,
    pub weak_label: u8,
    pub method: ExtractionMethod,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    class_counts: BTreeMap<u8, usize>,
    method_counts: BTreeMap<ExtractionMethod, usize>,
}

impl DatasetManifest {
    /// Validates id uniqueness and tallies counts. Entry order is kept.
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        let mut class_counts = BTreeMap::new();
        let mut method_counts = BTreeMap::new();
        for e in &entries {
            if !seen.insert(e.patch_id.as_str()) {
                return Err(validation_err!("duplicate patch_id {:?}", e.patch_id));
            }
            if e.weak_label > 1 {
                return Err(validation_err!(
                    "patch {:?} has label {}, expected 0 or 1",
                    e.patch_id,
                    e.weak_label
                ));
            }
            *class_counts.entry(e.weak_label).or_insert(0) += 1;
            *method_counts.entry(e.method).or_insert(0) += 1;
        }
        Ok(Self {
            entries,
            class_counts,
            method_counts,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_counts(&self) -> &BTreeMap<u8, usize> {
        &self.class_counts
    }

    pub fn method_counts(&self) -> &BTreeMap<ExtractionMethod, usize> {
        &self.method_counts
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.weak_label).collect()
    }

    /// Distinct slide ids in order of first appearance.
    pub fn slide_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .map(|e| e.slide_id.as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
                validation_err!("{} line {}: {e}", path.display(), i + 1)
            })?;
            entries.push(entry);
        }
        Self::from_entries(entries)
    }
}

/// Manifest for patches saved as `{patch_dir}/{patch_id}.png`.
pub fn build_manifest(patches: &[PatchRecord], patch_dir: &Path) -> Result<DatasetManifest> {
    DatasetManifest::from_entries(
        patches
            .iter()
            .map(|p| ManifestEntry {
                patch_id: p.patch_id.clone(),
                slide_id: p.slide_id.clone(),
                path: patch_dir
                    .join(format!("{}.png", p.patch_id))
                    .to_string_lossy()
                    .into_owned(),
                weak_label: p.weak_label,
                method: p.method,
            })
            .collect(),
    )
}

/// `a` followed by `b`. Any shared patch id is an error.
pub fn merge_manifests(a: &DatasetManifest, b: &DatasetManifest) -> Result<DatasetManifest> {
    let ids: HashSet<&str> = a.entries.iter().map(|e| e.patch_id.as_str()).collect();
    if let Some(e) = b.entries.iter().find(|e| ids.contains(e.patch_id.as_str())) {
        return Err(validation_err!(
            "patch_id {:?} appears in both manifests",
            e.patch_id
        ));
    }
    let mut entries = a.entries.clone();
    entries.extend(b.entries.iter().cloned());
    DatasetManifest::from_entries(entries)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    PatchLevel,
    SlideLevel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub mode: SplitMode,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

/// Seeded shuffle of patches (or slides) followed by round-robin dealing
/// into `k` folds.
pub fn make_folds(manifest: &DatasetManifest, k: usize, mode: SplitMode, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(validation_err!("k must be at least 2, got {k}"));
    }
    let units: Vec<&str> = match mode {
        SplitMode::PatchLevel => manifest.entries.iter().map(|e| e.patch_id.as_str()).collect(),
        SplitMode::SlideLevel => manifest.slide_ids(),
    };
    if k > units.len() {
        let what = match mode {
            SplitMode::PatchLevel => "patches",
            SplitMode::SlideLevel => "slides",
        };
        return Err(validation_err!("k = {k} exceeds the {} available {what}", units.len()));
    }
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut rng(seed));
    let mut fold_of_unit = vec![0; units.len()];
    for (pos, &u) in order.iter().enumerate() {
        fold_of_unit[u] = pos % k;
    }
    let assignment = match mode {
        SplitMode::PatchLevel => units
            .iter()
            .zip(&fold_of_unit)
            .map(|(id, &f)| (id.to_string(), f))
            .collect(),
        SplitMode::SlideLevel => {
            let slide_fold: HashMap<&str, usize> =
                units.iter().copied().zip(fold_of_unit.iter().copied()).collect();
            manifest
                .entries
                .iter()
                .map(|e| (e.patch_id.clone(), slide_fold[e.slide_id.as_str()]))
                .collect()
        }
    };
    Ok(FoldPlan {
        k,
        mode,
        seed,
        assignment,
    })
}

impl FoldPlan {
    pub fn fold_of(&self, patch_id: &str) -> Option<usize> {
        self.assignment.get(patch_id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Manifest indices of the training and test side of `test_fold`.
    pub fn split_indices(&self, manifest: &DatasetManifest, test_fold: usize) -> Result<Split> {
        if test_fold >= self.k {
            return Err(validation_err!("fold {test_fold} does not exist (k = {})", self.k));
        }
        if manifest.len() != self.assignment.len() {
            return Err(validation_err!(
                "plan covers {} patches but the manifest has {}",
                self.assignment.len(),
                manifest.len()
            ));
        }
        let mut split = Split::default();
        for (i, e) in manifest.entries.iter().enumerate() {
            match self.fold_of(&e.patch_id) {
                Some(f) if f == test_fold => split.test.push(i),
                Some(f) if f < self.k => split.train.push(i),
                Some(f) => return Err(validation_err!("patch {:?} in fold {f} >= k", e.patch_id)),
                None => return Err(validation_err!("patch {:?} has no fold", e.patch_id)),
            }
        }
        Ok(split)
    }

    /// One split per fold, rotating the test fold.
    pub fn splits(&self, manifest: &DatasetManifest) -> Result<Vec<Split>> {
        (0..self.k).map(|f| self.split_indices(manifest, f)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = serde_json::from_str(&text)?;
        if let Some((id, f)) = plan.assignment.iter().find(|(_, &f)| f >= plan.k) {
            return Err(validation_err!("patch {id:?} assigned to fold {f} but k = {}", plan.k));
        }
        Ok(plan)
    }
}

/// Manifest indices on each side of one split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Training and test entries for `test_fold`.
pub fn materialize_split(
    manifest: &DatasetManifest,
    plan: &FoldPlan,
    test_fold: usize,
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    let s = plan.split_indices(manifest, test_fold)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| manifest.entries[i].clone()).collect();
    Ok((pick(&s.train), pick(&s.test)))
}

/// Repeated random holdout: each round draws a fresh seeded test set of
/// `test_fraction` of the units. Unlike k-fold rotation, some patches may
/// never be tested; the coverage fields report how many were.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutPlan {
    pub rounds: usize,
    pub test_fraction: f64,
    pub mode: SplitMode,
    pub seed: u64,
    pub test_sets: Vec<BTreeSet<String>>,
    /// Patches that landed in at least one test set.
    pub tested_patches: usize,
    pub total_patches: usize,
    pub coverage: f64,
}

pub fn repeated_holdout(
    manifest: &DatasetManifest,
    rounds: usize,
    test_fraction: f64,
    mode: SplitMode,
    seed: u64,
) -> Result<HoldoutPlan> {
    if rounds == 0 {
        return Err(validation_err!("at least one holdout round is required"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(validation_err!("test fraction {test_fraction} outside (0, 1)"));
    }
    let units: Vec<&str> = match mode {
        SplitMode::PatchLevel => manifest.entries.iter().map(|e| e.patch_id.as_str()).collect(),
        SplitMode::SlideLevel => manifest.slide_ids(),
    };
    let n_test = ((units.len() as f64 * test_fraction).round() as usize).max(1);
    if n_test >= units.len() {
        return Err(validation_err!(
            "{} units cannot leave a non-empty training side at fraction {test_fraction}",
            units.len()
        ));
    }
    let mut test_sets = Vec::with_capacity(rounds);
    let mut tested = HashSet::new();
    for round in 0..rounds {
        let mut order: Vec<usize> = (0..units.len()).collect();
        order.shuffle(&mut rng(derive_indexed(seed, round as u64)));
        let chosen: HashSet<&str> = order[..n_test].iter().map(|&i| units[i]).collect();
        let set: BTreeSet<String> = manifest
            .entries
            .iter()
            .filter(|e| match mode {
                SplitMode::PatchLevel => chosen.contains(e.patch_id.as_str()),
                SplitMode::SlideLevel => chosen.contains(e.slide_id.as_str()),
            })
            .map(|e| e.patch_id.clone())
            .collect();
        tested.extend(set.iter().cloned());
        test_sets.push(set);
    }
    let total = manifest.len();
    Ok(HoldoutPlan {
        rounds,
        test_fraction,
        mode,
        seed,
        test_sets,
        tested_patches: tested.len(),
        total_patches: total,
        coverage: if total == 0 { 0.0 } else { tested.len() as f64 / total as f64 },
    })
}

impl HoldoutPlan {
    pub fn splits(&self, manifest: &DatasetManifest) -> Vec<Split> {
        self.test_sets
            .iter()
            .map(|set| {
                let mut s = Split::default();
                for (i, e) in manifest.entries.iter().enumerate() {
                    if set.contains(&e.patch_id) {
                        s.test.push(i);
                    } else {
                        s.train.push(i);
                    }
                }
                s
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn toy(slides: usize, per_slide: usize) -> DatasetManifest {
        let entries = (0..slides)
            .flat_map(|s| {
                (0..per_slide).map(move |p| ManifestEntry {
                    patch_id: format!("s{s}_{p}"),
                    slide_id: format!("s{s}"),
                    path: format!("p/s{s}_{p}.png"),
                    weak_label: (s % 2) as u8,
                    method: ExtractionMethod::Grid,
                })
            })
            .collect();
        DatasetManifest::from_entries(entries).unwrap()
    }

    fn record(id: &str, label: u8) -> PatchRecord {
        PatchRecord {
            patch_id: id.into(),
            slide_id: "a".into(),
            x: 0,
            y: 0,
            size: 1,
            pixels: vec![0; 3],
            weak_label: label,
            method: ExtractionMethod::Region,
        }
    }

    #[test]
    fn build_examples() {
        let ten: Vec<_> = (0..10).map(|i| record(&format!("a_{i}"), 0)).collect();
        let m = build_manifest(&ten, Path::new("out")).unwrap();
        assert!(m.entries().iter().all(|e| e.weak_label == 0));
        assert_eq!(m.entries()[3].path, Path::new("out").join("a_3.png").to_string_lossy());
        let empty = build_manifest(&[], Path::new("x")).unwrap();
        assert!(empty.is_empty() && empty.class_counts().is_empty());
        let mixed: Vec<_> = (0..7).map(|i| record(&format!("m{i}"), (i >= 3) as u8)).collect();
        let m = build_manifest(&mixed, Path::new("")).unwrap();
        assert_eq!(m.class_counts(), &BTreeMap::from([(0, 3), (1, 4)]));
        assert_eq!(m.method_counts()[&ExtractionMethod::Region], 7);
        assert!(build_manifest(&[record("d", 0), record("d", 0)], Path::new("")).is_err());
    }

    #[test]
    fn merge_examples() {
        let x = toy(2, 3);
        assert_eq!(merge_manifests(&x, &DatasetManifest::default()).unwrap(), x);
        let y = DatasetManifest::from_entries(
            toy(2, 3).entries().iter().map(|e| ManifestEntry { patch_id: format!("y{}", e.patch_id), ..e.clone() }).collect(),
        )
        .unwrap();
        let m = merge_manifests(&x, &y).unwrap();
        assert_eq!(m.len(), 12);
        assert_eq!(m.class_counts().values().sum::<usize>(), 12);
        let err = merge_manifests(&x, &x).unwrap_err().to_string();
        assert!(err.contains("s0_0"), "{err}");
    }

    #[test]
    fn jsonl_round_trip_uses_exact_fields() {
        let m = toy(2, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        m.write_jsonl(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: BTreeSet<_> = first.as_object().unwrap().keys().cloned().collect();
        assert_eq!(
            keys,
            ["method", "patch_id", "path", "slide_id", "weak_label"].map(String::from).into()
        );
        assert_eq!(first["method"], "grid");
        assert_eq!(DatasetManifest::read_jsonl(&p).unwrap(), m);
        fs::write(&p, "{\"patch_id\":\"a\"}\n").unwrap();
        assert!(DatasetManifest::read_jsonl(&p).is_err());
    }

    #[test]
    fn fold_examples() {
        let m = toy(1, 100);
        let plan = make_folds(&m, 10, SplitMode::PatchLevel, 1).unwrap();
        assert_eq!(plan.fold_sizes(), vec![10; 10]);
        let m70 = toy(1, 70);
        assert_eq!(make_folds(&m70, 7, SplitMode::PatchLevel, 3).unwrap().fold_sizes(), vec![10; 7]);

        let two = toy(2, 5);
        let plan = make_folds(&two, 2, SplitMode::SlideLevel, 9).unwrap();
        for f in 0..2 {
            let (_, test) = materialize_split(&two, &plan, f).unwrap();
            assert_eq!(test.len(), 5);
            assert!(test.iter().all(|e| e.slide_id == test[0].slide_id));
        }
        assert!(make_folds(&two, 3, SplitMode::SlideLevel, 0).is_err());
        assert!(make_folds(&two, 11, SplitMode::PatchLevel, 0).is_err());
        assert!(make_folds(&two, 1, SplitMode::PatchLevel, 0).is_err());
    }

    #[test]
    fn split_examples() {
        let m = toy(4, 25);
        let plan = make_folds(&m, 10, SplitMode::PatchLevel, 4).unwrap();
        let mut seen = Vec::new();
        for f in 0..10 {
            let (train, test) = materialize_split(&m, &plan, f).unwrap();
            assert!(test.len().abs_diff(10) <= 1);
            assert_eq!(train.len() + test.len(), 100);
            seen.extend(test.into_iter().map(|e| e.patch_id));
        }
        seen.sort();
        let mut all: Vec<_> = m.entries().iter().map(|e| e.patch_id.clone()).collect();
        all.sort();
        assert_eq!(seen, all);

        let plan2 = make_folds(&m, 2, SplitMode::PatchLevel, 4).unwrap();
        let (tr0, te0) = materialize_split(&m, &plan2, 0).unwrap();
        let (tr1, te1) = materialize_split(&m, &plan2, 1).unwrap();
        assert_eq!((tr0, te0), (te1, tr1));
        assert!(materialize_split(&m, &plan2, 2).is_err());
        assert!(materialize_split(&toy(4, 24), &plan2, 0).is_err());
    }

    #[test]
    fn plan_file_round_trip() {
        let m = toy(3, 4);
        let plan = make_folds(&m, 3, SplitMode::SlideLevel, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plan.json");
        plan.save(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v["mode"], "slide_level");
        assert_eq!(v["assignment"]["s1_2"], plan.assignment["s1_2"]);
        assert_eq!(FoldPlan::load(&p).unwrap(), plan);
    }

    #[test]
    fn holdout_reports_coverage() {
        let m = toy(1, 100);
        let h = repeated_holdout(&m, 7, 0.1, SplitMode::PatchLevel, 5).unwrap();
        assert!(h.test_sets.iter().all(|s| s.len() == 10));
        assert!(h.tested_patches <= 70);
        assert_eq!(h.coverage, h.tested_patches as f64 / 100.0);
        for s in h.splits(&m) {
            assert_eq!(s.train.len() + s.test.len(), 100);
        }
        assert_eq!(h, repeated_holdout(&m, 7, 0.1, SplitMode::PatchLevel, 5).unwrap());

        let slides = toy(20, 3);
        let h = repeated_holdout(&slides, 3, 0.1, SplitMode::SlideLevel, 1).unwrap();
        for set in &h.test_sets {
            assert_eq!(set.len(), 6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn folds_partition_and_respect_slides(
            slides in 2usize..30, per in 1usize..12, k in 2usize..8, seed: u64,
        ) {
            let m = toy(slides, per);
            for mode in [SplitMode::PatchLevel, SplitMode::SlideLevel] {
                let Ok(plan) = make_folds(&m, k, mode, seed) else {
                    let population = if mode == SplitMode::SlideLevel { slides } else { slides * per };
                    prop_assert!(k > population);
                    continue;
                };
                prop_assert_eq!(&plan, &make_folds(&m, k, mode, seed).unwrap());
                prop_assert_eq!(plan.assignment.len(), m.len());
                let mut slide_fold = HashMap::new();
                for e in m.entries() {
                    let f = plan.fold_of(&e.patch_id).unwrap();
                    if mode == SplitMode::SlideLevel {
                        prop_assert_eq!(*slide_fold.entry(e.slide_id.clone()).or_insert(f), f);
                    }
                }
                if mode == SplitMode::PatchLevel {
                    let sizes = plan.fold_sizes();
                    prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
                }
            }
        }

        #[test]
        fn merge_is_associative(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
            let tag = |m: DatasetManifest, t: &str| DatasetManifest::from_entries(
                m.entries().iter().map(|e| ManifestEntry { patch_id: format!("{t}{}", e.patch_id), ..e.clone() }).collect(),
            ).unwrap();
            let (x, y, z) = (tag(toy(a, 2), "x"), tag(toy(b, 2), "y"), tag(toy(c, 2), "z"));
            let left = merge_manifests(&merge_manifests(&x, &y).unwrap(), &z).unwrap();
            let right = merge_manifests(&x, &merge_manifests(&y, &z).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }
    }
}
