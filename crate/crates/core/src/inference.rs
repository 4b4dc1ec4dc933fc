//! Production diagnosis of an unseen slide by majority vote over a few
//! sampled patches.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation_err, Error, Result};
use crate::seed::rng;
use crate::tiling::{extract_slide, ExtractionMethod, PatchRecord, Slide, TileConfig};
use crate::training::{load_checkpoint, Checkpoint};
use crate::vit::forward_logits;
use crate::{class_name, ALCL, CHL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteConfig {
    pub n_patches: usize,
    pub required_majority: usize,
    pub seed: u64,
    /// Class whose probability is reported as the patch score.
    pub positive_class: u8,
}

impl Default for VoteConfig {
    fn default() -> Self {
        Self {
            n_patches: 5,
            required_majority: 3,
            seed: 0,
            positive_class: ALCL,
        }
    }
}

impl VoteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patches == 0 {
            return Err(validation_err!("at least one patch must be sampled"));
        }
        if self.required_majority > self.n_patches || 2 * self.required_majority <= self.n_patches {
            return Err(validation_err!(
                "required majority {} must exceed half of {} and not exceed it",
                self.required_majority,
                self.n_patches
            ));
        }
        if self.positive_class > 1 {
            return Err(validation_err!("positive class must be 0 or 1"));
        }
        Ok(())
    }
}

/// Seeded uniform sample without replacement from the slide's grid
/// candidates, returned in row-major order.
pub fn sample_patches(slide: &Slide, vote: &VoteConfig, tile: &TileConfig) -> Result<Vec<PatchRecord>> {
    vote.validate()?;
    let candidates = extract_slide(slide, ExtractionMethod::Grid, &[], tile)?;
    if candidates.len() < vote.n_patches {
        return Err(Error::InsufficientTissue {
            found: candidates.len(),
            needed: vote.n_patches,
        });
    }
    let mut picked = rand::seq::index::sample(&mut rng(vote.seed), candidates.len(), vote.n_patches).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| candidates[i].clone()).collect())
}

/// Argmax class (ties go to the lowest code) and the softmax probability
/// of `positive_class`.
pub fn classify_logits(logits: &[f32], positive_class: u8) -> Result<(u8, f64)> {
    if logits.is_empty() || positive_class as usize >= logits.len() {
        return Err(validation_err!(
            "{} logits cannot score class {positive_class}",
            logits.len()
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logits {logits:?}")));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    let max = logits[best] as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok((best as u8, exps[positive_class as usize] / total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPrediction {
    pub x: usize,
    pub y: usize,
    pub class: u8,
    pub score: f64,
}

pub fn predict_patch(ckpt: &Checkpoint, patch: &PatchRecord, positive_class: u8) -> Result<PatchPrediction> {
    if patch.size != ckpt.config.image_size {
        return Err(validation_err!(
            "patch is {0}x{0} but the model expects {1}x{1}",
            patch.size,
            ckpt.config.image_size
        ));
    }
    let logits = forward_logits::<f32>(&patch.pixels, &ckpt.params, &ckpt.config, None)?;
    let (class, score) = classify_logits(logits.data(), positive_class)?;
    Ok(PatchPrediction {
        x: patch.x,
        y: patch.y,
        class,
        score,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Diagnosis(u8),
    Indeterminate,
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Diagnosis(c) => class_name(*c),
            Verdict::Indeterminate => "indeterminate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    /// Votes per class code.
    pub tally: [usize; 2],
    pub verdict: Verdict,
}

/// A class wins only with at least `required_majority` votes.
pub fn majority_vote(classes: &[u8], vote: &VoteConfig) -> Result<VoteOutcome> {
    vote.validate()?;
    if classes.len() != vote.n_patches {
        return Err(validation_err!(
            "{} votes for a {}-patch vote",
            classes.len(),
            vote.n_patches
        ));
    }
    let mut tally = [0usize; 2];
    for &c in classes {
        *tally
            .get_mut(c as usize)
            .ok_or_else(|| validation_err!("vote for unknown class {c}"))? += 1;
    }
    let verdict = [ALCL, CHL]
        .into_iter()
        .find(|&c| tally[c as usize] >= vote.required_majority)
        .map_or(Verdict::Indeterminate, Verdict::Diagnosis);
    Ok(VoteOutcome { tally, verdict })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub slide_id: String,
    pub patches: Vec<PatchPrediction>,
    pub positive_class: u8,
    pub tally: [usize; 2],
    pub n_patches: usize,
    pub required_majority: usize,
    pub verdict: Verdict,
    pub diagnosis: String,
    pub elapsed_seconds: f64,
}

impl PredictionReport {
    pub fn is_indeterminate(&self) -> bool {
        self.verdict == Verdict::Indeterminate
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "DX code:");
        let _ = writeln!(s, "- Anaplastic large cell lymphoma->{ALCL}");
        let _ = writeln!(s, "- Classic Hodgkin lymphoma->{CHL}");
        let _ = writeln!(s, "***Sampled patches of slide {}", self.slide_id);
        let _ = writeln!(s, "   with the predicted DX of each:");
        let _ = writeln!(s, "+++++++");
        let positive = class_name(self.positive_class);
        for (i, p) in self.patches.iter().enumerate() {
            let _ = writeln!(s, "[patch {} at ({}, {}), P({positive}) = {:.3}]", i + 1, p.x, p.y, p.score);
            let _ = writeln!(s, "Predicted DX: {}", p.class);
        }
        let _ = writeln!(s, "+++++++");
        let _ = writeln!(s, "Predicted DX (with majority voting;");
        let _ = writeln!(
            s,
            "  at least {} out of {}): {}",
            self.required_majority, self.n_patches, self.diagnosis
        );
        let _ = writeln!(s, "+++++++");
        let _ = writeln!(s, "Elapsed time: {:.2} seconds", self.elapsed_seconds);
        s
    }
}

/// Samples, predicts and votes. `started` marks when the checkpoint began
/// loading; elapsed time runs from there to the end of this call.
pub fn produce_report(
    slide: &Slide,
    ckpt: &Checkpoint,
    vote: &VoteConfig,
    tile: &TileConfig,
    started: Instant,
) -> Result<(PredictionReport, String)> {
    let patches = sample_patches(slide, vote, tile)?;
    let predictions: Vec<PatchPrediction> = patches
        .par_iter()
        .map(|p| predict_patch(ckpt, p, vote.positive_class))
        .collect::<Result<_>>()?;
    let classes: Vec<u8> = predictions.iter().map(|p| p.class).collect();
    let outcome = majority_vote(&classes, vote)?;
    let mut report = PredictionReport {
        slide_id: slide.slide_id.clone(),
        patches: predictions,
        positive_class: vote.positive_class,
        tally: outcome.tally,
        n_patches: vote.n_patches,
        required_majority: vote.required_majority,
        verdict: outcome.verdict,
        diagnosis: outcome.verdict.label().to_string(),
        elapsed_seconds: 0.0,
    };
    report.elapsed_seconds = started.elapsed().as_secs_f64().max(1e-9);
    let text = report.render();
    Ok((report, text))
}

/// Loads a checkpoint and produces the report for `slide`, timing from
/// the start of the load.
pub fn run_production(
    checkpoint: &Path,
    slide: &Slide,
    vote: &VoteConfig,
    tile: &TileConfig,
) -> Result<(PredictionReport, String)> {
    let started = Instant::now();
    let ckpt = load_checkpoint(checkpoint)?;
    produce_report(slide, &ckpt, vote, tile, started)
}
