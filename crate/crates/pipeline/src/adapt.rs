//! Fine-tuning on accepted approximations: one-pass batch-based adaptation
//! with per-batch prediction, and multi-epoch centralized adaptation.
//!
//! Neither entry point can reach target ground truth: they consume plain
//! target images plus artifacts produced by the approximation stage.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sfda_core::domain::{BinaryMask, Image2D};
use sfda_core::edges::ThresholdSweep;
use sfda_core::selector::SelectorConfig;
use sfda_core::{seed, Grid2};

use crate::approximate::approximate_one;
use crate::diffusion::Translator;
use crate::segmenter::{adaptation_pair, Segmenter};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    BatchBased,
    Centralized,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    /// Centralized only; batch-based adaptation is one pass by definition.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Also train on `(target image, pseudo-label)` pairs in addition to
    /// `(generated image, pseudo-label)`.
    pub include_target_pairs: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            mode: AdaptMode::Centralized,
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            include_target_pairs: true,
        }
    }
}

impl AdaptConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::stage("adaptation learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::stage("adaptation batch size must be positive"));
        }
        Ok(())
    }
}

/// One accepted approximation joined with its target image.
#[derive(Clone, Debug)]
pub struct AcceptedPair {
    pub target_id: String,
    pub edge_index: usize,
    pub sample_index: usize,
    pub generated: Image2D,
    pub label: BinaryMask,
    pub target_image: Image2D,
}

fn expand_pairs(pairs: &[AcceptedPair], include_target: bool) -> Vec<(Grid2<f32>, Grid2<u8>)> {
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        out.push(adaptation_pair(&p.generated, &p.label));
        if include_target {
            out.push(adaptation_pair(&p.target_image, &p.label));
        }
    }
    out
}

/// Deduplicate by `(target_id, edge_index, sample_index)`, keeping first.
pub fn dedup_pairs(pairs: Vec<AcceptedPair>) -> Vec<AcceptedPair> {
    let mut seen = BTreeSet::new();
    pairs
        .into_iter()
        .filter(|p| seen.insert((p.target_id.clone(), p.edge_index, p.sample_index)))
        .collect()
}

/// Multi-epoch supervised fine-tuning on all accepted pairs, with the same
/// objective as source training. Updates the segmenter weights in place.
pub fn adapt_centralized(
    segmenter: &Segmenter,
    pairs: Vec<AcceptedPair>,
    cfg: &AdaptConfig,
    run_seed: u64,
) -> Result<Vec<f64>> {
    cfg.check()?;
    let pairs = dedup_pairs(pairs);
    if pairs.is_empty() {
        return Err(Error::stage(
            "nothing to adapt: the approximation manifest has no accepted records",
        ));
    }
    let dataset = expand_pairs(&pairs, cfg.include_target_pairs);
    let mut optimizer = segmenter.make_optimizer(cfg.learning_rate)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = segmenter.run_epoch(
            &mut optimizer,
            &dataset,
            cfg.batch_size,
            seed::mix(run_seed, &[epoch as u64]),
        )?;
        log::info!("centralized adaptation epoch {}/{}: loss {:.4}", epoch + 1, cfg.epochs, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Prediction emitted for one target image during batch-based adaptation.
#[derive(Clone, Debug)]
pub struct BatchPrediction {
    pub target_id: String,
    pub mask: BinaryMask,
}

/// One pass over the target stream: approximate the current batch, take a
/// single optimizer step on its accepted pairs (skipped when none), then
/// predict that batch with the just-updated model. Order-dependent by
/// design; deterministic for a fixed stream order and seed.
#[allow(clippy::too_many_arguments)]
pub fn adapt_batch_based(
    segmenter: &Segmenter,
    targets: &[Image2D],
    translator: &Translator,
    sweep: &ThresholdSweep,
    sel: &SelectorConfig,
    cfg: &AdaptConfig,
    master_seed: u64,
) -> Result<Vec<BatchPrediction>> {
    cfg.check()?;
    if targets.is_empty() {
        return Err(Error::stage("batch-based adaptation requires a nonempty stream"));
    }
    let mut optimizer = segmenter.make_optimizer(cfg.learning_rate)?;
    let mut predictions = Vec::with_capacity(targets.len());
    for (batch_index, chunk) in targets.chunks(cfg.batch_size).enumerate() {
        let outcomes = chunk
            .par_iter()
            .map(|t| approximate_one(t, translator, segmenter, sweep, sel, master_seed))
            .collect::<Result<Vec<_>>>()?;
        let mut accepted = Vec::new();
        for (target, outcome) in chunk.iter().zip(outcomes.iter()) {
            if let Some(chosen) = &outcome.result.chosen {
                accepted.push(AcceptedPair {
                    target_id: target.id.clone(),
                    edge_index: chosen.edge_index,
                    sample_index: chosen.sample_index,
                    generated: chosen.generation.image.clone(),
                    label: chosen.generation.refined_mask.clone(),
                    target_image: target.clone(),
                });
            }
        }
        if !accepted.is_empty() {
            let pairs = expand_pairs(&accepted, cfg.include_target_pairs);
            let loss = segmenter.step_once(&mut optimizer, &pairs)?;
            log::info!(
                "batch {}: {} accepted, adaptation step loss {:.4}",
                batch_index,
                accepted.len(),
                loss
            );
        } else {
            log::info!("batch {}: no accepted approximations, step skipped", batch_index);
        }
        let refs: Vec<&Image2D> = chunk.iter().collect();
        for (target, (_, mask, _)) in chunk.iter().zip(segmenter.predict_batch(&refs)?) {
            predictions.push(BatchPrediction {
                target_id: target.id.clone(),
                mask,
            });
        }
    }
    Ok(predictions)
}
