//! Evidential segmenter: training with the combined segmentation +
//! evidential objective, prediction with closed-form uncertainty, and
//! checkpointing.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};
use sfda_core::domain::{BinaryMask, Image2D, NIGField, UncertaintyMap};
use sfda_core::evidential::{predicted_mask, uncertainty, CE_EPS};
use sfda_core::{seed, Grid2};

use crate::dataset::LabeledSample;
use crate::nn::lgamma;
use crate::nn::segnet::{nig_heads, SegNet, SegNetConfig};
use crate::nn::ParamStore;
use crate::store::append_jsonl;
use crate::tensor::{grids_to_batch, mask_to_tensor, tensor_to_grid};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub base_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Evidence-regularizer weight (lambda).
    pub lambda_reg: f64,
    /// Weight of the evidential loss against the segmentation loss.
    pub loss_mix: f64,
    pub holdout_frac: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            base_width: 32,
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-4,
            lambda_reg: 0.01,
            loss_mix: 1.0,
            holdout_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegTrainLogRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_dice: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: SegmenterConfig,
    seed: u64,
    config_hash: String,
}

pub struct Segmenter {
    ps: ParamStore,
    net: SegNet,
    pub cfg: SegmenterConfig,
}

fn to_model_space(image: &Image2D) -> Grid2<f32> {
    let (lo, hi) = image.value_range;
    let scale = 2.0 / (hi - lo);
    image.pixels.map(|p| (p - lo) * scale - 1.0)
}

/// Cross-entropy + smoothed Dice on gamma clamped to `[0, 1]`; mirrors the
/// scalar reference implementation in `sfda_core::evidential`.
pub fn seg_loss_tensor(gamma: &Tensor, target: &Tensor) -> Result<Tensor> {
    let p = gamma.clamp(0.0, 1.0)?;
    let pc = p.clamp(CE_EPS, 1.0 - CE_EPS)?;
    let one_minus_y = target.affine(-1.0, 1.0)?;
    let ce = (target.mul(&pc.log()?)? + one_minus_y.mul(&pc.affine(-1.0, 1.0)?.log()?)?)?
        .neg()?
        .mean_all()?;
    let inter = target.mul(&p)?.sum((1, 2, 3))?;
    let ysum = target.sum((1, 2, 3))?;
    let psum = p.sum((1, 2, 3))?;
    let dice = (inter.affine(2.0, 1.0)?.div(&(ysum + psum)?.affine(1.0, 1.0)?)?)
        .affine(-1.0, 1.0)?
        .mean_all()?;
    Ok((ce + dice)?)
}

/// Evidential NIG negative log-likelihood plus the evidence regularizer;
/// mirrors `sfda_core::evidential::nig_loss`.
pub fn nig_loss_tensor(
    gamma: &Tensor,
    omega: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    target: &Tensor,
    lambda_reg: f64,
) -> Result<Tensor> {
    let residual = (target - gamma)?;
    let big_omega = beta.mul(&omega.affine(1.0, 1.0)?)?.affine(2.0, 0.0)?;
    let s = residual.sqr()?.mul(omega)?.add(&big_omega)?;
    let ln_pi = std::f64::consts::PI.ln();
    let nll = (omega.log()?.affine(-0.5, 0.5 * ln_pi)?
        - alpha.mul(&big_omega.log()?)?)?
        .add(&alpha.affine(1.0, 0.5)?.mul(&s.log()?)?)?
        .add(&lgamma(alpha)?)?
        .sub(&lgamma(&alpha.affine(1.0, 0.5)?)?)?
        .mean_all()?;
    let reg = residual
        .abs()?
        .mul(&(omega.affine(2.0, 0.0)? + alpha)?)?
        .mean_all()?;
    Ok((nll + reg.affine(lambda_reg, 0.0)?)?)
}

/// Total objective: `L_seg + loss_mix * L_un`.
pub fn total_loss_tensor(
    raw: &Tensor,
    target: &Tensor,
    lambda_reg: f64,
    loss_mix: f64,
) -> Result<Tensor> {
    let (gamma, omega, alpha, beta) = nig_heads(raw)?;
    let seg = seg_loss_tensor(&gamma, target)?;
    let nig = nig_loss_tensor(&gamma, &omega, &alpha, &beta, target, lambda_reg)?;
    Ok((seg + nig.affine(loss_mix, 0.0)?)?)
}

impl Segmenter {
    pub fn new(cfg: SegmenterConfig, model_seed: u64) -> Result<Self> {
        let ps = ParamStore::new(model_seed, DType::F32, Device::Cpu);
        let net = SegNet::new(
            &ps,
            SegNetConfig {
                in_channels: 1,
                base_width: cfg.base_width,
            },
        )?;
        Ok(Segmenter { ps, net, cfg })
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    /// Per-pixel evidence field, binarized mask (`gamma > 0.5`, strict) and
    /// the closed-form uncertainty map for one image.
    pub fn predict(&self, image: &Image2D) -> Result<(NIGField, BinaryMask, UncertaintyMap)> {
        let mut out = self.predict_batch(&[image])?;
        Ok(out.remove(0))
    }

    pub fn predict_batch(
        &self,
        images: &[&Image2D],
    ) -> Result<Vec<(NIGField, BinaryMask, UncertaintyMap)>> {
        let spaces: Vec<Grid2<f32>> = images.iter().map(|i| to_model_space(i)).collect();
        let refs: Vec<&Grid2<f32>> = spaces.iter().collect();
        let x = grids_to_batch(&refs, DType::F32, self.ps.device())?;
        let raw = self.net.forward(&x)?;
        let (gamma, omega, alpha, beta) = nig_heads(&raw)?;
        let mut out = Vec::with_capacity(images.len());
        for (i, image) in images.iter().enumerate() {
            let field = NIGField {
                gamma: tensor_to_grid(&gamma.narrow(0, i, 1)?)?,
                omega: tensor_to_grid(&omega.narrow(0, i, 1)?)?,
                alpha: tensor_to_grid(&alpha.narrow(0, i, 1)?)?,
                beta: tensor_to_grid(&beta.narrow(0, i, 1)?)?,
            };
            let mask = predicted_mask(&field, image.id.clone());
            let unc = uncertainty(&field);
            out.push((field, mask, unc));
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path, config_hash: &str, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.ps.save(&dir.join("weights.safetensors"))?;
        let meta = CheckpointMeta {
            kind: "segmenter".to_string(),
            config: self.cfg.clone(),
            seed,
            config_hash: config_hash.to_string(),
        };
        let path = dir.join("checkpoint.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("checkpoint.json");
        let meta: CheckpointMeta = serde_json::from_slice(
            &std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        if meta.kind != "segmenter" {
            return Err(Error::stage(format!(
                "{} holds a {} checkpoint, expected a segmenter",
                dir.display(),
                meta.kind
            )));
        }
        let seg = Segmenter::new(meta.config, meta.seed)?;
        seg.ps.load(&dir.join("weights.safetensors"))?;
        Ok(seg)
    }

    pub fn stored_hash(dir: &Path) -> Result<String> {
        let meta_path = dir.join("checkpoint.json");
        let meta: CheckpointMeta = serde_json::from_slice(
            &std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        Ok(meta.config_hash)
    }

    /// Fresh AdamW over all parameters. Callers own the optimizer so moment
    /// state persists across epochs (and across batches in the online
    /// adaptation mode).
    pub fn make_optimizer(&self, learning_rate: f64) -> Result<candle_nn::AdamW> {
        Ok(candle_nn::AdamW::new(
            self.ps.all_vars(),
            ParamsAdamW {
                lr: learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?)
    }

    /// One optimizer step over the given pairs. Returns the loss value.
    pub fn step_once(
        &self,
        optimizer: &mut candle_nn::AdamW,
        pairs: &[(Grid2<f32>, Grid2<u8>)],
    ) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::stage("no pairs for an update step"));
        }
        let device = self.ps.device().clone();
        let image_refs: Vec<&Grid2<f32>> = pairs.iter().map(|p| &p.0).collect();
        let x = grids_to_batch(&image_refs, DType::F32, &device)?;
        let mut mask_parts = Vec::with_capacity(pairs.len());
        for p in pairs {
            mask_parts.push(mask_to_tensor(&p.1, DType::F32, &device)?);
        }
        let y = Tensor::cat(&mask_parts, 0)?;
        let raw = self.net.forward(&x)?;
        let loss = total_loss_tensor(&raw, &y, self.cfg.lambda_reg, self.cfg.loss_mix)?;
        let loss_value = loss.to_scalar::<f32>()? as f64;
        if !loss_value.is_finite() {
            return Err(Error::stage("non-finite adaptation loss"));
        }
        optimizer.backward_step(&loss)?;
        Ok(loss_value)
    }

    /// One shuffled epoch over `pairs`; returns the mean batch loss.
    pub fn run_epoch(
        &self,
        optimizer: &mut candle_nn::AdamW,
        pairs: &[(Grid2<f32>, Grid2<u8>)],
        batch_size: usize,
        epoch_seed: u64,
    ) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::stage("no training pairs"));
        }
        let mut rng = seed::rng(epoch_seed);
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut idx[..], &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(batch_size) {
            let batch: Vec<(Grid2<f32>, Grid2<u8>)> = chunk
                .iter()
                .map(|&i| (pairs[i].0.clone(), pairs[i].1.clone()))
                .collect();
            epoch_loss += self.step_once(optimizer, &batch)?;
            batches += 1;
        }
        Ok(epoch_loss / batches.max(1) as f64)
    }
}

/// Pair a labeled sample into model-space image and binary target.
pub fn training_pair(sample: &LabeledSample) -> (Grid2<f32>, Grid2<u8>) {
    (to_model_space(&sample.image), sample.mask.pixels.clone())
}

/// Normalize an image for adaptation pairs.
pub fn adaptation_pair(image: &Image2D, label: &BinaryMask) -> (Grid2<f32>, Grid2<u8>) {
    (to_model_space(image), label.pixels.clone())
}

/// Train on labeled source pairs with a holdout Dice report per epoch.
/// On a non-finite loss the last epoch checkpoint stays on disk.
pub fn train_segmenter(
    samples: &[LabeledSample],
    cfg: &SegmenterConfig,
    master_seed: u64,
    out_dir: &Path,
    config_hash: &str,
) -> Result<(Segmenter, Vec<SegTrainLogRecord>)> {
    if samples.is_empty() {
        return Err(Error::stage("segmenter training requires labeled samples"));
    }
    let segmenter = Segmenter::new(cfg.clone(), seed::mix_str(master_seed, "segmenter-init"))?;

    let mut split_rng = seed::rng(seed::mix_str(master_seed, "segmenter-split"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut split_rng);
    let holdout_len = ((samples.len() as f64 * cfg.holdout_frac).ceil() as usize)
        .clamp(1, samples.len().saturating_sub(1).max(1));
    let (holdout_idx, train_idx) = order.split_at(holdout_len);

    let train_pairs: Vec<(Grid2<f32>, Grid2<u8>)> = train_idx
        .iter()
        .map(|&i| training_pair(&samples[i]))
        .collect();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut logs = Vec::new();
    let mut optimizer = segmenter.make_optimizer(cfg.learning_rate)?;
    for epoch in 0..cfg.epochs {
        // On a non-finite loss this errors out and the last epoch's
        // checkpoint stays on disk as the last-good state.
        let train_loss = segmenter.run_epoch(
            &mut optimizer,
            &train_pairs,
            cfg.batch_size,
            seed::mix(seed::mix_str(master_seed, "segmenter-epoch"), &[epoch as u64]),
        )?;
        let holdout_dice = holdout_mean_dice(&segmenter, samples, holdout_idx)?;
        segmenter.save(out_dir, config_hash, master_seed)?;
        let record = SegTrainLogRecord {
            epoch,
            train_loss,
            holdout_dice,
        };
        log::info!(
            "segmenter epoch {}/{}: loss {:.4} holdout dice {:.4}",
            epoch + 1,
            cfg.epochs,
            record.train_loss,
            record.holdout_dice
        );
        append_jsonl(&log_path, &record)?;
        logs.push(record);
    }
    segmenter.save(out_dir, config_hash, master_seed)?;
    Ok((segmenter, logs))
}

/// Mean Dice of the segmenter over held-out labeled samples.
pub fn holdout_mean_dice(
    segmenter: &Segmenter,
    samples: &[LabeledSample],
    idx: &[usize],
) -> Result<f64> {
    let images: Vec<&Image2D> = idx.iter().map(|&i| &samples[i].image).collect();
    if images.is_empty() {
        return Ok(f64::NAN);
    }
    let preds = segmenter.predict_batch(&images)?;
    let mut sum = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        sum += sfda_core::metrics::dice(&preds[k].1, &samples[i].mask)?;
    }
    Ok(sum / idx.len() as f64)
}
