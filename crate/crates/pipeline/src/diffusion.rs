//! Edge-conditioned diffusion translator: two-phase training (unconditional
//! base, then the zero-gated edge branch) and deterministic DDIM sampling.
//!
//! Images are mapped to the symmetric model space `2 (p - lo) / (hi - lo) - 1`
//! for the network and mapped back (with clipping to the declared range)
//! when samples are materialized.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};
use sfda_core::domain::{EdgeMap, Image2D};
use sfda_core::edges::{annotation_threshold, canny};
use sfda_core::schedule::DiffusionSchedule;
use sfda_core::{seed, Grid2};

use crate::dataset::{Dataset, LabeledSample};
use crate::nn::unet::{init_control_from_base, CondUNet, UNetConfig};
use crate::nn::ParamStore;
use crate::store::append_jsonl;
use crate::tensor::{batch_to_grids, mask_to_tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TranslatorConfig {
    pub base_width: usize,
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Keep the base network frozen during phase 2 (the locked-copy
    /// behavior). Disable to update the entire conditioned model instead.
    pub lock_base: bool,
    /// Candidate Canny thresholds for annotation-driven edge extraction.
    pub edge_candidates: Vec<f32>,
    pub holdout_frac: f64,
    pub ddim_steps: usize,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            base_width: 64,
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            phase1_epochs: 400,
            phase2_epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            lock_base: true,
            edge_candidates: vec![30.0, 40.0, 50.0, 60.0, 70.0, 80.0],
            holdout_frac: 0.1,
            ddim_steps: 50,
        }
    }
}

/// One training-log line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub phase: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: TranslatorConfig,
    image_size: usize,
    seed: u64,
    config_hash: String,
}

pub struct Translator {
    ps: ParamStore,
    net: CondUNet,
    schedule: DiffusionSchedule,
    pub cfg: TranslatorConfig,
    pub image_size: usize,
}

/// Map an image into `[-1, 1]` model space.
fn to_model_space(image: &Image2D) -> Grid2<f32> {
    let (lo, hi) = image.value_range;
    let scale = 2.0 / (hi - lo);
    image.pixels.map(|p| (p - lo) * scale - 1.0)
}

fn batch_tensor(grids: &[&Grid2<f32>], device: &Device) -> Result<Tensor> {
    crate::tensor::grids_to_batch(grids, DType::F32, device)
}

/// Mean over the batch of the per-sample root-mean-square noise residual.
fn noise_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    let diff = (eps - eps_hat)?;
    let (_, c, h, w) = diff.dims4()?;
    let per_sample = diff.sqr()?.sum((1, 2, 3))?.sqrt()?;
    let norm = ((c * h * w) as f64).sqrt();
    Ok((per_sample / norm)?.mean_all()?)
}

struct NoisingDraw {
    ts: Vec<usize>,
    noise: Tensor,
    coeff_signal: Tensor,
    coeff_noise: Tensor,
}

fn draw_noising(
    schedule: &DiffusionSchedule,
    batch: usize,
    pixels: usize,
    size: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
    device: &Device,
) -> Result<NoisingDraw> {
    use rand_chacha::rand_core::RngCore;
    let mut ts = Vec::with_capacity(batch);
    let mut signal = Vec::with_capacity(batch);
    let mut noise_coeff = Vec::with_capacity(batch);
    for _ in 0..batch {
        let t = (rng.next_u64() % schedule.num_steps() as u64) as usize;
        let (sa, sn) = schedule.noising_coefficients(t)?;
        ts.push(t);
        signal.push(sa as f32);
        noise_coeff.push(sn as f32);
    }
    let mut noise = Vec::with_capacity(batch * pixels);
    for _ in 0..batch * pixels {
        noise.push(seed::standard_normal(rng));
    }
    Ok(NoisingDraw {
        ts,
        noise: Tensor::from_vec(noise, (batch, 1, size, size), device)?,
        coeff_signal: Tensor::from_vec(signal, (batch, 1, 1, 1), device)?,
        coeff_noise: Tensor::from_vec(noise_coeff, (batch, 1, 1, 1), device)?,
    })
}

impl Translator {
    /// Fresh (untrained) translator with the control branch attached.
    pub fn new(cfg: TranslatorConfig, image_size: usize, model_seed: u64) -> Result<Self> {
        let ps = ParamStore::new(model_seed, DType::F32, Device::Cpu);
        let net = CondUNet::new(
            &ps,
            UNetConfig {
                in_channels: 1,
                base_width: cfg.base_width,
            },
            true,
        )?;
        let schedule = DiffusionSchedule::linear(cfg.num_steps, cfg.beta_start, cfg.beta_end)?;
        Ok(Translator {
            ps,
            net,
            schedule,
            cfg,
            image_size,
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn net(&self) -> &CondUNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn save(&self, dir: &Path, config_hash: &str, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.ps.save(&dir.join("weights.safetensors"))?;
        let meta = CheckpointMeta {
            kind: "translator".to_string(),
            config: self.cfg.clone(),
            image_size: self.image_size,
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
        if meta.kind != "translator" {
            return Err(Error::stage(format!(
                "{} holds a {} checkpoint, expected a translator",
                dir.display(),
                meta.kind
            )));
        }
        let translator = Translator::new(meta.config, meta.image_size, meta.seed)?;
        translator.ps.load(&dir.join("weights.safetensors"))?;
        Ok(translator)
    }

    /// Stored config hash of a checkpoint directory.
    pub fn stored_hash(dir: &Path) -> Result<String> {
        let meta_path = dir.join("checkpoint.json");
        let meta: CheckpointMeta = serde_json::from_slice(
            &std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        Ok(meta.config_hash)
    }

    /// Deterministic DDIM (eta = 0) over a batch of edges, one derived seed
    /// per entry. The initial Gaussian draw is the only stochasticity.
    pub fn ddim_sample_batch(
        &self,
        edges: &[&EdgeMap],
        steps: usize,
        seeds: &[u64],
    ) -> Result<Vec<Image2D>> {
        if edges.is_empty() || edges.len() != seeds.len() {
            return Err(Error::stage("edges and seeds must be equal-length and nonempty"));
        }
        let timesteps = self.schedule.sampling_timesteps(steps)?;
        let device = self.ps.device().clone();
        let (h, w) = edges[0].shape();
        let pixels = h * w;

        let mut init = Vec::with_capacity(edges.len() * pixels);
        for &s in seeds {
            let mut rng = seed::rng(s);
            for _ in 0..pixels {
                init.push(seed::standard_normal(&mut rng));
            }
        }
        let mut x = Tensor::from_vec(init, (edges.len(), 1, h, w), &device)?;

        let mut edge_parts = Vec::with_capacity(edges.len());
        for e in edges {
            edge_parts.push(mask_to_tensor(&e.pixels, DType::F32, &device)?);
        }
        let edge_batch = Tensor::cat(&edge_parts, 0)?;

        for (k, &t) in timesteps.iter().enumerate() {
            let ts = vec![t; edges.len()];
            let eps_hat = self.net.forward(&x, &ts, Some(&edge_batch))?;
            let x_host = x.flatten_all()?.to_vec1::<f32>()?;
            let eps_host = eps_hat.flatten_all()?.to_vec1::<f32>()?;
            let t_prev = timesteps.get(k + 1).copied();
            let next = self.schedule.ddim_step(&x_host, &eps_host, t, t_prev)?;
            x = Tensor::from_vec(next, (edges.len(), 1, h, w), &device)?;
        }

        let grids = batch_to_grids(&x)?;
        Ok(grids
            .into_iter()
            .zip(seeds.iter())
            .map(|(g, s)| {
                let pixels = g.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0));
                Image2D::new(pixels, (0.0, 1.0), format!("gen-{s:016x}"))
            })
            .collect())
    }

    /// Single-edge deterministic sample.
    pub fn ddim_sample(&self, edge: &EdgeMap, steps: usize, sample_seed: u64) -> Result<Image2D> {
        Ok(self
            .ddim_sample_batch(&[edge], steps, &[sample_seed])?
            .remove(0))
    }

    /// The `n x samples_per_edge` generation grid; entry `(i, j)` uses the
    /// seed derived from `(master_seed, i, j)`.
    pub fn generate_grid(
        &self,
        edges: &[EdgeMap],
        samples_per_edge: usize,
        master_seed: u64,
    ) -> Result<Vec<Vec<Image2D>>> {
        let mut flat_edges = Vec::with_capacity(edges.len() * samples_per_edge);
        let mut seeds = Vec::with_capacity(edges.len() * samples_per_edge);
        for (i, e) in edges.iter().enumerate() {
            for j in 0..samples_per_edge {
                flat_edges.push(e);
                seeds.push(seed::mix(master_seed, &[i as u64, j as u64]));
            }
        }
        let flat = self.ddim_sample_batch(&flat_edges, self.cfg.ddim_steps, &seeds)?;
        let mut out = Vec::with_capacity(edges.len());
        let mut iter = flat.into_iter();
        for _ in 0..edges.len() {
            out.push((0..samples_per_edge).map(|_| iter.next().unwrap()).collect());
        }
        Ok(out)
    }
}

/// Annotation-driven training edges for the source set.
pub fn training_edges(samples: &[LabeledSample], candidates: &[f32]) -> Result<Vec<EdgeMap>> {
    samples
        .iter()
        .map(|s| {
            let t = annotation_threshold(&s.image, &s.mask, candidates)?;
            Ok(canny(&s.image, t)?)
        })
        .collect()
}

/// Two-phase training: fit the unconditional base, then attach the copied
/// control branch and fit it on edge-conditioned batches.
pub fn train_translator(
    ds: &Dataset,
    cfg: &TranslatorConfig,
    master_seed: u64,
    out_dir: &Path,
    config_hash: &str,
) -> Result<(Translator, Vec<TrainLogRecord>)> {
    let samples = ds.labeled_source_train()?;
    if samples.is_empty() {
        return Err(Error::stage("translator training requires source samples"));
    }
    let image_size = samples[0].image.shape().0;
    let translator = Translator::new(cfg.clone(), image_size, seed::mix_str(master_seed, "translator-init"))?;
    let device = translator.ps.device().clone();

    let edges = training_edges(&samples, &cfg.edge_candidates)?;
    let spaces: Vec<Grid2<f32>> = samples.iter().map(|s| to_model_space(&s.image)).collect();
    let (h, w) = spaces[0].shape();
    let pixels = h * w;

    // Fixed holdout split and fixed holdout noising draws.
    let mut split_rng = seed::rng(seed::mix_str(master_seed, "translator-split"));
    let mut order: Vec<usize> = (0..spaces.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut split_rng);
    let holdout_len = ((spaces.len() as f64 * cfg.holdout_frac).ceil() as usize)
        .clamp(1, spaces.len().saturating_sub(1).max(1));
    let (holdout_idx, train_idx) = order.split_at(holdout_len);

    let mut holdout_rng = seed::rng(seed::mix_str(master_seed, "translator-holdout"));
    let holdout_refs: Vec<&Grid2<f32>> = holdout_idx.iter().map(|&i| &spaces[i]).collect();
    let holdout_x = batch_tensor(&holdout_refs, &device)?;
    let holdout_draw = draw_noising(
        translator.schedule(),
        holdout_idx.len(),
        pixels,
        h,
        &mut holdout_rng,
        &device,
    )?;
    let holdout_edges = {
        let mut parts = Vec::new();
        for &i in holdout_idx {
            parts.push(mask_to_tensor(&edges[i].pixels, DType::F32, &device)?);
        }
        Tensor::cat(&parts, 0)?
    };
    let holdout_xt = holdout_x
        .broadcast_mul(&holdout_draw.coeff_signal)?
        .broadcast_add(&holdout_draw.noise.broadcast_mul(&holdout_draw.coeff_noise)?)?;

    let mut logs = Vec::new();
    let log_path = out_dir.join("train_log.jsonl");
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    for phase in [1u8, 2u8] {
        let epochs = if phase == 1 { cfg.phase1_epochs } else { cfg.phase2_epochs };
        if phase == 2 {
            init_control_from_base(&translator.ps)?;
        }
        let vars = if phase == 1 {
            translator.ps.vars_with_prefix(&["base.", "temb."])
        } else if cfg.lock_base {
            translator.ps.vars_with_prefix(&["ctrl."])
        } else {
            translator.ps.all_vars()
        };
        let mut optimizer = candle_nn::AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;

        for epoch in 0..epochs {
            let mut epoch_rng = seed::rng(seed::mix(
                seed::mix_str(master_seed, "translator-epoch"),
                &[phase as u64, epoch as u64],
            ));
            let mut idx = train_idx.to_vec();
            rand::seq::SliceRandom::shuffle(&mut idx[..], &mut epoch_rng);

            let mut epoch_loss = 0.0f64;
            let mut batches = 0usize;
            for chunk in idx.chunks(cfg.batch_size) {
                let refs: Vec<&Grid2<f32>> = chunk.iter().map(|&i| &spaces[i]).collect();
                let x = batch_tensor(&refs, &device)?;
                let draw = draw_noising(
                    translator.schedule(),
                    chunk.len(),
                    pixels,
                    h,
                    &mut epoch_rng,
                    &device,
                )?;
                let x_t = x
                    .broadcast_mul(&draw.coeff_signal)?
                    .broadcast_add(&draw.noise.broadcast_mul(&draw.coeff_noise)?)?;
                let edge_batch = if phase == 2 {
                    let mut parts = Vec::new();
                    for &i in chunk {
                        parts.push(mask_to_tensor(&edges[i].pixels, DType::F32, &device)?);
                    }
                    Some(Tensor::cat(&parts, 0)?)
                } else {
                    None
                };
                let eps_hat = translator.net.forward(&x_t, &draw.ts, edge_batch.as_ref())?;
                let loss = noise_loss(&draw.noise, &eps_hat)?;
                let loss_value = loss.to_scalar::<f32>()? as f64;
                if !loss_value.is_finite() {
                    return Err(Error::stage(format!(
                        "non-finite diffusion loss (phase {phase}, epoch {epoch}, batch {batches}); \
                         lower the learning rate or check the input normalization"
                    )));
                }
                optimizer.backward_step(&loss)?;
                epoch_loss += loss_value;
                batches += 1;
            }

            let edge_arg = if phase == 2 { Some(&holdout_edges) } else { None };
            let holdout_pred = translator.net.forward(&holdout_xt, &holdout_draw.ts, edge_arg)?;
            let holdout_loss =
                noise_loss(&holdout_draw.noise, &holdout_pred)?.to_scalar::<f32>()? as f64;
            let record = TrainLogRecord {
                phase,
                epoch,
                train_loss: epoch_loss / batches.max(1) as f64,
                holdout_loss,
            };
            log::info!(
                "translator phase {} epoch {}/{}: train {:.4} holdout {:.4}",
                phase,
                epoch + 1,
                epochs,
                record.train_loss,
                record.holdout_loss
            );
            append_jsonl(&log_path, &record)?;
            logs.push(record);
        }
    }

    translator.save(out_dir, config_hash, master_seed)?;
    Ok((translator, logs))
}

/// Write sweep edge maps for every sample of a dataset (the `edges` CLI).
pub fn write_sweep_edges(
    ds: &Dataset,
    sweep: &sfda_core::edges::ThresholdSweep,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for record in ds.records() {
        let image = crate::store::read_image(ds.root(), &record.id)?;
        for edge in sfda_core::edges::sweep_edges(&image, sweep)? {
            let path = out_dir
                .join(&record.id)
                .join(format!("edge_t{:.1}.arr", edge.threshold));
            crate::store::write_u8_grid(&path, &edge.pixels)?;
            written.push(path);
        }
    }
    Ok(written)
}
