//! Reliable-approximation search per target image: sweep edges, generate a
//! grid of translations, predict with uncertainty, refine, and select.
//!
//! The generation grid and the selection pass are staged separately on disk
//! so threshold-only ablations can reuse the (expensive) grids.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sfda_core::domain::{ApproximationResult, BinaryMask, EdgeMap, Generation, Image2D};
use sfda_core::edges::{sweep_edges, ThresholdSweep};
use sfda_core::selector::{edge_consistencies, refine_mask_with_band, select, SelectorConfig};
use sfda_core::{seed, Validate};

use crate::diffusion::Translator;
use crate::segmenter::Segmenter;
use crate::store::{append_jsonl, read_f32_grid, read_u8_grid, write_f32_grid, write_u8_grid};
use crate::{Error, Result};

/// Manifest line for one target image: outcome, provenance and (when
/// accepted) artifact paths.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApproxRecord {
    pub target_id: String,
    pub accepted: bool,
    /// Consistency of the chosen edge, or the minimum over edges on reject.
    pub r: f32,
    pub r_values: Vec<f32>,
    pub thresholds: Vec<f32>,
    pub edge_index: Option<usize>,
    pub threshold: Option<f32>,
    pub sample_index: Option<usize>,
    pub grid_seed: u64,
    pub t_un: f32,
    pub t_r: f32,
    pub n: usize,
    pub image_path: Option<String>,
    pub label_path: Option<String>,
    pub uncertainty_path: Option<String>,
    pub edge_path: Option<String>,
}

/// In-memory outcome of one approximation.
pub struct ApproxOutcome {
    pub result: ApproximationResult,
    pub r_values: Vec<f64>,
    pub thresholds: Vec<f32>,
    pub grid_seed: u64,
}

/// Predict, refine and select over an already-generated grid.
fn assemble_and_select(
    target_id: &str,
    edges: &[EdgeMap],
    images: &[Vec<Image2D>],
    segmenter: &Segmenter,
    sel: &SelectorConfig,
) -> Result<(ApproximationResult, Vec<f64>)> {
    let flat: Vec<&Image2D> = images.iter().flatten().collect();
    let predictions = segmenter.predict_batch(&flat)?;
    let mut predictions = predictions.into_iter();

    let mut grid: Vec<Vec<Generation>> = Vec::with_capacity(edges.len());
    for (i, row) in images.iter().enumerate() {
        let mut out_row = Vec::with_capacity(row.len());
        for (j, image) in row.iter().enumerate() {
            let (_, raw_mask, uncertainty) = predictions.next().expect("prediction per image");
            let refined =
                refine_mask_with_band(&raw_mask, &uncertainty, sel.t_un, sel.boundary_band_px)?;
            out_row.push(Generation {
                edge_index: i,
                sample_index: j,
                image: image.clone(),
                raw_mask,
                refined_mask: refined,
                uncertainty,
                edge: edges[i].clone(),
            });
        }
        grid.push(out_row);
    }
    let r_values = edge_consistencies(&grid, sel)?;
    let result = select(target_id, &grid, sel)?;
    debug_assert!(result.validate().is_pass());
    Ok((result, r_values))
}

/// Full in-memory approximation for one target image. Deterministic in
/// `(inputs, master_seed)`; the grid seed is derived from the target id.
pub fn approximate_one(
    target: &Image2D,
    translator: &Translator,
    segmenter: &Segmenter,
    sweep: &ThresholdSweep,
    sel: &SelectorConfig,
    master_seed: u64,
) -> Result<ApproxOutcome> {
    if sweep.n != sel.n {
        return Err(Error::stage(format!(
            "sweep has {} thresholds but the selector expects n = {}",
            sweep.n, sel.n
        )));
    }
    let edges = sweep_edges(target, sweep)?;
    let grid_seed = seed::mix_str(master_seed, &format!("grid:{}", target.id));
    let images = translator.generate_grid(&edges, sel.samples_per_edge, grid_seed)?;
    let (result, r_values) = assemble_and_select(&target.id, &edges, &images, segmenter, sel)?;
    Ok(ApproxOutcome {
        result,
        r_values,
        thresholds: edges.iter().map(|e| e.threshold).collect(),
        grid_seed,
    })
}

#[derive(Serialize, Deserialize, PartialEq)]
struct GridState {
    hash: String,
    count: usize,
}

fn state_matches(path: &Path, state: &GridState) -> bool {
    std::fs::read(path)
        .ok()
        .and_then(|bytes| serde_json::from_slice::<GridState>(&bytes).ok())
        .map(|s| s == *state)
        .unwrap_or(false)
}

fn grid_dir(dir: &Path, target_id: &str) -> PathBuf {
    dir.join("grids").join(target_id)
}

/// Generate (or reuse) the edge sweeps and generation grids for every
/// target, in parallel across targets.
pub fn ensure_grids(
    dir: &Path,
    targets: &[Image2D],
    translator: &Translator,
    sweep: &ThresholdSweep,
    samples_per_edge: usize,
    master_seed: u64,
    grid_hash: &str,
) -> Result<()> {
    let state = GridState {
        hash: grid_hash.to_string(),
        count: targets.len(),
    };
    let state_path = dir.join("grid_state.json");
    if state_matches(&state_path, &state) {
        log::info!("generation grids up to date at {}", dir.display());
        return Ok(());
    }
    targets.par_iter().try_for_each(|target| -> Result<()> {
        let edges = sweep_edges(target, sweep)?;
        let grid_seed = seed::mix_str(master_seed, &format!("grid:{}", target.id));
        let images = translator.generate_grid(&edges, samples_per_edge, grid_seed)?;
        let tdir = grid_dir(dir, &target.id);
        for (i, edge) in edges.iter().enumerate() {
            write_u8_grid(&tdir.join(format!("edge_{i}.arr")), &edge.pixels)?;
            for (j, image) in images[i].iter().enumerate() {
                write_f32_grid(&tdir.join(format!("img_{i}_{j}.arr")), &image.pixels)?;
            }
        }
        Ok(())
    })?;
    std::fs::write(&state_path, serde_json::to_vec_pretty(&state)?)
        .map_err(|e| Error::io(state_path, e))?;
    Ok(())
}

/// Run prediction + refinement + selection over staged grids, write chosen
/// artifacts and the approximation manifest, and return the records.
pub fn run_selection(
    dir: &Path,
    targets: &[Image2D],
    segmenter: &Segmenter,
    sweep: &ThresholdSweep,
    sel: &SelectorConfig,
    master_seed: u64,
) -> Result<Vec<ApproxRecord>> {
    let thresholds = sweep.thresholds();
    let outcomes: Vec<(String, ApproximationResult, Vec<f64>, u64)> = targets
        .par_iter()
        .map(|target| -> Result<_> {
            let tdir = grid_dir(dir, &target.id);
            let mut edges = Vec::with_capacity(sel.n);
            let mut images = Vec::with_capacity(sel.n);
            for i in 0..sel.n {
                let pixels = read_u8_grid(&tdir.join(format!("edge_{i}.arr")))?;
                edges.push(EdgeMap {
                    pixels,
                    threshold: thresholds[i],
                });
                let mut row = Vec::with_capacity(sel.samples_per_edge);
                for j in 0..sel.samples_per_edge {
                    let pixels = read_f32_grid(&tdir.join(format!("img_{i}_{j}.arr")))?;
                    row.push(Image2D::new(
                        pixels,
                        (0.0, 1.0),
                        format!("{}-g{i}{j}", target.id),
                    ));
                }
                images.push(row);
            }
            let (result, r_values) =
                assemble_and_select(&target.id, &edges, &images, segmenter, sel)?;
            let grid_seed = seed::mix_str(master_seed, &format!("grid:{}", target.id));
            Ok((target.id.clone(), result, r_values, grid_seed))
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest_path = dir.join("manifest.jsonl");
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let mut records = Vec::with_capacity(outcomes.len());
    for (target_id, result, r_values, grid_seed) in outcomes {
        let record = write_outcome(dir, &target_id, &result, &r_values, &thresholds, grid_seed, sel)?;
        append_jsonl(&manifest_path, &record)?;
        records.push(record);
    }
    Ok(records)
}

fn write_outcome(
    dir: &Path,
    target_id: &str,
    result: &ApproximationResult,
    r_values: &[f64],
    thresholds: &[f32],
    grid_seed: u64,
    sel: &SelectorConfig,
) -> Result<ApproxRecord> {
    let mut record = ApproxRecord {
        target_id: target_id.to_string(),
        accepted: result.accepted,
        r: result.consistency,
        r_values: r_values.iter().map(|&v| v as f32).collect(),
        thresholds: thresholds.to_vec(),
        edge_index: None,
        threshold: None,
        sample_index: None,
        grid_seed,
        t_un: sel.t_un,
        t_r: sel.t_r,
        n: sel.n,
        image_path: None,
        label_path: None,
        uncertainty_path: None,
        edge_path: None,
    };
    if let Some(chosen) = &result.chosen {
        let cdir = dir.join("chosen").join(target_id);
        let generation = &chosen.generation;
        write_f32_grid(&cdir.join("image.arr"), &generation.image.pixels)?;
        write_u8_grid(&cdir.join("label.arr"), &generation.refined_mask.pixels)?;
        write_f32_grid(&cdir.join("uncertainty.arr"), &generation.uncertainty.pixels)?;
        write_u8_grid(&cdir.join("edge.arr"), &generation.edge.pixels)?;
        record.edge_index = Some(chosen.edge_index);
        record.threshold = Some(thresholds[chosen.edge_index]);
        record.sample_index = Some(chosen.sample_index);
        let rel = |name: &str| {
            Some(
                PathBuf::from("chosen")
                    .join(target_id)
                    .join(name)
                    .display()
                    .to_string(),
            )
        };
        record.image_path = rel("image.arr");
        record.label_path = rel("label.arr");
        record.uncertainty_path = rel("uncertainty.arr");
        record.edge_path = rel("edge.arr");
    }
    Ok(record)
}

/// Load the chosen artifacts referenced by an accepted record.
pub fn load_chosen(dir: &Path, record: &ApproxRecord) -> Result<(Image2D, BinaryMask)> {
    let image_path = record
        .image_path
        .as_ref()
        .ok_or_else(|| Error::stage(format!("record {} has no artifacts", record.target_id)))?;
    let label_path = record
        .label_path
        .as_ref()
        .ok_or_else(|| Error::stage(format!("record {} has no label", record.target_id)))?;
    let pixels = read_f32_grid(&dir.join(image_path))?;
    let image = Image2D::new(pixels, (0.0, 1.0), format!("{}-chosen", record.target_id));
    let label = BinaryMask::new(read_u8_grid(&dir.join(label_path))?, record.target_id.clone());
    Ok((image, label))
}
