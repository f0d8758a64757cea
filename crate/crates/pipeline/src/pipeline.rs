//! Stage orchestration: data, translator, segmenter, approximation,
//! adaptation and reports, with content-addressed stage reuse.
//!
//! Every stage directory carries a `state.json` with the digest of the
//! config sections it was built from. A rerun skips stages whose digest
//! matches; artifacts whose digest mismatches the current config are
//! reported and rebuilt before anything runs. Changing only selector
//! thresholds therefore reuses trained checkpoints and generation grids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfda_core::domain::{BinaryMask, Image2D};
use sfda_core::seed;

use crate::adapt::{adapt_batch_based, adapt_centralized, AcceptedPair, AdaptConfig};
use crate::approximate::{ensure_grids, load_chosen, run_selection, ApproxRecord};
use crate::config::{DataSource, ExperimentConfig};
use crate::dataset::{generate_dataset, Dataset, EvalGate};
use crate::diffusion::{train_translator, Translator};
use crate::evalrep::{approximation_quality, evaluate, EvalReport};
use crate::segmenter::{train_segmenter, Segmenter};
use crate::store::{append_jsonl, read_jsonl, read_u8_grid, write_u8_grid, Domain, Split};
use crate::{Error, Result};

#[derive(Serialize, Deserialize, PartialEq)]
struct StageState {
    hash: String,
}

fn read_state(dir: &Path) -> Option<String> {
    std::fs::read(dir.join("state.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<StageState>(&b).ok())
        .map(|s| s.hash)
}

fn mark_done(dir: &Path, hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("state.json");
    std::fs::write(
        &path,
        serde_json::to_vec_pretty(&StageState {
            hash: hash.to_string(),
        })?,
    )
    .map_err(|e| Error::io(path, e))
}

/// Paths of one experiment directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn translator(&self) -> PathBuf {
        self.root.join("translator")
    }

    pub fn segmenter(&self) -> PathBuf {
        self.root.join("segmenter")
    }

    pub fn approx(&self) -> PathBuf {
        self.root.join("approx")
    }

    pub fn adapt_centralized(&self) -> PathBuf {
        self.root.join("adapt_centralized")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn preds(&self, name: &str) -> PathBuf {
        self.reports().join(format!("preds_{name}"))
    }

    pub fn seed_log(&self) -> PathBuf {
        self.root.join("logs").join("seeds.jsonl")
    }
}

#[derive(Serialize)]
struct SeedLogRecord<'a> {
    stage: &'a str,
    seed: u64,
}

fn log_seed(layout: &Layout, stage: &str, seed: u64) -> Result<()> {
    append_jsonl(&layout.seed_log(), &SeedLogRecord { stage, seed })
}

/// Final pipeline summary: the three comparison reports plus the
/// approximation quality/quantity pair.
#[derive(Serialize, Deserialize)]
pub struct PipelineSummary {
    pub config_hash: String,
    pub quality_percent: Option<f64>,
    pub quantity: usize,
    pub source_only: EvalReport,
    pub batch_based: EvalReport,
    pub centralized: EvalReport,
}

struct StagePlan<'a> {
    name: &'a str,
    dir: PathBuf,
    hash: String,
}

/// Checks every existing stage against its expected digest; stale stages are
/// reported and removed so they rebuild.
fn prescan(plans: &[StagePlan]) -> Result<()> {
    for plan in plans {
        if let Some(found) = read_state(&plan.dir) {
            if found != plan.hash {
                log::warn!(
                    "stage `{}` at {} was built from a different configuration; rebuilding",
                    plan.name,
                    plan.dir.display()
                );
                std::fs::remove_dir_all(&plan.dir).map_err(|e| Error::io(&plan.dir, e))?;
            }
        }
    }
    Ok(())
}

fn stage_done(dir: &Path, hash: &str) -> bool {
    read_state(dir).as_deref() == Some(hash)
}

/// Ensure the dataset stage and return the opened dataset.
pub fn ensure_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Manifest => {
            let dir = cfg.data.manifest_dir.as_ref().ok_or_else(|| {
                Error::stage("data.source = \"manifest\" requires data.manifest_dir")
            })?;
            Dataset::open(dir)
        }
        DataSource::Synth => {
            let dir = layout.data();
            let hash = cfg.section_hash(&["data"]);
            if stage_done(&dir, &hash) {
                return Dataset::open(&dir);
            }
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            log_seed(layout, "data", cfg.seed)?;
            let ds = generate_dataset(&cfg.data.synth_config(cfg.seed), &dir, false)?;
            mark_done(&dir, &hash)?;
            Ok(ds)
        }
    }
}

pub fn ensure_translator(
    cfg: &ExperimentConfig,
    layout: &Layout,
    ds: &Dataset,
    master_seed: u64,
) -> Result<Translator> {
    let dir = layout.translator();
    let hash = cfg.section_hash(&["data", "translator"]);
    if stage_done(&dir, &hash) {
        log::info!("translator stage up to date");
        return Translator::load(&dir);
    }
    let stage_seed = seed::mix_str(master_seed, "stage-translator");
    log_seed(layout, "translator", stage_seed)?;
    let (translator, _) = train_translator(ds, &cfg.translator, stage_seed, &dir, &hash)?;
    mark_done(&dir, &hash)?;
    Ok(translator)
}

pub fn ensure_segmenter(
    cfg: &ExperimentConfig,
    layout: &Layout,
    ds: &Dataset,
    master_seed: u64,
) -> Result<Segmenter> {
    let dir = layout.segmenter();
    let hash = cfg.section_hash(&["data", "segmenter"]);
    if stage_done(&dir, &hash) {
        log::info!("segmenter stage up to date");
        return Segmenter::load(&dir);
    }
    let stage_seed = seed::mix_str(master_seed, "stage-segmenter");
    log_seed(layout, "segmenter", stage_seed)?;
    let samples = ds.labeled_source_train()?;
    let (segmenter, _) = train_segmenter(&samples, &cfg.segmenter, stage_seed, &dir, &hash)?;
    mark_done(&dir, &hash)?;
    Ok(segmenter)
}

/// Approximation over the target training split: grids then selection.
pub fn ensure_approximation(
    cfg: &ExperimentConfig,
    layout: &Layout,
    ds: &Dataset,
    translator: &Translator,
    segmenter: &Segmenter,
    master_seed: u64,
) -> Result<Vec<ApproxRecord>> {
    let dir = layout.approx();
    let sel_hash = cfg.section_hash(&["data", "translator", "segmenter", "selector"]);
    if stage_done(&dir, &sel_hash) {
        log::info!("approximation stage up to date");
        return read_jsonl(&dir.join("manifest.jsonl"));
    }
    let targets = ds.target_images(Split::Train)?;
    if targets.is_empty() {
        return Err(Error::stage("no target training images to approximate"));
    }
    let grid_hash = cfg.section_hash(&["data", "translator", "selector_grid"]);
    let stage_seed = seed::mix_str(master_seed, "stage-approx");
    log_seed(layout, "approx", stage_seed)?;
    let sweep = cfg.selector.sweep()?;
    let sel = cfg.selector.selector_config();
    ensure_grids(
        &dir,
        &targets,
        translator,
        &sweep,
        sel.samples_per_edge,
        stage_seed,
        &grid_hash,
    )?;
    let records = run_selection(&dir, &targets, segmenter, &sweep, &sel, stage_seed)?;
    mark_done(&dir, &sel_hash)?;
    Ok(records)
}

/// Join accepted records with their target images for fine-tuning.
pub fn accepted_pairs(
    approx_dir: &Path,
    records: &[ApproxRecord],
    targets: &[Image2D],
) -> Result<Vec<AcceptedPair>> {
    let by_id: BTreeMap<&str, &Image2D> =
        targets.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut pairs = Vec::new();
    for record in records.iter().filter(|r| r.accepted) {
        let target_image = by_id.get(record.target_id.as_str()).ok_or_else(|| {
            Error::stage(format!(
                "approximation record {} has no matching target image",
                record.target_id
            ))
        })?;
        let (generated, label) = load_chosen(approx_dir, record)?;
        pairs.push(AcceptedPair {
            target_id: record.target_id.clone(),
            edge_index: record.edge_index.unwrap_or(0),
            sample_index: record.sample_index.unwrap_or(0),
            generated,
            label,
            target_image: (*target_image).clone(),
        });
    }
    Ok(pairs)
}

fn predictions_to_disk(
    dir: &Path,
    predictions: &BTreeMap<String, BinaryMask>,
) -> Result<()> {
    for (id, mask) in predictions {
        write_u8_grid(&dir.join(format!("{id}.arr")), &mask.pixels)?;
    }
    Ok(())
}

/// Read a predictions directory written by [`predictions_to_disk`].
pub fn predictions_from_disk(dir: &Path) -> Result<BTreeMap<String, BinaryMask>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("arr") {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.insert(id.clone(), BinaryMask::new(read_u8_grid(&path)?, id));
        }
    }
    Ok(out)
}

fn predict_to_map(segmenter: &Segmenter, images: &[Image2D]) -> Result<BTreeMap<String, BinaryMask>> {
    let refs: Vec<&Image2D> = images.iter().collect();
    let mut out = BTreeMap::new();
    for (image, (_, mask, _)) in images.iter().zip(segmenter.predict_batch(&refs)?) {
        out.insert(image.id.clone(), mask);
    }
    Ok(out)
}

fn write_report(layout: &Layout, name: &str, report: &EvalReport) -> Result<()> {
    let dir = layout.reports();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(path, e))
}

/// Run every stage and emit the source-only / batch-based / centralized
/// comparison on the target test split.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<PipelineSummary> {
    let layout = Layout::new(out);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let master_seed = cfg.master_seed();
    let deterministic = cfg.deterministic.0;
    if !deterministic {
        log::warn!("non-deterministic mode: stage reuse disabled, per-run entropy mixed in");
    }

    let plans = vec![
        StagePlan {
            name: "data",
            dir: layout.data(),
            hash: cfg.section_hash(&["data"]),
        },
        StagePlan {
            name: "translator",
            dir: layout.translator(),
            hash: cfg.section_hash(&["data", "translator"]),
        },
        StagePlan {
            name: "segmenter",
            dir: layout.segmenter(),
            hash: cfg.section_hash(&["data", "segmenter"]),
        },
        StagePlan {
            name: "approx",
            dir: layout.approx(),
            hash: cfg.section_hash(&["data", "translator", "segmenter", "selector"]),
        },
        StagePlan {
            name: "adapt_centralized",
            dir: layout.adapt_centralized(),
            hash: cfg.section_hash(&["data", "translator", "segmenter", "selector", "adapt"]),
        },
        StagePlan {
            name: "reports",
            dir: layout.reports(),
            hash: cfg.section_hash(&[
                "data",
                "translator",
                "segmenter",
                "selector",
                "adapt",
                "eval",
            ]),
        },
    ];
    if deterministic {
        prescan(&plans)?;
    } else {
        for plan in &plans {
            if plan.dir.exists() {
                std::fs::remove_dir_all(&plan.dir).map_err(|e| Error::io(&plan.dir, e))?;
            }
        }
    }

    let config_path = out.join("config.resolved.toml");
    std::fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(config_path, e))?;

    let reports_hash = plans.last().expect("plans nonempty").hash.clone();
    if deterministic && stage_done(&layout.reports(), &reports_hash) {
        log::info!("all stages up to date; loading final reports");
        let summary_path = layout.reports().join("summary.json");
        let summary: PipelineSummary = serde_json::from_slice(
            &std::fs::read(&summary_path).map_err(|e| Error::io(&summary_path, e))?,
        )?;
        return Ok(summary);
    }

    let ds = ensure_data(cfg, &layout)?;
    let translator = ensure_translator(cfg, &layout, &ds, master_seed)?;
    let segmenter = ensure_segmenter(cfg, &layout, &ds, master_seed)?;
    let records = ensure_approximation(cfg, &layout, &ds, &translator, &segmenter, master_seed)?;

    let gate = EvalGate::for_evaluation();
    let test_images = ds.target_images(Split::Test)?;
    let test_masks = ds.eval_masks(Split::Test, Domain::Target, &gate)?;
    let spacing = cfg.eval.spacing_mm;
    let pop = cfg.eval.population_std;

    // Source-only baseline.
    let source_preds = predict_to_map(&segmenter, &test_images)?;
    let preds_dir = layout.preds("source_only");
    std::fs::create_dir_all(&preds_dir).map_err(|e| Error::io(&preds_dir, e))?;
    predictions_to_disk(&preds_dir, &source_preds)?;
    let source_only = evaluate(&source_preds, &test_masks, spacing, pop)?;
    write_report(&layout, "source_only", &source_only)?;

    // Approximation quality over the training-split manifest.
    let train_masks = ds.eval_masks(Split::Train, Domain::Target, &gate)?;
    let mut quality_pairs = Vec::new();
    for record in records.iter().filter(|r| r.accepted) {
        let (_, label) = load_chosen(&layout.approx(), record)?;
        if let Some(gt) = train_masks.get(&record.target_id) {
            quality_pairs.push((label, gt.clone()));
        }
    }
    let (quality_percent, quantity) = approximation_quality(&quality_pairs)?;

    // Centralized fine-tuning on all accepted pairs.
    let central_dir = layout.adapt_centralized();
    let central_hash = cfg.section_hash(&["data", "translator", "segmenter", "selector", "adapt"]);
    let central_model = if deterministic && stage_done(&central_dir, &central_hash) {
        Segmenter::load(&central_dir)?
    } else {
        let adapted = Segmenter::load(&layout.segmenter())?;
        let train_targets = ds.target_images(Split::Train)?;
        let pairs = accepted_pairs(&layout.approx(), &records, &train_targets)?;
        let adapt_seed = seed::mix_str(master_seed, "stage-adapt-centralized");
        log_seed(&layout, "adapt_centralized", adapt_seed)?;
        let cfg_central = AdaptConfig {
            mode: crate::adapt::AdaptMode::Centralized,
            ..cfg.adapt.clone()
        };
        adapt_centralized(&adapted, pairs, &cfg_central, adapt_seed)?;
        adapted.save(&central_dir, &central_hash, master_seed)?;
        mark_done(&central_dir, &central_hash)?;
        adapted
    };
    let central_preds = predict_to_map(&central_model, &test_images)?;
    let central_preds_dir = layout.preds("centralized");
    std::fs::create_dir_all(&central_preds_dir).map_err(|e| Error::io(&central_preds_dir, e))?;
    predictions_to_disk(&central_preds_dir, &central_preds)?;
    let centralized = evaluate(&central_preds, &test_masks, spacing, pop)?;
    write_report(&layout, "centralized", &centralized)?;

    // Batch-based adaptation over the test stream, manifest order.
    let batch_model = Segmenter::load(&layout.segmenter())?;
    let batch_seed = seed::mix_str(master_seed, "stage-adapt-batch");
    log_seed(&layout, "adapt_batch_based", batch_seed)?;
    let cfg_batch = AdaptConfig {
        mode: crate::adapt::AdaptMode::BatchBased,
        epochs: 1,
        ..cfg.adapt.clone()
    };
    let batch_predictions = adapt_batch_based(
        &batch_model,
        &test_images,
        &translator,
        &cfg.selector.sweep()?,
        &cfg.selector.selector_config(),
        &cfg_batch,
        batch_seed,
    )?;
    let batch_preds: BTreeMap<String, BinaryMask> = batch_predictions
        .into_iter()
        .map(|p| (p.target_id, p.mask))
        .collect();
    let batch_preds_dir = layout.preds("batch_based");
    std::fs::create_dir_all(&batch_preds_dir).map_err(|e| Error::io(&batch_preds_dir, e))?;
    predictions_to_disk(&batch_preds_dir, &batch_preds)?;
    let batch_based = evaluate(&batch_preds, &test_masks, spacing, pop)?;
    write_report(&layout, "batch_based", &batch_based)?;

    let summary = PipelineSummary {
        config_hash: cfg.config_hash(),
        quality_percent,
        quantity,
        source_only,
        batch_based,
        centralized,
    };
    let summary_path = layout.reports().join("summary.json");
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)
        .map_err(|e| Error::io(summary_path, e))?;
    if deterministic {
        mark_done(&layout.reports(), &reports_hash)?;
    }
    Ok(summary)
}

/// One row of an ablation table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblateRow {
    pub value: f64,
    pub quality_percent: Option<f64>,
    pub quantity: usize,
    pub dice: f64,
    pub assd: Option<f64>,
}

/// Re-run approximation + centralized adaptation + evaluation per value of
/// one hyper-parameter, reusing trained checkpoints (and generation grids
/// when the edge count is unchanged).
pub fn ablate(
    cfg: &ExperimentConfig,
    out: &Path,
    param: &str,
    values: &[f64],
) -> Result<Vec<AblateRow>> {
    let layout = Layout::new(out);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let master_seed = cfg.master_seed();

    let ds = ensure_data(cfg, &layout)?;
    let translator = ensure_translator(cfg, &layout, &ds, master_seed)?;
    let segmenter = ensure_segmenter(cfg, &layout, &ds, master_seed)?;

    let gate = EvalGate::for_evaluation();
    let test_images = ds.target_images(Split::Test)?;
    let test_masks = ds.eval_masks(Split::Test, Domain::Target, &gate)?;
    let train_masks = ds.eval_masks(Split::Train, Domain::Target, &gate)?;
    let train_targets = ds.target_images(Split::Train)?;

    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut run_cfg = cfg.clone();
        match param {
            "t_r" => run_cfg.selector.t_r = value as f32,
            "t_un" => run_cfg.selector.t_un = value as f32,
            "n" => run_cfg.selector.n = value as usize,
            other => {
                return Err(Error::stage(format!(
                    "unknown ablation parameter `{other}` (expected t_r, t_un or n)"
                )))
            }
        }
        let tag = format!("{param}_{value}");
        let approx_dir = out.join("ablate").join(&tag);

        let sweep = run_cfg.selector.sweep()?;
        let sel = run_cfg.selector.selector_config();
        let grid_hash = run_cfg.section_hash(&["data", "translator", "selector_grid"]);
        let stage_seed = seed::mix_str(master_seed, "stage-approx");
        // Reuse the main grids when the grid signature is unchanged.
        let grids_dir = if grid_hash == cfg.section_hash(&["data", "translator", "selector_grid"])
        {
            layout.approx()
        } else {
            approx_dir.clone()
        };
        ensure_grids(
            &grids_dir,
            &train_targets,
            &translator,
            &sweep,
            sel.samples_per_edge,
            stage_seed,
            &grid_hash,
        )?;
        let records = run_selection(&grids_dir, &train_targets, &segmenter, &sweep, &sel, stage_seed)?;
        // Persist this run's manifest under its own tag when grids are shared.
        let manifest_copy = approx_dir.join("manifest.jsonl");
        if grids_dir != approx_dir {
            std::fs::create_dir_all(&approx_dir).map_err(|e| Error::io(&approx_dir, e))?;
            std::fs::copy(grids_dir.join("manifest.jsonl"), &manifest_copy)
                .map_err(|e| Error::io(&manifest_copy, e))?;
        }

        let mut quality_pairs = Vec::new();
        for record in records.iter().filter(|r| r.accepted) {
            let (_, label) = load_chosen(&grids_dir, record)?;
            if let Some(gt) = train_masks.get(&record.target_id) {
                quality_pairs.push((label, gt.clone()));
            }
        }
        let (quality_percent, quantity) = approximation_quality(&quality_pairs)?;

        let adapted = Segmenter::load(&layout.segmenter())?;
        let pairs = accepted_pairs(&grids_dir, &records, &train_targets)?;
        let report = if pairs.is_empty() {
            // Nothing accepted: fall back to the unadapted model.
            let preds = predict_to_map(&segmenter, &test_images)?;
            evaluate(&preds, &test_masks, cfg.eval.spacing_mm, cfg.eval.population_std)?
        } else {
            adapt_centralized(
                &adapted,
                pairs,
                &run_cfg.adapt,
                seed::mix_str(master_seed, &format!("ablate-{tag}")),
            )?;
            let preds = predict_to_map(&adapted, &test_images)?;
            evaluate(&preds, &test_masks, cfg.eval.spacing_mm, cfg.eval.population_std)?
        };
        rows.push(AblateRow {
            value,
            quality_percent,
            quantity,
            dice: report.dice_mean,
            assd: report.assd_mean,
        });
    }

    let table_path = out.join(format!("ablate_{param}.json"));
    std::fs::write(&table_path, serde_json::to_vec_pretty(&rows)?)
        .map_err(|e| Error::io(table_path, e))?;
    Ok(rows)
}

/// Render an ablation table in the comparison style.
pub fn ablate_table(param: &str, rows: &[AblateRow]) -> String {
    let mut out = format!(
        "{param:>8} | Quality (%) | Quantity (n) | Dice (%) | ASSD (mm)\n{}\n",
        "-".repeat(64)
    );
    for row in rows {
        let quality = row
            .quality_percent
            .map(|q| format!("{q:.2}"))
            .unwrap_or_else(|| "-".to_string());
        let assd = row
            .assd
            .map(|a| format!("{a:.2}"))
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{:>8} | {:>11} | {:>12} | {:>8.2} | {:>9}\n",
            row.value, quality, row.quantity, row.dice, assd
        ));
    }
    out
}
