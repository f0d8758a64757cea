//! `sfda` — train, translate, select, adapt and evaluate from the shell.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sfda_core::edges::ThresholdSweep;
use sfda_pipeline::adapt::{adapt_batch_based, adapt_centralized, AdaptMode};
use sfda_pipeline::approximate::{ensure_grids, run_selection};
use sfda_pipeline::config::ExperimentConfig;
use sfda_pipeline::dataset::{generate_dataset, Dataset, EvalGate};
use sfda_pipeline::diffusion::{train_translator, write_sweep_edges, Translator};
use sfda_pipeline::evalrep::evaluate;
use sfda_pipeline::pipeline::{ablate, ablate_table, accepted_pairs, predictions_from_disk, run_pipeline, Layout};
use sfda_pipeline::segmenter::{train_segmenter, Segmenter};
use sfda_pipeline::store::{read_jsonl, read_u8_grid, write_u8_grid, Domain, Split};

#[derive(Parser)]
#[command(name = "sfda", about = "Source-free domain adaptation for lesion segmentation", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bitwise-reproducible runs (default). Disable to mix per-run entropy.
    #[arg(long, global = true)]
    deterministic: Option<bool>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl GlobalArgs {
    fn load_config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_toml_path(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(det) = self.deterministic {
            cfg.deterministic = sfda_pipeline::config::Deterministic(det);
        }
        Ok(cfg)
    }

    fn out_dir(&self, flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
        flag.or_else(|| self.out.clone())
            .context("an output directory is required (--out)")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired synthetic benchmark.
    SynthData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 400)]
        n_source: usize,
        #[arg(long, default_value_t = 400)]
        n_target: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
        #[arg(long)]
        overwrite: bool,
    },
    /// Write sweep edge maps alongside a dataset's samples.
    Edges {
        #[arg(long = "in")]
        input: PathBuf,
        /// lo:hi:n
        #[arg(long, default_value = "30:80:2")]
        sweep: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-phase training of the edge-conditioned diffusion translator.
    TrainTranslator {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        phase1_epochs: Option<usize>,
        #[arg(long)]
        phase2_epochs: Option<usize>,
        /// Update the base network in phase 2 instead of keeping it locked.
        #[arg(long)]
        unlock_base: bool,
    },
    /// Train the evidential segmenter on labeled source data.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Sample translations from stored edge maps.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of `.arr` edge maps.
        #[arg(long)]
        edges: PathBuf,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        samples: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Edge sweep, generation grid and reliability selection per target.
    Approximate {
        #[arg(long)]
        translator: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        /// Dataset directory; the target training split is approximated.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        t_un: Option<f32>,
        #[arg(long)]
        t_r: Option<f32>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the segmenter on accepted approximations.
    Adapt {
        #[arg(long, value_enum)]
        mode: CliAdaptMode,
        /// Approximation directory (centralized mode).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Dataset directory with the target stream (batch-based mode).
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        translator: Option<PathBuf>,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory providing ground truth.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: CliSplit,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hyper-parameter sweep: rerun approximation + centralized adaptation.
    Ablate {
        /// One of t_r, t_un, n.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The full chain: data, training, approximation, adaptation, reports.
    Pipeline {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum CliAdaptMode {
    Centralized,
    BatchBased,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum CliSplit {
    Train,
    Test,
}

fn parse_sweep(text: &str) -> anyhow::Result<ThresholdSweep> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        bail!("sweep must be lo:hi:n, got `{text}`");
    }
    Ok(ThresholdSweep::new(
        parts[0].parse().context("sweep lo")?,
        parts[1].parse().context("sweep hi")?,
        parts[2].parse().context("sweep n")?,
    )?)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let cfg = cli.global.load_config()?;
    let master_seed = cfg.master_seed();

    match cli.command {
        Command::SynthData {
            out,
            size,
            n_source,
            n_target,
            n_test,
            overwrite,
        } => {
            let out = cli.global.out_dir(out)?;
            let mut synth = cfg.data.synth_config(cfg.seed);
            synth.image_size = size;
            synth.num_train_source = n_source;
            synth.num_train_target = n_target;
            synth.num_test_target = n_test;
            let ds = generate_dataset(&synth, &out, overwrite)?;
            println!("wrote {} samples to {}", ds.records().len(), out.display());
            for (key, count) in ds.split_counts() {
                println!("  {:?}: {count}", key);
            }
        }
        Command::Edges { input, sweep, out } => {
            let out = cli.global.out_dir(out).unwrap_or_else(|_| input.clone());
            let ds = Dataset::open(&input)?;
            let sweep = parse_sweep(&sweep)?;
            let written = write_sweep_edges(&ds, &sweep, &out)?;
            println!("wrote {} edge maps under {}", written.len(), out.display());
        }
        Command::TrainTranslator {
            data,
            out,
            phase1_epochs,
            phase2_epochs,
            unlock_base,
        } => {
            let out = cli.global.out_dir(out)?;
            let ds = Dataset::open(&data)?;
            let mut tcfg = cfg.translator.clone();
            if let Some(e) = phase1_epochs {
                tcfg.phase1_epochs = e;
            }
            if let Some(e) = phase2_epochs {
                tcfg.phase2_epochs = e;
            }
            if unlock_base {
                tcfg.lock_base = false;
            }
            let hash = cfg.section_hash(&["data", "translator"]);
            let (_, logs) = train_translator(&ds, &tcfg, master_seed, &out, &hash)?;
            if let Some(last) = logs.last() {
                println!(
                    "translator trained: final loss {:.4} (holdout {:.4})",
                    last.train_loss, last.holdout_loss
                );
            }
        }
        Command::TrainSeg {
            data,
            out,
            epochs,
            lambda,
        } => {
            let out = cli.global.out_dir(out)?;
            let ds = Dataset::open(&data)?;
            let mut scfg = cfg.segmenter.clone();
            if let Some(e) = epochs {
                scfg.epochs = e;
            }
            if let Some(l) = lambda {
                scfg.lambda_reg = l;
            }
            let samples = ds.labeled_source_train()?;
            let hash = cfg.section_hash(&["data", "segmenter"]);
            let (_, logs) = train_segmenter(&samples, &scfg, master_seed, &out, &hash)?;
            if let Some(last) = logs.last() {
                println!(
                    "segmenter trained: loss {:.4}, holdout dice {:.4}",
                    last.train_loss, last.holdout_dice
                );
            }
        }
        Command::Generate {
            ckpt,
            edges,
            n,
            samples,
            steps,
            out,
        } => {
            let out = cli.global.out_dir(out)?;
            let translator = Translator::load(&ckpt)?;
            let mut edge_files: Vec<PathBuf> = std::fs::read_dir(&edges)
                .with_context(|| format!("reading {}", edges.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("arr"))
                .collect();
            edge_files.sort();
            edge_files.truncate(n);
            if edge_files.is_empty() {
                bail!("no .arr edge maps found in {}", edges.display());
            }
            std::fs::create_dir_all(&out)?;
            for path in &edge_files {
                let pixels = read_u8_grid(path)?;
                let edge = sfda_core::domain::EdgeMap {
                    pixels,
                    threshold: 0.0,
                };
                let stem = path.file_stem().unwrap().to_string_lossy().to_string();
                for j in 0..samples {
                    let seed = sfda_core::seed::mix_str(master_seed, &format!("{stem}:{j}"));
                    let image = translator.ddim_sample(&edge, steps, seed)?;
                    sfda_pipeline::store::write_f32_grid(
                        &out.join(format!("{stem}_s{j}.arr")),
                        &image.pixels,
                    )?;
                }
            }
            println!(
                "generated {} images under {}",
                edge_files.len() * samples,
                out.display()
            );
        }
        Command::Approximate {
            translator,
            seg,
            targets,
            t_un,
            t_r,
            n,
            out,
        } => {
            let out = cli.global.out_dir(out)?;
            let translator = Translator::load(&translator)?;
            let segmenter = Segmenter::load(&seg)?;
            let ds = Dataset::open(&targets)?;
            let mut run_cfg = cfg.clone();
            if let Some(v) = t_un {
                run_cfg.selector.t_un = v;
            }
            if let Some(v) = t_r {
                run_cfg.selector.t_r = v;
            }
            if let Some(v) = n {
                run_cfg.selector.n = v;
            }
            let images = ds.target_images(Split::Train)?;
            let sweep = run_cfg.selector.sweep()?;
            let sel = run_cfg.selector.selector_config();
            let grid_hash = run_cfg.section_hash(&["data", "translator", "selector_grid"]);
            ensure_grids(&out, &images, &translator, &sweep, sel.samples_per_edge, master_seed, &grid_hash)?;
            let records = run_selection(&out, &images, &segmenter, &sweep, &sel, master_seed)?;
            let accepted = records.iter().filter(|r| r.accepted).count();
            println!(
                "approximated {} targets: {accepted} accepted -> {}",
                records.len(),
                out.join("manifest.jsonl").display()
            );
        }
        Command::Adapt {
            mode,
            manifest,
            targets,
            translator,
            seg,
            epochs,
            lr,
            out,
        } => {
            let out = cli.global.out_dir(out)?;
            let mut acfg = cfg.adapt.clone();
            if let Some(e) = epochs {
                acfg.epochs = e;
            }
            if let Some(l) = lr {
                acfg.learning_rate = l;
            }
            let segmenter = Segmenter::load(&seg)?;
            match mode {
                CliAdaptMode::Centralized => {
                    acfg.mode = AdaptMode::Centralized;
                    let approx_dir = manifest.context("--manifest required for centralized mode")?;
                    let data_dir = targets.context("--targets (dataset dir) required")?;
                    let ds = Dataset::open(&data_dir)?;
                    let records: Vec<sfda_pipeline::approximate::ApproxRecord> =
                        read_jsonl(&approx_dir.join("manifest.jsonl"))?;
                    let train_targets = ds.target_images(Split::Train)?;
                    let pairs = accepted_pairs(&approx_dir, &records, &train_targets)?;
                    let losses = adapt_centralized(&segmenter, pairs, &acfg, master_seed)?;
                    segmenter.save(&out, &cfg.config_hash(), master_seed)?;
                    println!(
                        "centralized adaptation done ({} epochs, final loss {:.4}); model at {}",
                        losses.len(),
                        losses.last().copied().unwrap_or(f64::NAN),
                        out.display()
                    );
                }
                CliAdaptMode::BatchBased => {
                    acfg.mode = AdaptMode::BatchBased;
                    acfg.epochs = 1;
                    let data_dir = targets.context("--targets required for batch-based mode")?;
                    let translator_dir =
                        translator.context("--translator required for batch-based mode")?;
                    let translator = Translator::load(&translator_dir)?;
                    let ds = Dataset::open(&data_dir)?;
                    let stream = ds.target_images(Split::Test)?;
                    let predictions = adapt_batch_based(
                        &segmenter,
                        &stream,
                        &translator,
                        &cfg.selector.sweep()?,
                        &cfg.selector.selector_config(),
                        &acfg,
                        master_seed,
                    )?;
                    let preds_dir = out.join("predictions");
                    std::fs::create_dir_all(&preds_dir)?;
                    for p in &predictions {
                        write_u8_grid(&preds_dir.join(format!("{}.arr", p.target_id)), &p.mask.pixels)?;
                    }
                    segmenter.save(&out, &cfg.config_hash(), master_seed)?;
                    println!(
                        "batch-based adaptation done over {} images; predictions at {}",
                        predictions.len(),
                        preds_dir.display()
                    );
                }
            }
        }
        Command::Evaluate {
            pred,
            gt,
            split,
            out,
        } => {
            let ds = Dataset::open(&gt)?;
            let gate = EvalGate::for_evaluation();
            let split = match split {
                CliSplit::Train => Split::Train,
                CliSplit::Test => Split::Test,
            };
            let masks = ds.eval_masks(split, Domain::Target, &gate)?;
            let gts: BTreeMap<_, _> = masks.into_iter().collect();
            let preds = predictions_from_disk(&pred)?;
            let report = evaluate(&preds, &gts, cfg.eval.spacing_mm, cfg.eval.population_std)?;
            println!("{}", report.table());
            if let Some(out) = out.or(cli.global.out.clone()) {
                if let Some(parent) = out.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
                println!("report written to {}", out.display());
            }
        }
        Command::Ablate { param, values, out } => {
            let out = cli.global.out_dir(out)?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse::<f64>().context("parsing ablation value"))
                .collect::<anyhow::Result<_>>()?;
            let rows = ablate(&cfg, &out, &param, &values)?;
            println!("{}", ablate_table(&param, &rows));
        }
        Command::Pipeline { out } => {
            let out = cli.global.out_dir(out)?;
            let summary = run_pipeline(&cfg, &out)?;
            println!("pipeline complete; reports under {}", Layout::new(&out).reports().display());
            println!("approximation quality/quantity: {:?} / {}", summary.quality_percent, summary.quantity);
            println!("-- source-only --\n{}", summary.source_only.table());
            println!("-- batch-based --\n{}", summary.batch_based.table());
            println!("-- centralized --\n{}", summary.centralized.table());
        }
    }
    Ok(())
}
