//! Dataset handles with a type-enforced ground-truth firewall.
//!
//! Adaptation stages receive target images through [`Dataset::target_images`],
//! which exposes no mask accessor. Target ground truth is only reachable
//! through [`Dataset::eval_masks`], which demands an [`EvalGate`] token;
//! the adaptation and approximation modules never construct one (audited by
//! a source-scan test).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfda_core::synth::{self, SynthConfig};
use sfda_core::{BinaryMask, Image2D};

use crate::store::{self, Domain, ManifestRecord, Split};
use crate::{Error, Result};

/// Capability token for reading evaluation-only ground truth.
///
/// Constructing one marks the call site as an evaluation or benchmark
/// harness; adaptation code paths must not reference this type.
pub struct EvalGate(());

impl EvalGate {
    pub fn for_evaluation() -> Self {
        EvalGate(())
    }
}

/// A labeled training pair (source domain, or eval-gated target).
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub image: Image2D,
    pub mask: BinaryMask,
}

/// Handle over a manifest-described directory of samples.
pub struct Dataset {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

impl Dataset {
    /// Open a dataset rooted at `dir` (expects `<dir>/manifest.jsonl`).
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let root = dir.into();
        let records = store::read_manifest(&root.join("manifest.jsonl"))?;
        Ok(Dataset { root, records })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    /// Record counts per `(split, domain)`.
    pub fn split_counts(&self) -> BTreeMap<(String, String), usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            let key = (
                format!("{:?}", r.split).to_lowercase(),
                format!("{:?}", r.domain).to_lowercase(),
            );
            *counts.entry(key).or_insert(0) += 1;
        }
        counts
    }

    fn ids(&self, split: Split, domain: Domain) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.domain == domain)
            .map(|r| r.id.clone())
            .collect()
    }

    fn load_pair(&self, id: &str) -> Result<LabeledSample> {
        let image = store::read_image(&self.root, id)?;
        let mask = store::read_mask(&self.root, id)?;
        if image.shape() != mask.shape() {
            return Err(Error::Malformed {
                what: "sample",
                path: store::sample_dir(&self.root, id),
                message: format!(
                    "mask shape {:?} differs from image shape {:?}",
                    mask.shape(),
                    image.shape()
                ),
            });
        }
        Ok(LabeledSample { image, mask })
    }

    /// Labeled source-domain training pairs (annotations are source-side
    /// supervision and carry no firewall).
    pub fn labeled_source_train(&self) -> Result<Vec<LabeledSample>> {
        self.ids(Split::Train, Domain::Source)
            .iter()
            .map(|id| self.load_pair(id))
            .collect()
    }

    /// Target-domain images only; no mask accessor exists on this path.
    pub fn target_images(&self, split: Split) -> Result<Vec<Image2D>> {
        self.ids(split, Domain::Target)
            .iter()
            .map(|id| store::read_image(&self.root, id))
            .collect()
    }

    /// Evaluation-only ground truth, keyed by sample id.
    pub fn eval_masks(
        &self,
        split: Split,
        domain: Domain,
        _gate: &EvalGate,
    ) -> Result<BTreeMap<String, BinaryMask>> {
        let mut out = BTreeMap::new();
        for id in self.ids(split, domain) {
            out.insert(id.clone(), store::read_mask(&self.root, &id)?);
        }
        Ok(out)
    }

    /// Labeled pairs for a target split; evaluation/benchmark harnesses only.
    pub fn labeled_eval(&self, split: Split, _gate: &EvalGate) -> Result<Vec<LabeledSample>> {
        self.ids(split, Domain::Target)
            .iter()
            .map(|id| self.load_pair(id))
            .collect()
    }
}

/// Provenance line for one generated anatomy.
#[derive(Serialize, Deserialize)]
pub struct SynthLogRecord {
    pub anatomy: usize,
    pub center: (f32, f32),
    pub semi_axes: (f32, f32),
    pub rotation: f32,
}

/// Write the synthetic benchmark to `dir` and return the opened dataset.
///
/// Every sample (including target-domain ones) gets its ground-truth mask on
/// disk; target masks are evaluation-only by the firewall above. Rendering
/// is deterministic in `cfg.rng_seed`.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path, overwrite: bool) -> Result<Dataset> {
    cfg.check()?;
    if dir.join("manifest.jsonl").exists() {
        if !overwrite {
            return Err(Error::stage(format!(
                "dataset already exists at {} (pass overwrite to replace)",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut records = Vec::new();
    let log_path = dir.join("synth_log.jsonl");
    for plan in synth::plan(cfg) {
        let rendered = synth::render_anatomy(cfg, plan.anatomy)?;
        let split = if plan.is_test { Split::Test } else { Split::Train };
        store::append_jsonl(
            &log_path,
            &SynthLogRecord {
                anatomy: plan.anatomy,
                center: rendered.geometry.center,
                semi_axes: rendered.geometry.semi_axes,
                rotation: rendered.geometry.rotation,
            },
        )?;
        if plan.render_source {
            let mask = BinaryMask::new(rendered.mask.pixels.clone(), rendered.source.id.clone());
            store::write_sample(dir, &rendered.source, Some(&mask))?;
            records.push(ManifestRecord {
                id: rendered.source.id.clone(),
                split,
                domain: Domain::Source,
            });
        }
        if plan.render_target {
            let mask = BinaryMask::new(rendered.mask.pixels.clone(), rendered.target.id.clone());
            store::write_sample(dir, &rendered.target, Some(&mask))?;
            records.push(ManifestRecord {
                id: rendered.target.id.clone(),
                split,
                domain: Domain::Target,
            });
        }
    }
    store::write_manifest(&dir.join("manifest.jsonl"), &records)?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            image_size: 32,
            num_train_source: 3,
            num_train_target: 2,
            num_test_target: 2,
            lesion_radius_range: (3.0, 6.0),
            rng_seed: seed,
            ..SynthConfig::default()
        }
    }

    fn dir_digest(dir: &Path) -> Vec<(String, u32)> {
        let mut entries = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().display().to_string();
                    entries.push((rel, crc32fast::hash(&std::fs::read(&p).unwrap())));
                }
            }
        }
        entries.sort();
        entries
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_cfg(7), a.path(), false).unwrap();
        generate_dataset(&tiny_cfg(7), b.path(), false).unwrap();
        assert_eq!(dir_digest(a.path()), dir_digest(b.path()));
    }

    #[test]
    fn existing_dataset_requires_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_cfg(7), dir.path(), false).unwrap();
        assert!(generate_dataset(&tiny_cfg(8), dir.path(), false).is_err());
        assert!(generate_dataset(&tiny_cfg(8), dir.path(), true).is_ok());
    }

    #[test]
    fn split_counts_match_config() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&tiny_cfg(7), dir.path(), false).unwrap();
        let counts = ds.split_counts();
        assert_eq!(counts[&("train".into(), "source".into())], 3);
        assert_eq!(counts[&("train".into(), "target".into())], 2);
        assert_eq!(counts[&("test".into(), "target".into())], 2);
        assert_eq!(ds.records().len(), 7);
    }

    #[test]
    fn paired_anatomies_share_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&tiny_cfg(7), dir.path(), false).unwrap();
        let gate = EvalGate::for_evaluation();
        let target_masks = ds.eval_masks(Split::Train, Domain::Target, &gate).unwrap();
        let source = ds.labeled_source_train().unwrap();
        for s in source {
            let target_id = s.image.id.replace("_source", "_target");
            if let Some(tm) = target_masks.get(&target_id) {
                assert_eq!(s.mask.pixels, tm.pixels, "anatomy {}", s.image.id);
            }
        }
    }

    #[test]
    fn target_stream_has_images_only() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&tiny_cfg(7), dir.path(), false).unwrap();
        let stream = ds.target_images(Split::Test).unwrap();
        assert_eq!(stream.len(), 2);
        // The returned values are plain images; ground truth requires the
        // eval gate and a separate call.
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&tiny_cfg(7), dir.path(), false).unwrap();
        let id = &ds.records()[0].id;
        // Overwrite the mask with a wrong-shaped one.
        let bad = sfda_core::Grid2::filled(16, 16, 0u8);
        store::write_u8_grid(&store::sample_dir(dir.path(), id).join("mask.arr"), &bad).unwrap();
        let err = ds.labeled_source_train().unwrap_err();
        assert!(err.to_string().contains("differs from image shape"), "{err}");
    }
}
