//! Experiment configuration: one structured document with every
//! hyper-parameter, stable hashing for stage reuse, and TOML loading with
//! unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfda_core::edges::ThresholdSweep;
use sfda_core::selector::{ConsistencySource, SelectorConfig};
use sfda_core::synth::{SourceStyle, SynthConfig, TargetStyle};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptConfig;
use crate::diffusion::TranslatorConfig;
use crate::segmenter::SegmenterConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generate the paired synthetic benchmark.
    Synth,
    /// Ingest an existing manifest-described slice directory.
    Manifest,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory with `manifest.jsonl` when `source = "manifest"`.
    pub manifest_dir: Option<PathBuf>,
    pub image_size: usize,
    pub num_train_source: usize,
    pub num_train_target: usize,
    pub num_test_target: usize,
    pub lesion_radius_min: f32,
    pub lesion_radius_max: f32,
    pub invert: bool,
    pub target_gamma: f32,
    pub target_noise_sigma: f32,
    pub texture_amp: f32,
}

impl Default for DataSection {
    fn default() -> Self {
        let synth = SynthConfig::default();
        DataSection {
            source: DataSource::Synth,
            manifest_dir: None,
            image_size: synth.image_size,
            num_train_source: synth.num_train_source,
            num_train_target: synth.num_train_target,
            num_test_target: synth.num_test_target,
            lesion_radius_min: synth.lesion_radius_range.0,
            lesion_radius_max: synth.lesion_radius_range.1,
            invert: synth.target_style.invert,
            target_gamma: synth.target_style.gamma,
            target_noise_sigma: synth.target_style.noise_sigma,
            texture_amp: synth.source_style.texture_amp,
        }
    }
}

impl DataSection {
    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            image_size: self.image_size,
            num_train_source: self.num_train_source,
            num_train_target: self.num_train_target,
            num_test_target: self.num_test_target,
            lesion_radius_range: (self.lesion_radius_min, self.lesion_radius_max),
            source_style: SourceStyle {
                texture_amp: self.texture_amp,
                ..SourceStyle::default()
            },
            target_style: TargetStyle {
                invert: self.invert,
                gamma: self.target_gamma,
                noise_sigma: self.target_noise_sigma,
            },
            rng_seed: seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorSection {
    pub t_un: f32,
    pub t_r: f32,
    pub n: usize,
    pub sweep_lo: f32,
    pub sweep_hi: f32,
    pub samples_per_edge: usize,
    pub boundary_band_px: usize,
    /// Score consistency on refined masks (the literal pipeline order) or on
    /// raw masks (keeps acceptance counts independent of `t_un`).
    pub consistency_on_refined: bool,
}

impl Default for SelectorSection {
    fn default() -> Self {
        SelectorSection {
            t_un: 0.2,
            t_r: 0.3,
            n: 2,
            sweep_lo: 30.0,
            sweep_hi: 80.0,
            samples_per_edge: 3,
            boundary_band_px: 0,
            consistency_on_refined: true,
        }
    }
}

impl SelectorSection {
    pub fn selector_config(&self) -> SelectorConfig {
        SelectorConfig {
            t_un: self.t_un,
            t_r: self.t_r,
            n: self.n,
            samples_per_edge: self.samples_per_edge,
            boundary_band_px: self.boundary_band_px,
            consistency_source: if self.consistency_on_refined {
                ConsistencySource::Refined
            } else {
                ConsistencySource::Raw
            },
        }
    }

    pub fn sweep(&self) -> Result<ThresholdSweep> {
        Ok(ThresholdSweep::new(self.sweep_lo, self.sweep_hi, self.n)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub population_std: bool,
    pub spacing_mm: (f32, f32),
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            population_std: true,
            spacing_mm: (1.0, 1.0),
        }
    }
}

/// The full experiment document. Defaults reproduce the published
/// hyper-parameters (DDIM 50 steps, sweep 30..80, n = 2, t_un = 0.2,
/// t_r = 0.3, lambda = 0.01) at the configured scale.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub deterministic: Deterministic,
    pub data: DataSection,
    pub translator: TranslatorConfig,
    pub segmenter: SegmenterConfig,
    pub selector: SelectorSection,
    pub adapt: AdaptConfig,
    pub eval: EvalSection,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct Deterministic(pub bool);

impl Default for Deterministic {
    fn default() -> Self {
        Deterministic(true)
    }
}

impl ExperimentConfig {
    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Malformed {
            what: "config",
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The effective master seed. In deterministic mode (the default) this
    /// is the configured seed verbatim; otherwise per-run entropy is mixed
    /// in, so repeated runs intentionally differ.
    pub fn master_seed(&self) -> u64 {
        if self.deterministic.0 {
            self.seed
        } else {
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos() as u64)
                .unwrap_or(0);
            sfda_core::seed::mix(self.seed, &[now])
        }
    }

    /// Digest of the full resolved config.
    pub fn config_hash(&self) -> String {
        hash_value(&serde_json::json!({
            "seed": self.seed,
            "data": self.data,
            "translator": self.translator,
            "segmenter": self.segmenter,
            "selector": self.selector,
            "adapt": self.adapt,
            "eval": self.eval,
        }))
    }

    /// Digest over named sections (plus the seed), for per-stage reuse.
    pub fn section_hash(&self, sections: &[&str]) -> String {
        let mut doc = serde_json::Map::new();
        doc.insert("seed".into(), serde_json::json!(self.seed));
        for &name in sections {
            let value = match name {
                "data" => serde_json::to_value(&self.data),
                "translator" => serde_json::to_value(&self.translator),
                "segmenter" => serde_json::to_value(&self.segmenter),
                "selector" => serde_json::to_value(&self.selector),
                "selector_grid" => serde_json::to_value(serde_json::json!({
                    "n": self.selector.n,
                    "sweep_lo": self.selector.sweep_lo,
                    "sweep_hi": self.selector.sweep_hi,
                    "samples_per_edge": self.selector.samples_per_edge,
                })),
                "adapt" => serde_json::to_value(&self.adapt),
                "eval" => serde_json::to_value(&self.eval),
                other => panic!("unknown config section {other}"),
            }
            .expect("section serializes");
            doc.insert(name.into(), value);
        }
        hash_value(&serde_json::Value::Object(doc))
    }
}

fn hash_value(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_vec(value).expect("json serializes");
    let digest = Sha256::digest(&canonical);
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_published_settings() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.translator.ddim_steps, 50);
        assert_eq!(cfg.translator.num_steps, 1000);
        assert_eq!(cfg.selector.sweep_lo, 30.0);
        assert_eq!(cfg.selector.sweep_hi, 80.0);
        assert_eq!(cfg.selector.n, 2);
        assert_eq!(cfg.selector.t_un, 0.2);
        assert_eq!(cfg.selector.t_r, 0.3);
        assert_eq!(cfg.selector.samples_per_edge, 3);
        assert_eq!(cfg.segmenter.lambda_reg, 0.01);
        assert!(cfg.adapt.include_target_pairs);
        assert!(cfg.deterministic.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("[selector]\nt_rr = 0.5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("t_rr"), "{err}");
        let err = toml::from_str::<ExperimentConfig>("not_a_key = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("not_a_key"), "{err}");
    }

    #[test]
    fn toml_roundtrip_preserves_hash() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.config_hash(), back.config_hash());
    }

    #[test]
    fn section_hash_isolates_stages() {
        let base = ExperimentConfig::default();
        let mut tweaked = base.clone();
        tweaked.selector.t_r = 0.9;
        // Selector-only changes must not invalidate trained checkpoints.
        assert_eq!(
            base.section_hash(&["data", "translator"]),
            tweaked.section_hash(&["data", "translator"])
        );
        assert_ne!(
            base.section_hash(&["data", "selector"]),
            tweaked.section_hash(&["data", "selector"])
        );
        // Threshold-only changes must not invalidate generation grids.
        assert_eq!(
            base.section_hash(&["data", "translator", "selector_grid"]),
            tweaked.section_hash(&["data", "translator", "selector_grid"])
        );
        let mut n_changed = base.clone();
        n_changed.selector.n = 4;
        assert_ne!(
            base.section_hash(&["selector_grid"]),
            n_changed.section_hash(&["selector_grid"])
        );
    }
}
