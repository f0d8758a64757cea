//! Synthetic domain-shift benchmark: paired source-style and target-style
//! renderings of elliptical lesions on smooth textured backgrounds.
//!
//! The source style draws the lesion brighter than its surroundings; the
//! target style inverts intensities, applies a gamma curve and adds Gaussian
//! noise, which reliably breaks a source-only segmenter while staying
//! learnable. Both renderings of one anatomy share the exact lesion
//! geometry, and all sampling is derived from the config seed per anatomy,
//! so generation is deterministic and order-independent.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::domain::{BinaryMask, Image2D};
use crate::error::Error;
use crate::grid::Grid2;
use crate::seed;
use crate::Result;

/// Source-domain rendering style.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceStyle {
    /// Draw the lesion brighter than the background (the source contrast).
    pub lesion_brighter: bool,
    /// Stream tag for the fine background texture.
    pub texture_seed: u64,
    /// Amplitude of the per-pixel background texture.
    pub texture_amp: f32,
}

impl Default for SourceStyle {
    fn default() -> Self {
        SourceStyle {
            lesion_brighter: true,
            texture_seed: 0x7e57,
            texture_amp: 0.02,
        }
    }
}

/// Target-domain style transform applied to the clean rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetStyle {
    pub invert: bool,
    pub gamma: f32,
    /// Gaussian noise sigma, as a fraction of the intensity range.
    pub noise_sigma: f32,
}

impl Default for TargetStyle {
    fn default() -> Self {
        TargetStyle {
            invert: true,
            gamma: 1.8,
            noise_sigma: 0.05,
        }
    }
}

/// Benchmark generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_train_source: usize,
    pub num_train_target: usize,
    pub num_test_target: usize,
    /// Semi-axis range of the elliptical lesion, in pixels.
    pub lesion_radius_range: (f32, f32),
    pub source_style: SourceStyle,
    pub target_style: TargetStyle,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            num_train_source: 400,
            num_train_target: 400,
            num_test_target: 100,
            lesion_radius_range: (4.0, 10.0),
            source_style: SourceStyle::default(),
            target_style: TargetStyle::default(),
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn check(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::invalid("image_size", "must be at least 32"));
        }
        let (lo, hi) = self.lesion_radius_range;
        let max_allowed = self.image_size as f32 / 3.0;
        if !(lo >= 3.0 && lo <= hi && hi <= max_allowed) {
            return Err(Error::invalid(
                "lesion_radius_range",
                format!("must lie within [3, {max_allowed}] with lo <= hi"),
            ));
        }
        if !(self.target_style.gamma > 0.0) {
            return Err(Error::invalid("target_style.gamma", "must be positive"));
        }
        if self.target_style.noise_sigma < 0.0 {
            return Err(Error::invalid("target_style.noise_sigma", "must be >= 0"));
        }
        Ok(())
    }

    /// Number of distinct anatomies. Training anatomies are shared between
    /// the domains that render them; test anatomies are target-only.
    pub fn anatomy_count(&self) -> usize {
        self.num_train_source.max(self.num_train_target) + self.num_test_target
    }
}

/// What to render for one anatomy.
#[derive(Clone, Debug, PartialEq)]
pub struct AnatomyPlan {
    pub anatomy: usize,
    pub render_source: bool,
    pub render_target: bool,
    pub is_test: bool,
}

/// Deterministic rendering plan for every anatomy of the benchmark.
pub fn plan(cfg: &SynthConfig) -> Vec<AnatomyPlan> {
    let train = cfg.num_train_source.max(cfg.num_train_target);
    (0..cfg.anatomy_count())
        .map(|k| AnatomyPlan {
            anatomy: k,
            render_source: k < cfg.num_train_source,
            render_target: k < cfg.num_train_target || k >= train,
            is_test: k >= train,
        })
        .collect()
}

/// Ellipse parameters drawn for one anatomy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionGeometry {
    pub center: (f32, f32),
    pub semi_axes: (f32, f32),
    pub rotation: f32,
}

impl LesionGeometry {
    /// Exact area of the continuous ellipse, in pixels squared.
    pub fn analytic_area(&self) -> f64 {
        core::f64::consts::PI * self.semi_axes.0 as f64 * self.semi_axes.1 as f64
    }
}

/// Both renderings of one anatomy plus its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedAnatomy {
    pub anatomy: usize,
    pub source: Image2D,
    pub target: Image2D,
    pub mask: BinaryMask,
    pub geometry: LesionGeometry,
}

/// Stable sample identifier for one anatomy and domain.
pub fn sample_id(anatomy: usize, domain: &str) -> String {
    format!("a{anatomy:05}_{domain}")
}

/// Normalized elliptical quadratic form; <= 1 inside the lesion.
fn ellipse_q(geometry: &LesionGeometry, r: usize, c: usize) -> f32 {
    let dy = (r as f32 + 0.5) - geometry.center.0;
    let dx = (c as f32 + 0.5) - geometry.center.1;
    let cos = libm::cosf(geometry.rotation);
    let sin = libm::sinf(geometry.rotation);
    let u = (dx * cos + dy * sin) / geometry.semi_axes.0;
    let v = (-dx * sin + dy * cos) / geometry.semi_axes.1;
    u * u + v * v
}

/// Render one anatomy: clean source-style image, target-style transform of
/// the same anatomy, and the shared ground-truth mask.
pub fn render_anatomy(cfg: &SynthConfig, anatomy: usize) -> Result<RenderedAnatomy> {
    cfg.check()?;
    let size = cfg.image_size;

    let mut geom_rng = seed::rng(seed::mix(cfg.rng_seed, &[anatomy as u64, 1]));
    let (rmin, rmax) = cfg.lesion_radius_range;
    let a = seed::uniform_range(&mut geom_rng, rmin, rmax);
    let b = seed::uniform_range(&mut geom_rng, rmin, rmax);
    let rotation = seed::uniform_range(&mut geom_rng, 0.0, core::f32::consts::PI);
    let margin = a.max(b) + 3.0;
    let center = (
        seed::uniform_range(&mut geom_rng, margin, size as f32 - margin),
        seed::uniform_range(&mut geom_rng, margin, size as f32 - margin),
    );
    let geometry = LesionGeometry {
        center,
        semi_axes: (a, b),
        rotation,
    };

    // Smooth background: broad bumps over a constant base.
    let mut bump_rng = seed::rng(seed::mix(cfg.rng_seed, &[anatomy as u64, 2]));
    let mut bumps = Vec::new();
    for _ in 0..3 {
        let cy = seed::uniform_range(&mut bump_rng, 0.0, size as f32);
        let cx = seed::uniform_range(&mut bump_rng, 0.0, size as f32);
        let sigma = seed::uniform_range(&mut bump_rng, size as f32 / 4.0, size as f32 / 2.0);
        let amp = seed::uniform_range(&mut bump_rng, -0.12, 0.12);
        bumps.push((cy, cx, sigma, amp));
    }

    let mut texture_rng = seed::rng(seed::mix(
        cfg.source_style.texture_seed,
        &[cfg.rng_seed, anatomy as u64, 3],
    ));
    let texture = Grid2::from_fn(size, size, |_, _| {
        seed::uniform_range(&mut texture_rng, -cfg.source_style.texture_amp, cfg.source_style.texture_amp)
    });

    let lesion_level = if cfg.source_style.lesion_brighter { 0.85 } else { 0.15 };
    let min_axis = a.min(b);
    let clean = Grid2::from_fn(size, size, |r, c| {
        let mut v = 0.35f32;
        for &(cy, cx, sigma, amp) in &bumps {
            let dy = r as f32 + 0.5 - cy;
            let dx = c as f32 + 0.5 - cx;
            v += amp * libm::expf(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
        v += texture.get(r, c);
        // ~1 px antialiased lesion boundary.
        let q = ellipse_q(&geometry, r, c);
        let signed_px = (1.0 - libm::sqrtf(q)) * min_axis;
        let coverage = (signed_px + 0.5).clamp(0.0, 1.0);
        (v * (1.0 - coverage) + lesion_level * coverage).clamp(0.0, 1.0)
    });

    let mask = Grid2::from_fn(size, size, |r, c| (ellipse_q(&geometry, r, c) <= 1.0) as u8);

    let mut noise_rng = seed::rng(seed::mix(cfg.rng_seed, &[anatomy as u64, 4]));
    let style = cfg.target_style;
    let target = clean.map(|v| {
        let mut t = if style.invert { 1.0 - v } else { v };
        t = libm::powf(t.max(0.0), style.gamma);
        t += style.noise_sigma * seed::standard_normal(&mut noise_rng);
        t.clamp(0.0, 1.0)
    });

    Ok(RenderedAnatomy {
        anatomy,
        source: Image2D::new(clean, (0.0, 1.0), sample_id(anatomy, "source")),
        target: Image2D::new(target, (0.0, 1.0), sample_id(anatomy, "target")),
        mask: BinaryMask::new(mask, sample_id(anatomy, "mask")),
        geometry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            image_size: 48,
            num_train_source: 6,
            num_train_target: 4,
            num_test_target: 3,
            lesion_radius_range: (4.0, 8.0),
            rng_seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = small_cfg();
        let a = render_anatomy(&cfg, 2).unwrap();
        let b = render_anatomy(&cfg, 2).unwrap();
        assert_eq!(a, b);
        let c = render_anatomy(&cfg, 3).unwrap();
        assert_ne!(a.source.pixels, c.source.pixels);
    }

    #[test]
    fn plan_covers_domains_and_splits() {
        let cfg = small_cfg();
        let plan = plan(&cfg);
        assert_eq!(plan.len(), 9);
        assert_eq!(plan.iter().filter(|p| p.render_source).count(), 6);
        assert_eq!(plan.iter().filter(|p| p.render_target).count(), 4 + 3);
        assert_eq!(plan.iter().filter(|p| p.is_test).count(), 3);
        assert!(plan.iter().all(|p| !p.is_test || p.render_target));
    }

    #[test]
    fn mask_area_tracks_analytic_ellipse_area() {
        let cfg = small_cfg();
        for k in 0..9 {
            let rendered = render_anatomy(&cfg, k).unwrap();
            let raster = rendered.mask.area() as f64;
            let analytic = rendered.geometry.analytic_area();
            let (a, b) = rendered.geometry.semi_axes;
            // Raster error is bounded by the ellipse perimeter (plus a
            // constant); use the standard perimeter upper bound.
            let perimeter =
                core::f64::consts::PI * libm::sqrt(2.0 * ((a * a + b * b) as f64));
            assert!(
                (raster - analytic).abs() <= perimeter + 8.0,
                "anatomy {k}: raster {raster} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn images_stay_in_declared_range() {
        use crate::domain::Validate;
        let cfg = small_cfg();
        let rendered = render_anatomy(&cfg, 0).unwrap();
        assert!(rendered.source.validate().is_pass());
        assert!(rendered.target.validate().is_pass());
        assert!(rendered.mask.validate().is_pass());
    }

    #[test]
    fn config_bounds_are_enforced() {
        let mut cfg = small_cfg();
        cfg.image_size = 16;
        assert!(cfg.check().is_err());
        let mut cfg = small_cfg();
        cfg.lesion_radius_range = (2.0, 8.0);
        assert!(cfg.check().is_err());
        let mut cfg = small_cfg();
        cfg.lesion_radius_range = (4.0, 40.0);
        assert!(cfg.check().is_err());
    }
}
