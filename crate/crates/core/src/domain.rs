//! Shared value types and report-based invariant checks.
//!
//! Construction is intentionally permissive: every type can hold values that
//! violate its documented invariants, and [`Validate::validate`] reports all
//! violations with their locations. Operations that *require* an invariant
//! fail with [`crate::Error`] instead.
//!
//! All types are immutable after construction and safe to share across
//! threads.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::grid::Grid2;

/// Minimum admissible side length of an image.
pub const MIN_SIDE: usize = 8;

/// Fixed number of samples generated per guiding edge.
pub const SAMPLES_PER_EDGE: usize = 3;

/// Single-channel 2D scalar image with declared intensity bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    pub pixels: Grid2<f32>,
    /// Declared `(lo, hi)` intensity bounds; all pixels must lie inside.
    pub value_range: (f32, f32),
    /// Physical pixel spacing in millimetres, `(row, col)`.
    pub spacing_mm: (f32, f32),
    pub id: String,
}

impl Image2D {
    /// Image with unit spacing and the given range.
    pub fn new(pixels: Grid2<f32>, value_range: (f32, f32), id: impl Into<String>) -> Self {
        Image2D {
            pixels,
            value_range,
            spacing_mm: (1.0, 1.0),
            id: id.into(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.shape()
    }
}

/// Binary segmentation mask; values are exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub pixels: Grid2<u8>,
    pub id: String,
}

impl BinaryMask {
    pub fn new(pixels: Grid2<u8>, id: impl Into<String>) -> Self {
        BinaryMask {
            pixels,
            id: id.into(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.shape()
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.pixels.as_slice().iter().filter(|&&v| v != 0).count()
    }

    pub fn is_blank(&self) -> bool {
        self.area() == 0
    }
}

/// Binary edge map together with the Canny high threshold that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub pixels: Grid2<u8>,
    /// Canny high threshold on the 0-255 intensity convention.
    pub threshold: f32,
}

impl EdgeMap {
    pub fn shape(&self) -> (usize, usize) {
        self.pixels.shape()
    }

    pub fn edge_count(&self) -> usize {
        self.pixels.as_slice().iter().filter(|&&v| v != 0).count()
    }
}

/// Per-pixel Normal-Inverse-Gamma parameter maps.
///
/// The latent mean and variance of the modelled Gaussian are never
/// materialized; only the four parameter maps are.
#[derive(Clone, Debug, PartialEq)]
pub struct NIGField {
    pub gamma: Grid2<f32>,
    pub omega: Grid2<f32>,
    pub alpha: Grid2<f32>,
    pub beta: Grid2<f32>,
}

impl NIGField {
    pub fn shape(&self) -> (usize, usize) {
        self.gamma.shape()
    }
}

/// Per-pixel epistemic uncertainty, `beta / (omega * (alpha - 1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub pixels: Grid2<f32>,
}

impl UncertaintyMap {
    pub fn shape(&self) -> (usize, usize) {
        self.pixels.shape()
    }
}

/// One generated translation: image, masks, uncertainty and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Index of the guiding edge within the threshold sweep, `0..n`.
    pub edge_index: usize,
    /// Index of the sample under that edge, `0..SAMPLES_PER_EDGE`.
    pub sample_index: usize,
    pub image: Image2D,
    pub raw_mask: BinaryMask,
    pub refined_mask: BinaryMask,
    pub uncertainty: UncertaintyMap,
    pub edge: EdgeMap,
}

/// The generation selected for one target image.
#[derive(Clone, Debug, PartialEq)]
pub struct Chosen {
    pub edge_index: usize,
    pub sample_index: usize,
    pub generation: Generation,
}

/// Outcome of reliability selection for one target image.
///
/// `consistency` is the smallest per-edge consistency score observed; when
/// `accepted` it belongs to the chosen edge and never exceeds `t_r`.
#[derive(Clone, Debug, PartialEq)]
pub struct ApproximationResult {
    pub target_id: String,
    /// Consistency threshold the selection ran with.
    pub t_r: f32,
    /// Minimum consistency over all edges (diagnostic even when rejected).
    pub consistency: f32,
    pub accepted: bool,
    /// Present exactly when `accepted`.
    pub chosen: Option<Chosen>,
}

/// A single violated invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    /// Where in the entity the violation sits, e.g. `alpha[3][7]`.
    pub location: String,
    pub message: String,
}

/// Outcome of validating one entity. Empty means pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub entity: &'static str,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn new(entity: &'static str) -> Self {
        ValidationReport {
            entity,
            violations: Vec::new(),
        }
    }

    pub fn is_pass(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }
}

/// Report-based invariant checking. Pure: same input, same report.
pub trait Validate {
    fn validate(&self) -> ValidationReport;
}

/// Scan a binary grid and report any value outside {0, 1}.
fn check_binary(report: &mut ValidationReport, name: &str, grid: &Grid2<u8>) {
    for (r, c, v) in grid.iter_indexed() {
        if v > 1 {
            report.push(
                format!("{name}[{r}][{c}]"),
                format!("value {v} is not in {{0, 1}}"),
            );
        }
    }
}

impl Validate for Image2D {
    fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::new("Image2D");
        let (h, w) = self.shape();
        if h < MIN_SIDE || w < MIN_SIDE {
            report.push("shape", format!("{h}x{w} is below the {MIN_SIDE}x{MIN_SIDE} minimum"));
        }
        let (lo, hi) = self.value_range;
        if !(lo < hi) {
            report.push("value_range", format!("lo {lo} must be below hi {hi}"));
        }
        if self.spacing_mm.0 <= 0.0 || self.spacing_mm.1 <= 0.0 {
            report.push("spacing_mm", "spacing components must be strictly positive");
        }
        for (r, c, v) in self.pixels.iter_indexed() {
            if !(v >= lo && v <= hi) {
                report.push(
                    format!("pixels[{r}][{c}]"),
                    format!("value {v} outside declared range [{lo}, {hi}]"),
                );
            }
        }
        report
    }
}

impl Validate for BinaryMask {
    fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::new("BinaryMask");
        check_binary(&mut report, "pixels", &self.pixels);
        report
    }
}

impl Validate for EdgeMap {
    fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::new("EdgeMap");
        check_binary(&mut report, "pixels", &self.pixels);
        if !(self.threshold > 0.0) {
            report.push("threshold", "Canny threshold must be positive");
        }
        report
    }
}

impl Validate for NIGField {
    fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::new("NIGField");
        for (name, grid) in [("omega", &self.omega), ("alpha", &self.alpha), ("beta", &self.beta)]
        {
            if !self.gamma.same_shape(grid) {
                report.push(name, "shape differs from gamma");
            }
        }
        for (r, c, v) in self.gamma.iter_indexed() {
            if !v.is_finite() {
                report.push(format!("gamma[{r}][{c}]"), "gamma must be finite");
            }
        }
        for (r, c, v) in self.omega.iter_indexed() {
            if !(v > 1.0) {
                report.push(format!("omega[{r}][{c}]"), "omega must exceed 1");
            }
        }
        for (r, c, v) in self.alpha.iter_indexed() {
            if !(v > 1.0) {
                report.push(format!("alpha[{r}][{c}]"), "alpha must exceed 1");
            }
        }
        for (r, c, v) in self.beta.iter_indexed() {
            if !(v > 0.0) {
                report.push(format!("beta[{r}][{c}]"), "beta must be positive");
            }
        }
        report
    }
}

impl Validate for UncertaintyMap {
    fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::new("UncertaintyMap");
        for (r, c, v) in self.pixels.iter_indexed() {
            if !(v.is_finite() && v >= 0.0) {
                report.push(
                    format!("pixels[{r}][{c}]"),
                    format!("uncertainty {v} must be finite and non-negative"),
                );
            }
        }
        report
    }
}

impl Validate for Generation {
    fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::new("Generation");
        let shape = self.image.shape();
        for (name, s) in [
            ("raw_mask", self.raw_mask.shape()),
            ("refined_mask", self.refined_mask.shape()),
            ("uncertainty", self.uncertainty.shape()),
            ("edge", self.edge.shape()),
        ] {
            if s != shape {
                report.push(name, format!("shape {s:?} differs from image {shape:?}"));
            }
        }
        if self.sample_index >= SAMPLES_PER_EDGE {
            report.push(
                "sample_index",
                format!("{} outside 0..{SAMPLES_PER_EDGE}", self.sample_index),
            );
        }
        report
    }
}

impl Validate for ApproximationResult {
    fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::new("ApproximationResult");
        if self.accepted != self.chosen.is_some() {
            report.push("chosen", "generation must be present exactly when accepted");
        }
        if self.accepted && !(self.consistency <= self.t_r) {
            report.push(
                "consistency",
                format!("accepted result has R {} above t_r {}", self.consistency, self.t_r),
            );
        }
        if !(0.0..=1.0).contains(&self.consistency) {
            report.push("consistency", "R must lie in [0, 1]");
        }
        if let Some(chosen) = &self.chosen {
            let inner = chosen.generation.validate();
            for v in inner.violations {
                report.push(format!("chosen.generation.{}", v.location), v.message);
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn small_field(alpha: f32) -> NIGField {
        NIGField {
            gamma: Grid2::filled(8, 8, 0.5),
            omega: Grid2::filled(8, 8, 2.0),
            alpha: Grid2::filled(8, 8, alpha),
            beta: Grid2::filled(8, 8, 1.0),
        }
    }

    #[test]
    fn nig_alpha_at_one_is_reported() {
        let report = small_field(1.0).validate();
        assert!(!report.is_pass());
        assert!(report.violations.iter().all(|v| v.message == "alpha must exceed 1"));
        assert!(report.violations[0].location.starts_with("alpha["));
    }

    #[test]
    fn binary_mask_value_two_is_reported() {
        let mut pixels = Grid2::filled(8, 8, 0u8);
        pixels.set(3, 4, 2);
        let report = BinaryMask::new(pixels, "m").validate();
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].location, "pixels[3][4]");
    }

    #[test]
    fn well_formed_image_passes() {
        let img = Image2D::new(Grid2::filled(16, 16, 0.25), (0.0, 1.0), "x");
        assert!(img.validate().is_pass());
    }

    #[test]
    fn validate_is_pure() {
        let field = small_field(0.5);
        assert_eq!(field.validate(), field.validate());
    }

    #[test]
    fn approximation_result_consistency_bound() {
        let result = ApproximationResult {
            target_id: "t".to_string(),
            t_r: 0.3,
            consistency: 0.5,
            accepted: true,
            chosen: None,
        };
        let report = result.validate();
        assert!(!report.is_pass());
    }
}
