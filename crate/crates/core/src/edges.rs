//! Canny edge computation, annotation-driven threshold selection, and the
//! multi-threshold sweep used during adaptation.
//!
//! Thresholds follow the 0-255 intensity convention: images are rescaled
//! internally from their declared `value_range` before gradients are taken.
//! The hysteresis low threshold is fixed at half the high threshold, and
//! gradients are taken after Gaussian smoothing with sigma 1.0, so an edge
//! map is a pure function of `(image, threshold)`.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::domain::{BinaryMask, EdgeMap, Image2D};
use crate::error::Error;
use crate::grid::{check_same_shape, Grid2};
use crate::metrics::boundary_4;
use crate::Result;

/// Ratio between the hysteresis low and high thresholds.
pub const LOW_THRESHOLD_RATIO: f32 = 0.5;

/// Gaussian pre-smoothing sigma.
pub const SMOOTHING_SIGMA: f32 = 1.0;

/// Pixel tolerance used when matching annotation boundaries to edges.
pub const BOUNDARY_RECALL_TOLERANCE_PX: f64 = 2.0;

/// An inclusive equal division of `[lo, hi]` into `n` Canny thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSweep {
    pub lo: f32,
    pub hi: f32,
    pub n: usize,
}

impl Default for ThresholdSweep {
    fn default() -> Self {
        ThresholdSweep {
            lo: 30.0,
            hi: 80.0,
            n: 2,
        }
    }
}

impl ThresholdSweep {
    pub fn new(lo: f32, hi: f32, n: usize) -> Result<Self> {
        let sweep = ThresholdSweep { lo, hi, n };
        sweep.check()?;
        Ok(sweep)
    }

    fn check(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::invalid("sweep", "lo must be below hi"));
        }
        if !(self.lo > 0.0) {
            return Err(Error::invalid("sweep", "thresholds must be positive"));
        }
        if self.n < 1 {
            return Err(Error::invalid("sweep", "n must be at least 1"));
        }
        Ok(())
    }

    /// The `n` thresholds, ascending. For `n == 1`, the midpoint of the range.
    pub fn thresholds(&self) -> Vec<f32> {
        if self.n == 1 {
            return alloc::vec![(self.lo + self.hi) * 0.5];
        }
        let lo = self.lo as f64;
        let hi = self.hi as f64;
        (0..self.n)
            .map(|i| (lo + (hi - lo) * i as f64 / (self.n - 1) as f64) as f32)
            .collect()
    }
}

/// Rescale pixels to the 0-255 convention using the declared range.
fn working_intensities(image: &Image2D) -> Result<Grid2<f32>> {
    let (lo, hi) = image.value_range;
    if !(lo < hi) {
        return Err(Error::invalid("image", "value_range lo must be below hi"));
    }
    let scale = 255.0 / (hi - lo);
    Ok(image.pixels.map(|p| (p - lo) * scale))
}

/// Separable Gaussian blur with replicate borders.
fn gaussian_blur(src: &Grid2<f32>, sigma: f32) -> Grid2<f32> {
    let radius = libm::ceilf(3.0 * sigma) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let inv = -0.5 / (sigma * sigma);
    for k in -radius..=radius {
        kernel.push(libm::expf((k * k) as f32 * inv));
    }
    let sum: f32 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= sum;
    }

    let (h, w) = src.shape();
    let clamp = |v: i64, max: usize| v.clamp(0, max as i64 - 1) as usize;
    let mut horiz = Grid2::filled(h, w, 0.0f32);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let cc = clamp(c as i64 + ki as i64 - radius, w);
                acc += src.get(r, cc) * kv;
            }
            horiz.set(r, c, acc);
        }
    }
    let mut out = Grid2::filled(h, w, 0.0f32);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let rr = clamp(r as i64 + ki as i64 - radius, h);
                acc += horiz.get(rr, c) * kv;
            }
            out.set(r, c, acc);
        }
    }
    out
}

/// 3x3 Sobel gradients with replicate borders.
fn sobel(src: &Grid2<f32>) -> (Grid2<f32>, Grid2<f32>) {
    let (h, w) = src.shape();
    let at = |r: i64, c: i64| {
        src.get(
            r.clamp(0, h as i64 - 1) as usize,
            c.clamp(0, w as i64 - 1) as usize,
        )
    };
    let mut gx = Grid2::filled(h, w, 0.0f32);
    let mut gy = Grid2::filled(h, w, 0.0f32);
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let x = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let y = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            gx.set(r as usize, c as usize, x);
            gy.set(r as usize, c as usize, y);
        }
    }
    (gx, gy)
}

/// Neighbor offsets along the gradient direction, quantized to 4 bins.
fn gradient_neighbors(gx: f32, gy: f32) -> ((i64, i64), (i64, i64)) {
    let mut angle = libm::atan2f(gy, gx);
    if angle < 0.0 {
        angle += core::f32::consts::PI;
    }
    let deg = angle.to_degrees();
    if !(22.5..157.5).contains(&deg) {
        ((0, 1), (0, -1))
    } else if deg < 67.5 {
        ((1, 1), (-1, -1))
    } else if deg < 112.5 {
        ((1, 0), (-1, 0))
    } else {
        ((1, -1), (-1, 1))
    }
}

/// Canny edge map of `image` at high threshold `t` (low threshold `t / 2`).
///
/// Non-maximum suppression keeps a pixel when its magnitude strictly exceeds
/// the forward neighbor and is at least the backward neighbor, so the
/// two-pixel ties of perfectly symmetric step edges thin to one pixel.
pub fn canny(image: &Image2D, t: f32) -> Result<EdgeMap> {
    if !(t > 0.0) {
        return Err(Error::invalid("t", "Canny threshold must be positive"));
    }
    let working = working_intensities(image)?;
    let smoothed = gaussian_blur(&working, SMOOTHING_SIGMA);
    let (gx, gy) = sobel(&smoothed);
    let (h, w) = working.shape();

    let mut magnitude = Grid2::filled(h, w, 0.0f32);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (gx.get(r, c), gy.get(r, c));
            magnitude.set(r, c, libm::sqrtf(x * x + y * y));
        }
    }

    let mag_at = |r: i64, c: i64| {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            magnitude.get(r as usize, c as usize)
        }
    };

    let t_low = t * LOW_THRESHOLD_RATIO;
    // 0 = suppressed, 1 = weak candidate, 2 = strong seed
    let mut class = Grid2::filled(h, w, 0u8);
    let mut seeds = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            let m = magnitude.get(r, c);
            if m < t_low {
                continue;
            }
            let (fwd, bwd) = gradient_neighbors(gx.get(r, c), gy.get(r, c));
            let keep = m > mag_at(r as i64 + fwd.0, c as i64 + fwd.1)
                && m >= mag_at(r as i64 + bwd.0, c as i64 + bwd.1);
            if !keep {
                continue;
            }
            if m >= t {
                class.set(r, c, 2);
                seeds.push_back((r, c));
            } else {
                class.set(r, c, 1);
            }
        }
    }

    // Hysteresis: weak candidates joined 8-connected to a strong seed survive.
    let mut edge = Grid2::filled(h, w, 0u8);
    while let Some((r, c)) = seeds.pop_front() {
        if edge.get(r, c) == 1 {
            continue;
        }
        edge.set(r, c, 1);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    continue;
                }
                let (rr, cc) = (rr as usize, cc as usize);
                if class.get(rr, cc) > 0 && edge.get(rr, cc) == 0 {
                    seeds.push_back((rr, cc));
                }
            }
        }
    }

    Ok(EdgeMap {
        pixels: edge,
        threshold: t,
    })
}

/// Fraction of `reference` foreground pixels lying within `tol_px` (Euclidean)
/// of some `candidate` foreground pixel. An empty reference recalls trivially.
pub fn recall_within(reference: &Grid2<u8>, candidate: &Grid2<u8>, tol_px: f64) -> Result<f64> {
    check_same_shape(reference, candidate, "recall_within")?;
    let (h, w) = reference.shape();
    let radius = libm::ceil(tol_px) as i64;
    let tol_sq = tol_px * tol_px;
    let mut total = 0usize;
    let mut hit = 0usize;
    for (r, c, v) in reference.iter_indexed() {
        if v == 0 {
            continue;
        }
        total += 1;
        'search: for dr in -radius..=radius {
            for dc in -radius..=radius {
                if (dr * dr + dc * dc) as f64 > tol_sq {
                    continue;
                }
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    continue;
                }
                if candidate.get(rr as usize, cc as usize) != 0 {
                    hit += 1;
                    break 'search;
                }
            }
        }
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(hit as f64 / total as f64)
}

/// Boundary recall of `mask`'s 4-connectivity boundary against an edge map,
/// with the standard 2 px tolerance.
pub fn annotation_boundary_recall(mask: &BinaryMask, edges: &EdgeMap) -> Result<f64> {
    let boundary = boundary_4(&mask.pixels);
    recall_within(&boundary, &edges.pixels, BOUNDARY_RECALL_TOLERANCE_PX)
}

/// Pick the candidate threshold whose edges best recall the annotation
/// boundary; ties break toward the larger threshold (sparser edges).
pub fn annotation_threshold(
    image: &Image2D,
    mask: &BinaryMask,
    candidates: &[f32],
) -> Result<f32> {
    if mask.is_blank() {
        return Err(Error::NoAnnotation);
    }
    if candidates.is_empty() {
        return Err(Error::invalid("candidates", "candidate list is empty"));
    }
    check_same_shape(&image.pixels, &mask.pixels, "annotation_threshold")?;
    let mut best: Option<(f64, f32)> = None;
    for &t in candidates {
        let recall = annotation_boundary_recall(mask, &canny(image, t)?)?;
        let better = match best {
            None => true,
            Some((br, bt)) => recall > br || (recall == br && t > bt),
        };
        if better {
            best = Some((recall, t));
        }
    }
    Ok(best.expect("candidates checked nonempty").1)
}

/// Edge maps for every threshold of the sweep, ascending.
pub fn sweep_edges(image: &Image2D, sweep: &ThresholdSweep) -> Result<Vec<EdgeMap>> {
    sweep.check()?;
    sweep
        .thresholds()
        .into_iter()
        .map(|t| canny(image, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Image2D;

    fn image_from(grid: Grid2<f32>) -> Image2D {
        Image2D::new(grid, (0.0, 1.0), "img")
    }

    /// Filled axis-aligned square of the given intensity on a flat background.
    pub(crate) fn square_image(size: usize, top: usize, side: usize, level: f32) -> Image2D {
        let grid = Grid2::from_fn(size, size, |r, c| {
            if (top..top + side).contains(&r) && (top..top + side).contains(&c) {
                level
            } else {
                0.2
            }
        });
        image_from(grid)
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = image_from(Grid2::filled(32, 32, 0.6));
        for t in [5.0, 30.0, 80.0] {
            assert_eq!(canny(&img, t).unwrap().edge_count(), 0);
        }
    }

    #[test]
    fn nonpositive_threshold_rejected() {
        let img = image_from(Grid2::filled(16, 16, 0.5));
        assert!(canny(&img, 0.0).is_err());
        assert!(canny(&img, -3.0).is_err());
    }

    #[test]
    fn threshold_monotonicity_on_square() {
        let img = square_image(64, 20, 20, 0.8);
        let lo = canny(&img, 30.0).unwrap();
        let hi = canny(&img, 80.0).unwrap();
        assert!(hi.edge_count() <= lo.edge_count());
    }

    #[test]
    fn sweep_thresholds_match_equal_division() {
        let sweep = ThresholdSweep::default();
        assert_eq!(sweep.thresholds(), alloc::vec![30.0, 80.0]);

        let four = ThresholdSweep::new(30.0, 80.0, 4).unwrap().thresholds();
        assert_eq!(four.len(), 4);
        assert!((four[0] - 30.0).abs() < 1e-6);
        assert!((four[1] - 46.666_668).abs() < 1e-3);
        assert!((four[2] - 63.333_332).abs() < 1e-3);
        assert!((four[3] - 80.0).abs() < 1e-6);

        let one = ThresholdSweep::new(30.0, 80.0, 1).unwrap().thresholds();
        assert_eq!(one, alloc::vec![55.0]);
    }

    #[test]
    fn sweep_rejects_bad_ranges() {
        assert!(ThresholdSweep::new(80.0, 30.0, 2).is_err());
        assert!(ThresholdSweep::new(30.0, 80.0, 0).is_err());
    }

    #[test]
    fn annotation_threshold_requires_mask() {
        let img = square_image(32, 10, 8, 0.9);
        let empty = BinaryMask::new(Grid2::filled(32, 32, 0), "m");
        assert!(matches!(
            annotation_threshold(&img, &empty, &[30.0, 80.0]),
            Err(Error::NoAnnotation)
        ));
    }
}
