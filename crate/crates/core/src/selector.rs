//! Pseudo-label refinement, prediction consistency, and selection of the
//! most reliable generation per target image.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::domain::{ApproximationResult, BinaryMask, Chosen, Generation, UncertaintyMap};
use crate::error::Error;
use crate::grid::{check_same_shape, Grid2};
use crate::Result;

/// Which masks feed the consistency score.
///
/// The literal pipeline order refines first and scores refined masks;
/// scoring raw masks keeps acceptance counts independent of the
/// uncertainty threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsistencySource {
    Refined,
    Raw,
}

/// Thresholds and counts for reliability selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectorConfig {
    /// Uncertainty threshold for pseudo-label refinement.
    pub t_un: f32,
    /// Consistency threshold; edges scoring above it are rejected.
    pub t_r: f32,
    /// Number of guiding edges per target image.
    pub n: usize,
    /// Samples generated per edge.
    pub samples_per_edge: usize,
    /// When nonzero, refinement may only add pixels within this Chebyshev
    /// dilation band around the raw mask. Zero applies the refinement rule
    /// verbatim over the whole image.
    pub boundary_band_px: usize,
    pub consistency_source: ConsistencySource,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            t_un: 0.2,
            t_r: 0.3,
            n: 2,
            samples_per_edge: 3,
            boundary_band_px: 0,
            consistency_source: ConsistencySource::Refined,
        }
    }
}

impl SelectorConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.t_r > 0.0 && self.t_r <= 1.0) {
            return Err(Error::invalid("t_r", "must lie in (0, 1]"));
        }
        if !(self.t_un > 0.0) {
            return Err(Error::invalid("t_un", "must be positive"));
        }
        if self.n < 1 {
            return Err(Error::invalid("n", "need at least one edge"));
        }
        if self.samples_per_edge < 2 {
            return Err(Error::invalid(
                "samples_per_edge",
                "need at least two samples for a consistency score",
            ));
        }
        Ok(())
    }
}

/// Chebyshev dilation of a binary grid by `radius`.
fn dilate(mask: &Grid2<u8>, radius: usize) -> Grid2<u8> {
    let (h, w) = mask.shape();
    let r = radius as i64;
    Grid2::from_fn(h, w, |row, col| {
        for dr in -r..=r {
            for dc in -r..=r {
                let (rr, cc) = (row as i64 + dr, col as i64 + dc);
                if rr >= 0
                    && cc >= 0
                    && rr < h as i64
                    && cc < w as i64
                    && mask.get(rr as usize, cc as usize) != 0
                {
                    return 1;
                }
            }
        }
        0
    })
}

/// Refine a pseudo-label by folding in high-uncertainty pixels:
/// `(1{u > t_un} xor raw) or raw`, evaluated elementwise exactly as written.
///
/// The result never loses a raw-positive pixel. With a nonzero band the
/// high-uncertainty set is first intersected with the dilation band around
/// the raw mask.
pub fn refine_mask_with_band(
    raw: &BinaryMask,
    u: &UncertaintyMap,
    t_un: f32,
    boundary_band_px: usize,
) -> Result<BinaryMask> {
    check_same_shape(&raw.pixels, &u.pixels, "refine_mask")?;
    let band = if boundary_band_px > 0 {
        Some(dilate(&raw.pixels, boundary_band_px))
    } else {
        None
    };
    let (h, w) = raw.shape();
    let pixels = Grid2::from_fn(h, w, |r, c| {
        let mut high = (u.pixels.get(r, c) > t_un) as u8;
        if let Some(band) = &band {
            high &= band.get(r, c);
        }
        let raw_px = raw.pixels.get(r, c);
        (high ^ raw_px) | raw_px
    });
    Ok(BinaryMask::new(pixels, raw.id.clone()))
}

/// [`refine_mask_with_band`] without a band restriction.
pub fn refine_mask(raw: &BinaryMask, u: &UncertaintyMap, t_un: f32) -> Result<BinaryMask> {
    refine_mask_with_band(raw, u, t_un, 0)
}

/// Prediction consistency across samples of one edge:
/// `1 - |intersection| / |union|`. An empty union scores the worst case 1.0.
pub fn consistency(masks: &[&BinaryMask]) -> Result<f64> {
    if masks.len() < 2 {
        return Err(Error::invalid(
            "masks",
            format!("need at least two masks, got {}", masks.len()),
        ));
    }
    for m in &masks[1..] {
        check_same_shape(&masks[0].pixels, &m.pixels, "consistency")?;
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..masks[0].pixels.len() {
        let mut and_bit = 1u8;
        let mut or_bit = 0u8;
        for m in masks {
            let v = (m.pixels.as_slice()[i] != 0) as u8;
            and_bit &= v;
            or_bit |= v;
        }
        inter += and_bit as usize;
        union += or_bit as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(1.0 - inter as f64 / union as f64)
}

fn scored_mask(generation: &Generation, source: ConsistencySource) -> &BinaryMask {
    match source {
        ConsistencySource::Refined => &generation.refined_mask,
        ConsistencySource::Raw => &generation.raw_mask,
    }
}

/// Mean uncertainty over a mask's predicted region; empty regions rank last.
fn mean_uncertainty_over(mask: &BinaryMask, u: &UncertaintyMap) -> f64 {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (m, v) in mask
        .pixels
        .as_slice()
        .iter()
        .zip(u.pixels.as_slice().iter())
    {
        if *m != 0 {
            sum += *v as f64;
            count += 1;
        }
    }
    if count == 0 {
        return f64::INFINITY;
    }
    sum / count as f64
}

fn hamming(a: &BinaryMask, b: &Grid2<u8>) -> usize {
    a.pixels
        .as_slice()
        .iter()
        .zip(b.as_slice().iter())
        .filter(|(x, y)| ((**x != 0) as u8) != ((**y != 0) as u8))
        .count()
}

/// Per-edge consistency scores for a fully populated grid.
pub fn edge_consistencies(
    generations: &[Vec<Generation>],
    cfg: &SelectorConfig,
) -> Result<Vec<f64>> {
    cfg.check()?;
    if generations.len() != cfg.n {
        return Err(Error::IncompleteGrid {
            message: format!("expected {} edges, got {}", cfg.n, generations.len()),
        });
    }
    let mut scores = Vec::with_capacity(cfg.n);
    for (i, row) in generations.iter().enumerate() {
        if row.len() != cfg.samples_per_edge {
            return Err(Error::IncompleteGrid {
                message: format!(
                    "edge {i}: expected {} samples, got {}",
                    cfg.samples_per_edge,
                    row.len()
                ),
            });
        }
        for (j, g) in row.iter().enumerate() {
            if g.edge_index != i || g.sample_index != j {
                return Err(Error::IncompleteGrid {
                    message: format!(
                        "slot ({i}, {j}) holds generation indexed ({}, {})",
                        g.edge_index, g.sample_index
                    ),
                });
            }
        }
        let masks: Vec<&BinaryMask> = row
            .iter()
            .map(|g| scored_mask(g, cfg.consistency_source))
            .collect();
        scores.push(consistency(&masks)?);
    }
    Ok(scores)
}

/// Select the most reliable generation from an `n x samples_per_edge` grid.
///
/// Edges with consistency above `t_r` are rejected; among survivors the
/// lowest score wins (ties to the smaller edge index). Within the winning
/// edge, the sample closest to the pixelwise majority vote wins, ties broken
/// by lower mean uncertainty over the predicted region, then by lower index.
pub fn select(
    target_id: impl Into<String>,
    generations: &[Vec<Generation>],
    cfg: &SelectorConfig,
) -> Result<ApproximationResult> {
    let target_id = target_id.into();
    let scores = edge_consistencies(generations, cfg)?;

    let mut best_edge: Option<(usize, f64)> = None;
    let mut min_score = f64::INFINITY;
    for (i, &r) in scores.iter().enumerate() {
        min_score = min_score.min(r);
        if r <= cfg.t_r as f64 {
            let better = match best_edge {
                None => true,
                Some((_, best_r)) => r < best_r,
            };
            if better {
                best_edge = Some((i, r));
            }
        }
    }

    let Some((edge_index, edge_score)) = best_edge else {
        return Ok(ApproximationResult {
            target_id,
            t_r: cfg.t_r,
            consistency: min_score as f32,
            accepted: false,
            chosen: None,
        });
    };

    let row = &generations[edge_index];
    let (h, w) = row[0].raw_mask.shape();
    let majority = Grid2::from_fn(h, w, |r, c| {
        let votes = row
            .iter()
            .filter(|g| scored_mask(g, cfg.consistency_source).pixels.get(r, c) != 0)
            .count();
        (2 * votes > cfg.samples_per_edge) as u8
    });

    let mut chosen_j = 0usize;
    let mut best_key = (usize::MAX, f64::INFINITY);
    for (j, g) in row.iter().enumerate() {
        let mask = scored_mask(g, cfg.consistency_source);
        let key = (hamming(mask, &majority), mean_uncertainty_over(mask, &g.uncertainty));
        if key.0 < best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1) {
            best_key = key;
            chosen_j = j;
        }
    }

    Ok(ApproximationResult {
        target_id,
        t_r: cfg.t_r,
        consistency: edge_score as f32,
        accepted: true,
        chosen: Some(Chosen {
            edge_index,
            sample_index: chosen_j,
            generation: row[chosen_j].clone(),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{EdgeMap, Image2D};
    use alloc::vec;

    fn mask(points: &[(usize, usize)], h: usize, w: usize) -> BinaryMask {
        let mut g = Grid2::filled(h, w, 0u8);
        for &(r, c) in points {
            g.set(r, c, 1);
        }
        BinaryMask::new(g, "m")
    }

    fn umap(value: f32, h: usize, w: usize) -> UncertaintyMap {
        UncertaintyMap {
            pixels: Grid2::filled(h, w, value),
        }
    }

    pub(crate) fn generation(
        edge_index: usize,
        sample_index: usize,
        refined: BinaryMask,
        uncertainty: UncertaintyMap,
    ) -> Generation {
        let (h, w) = refined.shape();
        Generation {
            edge_index,
            sample_index,
            image: Image2D::new(Grid2::filled(h, w, 0.5), (0.0, 1.0), "g"),
            raw_mask: refined.clone(),
            refined_mask: refined,
            uncertainty,
            edge: EdgeMap {
                pixels: Grid2::filled(h, w, 0),
                threshold: 30.0,
            },
        }
    }

    #[test]
    fn refine_is_identity_below_threshold() {
        let raw = mask(&[(1, 1)], 3, 3);
        let u = umap(0.1, 3, 3);
        let refined = refine_mask(&raw, &u, 0.2).unwrap();
        assert_eq!(refined.pixels, raw.pixels);
    }

    #[test]
    fn refine_three_by_three_hand_case() {
        // raw = {(1,1)}, high-uncertainty = {(1,1), (0,1)} -> union of both.
        let raw = mask(&[(1, 1)], 3, 3);
        let mut u = umap(0.0, 3, 3);
        u.pixels.set(1, 1, 0.9);
        u.pixels.set(0, 1, 0.9);
        let refined = refine_mask(&raw, &u, 0.2).unwrap();
        assert_eq!(refined.pixels, mask(&[(1, 1), (0, 1)], 3, 3).pixels);
    }

    #[test]
    fn refine_never_removes_raw_pixels() {
        let raw = BinaryMask::new(Grid2::filled(4, 4, 1u8), "m");
        let u = umap(9.0, 4, 4);
        let refined = refine_mask(&raw, &u, 0.2).unwrap();
        assert!(refined.pixels.as_slice().iter().all(|&v| v == 1));
    }

    #[test]
    fn refine_band_restricts_additions() {
        let raw = mask(&[(2, 2)], 8, 8);
        let mut u = umap(0.0, 8, 8);
        u.pixels.set(2, 3, 0.9); // inside a 1-px band
        u.pixels.set(6, 6, 0.9); // far away
        let refined = refine_mask_with_band(&raw, &u, 0.2, 1).unwrap();
        assert_eq!(refined.pixels, mask(&[(2, 2), (2, 3)], 8, 8).pixels);
    }

    #[test]
    fn consistency_reference_cases() {
        let a = mask(&[(0, 0), (0, 1)], 4, 4);
        assert_eq!(consistency(&[&a, &a, &a]).unwrap(), 0.0);

        let b = mask(&[(1, 0)], 4, 4);
        let c = mask(&[(2, 0)], 4, 4);
        assert_eq!(consistency(&[&a, &b, &c]).unwrap(), 1.0);

        // |∩| = 4, |∪| = 10 -> R = 0.6
        let base: Vec<(usize, usize)> = (0..4).map(|i| (i, 0)).collect();
        let m1 = mask(&[&base[..], &[(0, 1), (1, 1), (2, 1)]].concat(), 4, 4);
        let m2 = mask(&[&base[..], &[(0, 2), (1, 2)]].concat(), 4, 4);
        let m3 = mask(&[&base[..], &[(3, 3)]].concat(), 4, 4);
        assert_eq!(consistency(&[&m1, &m2, &m3]).unwrap(), 0.6);
    }

    #[test]
    fn consistency_empty_union_is_worst() {
        let e = mask(&[], 4, 4);
        assert_eq!(consistency(&[&e, &e, &e]).unwrap(), 1.0);
    }

    fn grid_with_rows(rows: Vec<Vec<BinaryMask>>) -> Vec<Vec<Generation>> {
        rows.into_iter()
            .enumerate()
            .map(|(i, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(j, m)| {
                        let (h, w) = m.shape();
                        generation(i, j, m, umap(0.1, h, w))
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn select_prefers_lowest_consistency_survivor() {
        // Edge 0: R = 0.2 (two identical + overlap), edge 1: R = 0.4.
        let shared: Vec<(usize, usize)> = (0..8).map(|i| (i / 4, i % 4)).collect();
        let e0 = vec![
            mask(&[&shared[..], &[(3, 0), (3, 1)]].concat(), 6, 6),
            mask(&shared, 6, 6),
            mask(&shared, 6, 6),
        ];
        let long: Vec<(usize, usize)> = (0..10).map(|i| (i / 4, i % 4)).collect();
        let e1 = vec![
            mask(&long, 6, 6),
            mask(&long[..6], 6, 6),
            mask(&long, 6, 6),
        ];
        let grid = grid_with_rows(vec![e0, e1]);
        let cfg = SelectorConfig {
            t_r: 0.3,
            ..SelectorConfig::default()
        };
        let result = select("t", &grid, &cfg).unwrap();
        assert!(result.accepted);
        assert_eq!(result.chosen.as_ref().unwrap().edge_index, 0);
        assert!(result.consistency <= 0.3);
    }

    #[test]
    fn select_rejects_when_all_edges_fail() {
        let a = mask(&[(0, 0)], 4, 4);
        let b = mask(&[(1, 1)], 4, 4);
        let c = mask(&[(2, 2)], 4, 4);
        let rows = vec![
            vec![a.clone(), b.clone(), c.clone()],
            vec![a, b, c],
        ];
        let grid = grid_with_rows(rows);
        let cfg = SelectorConfig {
            t_r: 0.3,
            ..SelectorConfig::default()
        };
        let result = select("t", &grid, &cfg).unwrap();
        assert!(!result.accepted);
        assert!(result.chosen.is_none());
        assert_eq!(result.consistency, 1.0);
    }

    #[test]
    fn select_majority_vote_breaks_toward_agreement() {
        // A = B identical, C disjoint: majority = A; C loses on hamming.
        let a_pts: Vec<(usize, usize)> = vec![(0, 0), (0, 1), (1, 0)];
        let a = mask(&a_pts, 4, 4);
        let b = mask(&a_pts, 4, 4);
        let c = mask(&[(3, 3)], 4, 4);
        let mut grid = grid_with_rows(vec![vec![a, b, c]]);
        // Give sample 1 lower uncertainty so the tie between A and B resolves to it.
        grid[0][0].uncertainty = umap(0.5, 4, 4);
        grid[0][1].uncertainty = umap(0.05, 4, 4);
        let cfg = SelectorConfig {
            t_r: 1.0,
            n: 1,
            ..SelectorConfig::default()
        };
        let result = select("t", &grid, &cfg).unwrap();
        let chosen = result.chosen.unwrap();
        assert_eq!(chosen.sample_index, 1);
    }

    #[test]
    fn select_requires_full_grid() {
        let a = mask(&[(0, 0)], 4, 4);
        let grid = grid_with_rows(vec![vec![a.clone(), a]]);
        let cfg = SelectorConfig {
            n: 1,
            ..SelectorConfig::default()
        };
        assert!(matches!(
            select("t", &grid, &cfg),
            Err(Error::IncompleteGrid { .. })
        ));
    }
}
