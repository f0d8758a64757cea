//! Overlap and surface-distance metrics for binary masks.

use alloc::vec;
use alloc::vec::Vec;

use crate::domain::BinaryMask;
use crate::error::Error;
use crate::grid::{check_same_shape, Grid2};
use crate::Result;

const INF: f64 = 1e20;

/// Dice overlap `2|P∩G| / (|P|+|G|)`. Two empty masks compare as 1.0.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same_shape(&pred.pixels, &gt.pixels, "dice")?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (p, g) in pred
        .pixels
        .as_slice()
        .iter()
        .zip(gt.pixels.as_slice().iter())
    {
        let (p, g) = ((*p != 0) as usize, (*g != 0) as usize);
        inter += p & g;
        total += p + g;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Boundary of a mask under 4-connectivity erosion: foreground pixels with at
/// least one 4-neighbor that is background or outside the image.
pub fn boundary_4(mask: &Grid2<u8>) -> Grid2<u8> {
    let (h, w) = mask.shape();
    let inside = |r: i64, c: i64| {
        r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && mask.get(r as usize, c as usize) != 0
    };
    Grid2::from_fn(h, w, |r, c| {
        if mask.get(r, c) == 0 {
            return 0;
        }
        let (r, c) = (r as i64, c as i64);
        let surrounded =
            inside(r - 1, c) && inside(r + 1, c) && inside(r, c - 1) && inside(r, c + 1);
        (!surrounded) as u8
    })
}

/// One pass of the lower-envelope squared distance transform, with a squared
/// per-axis weight (anisotropic spacing).
fn dt_1d(f: &[f64], weight_sq: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + weight_sq * (q * q) as f64) - (f[p] + weight_sq * (p * p) as f64))
                / (2.0 * weight_sq * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            // All previous parabolas dominated; restart the envelope at q.
            v[0] = q;
            z[0] = -INF;
            z[1] = INF;
            k = 0;
            continue;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = INF;
    }
    let mut k = 0usize;
    for (q, slot) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *slot = f[p] + weight_sq * d * d;
    }
}

/// Exact squared Euclidean distance to the nearest foreground pixel of
/// `points`, with anisotropic `(row, col)` spacing in millimetres.
fn squared_edt(points: &Grid2<u8>, spacing_mm: (f32, f32)) -> Grid2<f64> {
    let (h, w) = points.shape();
    let mut dist = Grid2::from_fn(h, w, |r, c| if points.get(r, c) != 0 { 0.0 } else { INF });
    let (wr, wc) = (spacing_mm.0 as f64, spacing_mm.1 as f64);

    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = dist.get(r, c);
        }
        dt_1d(&col_in, wr * wr, &mut col_out);
        for r in 0..h {
            dist.set(r, c, col_out[r]);
        }
    }
    let mut row_in = vec![0.0f64; w];
    let mut row_out = vec![0.0f64; w];
    for r in 0..h {
        for c in 0..w {
            row_in[c] = dist.get(r, c);
        }
        dt_1d(&row_in, wc * wc, &mut row_out);
        for c in 0..w {
            dist.set(r, c, row_out[c]);
        }
    }
    dist
}

fn directed_mean(from: &Grid2<u8>, dist_to_other: &Grid2<f64>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, c, v) in from.iter_indexed() {
        if v != 0 {
            sum += libm::sqrt(dist_to_other.get(r, c));
            count += 1;
        }
    }
    sum / count as f64
}

/// Average symmetric surface distance in millimetres: the mean of the two
/// directed average boundary distances, boundaries taken by 4-connectivity
/// erosion, distances Euclidean with anisotropic pixel spacing.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask, spacing_mm: (f32, f32)) -> Result<f64> {
    check_same_shape(&pred.pixels, &gt.pixels, "assd")?;
    if pred.is_blank() {
        return Err(Error::UndefinedSurface { which: "pred" });
    }
    if gt.is_blank() {
        return Err(Error::UndefinedSurface { which: "gt" });
    }
    let pb = boundary_4(&pred.pixels);
    let gb = boundary_4(&gt.pixels);
    let to_gt = squared_edt(&gb, spacing_mm);
    let to_pred = squared_edt(&pb, spacing_mm);
    Ok(0.5 * (directed_mean(&pb, &to_gt) + directed_mean(&gb, &to_pred)))
}

/// Brute-force all-pairs counterpart of [`assd`], for verification.
pub fn assd_bruteforce(pred: &BinaryMask, gt: &BinaryMask, spacing_mm: (f32, f32)) -> Result<f64> {
    check_same_shape(&pred.pixels, &gt.pixels, "assd")?;
    if pred.is_blank() {
        return Err(Error::UndefinedSurface { which: "pred" });
    }
    if gt.is_blank() {
        return Err(Error::UndefinedSurface { which: "gt" });
    }
    let collect = |g: &Grid2<u8>| -> Vec<(usize, usize)> {
        boundary_4(g)
            .iter_indexed()
            .filter(|&(_, _, v)| v != 0)
            .map(|(r, c, _)| (r, c))
            .collect()
    };
    let pb = collect(&pred.pixels);
    let gb = collect(&gt.pixels);
    let (wr, wc) = (spacing_mm.0 as f64, spacing_mm.1 as f64);
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        let mut sum = 0.0;
        for &(r, c) in from {
            let mut best = f64::INFINITY;
            for &(tr, tc) in to {
                let dr = (r as f64 - tr as f64) * wr;
                let dc = (c as f64 - tc as f64) * wc;
                best = best.min(dr * dr + dc * dc);
            }
            sum += libm::sqrt(best);
        }
        sum / from.len() as f64
    };
    Ok(0.5 * (directed(&pb, &gb) + directed(&gb, &pb)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn mask_from(points: &[(usize, usize)], h: usize, w: usize) -> BinaryMask {
        let mut g = Grid2::filled(h, w, 0u8);
        for &(r, c) in points {
            g.set(r, c, 1);
        }
        BinaryMask::new(g, "m")
    }

    #[test]
    fn dice_identical_and_disjoint() {
        let a = mask_from(&[(1, 1), (1, 2), (2, 1)], 8, 8);
        let b = mask_from(&[(5, 5), (5, 6)], 8, 8);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dice_counted_example() {
        // |P| = 6, |G| = 4, |P∩G| = 3 -> 2*3 / 10 = 0.6
        let p = mask_from(&[(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)], 8, 8);
        let g = mask_from(&[(0, 0), (0, 1), (1, 0), (4, 4)], 8, 8);
        assert_eq!(dice(&p, &g).unwrap(), 0.6);
    }

    #[test]
    fn dice_both_empty_is_one() {
        let e = mask_from(&[], 8, 8);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn assd_identical_masks_is_zero() {
        let a = mask_from(&[(2, 2), (2, 3), (3, 2), (3, 3)], 8, 8);
        assert_eq!(assd(&a, &a, (1.0, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn assd_two_points_five_apart() {
        let a = mask_from(&[(1, 1)], 10, 10);
        let b = mask_from(&[(1, 6)], 10, 10);
        assert_eq!(assd(&a, &b, (1.0, 1.0)).unwrap(), 5.0);
    }

    #[test]
    fn assd_empty_mask_is_an_error() {
        let a = mask_from(&[(1, 1)], 8, 8);
        let e = mask_from(&[], 8, 8);
        assert!(matches!(
            assd(&a, &e, (1.0, 1.0)),
            Err(Error::UndefinedSurface { which: "gt" })
        ));
        assert!(matches!(
            assd(&e, &a, (1.0, 1.0)),
            Err(Error::UndefinedSurface { which: "pred" })
        ));
    }

    #[test]
    fn assd_shifted_square_matches_bruteforce() {
        let square = |top: usize, left: usize| {
            let mut pts = Vec::new();
            for r in top..top + 10 {
                for c in left..left + 10 {
                    pts.push((r, c));
                }
            }
            mask_from(&pts, 24, 24)
        };
        let a = square(4, 4);
        let b = square(4, 6);
        let fast = assd(&a, &b, (1.0, 1.0)).unwrap();
        let slow = assd_bruteforce(&a, &b, (1.0, 1.0)).unwrap();
        assert!((fast - slow).abs() < 1e-9, "fast {fast} vs slow {slow}");
    }

    #[test]
    fn assd_respects_anisotropic_spacing() {
        let a = mask_from(&[(1, 1)], 10, 10);
        let b = mask_from(&[(4, 1)], 10, 10);
        // 3 rows apart, 2 mm per row.
        assert!((assd(&a, &b, (2.0, 1.0)).unwrap() - 6.0).abs() < 1e-12);
    }
}
