//! Dice / ASSD evaluation reports and approximation quality accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sfda_core::domain::BinaryMask;
use sfda_core::metrics::{assd, dice};

use crate::Result;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerImageScore {
    pub id: String,
    /// Dice in percent.
    pub dice: f64,
    /// ASSD in millimetres; absent when either surface is empty.
    pub assd_mm: Option<f64>,
}

/// Aggregate segmentation report. Means and standard deviations are in the
/// same units as the per-image rows (percent / millimetres) and are always
/// recomputable from them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub assd_mean: Option<f64>,
    pub assd_std: Option<f64>,
    /// Images whose ASSD is undefined (an empty surface), excluded from the
    /// ASSD aggregate.
    pub assd_excluded: usize,
    /// Ground-truth ids with no matching prediction; excluded and flagged.
    pub missing: Vec<String>,
    /// Population (vs sample) standard deviation convention.
    pub population_std: bool,
    pub per_image: Vec<PerImageScore>,
}

/// Mean and standard deviation (population when `population` is set).
pub fn mean_std(values: &[f64], population: bool) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let denom = if population { n } else { n - 1.0 };
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / denom;
    (mean, var.sqrt())
}

/// Table-style `mean ± std` with two decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

/// Score predictions against ground truth, id-aligned on the ground-truth
/// keys. Missing predictions are listed and excluded.
pub fn evaluate(
    predictions: &BTreeMap<String, BinaryMask>,
    ground_truth: &BTreeMap<String, BinaryMask>,
    spacing_mm: (f32, f32),
    population_std: bool,
) -> Result<EvalReport> {
    let mut per_image = Vec::new();
    let mut missing = Vec::new();
    let mut assd_excluded = 0usize;
    for (id, gt) in ground_truth {
        let Some(pred) = predictions.get(id) else {
            missing.push(id.clone());
            continue;
        };
        let dice_percent = 100.0 * dice(pred, gt)?;
        let assd_mm = match assd(pred, gt, spacing_mm) {
            Ok(v) => Some(v),
            Err(sfda_core::Error::UndefinedSurface { .. }) => {
                assd_excluded += 1;
                None
            }
            Err(e) => return Err(e.into()),
        };
        per_image.push(PerImageScore {
            id: id.clone(),
            dice: dice_percent,
            assd_mm,
        });
    }
    let dices: Vec<f64> = per_image.iter().map(|p| p.dice).collect();
    let assds: Vec<f64> = per_image.iter().filter_map(|p| p.assd_mm).collect();
    let (dice_mean, dice_std) = mean_std(&dices, population_std);
    let (assd_mean, assd_std) = if assds.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&assds, population_std);
        (Some(m), Some(s))
    };
    Ok(EvalReport {
        count: per_image.len(),
        dice_mean,
        dice_std,
        assd_mean,
        assd_std,
        assd_excluded,
        missing,
        population_std,
        per_image,
    })
}

impl EvalReport {
    /// Human-readable summary in the comparison-table style.
    pub fn table(&self) -> String {
        let assd = match (self.assd_mean, self.assd_std) {
            (Some(m), Some(s)) => format_mean_std(m, s),
            _ => "undefined".to_string(),
        };
        let mut out = format!(
            "n = {}\nDice (%) ↑:  {}\nASSD (mm) ↓: {}\n",
            self.count,
            format_mean_std(self.dice_mean, self.dice_std),
            assd
        );
        if self.assd_excluded > 0 {
            out.push_str(&format!(
                "({} image(s) excluded from ASSD: empty surface)\n",
                self.assd_excluded
            ));
        }
        if !self.missing.is_empty() {
            out.push_str(&format!("missing predictions: {:?}\n", self.missing));
        }
        out
    }
}

/// Quality (mean pseudo-label Dice vs ground truth, percent) and quantity
/// (accepted count) for an approximation run. Quality is undefined at
/// quantity zero.
pub fn approximation_quality(
    accepted: &[(BinaryMask, BinaryMask)],
) -> Result<(Option<f64>, usize)> {
    if accepted.is_empty() {
        return Ok((None, 0));
    }
    let mut sum = 0.0;
    for (label, gt) in accepted {
        sum += 100.0 * dice(label, gt)?;
    }
    Ok((Some(sum / accepted.len() as f64), accepted.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sfda_core::Grid2;

    fn mask(points: &[(usize, usize)], h: usize, w: usize, id: &str) -> BinaryMask {
        let mut g = Grid2::filled(h, w, 0u8);
        for &(r, c) in points {
            g.set(r, c, 1);
        }
        BinaryMask::new(g, id)
    }

    #[test]
    fn perfect_prediction_scores_100_and_0() {
        let gt = mask(&[(3, 3), (3, 4)], 8, 8, "a");
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), gt.clone());
        let mut gts = BTreeMap::new();
        gts.insert("a".to_string(), gt);
        let report = evaluate(&preds, &gts, (1.0, 1.0), true).unwrap();
        assert_eq!(report.dice_mean, 100.0);
        assert_eq!(report.assd_mean, Some(0.0));
        assert_eq!(format_mean_std(report.dice_mean, report.dice_std), "100.00 ± 0.00");
    }

    #[test]
    fn population_std_convention() {
        // Dice {100, 0} -> mean 50, population std 50.
        let gt_a = mask(&[(1, 1)], 8, 8, "a");
        let gt_b = mask(&[(2, 2)], 8, 8, "b");
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), gt_a.clone());
        preds.insert("b".to_string(), mask(&[(6, 6)], 8, 8, "b"));
        let mut gts = BTreeMap::new();
        gts.insert("a".to_string(), gt_a);
        gts.insert("b".to_string(), gt_b);
        let report = evaluate(&preds, &gts, (1.0, 1.0), true).unwrap();
        assert_eq!(report.dice_mean, 50.0);
        assert_eq!(report.dice_std, 50.0);
        assert_eq!(format_mean_std(report.dice_mean, report.dice_std), "50.00 ± 50.00");
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let mut preds = BTreeMap::new();
        let mut gts = BTreeMap::new();
        for (i, pts) in [&[(1usize, 1usize)][..], &[(2, 2), (2, 3)], &[(5, 5)]].iter().enumerate()
        {
            let id = format!("s{i}");
            gts.insert(id.clone(), mask(pts, 8, 8, &id));
            preds.insert(id.clone(), mask(&[(1, 1), (2, 2)], 8, 8, &id));
        }
        let report = evaluate(&preds, &gts, (1.0, 1.0), true).unwrap();
        let (m, s) = mean_std(
            &report.per_image.iter().map(|p| p.dice).collect::<Vec<_>>(),
            true,
        );
        assert!((report.dice_mean - m).abs() < 1e-12);
        assert!((report.dice_std - s).abs() < 1e-12);
        assert_eq!(report.count, 3);
    }

    #[test]
    fn missing_prediction_is_flagged() {
        let gt = mask(&[(1, 1)], 8, 8, "a");
        let mut gts = BTreeMap::new();
        gts.insert("a".to_string(), gt);
        gts.insert("b".to_string(), mask(&[(2, 2)], 8, 8, "b"));
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), mask(&[(1, 1)], 8, 8, "a"));
        let report = evaluate(&preds, &gts, (1.0, 1.0), true).unwrap();
        assert_eq!(report.count, 1);
        assert_eq!(report.missing, vec!["b".to_string()]);
    }

    #[test]
    fn empty_surfaces_are_excluded_from_assd() {
        let mut gts = BTreeMap::new();
        gts.insert("a".to_string(), mask(&[(1, 1)], 8, 8, "a"));
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), mask(&[], 8, 8, "a"));
        let report = evaluate(&preds, &gts, (1.0, 1.0), true).unwrap();
        assert_eq!(report.assd_excluded, 1);
        assert_eq!(report.assd_mean, None);
        assert_eq!(report.per_image[0].assd_mm, None);
        assert_eq!(report.per_image[0].dice, 0.0);
    }

    #[test]
    fn quality_of_empty_manifest_is_undefined() {
        let (quality, quantity) = approximation_quality(&[]).unwrap();
        assert_eq!(quality, None);
        assert_eq!(quantity, 0);
        let gt = mask(&[(1, 1)], 8, 8, "a");
        let (quality, quantity) = approximation_quality(&[(gt.clone(), gt)]).unwrap();
        assert_eq!(quality, Some(100.0));
        assert_eq!(quantity, 1);
    }

    #[test]
    fn table_format_roundtrips() {
        let text = format_mean_std(77.834_9, 0.984_2);
        assert_eq!(text, "77.83 ± 0.98");
        let parts: Vec<&str> = text.split(" ± ").collect();
        let mean: f64 = parts[0].parse().unwrap();
        let std: f64 = parts[1].parse().unwrap();
        assert_eq!(mean, 77.83);
        assert_eq!(std, 0.98);
    }
}
