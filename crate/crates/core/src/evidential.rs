//! Evidential segmentation math: the per-pixel Normal-Inverse-Gamma
//! negative log-likelihood with its evidence regularizer, the combined
//! cross-entropy + Dice segmentation loss, and the closed-form prediction
//! and uncertainty read-outs.
//!
//! All loss arithmetic runs in f64 regardless of the f32 storage of the
//! parameter maps. Analytic gradients are provided alongside each loss so
//! they can be checked against finite differences.

use alloc::vec::Vec;

use crate::domain::{BinaryMask, NIGField, UncertaintyMap};
use crate::error::Error;
use crate::grid::{check_same_shape, Grid2};
use crate::Result;

/// Clamp floor for the cross-entropy logarithms.
pub const CE_EPS: f64 = 1e-7;

/// Tolerance for probabilities that stray outside [0, 1].
pub const PROB_TOLERANCE: f64 = 1e-6;

/// Mask binarization threshold; strictly greater-than.
pub const MASK_THRESHOLD: f32 = 0.5;

/// Predicted mask: the expected value `gamma`, binarized at 0.5 with a
/// strict inequality (0.5 itself maps to background).
pub fn predicted_mask(field: &NIGField, id: impl Into<alloc::string::String>) -> BinaryMask {
    BinaryMask::new(
        field.gamma.map(|g| (g > MASK_THRESHOLD) as u8),
        id,
    )
}

/// Epistemic uncertainty `beta / (omega * (alpha - 1))`, elementwise.
pub fn uncertainty(field: &NIGField) -> UncertaintyMap {
    let omega = field.omega.as_slice();
    let alpha = field.alpha.as_slice();
    let beta = field.beta.as_slice();
    let mut pixels = Vec::with_capacity(beta.len());
    for i in 0..beta.len() {
        pixels.push(beta[i] / (omega[i] * (alpha[i] - 1.0)));
    }
    let (h, w) = field.shape();
    UncertaintyMap {
        pixels: Grid2::from_vec(h, w, pixels).expect("shape preserved"),
    }
}

/// Cross-entropy plus smoothed Dice loss against a binary target.
///
/// The Dice complement uses the `+1` smoothing in both numerator and
/// denominator, so an all-background prediction against an all-background
/// target costs zero. Cross-entropy is averaged over pixels.
pub fn seg_loss(probs: &Grid2<f32>, target: &BinaryMask) -> Result<f64> {
    check_same_shape(probs, &target.pixels, "seg_loss")?;
    let n = probs.len() as f64;
    let mut ce = 0.0f64;
    let mut inter = 0.0f64;
    let mut pred_sum = 0.0f64;
    let mut target_sum = 0.0f64;
    for (p, y) in probs
        .as_slice()
        .iter()
        .zip(target.pixels.as_slice().iter())
    {
        let p = *p as f64;
        if !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&p) {
            return Err(Error::invalid(
                "probs",
                "probability outside [0, 1] beyond tolerance",
            ));
        }
        let p = p.clamp(0.0, 1.0);
        let y = (*y != 0) as u8 as f64;
        ce -= y * libm::log(p.max(CE_EPS)) + (1.0 - y) * libm::log((1.0 - p).max(CE_EPS));
        inter += y * p;
        pred_sum += p;
        target_sum += y;
    }
    let dice_term = 1.0 - (2.0 * inter + 1.0) / (target_sum + pred_sum + 1.0);
    Ok(ce / n + dice_term)
}

/// Digamma via upward recurrence and the asymptotic series.
pub fn digamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0f64;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + libm::log(x) - 0.5 * inv
        - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 / 240.0)))
}

struct PixelTerms {
    residual: f64,
    omega: f64,
    alpha: f64,
    beta: f64,
    big_omega: f64,
    s: f64,
}

fn pixel_terms(field: &NIGField, target: &BinaryMask, i: usize) -> PixelTerms {
    let gamma = field.gamma.as_slice()[i] as f64;
    let omega = field.omega.as_slice()[i] as f64;
    let alpha = field.alpha.as_slice()[i] as f64;
    let beta = field.beta.as_slice()[i] as f64;
    let y = (target.pixels.as_slice()[i] != 0) as u8 as f64;
    let residual = y - gamma;
    let big_omega = 2.0 * beta * (1.0 + omega);
    let s = residual * residual * omega + big_omega;
    PixelTerms {
        residual,
        omega,
        alpha,
        beta,
        big_omega,
        s,
    }
}

fn check_field_finite(field: &NIGField) -> Result<()> {
    for grid in [&field.gamma, &field.omega, &field.alpha, &field.beta] {
        if grid.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "nig_loss input",
            });
        }
    }
    Ok(())
}

/// Evidential loss: mean NIG negative log-likelihood plus
/// `lambda * mean(|y - gamma| * (2 omega + alpha))`.
pub fn nig_loss(field: &NIGField, target: &BinaryMask, lambda_reg: f64) -> Result<f64> {
    check_same_shape(&field.gamma, &target.pixels, "nig_loss")?;
    check_field_finite(field)?;
    let n = field.gamma.len();
    let mut nll = 0.0f64;
    let mut reg = 0.0f64;
    for i in 0..n {
        let p = pixel_terms(field, target, i);
        nll += 0.5 * libm::log(core::f64::consts::PI / p.omega) - p.alpha * libm::log(p.big_omega)
            + (p.alpha + 0.5) * libm::log(p.s)
            + libm::lgamma(p.alpha)
            - libm::lgamma(p.alpha + 0.5);
        reg += libm::fabs(p.residual) * (2.0 * p.omega + p.alpha);
    }
    let loss = nll / n as f64 + lambda_reg * reg / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "nig_loss output",
        });
    }
    Ok(loss)
}

/// Gradient maps of [`nig_loss`] with respect to each parameter map.
pub struct NigLossGrad {
    pub d_gamma: Grid2<f64>,
    pub d_omega: Grid2<f64>,
    pub d_alpha: Grid2<f64>,
    pub d_beta: Grid2<f64>,
}

/// Analytic per-pixel gradients of the mean evidential loss.
///
/// The regularizer's `|y - gamma|` uses the zero subgradient at the kink.
pub fn nig_loss_grad(
    field: &NIGField,
    target: &BinaryMask,
    lambda_reg: f64,
) -> Result<NigLossGrad> {
    check_same_shape(&field.gamma, &target.pixels, "nig_loss_grad")?;
    check_field_finite(field)?;
    let n = field.gamma.len();
    let inv_n = 1.0 / n as f64;
    let mut d_gamma = Vec::with_capacity(n);
    let mut d_omega = Vec::with_capacity(n);
    let mut d_alpha = Vec::with_capacity(n);
    let mut d_beta = Vec::with_capacity(n);
    for i in 0..n {
        let p = pixel_terms(field, target, i);
        let sign_r = if p.residual > 0.0 {
            1.0
        } else if p.residual < 0.0 {
            -1.0
        } else {
            0.0
        };
        let half_plus_alpha = p.alpha + 0.5;

        let g_gamma = half_plus_alpha * (-2.0 * p.residual * p.omega) / p.s
            + lambda_reg * (-sign_r) * (2.0 * p.omega + p.alpha);
        let g_omega = -0.5 / p.omega - p.alpha * (2.0 * p.beta) / p.big_omega
            + half_plus_alpha * (p.residual * p.residual + 2.0 * p.beta) / p.s
            + lambda_reg * 2.0 * libm::fabs(p.residual);
        let g_alpha = -libm::log(p.big_omega) + libm::log(p.s) + digamma(p.alpha)
            - digamma(p.alpha + 0.5)
            + lambda_reg * libm::fabs(p.residual);
        let g_beta = -p.alpha / p.beta + half_plus_alpha * 2.0 * (1.0 + p.omega) / p.s;

        d_gamma.push(g_gamma * inv_n);
        d_omega.push(g_omega * inv_n);
        d_alpha.push(g_alpha * inv_n);
        d_beta.push(g_beta * inv_n);
    }
    let (h, w) = field.shape();
    let wrap = |v: Vec<f64>| Grid2::from_vec(h, w, v).expect("shape preserved");
    Ok(NigLossGrad {
        d_gamma: wrap(d_gamma),
        d_omega: wrap(d_omega),
        d_alpha: wrap(d_alpha),
        d_beta: wrap(d_beta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::NIGField;

    fn one_pixel_field(gamma: f32, omega: f32, alpha: f32, beta: f32) -> NIGField {
        NIGField {
            gamma: Grid2::filled(1, 1, gamma),
            omega: Grid2::filled(1, 1, omega),
            alpha: Grid2::filled(1, 1, alpha),
            beta: Grid2::filled(1, 1, beta),
        }
    }

    fn one_pixel_target(y: u8) -> BinaryMask {
        BinaryMask::new(Grid2::filled(1, 1, y), "y")
    }

    #[test]
    fn uncertainty_matches_direct_arithmetic() {
        let field = one_pixel_field(0.9, 2.0, 3.0, 2.0);
        let u = uncertainty(&field);
        assert_eq!(u.pixels.get(0, 0), 2.0f32 / (2.0 * 2.0));
        let mask = predicted_mask(&field, "p");
        assert_eq!(mask.pixels.get(0, 0), 1);
    }

    #[test]
    fn gamma_exactly_half_maps_to_background() {
        let field = one_pixel_field(0.5, 2.0, 2.0, 1.0);
        assert_eq!(predicted_mask(&field, "p").pixels.get(0, 0), 0);
    }

    #[test]
    fn nig_nll_zero_residual_reference_value() {
        // y = gamma = 1, omega = 2, alpha = 2, beta = 1; frozen from an
        // independent high-precision evaluation.
        let field = one_pixel_field(1.0, 2.0, 2.0, 1.0);
        let target = one_pixel_target(1);
        let loss = nig_loss(&field, &target, 0.0).unwrap();
        assert!((loss - 0.836_988_216_785_835_8).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn regularizer_vanishes_at_zero_residual() {
        let field = one_pixel_field(1.0, 2.0, 2.0, 1.0);
        let target = one_pixel_target(1);
        let with = nig_loss(&field, &target, 0.5).unwrap();
        let without = nig_loss(&field, &target, 0.0).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn loss_increases_with_residual() {
        let target = one_pixel_target(1);
        let mut last = f64::NEG_INFINITY;
        for gamma in [1.0f32, 0.8, 0.5, 0.1, -0.5] {
            let field = one_pixel_field(gamma, 2.0, 2.0, 1.0);
            let loss = nig_loss(&field, &target, 0.01).unwrap();
            assert!(loss > last, "gamma {gamma} loss {loss} last {last}");
            last = loss;
        }
    }

    #[test]
    fn seg_loss_reference_values() {
        // Perfect prediction on a nonempty mask: only the CE clamp remains.
        let y = BinaryMask::new(
            Grid2::from_fn(4, 4, |r, c| ((r, c) == (1, 2)) as u8),
            "y",
        );
        let perfect = y.pixels.map(|v| v as f32);
        let loss = seg_loss(&perfect, &y).unwrap();
        assert!(loss.abs() < 1e-6, "loss {loss}");

        // All-zero prediction against an all-zero target: smoothing only.
        let zero_mask = BinaryMask::new(Grid2::filled(4, 4, 0u8), "z");
        let zeros = Grid2::filled(4, 4, 0.0f32);
        assert_eq!(seg_loss(&zeros, &zero_mask).unwrap(), 0.0);

        // Uniform 0.5 against a single positive pixel of 16; frozen from an
        // independent scalar evaluation.
        let half = Grid2::filled(4, 4, 0.5f32);
        let loss = seg_loss(&half, &y).unwrap();
        assert!((loss - 1.493_147_180_559_945_2).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn seg_loss_rejects_out_of_range() {
        let y = one_pixel_target(0);
        let bad = Grid2::filled(1, 1, 1.1f32);
        assert!(seg_loss(&bad, &y).is_err());
        let ok = Grid2::filled(1, 1, 1.000_000_4f32);
        assert!(seg_loss(&ok, &y).is_ok());
    }

    #[test]
    fn digamma_reference_values() {
        // psi(1) = -EulerGamma, psi(2) = 1 - EulerGamma, psi(0.5) = -gamma - 2 ln 2
        let euler = 0.577_215_664_901_532_9;
        assert!((digamma(1.0) + euler).abs() < 1e-12);
        assert!((digamma(2.0) - (1.0 - euler)).abs() < 1e-12);
        assert!((digamma(0.5) + euler + 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let cases = [
            (0.3f32, 1.7f32, 1.9f32, 0.8f32, 1u8, 0.01),
            (0.9, 3.0, 2.5, 1.5, 0, 0.05),
            (-0.2, 1.2, 1.1, 0.3, 1, 0.0),
        ];
        for (gamma, omega, alpha, beta, y, lambda) in cases {
            let target = one_pixel_target(y);
            let grads = nig_loss_grad(&one_pixel_field(gamma, omega, alpha, beta), &target, lambda)
                .unwrap();
            let eval = |g: f32, o: f32, a: f32, b: f32| {
                nig_loss(&one_pixel_field(g, o, a, b), &target, lambda).unwrap()
            };
            // Central differences over the realized f32 steps, so parameter
            // quantization does not pollute the comparison.
            let h = 1e-4f32;
            let step = |v: f32| (v + h, v - h, (v + h) as f64 - (v - h) as f64);
            let (gp, gm, gd) = step(gamma);
            let (op, om, od) = step(omega);
            let (ap, am, ad) = step(alpha);
            let (bp, bm, bd) = step(beta);
            let fd = [
                (eval(gp, omega, alpha, beta) - eval(gm, omega, alpha, beta)) / gd,
                (eval(gamma, op, alpha, beta) - eval(gamma, om, alpha, beta)) / od,
                (eval(gamma, omega, ap, beta) - eval(gamma, omega, am, beta)) / ad,
                (eval(gamma, omega, alpha, bp) - eval(gamma, omega, alpha, bm)) / bd,
            ];
            let analytic = [
                grads.d_gamma.get(0, 0),
                grads.d_omega.get(0, 0),
                grads.d_alpha.get(0, 0),
                grads.d_beta.get(0, 0),
            ];
            for (a, f) in analytic.iter().zip(fd.iter()) {
                let rel = (a - f).abs() / f.abs().max(1e-8);
                assert!(rel < 1e-4, "analytic {a} fd {f}");
            }
        }
    }
}
