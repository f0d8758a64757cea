//! Linear-beta diffusion schedule and the closed-form noising / deterministic
//! (eta = 0) sampling arithmetic built on it.
//!
//! Everything here is pure scalar math; the companion crate supplies the
//! noise-prediction network and drives these routines tensor-side.

use alloc::vec::Vec;

use crate::error::Error;
use crate::Result;

/// Variance schedule with per-step `beta` and cumulative `alpha` products.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear schedule from `beta_start` to `beta_end` over `num_steps`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("num_steps", "must be positive"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::invalid(
                "beta",
                "need 0 < beta_start < beta_end < 1",
            ));
        }
        let mut betas = Vec::with_capacity(num_steps);
        let mut alphas_cumprod = Vec::with_capacity(num_steps);
        let mut prod = 1.0f64;
        for i in 0..num_steps {
            let frac = if num_steps == 1 {
                0.0
            } else {
                i as f64 / (num_steps - 1) as f64
            };
            let beta = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - beta;
            betas.push(beta);
            alphas_cumprod.push(prod);
        }
        Ok(DiffusionSchedule {
            num_steps,
            beta_start,
            beta_end,
            betas,
            alphas_cumprod,
        })
    }

    /// DDPM defaults: 1000 steps, beta 1e-4 to 2e-2.
    pub fn default_linear() -> Self {
        DiffusionSchedule::linear(1000, 1e-4, 2e-2).expect("defaults are valid")
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_steps {
            return Err(Error::TimestepOutOfRange {
                t,
                num_steps: self.num_steps,
            });
        }
        Ok(())
    }

    /// `sqrt(alpha_bar_t)` and `sqrt(1 - alpha_bar_t)`.
    pub fn noising_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let abar = self.alphas_cumprod[t];
        Ok((libm::sqrt(abar), libm::sqrt(1.0 - abar)))
    }

    /// Closed form of `t`-step noising:
    /// `x_t = sqrt(alpha_bar_t) * x + sqrt(1 - alpha_bar_t) * noise`.
    pub fn forward_diffuse(&self, x: &[f32], t: usize, noise: &[f32]) -> Result<Vec<f32>> {
        if x.len() != noise.len() {
            return Err(Error::invalid(
                "noise",
                "noise buffer length differs from image",
            ));
        }
        let (sa, sn) = self.noising_coefficients(t)?;
        let (sa, sn) = (sa as f32, sn as f32);
        Ok(x.iter()
            .zip(noise.iter())
            .map(|(&xv, &nv)| sa * xv + sn * nv)
            .collect())
    }

    /// The evenly strided timestep subsequence used for sampling, descending.
    ///
    /// With `sample_steps == num_steps` this is the full schedule.
    pub fn sampling_timesteps(&self, sample_steps: usize) -> Result<Vec<usize>> {
        if sample_steps == 0 || sample_steps > self.num_steps {
            return Err(Error::invalid(
                "sample_steps",
                "must be in 1..=num_steps",
            ));
        }
        let stride = self.num_steps / sample_steps;
        Ok((0..sample_steps).rev().map(|k| k * stride).collect())
    }

    /// One deterministic (eta = 0) reverse step from timestep `t` to
    /// `t_prev` (`None` denotes the clean-image endpoint, `alpha_bar = 1`).
    ///
    /// `x_t` and the predicted noise combine into the predicted clean image,
    /// which is then re-noised to the target timestep.
    pub fn ddim_step(
        &self,
        x_t: &[f32],
        eps_hat: &[f32],
        t: usize,
        t_prev: Option<usize>,
    ) -> Result<Vec<f32>> {
        if x_t.len() != eps_hat.len() {
            return Err(Error::invalid(
                "eps_hat",
                "prediction length differs from sample",
            ));
        }
        self.check_t(t)?;
        let abar_t = self.alphas_cumprod[t];
        let abar_prev = match t_prev {
            Some(p) => {
                self.check_t(p)?;
                if p >= t {
                    return Err(Error::invalid("t_prev", "must be below t"));
                }
                self.alphas_cumprod[p]
            }
            None => 1.0,
        };
        let sqrt_abar_t = libm::sqrt(abar_t) as f32;
        let sqrt_one_minus_t = libm::sqrt(1.0 - abar_t) as f32;
        let sqrt_abar_prev = libm::sqrt(abar_prev) as f32;
        let sqrt_one_minus_prev = libm::sqrt(1.0 - abar_prev) as f32;
        Ok(x_t
            .iter()
            .zip(eps_hat.iter())
            .map(|(&xv, &ev)| {
                let x0 = (xv - sqrt_one_minus_t * ev) / sqrt_abar_t;
                sqrt_abar_prev * x0 + sqrt_one_minus_prev * ev
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_product_strictly_decreases() {
        let s = DiffusionSchedule::default_linear();
        let abar = s.alphas_cumprod();
        for i in 1..abar.len() {
            assert!(abar[i] < abar[i - 1]);
        }
        assert!(abar[0] < 1.0 && *abar.last().unwrap() > 0.0);
    }

    #[test]
    fn forward_diffuse_zero_noise_scales_exactly() {
        let s = DiffusionSchedule::default_linear();
        let x = [0.25f32, -0.5, 1.0];
        let noise = [0.0f32; 3];
        for t in [0, 17, 999] {
            let (sa, _) = s.noising_coefficients(t).unwrap();
            let out = s.forward_diffuse(&x, t, &noise).unwrap();
            for (o, xv) in out.iter().zip(x.iter()) {
                assert_eq!(*o, sa as f32 * xv);
            }
        }
    }

    #[test]
    fn forward_diffuse_t0_is_nearly_identity() {
        let s = DiffusionSchedule::default_linear();
        let x = [0.3f32, 0.9, -0.7, 0.0];
        let noise = [1.0f32, -1.0, 0.5, 2.0];
        let out = s.forward_diffuse(&x, 0, &noise).unwrap();
        // At t = 0 the kept-signal fraction is sqrt(1 - 1e-4).
        for (o, (xv, nv)) in out.iter().zip(x.iter().zip(noise.iter())) {
            assert!((o - xv).abs() <= 0.011 * (1.0 + nv.abs()), "o={o} x={xv}");
        }
    }

    #[test]
    fn timestep_out_of_range_is_rejected() {
        let s = DiffusionSchedule::default_linear();
        assert!(matches!(
            s.forward_diffuse(&[0.0], 1000, &[0.0]),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn sampling_timesteps_stride_evenly() {
        let s = DiffusionSchedule::default_linear();
        let ts = s.sampling_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 980);
        assert_eq!(*ts.last().unwrap(), 0);
        for pair in ts.windows(2) {
            assert_eq!(pair[0] - pair[1], 20);
        }
        assert!(s.sampling_timesteps(1001).is_err());
        assert!(s.sampling_timesteps(0).is_err());
    }

    #[test]
    fn one_step_ddim_matches_analytic_limit() {
        // A single-step schedule: x0 = (x_T - sqrt(1-abar) e) / sqrt(abar).
        let s = DiffusionSchedule::linear(1, 0.36, 0.37).unwrap();
        let abar = s.alphas_cumprod()[0];
        let x_t = [0.8f32, -0.3];
        let eps = [0.5f32, 0.25];
        let out = s.ddim_step(&x_t, &eps, 0, None).unwrap();
        for i in 0..2 {
            let expect = (x_t[i] - libm::sqrt(1.0 - abar) as f32 * eps[i])
                / libm::sqrt(abar) as f32;
            assert!((out[i] - expect).abs() < 1e-7);
        }
    }
}
