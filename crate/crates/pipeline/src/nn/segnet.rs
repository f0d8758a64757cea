//! Four-level U-Net backbone with a four-channel evidence head.
//!
//! The head is zero-initialized: a fresh segmenter predicts an empty mask
//! with moderate uncertainty everywhere, which downstream selection treats
//! as maximally unreliable.

use candle_core::Tensor;

use super::layers::{softplus, Conv2d, GroupNorm, ParamStore, ResBlock};
use crate::Result;

/// Floor added to `beta` so the evidence head cannot emit zero scale.
pub const BETA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
}

impl SegNetConfig {
    fn widths(&self) -> [usize; 4] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }
}

pub struct SegNet {
    in_conv: Conv2d,
    enc: [ResBlock; 4],
    down: [Conv2d; 3],
    mid: ResBlock,
    up: [Conv2d; 3],
    dec: [ResBlock; 3],
    head_norm: GroupNorm,
    head: Conv2d,
}

impl SegNet {
    pub fn new(ps: &ParamStore, cfg: SegNetConfig) -> Result<Self> {
        let [w0, w1, w2, w3] = cfg.widths();
        Ok(SegNet {
            in_conv: Conv2d::new(ps, "seg.in_conv", cfg.in_channels, w0, 3, 1, 1, false)?,
            enc: [
                ResBlock::new(ps, "seg.enc0", w0, w0, None)?,
                ResBlock::new(ps, "seg.enc1", w1, w1, None)?,
                ResBlock::new(ps, "seg.enc2", w2, w2, None)?,
                ResBlock::new(ps, "seg.enc3", w3, w3, None)?,
            ],
            down: [
                Conv2d::new(ps, "seg.down0", w0, w1, 3, 2, 1, false)?,
                Conv2d::new(ps, "seg.down1", w1, w2, 3, 2, 1, false)?,
                Conv2d::new(ps, "seg.down2", w2, w3, 3, 2, 1, false)?,
            ],
            mid: ResBlock::new(ps, "seg.mid", w3, w3, None)?,
            up: [
                Conv2d::new(ps, "seg.up2", w3, w2, 3, 1, 1, false)?,
                Conv2d::new(ps, "seg.up1", w2, w1, 3, 1, 1, false)?,
                Conv2d::new(ps, "seg.up0", w1, w0, 3, 1, 1, false)?,
            ],
            dec: [
                ResBlock::new(ps, "seg.dec2", 2 * w2, w2, None)?,
                ResBlock::new(ps, "seg.dec1", 2 * w1, w1, None)?,
                ResBlock::new(ps, "seg.dec0", 2 * w0, w0, None)?,
            ],
            head_norm: GroupNorm::new(ps, "seg.head_norm", w0, 8.min(w0))?,
            head: Conv2d::new(ps, "seg.head", w0, 4, 3, 1, 1, true)?,
        })
    }

    /// Raw four-channel field, `(B, 4, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h0 = self.enc[0].forward(&self.in_conv.forward(x)?, None)?;
        let h1 = self.enc[1].forward(&self.down[0].forward(&h0)?, None)?;
        let h2 = self.enc[2].forward(&self.down[1].forward(&h1)?, None)?;
        let h3 = self.enc[3].forward(&self.down[2].forward(&h2)?, None)?;
        let m = self.mid.forward(&h3, None)?;
        let (_, _, h2h, h2w) = h2.dims4()?;
        let u2 = self.up[0].forward(&m.upsample_nearest2d(h2h, h2w)?)?;
        let d2 = self.dec[0].forward(&Tensor::cat(&[&u2, &h2], 1)?, None)?;
        let (_, _, h1h, h1w) = h1.dims4()?;
        let u1 = self.up[1].forward(&d2.upsample_nearest2d(h1h, h1w)?)?;
        let d1 = self.dec[1].forward(&Tensor::cat(&[&u1, &h1], 1)?, None)?;
        let (_, _, h0h, h0w) = h0.dims4()?;
        let u0 = self.up[2].forward(&d1.upsample_nearest2d(h0h, h0w)?)?;
        let d0 = self.dec[2].forward(&Tensor::cat(&[&u0, &h0], 1)?, None)?;
        self.head.forward(&self.head_norm.forward(&d0)?.silu()?)
    }
}

/// The four range-enforced parameter maps, each `(B, 1, H, W)`:
/// `gamma` unconstrained, `omega = 1 + softplus`, `alpha = 1 + softplus`,
/// `beta = softplus + floor`.
pub fn nig_heads(raw: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let gamma = raw.narrow(1, 0, 1)?;
    let omega = (softplus(&raw.narrow(1, 1, 1)?)? + 1.0)?;
    let alpha = (softplus(&raw.narrow(1, 2, 1)?)? + 1.0)?;
    let beta = (softplus(&raw.narrow(1, 3, 1)?)? + BETA_FLOOR)?;
    Ok((gamma, omega, alpha, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn shapes_and_range_enforcement() {
        let ps = ParamStore::new(3, DType::F32, Device::Cpu);
        let net = SegNet::new(
            &ps,
            SegNetConfig {
                in_channels: 1,
                base_width: 8,
            },
        )
        .unwrap();
        let x = Tensor::rand(-1.0f32, 1.0, (2, 1, 32, 32), &Device::Cpu).unwrap();
        let raw = net.forward(&x).unwrap();
        assert_eq!(raw.dims(), &[2, 4, 32, 32]);
        let (gamma, omega, alpha, beta) = nig_heads(&raw).unwrap();
        assert_eq!(gamma.dims(), &[2, 1, 32, 32]);
        let omin = omega.min_all().unwrap().to_scalar::<f32>().unwrap();
        let amin = alpha.min_all().unwrap().to_scalar::<f32>().unwrap();
        let bmin = beta.min_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(omin > 1.0 && amin > 1.0 && bmin > 0.0);
    }
}
