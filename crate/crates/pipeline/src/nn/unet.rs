//! Noise-prediction U-Net with an optional zero-gated edge-conditioning
//! branch.
//!
//! The base network is a three-level U-Net with sinusoidal timestep
//! embeddings. The conditioning branch is a trainable copy of the encoder
//! (plus middle block) that sees the noisy image concatenated with the edge
//! map; its features enter the base network through 1x1 projections whose
//! weights start at exactly zero, so a freshly attached branch leaves the
//! base output bit-for-bit unchanged.

use candle_core::Tensor;

use super::layers::{timestep_embedding, Conv2d, GroupNorm, Linear, ParamStore, ResBlock};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
}

impl UNetConfig {
    fn widths(&self) -> [usize; 3] {
        let w = self.base_width;
        [w, 2 * w, 4 * w]
    }

    fn temb_dim(&self) -> usize {
        4 * self.base_width
    }
}

/// Encoder + middle block; instantiated once for the base network and once
/// (with an extra input channel) for the conditioning branch.
struct Encoder {
    in_conv: Conv2d,
    enc: [ResBlock; 3],
    down: [Conv2d; 2],
    mid: ResBlock,
}

impl Encoder {
    fn new(ps: &ParamStore, prefix: &str, in_ch: usize, cfg: &UNetConfig) -> Result<Self> {
        let [w0, w1, w2] = cfg.widths();
        let t = Some(cfg.temb_dim());
        Ok(Encoder {
            in_conv: Conv2d::new(ps, &format!("{prefix}.in_conv"), in_ch, w0, 3, 1, 1, false)?,
            enc: [
                ResBlock::new(ps, &format!("{prefix}.enc0"), w0, w0, t)?,
                ResBlock::new(ps, &format!("{prefix}.enc1"), w1, w1, t)?,
                ResBlock::new(ps, &format!("{prefix}.enc2"), w2, w2, t)?,
            ],
            down: [
                Conv2d::new(ps, &format!("{prefix}.down0"), w0, w1, 3, 2, 1, false)?,
                Conv2d::new(ps, &format!("{prefix}.down1"), w1, w2, 3, 2, 1, false)?,
            ],
            mid: ResBlock::new(ps, &format!("{prefix}.mid"), w2, w2, t)?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<[Tensor; 4]> {
        let h0 = self.enc[0].forward(&self.in_conv.forward(x)?, Some(temb))?;
        let h1 = self.enc[1].forward(&self.down[0].forward(&h0)?, Some(temb))?;
        let h2 = self.enc[2].forward(&self.down[1].forward(&h1)?, Some(temb))?;
        let m = self.mid.forward(&h2, Some(temb))?;
        Ok([h0, h1, h2, m])
    }
}

struct ControlBranch {
    encoder: Encoder,
    zero_proj: [Conv2d; 4],
}

pub struct CondUNet {
    cfg: UNetConfig,
    temb1: Linear,
    temb2: Linear,
    base: Encoder,
    dec2: ResBlock,
    up1: Conv2d,
    dec1: ResBlock,
    up0: Conv2d,
    dec0: ResBlock,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    control: Option<ControlBranch>,
}

impl CondUNet {
    pub fn new(ps: &ParamStore, cfg: UNetConfig, with_control: bool) -> Result<Self> {
        let [w0, w1, w2] = cfg.widths();
        let t = Some(cfg.temb_dim());
        let control = if with_control {
            Some(ControlBranch {
                encoder: Encoder::new(ps, "ctrl", cfg.in_channels + 1, &cfg)?,
                zero_proj: [
                    Conv2d::new(ps, "ctrl.zproj0", w0, w0, 1, 1, 0, true)?,
                    Conv2d::new(ps, "ctrl.zproj1", w1, w1, 1, 1, 0, true)?,
                    Conv2d::new(ps, "ctrl.zproj2", w2, w2, 1, 1, 0, true)?,
                    Conv2d::new(ps, "ctrl.zproj_mid", w2, w2, 1, 1, 0, true)?,
                ],
            })
        } else {
            None
        };
        Ok(CondUNet {
            temb1: Linear::new(ps, "temb.fc1", cfg.temb_dim(), cfg.temb_dim())?,
            temb2: Linear::new(ps, "temb.fc2", cfg.temb_dim(), cfg.temb_dim())?,
            base: Encoder::new(ps, "base", cfg.in_channels, &cfg)?,
            dec2: ResBlock::new(ps, "base.dec2", 2 * w2, w2, t)?,
            up1: Conv2d::new(ps, "base.up1", w2, w1, 3, 1, 1, false)?,
            dec1: ResBlock::new(ps, "base.dec1", 2 * w1, w1, t)?,
            up0: Conv2d::new(ps, "base.up0", w1, w0, 3, 1, 1, false)?,
            dec0: ResBlock::new(ps, "base.dec0", 2 * w0, w0, t)?,
            out_norm: GroupNorm::new(ps, "base.out_norm", w0, 8.min(w0))?,
            out_conv: Conv2d::new(ps, "base.out_conv", w0, cfg.in_channels, 3, 1, 1, true)?,
            control,
            cfg,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn has_control(&self) -> bool {
        self.control.is_some()
    }

    /// Predict the noise in `x` at timesteps `ts`, optionally conditioned on
    /// an edge map batch (`(B, 1, H, W)`, same spatial size as `x`).
    pub fn forward(&self, x: &Tensor, ts: &[usize], edge: Option<&Tensor>) -> Result<Tensor> {
        let temb = timestep_embedding(ts, self.cfg.temb_dim(), x.dtype(), x.device())?;
        let temb = self.temb2.forward(&self.temb1.forward(&temb)?.silu()?)?;

        let [mut h0, mut h1, mut h2, mut m] = self.base.forward(x, &temb)?;
        if let Some(edge) = edge {
            let Some(control) = &self.control else {
                return Err(Error::stage(
                    "edge conditioning requested but the model has no control branch",
                ));
            };
            let c_in = Tensor::cat(&[x, edge], 1)?;
            let [c0, c1, c2, cm] = control.encoder.forward(&c_in, &temb)?;
            h0 = (h0 + control.zero_proj[0].forward(&c0)?)?;
            h1 = (h1 + control.zero_proj[1].forward(&c1)?)?;
            h2 = (h2 + control.zero_proj[2].forward(&c2)?)?;
            m = (m + control.zero_proj[3].forward(&cm)?)?;
        }

        let d2 = self.dec2.forward(&Tensor::cat(&[&m, &h2], 1)?, Some(&temb))?;
        let (_, _, h1h, h1w) = h1.dims4()?;
        let u1 = self.up1.forward(&d2.upsample_nearest2d(h1h, h1w)?)?;
        let d1 = self.dec1.forward(&Tensor::cat(&[&u1, &h1], 1)?, Some(&temb))?;
        let (_, _, h0h, h0w) = h0.dims4()?;
        let u0 = self.up0.forward(&d1.upsample_nearest2d(h0h, h0w)?)?;
        let d0 = self.dec0.forward(&Tensor::cat(&[&u0, &h0], 1)?, Some(&temb))?;
        self.out_conv.forward(&self.out_norm.forward(&d0)?.silu()?)
    }
}

/// Copy the locked base encoder weights into the control branch.
///
/// The control input convolution has one extra channel for the edge map;
/// its weights for that channel start at zero so the copied branch behaves
/// exactly like the base encoder on attach.
pub fn init_control_from_base(ps: &ParamStore) -> Result<()> {
    let names = ps.names();
    for name in names.iter().filter(|n| n.starts_with("ctrl.")) {
        if name.starts_with("ctrl.zproj") {
            continue;
        }
        let base_name = name.replacen("ctrl.", "base.", 1);
        if !names.contains(&base_name) {
            continue;
        }
        let base = ps.tensor(&base_name)?;
        let ctrl = ps.tensor(name)?;
        if base.dims() == ctrl.dims() {
            ps.set(name, &base)?;
        } else if name == "ctrl.in_conv.weight" {
            let (o, i, kh, kw) = ctrl.dims4()?;
            let (_, bi, _, _) = base.dims4()?;
            let pad = Tensor::zeros((o, i - bi, kh, kw), base.dtype(), base.device())?;
            ps.set(name, &Tensor::cat(&[&base, &pad], 1)?)?;
        } else {
            return Err(Error::stage(format!(
                "cannot copy {base_name} into {name}: shape mismatch"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn tiny() -> (ParamStore, UNetConfig) {
        let ps = ParamStore::new(11, DType::F32, Device::Cpu);
        let cfg = UNetConfig {
            in_channels: 1,
            base_width: 8,
        };
        (ps, cfg)
    }

    #[test]
    fn zero_gate_identity_at_attach() {
        let (ps, cfg) = tiny();
        let net = CondUNet::new(&ps, cfg, true).unwrap();
        init_control_from_base(&ps).unwrap();
        let x = Tensor::from_vec(
            (0..16 * 16).map(|i| ((i % 7) as f32 - 3.0) / 3.0).collect::<Vec<_>>(),
            (1, 1, 16, 16),
            &Device::Cpu,
        )
        .unwrap();
        let edge = Tensor::from_vec(
            (0..16 * 16).map(|i| ((i % 5) == 0) as u8 as f32).collect::<Vec<_>>(),
            (1, 1, 16, 16),
            &Device::Cpu,
        )
        .unwrap();
        let unconditional = net.forward(&x, &[13], None).unwrap();
        let conditioned = net.forward(&x, &[13], Some(&edge)).unwrap();
        let a = unconditional.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = conditioned.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b, "zero-gated conditioning must be exact identity");
    }

    #[test]
    fn output_shape_matches_input() {
        let (ps, cfg) = tiny();
        let net = CondUNet::new(&ps, cfg, false).unwrap();
        let x = Tensor::zeros((2, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let y = net.forward(&x, &[0, 999], None).unwrap();
        assert_eq!(y.dims(), &[2, 1, 32, 32]);
    }

    #[test]
    fn zero_init_out_conv_gives_zero_prediction() {
        let (ps, cfg) = tiny();
        let net = CondUNet::new(&ps, cfg, false).unwrap();
        let x = Tensor::ones((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let y = net.forward(&x, &[5], None).unwrap();
        let max = y.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(max, 0.0);
    }
}
