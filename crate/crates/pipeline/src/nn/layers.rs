//! Parameter registry and thin layer wrappers over candle ops.
//!
//! Parameters are initialized from a stream keyed by `(seed, name)` so the
//! weights of a model are a pure function of its seed and architecture,
//! independent of construction or iteration order. Layers hold plain tensor
//! clones of the registered vars; optimizer updates through the vars are
//! visible to the layers because the storage is shared.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use sfda_core::seed;

use crate::{Error, Result};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn(usize),
}

/// Name-keyed parameter registry with deterministic initialization.
pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        ParamStore {
            vars: Mutex::new(BTreeMap::new()),
            seed,
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Register a parameter and return a tensor view of it.
    pub fn take(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().expect("param store poisoned");
        if vars.contains_key(name) {
            return Err(Error::stage(format!("parameter {name} registered twice")));
        }
        let count: usize = shape.iter().product();
        let values: Vec<f32> = match init {
            Init::Zeros => vec![0.0; count],
            Init::FanIn(fan_in) => {
                let bound = (1.0 / fan_in as f32).sqrt();
                let mut rng = seed::rng(seed::mix_str(self.seed, name));
                (0..count)
                    .map(|_| seed::uniform_range(&mut rng, -bound, bound))
                    .collect()
            }
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let view = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(view)
    }

    /// Overwrite an existing parameter in place (shape-checked).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let vars = self.vars.lock().expect("param store poisoned");
        let var = vars
            .get(name)
            .ok_or_else(|| Error::stage(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let vars = self.vars.lock().expect("param store poisoned");
        let var = vars
            .get(name)
            .ok_or_else(|| Error::stage(format!("unknown parameter {name}")))?;
        Ok(var.as_tensor().clone())
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().expect("param store poisoned").keys().cloned().collect()
    }

    /// Vars whose name starts with any of the given prefixes.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .lock().expect("param store poisoned")
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.lock().expect("param store poisoned").values().cloned().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let vars = self.vars.lock().expect("param store poisoned");
        let mut tensors = std::collections::HashMap::new();
        for (k, v) in vars.iter() {
            tensors.insert(k.clone(), v.as_tensor().clone());
        }
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Load weights into already-registered parameters.
    pub fn load(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        let vars = self.vars.lock().expect("param store poisoned");
        for (name, var) in vars.iter() {
            let loaded = tensors.get(name).ok_or_else(|| {
                Error::stage(format!(
                    "checkpoint {} is missing parameter {name}",
                    path.display()
                ))
            })?;
            var.set(&loaded.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * ksize * ksize;
        let weight_init = if zero_init { Init::Zeros } else { Init::FanIn(fan_in) };
        let bias_init = if zero_init { Init::Zeros } else { Init::FanIn(fan_in) };
        Ok(Conv2d {
            weight: ps.take(
                &format!("{name}.weight"),
                &[out_ch, in_ch, ksize, ksize],
                weight_init,
            )?,
            bias: ps.take(&format!("{name}.bias"), &[out_ch], bias_init)?,
            stride,
            padding,
            out_channels: out_ch,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.out_channels, 1, 1))?)?)
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Linear {
            weight: ps.take(&format!("{name}.weight"), &[out_dim, in_dim], Init::FanIn(in_dim))?,
            bias: ps.take(&format!("{name}.bias"), &[out_dim], Init::FanIn(in_dim))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    channels: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let weight = ps.take(&format!("{name}.weight"), &[channels], Init::Zeros)?;
        // Scale parameterized around 1: stored as zero, applied as 1 + w.
        let bias = ps.take(&format!("{name}.bias"), &[channels], Init::Zeros)?;
        Ok(GroupNorm {
            weight,
            bias,
            groups,
            channels,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let grouped = x.reshape((b, self.groups, c / self.groups * h * w))?;
        let mu = grouped.mean_keepdim(2)?;
        let centered = grouped.broadcast_sub(&mu)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        let scale = (&self.weight + 1.0)?.reshape((1, self.channels, 1, 1))?;
        let shift = self.bias.reshape((1, self.channels, 1, 1))?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Residual block: two 3x3 convs with group norms and SiLU, an optional
/// timestep-embedding injection, and a 1x1 shortcut on channel change.
pub struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    temb_proj: Option<Linear>,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<Conv2d>,
}

fn norm_groups(channels: usize) -> usize {
    for g in [8, 4, 2, 1] {
        if channels.is_multiple_of(g) {
            return g;
        }
    }
    1
}

impl ResBlock {
    pub fn new(
        ps: &ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        temb_dim: Option<usize>,
    ) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1, false)?,
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), out_ch, norm_groups(out_ch))?,
            temb_proj: temb_dim
                .map(|d| Linear::new(ps, &format!("{name}.temb_proj"), d, out_ch))
                .transpose()?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), out_ch, norm_groups(out_ch))?,
            shortcut: if in_ch != out_ch {
                Some(Conv2d::new(ps, &format!("{name}.shortcut"), in_ch, out_ch, 1, 1, 0, false)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.norm1.forward(&self.conv1.forward(x)?)?.silu()?;
        if let (Some(proj), Some(temb)) = (&self.temb_proj, temb) {
            let (b, _) = temb.dims2()?;
            let add = proj.forward(&temb.silu()?)?;
            let c = add.dims()[1];
            h = h.broadcast_add(&add.reshape((b, c, 1, 1))?)?;
        }
        h = self.norm2.forward(&self.conv2.forward(&h)?)?.silu()?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Sinusoidal timestep embedding, `(B, dim)`.
pub fn timestep_embedding(
    ts: &[usize],
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            values.push((t * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            values.push((t * freq).cos() as f32);
        }
    }
    let t = Tensor::from_vec(values, (ts.len(), dim), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Numerically safe softplus built from differentiable primitives.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let relu = x.relu()?;
    let soft = ((x.abs()?.neg()?).exp()? + 1.0)?.log()?;
    Ok((relu + soft)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed_and_order_free() {
        let dev = Device::Cpu;
        let a = ParamStore::new(9, DType::F32, dev.clone());
        let w1 = a.take("x.weight", &[4, 4], Init::FanIn(4)).unwrap();
        let _ = a.take("y.weight", &[4, 4], Init::FanIn(4)).unwrap();

        let b = ParamStore::new(9, DType::F32, dev);
        let _ = b.take("y.weight", &[4, 4], Init::FanIn(4)).unwrap();
        let w2 = b.take("x.weight", &[4, 4], Init::FanIn(4)).unwrap();

        let v1 = w1.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let v2 = w2.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn duplicate_registration_fails() {
        let ps = ParamStore::new(0, DType::F32, Device::Cpu);
        ps.take("w", &[2], Init::Zeros).unwrap();
        assert!(ps.take("w", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn softplus_matches_reference() {
        let dev = Device::Cpu;
        let x = Tensor::from_vec(vec![-20.0f32, -1.0, 0.0, 1.0, 20.0], (5,), &dev).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f32>().unwrap();
        for (xi, yi) in [-20.0f32, -1.0, 0.0, 1.0, 20.0].iter().zip(y.iter()) {
            let expect = (1.0 + (*xi as f64).exp()).ln() as f32;
            assert!((yi - expect).abs() < 1e-5, "x={xi} y={yi} expect={expect}");
        }
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let ps = ParamStore::new(1, DType::F32, Device::Cpu);
        let gn = GroupNorm::new(&ps, "gn", 4, 2).unwrap();
        let x = Tensor::from_vec(
            (0..4 * 9).map(|i| i as f32).collect::<Vec<_>>(),
            (1, 4, 3, 3),
            &Device::Cpu,
        )
        .unwrap();
        let y = gn.forward(&x).unwrap();
        let flat = y.reshape((2, 18)).unwrap().to_vec2::<f32>().unwrap();
        for group in flat {
            let mean: f32 = group.iter().sum::<f32>() / 18.0;
            let var: f32 = group.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 18.0;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-2);
        }
    }
}
