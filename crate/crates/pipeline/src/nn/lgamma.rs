//! Elementwise log-gamma as a candle custom op with a digamma backward.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use sfda_core::evidential::digamma;

use crate::Result;

fn map_storage(
    storage: &CpuStorage,
    layout: &Layout,
    name: &'static str,
    f32_op: fn(f32) -> f32,
    f64_op: fn(f64) -> f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::RequiresContiguous { op: name })?;
    let out = match storage {
        CpuStorage::F32(vs) => CpuStorage::F32(vs[start..end].iter().map(|&v| f32_op(v)).collect()),
        CpuStorage::F64(vs) => CpuStorage::F64(vs[start..end].iter().map(|&v| f64_op(v)).collect()),
        _ => {
            return Err(candle_core::Error::UnsupportedDTypeForOp(
                storage.dtype(),
                name,
            ))
        }
    };
    Ok((out, layout.shape().clone()))
}

struct DigammaOp;

impl CustomOp1 for DigammaOp {
    fn name(&self) -> &'static str {
        "digamma"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_storage(
            storage,
            layout,
            "digamma",
            |v| digamma(v as f64) as f32,
            digamma,
        )
    }
}

struct LgammaOp;

impl CustomOp1 for LgammaOp {
    fn name(&self) -> &'static str {
        "lgamma"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_storage(
            storage,
            layout,
            "lgamma",
            |v| libm::lgamma(v as f64) as f32,
            libm::lgamma,
        )
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let dg = arg.contiguous()?.apply_op1_no_bwd(&DigammaOp)?;
        Ok(Some(grad_res.mul(&dg)?))
    }
}

/// `ln Gamma(x)`, elementwise, differentiable.
pub fn lgamma(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LgammaOp)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    #[test]
    fn forward_matches_reference() {
        let dev = Device::Cpu;
        let x = Tensor::from_vec(vec![0.5f64, 1.0, 2.0, 2.5, 7.25], (5,), &dev).unwrap();
        let y = lgamma(&x).unwrap().to_vec1::<f64>().unwrap();
        for (xi, yi) in [0.5f64, 1.0, 2.0, 2.5, 7.25].iter().zip(y.iter()) {
            assert!((yi - libm::lgamma(*xi)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_digamma() {
        let dev = Device::Cpu;
        let v = Var::from_tensor(
            &Tensor::from_vec(vec![1.3f64, 2.7], (2,), &dev)
                .unwrap()
                .to_dtype(DType::F64)
                .unwrap(),
        )
        .unwrap();
        let loss = lgamma(v.as_tensor()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&v).unwrap().to_vec1::<f64>().unwrap();
        assert!((g[0] - digamma(1.3)).abs() < 1e-12);
        assert!((g[1] - digamma(2.7)).abs() < 1e-12);
    }
}
