//! Conversions between core grids and candle tensors.

use candle_core::{DType, Device, Tensor};
use sfda_core::Grid2;

use crate::Result;

/// Grid to a `(1, 1, H, W)` tensor.
pub fn grid_to_tensor(grid: &Grid2<f32>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = grid.shape();
    let t = Tensor::from_slice(grid.as_slice(), (1, 1, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Stack grids into a `(B, 1, H, W)` batch.
pub fn grids_to_batch(grids: &[&Grid2<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(grids.len());
    for g in grids {
        parts.push(grid_to_tensor(g, dtype, device)?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// One `(H, W)` slice of a `(B, 1, H, W)` (or `(1, H, W)`) tensor.
pub fn tensor_to_grid(t: &Tensor) -> Result<Grid2<f32>> {
    let t = t.squeeze(0)?;
    let t = if t.dims().len() == 3 { t.squeeze(0)? } else { t };
    let (h, w) = t.dims2()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Grid2::from_vec(h, w, data)?)
}

/// Split a `(B, 1, H, W)` batch back into grids.
pub fn batch_to_grids(t: &Tensor) -> Result<Vec<Grid2<f32>>> {
    let b = t.dims()[0];
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        out.push(tensor_to_grid(&t.narrow(0, i, 1)?)?);
    }
    Ok(out)
}

/// Binary mask grid to a float tensor batch entry.
pub fn mask_to_tensor(mask: &Grid2<u8>, dtype: DType, device: &Device) -> Result<Tensor> {
    let as_f32 = mask.map(|v| (v != 0) as u8 as f32);
    grid_to_tensor(&as_f32, dtype, device)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_roundtrips_through_tensor() {
        let g = Grid2::from_fn(3, 4, |r, c| (r * 4 + c) as f32 * 0.5);
        let t = grid_to_tensor(&g, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 1, 3, 4]);
        let back = tensor_to_grid(&t).unwrap();
        assert_eq!(g, back);
    }
}
