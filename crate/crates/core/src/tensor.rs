//! Small tensor helpers shared across modules.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Standard-normal tensor drawn from an explicit RNG (candle's own CPU RNG is not seedable).
pub fn randn<R: Rng>(rng: &mut R, dims: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

pub fn full_like(t: &Tensor, value: f64) -> Result<Tensor> {
    Ok((t.zeros_like()? + value)?)
}

/// Fails with [`Error::NonFinite`] if any element is NaN or infinite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
        .abs()?
        .flatten_all()?
        .max(0)?
        .to_scalar::<f64>()?)
}

pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
        .abs()?
        .mean_all()?
        .to_scalar::<f64>()?)
}

/// Bit-level equality of two tensors (same dtype and shape).
pub fn bit_equal(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.dims() != b.dims() || a.dtype() != b.dtype() {
        return Ok(false);
    }
    Ok(match a.dtype() {
        DType::F64 => {
            let x = a.flatten_all()?.to_vec1::<f64>()?;
            let y = b.flatten_all()?.to_vec1::<f64>()?;
            x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        _ => {
            let x = to_f32_vec(a)?;
            let y = to_f32_vec(b)?;
            x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
    })
}

/// Cosine similarity along the last axis, `[.., d] x [.., d] -> [..]`.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(candle_core::D::Minus1)?;
    let na = a.sqr()?.sum(candle_core::D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(candle_core::D::Minus1)?.sqrt()?;
    Ok((dot / (na * nb)?)?)
}

/// L2-normalises along the last axis.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(candle_core::D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}
