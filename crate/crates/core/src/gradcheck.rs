//! Central finite-difference gradient checking for small f64 models.

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::tensor::{scalar, to_f64_vec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`.
    pub relative_error: f64,
    pub analytic_norm: f64,
    pub parameters: usize,
}

/// Compares backprop gradients of `loss` w.r.t. `vars` against central
/// differences with step `h`. `loss` must be a deterministic function of the
/// variables.
pub fn check_gradients<F>(vars: &[Var], h: f64, mut loss: F) -> Result<GradCheck>
where
    F: FnMut() -> Result<Tensor>,
{
    let grads = loss()?.backward()?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for var in vars {
        let shape = var.as_tensor().shape().clone();
        let dtype = var.as_tensor().dtype();
        let original = to_f64_vec(var.as_tensor())?;
        analytic.extend(match grads.get(var.as_tensor()) {
            Some(g) => to_f64_vec(g)?,
            None => vec![0.0; original.len()],
        });
        for i in 0..original.len() {
            let mut probe = original.clone();
            probe[i] = original[i] + h;
            var.set(&Tensor::from_vec(probe.clone(), shape.clone(), var.device())?.to_dtype(dtype)?)?;
            let plus = scalar(&loss()?)?;
            probe[i] = original[i] - h;
            var.set(&Tensor::from_vec(probe, shape.clone(), var.device())?.to_dtype(dtype)?)?;
            let minus = scalar(&loss()?)?;
            numeric.push((plus - minus) / (2.0 * h));
        }
        var.set(&Tensor::from_vec(original, shape, var.device())?.to_dtype(dtype)?)?;
    }
    if analytic.is_empty() {
        return Err(Error::Empty("gradient check parameters"));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    Ok(GradCheck {
        relative_error: if scale == 0.0 { 0.0 } else { norm(&diff) / scale },
        analytic_norm: norm(&analytic),
        parameters: analytic.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn quadratic_is_exact() {
        let v = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap()).unwrap();
        let r = check_gradients(&[v.clone()], 1e-5, || Ok(v.as_tensor().sqr()?.sum_all()?)).unwrap();
        assert!(r.relative_error < 1e-8);
        assert_eq!(r.parameters, 3);
        assert_eq!(v.as_tensor().dtype(), DType::F64);
    }

    #[test]
    fn detects_wrong_gradient() {
        let v = Var::from_tensor(&Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap()).unwrap();
        // detach hides the dependency from backprop
        let r = check_gradients(&[v.clone()], 1e-5, || Ok((v.as_tensor().sqr()?.sum_all()? + v.as_tensor().detach().sum_all()?)?)).unwrap();
        assert!(r.relative_error > 0.1);
    }
}
