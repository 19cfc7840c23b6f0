//! Central finite differences against autograd.

use candle_core::{DType, Device, Tensor, Var};

use crate::error::Result;

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x0: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x)?;
        x[i] = x0[i] - h;
        let fm = f(&x)?;
        x[i] = x0[i];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Compares the autograd gradient of `f` at `x0` with central differences.
/// `f` receives an `f64` tensor of shape `shape` and returns a scalar tensor.
pub fn check_gradient(
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    x0: &Tensor,
    h: f64,
) -> Result<GradReport> {
    let shape = x0.dims().to_vec();
    let var = Var::from_tensor(&x0.to_dtype(DType::F64)?)?;
    let loss = f(var.as_tensor())?;
    let grads = loss.backward()?;
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1()?,
        None => vec![0.0; x0.elem_count()],
    };
    let base: Vec<f64> = x0.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mut eval = |v: &[f64]| -> Result<f64> {
        let t = Tensor::from_slice(v, shape.as_slice(), &Device::Cpu)?;
        Ok(f(&t)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let numeric = central_difference(&mut eval, &base, h)?;
    Ok(GradReport { rel_error: relative_error(&analytic, &numeric), analytic, numeric })
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient() {
        let x0 = Tensor::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let r = check_gradient(&|x: &Tensor| Ok(x.powf(3.0)?.sum_all()?), &x0, 1e-5).unwrap();
        assert!(r.rel_error < 1e-8, "{r:?}");
        let want = [0.27, 4.32, 12.0];
        for (a, w) in r.analytic.iter().zip(want) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
