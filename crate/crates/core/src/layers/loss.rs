use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `E = (y - x)ᵀ (y - x)`
    Square,
    /// `E = -yᵀ log p(x)` with `p` the softmax of the logits `x`.
    SoftmaxCrossEntropy,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Tensor,
    pub hessian: Tensor,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Loss value, gradient and Hessian w.r.t. the network output `x`.
pub fn loss_forward_grad_hess(kind: LossKind, x: &Tensor, y: &Tensor) -> Result<LossOutput> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch { context: "loss target", expected: x.extents().to_vec(), found: y.extents().to_vec() });
    }
    let n = x.len();
    let out = match kind {
        LossKind::Square => {
            let r: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| a - b).collect();
            LossOutput {
                value: r.iter().map(|v| v * v).sum(),
                grad: Tensor::from_parts(vec![n], r.iter().map(|v| 2.0 * v).collect()),
                hessian: Tensor::identity(n).scale(2.0),
            }
        }
        LossKind::SoftmaxCrossEntropy => {
            let yd = y.data();
            let total: f64 = yd.iter().sum();
            if yd.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument("cross-entropy target must be a probability distribution".into()));
            }
            let xd = x.data();
            let max = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xd.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let p = softmax(xd);
            let value = yd.iter().zip(xd).filter(|(t, _)| **t > 0.0).map(|(t, v)| -t * (v - lse)).sum();
            let grad = p.iter().zip(yd).map(|(a, b)| a - b).collect();
            let mut h = Tensor::zeros(&[n, n]);
            for j in 0..n {
                for i in 0..n {
                    let d = if i == j { p[i] } else { 0.0 };
                    h.set(i, j, d - p[i] * p[j]);
                }
            }
            LossOutput { value, grad: Tensor::from_parts(vec![n], grad), hessian: h }
        }
    };
    if !out.value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(out)
}
