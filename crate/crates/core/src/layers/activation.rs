use serde::{Deserialize, Serialize};

use super::{Aux, HbpOutput, LayerCache, Module, SecondTerm};
use crate::curvature::{concavity_transform, CurvatureKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    Relu,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Relu => "relu",
        }
    }

    /// `(φ(x), φ'(x), φ''(x))`. ReLU uses zero derivatives at the kink.
    pub fn eval(self, x: f64) -> (f64, f64, f64) {
        match self {
            ActivationKind::Sigmoid => {
                let s = if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                };
                let d1 = s * (1.0 - s);
                (s, d1, d1 * (1.0 - 2.0 * s))
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                let d1 = 1.0 - t * t;
                (t, d1, -2.0 * t * d1)
            }
            ActivationKind::Relu => {
                if x > 0.0 {
                    (x, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
        }
    }
}

/// Elementwise nonlinearity `z_i = φ(x_i)`.
#[derive(Clone, Debug)]
pub struct Activation {
    pub kind: ActivationKind,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Activation { kind }
    }

    fn derivatives(cache: &LayerCache) -> (&[f64], &[f64]) {
        match &cache.aux {
            Aux::Activation { d1, d2 } => (d1, d2),
            _ => panic!("activation cache without derivatives"),
        }
    }
}

impl Module for Activation {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Aux)> {
        let n = x.len();
        let (mut z, mut d1, mut d2) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for &v in x.data() {
            let (a, b, c) = self.kind.eval(v);
            z.push(a);
            d1.push(b);
            d2.push(c);
        }
        Ok((Tensor::from_parts(x.extents().to_vec(), z), Aux::Activation { d1, d2 }))
    }

    fn jvp_input(&self, cache: &LayerCache, v: &[f64]) -> Vec<f64> {
        let (d1, _) = Self::derivatives(cache);
        d1.iter().zip(v).map(|(a, b)| a * b).collect()
    }

    fn vjp_input(&self, cache: &LayerCache, u: &[f64]) -> Vec<f64> {
        self.jvp_input(cache, u)
    }

    fn jacobian_input(&self, cache: &LayerCache) -> Tensor {
        Tensor::diag(Self::derivatives(cache).0)
    }

    fn second_input(&self, cache: &LayerCache, grad_out: &Tensor, kind: CurvatureKind) -> Result<Option<SecondTerm>> {
        let (_, d2) = Self::derivatives(cache);
        if grad_out.len() != d2.len() {
            return Err(Error::ShapeMismatch {
                context: "activation gradient",
                expected: vec![d2.len()],
                found: grad_out.extents().to_vec(),
            });
        }
        let raw: Vec<f64> = d2.iter().zip(grad_out.data()).map(|(a, b)| a * b).collect();
        Ok(Some(SecondTerm::Diagonal(concavity_transform(&raw, kind))))
    }

    fn hbp_explicit(
        &self,
        cache: &LayerCache,
        h_out: &Tensor,
        grad_out: &Tensor,
        kind: CurvatureKind,
        need_input: bool,
    ) -> Result<HbpOutput> {
        if !need_input {
            return Ok(HbpOutput { input: None, params: Vec::new() });
        }
        // H x = diag[φ'] H z diag[φ'] + diag[φ'' ⊙ dz]
        let (d1, _) = Self::derivatives(cache);
        let n = d1.len();
        let mut hx = Tensor::zeros(&[n, n]);
        for j in 0..n {
            for i in 0..n {
                hx.set(i, j, d1[i] * h_out.at(i, j) * d1[j]);
            }
        }
        if let Some(second) = self.second_input(cache, grad_out, kind)? {
            second.add_to(&mut hx);
        }
        Ok(HbpOutput { input: Some(hx), params: Vec::new() })
    }
}
