use super::{Aux, HbpOutput, LayerCache, Module};
use crate::curvature::{CurvatureKind, CurvatureMatrix};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `z = x + b`.
///
/// With `positions = Some(P)` the bias has one entry per channel of a
/// `[C, P]` feature map and is replicated across positions; its Jacobian is
/// the replication matrix `1_P ⊗ I_C`.
#[derive(Clone, Debug)]
pub struct BiasAdd {
    pub bias: Tensor,
    pub positions: Option<usize>,
}

impl BiasAdd {
    pub fn new(bias: Tensor) -> Self {
        BiasAdd { bias, positions: None }
    }

    pub fn per_channel(bias: Tensor, positions: usize) -> Self {
        BiasAdd { bias, positions: Some(positions) }
    }

    fn output_len(&self) -> usize {
        self.bias.len() * self.positions.unwrap_or(1)
    }
}

impl Module for BiasAdd {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Aux)> {
        if x.len() != self.output_len() {
            return Err(Error::ShapeMismatch {
                context: "bias input",
                expected: vec![self.bias.len(), self.positions.unwrap_or(1)],
                found: x.extents().to_vec(),
            });
        }
        let c = self.bias.len();
        let b = self.bias.data();
        let data = x.data().iter().enumerate().map(|(k, v)| v + b[k % c]).collect();
        Ok((Tensor::from_parts(x.extents().to_vec(), data), Aux::None))
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.bias]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["bias".into()]
    }

    fn jvp_input(&self, _cache: &LayerCache, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    fn vjp_input(&self, _cache: &LayerCache, u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }

    fn jvp_param(&self, _cache: &LayerCache, _slot: usize, v: &[f64]) -> Vec<f64> {
        let p = self.positions.unwrap_or(1);
        let mut out = Vec::with_capacity(v.len() * p);
        for _ in 0..p {
            out.extend_from_slice(v);
        }
        out
    }

    fn vjp_param(&self, _cache: &LayerCache, _slot: usize, u: &[f64]) -> Vec<f64> {
        let c = self.bias.len();
        let mut out = vec![0.0; c];
        for (k, v) in u.iter().enumerate() {
            out[k % c] += v;
        }
        out
    }

    fn hbp_explicit(
        &self,
        _cache: &LayerCache,
        h_out: &Tensor,
        _grad_out: &Tensor,
        _kind: CurvatureKind,
        need_input: bool,
    ) -> Result<HbpOutput> {
        // H x = H b = H z; replication sums the position blocks
        let hb = match self.positions {
            None => h_out.clone(),
            Some(_) => {
                let c = self.bias.len();
                let n = h_out.rows();
                let mut out = Tensor::zeros(&[c, c]);
                for j in 0..n {
                    for i in 0..n {
                        let v = out.at(i % c, j % c) + h_out.at(i, j);
                        out.set(i % c, j % c, v);
                    }
                }
                out
            }
        };
        Ok(HbpOutput { input: need_input.then(|| h_out.clone()), params: vec![CurvatureMatrix::Dense(hb)] })
    }
}
