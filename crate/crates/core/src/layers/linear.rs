use super::{Aux, HbpOutput, LayerCache, Module};
use crate::curvature::{CurvatureKind, CurvatureMatrix, Gram, KronFactors};
use crate::error::{Error, Result};
use crate::tensor::{matmul_slices, Tensor};

/// `z = W vec(x)` with `W` of shape `out x in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor) -> Result<Self> {
        weight.expect_rank(2, "linear weight")?;
        Ok(Linear { weight })
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    fn matvec(&self, v: &[f64]) -> Vec<f64> {
        matmul_slices(self.weight.data(), self.out_features(), self.in_features(), v, 1)
    }

    fn t_matvec(&self, u: &[f64]) -> Vec<f64> {
        let (m, n) = (self.out_features(), self.in_features());
        let w = self.weight.data();
        (0..n).map(|j| w[m * j..m * (j + 1)].iter().zip(u).map(|(a, b)| a * b).sum()).collect()
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Aux)> {
        if x.len() != self.in_features() {
            return Err(Error::ShapeMismatch {
                context: "linear input",
                expected: vec![self.in_features()],
                found: x.extents().to_vec(),
            });
        }
        let z = self.matvec(x.data());
        Ok((Tensor::from_parts(vec![self.out_features()], z), Aux::None))
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["weight".into()]
    }

    fn jvp_input(&self, _cache: &LayerCache, v: &[f64]) -> Vec<f64> {
        self.matvec(v)
    }

    fn vjp_input(&self, _cache: &LayerCache, u: &[f64]) -> Vec<f64> {
        self.t_matvec(u)
    }

    fn jvp_param(&self, cache: &LayerCache, _slot: usize, v: &[f64]) -> Vec<f64> {
        // V x
        matmul_slices(v, self.out_features(), self.in_features(), cache.input.data(), 1)
    }

    fn vjp_param(&self, cache: &LayerCache, _slot: usize, u: &[f64]) -> Vec<f64> {
        // vec(u xᵀ)
        let x = cache.input.data();
        let mut out = Vec::with_capacity(u.len() * x.len());
        for &xj in x {
            out.extend(u.iter().map(|&ui| ui * xj));
        }
        out
    }

    fn jacobian_input(&self, _cache: &LayerCache) -> Tensor {
        self.weight.clone()
    }

    fn hbp_explicit(
        &self,
        cache: &LayerCache,
        h_out: &Tensor,
        _grad_out: &Tensor,
        _kind: CurvatureKind,
        need_input: bool,
    ) -> Result<HbpOutput> {
        // H x = Wᵀ (H z) W,  H W = x xᵀ ⊗ H z
        let input = if need_input { Some(h_out.sandwich(&self.weight)?) } else { None };
        let x = cache.input.reshape(&[self.in_features(), 1])?;
        let block = CurvatureMatrix::Kron(KronFactors { gram: Gram::Factor(x), out: h_out.clone() });
        Ok(HbpOutput { input, params: vec![block] })
    }
}
