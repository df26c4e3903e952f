use std::sync::Arc;

use super::{
    sequence_backward, sequence_forward, sequence_hbp_explicit, sequence_hbp_matfree, sequence_jvp_input, sequence_vjp_input,
    Aux, HbpOperators, HbpOutput, Layer, LayerCache, Module, SecondTerm,
};
use crate::curvature::{zero_operator, CurvatureKind, Mvp};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Residual connection `z = x + y(x, θ)` around a branch sub-network.
///
/// The branch is a nested layer sequence; its parameters appear as the
/// parameters of the skip module in branch order. Curvature for them is
/// obtained by recursing into the branch with the skip's output Hessian,
/// and the input term `sum_k [H y_k(x)] dz_k` by recursing with a zero
/// output Hessian.
#[derive(Clone, Debug)]
pub struct Skip {
    pub branch: Vec<Layer>,
}

impl Skip {
    pub fn new(branch: Vec<Layer>) -> Self {
        Skip { branch }
    }

    fn slots(&self) -> Vec<(usize, usize)> {
        self.branch.iter().enumerate().flat_map(|(j, l)| (0..l.num_params()).map(move |s| (j, s))).collect()
    }

    fn caches(cache: &LayerCache) -> &[LayerCache] {
        match &cache.aux {
            Aux::Branch(c) => c,
            _ => panic!("skip cache without branch caches"),
        }
    }

    fn branch_jacobian(&self, cache: &LayerCache) -> Tensor {
        let mut acc = Tensor::identity(cache.input.len());
        if self.branch.is_empty() {
            return Tensor::zeros(&[cache.input.len(), cache.input.len()]);
        }
        for (l, c) in self.branch.iter().zip(Self::caches(cache)) {
            acc = l.jacobian_input(c).matmul(&acc).expect("conformable branch jacobians");
        }
        acc
    }

    fn zero_hessian(cache: &LayerCache) -> Tensor {
        let n = cache.output.len();
        Tensor::zeros(&[n, n])
    }
}

impl Module for Skip {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Aux)> {
        let (y, caches) = sequence_forward(&self.branch, x)?;
        if y.len() != x.len() {
            return Err(Error::ShapeMismatch {
                context: "skip branch output",
                expected: x.extents().to_vec(),
                found: y.extents().to_vec(),
            });
        }
        let z = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
        Ok((Tensor::from_parts(x.extents().to_vec(), z), Aux::Branch(caches)))
    }

    fn params(&self) -> Vec<&Tensor> {
        self.branch.iter().flat_map(Layer::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.branch.iter_mut().flat_map(Layer::params_mut).collect()
    }

    fn param_names(&self) -> Vec<String> {
        self.branch
            .iter()
            .enumerate()
            .flat_map(|(j, l)| l.param_names().into_iter().map(move |n| format!("branch.{j}.{n}")))
            .collect()
    }

    fn jvp_input(&self, cache: &LayerCache, v: &[f64]) -> Vec<f64> {
        let dy = sequence_jvp_input(&self.branch, Self::caches(cache), v);
        v.iter().zip(dy).map(|(a, b)| a + b).collect()
    }

    fn vjp_input(&self, cache: &LayerCache, u: &[f64]) -> Vec<f64> {
        let dy = sequence_vjp_input(&self.branch, Self::caches(cache), u);
        u.iter().zip(dy).map(|(a, b)| a + b).collect()
    }

    fn jvp_param(&self, cache: &LayerCache, slot: usize, v: &[f64]) -> Vec<f64> {
        let (j, s) = self.slots()[slot];
        let caches = Self::caches(cache);
        let w = self.branch[j].jvp_param(&caches[j], s, v);
        sequence_jvp_input(&self.branch[j + 1..], &caches[j + 1..], &w)
    }

    fn vjp_param(&self, cache: &LayerCache, slot: usize, u: &[f64]) -> Vec<f64> {
        let (j, s) = self.slots()[slot];
        let caches = Self::caches(cache);
        let w = sequence_vjp_input(&self.branch[j + 1..], &caches[j + 1..], u);
        self.branch[j].vjp_param(&caches[j], s, &w)
    }

    fn jacobian_input(&self, cache: &LayerCache) -> Tensor {
        let dy = self.branch_jacobian(cache);
        dy.add(&Tensor::identity(dy.rows())).expect("square")
    }

    fn second_input(&self, cache: &LayerCache, _grad_out: &Tensor, kind: CurvatureKind) -> Result<Option<SecondTerm>> {
        let (h, _) = sequence_hbp_explicit(&self.branch, Self::caches(cache), Self::zero_hessian(cache), kind, true)?;
        Ok(h.map(SecondTerm::Dense))
    }

    fn second_params(&self, cache: &LayerCache, kind: CurvatureKind) -> Result<Vec<Option<Tensor>>> {
        let (_, blocks) = sequence_hbp_explicit(&self.branch, Self::caches(cache), Self::zero_hessian(cache), kind, false)?;
        Ok(blocks.into_iter().flatten().map(|b| Some(b.to_dense())).collect())
    }

    fn hbp_explicit(
        &self,
        cache: &LayerCache,
        h_out: &Tensor,
        grad_out: &Tensor,
        kind: CurvatureKind,
        need_input: bool,
    ) -> Result<HbpOutput> {
        let caches = Self::caches(cache);
        let (_, blocks) = sequence_hbp_explicit(&self.branch, caches, h_out.clone(), kind, false)?;
        let input = if need_input {
            // [I + Dy]ᵀ H z [I + Dy] + sum_k [H y_k(x)] dz_k
            let jac = self.jacobian_input(cache);
            let mut hx = h_out.sandwich(&jac)?;
            if let Some(second) = self.second_input(cache, grad_out, kind)? {
                second.add_to(&mut hx);
            }
            Some(hx)
        } else {
            None
        };
        Ok(HbpOutput { input, params: blocks.into_iter().flatten().collect() })
    }

    fn hbp_matfree<'a>(
        &'a self,
        cache: &'a LayerCache,
        h_out: Mvp<'a>,
        _grad_out: &'a Tensor,
        kind: CurvatureKind,
    ) -> Result<HbpOperators<'a>> {
        let caches = Self::caches(cache);
        let (_, param_ops) = sequence_hbp_matfree(&self.branch, caches, h_out.clone(), kind)?;
        let (second, _) = sequence_hbp_matfree(&self.branch, caches, zero_operator(cache.output.len()), kind)?;
        let input: Mvp<'a> = Arc::new(move |v: &[f64]| {
            let w = self.jvp_input(cache, v);
            let u = h_out(&w);
            let mut r = self.vjp_input(cache, &u);
            for (o, s) in r.iter_mut().zip(second(v)) {
                *o += s;
            }
            r
        });
        Ok(HbpOperators { input, params: param_ops.into_iter().flatten().collect() })
    }

    fn record_grad(&self, cache: &mut LayerCache, grad_out: &Tensor) -> Result<()> {
        cache.grad_out = Some(grad_out.clone());
        match &mut cache.aux {
            Aux::Branch(caches) => {
                sequence_backward(&self.branch, caches, grad_out)?;
                Ok(())
            }
            _ => Err(Error::MissingCache("skip branch caches")),
        }
    }
}
