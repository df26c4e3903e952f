use super::{Aux, HbpOutput, LayerCache, Module};
use crate::curvature::CurvatureKind;
use crate::error::Result;
use crate::tensor::Tensor;

/// Reinterprets the extents; `vec` is unchanged, so HBP is the identity.
#[derive(Clone, Debug)]
pub struct Reshape {
    pub extents: Vec<usize>,
}

impl Module for Reshape {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Aux)> {
        Ok((x.reshape(&self.extents)?, Aux::None))
    }

    fn jvp_input(&self, _cache: &LayerCache, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }

    fn vjp_input(&self, _cache: &LayerCache, u: &[f64]) -> Vec<f64> {
        u.to_vec()
    }

    fn jacobian_input(&self, cache: &LayerCache) -> Tensor {
        Tensor::identity(cache.input.len())
    }

    fn hbp_explicit(
        &self,
        _cache: &LayerCache,
        h_out: &Tensor,
        _grad_out: &Tensor,
        _kind: CurvatureKind,
        need_input: bool,
    ) -> Result<HbpOutput> {
        Ok(HbpOutput { input: need_input.then(|| h_out.clone()), params: Vec::new() })
    }
}
