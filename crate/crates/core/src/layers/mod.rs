//! The layer library.
//!
//! Every module implements three local operations: `forward`, the
//! vector-Jacobian product used by gradient backpropagation, and Hessian
//! backpropagation. HBP comes in two forms that must agree: a closed-form
//! explicit rule producing matrices, and a matrix-free rule that composes
//! the incoming curvature operator with Jacobian products,
//!
//! ```text
//! H x = [D z(x)]ᵀ H z [D z(x)] + sum_k [H z_k(x)] dz_k
//! ```
//!
//! with the same expression for the parameters in place of `x`.

mod activation;
mod bias;
mod conv;
mod index_select;
mod linear;
mod loss;
mod reshape;
mod skip;

use std::sync::Arc;

pub use activation::{Activation, ActivationKind};
pub use bias::BiasAdd;
pub use conv::Conv2d;
pub use index_select::{IndexSelect, Selection};
pub use linear::Linear;
pub use loss::{loss_forward_grad_hess, LossKind, LossOutput};
pub use reshape::Reshape;
pub use skip::Skip;

use crate::curvature::{CurvatureKind, CurvatureMatrix, Mvp};
use crate::error::{Error, Result};
use crate::tensor::{symmetry_defect, Tensor};

/// Forward-pass record of one layer, plus the gradient it received.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub input: Tensor,
    pub output: Tensor,
    pub aux: Aux,
    /// Gradient of the loss w.r.t. `output`; set by [`Layer::backward`].
    pub grad_out: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub enum Aux {
    None,
    /// First and second derivative of the activation at the input.
    Activation {
        d1: Vec<f64>,
        d2: Vec<f64>,
    },
    /// Unfolded input patches.
    Unfolded(Tensor),
    /// Output entry `j` copies input entry `map[j]`.
    Selection(Vec<usize>),
    /// Caches of the residual branch.
    Branch(Vec<LayerCache>),
}

impl LayerCache {
    pub fn grad_out(&self) -> Result<&Tensor> {
        self.grad_out.as_ref().ok_or(Error::MissingCache("gradient pass has not run"))
    }
}

/// Module-level second-order term `sum_k [H z_k(x)] dz_k` after the
/// curvature transform.
#[derive(Clone, Debug)]
pub enum SecondTerm {
    Diagonal(Vec<f64>),
    Dense(Tensor),
}

impl SecondTerm {
    pub fn to_dense(&self) -> Tensor {
        match self {
            SecondTerm::Diagonal(d) => Tensor::diag(d),
            SecondTerm::Dense(m) => m.clone(),
        }
    }

    fn add_apply(&self, v: &[f64], out: &mut [f64]) {
        match self {
            SecondTerm::Diagonal(d) => {
                for ((o, di), vi) in out.iter_mut().zip(d).zip(v) {
                    *o += di * vi;
                }
            }
            SecondTerm::Dense(m) => {
                let n = m.rows();
                let mv = crate::tensor::matmul_slices(m.data(), n, n, v, 1);
                for (o, x) in out.iter_mut().zip(mv) {
                    *o += x;
                }
            }
        }
    }

    fn add_to(&self, m: &mut Tensor) {
        match self {
            SecondTerm::Diagonal(d) => {
                for (i, di) in d.iter().enumerate() {
                    let v = m.at(i, i) + di;
                    m.set(i, i, v);
                }
            }
            SecondTerm::Dense(s) => m.add_assign_scaled(s, 1.0),
        }
    }
}

/// Result of explicit HBP through one layer.
#[derive(Clone, Debug)]
pub struct HbpOutput {
    /// Hessian w.r.t. the layer input, when it was requested.
    pub input: Option<Tensor>,
    pub params: Vec<CurvatureMatrix>,
}

/// Result of matrix-free HBP through one layer.
pub struct HbpOperators<'a> {
    pub input: Mvp<'a>,
    pub params: Vec<Mvp<'a>>,
}

pub(crate) fn assemble(dim: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let mut e = vec![0.0; dim];
    let mut data = Vec::new();
    let mut rows = 0;
    for i in 0..dim {
        e[i] = 1.0;
        let col = f(&e);
        e[i] = 0.0;
        rows = col.len();
        data.extend(col);
    }
    Tensor::from_parts(vec![rows, dim], data)
}

/// Local behaviour of a module. Implementors provide Jacobian products and
/// the closed-form explicit HBP rule; the matrix-free rule is derived.
pub(crate) trait Module: Send + Sync {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Aux)>;

    fn params(&self) -> Vec<&Tensor> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        Vec::new()
    }

    fn param_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn jvp_input(&self, cache: &LayerCache, v: &[f64]) -> Vec<f64>;

    fn vjp_input(&self, cache: &LayerCache, u: &[f64]) -> Vec<f64>;

    fn jvp_param(&self, _cache: &LayerCache, _slot: usize, _v: &[f64]) -> Vec<f64> {
        unreachable!("module has no parameters")
    }

    fn vjp_param(&self, _cache: &LayerCache, _slot: usize, _u: &[f64]) -> Vec<f64> {
        unreachable!("module has no parameters")
    }

    fn jacobian_input(&self, cache: &LayerCache) -> Tensor {
        assemble(cache.input.len(), |v| self.jvp_input(cache, v))
    }

    fn jacobian_param(&self, cache: &LayerCache, slot: usize) -> Tensor {
        let dim = self.params()[slot].len();
        assemble(dim, |v| self.jvp_param(cache, slot, v))
    }

    /// Second-order term w.r.t. the input. `None` for modules linear in `x`.
    fn second_input(&self, _cache: &LayerCache, _grad_out: &Tensor, _kind: CurvatureKind) -> Result<Option<SecondTerm>> {
        Ok(None)
    }

    /// Second-order terms w.r.t. each parameter.
    fn second_params(&self, _cache: &LayerCache, _kind: CurvatureKind) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![None; self.params().len()])
    }

    fn hbp_explicit(
        &self,
        cache: &LayerCache,
        h_out: &Tensor,
        grad_out: &Tensor,
        kind: CurvatureKind,
        need_input: bool,
    ) -> Result<HbpOutput>;

    fn hbp_matfree<'a>(
        &'a self,
        cache: &'a LayerCache,
        h_out: Mvp<'a>,
        grad_out: &'a Tensor,
        kind: CurvatureKind,
    ) -> Result<HbpOperators<'a>>
    where
        Self: Sized,
    {
        let second = self.second_input(cache, grad_out, kind)?;
        let h = h_out.clone();
        let input: Mvp<'a> = Arc::new(move |v: &[f64]| {
            let mut r = self.vjp_input(cache, &h(&self.jvp_input(cache, v)));
            if let Some(s) = &second {
                s.add_apply(v, &mut r);
            }
            r
        });
        let params = (0..self.params().len())
            .map(|slot| {
                let h = h_out.clone();
                Arc::new(move |v: &[f64]| self.vjp_param(cache, slot, &h(&self.jvp_param(cache, slot, v)))) as Mvp<'a>
            })
            .collect();
        Ok(HbpOperators { input, params })
    }

    /// Records `grad_out` in the cache (recursively for composite modules).
    fn record_grad(&self, cache: &mut LayerCache, grad_out: &Tensor) -> Result<()> {
        cache.grad_out = Some(grad_out.clone());
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Linear(Linear),
    Bias(BiasAdd),
    Activation(Activation),
    Conv2d(Conv2d),
    IndexSelect(IndexSelect),
    Reshape(Reshape),
    Skip(Skip),
}

macro_rules! dispatch {
    ($layer:expr, $m:ident => $body:expr) => {
        match $layer {
            Layer::Linear($m) => $body,
            Layer::Bias($m) => $body,
            Layer::Activation($m) => $body,
            Layer::Conv2d($m) => $body,
            Layer::IndexSelect($m) => $body,
            Layer::Reshape($m) => $body,
            Layer::Skip($m) => $body,
        }
    };
}

fn check_h_out(h_out: &Tensor, dim: usize) -> Result<()> {
    let n = h_out.expect_square("hbp")?;
    if n != dim {
        return Err(Error::ShapeMismatch {
            context: "hbp output Hessian",
            expected: vec![dim, dim],
            found: h_out.extents().to_vec(),
        });
    }
    let defect = symmetry_defect(h_out)?;
    if defect > 1e-10 * h_out.max_abs().max(1.0) {
        return Err(Error::Asymmetric { context: "hbp output Hessian", defect });
    }
    Ok(())
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Bias(_) => "bias",
            Layer::Activation(a) => a.kind.name(),
            Layer::Conv2d(_) => "conv2d",
            Layer::IndexSelect(s) => match s.selection {
                Selection::Fixed { .. } => "index_select",
                Selection::MaxPool { .. } => "max_pool",
            },
            Layer::Reshape(_) => "reshape",
            Layer::Skip(_) => "skip",
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerCache)> {
        let (output, aux) = dispatch!(self, m => m.forward(x))?;
        let output = output.check_finite(self.name())?;
        Ok((output.clone(), LayerCache { input: x.clone(), output, aux, grad_out: None }))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        dispatch!(self, m => m.params())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        dispatch!(self, m => m.params_mut())
    }

    pub fn param_names(&self) -> Vec<String> {
        dispatch!(self, m => m.param_names())
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Gradient backpropagation: `(grad_in, grad_params)`.
    pub fn vjp(&self, cache: &LayerCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        if grad_out.len() != cache.output.len() {
            return Err(Error::ShapeMismatch {
                context: "vjp",
                expected: cache.output.extents().to_vec(),
                found: grad_out.extents().to_vec(),
            });
        }
        let g = grad_out.data();
        let grad_in = Tensor::from_parts(cache.input.extents().to_vec(), self.vjp_input(cache, g));
        let grad_params = self
            .params()
            .iter()
            .enumerate()
            .map(|(slot, p)| Tensor::from_parts(p.extents().to_vec(), self.vjp_param(cache, slot, g)))
            .collect();
        Ok((grad_in, grad_params))
    }

    /// `vjp` that also stores `grad_out` for the later curvature pass.
    pub fn backward(&self, cache: &mut LayerCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let out = self.vjp(cache, grad_out)?;
        dispatch!(self, m => m.record_grad(cache, grad_out))?;
        Ok(out)
    }

    pub fn jvp_input(&self, cache: &LayerCache, v: &[f64]) -> Vec<f64> {
        dispatch!(self, m => m.jvp_input(cache, v))
    }

    pub fn vjp_input(&self, cache: &LayerCache, u: &[f64]) -> Vec<f64> {
        dispatch!(self, m => m.vjp_input(cache, u))
    }

    pub fn jvp_param(&self, cache: &LayerCache, slot: usize, v: &[f64]) -> Vec<f64> {
        dispatch!(self, m => m.jvp_param(cache, slot, v))
    }

    pub fn vjp_param(&self, cache: &LayerCache, slot: usize, u: &[f64]) -> Vec<f64> {
        dispatch!(self, m => m.vjp_param(cache, slot, u))
    }

    pub fn jacobian_input(&self, cache: &LayerCache) -> Tensor {
        dispatch!(self, m => m.jacobian_input(cache))
    }

    pub fn jacobian_param(&self, cache: &LayerCache, slot: usize) -> Tensor {
        dispatch!(self, m => m.jacobian_param(cache, slot))
    }

    pub fn second_input(&self, cache: &LayerCache, grad_out: &Tensor, kind: CurvatureKind) -> Result<Option<SecondTerm>> {
        dispatch!(self, m => m.second_input(cache, grad_out, kind))
    }

    pub fn second_params(&self, cache: &LayerCache, kind: CurvatureKind) -> Result<Vec<Option<Tensor>>> {
        dispatch!(self, m => m.second_params(cache, kind))
    }

    /// Explicit HBP: propagates the output Hessian `h_out` to the input
    /// (if `need_input`) and to every parameter.
    pub fn hbp_explicit(
        &self,
        cache: &LayerCache,
        h_out: &Tensor,
        grad_out: &Tensor,
        kind: CurvatureKind,
        need_input: bool,
    ) -> Result<HbpOutput> {
        check_h_out(h_out, cache.output.len())?;
        if grad_out.len() != cache.output.len() {
            return Err(Error::ShapeMismatch {
                context: "hbp gradient",
                expected: cache.output.extents().to_vec(),
                found: grad_out.extents().to_vec(),
            });
        }
        dispatch!(self, m => m.hbp_explicit(cache, h_out, grad_out, kind, need_input))
    }

    /// Matrix-free HBP: returns operators for the input and parameter
    /// Hessians, defined through the operator `h_out` on the output.
    pub fn hbp_matfree<'a>(
        &'a self,
        cache: &'a LayerCache,
        h_out: Mvp<'a>,
        grad_out: &'a Tensor,
        kind: CurvatureKind,
    ) -> Result<HbpOperators<'a>> {
        dispatch!(self, m => m.hbp_matfree(cache, h_out, grad_out, kind))
    }

    /// Number of rows of a parameter, the unit of sub-blocking.
    pub fn param_rows(&self, slot: usize) -> usize {
        self.params()[slot].rows()
    }

    /// Whether every nonlinearity (recursively) is piecewise linear.
    pub fn is_piecewise_linear(&self) -> bool {
        match self {
            Layer::Activation(a) => a.kind == ActivationKind::Relu,
            Layer::Skip(s) => s.branch.iter().all(Layer::is_piecewise_linear),
            _ => true,
        }
    }
}

pub fn sequence_forward(layers: &[Layer], x: &Tensor) -> Result<(Tensor, Vec<LayerCache>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        let (out, cache) = layer.forward(&cur)?;
        caches.push(cache);
        cur = out;
    }
    Ok((cur, caches))
}

/// Backpropagates `grad_out` through a layer sequence, recording each
/// layer's output gradient. Returns the input gradient and per-layer
/// parameter gradients.
pub fn sequence_backward(layers: &[Layer], caches: &mut [LayerCache], grad_out: &Tensor) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
    if layers.len() != caches.len() {
        return Err(Error::MissingCache("one cache per layer"));
    }
    let mut grads = vec![Vec::new(); layers.len()];
    let mut g = grad_out.clone();
    for (i, layer) in layers.iter().enumerate().rev() {
        let (gin, gp) = layer.backward(&mut caches[i], &g)?;
        grads[i] = gp;
        g = gin;
    }
    Ok((g, grads))
}

pub fn sequence_jvp_input(layers: &[Layer], caches: &[LayerCache], v: &[f64]) -> Vec<f64> {
    layers.iter().zip(caches).fold(v.to_vec(), |acc, (l, c)| l.jvp_input(c, &acc))
}

pub fn sequence_vjp_input(layers: &[Layer], caches: &[LayerCache], u: &[f64]) -> Vec<f64> {
    layers.iter().zip(caches).rev().fold(u.to_vec(), |acc, (l, c)| l.vjp_input(c, &acc))
}

/// For each layer, whether its input Hessian is needed: either the caller
/// wants the sequence input Hessian or some earlier layer has parameters.
pub(crate) fn input_hessian_needed(layers: &[Layer], need_input: bool) -> Vec<bool> {
    let mut seen_params = need_input;
    layers
        .iter()
        .map(|l| {
            let needed = seen_params;
            seen_params |= l.num_params() > 0;
            needed
        })
        .collect()
}

/// Explicit HBP through a sequence, reading each layer's output gradient
/// from its cache.
pub fn sequence_hbp_explicit(
    layers: &[Layer],
    caches: &[LayerCache],
    h_out: Tensor,
    kind: CurvatureKind,
    need_input: bool,
) -> Result<(Option<Tensor>, Vec<Vec<CurvatureMatrix>>)> {
    let needed = input_hessian_needed(layers, need_input);
    let mut blocks = vec![Vec::new(); layers.len()];
    let mut h = Some(h_out);
    for i in (0..layers.len()).rev() {
        let Some(h_cur) = h.take() else { break };
        let out = layers[i].hbp_explicit(&caches[i], &h_cur, caches[i].grad_out()?, kind, needed[i])?;
        blocks[i] = out.params;
        h = out.input;
    }
    Ok((h, blocks))
}

/// Matrix-free HBP through a sequence.
pub fn sequence_hbp_matfree<'a>(
    layers: &'a [Layer],
    caches: &'a [LayerCache],
    h_out: Mvp<'a>,
    kind: CurvatureKind,
) -> Result<(Mvp<'a>, Vec<Vec<Mvp<'a>>>)> {
    let mut ops = Vec::with_capacity(layers.len());
    let mut h = h_out;
    for i in (0..layers.len()).rev() {
        let out = layers[i].hbp_matfree(&caches[i], h, caches[i].grad_out()?, kind)?;
        ops.push(out.params);
        h = out.input;
    }
    ops.reverse();
    Ok((h, ops))
}

#[cfg(test)]
pub(crate) mod testing;

#[cfg(test)]
mod tests;
