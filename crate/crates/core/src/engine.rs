//! Curvature passes over a batch.
//!
//! After [`forward_pass`](crate::network::forward_pass) and
//! [`gradient_pass`](crate::network::gradient_pass), the per-parameter
//! diagonal curvature blocks of the batch-mean loss are available either
//! as materialized matrices (batch-averaged explicit propagation) or as
//! exact matrix-vector products.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::curvature::{axpy_into, matrix_operator, CurvatureKind, CurvatureMatrix, Gram, KronFactors, Mvp};
use crate::error::{Error, Result};
use crate::layers::{input_hessian_needed, sequence_hbp_explicit, sequence_hbp_matfree, HbpOutput, Layer, LayerCache};
use crate::network::{Network, ParamId, Trace};
use crate::tensor::Tensor;

/// Default ceiling on `dim(z)^2` for explicit modes.
pub const DEFAULT_MEMORY_CAP: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Matrix-free, exact batch average of per-sample blocks.
    ExactPerSample,
    /// `H̄x = avg [Dz]ᵀ H̄z [Dz] + avg sum_k [H z_k] dz_k`.
    AvgSandwich,
    /// `H̄x = [avg Dz]ᵀ H̄z [avg Dz] + avg sum_k [H z_k] dz_k`.
    AvgJacobian,
}

impl BatchMode {
    pub fn name(self) -> &'static str {
        match self {
            BatchMode::ExactPerSample => "exact_per_sample",
            BatchMode::AvgSandwich => "avg_sandwich",
            BatchMode::AvgJacobian => "avg_jacobian",
        }
    }
}

#[derive(Clone)]
pub enum BlockRepr<'a> {
    Matrix(CurvatureMatrix),
    Operator(Mvp<'a>),
}

/// Diagonal curvature block for the rows `rows` of one parameter.
#[derive(Clone)]
pub struct CurvatureBlock<'a> {
    pub id: ParamId,
    pub rows: Range<usize>,
    /// Row count of the whole parameter.
    pub param_rows: usize,
    /// Dimension of the whole parameter.
    pub param_dim: usize,
    pub kind: CurvatureKind,
    pub repr: BlockRepr<'a>,
}

impl<'a> CurvatureBlock<'a> {
    /// Positions of this block's entries within the parameter's `vec`.
    pub fn indices(&self) -> Vec<usize> {
        crate::curvature::row_indices(self.param_dim, self.param_rows, self.rows.clone())
    }

    pub fn dim(&self) -> usize {
        self.param_dim / self.param_rows * self.rows.len()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match &self.repr {
            BlockRepr::Matrix(m) => m.apply(v),
            BlockRepr::Operator(op) => op(v),
        }
    }

    pub fn operator(&self) -> Mvp<'a> {
        match &self.repr {
            BlockRepr::Matrix(m) => m.to_operator(),
            BlockRepr::Operator(op) => op.clone(),
        }
    }

    pub fn to_dense(&self) -> Tensor {
        match &self.repr {
            BlockRepr::Matrix(m) => m.to_dense(),
            BlockRepr::Operator(op) => crate::layers::assemble(self.dim(), |v| op(v)),
        }
    }

    /// The principal sub-block for parameter rows `range`, which must lie
    /// within this block's rows.
    pub fn subblock(&self, range: Range<usize>) -> Result<CurvatureBlock<'a>> {
        if range.is_empty() || range.start < self.rows.start || range.end > self.rows.end {
            return Err(Error::InvalidArgument(format!("sub-block rows {range:?} outside {:?}", self.rows)));
        }
        let local = range.start - self.rows.start..range.end - self.rows.start;
        let repr = match &self.repr {
            BlockRepr::Matrix(m) => BlockRepr::Matrix(m.row_subblock(self.rows.len(), local.clone())?),
            BlockRepr::Operator(op) => {
                let idx = crate::curvature::row_indices(self.dim(), self.rows.len(), local.clone());
                let n = self.dim();
                let op = op.clone();
                BlockRepr::Operator(Arc::new(move |v: &[f64]| {
                    let mut full = vec![0.0; n];
                    for (&i, &x) in idx.iter().zip(v) {
                        full[i] = x;
                    }
                    let out = op(&full);
                    idx.iter().map(|&i| out[i]).collect()
                }))
            }
        };
        Ok(CurvatureBlock { rows: range, repr, ..self.clone() })
    }
}

/// Contiguous row ranges for `n_blocks` sub-blocks of a parameter with
/// `rows` rows and `block_dim` entries; sizes differ by at most one,
/// larger first.
pub fn subblock_partition(block_dim: usize, rows: usize, n_blocks: usize) -> Result<Vec<Range<usize>>> {
    if rows == 0 || !block_dim.is_multiple_of(rows) {
        return Err(Error::InvalidArgument(format!("{block_dim} entries do not split into {rows} rows")));
    }
    if n_blocks == 0 || n_blocks > rows {
        return Err(Error::InvalidArgument(format!("{n_blocks} sub-blocks for {rows} rows")));
    }
    let (base, extra) = (rows / n_blocks, rows % n_blocks);
    let mut start = 0;
    Ok((0..n_blocks)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

fn require_gradients(trace: &Trace) -> Result<()> {
    if trace.has_gradients {
        Ok(())
    } else {
        Err(Error::MissingCache("gradient pass has not run"))
    }
}

fn mean_dense(items: impl Iterator<Item = Tensor>, n: usize) -> Option<Tensor> {
    let mut acc: Option<Tensor> = None;
    for t in items {
        match &mut acc {
            None => acc = Some(t),
            Some(a) => a.add_assign_scaled(&t, 1.0),
        }
    }
    acc.map(|a| a.scale(1.0 / n as f64))
}

fn mean_vector(items: impl Iterator<Item = Vec<f64>>, n: usize) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for v in items {
        if acc.is_empty() {
            acc = v;
        } else {
            axpy_into(&mut acc, 1.0, &v);
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

fn check_cap(dim: usize, cap: usize, layer: usize) -> Result<()> {
    let size = dim.saturating_mul(dim);
    if size > cap {
        return Err(Error::CapExceeded {
            what: format!("explicit Hessian at layer {layer}; use exact_per_sample mode"),
            size,
            cap,
        });
    }
    Ok(())
}

/// Batch-averaged explicit HBP through one layer given the batch-mean
/// output Hessian `h_bar` and the per-sample caches.
pub fn batch_hbp_layer(
    layer: &Layer,
    caches: &[&LayerCache],
    h_bar: &Tensor,
    kind: CurvatureKind,
    mode: BatchMode,
    need_input: bool,
) -> Result<HbpOutput> {
    let b = caches.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    match mode {
        BatchMode::ExactPerSample => Err(Error::InvalidArgument("exact_per_sample mode is matrix-free".into())),
        BatchMode::AvgSandwich => {
            let mut inputs = Vec::with_capacity(b);
            let mut params: Vec<Vec<CurvatureMatrix>> = vec![Vec::with_capacity(b); layer.num_params()];
            for c in caches {
                let out = layer.hbp_explicit(c, h_bar, c.grad_out()?, kind, need_input)?;
                inputs.extend(out.input);
                for (acc, p) in params.iter_mut().zip(out.params) {
                    acc.push(p);
                }
            }
            Ok(HbpOutput {
                input: mean_dense(inputs.into_iter(), b),
                params: params.into_iter().map(CurvatureMatrix::average).collect::<Result<_>>()?,
            })
        }
        BatchMode::AvgJacobian => {
            if let Layer::Linear(lin) = layer {
                let x_bar = mean_vector(caches.iter().map(|c| c.input.data().to_vec()), b);
                let n = x_bar.len();
                let block =
                    CurvatureMatrix::Kron(KronFactors { gram: Gram::Factor(Tensor::new(&[n, 1], x_bar)?), out: h_bar.clone() });
                return Ok(HbpOutput {
                    input: if need_input { Some(h_bar.sandwich(&lin.weight)?) } else { None },
                    params: vec![block],
                });
            }
            let input = if need_input {
                let d_bar = mean_dense(caches.iter().map(|c| layer.jacobian_input(c)), b).expect("non-empty");
                let mut hx = h_bar.sandwich(&d_bar)?;
                let seconds = caches
                    .iter()
                    .map(|c| Ok(layer.second_input(c, c.grad_out()?, kind)?.map(|s| s.to_dense())))
                    .collect::<Result<Vec<_>>>()?;
                if let Some(s) = mean_dense(seconds.into_iter().flatten(), b) {
                    hx.add_assign_scaled(&s, 1.0);
                }
                Some(hx)
            } else {
                None
            };
            let per_sample_seconds = caches.iter().map(|c| layer.second_params(c, kind)).collect::<Result<Vec<_>>>()?;
            let params = (0..layer.num_params())
                .map(|slot| {
                    let d_bar = mean_dense(caches.iter().map(|c| layer.jacobian_param(c, slot)), b).expect("non-empty");
                    let mut hp = h_bar.sandwich(&d_bar)?;
                    if let Some(s) = mean_dense(per_sample_seconds.iter().filter_map(|s| s[slot].clone()), b) {
                        hp.add_assign_scaled(&s, 1.0);
                    }
                    Ok(CurvatureMatrix::Dense(hp))
                })
                .collect::<Result<_>>()?;
            Ok(HbpOutput { input, params })
        }
    }
}

fn blocks_from(net: &Network, kind: CurvatureKind, per_layer: Vec<Vec<CurvatureMatrix>>) -> Vec<CurvatureBlock<'static>> {
    per_layer
        .into_iter()
        .enumerate()
        .flat_map(|(layer, ms)| ms.into_iter().enumerate().map(move |(slot, m)| (ParamId { layer, slot }, m)))
        .map(|(id, m)| CurvatureBlock {
            id,
            rows: 0..net.param_rows(id),
            param_rows: net.param_rows(id),
            param_dim: net.param(id).len(),
            kind,
            repr: BlockRepr::Matrix(m),
        })
        .collect()
}

/// Materialized blocks by batch-averaged explicit propagation.
pub fn curvature_pass_explicit(
    net: &Network,
    trace: &Trace,
    kind: CurvatureKind,
    mode: BatchMode,
    memory_cap: usize,
) -> Result<Vec<CurvatureBlock<'static>>> {
    require_gradients(trace)?;
    if mode == BatchMode::ExactPerSample {
        return Err(Error::InvalidArgument("explicit pass needs avg_sandwich or avg_jacobian".into()));
    }
    let b = trace.batch_size();
    let needed = input_hessian_needed(&net.layers, false);
    let mut per_layer = vec![Vec::new(); net.layers.len()];
    let out_dim = net.output_shape().len();
    check_cap(out_dim, memory_cap, net.layers.len())?;
    let mut h = mean_dense(trace.losses.iter().map(|l| l.hessian.clone()), b);
    for i in (0..net.layers.len()).rev() {
        let Some(h_cur) = h.take() else { break };
        if needed[i] {
            check_cap(trace.caches[0][i].input.len(), memory_cap, i)?;
        }
        let caches: Vec<&LayerCache> = trace.caches.iter().map(|c| &c[i]).collect();
        let out = batch_hbp_layer(&net.layers[i], &caches, &h_cur, kind, mode, needed[i])?;
        per_layer[i] = out.params;
        h = out.input;
    }
    Ok(blocks_from(net, kind, per_layer))
}

/// Materialized exact blocks: per-sample explicit HBP from each sample's
/// own loss Hessian, averaged over the batch.
pub fn exact_blocks(net: &Network, trace: &Trace, kind: CurvatureKind) -> Result<Vec<CurvatureBlock<'static>>> {
    require_gradients(trace)?;
    let mut acc: Vec<Vec<Vec<CurvatureMatrix>>> = net.layers.iter().map(|l| vec![Vec::new(); l.num_params()]).collect();
    for (caches, l) in trace.caches.iter().zip(&trace.losses) {
        let (_, blocks) = sequence_hbp_explicit(&net.layers, caches, l.hessian.clone(), kind, false)?;
        for (a, bs) in acc.iter_mut().zip(blocks) {
            for (slot, m) in bs.into_iter().enumerate() {
                a[slot].push(m);
            }
        }
    }
    let per_layer = acc
        .into_iter()
        .map(|slots| slots.into_iter().map(CurvatureMatrix::average).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(blocks_from(net, kind, per_layer))
}

/// Exact curvature operator of one parameter block: the batch mean of the
/// per-sample matrix-free HBP products, summed in ascending sample order.
pub fn curvature_operator<'a>(net: &'a Network, trace: &'a Trace, kind: CurvatureKind, id: ParamId) -> Result<Mvp<'a>> {
    require_gradients(trace)?;
    if id.layer >= net.layers.len() || id.slot >= net.layers[id.layer].num_params() {
        return Err(Error::InvalidArgument(format!("no parameter {id:?}")));
    }
    let mut ops = Vec::with_capacity(trace.batch_size());
    for (caches, l) in trace.caches.iter().zip(&trace.losses) {
        let (_, mut layer_ops) = sequence_hbp_matfree(&net.layers, caches, matrix_operator(l.hessian.clone()), kind)?;
        ops.push(layer_ops.swap_remove(id.layer).swap_remove(id.slot));
    }
    let dim = net.param(id).len();
    let scale = 1.0 / ops.len() as f64;
    Ok(Arc::new(move |v: &[f64]| {
        let mut acc = vec![0.0; dim];
        for op in &ops {
            axpy_into(&mut acc, 1.0, &op(v));
        }
        acc.iter_mut().for_each(|a| *a *= scale);
        acc
    }))
}

/// One exact curvature matrix-vector product.
pub fn curvature_mvp(net: &Network, trace: &Trace, kind: CurvatureKind, id: ParamId, v: &Tensor) -> Result<Tensor> {
    let op = curvature_operator(net, trace, kind, id)?;
    let p = net.param(id);
    if v.len() != p.len() {
        return Err(Error::ShapeMismatch {
            context: "curvature mvp",
            expected: p.extents().to_vec(),
            found: v.extents().to_vec(),
        });
    }
    Tensor::new(p.extents(), op(v.data()))
}

/// Whole-parameter blocks for every parameter in `mode`.
pub fn curvature_blocks<'a>(
    net: &'a Network,
    trace: &'a Trace,
    kind: CurvatureKind,
    mode: BatchMode,
    memory_cap: usize,
) -> Result<Vec<CurvatureBlock<'a>>> {
    match mode {
        BatchMode::ExactPerSample => net
            .param_ids()
            .into_iter()
            .map(|id| {
                Ok(CurvatureBlock {
                    id,
                    rows: 0..net.param_rows(id),
                    param_rows: net.param_rows(id),
                    param_dim: net.param(id).len(),
                    kind,
                    repr: BlockRepr::Operator(curvature_operator(net, trace, kind, id)?),
                })
            })
            .collect(),
        _ => curvature_pass_explicit(net, trace, kind, mode, memory_cap),
    }
}
