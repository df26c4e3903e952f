//! The damped Newton-style update and first-order baselines.

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::curvature::CurvatureKind;
use crate::engine::{curvature_blocks, subblock_partition, BatchMode, DEFAULT_MEMORY_CAP};
use crate::error::{Error, Result};
use crate::network::{forward_pass, gradient_pass, Network, ParamId, Sample};
use crate::solver::{cg_solve, CgConfig, CgResult, CgStatus};
use crate::tensor::Tensor;

/// Number of rowwise sub-blocks per parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubBlocks {
    /// At most this many; parameters with fewer rows get one per row.
    Count(usize),
    /// One sub-block per row.
    Rows,
}

impl SubBlocks {
    pub fn for_rows(self, rows: usize) -> usize {
        match self {
            SubBlocks::Count(n) => n.min(rows),
            SubBlocks::Rows => rows,
        }
    }
}

impl Serialize for SubBlocks {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SubBlocks::Count(n) => s.serialize_u64(*n as u64),
            SubBlocks::Rows => s.serialize_str("rows"),
        }
    }
}

impl<'de> Deserialize<'de> for SubBlocks {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(0) => Err(serde::de::Error::custom("sub-block count must be at least 1")),
            Raw::Count(n) => Ok(SubBlocks::Count(n)),
            Raw::Name(s) if s == "rows" => Ok(SubBlocks::Rows),
            Raw::Name(s) => Err(serde::de::Error::custom(format!("sub-blocks must be a count or \"rows\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateConfig {
    /// Interpolates between a gradient step (1) and a full Newton-type step (0).
    pub alpha: f64,
    /// Learning rate applied to the solved direction.
    pub gamma: f64,
    pub kind: CurvatureKind,
    pub mode: BatchMode,
    pub subblocks: SubBlocks,
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma {} must be positive", self.gamma)));
        }
        if self.subblocks == SubBlocks::Count(0) {
            return Err(Error::InvalidArgument("sub-block count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Solves `[α I + (1 - α) C] Δθ = -δθ`. With `α = 1` the system is the
/// identity and `Δθ = -δθ` exactly.
pub fn newton_step(grad: &[f64], curvature: &dyn Fn(&[f64]) -> Vec<f64>, alpha: f64, cg: &CgConfig) -> Result<CgResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let b: Vec<f64> = grad.iter().map(|g| -g).collect();
    if alpha == 1.0 {
        return cg_solve(&|v: &[f64]| v.to_vec(), &b, cg);
    }
    let damped = |v: &[f64]| {
        let cv = curvature(v);
        v.iter().zip(cv).map(|(x, c)| alpha * x + (1.0 - alpha) * c).collect()
    };
    cg_solve(&damped, &b, cg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// Mean batch loss before the update.
    pub loss: f64,
    pub cg_iters_mean: f64,
    pub solves: usize,
    pub negative_curvature: usize,
}

#[derive(Clone, Debug)]
pub struct NewtonOptimizer {
    pub update: UpdateConfig,
    pub cg: CgConfig,
    pub memory_cap: usize,
}

impl NewtonOptimizer {
    pub fn new(update: UpdateConfig, cg: CgConfig) -> Result<Self> {
        update.validate()?;
        cg.validate()?;
        Ok(NewtonOptimizer { update, cg, memory_cap: DEFAULT_MEMORY_CAP })
    }

    pub fn step(&self, net: &mut Network, batch: &[Sample]) -> Result<StepStats> {
        let mut trace = forward_pass(net, batch)?;
        let grads = gradient_pass(net, &mut trace)?;
        let ids = net.param_ids();
        let results: Vec<(ParamId, Vec<usize>, CgResult)> = {
            let blocks = curvature_blocks(net, &trace, self.update.kind, self.update.mode, self.memory_cap)?;
            let mut tasks = Vec::new();
            for b in &blocks {
                let n = self.update.subblocks.for_rows(b.param_rows);
                for r in subblock_partition(b.param_dim, b.param_rows, n)? {
                    tasks.push(b.subblock(r)?);
                }
            }
            tasks
                .par_iter()
                .map(|sub| {
                    let idx = sub.indices();
                    let g = &grads[ids.iter().position(|&i| i == sub.id).expect("known id")];
                    let gs: Vec<f64> = idx.iter().map(|&i| g.data()[i]).collect();
                    let op = sub.operator();
                    let res = newton_step(&gs, &*op, self.update.alpha, &self.cg)?;
                    Ok((sub.id, idx, res))
                })
                .collect::<Result<_>>()?
        };
        let solves = results.len();
        let mut iters = 0;
        let mut negative = 0;
        for (id, idx, res) in results {
            iters += res.iters;
            negative += usize::from(res.status == CgStatus::NegativeCurvature);
            let mut theta = net.param(id).data().to_vec();
            for (&i, d) in idx.iter().zip(&res.x) {
                theta[i] += self.update.gamma * d;
            }
            net.set_param(id, &theta)?;
        }
        Ok(StepStats {
            loss: trace.loss,
            cg_iters_mean: if solves == 0 { 0.0 } else { iters as f64 / solves as f64 },
            solves,
            negative_curvature: negative,
        })
    }
}

/// Velocity of momentum SGD, one vector per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

/// `v ← momentum·v + g`; returns the updates `-lr·v`.
pub fn sgd_momentum_step(grads: &[Tensor], state: &mut SgdState, lr: f64, momentum: f64) -> Vec<Vec<f64>> {
    if state.velocity.is_empty() {
        state.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
    }
    grads
        .iter()
        .zip(&mut state.velocity)
        .map(|(g, v)| {
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = momentum * *vi + gi;
            }
            v.iter().map(|vi| -lr * vi).collect()
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u32,
}

/// Bias-corrected Adam; returns the updates.
pub fn adam_step(grads: &[Tensor], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Vec<Vec<f64>> {
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    grads
        .iter()
        .zip(state.m.iter_mut().zip(&mut state.v))
        .map(|(g, (m, v))| {
            g.data()
                .iter()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|(gi, (mi, vi))| {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    -lr * (*mi / c1) / ((*vi / c2).sqrt() + eps)
                })
                .collect()
        })
        .collect()
}

/// An optimizer with its state.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Newton(NewtonOptimizer),
    Sgd { lr: f64, momentum: f64, state: SgdState },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, state: AdamState },
}

fn apply_updates(net: &mut Network, updates: &[Vec<f64>]) -> Result<()> {
    for (id, u) in net.param_ids().into_iter().zip(updates) {
        let theta: Vec<f64> = net.param(id).data().iter().zip(u).map(|(t, d)| t + d).collect();
        net.set_param(id, &theta)?;
    }
    Ok(())
}

impl Optimizer {
    pub fn step(&mut self, net: &mut Network, batch: &[Sample]) -> Result<StepStats> {
        if let Optimizer::Newton(n) = self {
            return n.step(net, batch);
        }
        let mut trace = forward_pass(net, batch)?;
        let grads = gradient_pass(net, &mut trace)?;
        let updates = match self {
            Optimizer::Sgd { lr, momentum, state } => sgd_momentum_step(&grads, state, *lr, *momentum),
            Optimizer::Adam { lr, beta1, beta2, eps, state } => adam_step(&grads, state, *lr, *beta1, *beta2, *eps),
            Optimizer::Newton(_) => unreachable!(),
        };
        apply_updates(net, &updates)?;
        Ok(StepStats { loss: trace.loss, cg_iters_mean: 0.0, solves: 0, negative_curvature: 0 })
    }
}
