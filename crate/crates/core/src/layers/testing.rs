//! Test-only helpers: random instances and a loss-value finite-difference
//! oracle that never touches the backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss_forward_grad_hess, sequence_backward, sequence_forward, Layer, LayerCache, LossKind, LossOutput};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, extents: &[usize], scale: f64) -> Tensor {
    let n = extents.iter().product();
    Tensor::new(extents, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_symmetric(rng: &mut impl Rng, n: usize) -> Tensor {
    random_tensor(rng, &[n, n], 1.0).symmetrized().unwrap()
}

/// Forward, loss and recorded backward through a layer sequence.
pub fn run(layers: &[Layer], x: &Tensor, target: &Tensor, loss: LossKind) -> (Vec<LayerCache>, LossOutput) {
    let (out, mut caches) = sequence_forward(layers, x).unwrap();
    let l = loss_forward_grad_hess(loss, &out, target).unwrap();
    sequence_backward(layers, &mut caches, &l.grad).unwrap();
    (caches, l)
}

pub fn loss_value(layers: &[Layer], x: &Tensor, target: &Tensor, loss: LossKind) -> f64 {
    let (out, _) = sequence_forward(layers, x).unwrap();
    loss_forward_grad_hess(loss, &out, target).unwrap().value
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Four-point central-difference Hessian of `f` at `x`, symmetrized.
pub fn fd_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Tensor {
    let n = x.len();
    let mut out = Tensor::zeros(&[n, n]);
    let mut p = x.to_vec();
    for i in 0..n {
        for j in 0..=i {
            let mut eval = |si: f64, sj: f64| {
                p[i] += si * h;
                p[j] += sj * h;
                let v = f(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * h * h);
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b) / b.max_abs().max(1e-12)
}

pub fn min_eig(m: &Tensor) -> f64 {
    let n = m.rows();
    let mat = nalgebra::DMatrix::from_column_slice(n, n, m.data());
    mat.symmetric_eigen().eigenvalues.min()
}
