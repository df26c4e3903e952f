//! Curvature kinds and the matrix representations of curvature blocks.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul_slices, Tensor};

/// A symmetric linear operator given by its action on vectors.
pub type Mvp<'a> = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a>;

pub fn zero_operator<'a>(dim: usize) -> Mvp<'a> {
    Arc::new(move |v: &[f64]| {
        debug_assert_eq!(v.len(), dim);
        vec![0.0; v.len()]
    })
}

pub fn matrix_operator<'a>(m: Tensor) -> Mvp<'a> {
    Arc::new(move |v: &[f64]| {
        let n = m.rows();
        matmul_slices(m.data(), n, n, v, 1)
    })
}

/// Which curvature matrix the backward pass produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureKind {
    /// Exact diagonal blocks of the Hessian.
    HessianExact,
    /// Generalized Gauss-Newton: module second-order terms dropped.
    Ggn,
    /// Positive-curvature Hessian, negative concave terms clipped to zero.
    PchClip,
    /// Positive-curvature Hessian, concave terms replaced by their magnitude.
    PchAbs,
}

impl CurvatureKind {
    pub const ALL: [CurvatureKind; 4] =
        [CurvatureKind::HessianExact, CurvatureKind::Ggn, CurvatureKind::PchClip, CurvatureKind::PchAbs];

    /// Whether blocks of this kind are positive semi-definite for convex losses.
    pub fn is_psd(self) -> bool {
        !matches!(self, CurvatureKind::HessianExact)
    }

    pub fn name(self) -> &'static str {
        match self {
            CurvatureKind::HessianExact => "hessian_exact",
            CurvatureKind::Ggn => "ggn",
            CurvatureKind::PchClip => "pch_clip",
            CurvatureKind::PchAbs => "pch_abs",
        }
    }
}

impl fmt::Display for CurvatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CurvatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CurvatureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown curvature kind '{s}'")))
    }
}

/// Applies the curvature kind to the diagonal of an elementwise module's
/// second-order term `sum_k [H z_k(x)] dz_k`.
pub fn concavity_transform(diag_term: &[f64], kind: CurvatureKind) -> Vec<f64> {
    match kind {
        CurvatureKind::HessianExact => diag_term.to_vec(),
        CurvatureKind::Ggn => vec![0.0; diag_term.len()],
        CurvatureKind::PchClip => diag_term.iter().map(|&c| c.max(0.0)).collect(),
        CurvatureKind::PchAbs => diag_term.iter().map(|&c| c.abs()).collect(),
    }
}

/// Symmetric PSD input-side Kronecker factor, dense or as `F Fᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub enum Gram {
    Dense(Tensor),
    Factor(Tensor),
}

impl Gram {
    pub fn dim(&self) -> usize {
        match self {
            Gram::Dense(g) => g.rows(),
            Gram::Factor(f) => f.rows(),
        }
    }

    pub fn to_dense(&self) -> Tensor {
        match self {
            Gram::Dense(g) => g.clone(),
            Gram::Factor(f) => {
                let ft = f.transpose().expect("factor is a matrix");
                f.matmul(&ft).expect("conformable")
            }
        }
    }

    /// `V G` for a column-major `rows x dim` matrix `V`.
    fn right_apply(&self, v: &[f64], rows: usize) -> Vec<f64> {
        let n = self.dim();
        match self {
            Gram::Dense(g) => matmul_slices(v, rows, n, g.data(), n),
            Gram::Factor(f) => {
                let r = f.cols();
                let vf = matmul_slices(v, rows, n, f.data(), r);
                // (V F) Fᵀ
                let mut out = vec![0.0; rows * n];
                for j in 0..n {
                    for k in 0..r {
                        let s = f.data()[j + n * k];
                        if s == 0.0 {
                            continue;
                        }
                        let src = &vf[rows * k..rows * (k + 1)];
                        for (o, &x) in out[rows * j..rows * (j + 1)].iter_mut().zip(src) {
                            *o += x * s;
                        }
                    }
                }
                out
            }
        }
    }
}

/// `G ⊗ H`, acting on `vec(V)` for `V` of shape `dim(H) x dim(G)` as
/// `vec(H V G)`. This is the structure of a weight-matrix block.
#[derive(Clone, Debug, PartialEq)]
pub struct KronFactors {
    pub gram: Gram,
    pub out: Tensor,
}

impl KronFactors {
    pub fn dim(&self) -> usize {
        self.gram.dim() * self.out.rows()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let m = self.out.rows();
        let vg = self.gram.right_apply(v, m);
        matmul_slices(self.out.data(), m, m, &vg, self.gram.dim())
    }

    pub fn to_dense(&self) -> Tensor {
        crate::tensor::kron(&self.gram.to_dense(), &self.out).expect("factors are matrices")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CurvatureMatrix {
    Dense(Tensor),
    Kron(KronFactors),
}

impl CurvatureMatrix {
    pub fn dim(&self) -> usize {
        match self {
            CurvatureMatrix::Dense(m) => m.rows(),
            CurvatureMatrix::Kron(k) => k.dim(),
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            CurvatureMatrix::Dense(m) => {
                let n = m.rows();
                matmul_slices(m.data(), n, n, v, 1)
            }
            CurvatureMatrix::Kron(k) => k.apply(v),
        }
    }

    pub fn to_dense(&self) -> Tensor {
        match self {
            CurvatureMatrix::Dense(m) => m.clone(),
            CurvatureMatrix::Kron(k) => k.to_dense(),
        }
    }

    pub fn to_operator<'a>(&self) -> Mvp<'a> {
        let m = self.clone();
        Arc::new(move |v: &[f64]| m.apply(v))
    }

    /// The principal sub-block belonging to parameter rows `range` of a
    /// parameter with `rows` rows (column-major, so entry `k` is in row
    /// `k % rows`).
    pub fn row_subblock(&self, rows: usize, range: Range<usize>) -> Result<CurvatureMatrix> {
        if range.end > rows || range.is_empty() {
            return Err(Error::InvalidArgument(format!("row range {range:?} outside {rows} rows")));
        }
        match self {
            CurvatureMatrix::Kron(k) if k.out.rows() == rows => {
                let idx: Vec<usize> = range.collect();
                Ok(CurvatureMatrix::Kron(KronFactors { gram: k.gram.clone(), out: k.out.principal_submatrix(&idx)? }))
            }
            _ => {
                let dense = self.to_dense();
                let idx = row_indices(dense.rows(), rows, range);
                Ok(CurvatureMatrix::Dense(dense.principal_submatrix(&idx)?))
            }
        }
    }

    /// Batch mean of per-sample matrices. Kronecker blocks sharing the same
    /// output factor stay factored; anything else is densified.
    pub fn average(items: Vec<CurvatureMatrix>) -> Result<CurvatureMatrix> {
        let b = items.len();
        if b == 0 {
            return Err(Error::InvalidArgument("average of zero matrices".into()));
        }
        let shared_kron = match &items[0] {
            CurvatureMatrix::Kron(first) => items.iter().all(|m| match m {
                CurvatureMatrix::Kron(k) => matches!(k.gram, Gram::Factor(_)) && k.out == first.out,
                _ => false,
            }),
            _ => false,
        };
        if shared_kron {
            let scale = 1.0 / (b as f64).sqrt();
            let mut out = None;
            let mut columns = Vec::new();
            let mut n = 0;
            let mut r = 0;
            for m in items {
                if let CurvatureMatrix::Kron(k) = m {
                    if let Gram::Factor(f) = k.gram {
                        n = f.rows();
                        r += f.cols();
                        columns.extend(f.data().iter().map(|v| v * scale));
                    }
                    out.get_or_insert(k.out);
                }
            }
            return Ok(CurvatureMatrix::Kron(KronFactors {
                gram: Gram::Factor(Tensor::from_parts(vec![n, r], columns)),
                out: out.expect("non-empty"),
            }));
        }
        let mut acc = items[0].to_dense();
        for m in &items[1..] {
            acc.add_assign_scaled(&m.to_dense(), 1.0);
        }
        Ok(CurvatureMatrix::Dense(acc.scale(1.0 / b as f64)))
    }
}

/// Indices of the entries of a `dim`-element parameter with `rows` rows
/// whose row lies in `range`, in increasing order.
pub fn row_indices(dim: usize, rows: usize, range: Range<usize>) -> Vec<usize> {
    (0..dim).filter(|k| range.contains(&(k % rows))).collect()
}

pub(crate) fn axpy_into(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}
