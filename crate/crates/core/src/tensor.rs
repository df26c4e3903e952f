//! Dense double-precision tensors in column-major order.
//!
//! Element `(i0, i1, ..)` lives at `i0 + e0 * (i1 + e1 * (..))`, so the
//! first index runs fastest and `vec` is the identity on storage. Every
//! Kronecker identity used by the layer library assumes this convention.
//!
//! Feature maps of convolutional networks are `[C, H*W]` matrices: one row
//! per channel, one column per pixel in raster order (`h * W + w`).

use std::fmt;

use crate::error::{Error, Result};

/// Extents of a tensor. Non-empty, every extent at least one.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(extents: Vec<usize>) -> Result<Self> {
        if extents.is_empty() {
            return Err(Error::InvalidShape("shape must have at least one extent".into()));
        }
        if extents.contains(&0) {
            return Err(Error::InvalidShape(format!("zero extent in {extents:?}")));
        }
        Ok(Shape(extents))
    }

    pub fn extents(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|e| e.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from column-major data, rejecting non-finite entries.
    pub fn new(extents: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(extents.to_vec())?;
        if shape.numel() != data.len() {
            return Err(Error::InvalidShape(format!("shape {shape} holds {} values, got {}", shape.numel(), data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor construction (entry {pos})")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for results of arithmetic on valid tensors.
    pub(crate) fn from_parts(extents: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(extents.iter().product::<usize>(), data.len());
        Tensor { shape: Shape(extents), data }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(&[n], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(&[1], vec![value])
    }

    pub fn zeros(extents: &[usize]) -> Self {
        let n = extents.iter().product();
        Tensor::from_parts(extents.to_vec(), vec![0.0; n])
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::from_parts(other.shape.0.clone(), vec![0.0; other.len()])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i + n * i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i + n * i] = *v;
        }
        t
    }

    /// Builds a matrix from rows written in reading order.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        let mut data = vec![0.0; m * n];
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                data[i + m * j] = *v;
            }
        }
        Tensor::new(&[m, n], data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn extents(&self) -> &[usize] {
        self.shape.extents()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        self.shape.0[0]
    }

    pub fn cols(&self) -> usize {
        if self.rank() >= 2 {
            self.shape.0[1..].iter().product()
        } else {
            1
        }
    }

    /// Entry `(i, j)` of a matrix.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i + self.rows() * j]
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        let m = self.rows();
        self.data[i + m * j] = v;
    }

    pub fn expect_rank(&self, rank: usize, context: &'static str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Rank { context, expected: rank, found: self.rank() });
        }
        Ok(())
    }

    pub fn expect_square(&self, context: &'static str) -> Result<usize> {
        self.expect_rank(2, context)?;
        if self.rows() != self.cols() {
            return Err(Error::NotSquare(context));
        }
        Ok(self.rows())
    }

    /// Column-stacking vectorization.
    pub fn vec(&self) -> Tensor {
        Tensor::from_parts(vec![self.len()], self.data.clone())
    }

    pub fn reshape(&self, extents: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(extents.to_vec())?;
        if shape.numel() != self.len() {
            return Err(Error::ShapeMismatch { context: "reshape", expected: self.extents().to_vec(), found: extents.to_vec() });
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.expect_rank(2, "transpose")?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            for i in 0..m {
                out[j + n * i] = self.data[i + m * j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_rank(2, "matmul")?;
        if other.rank() > 2 {
            return Err(Error::Rank { context: "matmul", expected: 2, found: other.rank() });
        }
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch { context: "matmul", expected: vec![k, n], found: vec![k2, n] });
        }
        let out = matmul_slices(&self.data, m, k, &other.data, n);
        let extents = if other.rank() == 1 { vec![m] } else { vec![m, n] };
        Ok(Tensor::from_parts(extents, out))
    }

    /// `selfᵀ · other` without forming the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_rank(2, "t_matmul")?;
        let (k, m) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch { context: "t_matmul", expected: vec![k, n], found: vec![k2, n] });
        }
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            let b = &other.data[k * j..k * (j + 1)];
            for i in 0..m {
                let a = &self.data[k * i..k * (i + 1)];
                out[i + m * j] = dot(a, b);
            }
        }
        let extents = if other.rank() == 1 { vec![m] } else { vec![m, n] };
        Ok(Tensor::from_parts(extents, out))
    }

    /// `aᵀ · self · a` for square `self`.
    pub fn sandwich(&self, a: &Tensor) -> Result<Tensor> {
        a.t_matmul(&self.matmul(a)?)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.extents().to_vec(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Tensor, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.extents() != other.extents() {
            return Err(Error::ShapeMismatch { context, expected: self.extents().to_vec(), found: other.extents().to_vec() });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_parts(self.extents().to_vec(), data))
    }

    pub(crate) fn add_assign_scaled(&mut self, other: &Tensor, s: f64) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// Symmetric part `(M + Mᵀ) / 2`.
    pub fn symmetrized(&self) -> Result<Tensor> {
        let n = self.expect_square("symmetrized")?;
        let mut out = self.clone();
        for j in 0..n {
            for i in 0..j {
                let v = 0.5 * (self.at(i, j) + self.at(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        Ok(out)
    }

    /// Principal submatrix on the given index set.
    pub fn principal_submatrix(&self, idx: &[usize]) -> Result<Tensor> {
        let n = self.expect_square("principal_submatrix")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("index {bad} out of range for {n}x{n}")));
        }
        let k = idx.len();
        let mut out = vec![0.0; k * k];
        for (b, &j) in idx.iter().enumerate() {
            for (a, &i) in idx.iter().enumerate() {
                out[a + k * b] = self.data[i + n * j];
            }
        }
        Ok(Tensor::from_parts(vec![k, k], out))
    }

    pub fn check_finite(self, context: &str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Column-major `(m x k) * (k x n)`.
pub(crate) fn matmul_slices(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for j in 0..n {
        let col = &mut out[m * j..m * (j + 1)];
        for p in 0..k {
            let s = b[p + k * j];
            if s == 0.0 {
                continue;
            }
            let acol = &a[m * p..m * (p + 1)];
            for (o, &av) in col.iter_mut().zip(acol) {
                *o += av * s;
            }
        }
    }
    out
}

/// Kronecker product; block `(i, j)` of the result is `a[i, j] * b`.
pub fn kron(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "kron")?;
    b.expect_rank(2, "kron")?;
    let (m, n) = (a.rows(), a.cols());
    let (p, q) = (b.rows(), b.cols());
    let rows = m * p;
    let mut out = vec![0.0; rows * n * q];
    for j in 0..n {
        for i in 0..m {
            let s = a.at(i, j);
            if s == 0.0 {
                continue;
            }
            for l in 0..q {
                for k in 0..p {
                    out[(i * p + k) + rows * (j * q + l)] = s * b.at(k, l);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![rows, n * q], out))
}

/// True iff `max |m - mᵀ| <= tol`.
pub fn sym_check(m: &Tensor, tol: f64) -> Result<bool> {
    Ok(symmetry_defect(m)? <= tol)
}

pub fn symmetry_defect(m: &Tensor) -> Result<f64> {
    let n = m.expect_square("sym_check")?;
    let mut defect: f64 = 0.0;
    for j in 0..n {
        for i in 0..j {
            defect = defect.max((m.at(i, j) - m.at(j, i)).abs());
        }
    }
    Ok(defect)
}

/// Geometry of a 2-D convolution over a `[C, H*W]` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if self.channels == 0 || self.height == 0 || self.width == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidArgument(format!("degenerate convolution geometry {self:?}")));
        }
        if sh == 0 || sw == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if kh > self.height + 2 * self.pad.0 || kw > self.width + 2 * self.pad.1 {
            return Err(Error::InvalidArgument(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                self.height + 2 * self.pad.0,
                self.width + 2 * self.pad.1
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1
    }

    /// Rows of the unfolded matrix: `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// For every entry of the unfolded matrix (column-major), the input
    /// entry it copies, or `None` where it reads padding.
    pub fn unfold_map(&self) -> Result<Vec<Option<usize>>> {
        self.validate()?;
        let (kh, kw) = self.kernel;
        let (oh, ow) = (self.out_height(), self.out_width());
        let rows = self.patch_len();
        let mut map = vec![None; rows * oh * ow];
        for py in 0..oh {
            for px in 0..ow {
                let p = py * ow + px;
                for c in 0..self.channels {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let r = c * kh * kw + ki * kw + kj;
                            let y = (py * self.stride.0 + ki) as isize - self.pad.0 as isize;
                            let x = (px * self.stride.1 + kj) as isize - self.pad.1 as isize;
                            if y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width {
                                let pixel = y as usize * self.width + x as usize;
                                map[r + rows * p] = Some(c + self.channels * pixel);
                            }
                        }
                    }
                }
            }
        }
        Ok(map)
    }
}

/// Unfolds a `[C, H*W]` feature map into its `(C*kh*kw) x (out_h*out_w)`
/// patch matrix. Columns enumerate output positions in raster order; rows
/// run over channels, then kernel rows, then kernel columns.
pub fn unfold(x: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    if x.len() != geom.input_len() {
        return Err(Error::ShapeMismatch {
            context: "unfold",
            expected: vec![geom.channels, geom.height * geom.width],
            found: x.extents().to_vec(),
        });
    }
    let map = geom.unfold_map()?;
    let data = map.iter().map(|m| m.map_or(0.0, |i| x.data[i])).collect();
    Ok(Tensor::from_parts(vec![geom.patch_len(), geom.positions()], data))
}
