//! Brute-force oracles: finite differences, column assembly, eigenvalues.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::curvature::CurvatureKind;
use crate::engine::{curvature_operator, exact_blocks};
use crate::error::{Error, Result};
use crate::network::{forward_pass, gradient_pass, Network, ParamId, Sample};
use crate::tensor::{symmetry_defect, Tensor};

pub const DEFAULT_GRAD_STEP: f64 = 1e-5;
pub const DEFAULT_HESS_STEP: f64 = 1e-4;
pub const DEFAULT_FD_CAP: usize = 200;

fn checked_loss(net: &Network, data: &[Sample]) -> Result<f64> {
    let l = net.mean_loss(data)?;
    if l.is_finite() {
        Ok(l)
    } else {
        Err(Error::NonFinite("finite-difference loss evaluation".into()))
    }
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("finite-difference step {h} must be positive")))
    }
}

/// Central-difference gradient of the mean loss for every parameter.
pub fn fd_gradient(net: &Network, data: &[Sample], h: f64) -> Result<Vec<Tensor>> {
    check_step(h)?;
    let mut work = net.clone();
    net.param_ids()
        .into_iter()
        .map(|id| {
            let theta = net.param(id).data().to_vec();
            let mut g = vec![0.0; theta.len()];
            for i in 0..theta.len() {
                work.param_mut(id).data_mut()[i] = theta[i] + h;
                let fp = checked_loss(&work, data)?;
                work.param_mut(id).data_mut()[i] = theta[i] - h;
                let fm = checked_loss(&work, data)?;
                work.param_mut(id).data_mut()[i] = theta[i];
                g[i] = (fp - fm) / (2.0 * h);
            }
            Tensor::new(net.param(id).extents(), g)
        })
        .collect()
}

/// Central-difference Hessian block of the mean loss w.r.t. one parameter:
/// central differences of central-difference gradient columns with the
/// same step, which is the four-point stencil, taken symmetric.
pub fn fd_hessian_block(net: &Network, data: &[Sample], id: ParamId, h: f64, cap: usize) -> Result<Tensor> {
    check_step(h)?;
    let theta = net.param(id).data().to_vec();
    let n = theta.len();
    if n > cap {
        return Err(Error::CapExceeded { what: format!("finite-difference block {}", net.param_name(id)), size: n, cap });
    }
    let mut work = net.clone();
    let mut eval = |i: usize, si: f64, j: usize, sj: f64| -> Result<f64> {
        let p = work.param_mut(id).data_mut();
        p[i] += si * h;
        p[j] += sj * h;
        let v = checked_loss(&work, data);
        let p = work.param_mut(id).data_mut();
        p[i] = theta[i];
        p[j] = theta[j];
        v
    };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = (eval(i, 1.0, j, 1.0)? - eval(i, 1.0, j, -1.0)? - eval(i, -1.0, j, 1.0)? + eval(i, -1.0, j, -1.0)?)
                / (4.0 * h * h);
            out[i + n * j] = v;
            out[j + n * i] = v;
        }
    }
    Tensor::new(&[n, n], out)
}

/// Column `i` is `mvp(e_i)`.
pub fn assemble_explicit_from_mvp(mvp: &dyn Fn(&[f64]) -> Vec<f64>, dim: usize) -> Tensor {
    crate::layers::assemble(dim, mvp)
}

fn symmetric_eigenvalues(m: &Tensor) -> Result<Vec<f64>> {
    let n = m.expect_square("eigenvalues")?;
    let defect = symmetry_defect(m)?;
    if defect > 1e-8 * m.max_abs().max(1.0) {
        return Err(Error::Asymmetric { context: "eigenvalues", defect });
    }
    let s = m.symmetrized()?;
    let mat = nalgebra::DMatrix::from_column_slice(n, n, s.data());
    Ok(mat.symmetric_eigen().eigenvalues.iter().copied().collect())
}

pub fn min_eigenvalue(m: &Tensor) -> Result<f64> {
    Ok(symmetric_eigenvalues(m)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// Number of eigenvalues exceeding `rel_tol` times the largest magnitude.
pub fn numerical_rank(m: &Tensor, rel_tol: f64) -> Result<usize> {
    let ev = symmetric_eigenvalues(m)?;
    let top = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if top == 0.0 {
        return Ok(0);
    }
    Ok(ev.iter().filter(|v| v.abs() > rel_tol * top).count())
}

/// Normwise relative error `max|a - b| / max|b|`; absolute when `b = 0`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.max_abs_diff(b);
    let s = b.max_abs();
    if s == 0.0 {
        d
    } else {
        d / s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationRow {
    pub check: String,
    pub block: String,
    pub kind: CurvatureKind,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub min_eig: Option<f64>,
    pub symmetry_defect: f64,
    /// Bound on the relative error, or on `-min_eig` for definiteness rows.
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerificationReport {
    pub rows: Vec<VerificationRow>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.pass).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("check,block,kind,max_abs_err,max_rel_err,min_eig,symmetry_defect,tolerance,pass\n");
        for r in &self.rows {
            let me = r.min_eig.map_or(String::new(), |v| format!("{v:e}"));
            let _ = writeln!(
                s,
                "{},{},{},{:e},{:e},{},{:e},{:e},{}",
                r.check, r.block, r.kind, r.max_abs_err, r.max_rel_err, me, r.symmetry_defect, r.tolerance, r.pass
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<5} {:<16} {:<14} {:<14} rel {:.3e} abs {:.3e}{}",
                if r.pass { "PASS" } else { "FAIL" },
                r.check,
                r.block,
                r.kind.name(),
                r.max_rel_err,
                r.max_abs_err,
                r.min_eig.map_or(String::new(), |v| format!(" min_eig {v:.3e}"))
            );
        }
        let _ = writeln!(s, "{} checks, {} failed", self.rows.len(), self.failures());
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("verification.csv"), self.to_csv())?;
        let mut f = std::fs::File::create(dir.join("verification.txt"))?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyTolerances {
    pub fd_rel: f64,
    pub mvp_rel: f64,
    pub ggn_rel: f64,
    pub min_eig: f64,
    pub hess_step: f64,
    pub fd_cap: usize,
}

impl Default for VerifyTolerances {
    fn default() -> Self {
        VerifyTolerances {
            fd_rel: 1e-4,
            mvp_rel: 1e-10,
            ggn_rel: 1e-10,
            min_eig: -1e-8,
            hess_step: DEFAULT_HESS_STEP,
            fd_cap: DEFAULT_FD_CAP,
        }
    }
}

/// Runs every oracle check on `net` over `data`: exact blocks against
/// finite differences, matrix-free against explicit for every kind,
/// definiteness of the PSD kinds and, for piecewise-linear nets, GGN
/// against the exact Hessian.
pub fn verification_suite(net: &Network, data: &[Sample], tol: &VerifyTolerances) -> Result<VerificationReport> {
    let mut trace = forward_pass(net, data)?;
    gradient_pass(net, &mut trace)?;
    let mut rows = Vec::new();
    let exact = exact_blocks(net, &trace, CurvatureKind::HessianExact)?;
    for b in &exact {
        let m = b.to_dense();
        let fd = fd_hessian_block(net, data, b.id, tol.hess_step, tol.fd_cap)?;
        let rel = relative_error(&m, &fd);
        rows.push(VerificationRow {
            check: "fd_exact".into(),
            block: net.param_name(b.id),
            kind: CurvatureKind::HessianExact,
            max_abs_err: m.max_abs_diff(&fd),
            max_rel_err: rel,
            min_eig: None,
            symmetry_defect: symmetry_defect(&m)?,
            tolerance: tol.fd_rel,
            pass: rel <= tol.fd_rel,
        });
    }
    let piecewise = net.layers.iter().all(crate::layers::Layer::is_piecewise_linear);
    for kind in CurvatureKind::ALL {
        let blocks = exact_blocks(net, &trace, kind)?;
        for (b, e) in blocks.iter().zip(&exact) {
            let m = b.to_dense();
            let op = curvature_operator(net, &trace, kind, b.id)?;
            let a = assemble_explicit_from_mvp(&*op, b.dim());
            let rel = relative_error(&a, &m);
            let sym = symmetry_defect(&m)?;
            rows.push(VerificationRow {
                check: "mvp_explicit".into(),
                block: net.param_name(b.id),
                kind,
                max_abs_err: a.max_abs_diff(&m),
                max_rel_err: rel,
                min_eig: None,
                symmetry_defect: sym,
                tolerance: tol.mvp_rel,
                pass: rel <= tol.mvp_rel && sym <= 1e-10 * m.max_abs().max(1.0),
            });
            if kind.is_psd() {
                let ev = min_eigenvalue(&m)?;
                rows.push(VerificationRow {
                    check: "min_eig".into(),
                    block: net.param_name(b.id),
                    kind,
                    max_abs_err: 0.0,
                    max_rel_err: 0.0,
                    min_eig: Some(ev),
                    symmetry_defect: sym,
                    tolerance: -tol.min_eig,
                    pass: ev >= tol.min_eig,
                });
            }
            if piecewise && kind == CurvatureKind::Ggn {
                let h = e.to_dense();
                let rel = relative_error(&m, &h);
                rows.push(VerificationRow {
                    check: "ggn_hessian".into(),
                    block: net.param_name(b.id),
                    kind,
                    max_abs_err: m.max_abs_diff(&h),
                    max_rel_err: rel,
                    min_eig: None,
                    symmetry_defect: sym,
                    tolerance: tol.ggn_rel,
                    pass: rel <= tol.ggn_rel,
                });
            }
        }
    }
    Ok(VerificationReport { rows })
}
