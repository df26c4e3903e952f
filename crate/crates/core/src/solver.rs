//! Conjugate gradients on a matrix-free symmetric operator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::dot;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CgConfig {
    pub max_iter: usize,
    /// Stop when `‖b - A x‖ / ‖b‖` falls to this value.
    pub rel_tol: f64,
    pub abort_on_negative_curvature: bool,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig { max_iter: 50, rel_tol: 0.1, abort_on_negative_curvature: true }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("cg max_iter must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::InvalidArgument(format!("cg rel_tol {} must be positive", self.rel_tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CgStatus {
    Converged,
    MaxIter,
    /// `pᵀ A p <= 0` was met and the solve stopped at the current iterate.
    NegativeCurvature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iters: usize,
    pub rel_residual: f64,
    pub status: CgStatus,
}

/// Solves `A x = b` from `x = 0`.
pub fn cg_solve(mvp: &dyn Fn(&[f64]) -> Vec<f64>, b: &[f64], cfg: &CgConfig) -> Result<CgResult> {
    cfg.validate()?;
    if let Some(bad) = b.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("cg right-hand side contains {bad}")));
    }
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut rs = dot(&r, &r);
    let b_norm = rs.sqrt();
    if b_norm == 0.0 {
        return Ok(CgResult { x, iters: 0, rel_residual: 0.0, status: CgStatus::Converged });
    }
    let mut p = r.clone();
    let mut rel = 1.0;
    for k in 0..cfg.max_iter {
        let ap = mvp(&p);
        if ap.len() != n {
            return Err(Error::ShapeMismatch { context: "cg operator output", expected: vec![n], found: vec![ap.len()] });
        }
        let pap = dot(&p, &ap);
        if !pap.is_finite() {
            return Err(Error::NonFinite(format!("cg curvature pᵀAp = {pap} at iteration {k}")));
        }
        if pap <= 0.0 && (cfg.abort_on_negative_curvature || pap == 0.0) {
            return Ok(CgResult { x, iters: k, rel_residual: rel, status: CgStatus::NegativeCurvature });
        }
        let alpha = rs / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        rel = rs_new.sqrt() / b_norm;
        if !rel.is_finite() {
            return Err(Error::NonFinite(format!("cg residual at iteration {k}")));
        }
        if rel <= cfg.rel_tol {
            return Ok(CgResult { x, iters: k + 1, rel_residual: rel, status: CgStatus::Converged });
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Ok(CgResult { x, iters: cfg.max_iter, rel_residual: rel, status: CgStatus::MaxIter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul_slices, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tight(max_iter: usize) -> CgConfig {
        CgConfig { max_iter, rel_tol: 1e-14, abort_on_negative_curvature: true }
    }

    fn random_spd(seed: u64, n: usize) -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor::new(&[n, n], (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        m.t_matmul(&m).unwrap().add(&Tensor::identity(n).scale(0.5)).unwrap()
    }

    fn apply(a: &Tensor) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
        move |v| matmul_slices(a.data(), a.rows(), a.rows(), v, 1)
    }

    #[test]
    fn scaled_identity_in_one_iteration() {
        let r = cg_solve(&|v: &[f64]| v.iter().map(|x| 2.0 * x).collect(), &[2.0, 4.0], &tight(10)).unwrap();
        assert_eq!(r.x, vec![1.0, 2.0]);
        assert_eq!(r.iters, 1);
        assert_eq!(r.status, CgStatus::Converged);
    }

    #[test]
    fn identity_returns_rhs_exactly() {
        let b = [0.3, -1.7, 2.9e-3];
        let r = cg_solve(&|v: &[f64]| v.to_vec(), &b, &CgConfig::default()).unwrap();
        assert_eq!(r.x, b.to_vec());
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let r = cg_solve(&|v: &[f64]| v.to_vec(), &[0.0, 0.0], &CgConfig::default()).unwrap();
        assert_eq!((r.x, r.iters), (vec![0.0, 0.0], 0));
    }

    #[test]
    fn matches_direct_solve() {
        for seed in 0..5 {
            let a = random_spd(seed, 5);
            let b = [1.0, -2.0, 0.5, 3.0, -0.25];
            let r = cg_solve(&apply(&a), &b, &tight(50)).unwrap();
            let lu = nalgebra::DMatrix::from_column_slice(5, 5, a.data()).lu();
            let x = lu.solve(&nalgebra::DVector::from_column_slice(&b)).unwrap();
            for (p, q) in r.x.iter().zip(x.iter()) {
                assert!((p - q).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn negative_curvature_returns_current_iterate() {
        let neg = |v: &[f64]| vec![-v[0], v[1]];
        let r = cg_solve(&neg, &[1.0, 0.0], &tight(10)).unwrap();
        assert_eq!(r.status, CgStatus::NegativeCurvature);
        assert_eq!(r.x, vec![0.0, 0.0]);
        let cont = CgConfig { abort_on_negative_curvature: false, ..tight(10) };
        let r = cg_solve(&neg, &[1.0, 0.0], &cont).unwrap();
        assert_eq!(r.x, vec![-1.0, 0.0]);
    }

    #[test]
    fn max_iter_is_reported() {
        let a = random_spd(3, 6);
        let r = cg_solve(&apply(&a), &[1.0; 6], &tight(2)).unwrap();
        assert_eq!((r.iters, r.status), (2, CgStatus::MaxIter));
        assert!(r.rel_residual > 1e-14);
    }

    #[test]
    fn invalid_config_and_inputs() {
        let id = |v: &[f64]| v.to_vec();
        assert!(cg_solve(&id, &[1.0], &CgConfig { max_iter: 0, ..CgConfig::default() }).is_err());
        assert!(cg_solve(&id, &[1.0], &CgConfig { rel_tol: 0.0, ..CgConfig::default() }).is_err());
        assert!(cg_solve(&id, &[f64::NAN], &CgConfig::default()).is_err());
        assert!(cg_solve(&|_: &[f64]| vec![1.0, 2.0], &[1.0], &CgConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn a_norm_error_is_monotone(seed in 0u64..1000, n in 2usize..8) {
            let a = random_spd(seed, n);
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
            let lu = nalgebra::DMatrix::from_column_slice(n, n, a.data()).lu();
            let xs = lu.solve(&nalgebra::DVector::from_column_slice(&b)).unwrap();
            let mut last = f64::INFINITY;
            for k in 1..=n {
                let r = cg_solve(&apply(&a), &b, &tight(k)).unwrap();
                let e: Vec<f64> = r.x.iter().zip(xs.iter()).map(|(p, q)| p - q).collect();
                let err = dot(&e, &apply(&a)(&e)).sqrt();
                prop_assert!(err <= last * (1.0 + 1e-9) + 1e-12);
                last = err;
                if r.status == CgStatus::Converged { break; }
            }
        }
    }
}
