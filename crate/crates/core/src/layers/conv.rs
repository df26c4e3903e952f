use super::{Aux, HbpOutput, LayerCache, Module};
use crate::curvature::{CurvatureKind, CurvatureMatrix};
use crate::error::{Error, Result};
use crate::tensor::{kron, matmul_slices, unfold, ConvGeometry, Tensor};

/// 2-D convolution as matrix multiplication, `Z = W ⟦X⟧`.
///
/// `W` has shape `out_channels x (C*kh*kw)`, the input is a `[C, H*W]`
/// feature map and the output is `[out_channels, out_h*out_w]`. Bias is a
/// separate per-channel [`super::BiasAdd`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub geom: ConvGeometry,
    map: Vec<Option<usize>>,
}

impl Conv2d {
    pub fn new(weight: Tensor, geom: ConvGeometry) -> Result<Self> {
        weight.expect_rank(2, "conv weight")?;
        if weight.cols() != geom.patch_len() {
            return Err(Error::ShapeMismatch {
                context: "conv weight",
                expected: vec![weight.rows(), geom.patch_len()],
                found: weight.extents().to_vec(),
            });
        }
        let map = geom.unfold_map()?;
        Ok(Conv2d { weight, geom, map })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.rows()
    }

    fn unfolded(cache: &LayerCache) -> &Tensor {
        match &cache.aux {
            Aux::Unfolded(x) => x,
            _ => panic!("conv cache without unfolded input"),
        }
    }

    fn unfold_vec(&self, v: &[f64]) -> Vec<f64> {
        self.map.iter().map(|m| m.map_or(0.0, |i| v[i])).collect()
    }

    /// Transpose action of the unfold operator: scatter-add patches back.
    fn fold_vec(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.geom.input_len()];
        for (r, m) in self.map.iter().enumerate() {
            if let Some(i) = m {
                out[*i] += u[r];
            }
        }
        out
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Aux)> {
        let unf = unfold(x, &self.geom)?;
        let z = self.weight.matmul(&unf)?;
        Ok((z, Aux::Unfolded(unf)))
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["weight".into()]
    }

    fn jvp_input(&self, _cache: &LayerCache, v: &[f64]) -> Vec<f64> {
        let k = self.geom.patch_len();
        matmul_slices(self.weight.data(), self.out_channels(), k, &self.unfold_vec(v), self.geom.positions())
    }

    fn vjp_input(&self, _cache: &LayerCache, u: &[f64]) -> Vec<f64> {
        let (m, k, p) = (self.out_channels(), self.geom.patch_len(), self.geom.positions());
        let w = self.weight.data();
        // Wᵀ U, then fold
        let mut wtu = vec![0.0; k * p];
        for col in 0..p {
            let ucol = &u[m * col..m * (col + 1)];
            for r in 0..k {
                wtu[r + k * col] = w[m * r..m * (r + 1)].iter().zip(ucol).map(|(a, b)| a * b).sum();
            }
        }
        self.fold_vec(&wtu)
    }

    fn jvp_param(&self, cache: &LayerCache, _slot: usize, v: &[f64]) -> Vec<f64> {
        let unf = Self::unfolded(cache);
        matmul_slices(v, self.out_channels(), unf.rows(), unf.data(), unf.cols())
    }

    fn vjp_param(&self, cache: &LayerCache, _slot: usize, u: &[f64]) -> Vec<f64> {
        // U ⟦X⟧ᵀ
        let unf = Self::unfolded(cache);
        let (m, k, p) = (self.out_channels(), unf.rows(), unf.cols());
        let mut out = vec![0.0; m * k];
        for col in 0..p {
            for r in 0..k {
                let s = unf.data()[r + k * col];
                if s == 0.0 {
                    continue;
                }
                for i in 0..m {
                    out[i + m * r] += u[i + m * col] * s;
                }
            }
        }
        out
    }

    fn hbp_explicit(
        &self,
        cache: &LayerCache,
        h_out: &Tensor,
        _grad_out: &Tensor,
        _kind: CurvatureKind,
        need_input: bool,
    ) -> Result<HbpOutput> {
        let unf = Self::unfolded(cache);
        let p = self.geom.positions();
        // H W = (⟦X⟧ᵀ ⊗ I)ᵀ H Z (⟦X⟧ᵀ ⊗ I)
        let jw = kron(&unf.transpose()?, &Tensor::identity(self.out_channels()))?;
        let hw = h_out.sandwich(&jw)?;
        let input = if need_input {
            // H ⟦X⟧ = (I ⊗ W)ᵀ H Z (I ⊗ W), then through the unfold transpose
            let jx = kron(&Tensor::identity(p), &self.weight)?;
            let h_unf = h_out.sandwich(&jx)?;
            let n = self.geom.input_len();
            let mut hx = Tensor::zeros(&[n, n]);
            for (s, ms) in self.map.iter().enumerate() {
                let Some(b) = ms else { continue };
                for (r, mr) in self.map.iter().enumerate() {
                    if let Some(a) = mr {
                        let v = hx.at(*a, *b) + h_unf.at(r, s);
                        hx.set(*a, *b, v);
                    }
                }
            }
            Some(hx)
        } else {
            None
        };
        Ok(HbpOutput { input, params: vec![CurvatureMatrix::Dense(hw)] })
    }
}
