use super::{Aux, HbpOutput, LayerCache, Module};
use crate::curvature::CurvatureKind;
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Debug)]
pub enum Selection {
    /// A fixed map `π`: output `j` is input `indices[j]`.
    Fixed { indices: Vec<usize>, input_len: usize },
    /// Max-pooling over the windows of a `[C, H*W]` feature map; `π` is the
    /// per-window argmax of the forward pass, ties to the lowest index.
    MaxPool { geom: ConvGeometry },
}

/// `z = Π x` with `Π[j, π(j)] = 1`.
#[derive(Clone, Debug)]
pub struct IndexSelect {
    pub selection: Selection,
}

impl IndexSelect {
    pub fn fixed(indices: Vec<usize>, input_len: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= input_len) {
            return Err(Error::InvalidArgument(format!("index {bad} out of range for input of {input_len}")));
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty index selection".into()));
        }
        Ok(IndexSelect { selection: Selection::Fixed { indices, input_len } })
    }

    pub fn max_pool(geom: ConvGeometry) -> Result<Self> {
        geom.validate()?;
        if geom.pad != (0, 0) {
            return Err(Error::InvalidArgument("max pooling does not pad".into()));
        }
        Ok(IndexSelect { selection: Selection::MaxPool { geom } })
    }

    fn input_len(&self) -> usize {
        match &self.selection {
            Selection::Fixed { input_len, .. } => *input_len,
            Selection::MaxPool { geom } => geom.input_len(),
        }
    }

    fn map(cache: &LayerCache) -> &[usize] {
        match &cache.aux {
            Aux::Selection(m) => m,
            _ => panic!("index-select cache without selection map"),
        }
    }

    fn pool_map(x: &Tensor, g: &ConvGeometry) -> Vec<usize> {
        let (kh, kw) = g.kernel;
        let (oh, ow) = (g.out_height(), g.out_width());
        let c = g.channels;
        let mut map = vec![0; c * oh * ow];
        for py in 0..oh {
            for px in 0..ow {
                for ch in 0..c {
                    let mut best: Option<(usize, f64)> = None;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let pixel = (py * g.stride.0 + ki) * g.width + px * g.stride.1 + kj;
                            let idx = ch + c * pixel;
                            let v = x.data()[idx];
                            let better = match best {
                                None => true,
                                Some((bi, bv)) => v > bv || (v == bv && idx < bi),
                            };
                            if better {
                                best = Some((idx, v));
                            }
                        }
                    }
                    map[ch + c * (py * ow + px)] = best.expect("non-empty window").0;
                }
            }
        }
        map
    }
}

impl Module for IndexSelect {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Aux)> {
        if x.len() != self.input_len() {
            return Err(Error::ShapeMismatch {
                context: "index select input",
                expected: vec![self.input_len()],
                found: x.extents().to_vec(),
            });
        }
        let (map, extents) = match &self.selection {
            Selection::Fixed { indices, .. } => (indices.clone(), vec![indices.len()]),
            Selection::MaxPool { geom } => (Self::pool_map(x, geom), vec![geom.channels, geom.positions()]),
        };
        let z = map.iter().map(|&i| x.data()[i]).collect();
        Ok((Tensor::from_parts(extents, z), Aux::Selection(map)))
    }

    fn jvp_input(&self, cache: &LayerCache, v: &[f64]) -> Vec<f64> {
        Self::map(cache).iter().map(|&i| v[i]).collect()
    }

    fn vjp_input(&self, cache: &LayerCache, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; cache.input.len()];
        for (j, &i) in Self::map(cache).iter().enumerate() {
            out[i] += u[j];
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
        if !need_input {
            return Ok(HbpOutput { input: None, params: Vec::new() });
        }
        // H x = Πᵀ (H z) Π
        let map = Self::map(cache);
        let n = cache.input.len();
        let mut hx = Tensor::zeros(&[n, n]);
        for (b, &j) in map.iter().enumerate() {
            for (a, &i) in map.iter().enumerate() {
                let v = hx.at(i, j) + h_out.at(a, b);
                hx.set(i, j, v);
            }
        }
        Ok(HbpOutput { input: Some(hx), params: Vec::new() })
    }
}
