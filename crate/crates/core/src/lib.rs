//! Hessian backpropagation for feedforward networks.
//!
//! Extends gradient backpropagation with a second backward pass that
//! propagates curvature matrices through local modules, yielding
//! block-diagonal approximations of the parameter Hessian: exact Hessian
//! blocks, the generalized Gauss-Newton matrix, and the positive-curvature
//! Hessian. Blocks are available either materialized or as matrix-vector
//! products, and drive a conjugate-gradient Newton-style optimizer.

pub mod curvature;
pub mod data;
pub mod engine;
pub mod error;
pub mod layers;
pub mod network;
pub mod optim;
pub mod oracle;
pub mod solver;
pub mod tensor;
pub mod train;

pub use curvature::{concavity_transform, CurvatureKind, CurvatureMatrix, Mvp};
pub use engine::{BatchMode, CurvatureBlock};
pub use error::{Error, Result};
pub use network::{LayerSpec, Network, NetworkSpec, ParamId, Sample};
pub use tensor::{kron, sym_check, unfold, ConvGeometry, Shape, Tensor};
