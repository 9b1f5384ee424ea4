//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! The op inventory is exactly what a 1-D conditional U-Net with a
//! Transformer bottleneck needs: convolutions, batch/layer norm, linear
//! layers, multi-head attention, and the elementwise/reduction ops used by
//! its training losses. Everything runs in double precision so that gradients
//! can be checked against central finite differences.
//!
//! ```
//! use vimu_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(&Tensor::scalar(3.0));
//! let y = g.square(x);
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```

pub mod adam;
pub mod checkpoint;
mod error;
mod graph;
mod ops;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{AutodiffError, Result};
pub use graph::{AttentionProjections, Graph, NormMode, Var};
pub use tensor::Tensor;
