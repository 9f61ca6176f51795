//! Reverse-mode autodiff laboratory for rectifier networks whose forward and
//! backward negative slopes differ.
//!
//! The crate contains a small tensor type, a tape-based graph engine, layer
//! kernels (convolution, batch norm, pooling, dense, cross-entropy), white
//! image toy problems, an activation-maximization engine, closed-form
//! rectified-Gaussian moments, gradient profiling and a desk-scale training
//! harness. The `proxygrad` binary exposes each experiment as a subcommand.

pub mod am;
pub mod analysis;
pub mod autograd;
pub mod cli;
pub mod error;
pub mod io;
pub mod layers;
pub mod netspec;
pub mod rng;
pub mod tensor;
pub mod toy;
pub mod train;

pub use autograd::{Bindings, Graph, Mode, NodeId, ParamId, Tape};
pub use error::{Error, Result};
pub use layers::ActivationRule;
pub use rng::{Rng, Stream};
pub use tensor::Tensor;
