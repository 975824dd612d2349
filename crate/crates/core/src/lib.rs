//! Clone-based training of salient feature extractors.
//!
//! A single encoder network is evaluated on `Q` equivalent observations of the
//! same underlying content (its "clones" share every weight). The objective
//! rewards identical features across clones, pulls the feature distribution
//! toward an iid Laplacian prior through an empirical MMD² penalty and can
//! optionally train a decoder toward a shared clean target.
//!
//! The crate is self-contained: a small define-by-run reverse-mode
//! differentiation layer ([`graph`]), fully-connected networks ([`nn`]), the
//! objective terms ([`losses`]), Adam and the feature-noise schedule
//! ([`optim`]), a synthetic formant generator ([`toydata`]), the training loop
//! ([`trainer`]) and evaluation tooling ([`eval`]).

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod rbf;
pub mod rng;
pub mod tensor;
pub mod toydata;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, OpKind};
pub use rng::Rng;
pub use tensor::Tensor;
