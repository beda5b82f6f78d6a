//! Class-incremental learning by feature expansion and rehearsal-CutMix
//! compression.
//!
//! Each incremental step trains an expanded two-extractor network on the new
//! task plus a rehearsal memory, then distills it back into a single
//! extractor of fixed size using CutMix partners drawn from that memory.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod mixaug;
pub mod nn;
pub mod optim;
pub mod protocol;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{BnMode, Graph, Var};
pub use tensor::{Scalar, Tensor};
