//! Landmark-guided spatio-temporal graph features for word-level lipreading.

pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod frontend;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod graphs;
pub mod io;
pub mod kernels;
pub mod landmarks;
pub mod model;
pub mod nn;
pub mod params;
pub mod stmgcn;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor;
