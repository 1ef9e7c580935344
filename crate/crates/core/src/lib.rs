//! Neural transducer toolkit: reverse-mode autodiff, transducer losses,
//! prediction networks, a streaming Conformer encoder, greedy decoding and a
//! small training harness.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
