//! SNNergy: a hierarchical audio-visual spiking transformer built around linear
//! cross-modal query-key attention, with BPTT training and a cost profiler.
//!
//! Every spiking tensor is laid out `[T, B, C, ...]` with time leading.

pub mod attention;
pub mod cmqka;
pub mod data_io;
pub mod error;
pub mod model;
pub mod nn;
pub mod profiler;
pub mod spds;
pub mod spike;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use spike::{LifParams, SpikeFn, SpikeTensor};
pub use tensor::{Tape, Tensor, Var};
