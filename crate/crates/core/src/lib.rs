// Negated comparisons deliberately treat NaN as failing the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod gradcheck_suite;
pub mod losses;
pub mod memory_bank;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use data::{Dataset, DataSpec, Split};
pub use error::{Error, Result};
pub use memory_bank::{DistributionMode, MemoryBank, UpdateStrategy};
pub use nn::{Model, ModelSpec};
pub use tensor::Tensor;
pub use train::{Checkpoint, Config};
