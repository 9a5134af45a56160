//! Reference engine for the mLSTM cell with exponential and sigmoid input
//! gates.
//!
//! The same cell is implemented four ways: a step recurrence, a fully
//! parallel quadratic form, a chunkwise-parallel form with materialized
//! states, and a tiled rendering of the chunkwise form with blocked loops.
//! Each has forward and (for the chunked forms) backward passes, and they are
//! cross-checked against each other. The [`perfmodel`] module carries the
//! analytical FLOP/byte/runtime model and [`transfer`] the gain analysis.

// Index loops mirror the math in the kernels; negated float comparisons
// deliberately reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod stability;
pub mod tensor;
pub mod gates;
pub mod recurrent;
pub mod parallel;
pub mod perfmodel;
pub mod chunkwise;
pub mod tiled;
pub mod gradcheck;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{
    make_inputs, make_inputs_with, max_abs_diff, Dims, FloatMode, GateInit, HeadView, MemoryState, Precision, Rng,
    SequenceInputs, StateMode, Tensor, Variant,
};
