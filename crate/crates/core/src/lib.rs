#![no_std]
// Negated comparisons are how validation rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
pub mod datasets;
pub mod dsp;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod real;
pub mod tensor;
pub mod transfer;
