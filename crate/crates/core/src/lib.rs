// Validation is written as `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod evalkit;
pub mod geoalign;
pub mod geometry;
pub mod optimizer;
pub mod pipeline;
pub mod semlib;
pub mod simworld;
pub mod wire;
