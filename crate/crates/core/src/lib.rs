pub mod data;
pub mod distill;
pub mod fusion;
pub mod model;
pub mod pruning;
pub mod reporting;
pub mod signals;
pub mod tensor;
pub mod train;
