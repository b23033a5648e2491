//! One module per CLI verb.

pub mod complexity;
pub mod eval;
pub mod generate;
pub mod sweep;
pub mod train;
