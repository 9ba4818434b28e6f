//! Comparison models: an autoregressive next-step simulator and a minimal
//! E(n)-equivariant layer used to demonstrate the planarity constraint.

pub mod autoregressive;
pub mod egnn;
