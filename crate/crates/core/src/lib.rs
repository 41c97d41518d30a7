//! Clifford group equivariant networks over a learnable symmetric metric.
//!
//! The metric `M` is diagonalized as `M = U diag(λ) U^T`; inputs are moved
//! into the eigenbasis, processed by layers built on the diagonal algebra
//! `Cl(λ)`, and moved back.

pub mod algebra;
pub mod autodiff;
pub mod metric;
pub mod layers;
pub mod model;
pub mod tasks;
pub mod properties;
