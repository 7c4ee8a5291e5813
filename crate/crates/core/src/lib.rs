//! Misspecified Bayesian quantile estimation with asymmetric Laplace working
//! likelihoods: exact grid posteriors, KL and affinity diagnostics, and a
//! replication harness for i.i.d. and fixed-design data.

// `!(x > 0.0)` is used on purpose so that NaN lands on the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::large_enum_variant)]

pub mod ald;
pub mod cli;
pub mod config;
pub mod design;
pub mod lab;
pub mod par;
pub mod posterior;
pub mod quadrature;
pub mod truth;
