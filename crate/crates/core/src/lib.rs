//! Visual-metonymy dataset factory and benchmark harness.
//!
//! Concepts flow through [`catalog`] filtering, the three-stage generator in
//! [`pipeline`], human review via [`annotation`], distractor construction in
//! [`distractor`] and finally multiple-choice evaluation in [`benchmark`].
//! Every model call goes through [`gateway`]; everything persisted lives in a
//! [`store::CorpusStore`].
//!
//! Numeric helpers in [`scalar`] and the crossover analysis in [`catalog`] are
//! generic over `num_traits::Float`; retention and accuracy rates are exact
//! `Ratio<u64>`.

pub mod annotation;
pub mod benchmark;
pub mod catalog;
pub mod distractor;
pub mod gateway;
pub mod graph;
pub mod pipeline;
pub mod scalar;
pub mod store;

/// Unit-normalized embedding vector as returned by the gateway.
pub type Embedding = Vec<f32>;

pub type CrossoverReport64 = catalog::CrossoverReport<f64>;
pub type CrossoverReport32 = catalog::CrossoverReport<f32>;
pub type DensityCurve64 = catalog::DensityCurve<f64>;
/// Exact rate used for retention and accuracy.
pub type Rate = num_rational::Ratio<u64>;
