//! Semi-supervised node classification with an explicit pairwise Markov
//! random field on top of a GCN backbone.
//!
//! The model scores a labeling `y` of all nodes as
//! `Σ_i s_i(y_i) + Σ_{(j,k)∈E} α_jk · K(y_j, y_k)`, where `s` comes from a
//! two-layer GCN and `K` is a shared symmetric compatibility matrix. It is
//! trained by EM: a mean-field E-step over unlabeled nodes and an M-step
//! that ascends a star-shaped piecewise surrogate of the expected complete
//! log-likelihood.

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod mrf;
pub mod numerics;
pub mod oracle;
pub mod par;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
