//! Pathweaver: a dialogue-path planner that decodes goal-directed
//! action/topic paths with a pair of bidirectional transformer decoders and a
//! forward-focused fusion of their states, then hands each planned step to a
//! response generator.
//!
//! The crate is self-contained: tensors, autodiff, the transformer stacks,
//! training, constrained decoding, evaluation metrics, and the synthetic
//! corpus generator are all implemented here on plain `Vec`s. Everything
//! stochastic is seeded, so corpora, training runs, and checkpoints
//! reproduce bit-for-bit.

pub mod config;
pub mod corpus;
pub mod decoding;
pub mod encoder;
pub mod eval;
pub mod metrics;
pub mod num;
pub mod planner;
pub mod responder;
pub mod training;
