//! Collaborative filtering over frozen item text embeddings with a two-phase
//! schedule: users are first aligned to the item contextual space (item
//! tutoring), then an MLP adapter refines items under frozen users (user
//! tutoring). Includes preprocessing, propagation, losses, training and
//! full-ranking evaluation for warm and cold-start items.

pub mod adapter;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod objective;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
