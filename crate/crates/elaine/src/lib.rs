//! Attributed graph embedding via a coupled variational autoencoder.
//!
//! The pipeline: random-walk visit frequencies and social-role statistics are
//! assembled into per-node feature rows, a weight-tied encoder/decoder pair is
//! trained over edge minibatches (optionally reconstructing per-edge attribute
//! vectors through a coupled edge decoder), and the resulting latent means are
//! used as node embeddings for link prediction and node classification.

pub mod cli;
pub mod elaine;
pub mod error;
pub mod eval;
pub mod graph;
pub mod neural;
pub mod proximity;
pub mod roles;
