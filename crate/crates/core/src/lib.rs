//! Self-supervised representations of market-order sequences.
//!
//! Windows of 50 consecutive market orders from one agent are embedded by a stacked LSTM
//! trained with a triplet loss, so that windows from the same agent land close together.
//! The embeddings are then clustered with K-means and the clusters characterized with
//! order-flow indicators. A synthetic multi-agent generator supplies labeled data.

pub mod cluster;
pub mod error;
pub mod eval;
pub mod features;
pub mod indicators;
pub mod nn;
pub mod order;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod train;
pub mod triplets;

pub use error::{Error, Result};
