//! Hierarchical zoom-in object localization driven by a deep Q-learning agent.
//!
//! An agent descends a fixed five-child region hierarchy over an image,
//! choosing between zooming into a subregion and triggering a detection. The
//! Q-function is a small from-scratch MLP trained with experience replay,
//! epsilon-greedy exploration, and forced triggers; evaluation ranks every
//! analyzed region by its trigger Q-value into precision-recall curves
//! against random and oracle baselines.

pub mod cli;
pub mod data;
pub mod environment;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod pnm;
pub mod qlearn;
pub mod replay;
pub mod trainer;

pub use error::{Error, Result};
