//! Coarse-to-fine license plate detection.
//!
//! A first stage predicts vehicles together with a has-plate probability and a
//! coarse plate box expressed relative to the vehicle. The coarse box is
//! expanded into a local region, the regions of every image are warped into a
//! batch of fixed-size feature patches, and a second stage refines each plate
//! into a horizontal box plus four corners.

pub mod geometry;
pub mod priors;
pub mod codec;
pub mod label;
pub mod losses;
pub mod lrea;
pub mod model;
pub mod optim;
pub mod synth;
pub mod dataset;
pub mod metrics;
pub mod pipeline;
pub mod eval;
pub mod audit;
pub mod config;
pub mod commands;
