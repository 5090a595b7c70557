//! Desk-scale simulator of vehicle selection for asynchronous federated
//! learning (AFL) at a roadside unit (RSU).
//!
//! A fleet of vehicles drives through the coverage of an RSU. Each slot, a
//! DDPG agent looks at per-vehicle transmission rates, compute resources and
//! positions, and emits selection probabilities. Selected vehicles train
//! local models on private data and upload them asynchronously; the RSU folds
//! each arrival into the global model, discounted by staleness weights
//! derived from the vehicle's training and upload delays.
//!
//! The crate is organized around the moving parts of that loop:
//!
//! - [`nn`] — minimal dense-network engine (exact analytic gradients, flat
//!   parameter vectors, soft updates); hosts every trainable model.
//! - [`env`] — vehicular channel and kinematics: autoregressive Rayleigh-style
//!   fading, Doppler-derived correlation, Shannon rates, delay models.
//! - [`data`] — MNIST IDX ingestion, synthetic blob generation, per-vehicle
//!   partitioning, bad-node injection.
//! - [`fl`] — local training, staleness weights, asynchronous aggregation and
//!   the synchronous baseline.
//! - [`agent`] — DDPG machinery: actor/critic, target networks, replay
//!   buffer, Ornstein-Uhlenbeck exploration.
//! - [`orchestrator`] — the training and testing loops that tie the above
//!   together, plus reward computation.
//! - [`config`] / [`metrics`] / [`cli`] — experiment harness: JSON
//!   configuration, CSV/JSON metrics persistence, subcommands.
//!
//! See the crate examples for runnable entry points into each capability,
//! and the `aflsim` binary for the experiment CLI.

pub mod agent;
pub mod cli;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod fl;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod seeds;

pub use config::SimConfig;
pub use error::{Error, Result};
