//! Pump-scheduling testbed for a single-tank water distribution system.
//!
//! The crate bundles a closed-form pump/tank simulator ([`hydraulics`]),
//! minute-resolution operation logs ([`dataset`]), the reset-free episodic
//! environment with its two dense reward functions ([`env`]), a prioritized
//! replay buffer ([`replay`]), an offline Random Ensemble Mixture learner
//! ([`agent`]) and operation analytics ([`metrics`]). [`pipeline`] wires them
//! into the simulate / train / evaluate workflows used by the CLI.

pub mod action;
pub mod agent;
pub mod config;
pub mod dataset;
pub mod env;
pub mod hydraulics;
pub mod metrics;
pub mod pipeline;
pub mod replay;
pub mod synth;

pub use action::Action;
pub use config::AppConfig;

