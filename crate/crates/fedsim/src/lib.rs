//! Deterministic federated-learning simulator.
//!
//! The crate is organised around a minimal dense neural-network core
//! ([`nncore`]), encoder/classifier model composition ([`model`]),
//! similarity-weighted aggregation mathematics ([`simagg`]), feature-space
//! client clustering ([`clustering`]), dataset ingestion and synthetic
//! generators ([`data`]), the federated round state machines
//! ([`protocols`]), and the experiment runner ([`orchestrator`]).

pub mod clustering;
pub mod data;
pub mod error;
pub mod model;
pub mod nncore;
pub mod orchestrator;
pub mod protocols;
pub mod simagg;

pub use error::{Error, Result};
