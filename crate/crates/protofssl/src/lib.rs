//! Deterministic simulator for prototype-based federated semi-supervised
//! learning.
//!
//! Clients hold a small labeled set and a larger unlabeled set. Each round a
//! server broadcasts global weights to a sampled set of clients; clients
//! train a prototypical embedding network locally, pseudo-labeling their
//! unlabeled data with prototypes shared by helper clients, and return
//! updated weights plus fresh per-class prototypes. The crate also ships an
//! analytical model of per-client computation and communication costs for
//! this protocol and the weight-sharing baselines it is usually compared
//! against.

pub mod cost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod numerics;
pub mod protonet;

pub use error::{Error, Result};
