//! Simulation harness for unlearning in federated online learning to rank.
//!
//! Clients learn a linear ranker from simulated clicks with PDGD, a server
//! aggregates their updates, some clients poison the federation, and five
//! unlearning strategies try to remove them again. The `experiment` module
//! wires everything into configuration-driven runs that emit CSV/JSON logs.

pub mod attacks;
pub mod click;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod ranker;
pub mod rng;
pub mod unlearning;

pub use error::{Error, Result};
