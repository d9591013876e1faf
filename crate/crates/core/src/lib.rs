//! Mean-field laboratory for adversarial training of random ReLU-like deep
//! networks: exact piecewise-linear representations, closed-form loss bounds,
//! weight-variance dynamics, attacks, training loops and Monte-Carlo checks.

pub mod attack;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod net;
pub mod rng;
pub mod stats;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use net::{Arch, Network, NetworkConfig};
pub use theory::{Norm, NormPair};
