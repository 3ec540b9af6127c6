//! Simulation and optimization toolkit for federated edge learning with
//! clustered data sharing.

pub mod daca;
pub mod datagen;
pub mod error;
pub mod fedsim;
pub mod hetero;
pub mod jfvo;
pub mod rng;
pub mod roundsfit;
pub mod theory;
pub mod wireless;

pub use daca::{ClusterAssignment, ConstrainedGraph};
pub use error::{Error, ErrorCategory, Result};
pub use hetero::{ClientLabelStats, EmdWeighting, HeterogeneityReport, LabelDistribution};
pub use jfvo::SharingPlan;
