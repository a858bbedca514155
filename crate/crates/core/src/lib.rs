//! Offline reinforcement learning for ICU enteral nutrition dosing.
//!
//! The pipeline: synthetic or ingested patient records ([`data_model`],
//! [`cohort`]) are featurized into normalized trajectories ([`featurize`]) with
//! a composite clinical reward ([`reward`]). A dueling double deep Q-network
//! with a conservative penalty is trained offline ([`nn`], [`training`]) and
//! compared against baseline policies ([`policy`]) by off-policy evaluation
//! ([`ope`]). [`pipeline`] wires the stages to files.

pub mod action;
pub mod cohort;
pub mod data_model;
pub mod error;
pub mod featurize;
pub mod nn;
pub mod ope;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod training;

pub use error::{Error, Result};
