//! Batch-reactor control laboratory.
//!
//! A desk-scale testbed for economic batch process control: a nonlinear
//! exothermic batch reactor, a lifted linear time-varying model of one
//! batch, a two-layer (batch-to-batch + within-batch) Kalman-filter ILC
//! controller, a from-scratch PPO agent, and the training loops that let
//! the ILC informer teach the agent offline and hand over control online.

pub mod error;
pub mod experiment;
pub mod kf_ilc;
pub mod lifted;
pub mod ppo;
pub mod reactor;
pub mod rto;
pub mod solver;
pub mod training;

pub use error::{Error, Result};
