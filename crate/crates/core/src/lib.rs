//! Sampling robot configurations that satisfy composed pose constraints, using
//! learned energy models over end-effector poses together with the baselines and
//! metrics needed to compare against them.

pub mod baselines;
pub mod constraints;
pub mod diff;
pub mod io;
pub mod kin;
pub mod lie;
pub mod metrics;
pub mod models;
pub mod seeds;
pub mod shapes;
pub mod sample;
pub mod solve;
pub mod tasks;
pub mod train;
