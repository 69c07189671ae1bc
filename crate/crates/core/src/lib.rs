//! Lagrangian dual decision rules for multistage stochastic lot sizing:
//! restricted stagewise and nonanticipative duals, a trust-region cutting-plane
//! trainer, rolling-horizon policies, and statistical bound estimation.

pub mod affine;
pub mod basis;
pub mod cli;
pub mod dual_na;
pub mod dual_sw;
pub mod error;
pub mod evalstat;
pub mod exec;
pub mod instance;
pub mod master;
pub mod policy;
pub mod process;
pub mod solve;
pub mod verify;

pub use error::{Error, Result};
