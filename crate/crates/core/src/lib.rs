//! Equivalent-circuit power flow for positive-sequence and three-phase
//! networks.
//!
//! Networks are written as current/voltage relations in rectangular
//! coordinates and solved by Newton-Raphson with step limiting, with
//! optional homotopy continuation for hard cases.

pub mod linear;
pub mod network;
pub mod stamps;
pub mod state;
pub mod units;
pub mod nr;
pub mod homotopy;
pub mod solver;
pub mod case_io;
pub mod analyses;
pub mod cli;
