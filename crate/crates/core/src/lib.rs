//! Simulation and finite-key analysis of a fully connected
//! measurement-device-independent QKD network whose users share a
//! frequency comb instead of per-link lasers.
//!
//! Modules follow the signal path: [`comb`] plans and stabilizes the
//! carriers, [`photonics`] encodes and transports pulses, [`interference`]
//! models the hub's Bell-state analyzer, [`protocol`] turns tallies into
//! secure key, [`control`] compensates drift, [`netplan`] schedules user
//! pairs and [`engine`] drives whole runs. [`calibration`] holds the
//! reference operating point.

// `!(x > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod comb;
pub mod control;
pub mod engine;
pub mod interference;
pub mod link;
pub mod netplan;
pub mod photonics;
pub mod protocol;
