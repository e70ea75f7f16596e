//! Simulator of a ledger-backed voltage-regulation market on radial feeders.
//!
//! Zonal agents watch their part of the feeder, buy voltage support from
//! neighbours through a call-for-proposals protocol, and settle on a
//! replicated hash-chained ledger.

pub mod agent;
pub mod contract;
pub mod grid;
pub mod harness;
pub mod ledger;
