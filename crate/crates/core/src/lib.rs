//! Desk-scale smart-building platform with simulated devices.
//!
//! Sensor nodes live in a simulated [`building`] and reach the hub over
//! simulated [`transport`] links. At the hub, readings flow through a
//! service [`bus`] into the time-series [`store`], the [`occupancy`] engine
//! and the three concurrent [`apps`]. The [`platform`] module wires these
//! together and drives the clock. The [`gateway`] module exposes them to
//! external clients over newline-delimited JSON.

pub mod apps;
pub mod building;
pub mod bus;
pub mod gateway;
pub mod occupancy;
pub mod platform;
pub mod report;
pub mod store;
pub mod transport;
pub mod types;
