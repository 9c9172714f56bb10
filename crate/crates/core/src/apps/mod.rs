//! The three building applications. Each one is a bus service with its own
//! state, fed by the shared `readings.*` and `occupancy.*` topics.
//!
//! * [`energy`]: thermostat with absence setback, publishes `actuation.<room>`.
//! * [`security`]: door rules, publishes `alerts`.
//! * [`comfort`]: occupant votes to a preferred-temperature recommendation.

pub mod comfort;
pub mod energy;
pub mod security;
pub mod thermostat;

use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::bus::BusError;

pub use thermostat::{occupancy_setback, thermostat_step, Mode, ThermostatConfig, ThermostatError, ThermostatState};

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Thermostat(#[from] ThermostatError),
}

pub(crate) fn decode<T: DeserializeOwned>(v: &Value) -> Result<T, String> {
    serde_json::from_value(v.clone()).map_err(|e| format!("BadParams: {e}"))
}

pub(crate) fn encode<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable app types")
}
