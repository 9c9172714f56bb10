use serde::{Deserialize, Serialize};

use crate::occupancy::OccupancyEstimate;
use crate::types::{ActuationCommand, CommandSource, Timestamp, MINUTE_MS};

pub const SAFE_SETPOINT_C: (f64, f64) = (5.0, 30.0);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ThermostatError {
    #[error("setpoint {0} outside the safe band")]
    UnsafeSetpoint(f64),
    #[error("hysteresis must be positive, got {0}")]
    BadHysteresis(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Comfort,
    Setback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermostatConfig {
    pub comfort_c: f64,
    pub setback_c: f64,
    pub hysteresis_c: f64,
    pub setback_delay_ms: i64,
    /// When false the mode stays pinned to Comfort.
    pub setback_enabled: bool,
}

impl Default for ThermostatConfig {
    fn default() -> Self {
        ThermostatConfig {
            comfort_c: 22.0,
            setback_c: 17.0,
            hysteresis_c: 0.5,
            setback_delay_ms: 10 * MINUTE_MS,
            setback_enabled: true,
        }
    }
}

impl ThermostatConfig {
    pub fn validate(&self) -> Result<(), ThermostatError> {
        for sp in [self.comfort_c, self.setback_c] {
            if !(SAFE_SETPOINT_C.0..=SAFE_SETPOINT_C.1).contains(&sp) {
                return Err(ThermostatError::UnsafeSetpoint(sp));
            }
        }
        if !(self.hysteresis_c > 0.0) {
            return Err(ThermostatError::BadHysteresis(self.hysteresis_c));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermostatState {
    pub room_id: String,
    /// Relay switched by this thermostat.
    pub heater_node: String,
    pub setpoint_c: f64,
    pub hysteresis_c: f64,
    pub heater_on: bool,
    pub mode: Mode,
}

impl ThermostatState {
    pub fn new(room_id: &str, heater_node: &str, cfg: &ThermostatConfig) -> Result<ThermostatState, ThermostatError> {
        cfg.validate()?;
        Ok(ThermostatState {
            room_id: room_id.to_string(),
            heater_node: heater_node.to_string(),
            setpoint_c: cfg.comfort_c,
            hysteresis_c: cfg.hysteresis_c,
            heater_on: false,
            mode: Mode::Comfort,
        })
    }
}

/// Bang-bang control with a dead band of `setpoint ± hysteresis`. A command
/// is emitted only when the heater state flips.
pub fn thermostat_step(st: &ThermostatState, temp_c: f64, at: Timestamp) -> (ThermostatState, Option<ActuationCommand>) {
    let want = if temp_c < st.setpoint_c - st.hysteresis_c {
        true
    } else if temp_c > st.setpoint_c + st.hysteresis_c {
        false
    } else {
        st.heater_on
    };
    let next = ThermostatState { heater_on: want, ..st.clone() };
    let cmd = (want != st.heater_on).then(|| ActuationCommand {
        at,
        node_id: st.heater_node.clone(),
        on: want,
        source: CommandSource::Auto,
    });
    (next, cmd)
}

/// Occupied rooms return to Comfort at once; rooms empty for at least the
/// configured delay drop to Setback.
pub fn occupancy_setback(
    st: &ThermostatState,
    est: &OccupancyEstimate,
    absent_for_ms: i64,
    cfg: &ThermostatConfig,
) -> ThermostatState {
    let mut next = st.clone();
    if est.count > 0 {
        next.mode = Mode::Comfort;
        next.setpoint_c = cfg.comfort_c;
    } else if cfg.setback_enabled && absent_for_ms >= cfg.setback_delay_ms {
        next.mode = Mode::Setback;
        next.setpoint_c = cfg.setback_c;
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occupancy::Confidence;
    use std::collections::BTreeSet;

    fn st(on: bool) -> ThermostatState {
        ThermostatState { heater_on: on, ..ThermostatState::new("lab", "h1", &ThermostatConfig::default()).unwrap() }
    }

    fn est(count: u32) -> OccupancyEstimate {
        OccupancyEstimate {
            room_id: "lab".into(),
            at: Timestamp(0),
            count,
            known_macs: BTreeSet::new(),
            confidence: Confidence::High,
        }
    }

    #[test]
    fn band_edges() {
        let (s, c) = thermostat_step(&st(false), 21.4, Timestamp(5));
        assert!(s.heater_on);
        let c = c.unwrap();
        assert!(c.on && c.source == CommandSource::Auto && c.node_id == "h1" && c.at == Timestamp(5));

        let (s, c) = thermostat_step(&st(true), 22.6, Timestamp(0));
        assert!(!s.heater_on && c.is_some_and(|c| !c.on));

        let (s, c) = thermostat_step(&st(true), 22.0, Timestamp(0));
        assert!(s.heater_on && c.is_none());
        // Exactly on the edge stays put.
        assert!(thermostat_step(&st(false), 21.5, Timestamp(0)).1.is_none());
        assert!(thermostat_step(&st(true), 22.5, Timestamp(0)).1.is_none());
    }

    #[test]
    fn setback_rules() {
        let cfg = ThermostatConfig::default();
        let s = occupancy_setback(&st(false), &est(0), 15 * MINUTE_MS, &cfg);
        assert_eq!((s.mode, s.setpoint_c), (Mode::Setback, 17.0));
        let back = occupancy_setback(&s, &est(1), 0, &cfg);
        assert_eq!((back.mode, back.setpoint_c), (Mode::Comfort, 22.0));
        let s = occupancy_setback(&st(false), &est(0), 5 * MINUTE_MS, &cfg);
        assert_eq!(s.mode, Mode::Comfort);
        let pinned = ThermostatConfig { setback_enabled: false, ..cfg };
        assert_eq!(occupancy_setback(&st(false), &est(0), 60 * MINUTE_MS, &pinned).mode, Mode::Comfort);
    }

    #[test]
    fn config_validation() {
        let bad = ThermostatConfig { comfort_c: 35.0, ..ThermostatConfig::default() };
        assert_eq!(bad.validate(), Err(ThermostatError::UnsafeSetpoint(35.0)));
        let bad = ThermostatConfig { hysteresis_c: 0.0, ..ThermostatConfig::default() };
        assert_eq!(bad.validate(), Err(ThermostatError::BadHysteresis(0.0)));
    }
}
