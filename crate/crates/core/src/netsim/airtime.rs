use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RadioConfigError {
    #[error("spreading factor {0} outside 7..=12")]
    SpreadingFactor(u8),
    #[error("bandwidth {0} Hz not one of 125000, 250000, 500000")]
    Bandwidth(u32),
    #[error("coding rate offset {0} outside 1..=4")]
    CodingRate(u8),
    #[error("duty cycle limit {0} outside (0, 1]")]
    DutyCycle(f64),
    #[error("channel count must be at least 1")]
    Channels,
}

/// LoRa modulation and regulatory parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub spreading_factor: u8,
    pub bandwidth_hz: u32,
    /// Coding rate 4/(4+n), stored as n in 1..=4.
    pub coding_rate: u8,
    pub preamble_symbols: u16,
    pub explicit_header: bool,
    /// `None` enables it automatically when the symbol time reaches 16 ms.
    pub low_data_rate_optimize: Option<bool>,
    pub duty_cycle_limit: f64,
    pub duty_window_s: f64,
    pub channels: u8,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            spreading_factor: 7,
            bandwidth_hz: 125_000,
            coding_rate: 1,
            preamble_symbols: 8,
            explicit_header: true,
            low_data_rate_optimize: None,
            duty_cycle_limit: 0.01,
            duty_window_s: 3600.0,
            channels: 8,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<(), RadioConfigError> {
        if !(7..=12).contains(&self.spreading_factor) {
            return Err(RadioConfigError::SpreadingFactor(self.spreading_factor));
        }
        if ![125_000, 250_000, 500_000].contains(&self.bandwidth_hz) {
            return Err(RadioConfigError::Bandwidth(self.bandwidth_hz));
        }
        if !(1..=4).contains(&self.coding_rate) {
            return Err(RadioConfigError::CodingRate(self.coding_rate));
        }
        if !(self.duty_cycle_limit > 0.0 && self.duty_cycle_limit <= 1.0) {
            return Err(RadioConfigError::DutyCycle(self.duty_cycle_limit));
        }
        if self.channels == 0 {
            return Err(RadioConfigError::Channels);
        }
        Ok(())
    }

    pub fn with_spreading_factor(&self, sf: u8) -> Self {
        RadioConfig {
            spreading_factor: sf,
            ..self.clone()
        }
    }

    pub fn symbol_time_s(&self) -> f64 {
        f64::from(1u32 << self.spreading_factor) / f64::from(self.bandwidth_hz)
    }

    pub fn low_data_rate_optimize(&self) -> bool {
        self.low_data_rate_optimize
            .unwrap_or_else(|| self.symbol_time_s() >= 0.016)
    }
}

/// Time on air of one LoRa packet (CRC on), seconds.
pub fn airtime(cfg: &RadioConfig, payload_len: usize) -> f64 {
    let sf = i64::from(cfg.spreading_factor);
    let header = if cfg.explicit_header { 0 } else { 1 };
    let de = i64::from(cfg.low_data_rate_optimize());
    let numerator = 8 * payload_len as i64 - 4 * sf + 28 + 16 - 20 * header;
    let denominator = 4 * (sf - 2 * de);
    // ceiling division on integers; numerator may be negative
    let blocks = numerator.div_euclid(denominator) + i64::from(numerator.rem_euclid(denominator) != 0);
    let payload_symbols = 8 + (blocks * (i64::from(cfg.coding_rate) + 4)).max(0);
    (f64::from(cfg.preamble_symbols) + 4.25 + payload_symbols as f64) * cfg.symbol_time_s()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sf7_reference() {
        let t = airtime(&RadioConfig::default(), 22);
        assert!((t - 0.056576).abs() < 1e-12, "{t}");
    }

    #[test]
    fn bandwidth_halves() {
        let cfg = RadioConfig::default();
        let wide = RadioConfig { bandwidth_hz: 250_000, ..cfg.clone() };
        assert_eq!(airtime(&wide, 22), airtime(&cfg, 22) / 2.0);
    }

    #[test]
    fn monotone_in_sf() {
        let cfg = RadioConfig::default();
        for sf in 8..=12 {
            assert!(airtime(&cfg.with_spreading_factor(sf), 22) > airtime(&cfg.with_spreading_factor(sf - 1), 22));
        }
    }

    #[test]
    fn ldro_auto() {
        let cfg = RadioConfig::default();
        assert!(!cfg.with_spreading_factor(10).low_data_rate_optimize());
        assert!(cfg.with_spreading_factor(11).low_data_rate_optimize());
    }

    #[test]
    fn validation() {
        assert!(RadioConfig::default().validate().is_ok());
        assert!(RadioConfig { spreading_factor: 6, ..Default::default() }.validate().is_err());
        assert!(RadioConfig { bandwidth_hz: 200_000, ..Default::default() }.validate().is_err());
    }
}
