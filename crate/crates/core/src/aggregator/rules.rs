use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AlertRule, EnvSample};

/// Inclusive acceptable range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    pub min: f64,
    pub max: f64,
}

impl Band {
    pub const fn new(min: f64, max: f64) -> Self {
        Band { min, max }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    pub humidity: Band,
    pub temperature: Band,
    pub audio: Band,
    /// Consecutive samples needed to open and to resolve.
    pub persistence_k: usize,
    pub node_silence_timeout_s: f64,
    /// Seconds after 00:00 UTC at which a day ends.
    pub day_rollover_offset_s: i64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            humidity: Band::new(30.0, 80.0),
            temperature: Band::new(10.0, 30.0),
            audio: Band::new(35.0, 45.0),
            persistence_k: 3,
            node_silence_timeout_s: 300.0,
            day_rollover_offset_s: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuleConfigError {
    #[error("{0} band needs min < max")]
    Band(&'static str),
    #[error("persistence_k must be at least 1")]
    Persistence,
    #[error("node_silence_timeout_s must be positive")]
    Timeout,
    #[error("invalid rules document: {0}")]
    Parse(String),
}

impl RuleConfig {
    /// Strict mode: a single out-of-range sample opens, a single in-range
    /// sample resolves.
    pub fn strict() -> Self {
        RuleConfig { persistence_k: 1, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), RuleConfigError> {
        for (name, b) in [("humidity", self.humidity), ("temperature", self.temperature), ("audio", self.audio)] {
            if !(b.min < b.max) {
                return Err(RuleConfigError::Band(name));
            }
        }
        if self.persistence_k == 0 {
            return Err(RuleConfigError::Persistence);
        }
        if !(self.node_silence_timeout_s > 0.0) {
            return Err(RuleConfigError::Timeout);
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, RuleConfigError> {
        let cfg: RuleConfig = serde_json::from_str(text).map_err(|e| RuleConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Open,
    Resolve,
    NoOp,
}

/// Persistence rule over the most recent `k` readings: `Open` when all are
/// out of band, `Resolve` when all are in band.
pub fn persistence_verdict<I>(recent_newest_first: I, band: Band, k: usize) -> Verdict
where
    I: IntoIterator<Item = f64>,
{
    let mut seen = 0;
    let mut outside = 0;
    for x in recent_newest_first.into_iter().take(k) {
        seen += 1;
        if !band.contains(x) {
            outside += 1;
        }
    }
    if seen < k {
        Verdict::NoOp
    } else if outside == k {
        Verdict::Open
    } else if outside == 0 {
        Verdict::Resolve
    } else {
        Verdict::NoOp
    }
}

pub const ENVIRONMENT_RULES: [AlertRule; 3] =
    [AlertRule::HumidityOutOfRange, AlertRule::TemperatureOutOfRange, AlertRule::AudioOutOfRange];

/// Verdicts for the three environment rules given a station's samples,
/// oldest first.
pub fn evaluate_environment(history: &[EnvSample], cfg: &RuleConfig) -> [(AlertRule, Verdict); 3] {
    let k = cfg.persistence_k;
    let recent = || history.iter().rev();
    [
        (AlertRule::HumidityOutOfRange, persistence_verdict(recent().map(|s| f64::from(s.humidity)), cfg.humidity, k)),
        (AlertRule::TemperatureOutOfRange, persistence_verdict(recent().map(|s| s.temperature), cfg.temperature, k)),
        (AlertRule::AudioOutOfRange, persistence_verdict(recent().map(|s| s.audio_level), cfg.audio, k)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hum(values: &[u8]) -> Vec<EnvSample> {
        values
            .iter()
            .map(|&h| EnvSample { temperature: 20.0, humidity: h, audio_level: 40.0, timestamp: 0, station_id: 1 })
            .collect()
    }

    #[test]
    fn three_low_humidity_opens() {
        let v = evaluate_environment(&hum(&[29, 29, 29]), &RuleConfig::default());
        assert_eq!(v[0], (AlertRule::HumidityOutOfRange, Verdict::Open));
        assert_eq!(v[1].1, Verdict::Resolve);
    }

    #[test]
    fn boundary_inclusive() {
        let mut s = hum(&[55])[0];
        s.temperature = 30.0;
        let v = evaluate_environment(&[s], &RuleConfig::strict());
        assert_eq!(v[1], (AlertRule::TemperatureOutOfRange, Verdict::Resolve));
    }

    #[test]
    fn not_consecutive() {
        let samples: Vec<EnvSample> = [50.0, 41.0, 50.0]
            .iter()
            .map(|&a| EnvSample { temperature: 20.0, humidity: 50, audio_level: a, timestamp: 0, station_id: 1 })
            .collect();
        assert_eq!(evaluate_environment(&samples, &RuleConfig::default())[2].1, Verdict::NoOp);
    }

    #[test]
    fn too_few_samples() {
        assert_eq!(evaluate_environment(&hum(&[10, 10]), &RuleConfig::default())[0].1, Verdict::NoOp);
    }

    #[test]
    fn config_validation() {
        assert!(RuleConfig::default().validate().is_ok());
        let bad = RuleConfig { humidity: Band::new(80.0, 30.0), ..Default::default() };
        assert_eq!(bad.validate(), Err(RuleConfigError::Band("humidity")));
        assert!(RuleConfig::from_json(r#"{"persistence_k": 0}"#).is_err());
        assert_eq!(RuleConfig::from_json(r#"{"persistence_k": 1}"#).unwrap(), RuleConfig::strict());
        assert!(RuleConfig::from_json(r#"{"persistance_k": 1}"#).is_err());
    }
}
