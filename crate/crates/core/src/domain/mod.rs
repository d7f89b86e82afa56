//! Shared vocabulary: positions, fences, profiles, samples, events, alerts.

mod geo;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Timestamp;

pub use geo::{contains, FenceError, FixError, FixQuality, GeoFence, GeoFix, LatLon};

/// Heartbeat band assumed when a profile does not specify one.
pub const DEFAULT_HEARTBEAT_BAND: HeartbeatBand = HeartbeatBand { min: 48, max: 84 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum ActivityCode {
    Milking = 1,
    Feeding = 2,
    Watering = 3,
    Resting = 4,
}

impl ActivityCode {
    pub const ALL: [ActivityCode; 4] = [
        ActivityCode::Milking,
        ActivityCode::Feeding,
        ActivityCode::Watering,
        ActivityCode::Resting,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(ActivityCode::Milking),
            2 => Some(ActivityCode::Feeding),
            3 => Some(ActivityCode::Watering),
            4 => Some(ActivityCode::Resting),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivityCode::Milking => "MILKING",
            ActivityCode::Feeding => "FEEDING",
            ActivityCode::Watering => "WATERING",
            ActivityCode::Resting => "RESTING",
        }
    }
}

impl fmt::Display for ActivityCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inclusive heartbeat band in beats per minute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatBand {
    pub min: u16,
    pub max: u16,
}

impl HeartbeatBand {
    pub fn contains(&self, bpm: f64) -> bool {
        bpm >= f64::from(self.min) && bpm <= f64::from(self.max)
    }
}

impl Default for HeartbeatBand {
    fn default() -> Self {
        DEFAULT_HEARTBEAT_BAND
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CattleProfile {
    pub cattle_id: String,
    pub rfid_tag: u32,
    pub node_id: u16,
    #[serde(default)]
    pub expected_activity: BTreeMap<ActivityCode, u32>,
    #[serde(default)]
    pub heartbeat_band: HeartbeatBand,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileWarning {
    /// No expected activity counts; the cow never raises deficit alerts.
    EmptyExpectedActivity,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ProfileRejection {
    #[error("DuplicateTag: rfid tag {0:#010x} is already registered")]
    DuplicateTag(u32),
    #[error("DuplicateNode: node {0} is already registered")]
    DuplicateNode(u16),
    #[error("DuplicateId: cattle id {0:?} is already registered")]
    DuplicateId(String),
    #[error("EmptyId: cattle id must not be empty")]
    EmptyId,
    #[error("InvalidHeartbeatBand: min {min} must be below max {max}")]
    InvalidHeartbeatBand { min: u16, max: u16 },
}

/// Checks a profile against its own invariants and the existing registry.
///
/// Accepted profiles may still carry warnings.
pub fn validate_profile<'a, I>(
    profile: &CattleProfile,
    registry: I,
) -> Result<Vec<ProfileWarning>, ProfileRejection>
where
    I: IntoIterator<Item = &'a CattleProfile>,
{
    if profile.cattle_id.trim().is_empty() {
        return Err(ProfileRejection::EmptyId);
    }
    let band = profile.heartbeat_band;
    if band.min >= band.max {
        return Err(ProfileRejection::InvalidHeartbeatBand { min: band.min, max: band.max });
    }
    for existing in registry {
        if existing.cattle_id == profile.cattle_id {
            return Err(ProfileRejection::DuplicateId(profile.cattle_id.clone()));
        }
        if existing.rfid_tag == profile.rfid_tag {
            return Err(ProfileRejection::DuplicateTag(profile.rfid_tag));
        }
        if existing.node_id == profile.node_id {
            return Err(ProfileRejection::DuplicateNode(profile.node_id));
        }
    }
    let mut warnings = Vec::new();
    if profile.expected_activity.values().all(|&n| n == 0) {
        warnings.push(ProfileWarning::EmptyExpectedActivity);
    }
    Ok(warnings)
}

/// One shed environment reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSample {
    /// Degrees Celsius, one decimal.
    pub temperature: f64,
    /// Percent relative humidity, 0..=100.
    pub humidity: u8,
    /// dB, one decimal.
    pub audio_level: f64,
    /// UTC seconds.
    pub timestamp: u64,
    pub station_id: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfidEvent {
    pub rfid_tag: u32,
    pub station_id: u16,
    pub activity_code: ActivityCode,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlertRule {
    HumidityOutOfRange,
    TemperatureOutOfRange,
    AudioOutOfRange,
    GeofenceBreach,
    ActivityFrequencyDeficit,
    HeartbeatOutOfBand,
    NodeSilent,
}

impl AlertRule {
    pub const ALL: [AlertRule; 7] = [
        AlertRule::HumidityOutOfRange,
        AlertRule::TemperatureOutOfRange,
        AlertRule::AudioOutOfRange,
        AlertRule::GeofenceBreach,
        AlertRule::ActivityFrequencyDeficit,
        AlertRule::HeartbeatOutOfBand,
        AlertRule::NodeSilent,
    ];
}

impl fmt::Display for AlertRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    Warning,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlertState {
    Open,
    Acknowledged,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: u64,
    pub rule: AlertRule,
    /// Station (`station:<id>`) or cattle id; deficit alerts append `/<ACTIVITY>`.
    pub subject: String,
    pub severity: Severity,
    pub opened_at: Timestamp,
    pub acknowledged_at: Option<Timestamp>,
    pub resolved_at: Option<Timestamp>,
    pub detail: String,
}

impl Alert {
    pub fn state(&self) -> AlertState {
        alert_state(self.acknowledged_at, self.resolved_at)
    }

    pub fn is_active(&self) -> bool {
        self.resolved_at.is_none()
    }
}

/// Alert state as a function of its lifecycle timestamps.
pub fn alert_state(acknowledged_at: Option<Timestamp>, resolved_at: Option<Timestamp>) -> AlertState {
    match (acknowledged_at, resolved_at) {
        (_, Some(_)) => AlertState::Resolved,
        (Some(_), None) => AlertState::Acknowledged,
        (None, None) => AlertState::Open,
    }
}

/// The RFID session counter for one cow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityCounter {
    pub cattle_id: String,
    pub activity_code: ActivityCode,
    pub current_count: u32,
    pub session_started_at: Timestamp,
}
