use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::{NodeUplinkFrame, StationFrame};
use crate::domain::{ActivityCode, Alert, CattleProfile, GeoFence};
use crate::sim::{FrameLink, StationKind};
use crate::time::Timestamp;

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub timestamp: Timestamp,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DecodedFrame {
    Uplink(NodeUplinkFrame),
    Station(StationFrame),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Event {
    FrameAccepted {
        link: FrameLink,
        arrival: Timestamp,
        hex: String,
        frame: DecodedFrame,
        /// Cattle id the frame was attributed to, if any.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cattle_id: Option<String>,
    },
    FrameRejected {
        link: FrameLink,
        arrival: Timestamp,
        hex: String,
        cause: String,
    },
    AlertOpened {
        alert: Alert,
    },
    AlertAcknowledged {
        alert_id: u64,
        actor: String,
        at: Timestamp,
    },
    AlertResolved {
        alert_id: u64,
        at: Timestamp,
    },
    ProfileRegistered {
        profile: CattleProfile,
        at: Timestamp,
    },
    StationRegistered {
        station_id: u16,
        station_kind: StationKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        activity: Option<ActivityCode>,
        at: Timestamp,
    },
    FenceUpdated {
        fence: GeoFence,
        version: u64,
        at: Timestamp,
    },
    /// A finished RFID session persisted into the daily tally.
    CounterReset {
        cattle_id: String,
        activity: ActivityCode,
        count: u32,
        session_started_at: Timestamp,
    },
    DayRollup {
        cattle_id: String,
        /// Day index since the epoch, shifted by the rollover offset.
        day: i64,
        date: String,
        tally: BTreeMap<ActivityCode, u32>,
        expected: BTreeMap<ActivityCode, u32>,
    },
    /// An explicit clock sweep that triggered rollups or silence alerts.
    ClockAdvanced {
        now: Timestamp,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::FrameAccepted { .. } => "FrameAccepted",
            Event::FrameRejected { .. } => "FrameRejected",
            Event::AlertOpened { .. } => "AlertOpened",
            Event::AlertAcknowledged { .. } => "AlertAcknowledged",
            Event::AlertResolved { .. } => "AlertResolved",
            Event::ProfileRegistered { .. } => "ProfileRegistered",
            Event::StationRegistered { .. } => "StationRegistered",
            Event::FenceUpdated { .. } => "FenceUpdated",
            Event::CounterReset { .. } => "CounterReset",
            Event::DayRollup { .. } => "DayRollup",
            Event::ClockAdvanced { .. } => "ClockAdvanced",
        }
    }

    /// Whether the event records an external input, as opposed to a
    /// consequence derived by the rules.
    pub fn is_input(&self) -> bool {
        matches!(
            self,
            Event::FrameAccepted { .. }
                | Event::FrameRejected { .. }
                | Event::AlertAcknowledged { .. }
                | Event::ProfileRegistered { .. }
                | Event::StationRegistered { .. }
                | Event::FenceUpdated { .. }
                | Event::ClockAdvanced { .. }
        )
    }
}

impl EventRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event records serialize")
    }
}
