use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use super::events::{DecodedFrame, Event, EventRecord};
use crate::codec::StationBody;
use crate::domain::{
    ActivityCode, ActivityCounter, Alert, AlertRule, CattleProfile, EnvSample, FixQuality, GeoFence, GeoFix, LatLon,
};
use crate::sim::StationKind;
use crate::time::Timestamp;

pub const ENV_RING_SPAN_MS: i64 = 86_400_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TelemetryPoint {
    pub arrival: Timestamp,
    /// Collar clock at capture, UTC seconds.
    pub captured: u64,
    pub seq: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<LatLon>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub altitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bpm: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_fence: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CowState {
    pub profile: CattleProfile,
    pub registered_at: Timestamp,
    pub last_heard: Option<Timestamp>,
    pub latest_fix: Option<GeoFix>,
    pub latest_bpm: Option<u8>,
    pub in_fence: Option<bool>,
    pub counter: Option<ActivityCounter>,
    /// Persisted session counts for the current day.
    pub daily: BTreeMap<ActivityCode, u32>,
    /// Accepted RFID reads since registration.
    pub rfid_reads: BTreeMap<ActivityCode, u64>,
    /// Session counts persisted since registration.
    pub persisted: BTreeMap<ActivityCode, u64>,
    #[serde(skip)]
    pub history: Vec<TelemetryPoint>,
}

impl CowState {
    /// Most recent heart rates, newest first.
    pub fn recent_bpm(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().rev().filter_map(|p| p.bpm).map(f64::from)
    }

    /// When silence is measured from: the last accepted uplink, or
    /// registration if none.
    pub fn heard_reference(&self) -> Timestamp {
        self.last_heard.unwrap_or(self.registered_at)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationState {
    pub station_id: u16,
    pub kind: StationKind,
    pub activity: Option<ActivityCode>,
    pub latest: Option<EnvSample>,
    pub frames: u64,
    #[serde(skip)]
    pub ring: VecDeque<(Timestamp, EnvSample)>,
}

impl StationState {
    pub fn samples(&self) -> Vec<EnvSample> {
        self.ring.iter().map(|(_, s)| *s).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestStats {
    pub frames_accepted: u64,
    pub frames_rejected: u64,
    pub uplink_accepted: u64,
    pub station_accepted: u64,
    pub rejected_by_cause: BTreeMap<String, u64>,
    pub events: u64,
}

/// Everything the aggregator knows, as a fold over the event log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HerdState {
    pub cows: BTreeMap<String, CowState>,
    pub node_index: BTreeMap<u16, String>,
    pub tag_index: BTreeMap<u32, String>,
    pub stations: BTreeMap<u16, StationState>,
    pub fence: Option<GeoFence>,
    pub fence_version: u64,
    pub alerts: BTreeMap<u64, Alert>,
    pub active: BTreeMap<(AlertRule, String), u64>,
    pub stats: IngestStats,
    pub clock: Option<Timestamp>,
    pub current_day: Option<i64>,
    pub last_seq: u64,
    pub rollups: Vec<(String, i64, BTreeMap<ActivityCode, u32>)>,
    pub day_offset_s: i64,
}

pub fn day_of(t: Timestamp, offset_s: i64) -> i64 {
    (t.secs() - offset_s).div_euclid(86_400)
}

pub fn day_start(day: i64, offset_s: i64) -> Timestamp {
    Timestamp::from_secs(day * 86_400 + offset_s)
}

impl HerdState {
    pub fn new(day_offset_s: i64) -> Self {
        HerdState { day_offset_s, ..Default::default() }
    }

    pub fn active_alert(&self, rule: AlertRule, subject: &str) -> Option<&Alert> {
        self.active.get(&(rule, subject.to_string())).and_then(|id| self.alerts.get(id))
    }

    pub fn profiles(&self) -> impl Iterator<Item = &CattleProfile> {
        self.cows.values().map(|c| &c.profile)
    }

    pub fn cow_by_node(&self, node_id: u16) -> Option<&CowState> {
        self.node_index.get(&node_id).and_then(|id| self.cows.get(id))
    }

    pub fn cow_by_tag(&self, tag: u32) -> Option<&CowState> {
        self.tag_index.get(&tag).and_then(|id| self.cows.get(id))
    }

    /// Folds one record into the state. The only way state changes.
    pub fn apply(&mut self, record: &EventRecord) {
        self.last_seq = record.seq;
        self.stats.events += 1;
        self.clock = Some(self.clock.map_or(record.timestamp, |c| c.max(record.timestamp)));
        let day = day_of(record.timestamp, self.day_offset_s);
        self.current_day = Some(self.current_day.map_or(day, |d| d.max(day)));

        match &record.event {
            Event::FrameAccepted { arrival, frame, cattle_id, .. } => {
                self.stats.frames_accepted += 1;
                match frame {
                    DecodedFrame::Uplink(f) => {
                        self.stats.uplink_accepted += 1;
                        let fence = self.fence.clone();
                        let Some(cow) = cattle_id.as_ref().and_then(|id| self.cows.get_mut(id)) else { return };
                        cow.last_heard = Some(*arrival);
                        let mut point = TelemetryPoint {
                            arrival: *arrival,
                            captured: u64::from(f.timestamp),
                            seq: f.seq,
                            position: None,
                            altitude: None,
                            bpm: f.bpm(),
                            in_fence: None,
                        };
                        if f.flags.gps_valid {
                            let position = LatLon::new(f.latitude(), f.longitude());
                            cow.latest_fix = Some(GeoFix {
                                position: Some(position),
                                altitude: Some(f.altitude_m()),
                                quality: FixQuality::StandardFix,
                                timestamp: u64::from(f.timestamp),
                            });
                            point.position = Some(position);
                            point.altitude = Some(f.altitude_m());
                            point.in_fence = fence.as_ref().map(|fe| fe.contains(position));
                            cow.in_fence = point.in_fence;
                        }
                        if let Some(b) = f.bpm() {
                            cow.latest_bpm = Some(b);
                        }
                        cow.history.push(point);
                    }
                    DecodedFrame::Station(f) => {
                        self.stats.station_accepted += 1;
                        if let Some(st) = self.stations.get_mut(&f.station_id) {
                            st.frames += 1;
                        }
                        match f.body {
                            StationBody::Environment { .. } => {
                                let (Some(sample), Some(st)) = (f.env_sample(), self.stations.get_mut(&f.station_id)) else {
                                    return;
                                };
                                st.latest = Some(sample);
                                st.ring.push_back((*arrival, sample));
                                while st.ring.front().is_some_and(|(t, _)| *arrival - *t > ENV_RING_SPAN_MS) {
                                    st.ring.pop_front();
                                }
                            }
                            StationBody::Rfid { activity, .. } => {
                                let Some(cow) = cattle_id.as_ref().and_then(|id| self.cows.get_mut(id)) else { return };
                                *cow.rfid_reads.entry(activity).or_default() += 1;
                                match &mut cow.counter {
                                    Some(c) if c.activity_code == activity => c.current_count += 1,
                                    _ => {
                                        cow.counter = Some(ActivityCounter {
                                            cattle_id: cow.profile.cattle_id.clone(),
                                            activity_code: activity,
                                            current_count: 1,
                                            session_started_at: *arrival,
                                        })
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Event::FrameRejected { cause, .. } => {
                self.stats.frames_rejected += 1;
                *self.stats.rejected_by_cause.entry(cause.clone()).or_default() += 1;
            }
            Event::AlertOpened { alert } => {
                self.active.insert((alert.rule, alert.subject.clone()), alert.alert_id);
                self.alerts.insert(alert.alert_id, alert.clone());
            }
            Event::AlertAcknowledged { alert_id, at, .. } => {
                if let Some(a) = self.alerts.get_mut(alert_id) {
                    a.acknowledged_at = Some(*at);
                }
            }
            Event::AlertResolved { alert_id, at } => {
                if let Some(a) = self.alerts.get_mut(alert_id) {
                    a.resolved_at = Some(*at);
                    self.active.remove(&(a.rule, a.subject.clone()));
                }
            }
            Event::ProfileRegistered { profile, at } => {
                self.node_index.insert(profile.node_id, profile.cattle_id.clone());
                self.tag_index.insert(profile.rfid_tag, profile.cattle_id.clone());
                self.cows.insert(
                    profile.cattle_id.clone(),
                    CowState {
                        profile: profile.clone(),
                        registered_at: *at,
                        last_heard: None,
                        latest_fix: None,
                        latest_bpm: None,
                        in_fence: None,
                        counter: None,
                        daily: BTreeMap::new(),
                        rfid_reads: BTreeMap::new(),
                        persisted: BTreeMap::new(),
                        history: Vec::new(),
                    },
                );
            }
            Event::StationRegistered { station_id, station_kind, activity, .. } => {
                self.stations.insert(
                    *station_id,
                    StationState {
                        station_id: *station_id,
                        kind: *station_kind,
                        activity: *activity,
                        latest: None,
                        frames: 0,
                        ring: VecDeque::new(),
                    },
                );
            }
            Event::FenceUpdated { fence, version, .. } => {
                self.fence = Some(fence.clone());
                self.fence_version = *version;
            }
            Event::CounterReset { cattle_id, activity, count, .. } => {
                if let Some(cow) = self.cows.get_mut(cattle_id) {
                    *cow.daily.entry(*activity).or_default() += count;
                    *cow.persisted.entry(*activity).or_default() += u64::from(*count);
                    if cow.counter.as_ref().is_some_and(|c| c.activity_code == *activity) {
                        cow.counter = None;
                    }
                }
            }
            Event::DayRollup { cattle_id, day, tally, .. } => {
                if let Some(cow) = self.cows.get_mut(cattle_id) {
                    cow.daily.clear();
                }
                self.rollups.push((cattle_id.clone(), *day, tally.clone()));
            }
            Event::ClockAdvanced { .. } => {}
        }
    }
}
