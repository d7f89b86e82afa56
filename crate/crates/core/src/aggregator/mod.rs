//! Event-sourced aggregator: ingestion, welfare rules and alert lifecycle.
//!
//! Every change is an [`EventRecord`] committed through one writer. The
//! command path decides which events to commit; [`HerdState::apply`] is the
//! only code that mutates state, so replaying the log rebuilds exactly the
//! live state.

mod events;
mod log;
mod rules;
mod state;

use std::collections::BTreeMap;
use std::io;

use chrono::DateTime;
use thiserror::Error;

pub use events::{DecodedFrame, Event, EventRecord};
pub use log::{
    read_log_file, read_records, repair_tail, EventLog, FileLog, FsyncPolicy, LogError, MemoryLog, NullLog, TailRepair,
};
pub use rules::{evaluate_environment, persistence_verdict, Band, RuleConfig, RuleConfigError, Verdict, ENVIRONMENT_RULES};
pub use state::{day_of, day_start, CowState, HerdState, IngestStats, StationState, TelemetryPoint, ENV_RING_SPAN_MS};

use crate::codec::{decode_station, decode_uplink, StationBody};
use crate::domain::{
    validate_profile, ActivityCode, Alert, AlertRule, CattleProfile, GeoFence, ProfileRejection, ProfileWarning, Severity,
};
use crate::sim::{FrameLink, FrameSink, Scenario, StationKind};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngestResult {
    Accepted,
    Rejected(String),
}

impl IngestResult {
    pub fn is_accepted(&self) -> bool {
        matches!(self, IngestResult::Accepted)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AckError {
    #[error("NotFound: no alert {0}")]
    NotFound(u64),
    #[error("NotOpen: alert {0} is not open")]
    NotOpen(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StationRejection {
    #[error("DuplicateStation: station {0} is already registered")]
    Duplicate(u16),
    #[error("InvalidStation: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("SequenceGap at index {index}: expected seq {expected}, found {found}")]
    SequenceGap { index: usize, expected: u64, found: u64 },
}

/// First point where a re-derived log departs from the recorded one.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub seq: u64,
    pub recorded: Option<EventRecord>,
    pub derived: Option<EventRecord>,
}

type Observer = Box<dyn FnMut(&EventRecord) + Send>;

/// Work a clock advance will do, computed before anything is committed.
#[derive(Debug, Default)]
struct ClockPlan {
    days: Vec<i64>,
    silent: Vec<String>,
}

impl ClockPlan {
    fn is_empty(&self) -> bool {
        self.days.is_empty() && self.silent.is_empty()
    }
}

pub struct Aggregator {
    state: HerdState,
    rules: RuleConfig,
    log: Box<dyn EventLog>,
    observer: Option<Observer>,
    log_failures: u64,
    last_log_error: Option<String>,
}

impl std::fmt::Debug for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Aggregator").field("last_seq", &self.state.last_seq).field("rules", &self.rules).finish()
    }
}

fn station_subject(id: u16) -> String {
    format!("station:{id}")
}

fn deficit_subject(cattle_id: &str, a: ActivityCode) -> String {
    format!("{cattle_id}/{}", a.name())
}

fn date_of_day(day: i64, offset_s: i64) -> String {
    DateTime::from_timestamp(day_start(day, offset_s).secs(), 0)
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_default()
}

impl Aggregator {
    pub fn new(rules: RuleConfig, log: Box<dyn EventLog>) -> Self {
        Aggregator {
            state: HerdState::new(rules.day_rollover_offset_s),
            rules,
            log,
            observer: None,
            log_failures: 0,
            last_log_error: None,
        }
    }

    pub fn in_memory(rules: RuleConfig) -> Self {
        Self::new(rules, Box::new(NullLog))
    }

    /// Rebuilds state from `records` without evaluating any rule; new
    /// events go to `log`.
    pub fn replay(records: &[EventRecord], rules: RuleConfig, log: Box<dyn EventLog>) -> Result<Self, ReplayError> {
        let mut agg = Aggregator::new(rules, log);
        for (index, r) in records.iter().enumerate() {
            let expected = agg.state.last_seq + 1;
            if r.seq != expected {
                return Err(ReplayError::SequenceGap { index, expected, found: r.seq });
            }
            agg.state.apply(r);
        }
        Ok(agg)
    }

    pub fn state(&self) -> &HerdState {
        &self.state
    }

    pub fn rules(&self) -> &RuleConfig {
        &self.rules
    }

    pub fn set_observer(&mut self, observer: impl FnMut(&EventRecord) + Send + 'static) {
        self.observer = Some(Box::new(observer));
    }

    pub fn log_failures(&self) -> (u64, Option<&str>) {
        (self.log_failures, self.last_log_error.as_deref())
    }

    pub fn flush_log(&mut self) -> io::Result<()> {
        self.log.flush()
    }

    fn commit(&mut self, timestamp: Timestamp, event: Event) -> u64 {
        let record = EventRecord { seq: self.state.last_seq + 1, timestamp, event };
        self.state.apply(&record);
        if let Err(e) = self.log.append(&record) {
            self.log_failures += 1;
            self.last_log_error = Some(e.to_string());
        }
        if let Some(obs) = self.observer.as_mut() {
            obs(&record);
        }
        record.seq
    }

    fn open_alert(&mut self, now: Timestamp, rule: AlertRule, subject: String, severity: Severity, detail: String) {
        if self.state.active_alert(rule, &subject).is_some() {
            return;
        }
        let alert = Alert {
            alert_id: self.state.alerts.len() as u64 + 1,
            rule,
            subject,
            severity,
            opened_at: now,
            acknowledged_at: None,
            resolved_at: None,
            detail,
        };
        self.commit(now, Event::AlertOpened { alert });
    }

    fn resolve_alert(&mut self, now: Timestamp, rule: AlertRule, subject: &str) {
        if let Some(id) = self.state.active_alert(rule, subject).map(|a| a.alert_id) {
            self.commit(now, Event::AlertResolved { alert_id: id, at: now });
        }
    }

    fn plan_clock(&self, now: Timestamp) -> ClockPlan {
        let mut plan = ClockPlan::default();
        if let Some(current) = self.state.current_day {
            plan.days = (current..day_of(now, self.rules.day_rollover_offset_s)).collect();
        }
        let timeout_ms = (self.rules.node_silence_timeout_s * 1000.0).round() as i64;
        for (id, cow) in &self.state.cows {
            if now - cow.heard_reference() > timeout_ms && self.state.active_alert(AlertRule::NodeSilent, id).is_none() {
                plan.silent.push(id.clone());
            }
        }
        plan
    }

    fn execute_clock(&mut self, plan: ClockPlan, now: Timestamp) {
        for day in plan.days {
            self.day_rollup(day, now);
        }
        for id in plan.silent {
            let Some(cow) = self.state.cows.get(&id) else { continue };
            let detail = format!("node {} silent since {}", cow.profile.node_id, cow.heard_reference());
            self.open_alert(now, AlertRule::NodeSilent, id, Severity::Warning, detail);
        }
    }

    /// Closes `day` for every registered cow: persists open sessions, emits
    /// the tally and opens or resolves frequency deficits.
    fn day_rollup(&mut self, day: i64, now: Timestamp) {
        let offset = self.rules.day_rollover_offset_s;
        let ids: Vec<String> = self.state.cows.keys().cloned().collect();
        for id in ids {
            if let Some(c) = self.state.cows[&id].counter.clone() {
                self.commit(
                    now,
                    Event::CounterReset {
                        cattle_id: id.clone(),
                        activity: c.activity_code,
                        count: c.current_count,
                        session_started_at: c.session_started_at,
                    },
                );
            }
            let cow = &self.state.cows[&id];
            let tally = cow.daily.clone();
            let expected = cow.profile.expected_activity.clone();
            let evaluated = cow.registered_at <= day_start(day, offset);
            self.commit(
                now,
                Event::DayRollup {
                    cattle_id: id.clone(),
                    day,
                    date: date_of_day(day, offset),
                    tally: tally.clone(),
                    expected: expected.clone(),
                },
            );
            if !evaluated {
                continue;
            }
            for (&activity, &e) in expected.iter().filter(|(_, e)| **e > 0) {
                let o = tally.get(&activity).copied().unwrap_or(0);
                let subject = deficit_subject(&id, activity);
                if o < e {
                    let severity = if o + 1 == e { Severity::Warning } else { Severity::Critical };
                    self.open_alert(now, AlertRule::ActivityFrequencyDeficit, subject, severity, format!("{o} of {e}"));
                } else {
                    self.resolve_alert(now, AlertRule::ActivityFrequencyDeficit, &subject);
                }
            }
        }
    }

    /// Periodic sweep: day rollovers and node-silence checks up to `now`.
    pub fn tick(&mut self, now: Timestamp) {
        let plan = self.plan_clock(now);
        if plan.is_empty() {
            return;
        }
        self.commit(now, Event::ClockAdvanced { now });
        self.execute_clock(plan, now);
    }

    fn advance(&mut self, now: Timestamp) {
        let plan = self.plan_clock(now);
        self.execute_clock(plan, now);
    }

    fn reject(&mut self, link: FrameLink, bytes: &[u8], arrival: Timestamp, cause: &str) -> IngestResult {
        self.commit(
            arrival,
            Event::FrameRejected { link, arrival, hex: hex::encode(bytes), cause: cause.to_string() },
        );
        IngestResult::Rejected(cause.to_string())
    }

    pub fn ingest(&mut self, link: FrameLink, bytes: &[u8], arrival: Timestamp) -> IngestResult {
        match link {
            FrameLink::Uplink => self.ingest_uplink(bytes, arrival),
            FrameLink::Station => self.ingest_station(bytes, arrival),
        }
    }

    pub fn ingest_uplink(&mut self, bytes: &[u8], arrival: Timestamp) -> IngestResult {
        self.advance(arrival);
        let frame = match decode_uplink(bytes) {
            Ok(f) => f,
            Err(e) => return self.reject(FrameLink::Uplink, bytes, arrival, e.cause()),
        };
        let Some(id) = self.state.node_index.get(&frame.node_id).cloned() else {
            return self.reject(FrameLink::Uplink, bytes, arrival, "UnknownNode");
        };
        self.commit(
            arrival,
            Event::FrameAccepted {
                link: FrameLink::Uplink,
                arrival,
                hex: hex::encode(bytes),
                frame: DecodedFrame::Uplink(frame),
                cattle_id: Some(id.clone()),
            },
        );
        self.resolve_alert(arrival, AlertRule::NodeSilent, &id);

        let cow = &self.state.cows[&id];
        if let (Some(inside), Some(p)) = (cow.in_fence.filter(|_| frame.flags.gps_valid), cow.latest_fix.and_then(|f| f.position)) {
            if inside {
                self.resolve_alert(arrival, AlertRule::GeofenceBreach, &id);
            } else {
                let detail = format!("fix {:.7}, {:.7} outside fence v{}", p.lat, p.lon, self.state.fence_version);
                self.open_alert(arrival, AlertRule::GeofenceBreach, id.clone(), Severity::Critical, detail);
            }
        }

        if let Some(bpm) = frame.bpm() {
            let cow = &self.state.cows[&id];
            let band = cow.profile.heartbeat_band;
            match persistence_verdict(cow.recent_bpm(), Band::new(f64::from(band.min), f64::from(band.max)), self.rules.persistence_k) {
                Verdict::Open => {
                    let detail = format!("bpm {bpm} outside [{}, {}]", band.min, band.max);
                    self.open_alert(arrival, AlertRule::HeartbeatOutOfBand, id, Severity::Warning, detail);
                }
                Verdict::Resolve => self.resolve_alert(arrival, AlertRule::HeartbeatOutOfBand, &id),
                Verdict::NoOp => {}
            }
        }
        IngestResult::Accepted
    }

    pub fn ingest_station(&mut self, bytes: &[u8], arrival: Timestamp) -> IngestResult {
        self.advance(arrival);
        let frame = match decode_station(bytes) {
            Ok(f) => f,
            Err(e) => return self.reject(FrameLink::Station, bytes, arrival, e.cause()),
        };
        let Some(station) = self.state.stations.get(&frame.station_id) else {
            return self.reject(FrameLink::Station, bytes, arrival, "UnknownStation");
        };
        let accepted = |cattle_id| Event::FrameAccepted {
            link: FrameLink::Station,
            arrival,
            hex: hex::encode(bytes),
            frame: DecodedFrame::Station(frame),
            cattle_id,
        };
        match (frame.body, station.kind) {
            (StationBody::Environment { .. }, StationKind::Environment) => {
                self.commit(arrival, accepted(None));
                let st = &self.state.stations[&frame.station_id];
                let k = self.rules.persistence_k;
                let recent: Vec<_> = st.ring.iter().rev().take(k).rev().map(|(_, s)| *s).collect();
                let latest = st.latest;
                for (rule, verdict) in evaluate_environment(&recent, &self.rules) {
                    let subject = station_subject(frame.station_id);
                    match verdict {
                        Verdict::Open => {
                            let detail = latest.map(|s| self.describe(rule, &s)).unwrap_or_default();
                            self.open_alert(arrival, rule, subject, Severity::Warning, detail);
                        }
                        Verdict::Resolve => self.resolve_alert(arrival, rule, &subject),
                        Verdict::NoOp => {}
                    }
                }
                IngestResult::Accepted
            }
            (StationBody::Rfid { rfid_tag, activity }, StationKind::Rfid) => {
                let Some(id) = self.state.tag_index.get(&rfid_tag).cloned() else {
                    return self.reject(FrameLink::Station, bytes, arrival, "UnknownTag");
                };
                self.record_activity(&id, activity, arrival);
                self.commit(arrival, accepted(Some(id)));
                IngestResult::Accepted
            }
            _ => self.reject(FrameLink::Station, bytes, arrival, "StationKindMismatch"),
        }
    }

    /// Closes the cow's current session if `activity` starts a new one. The
    /// accepted frame that follows increments or starts the session.
    fn record_activity(&mut self, cattle_id: &str, activity: ActivityCode, at: Timestamp) {
        let Some(c) = self.state.cows.get(cattle_id).and_then(|c| c.counter.clone()) else { return };
        if c.activity_code != activity {
            self.commit(
                at,
                Event::CounterReset {
                    cattle_id: cattle_id.to_string(),
                    activity: c.activity_code,
                    count: c.current_count,
                    session_started_at: c.session_started_at,
                },
            );
        }
    }

    fn describe(&self, rule: AlertRule, s: &crate::domain::EnvSample) -> String {
        let (value, unit, band) = match rule {
            AlertRule::HumidityOutOfRange => (f64::from(s.humidity), "%", self.rules.humidity),
            AlertRule::TemperatureOutOfRange => (s.temperature, " C", self.rules.temperature),
            _ => (s.audio_level, " dB", self.rules.audio),
        };
        format!("{value}{unit} outside [{}, {}]", band.min, band.max)
    }

    pub fn register_profile(&mut self, profile: CattleProfile, at: Timestamp) -> Result<Vec<ProfileWarning>, ProfileRejection> {
        let warnings = validate_profile(&profile, self.state.profiles())?;
        self.advance(at);
        self.commit(at, Event::ProfileRegistered { profile, at });
        Ok(warnings)
    }

    pub fn register_station(
        &mut self,
        station_id: u16,
        kind: StationKind,
        activity: Option<ActivityCode>,
        at: Timestamp,
    ) -> Result<(), StationRejection> {
        if self.state.stations.contains_key(&station_id) {
            return Err(StationRejection::Duplicate(station_id));
        }
        match (kind, activity) {
            (StationKind::Rfid, None) => return Err(StationRejection::Invalid("rfid station needs an activity")),
            (StationKind::Environment, Some(_)) => return Err(StationRejection::Invalid("environment station takes no activity")),
            _ => {}
        }
        self.advance(at);
        self.commit(at, Event::StationRegistered { station_id, station_kind: kind, activity, at });
        Ok(())
    }

    /// Replaces the fence; returns the new version.
    pub fn set_fence(&mut self, fence: GeoFence, at: Timestamp) -> u64 {
        self.advance(at);
        let version = self.state.fence_version + 1;
        self.commit(at, Event::FenceUpdated { fence, version, at });
        version
    }

    pub fn acknowledge_alert(&mut self, alert_id: u64, actor: &str, at: Timestamp) -> Result<Alert, AckError> {
        let alert = self.state.alerts.get(&alert_id).ok_or(AckError::NotFound(alert_id))?;
        if alert.acknowledged_at.is_some() || alert.resolved_at.is_some() {
            return Err(AckError::NotOpen(alert_id));
        }
        self.commit(at, Event::AlertAcknowledged { alert_id, actor: actor.to_string(), at });
        Ok(self.state.alerts[&alert_id].clone())
    }

    /// Alert counts keyed by rule name.
    pub fn alerts_by_rule(&self) -> BTreeMap<String, u64> {
        let mut out: BTreeMap<String, u64> = AlertRule::ALL.iter().map(|r| (r.to_string(), 0)).collect();
        for a in self.state.alerts.values() {
            *out.entry(a.rule.to_string()).or_default() += 1;
        }
        out
    }

    /// Re-drives the input events of `records` through a fresh aggregator
    /// with `rules` and compares every derived record with the recorded one.
    pub fn verify(records: &[EventRecord], rules: RuleConfig) -> Result<(), Divergence> {
        let mut fresh = Aggregator::in_memory(rules);
        let derived = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let sink = derived.clone();
        fresh.set_observer(move |r| sink.lock().expect("verify sink").push(r.clone()));
        for r in records.iter().filter(|r| r.event.is_input()) {
            fresh.redrive(&r.event);
        }
        let derived = derived.lock().expect("verify sink");
        let n = records.len().max(derived.len());
        for i in 0..n {
            let (a, b) = (records.get(i), derived.get(i));
            if a != b {
                return Err(Divergence {
                    seq: i as u64 + 1,
                    recorded: a.cloned(),
                    derived: b.cloned(),
                });
            }
        }
        Ok(())
    }

    fn redrive(&mut self, event: &Event) {
        match event {
            Event::FrameAccepted { link, arrival, hex, .. } | Event::FrameRejected { link, arrival, hex, .. } => {
                let bytes = hex::decode(hex).unwrap_or_default();
                self.ingest(*link, &bytes, *arrival);
            }
            Event::AlertAcknowledged { alert_id, actor, at } => {
                let _ = self.acknowledge_alert(*alert_id, actor, *at);
            }
            Event::ProfileRegistered { profile, at } => {
                let _ = self.register_profile(profile.clone(), *at);
            }
            Event::StationRegistered { station_id, station_kind, activity, at } => {
                let _ = self.register_station(*station_id, *station_kind, *activity, *at);
            }
            Event::FenceUpdated { fence, at, .. } => {
                self.set_fence(fence.clone(), *at);
            }
            Event::ClockAdvanced { now } => self.tick(*now),
            _ => {}
        }
    }

    /// Registers a scenario's stations, fence and herd at its start time.
    pub fn provision(&mut self, scenario: &Scenario) -> Result<(), ProvisionError> {
        let at = scenario.spec.start_time;
        for s in &scenario.spec.stations {
            self.register_station(s.station_id, s.kind, s.activity, at)?;
        }
        self.set_fence(scenario.fence.clone(), at);
        for p in scenario.profiles() {
            self.register_profile(p, at)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProvisionError {
    #[error(transparent)]
    Station(#[from] StationRejection),
    #[error(transparent)]
    Profile(#[from] ProfileRejection),
}

impl FrameSink for Aggregator {
    fn uplink(&mut self, bytes: &[u8], arrival: Timestamp) {
        self.ingest_uplink(bytes, arrival);
    }

    fn station(&mut self, bytes: &[u8], arrival: Timestamp) {
        self.ingest_station(bytes, arrival);
    }

    fn tick(&mut self, now: Timestamp) {
        Aggregator::tick(self, now);
    }
}
