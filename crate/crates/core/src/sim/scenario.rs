//! Scenario documents: strict JSON with explicit defaults, validated as a
//! whole so that every problem is reported at once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ActivityCode, CattleProfile, FenceError, GeoFence, HeartbeatBand, LatLon};
use crate::netsim::{RadioConfig, RadioConfigError};
use crate::time::Timestamp;

pub const DEFAULT_START: Timestamp = Timestamp::from_secs(1_704_067_200);

fn default_start() -> Timestamp {
    DEFAULT_START
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_start")]
    pub start_time: Timestamp,
    pub fence: Vec<(f64, f64)>,
    #[serde(default)]
    pub herd: Vec<CowSpec>,
    #[serde(default)]
    pub shed: ShedSpec,
    #[serde(default)]
    pub stations: Vec<StationSpec>,
    #[serde(default)]
    pub reporting: ReportingSpec,
    #[serde(default)]
    pub radio: RadioSpec,
    #[serde(default)]
    pub faults: Vec<FaultInjection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomePosition {
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub alt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CowSpec {
    pub cattle_id: String,
    pub node_id: u16,
    pub rfid_tag: u32,
    pub home: HomePosition,
    #[serde(default)]
    pub expected_activity: BTreeMap<ActivityCode, u32>,
    #[serde(default = "default_bpm")]
    pub base_bpm: f64,
    #[serde(default)]
    pub heartbeat_band: HeartbeatBand,
}

fn default_bpm() -> f64 {
    66.0
}

impl CowSpec {
    pub fn profile(&self) -> CattleProfile {
        CattleProfile {
            cattle_id: self.cattle_id.clone(),
            rfid_tag: self.rfid_tag,
            node_id: self.node_id,
            expected_activity: self.expected_activity.clone(),
            heartbeat_band: self.heartbeat_band,
        }
    }
}

/// Mean-reverting drift for one environment parameter. `drift` is the
/// stationary standard deviation around `baseline`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub baseline: f64,
    #[serde(default)]
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShedSpec {
    pub temperature: DriftSpec,
    pub humidity: DriftSpec,
    pub audio: DriftSpec,
    /// Mean-reversion time constant (1/theta), seconds.
    pub reversion_s: f64,
}

impl Default for ShedSpec {
    fn default() -> Self {
        ShedSpec {
            temperature: DriftSpec { baseline: 20.0, drift: 1.0 },
            humidity: DriftSpec { baseline: 55.0, drift: 2.0 },
            audio: DriftSpec { baseline: 40.0, drift: 1.0 },
            reversion_s: 300.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationKind {
    Environment,
    Rfid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationSpec {
    pub station_id: u16,
    pub kind: StationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activity: Option<ActivityCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportingSpec {
    pub uplink_period_s: f64,
    pub environment_period_s: f64,
    pub pulse_window_s: f64,
    /// Beat timing jitter as a fraction of the beat period.
    pub pulse_jitter: f64,
}

impl Default for ReportingSpec {
    fn default() -> Self {
        ReportingSpec {
            uplink_period_s: 60.0,
            environment_period_s: 30.0,
            pulse_window_s: 10.0,
            pulse_jitter: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    /// Node `i` of `n` transmits at offset `i * period / n`.
    #[default]
    Staggered,
    /// Each node draws a fixed offset uniformly in `[0, period)`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioSpec {
    pub lora: RadioConfig,
    pub loss_prob: f64,
    pub phase: PhaseMode,
}

impl Default for RadioSpec {
    fn default() -> Self {
        RadioSpec {
            lora: RadioConfig::default(),
            loss_prob: 0.0,
            phase: PhaseMode::Staggered,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvParameter {
    Temperature,
    Humidity,
    Audio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum FaultInjection {
    WanderOut {
        cattle_id: String,
        start_s: f64,
        duration_s: f64,
    },
    SkipActivity {
        cattle_id: String,
        activity: ActivityCode,
        /// Zero-based day index counted from the scenario's first UTC day.
        day: u32,
    },
    HeartRateShift {
        cattle_id: String,
        start_s: f64,
        delta_bpm: f64,
    },
    EnvRamp {
        parameter: EnvParameter,
        value: f64,
        start_s: f64,
        end_s: f64,
        /// All environment stations when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        station_id: Option<u16>,
    },
    NodeSilence {
        node_id: u16,
        start_s: f64,
        end_s: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("ParseError: {0}")]
    Parse(String),
    #[error("DuplicateId: {kind} {value} appears more than once")]
    DuplicateId { kind: &'static str, value: String },
    #[error("DanglingFaultReference: fault #{fault} references unknown {kind} {value}")]
    DanglingFaultReference { fault: usize, kind: &'static str, value: String },
    #[error("WindowOutOfRange: fault #{fault}: {detail}")]
    WindowOutOfRange { fault: usize, detail: String },
    #[error("InvalidFence: {0}")]
    InvalidFence(FenceError),
    #[error("InvalidValue: {field}: {detail}")]
    InvalidValue { field: String, detail: String },
    #[error("HomeOutsideFence: {0} starts outside the fence")]
    HomeOutsideFence(String),
    #[error("NoStationForActivity: {cattle_id} expects {activity} but no rfid station reads it")]
    NoStationForActivity { cattle_id: String, activity: ActivityCode },
    #[error("InvalidRadio: {0}")]
    InvalidRadio(RadioConfigError),
}

/// Every validation failure of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioErrors(pub Vec<ScenarioError>);

impl fmt::Display for ScenarioErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ScenarioErrors {}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub fence: GeoFence,
}

impl Scenario {
    pub fn profiles(&self) -> Vec<CattleProfile> {
        self.spec.herd.iter().map(CowSpec::profile).collect()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.spec.seed = seed;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("scenario serializes")
    }
}

pub fn load_scenario(document: &str) -> Result<Scenario, ScenarioErrors> {
    let spec: ScenarioSpec =
        serde_json::from_str(document).map_err(|e| ScenarioErrors(vec![ScenarioError::Parse(e.to_string())]))?;
    validate(spec)
}

fn invalid(field: impl Into<String>, detail: impl Into<String>) -> ScenarioError {
    ScenarioError::InvalidValue { field: field.into(), detail: detail.into() }
}

fn positive(errors: &mut Vec<ScenarioError>, field: &str, value: f64) {
    if !(value.is_finite() && value > 0.0) {
        errors.push(invalid(field, format!("must be positive, got {value}")));
    }
}

fn check_unique<T: Ord + ToString>(errors: &mut Vec<ScenarioError>, kind: &'static str, values: impl Iterator<Item = T>) {
    let mut seen = BTreeSet::new();
    let mut reported = BTreeSet::new();
    for v in values {
        let text = v.to_string();
        if !seen.insert(v) && reported.insert(text.clone()) {
            errors.push(ScenarioError::DuplicateId { kind, value: text });
        }
    }
}

pub fn validate(spec: ScenarioSpec) -> Result<Scenario, ScenarioErrors> {
    let mut errors = Vec::new();

    positive(&mut errors, "duration_s", spec.duration_s);
    positive(&mut errors, "reporting.uplink_period_s", spec.reporting.uplink_period_s);
    positive(&mut errors, "reporting.environment_period_s", spec.reporting.environment_period_s);
    positive(&mut errors, "reporting.pulse_window_s", spec.reporting.pulse_window_s);
    positive(&mut errors, "shed.reversion_s", spec.shed.reversion_s);
    if !(0.0..=0.5).contains(&spec.reporting.pulse_jitter) {
        errors.push(invalid("reporting.pulse_jitter", "must lie in [0, 0.5]"));
    }
    if spec.reporting.pulse_window_s > spec.reporting.uplink_period_s {
        errors.push(invalid("reporting.pulse_window_s", "must not exceed the uplink period"));
    }
    for (name, d) in [("temperature", spec.shed.temperature), ("humidity", spec.shed.humidity), ("audio", spec.shed.audio)] {
        if !d.baseline.is_finite() || !(d.drift.is_finite() && d.drift >= 0.0) {
            errors.push(invalid(format!("shed.{name}"), "baseline must be finite and drift non-negative"));
        }
    }
    if !(0.0..=1.0).contains(&spec.radio.loss_prob) {
        errors.push(invalid("radio.loss_prob", "must lie in [0, 1]"));
    }
    if let Err(e) = spec.radio.lora.validate() {
        errors.push(ScenarioError::InvalidRadio(e));
    }

    let fence = match GeoFence::from_pairs(&spec.fence) {
        Ok(f) => Some(f),
        Err(e) => {
            errors.push(ScenarioError::InvalidFence(e));
            None
        }
    };

    check_unique(&mut errors, "cattle_id", spec.herd.iter().map(|c| c.cattle_id.clone()));
    check_unique(&mut errors, "node_id", spec.herd.iter().map(|c| c.node_id));
    check_unique(&mut errors, "rfid_tag", spec.herd.iter().map(|c| c.rfid_tag));
    check_unique(&mut errors, "station_id", spec.stations.iter().map(|s| s.station_id));

    let read_activities: BTreeSet<ActivityCode> = spec
        .stations
        .iter()
        .filter(|s| s.kind == StationKind::Rfid)
        .filter_map(|s| s.activity)
        .collect();
    for s in &spec.stations {
        match (s.kind, s.activity) {
            (StationKind::Rfid, None) => errors.push(invalid(format!("stations[{}]", s.station_id), "rfid station needs an activity")),
            (StationKind::Environment, Some(_)) => {
                errors.push(invalid(format!("stations[{}]", s.station_id), "environment station takes no activity"))
            }
            _ => {}
        }
    }

    for cow in &spec.herd {
        if cow.cattle_id.trim().is_empty() {
            errors.push(invalid("herd.cattle_id", "must not be empty"));
        }
        if !(20.0..=200.0).contains(&cow.base_bpm) {
            errors.push(invalid(format!("herd[{}].base_bpm", cow.cattle_id), "must lie in [20, 200]"));
        }
        if cow.heartbeat_band.min >= cow.heartbeat_band.max {
            errors.push(invalid(format!("herd[{}].heartbeat_band", cow.cattle_id), "min must be below max"));
        }
        let home = LatLon::new(cow.home.lat, cow.home.lon);
        if let Some(f) = &fence {
            if !home.is_valid() || !f.contains(home) {
                errors.push(ScenarioError::HomeOutsideFence(cow.cattle_id.clone()));
            }
        }
        for (&activity, &count) in &cow.expected_activity {
            if count > 0 && !read_activities.contains(&activity) {
                errors.push(ScenarioError::NoStationForActivity { cattle_id: cow.cattle_id.clone(), activity });
            }
            if count > 24 {
                errors.push(invalid(format!("herd[{}].expected_activity", cow.cattle_id), "at most 24 visits per day"));
            }
        }
    }

    let cattle: BTreeSet<&str> = spec.herd.iter().map(|c| c.cattle_id.as_str()).collect();
    let nodes: BTreeSet<u16> = spec.herd.iter().map(|c| c.node_id).collect();
    let env_stations: BTreeSet<u16> =
        spec.stations.iter().filter(|s| s.kind == StationKind::Environment).map(|s| s.station_id).collect();
    let days = (spec.duration_s / 86_400.0).ceil().max(1.0) as u32 + 1;
    let duration = spec.duration_s;
    for (i, fault) in spec.faults.iter().enumerate() {
        let cow_ref = |id: &str, errors: &mut Vec<ScenarioError>| {
            if !cattle.contains(id) {
                errors.push(ScenarioError::DanglingFaultReference { fault: i, kind: "cattle_id", value: id.to_string() });
            }
        };
        let window = |a: f64, b: f64, errors: &mut Vec<ScenarioError>| {
            if !(a.is_finite() && b.is_finite() && 0.0 <= a && a <= b && b <= duration) {
                errors.push(ScenarioError::WindowOutOfRange {
                    fault: i,
                    detail: format!("[{a}, {b}] not within [0, {duration}]"),
                });
            }
        };
        match fault {
            FaultInjection::WanderOut { cattle_id, start_s, duration_s } => {
                cow_ref(cattle_id, &mut errors);
                if *duration_s <= 0.0 {
                    errors.push(ScenarioError::WindowOutOfRange { fault: i, detail: "duration must be positive".into() });
                }
                window(*start_s, start_s + duration_s, &mut errors);
            }
            FaultInjection::SkipActivity { cattle_id, activity, day } => {
                cow_ref(cattle_id, &mut errors);
                if *day >= days {
                    errors.push(ScenarioError::WindowOutOfRange { fault: i, detail: format!("day {day} beyond scenario") });
                }
                let expected = spec.herd.iter().find(|c| &c.cattle_id == cattle_id).and_then(|c| c.expected_activity.get(activity));
                if cattle.contains(cattle_id.as_str()) && expected.copied().unwrap_or(0) == 0 {
                    errors.push(invalid(format!("faults[{i}]"), format!("{cattle_id} has no scheduled {activity:?} visit to skip")));
                }
            }
            FaultInjection::HeartRateShift { cattle_id, start_s, delta_bpm } => {
                cow_ref(cattle_id, &mut errors);
                window(*start_s, *start_s, &mut errors);
                if !delta_bpm.is_finite() {
                    errors.push(invalid(format!("faults[{i}].delta_bpm"), "must be finite"));
                }
            }
            FaultInjection::EnvRamp { start_s, end_s, station_id, value, .. } => {
                window(*start_s, *end_s, &mut errors);
                if start_s >= end_s {
                    errors.push(ScenarioError::WindowOutOfRange { fault: i, detail: "ramp needs start_s < end_s".into() });
                }
                if !value.is_finite() {
                    errors.push(invalid(format!("faults[{i}].value"), "must be finite"));
                }
                if let Some(id) = station_id {
                    if !env_stations.contains(id) {
                        errors.push(ScenarioError::DanglingFaultReference { fault: i, kind: "station_id", value: id.to_string() });
                    }
                }
            }
            FaultInjection::NodeSilence { node_id, start_s, end_s } => {
                if !nodes.contains(node_id) {
                    errors.push(ScenarioError::DanglingFaultReference { fault: i, kind: "node_id", value: node_id.to_string() });
                }
                window(*start_s, *end_s, &mut errors);
            }
        }
    }

    match (errors.is_empty(), fence) {
        (true, Some(fence)) => Ok(Scenario { spec, fence }),
        _ => Err(ScenarioErrors(errors)),
    }
}

/// Scenario files shipped with the crate, by name.
pub const BUNDLED: [(&str, &str); 5] = [
    ("milking-deficit", include_str!("../../scenarios/milking-deficit.json")),
    ("milking-baseline", include_str!("../../scenarios/milking-baseline.json")),
    ("wander-out", include_str!("../../scenarios/wander-out.json")),
    ("env-ramp", include_str!("../../scenarios/env-ramp.json")),
    ("node-silence", include_str!("../../scenarios/node-silence.json")),
];

pub fn bundled(name: &str) -> Option<Scenario> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, doc)| load_scenario(doc).unwrap_or_else(|e| panic!("bundled scenario {name} invalid: {e}")))
}

/// Default daily visits for generated herds.
pub const DEFAULT_SCHEDULE: [(ActivityCode, u32); 4] = [
    (ActivityCode::Milking, 2),
    (ActivityCode::Feeding, 3),
    (ActivityCode::Watering, 4),
    (ActivityCode::Resting, 1),
];

/// A fault-free herd of `cows` on the default schedule, homes on a grid
/// inside a square paddock.
pub fn generate_scenario(cows: usize, days: u32, seed: u64) -> ScenarioSpec {
    let (lat0, lon0) = (48.1173, 11.5167);
    let side = 0.01;
    let per_row = (cows as f64).sqrt().ceil().max(1.0) as usize;
    let step = side / (per_row as f64 + 1.0);
    let herd = (0..cows)
        .map(|i| CowSpec {
            cattle_id: format!("cow-{:04}", i + 1),
            node_id: (i + 1) as u16,
            rfid_tag: 100_000 + i as u32,
            home: HomePosition {
                lat: lat0 + step * ((i / per_row) as f64 + 1.0),
                lon: lon0 + step * ((i % per_row) as f64 + 1.0),
                alt: 520.0,
            },
            expected_activity: DEFAULT_SCHEDULE.into_iter().collect(),
            base_bpm: 60.0 + (i % 13) as f64,
            heartbeat_band: HeartbeatBand::default(),
        })
        .collect();
    let mut stations = vec![StationSpec { station_id: 1, kind: StationKind::Environment, activity: None }];
    stations.extend(ActivityCode::ALL.iter().enumerate().map(|(i, &a)| StationSpec {
        station_id: 10 + i as u16,
        kind: StationKind::Rfid,
        activity: Some(a),
    }));
    ScenarioSpec {
        name: format!("generated-{cows}x{days}d"),
        seed,
        duration_s: f64::from(days) * 86_400.0,
        start_time: DEFAULT_START,
        fence: vec![(lat0, lon0), (lat0, lon0 + side), (lat0 + side, lon0 + side), (lat0 + side, lon0)],
        herd,
        shed: ShedSpec::default(),
        stations,
        reporting: ReportingSpec::default(),
        radio: RadioSpec { loss_prob: 0.01, ..RadioSpec::default() },
        faults: Vec::new(),
    }
}
