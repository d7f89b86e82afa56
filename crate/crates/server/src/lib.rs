//! HTTP API over a shared [`Aggregator`]: JSON queries and commands under
//! `/api/v1`, plus a server-sent event stream of every committed record.
//!
//! All timestamps in responses are ISO-8601 UTC strings.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cattlesense::aggregator::{AckError, Aggregator, Band, CowState, EventRecord, IngestResult, StationState};
use cattlesense::domain::{
    ActivityCode, ActivityCounter, Alert, AlertState, CattleProfile, GeoFence, HeartbeatBand, ProfileRejection,
};
use cattlesense::sim::{FrameLink, FrameSink};
use cattlesense::Timestamp;
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;
use tokio_stream::wrappers::BroadcastStream;

const STREAM_CAPACITY: usize = 4096;

/// Where "now" comes from for commands that carry no time of their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    /// Wall clock, never earlier than the last committed record.
    Wall,
    /// The aggregator's own clock, for servers fed by a simulation.
    Log,
}

/// Shared handle to the aggregator and the record broadcast.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Aggregator>>,
    events: broadcast::Sender<EventRecord>,
    clock: ClockMode,
}

impl AppState {
    /// Wraps `aggregator` and routes every record it commits from now on to
    /// the stream.
    pub fn new(mut aggregator: Aggregator, clock: ClockMode) -> Self {
        let (events, _) = broadcast::channel(STREAM_CAPACITY);
        let tx = events.clone();
        aggregator.set_observer(move |r| {
            let _ = tx.send(r.clone());
        });
        AppState { inner: Arc::new(Mutex::new(aggregator)), events, clock }
    }

    pub fn lock(&self) -> MutexGuard<'_, Aggregator> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn subscribe(&self) -> broadcast::Receiver<EventRecord> {
        self.events.subscribe()
    }

    fn now(&self, agg: &Aggregator) -> Timestamp {
        let logged = agg.state().clock;
        match self.clock {
            ClockMode::Wall => logged.map_or_else(Timestamp::now, |c| c.max(Timestamp::now())),
            ClockMode::Log => logged.unwrap_or_else(Timestamp::now),
        }
    }
}

/// Feeds simulated frames into the shared aggregator.
impl FrameSink for AppState {
    fn uplink(&mut self, bytes: &[u8], arrival: Timestamp) {
        self.lock().ingest_uplink(bytes, arrival);
    }
    fn station(&mut self, bytes: &[u8], arrival: Timestamp) {
        self.lock().ingest_station(bytes, arrival);
    }
    fn tick(&mut self, now: Timestamp) {
        self.lock().tick(now);
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, kind, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.kind, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_time(field: &'static str, text: &str) -> ApiResult<Timestamp> {
    Timestamp::parse_iso(text).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadTimestamp", format!("{field}: {e}")))
}

fn iso_secs(secs: u64) -> String {
    Timestamp::from_secs(secs as i64).to_iso()
}

#[derive(Debug, Serialize)]
struct EnvView {
    station_id: u16,
    temperature: f64,
    humidity: u8,
    audio_level: f64,
    captured: String,
    arrival: Timestamp,
}

#[derive(Debug, Serialize)]
struct StationView {
    station_id: u16,
    kind: cattlesense::sim::StationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    activity: Option<ActivityCode>,
    frames: u64,
    latest: Option<EnvView>,
    ring: Vec<EnvView>,
}

#[derive(Debug, Serialize)]
struct Bands {
    humidity: Band,
    temperature: Band,
    audio: Band,
    persistence_k: usize,
}

#[derive(Debug, Serialize)]
struct EnvironmentView {
    bands: Bands,
    stations: Vec<StationView>,
}

fn station_view(st: &StationState) -> StationView {
    let ring: Vec<EnvView> = st
        .ring
        .iter()
        .map(|(arrival, s)| EnvView {
            station_id: s.station_id,
            temperature: s.temperature,
            humidity: s.humidity,
            audio_level: s.audio_level,
            captured: iso_secs(s.timestamp),
            arrival: *arrival,
        })
        .collect();
    let latest = st.ring.back().map(|(arrival, s)| EnvView {
        station_id: s.station_id,
        temperature: s.temperature,
        humidity: s.humidity,
        audio_level: s.audio_level,
        captured: iso_secs(s.timestamp),
        arrival: *arrival,
    });
    StationView { station_id: st.station_id, kind: st.kind, activity: st.activity, frames: st.frames, latest, ring }
}

async fn environment_latest(State(app): State<AppState>) -> Json<EnvironmentView> {
    let agg = app.lock();
    let rules = agg.rules();
    Json(EnvironmentView {
        bands: Bands {
            humidity: rules.humidity,
            temperature: rules.temperature,
            audio: rules.audio,
            persistence_k: rules.persistence_k,
        },
        stations: agg.state().stations.values().map(station_view).collect(),
    })
}

#[derive(Debug, Serialize)]
struct FixView {
    lat: f64,
    lon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    altitude: Option<f64>,
    captured: String,
}

#[derive(Debug, Serialize)]
struct CattleView {
    cattle_id: String,
    node_id: u16,
    rfid_tag: u32,
    expected_activity: BTreeMap<ActivityCode, u32>,
    heartbeat_band: HeartbeatBand,
    registered_at: Timestamp,
    last_heard: Option<Timestamp>,
    latest_fix: Option<FixView>,
    latest_bpm: Option<u8>,
    in_fence: Option<bool>,
    counter: Option<ActivityCounter>,
    daily: BTreeMap<ActivityCode, u32>,
    open_alerts: usize,
}

fn cattle_view(cow: &CowState, agg: &Aggregator) -> CattleView {
    let p = &cow.profile;
    CattleView {
        cattle_id: p.cattle_id.clone(),
        node_id: p.node_id,
        rfid_tag: p.rfid_tag,
        expected_activity: p.expected_activity.clone(),
        heartbeat_band: p.heartbeat_band,
        registered_at: cow.registered_at,
        last_heard: cow.last_heard,
        latest_fix: cow.latest_fix.and_then(|f| {
            f.position.map(|pos| FixView { lat: pos.lat, lon: pos.lon, altitude: f.altitude, captured: iso_secs(f.timestamp) })
        }),
        latest_bpm: cow.latest_bpm,
        in_fence: cow.in_fence,
        counter: cow.counter.clone(),
        daily: cow.daily.clone(),
        open_alerts: agg
            .state()
            .alerts
            .values()
            .filter(|a| a.is_active() && (a.subject == p.cattle_id || a.subject.starts_with(&format!("{}/", p.cattle_id))))
            .count(),
    }
}

async fn list_cattle(State(app): State<AppState>) -> Json<Vec<CattleView>> {
    let agg = app.lock();
    Json(agg.state().cows.values().map(|c| cattle_view(c, &agg)).collect())
}

async fn register_cattle(State(app): State<AppState>, Json(profile): Json<CattleProfile>) -> ApiResult<impl IntoResponse> {
    let mut agg = app.lock();
    let now = app.now(&agg);
    let id = profile.cattle_id.clone();
    match agg.register_profile(profile, now) {
        Ok(warnings) => {
            let view = cattle_view(&agg.state().cows[&id], &agg);
            Ok((StatusCode::CREATED, Json(serde_json::json!({ "cattle": view, "warnings": warnings }))))
        }
        Err(e) => {
            let (status, kind) = match e {
                ProfileRejection::DuplicateTag(_) => (StatusCode::CONFLICT, "DuplicateTag"),
                ProfileRejection::DuplicateNode(_) => (StatusCode::CONFLICT, "DuplicateNode"),
                ProfileRejection::DuplicateId(_) => (StatusCode::CONFLICT, "DuplicateId"),
                ProfileRejection::EmptyId => (StatusCode::UNPROCESSABLE_ENTITY, "EmptyId"),
                ProfileRejection::InvalidHeartbeatBand { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "InvalidHeartbeatBand"),
            };
            Err(ApiError::new(status, kind, e.to_string()))
        }
    }
}

#[derive(Debug, Deserialize)]
struct Range {
    from: Option<String>,
    to: Option<String>,
}

#[derive(Debug, Serialize)]
struct PointView {
    arrival: Timestamp,
    captured: String,
    seq: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    altitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bpm: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_fence: Option<bool>,
}

async fn telemetry(State(app): State<AppState>, Path(id): Path<String>, Query(range): Query<Range>) -> ApiResult<Json<serde_json::Value>> {
    let from = range.from.as_deref().map(|t| parse_time("from", t)).transpose()?;
    let to = range.to.as_deref().map(|t| parse_time("to", t)).transpose()?;
    let agg = app.lock();
    let cow = agg
        .state()
        .cows
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "NotFound", format!("no cattle {id:?}")))?;
    let points: Vec<PointView> = cow
        .history
        .iter()
        .filter(|p| from.is_none_or(|f| p.arrival >= f) && to.is_none_or(|t| p.arrival <= t))
        .map(|p| PointView {
            arrival: p.arrival,
            captured: iso_secs(p.captured),
            seq: p.seq,
            lat: p.position.map(|x| x.lat),
            lon: p.position.map(|x| x.lon),
            altitude: p.altitude,
            bpm: p.bpm,
            in_fence: p.in_fence,
        })
        .collect();
    Ok(Json(serde_json::json!({ "cattle_id": id, "points": points })))
}

#[derive(Debug, Deserialize)]
struct AlertFilter {
    state: Option<String>,
}

#[derive(Debug, Serialize)]
struct AlertView {
    #[serde(flatten)]
    alert: Alert,
    state: AlertState,
}

async fn list_alerts(State(app): State<AppState>, Query(filter): Query<AlertFilter>) -> ApiResult<Json<Vec<AlertView>>> {
    let keep: fn(AlertState) -> bool = match filter.state.as_deref().unwrap_or("all") {
        "open" => |s| s == AlertState::Open,
        "acked" => |s| s == AlertState::Acknowledged,
        "resolved" => |s| s == AlertState::Resolved,
        "all" => |_| true,
        other => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "BadFilter",
                format!("state must be open, acked, resolved or all, not {other:?}"),
            ))
        }
    };
    let agg = app.lock();
    Ok(Json(
        agg.state()
            .alerts
            .values()
            .filter(|a| keep(a.state()))
            .map(|a| AlertView { alert: a.clone(), state: a.state() })
            .collect(),
    ))
}

#[derive(Debug, Default, Deserialize)]
struct AckBody {
    actor: Option<String>,
}

async fn ack_alert(State(app): State<AppState>, Path(id): Path<u64>, body: Option<Json<AckBody>>) -> ApiResult<Json<AlertView>> {
    let actor = body.and_then(|Json(b)| b.actor).unwrap_or_else(|| "admin".to_string());
    let mut agg = app.lock();
    let now = app.now(&agg);
    match agg.acknowledge_alert(id, &actor, now) {
        Ok(alert) => Ok(Json(AlertView { state: alert.state(), alert })),
        Err(e @ AckError::NotFound(_)) => Err(ApiError::new(StatusCode::NOT_FOUND, "NotFound", e.to_string())),
        Err(e @ AckError::NotOpen(_)) => Err(ApiError::new(StatusCode::CONFLICT, "NotOpen", e.to_string())),
    }
}

async fn get_geofence(State(app): State<AppState>) -> Json<serde_json::Value> {
    let agg = app.lock();
    let s = agg.state();
    Json(serde_json::json!({ "version": s.fence_version, "vertices": s.fence }))
}

/// Either a bare `[[lat, lon], ...]` array or `{"vertices": [...]}`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum FenceBody {
    Bare(Vec<(f64, f64)>),
    Wrapped { vertices: Vec<(f64, f64)> },
}

async fn put_geofence(State(app): State<AppState>, Json(body): Json<FenceBody>) -> ApiResult<Json<serde_json::Value>> {
    let vertices = match body {
        FenceBody::Bare(v) | FenceBody::Wrapped { vertices: v } => v,
    };
    let fence = GeoFence::from_pairs(&vertices)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidFence", e.to_string()))?;
    let mut agg = app.lock();
    let now = app.now(&agg);
    let version = agg.set_fence(fence, now);
    Ok(Json(serde_json::json!({ "version": version, "vertices": vertices })))
}

async fn stats(State(app): State<AppState>) -> Json<serde_json::Value> {
    let agg = app.lock();
    let s = agg.state();
    let open = s.alerts.values().filter(|a| a.is_active()).count();
    let (log_failures, last_log_error) = agg.log_failures();
    Json(serde_json::json!({
        "frames_accepted": s.stats.frames_accepted,
        "frames_rejected": s.stats.frames_rejected,
        "uplink_accepted": s.stats.uplink_accepted,
        "station_accepted": s.stats.station_accepted,
        "rejected_by_cause": s.stats.rejected_by_cause,
        "events": s.stats.events,
        "last_seq": s.last_seq,
        "clock": s.clock,
        "cattle": s.cows.len(),
        "stations": s.stations.len(),
        "open_alerts": open,
        "alerts_by_rule": agg.alerts_by_rule(),
        "log_failures": log_failures,
        "last_log_error": last_log_error,
    }))
}

#[derive(Debug, Deserialize)]
struct IngestBody {
    hex: String,
    arrival: Option<String>,
}

async fn ingest(app: AppState, link: FrameLink, body: IngestBody) -> ApiResult<Response> {
    let bytes = hex::decode(body.hex.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadHex", e.to_string()))?;
    let arrival = body.arrival.as_deref().map(|t| parse_time("arrival", t)).transpose()?;
    let mut agg = app.lock();
    let arrival = arrival.unwrap_or_else(|| app.now(&agg));
    let seq = agg.state().last_seq + 1;
    Ok(match agg.ingest(link, &bytes, arrival) {
        IngestResult::Accepted => {
            (StatusCode::OK, Json(serde_json::json!({ "result": "accepted", "seq": seq }))).into_response()
        }
        IngestResult::Rejected(cause) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(serde_json::json!({ "result": "rejected", "cause": cause, "seq": seq })),
        )
            .into_response(),
    })
}

async fn ingest_uplink(State(app): State<AppState>, Json(body): Json<IngestBody>) -> ApiResult<Response> {
    ingest(app, FrameLink::Uplink, body).await
}

async fn ingest_station(State(app): State<AppState>, Json(body): Json<IngestBody>) -> ApiResult<Response> {
    ingest(app, FrameLink::Station, body).await
}

/// Every record as it commits. The SSE event name is the record kind and
/// the id its sequence number; a lagging client skips what it missed.
fn record_stream(rx: broadcast::Receiver<EventRecord>) -> impl Stream<Item = Result<SseEvent, Infallible>> {
    BroadcastStream::new(rx).filter_map(|item| async move {
        let record = item.ok()?;
        Some(Ok(SseEvent::default()
            .id(record.seq.to_string())
            .event(record.event.kind())
            .data(record.to_json_line())))
    })
}

async fn stream(State(app): State<AppState>) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    Sse::new(record_stream(app.subscribe())).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/environment/latest", get(environment_latest))
        .route("/api/v1/cattle", get(list_cattle).post(register_cattle))
        .route("/api/v1/cattle/{id}/telemetry", get(telemetry))
        .route("/api/v1/alerts", get(list_alerts))
        .route("/api/v1/alerts/{id}/ack", post(ack_alert))
        .route("/api/v1/geofence", get(get_geofence).put(put_geofence))
        .route("/api/v1/stats", get(stats))
        .route("/api/v1/stream", get(stream))
        .route("/api/v1/ingest/uplink", post(ingest_uplink))
        .route("/api/v1/ingest/station", post(ingest_station))
        .with_state(state)
}

/// Sweeps the aggregator clock every `period` so day rollovers and node
/// silence fire without traffic, and flushes the log so an idle server
/// loses nothing buffered. Only meaningful with [`ClockMode::Wall`].
pub fn spawn_ticker(state: AppState, period: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        loop {
            interval.tick().await;
            let mut agg = state.lock();
            let now = state.now(&agg);
            agg.tick(now);
            let _ = agg.flush_log();
        }
    })
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
