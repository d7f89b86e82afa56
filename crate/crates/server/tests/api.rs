use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use cattlesense::aggregator::{Aggregator, RuleConfig};
use cattlesense::codec::{encode_station, encode_uplink, NodeUplinkFrame, StationFrame, UplinkFlags};
use cattlesense::domain::{ActivityCode, CattleProfile, GeoFence, HeartbeatBand};
use cattlesense::sim::{FrameSink, StationKind};
use cattlesense::Timestamp;
use cattlesense_server::{router, AppState, ClockMode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const T0: Timestamp = Timestamp::from_secs(1_704_067_200);

fn profile(id: &str, node: u16, tag: u32) -> CattleProfile {
    CattleProfile {
        cattle_id: id.into(),
        rfid_tag: tag,
        node_id: node,
        expected_activity: BTreeMap::from([(ActivityCode::Milking, 3)]),
        heartbeat_band: HeartbeatBand::default(),
    }
}

fn app() -> AppState {
    let mut agg = Aggregator::in_memory(RuleConfig::strict());
    agg.register_station(1, StationKind::Environment, None, T0).unwrap();
    agg.register_station(2, StationKind::Rfid, Some(ActivityCode::Milking), T0).unwrap();
    agg.set_fence(GeoFence::from_pairs(&[(0.0, 0.0), (0.0, 0.01), (0.01, 0.01), (0.01, 0.0)]).unwrap(), T0);
    agg.register_profile(profile("cow-a", 1, 1001), T0).unwrap();
    AppState::new(agg, ClockMode::Log)
}

fn uplink_hex(node: u16, lat: f64, lon: f64, bpm: u8) -> String {
    let f = NodeUplinkFrame {
        node_id: node,
        latitude_e7: (lat * 1e7) as i32,
        longitude_e7: (lon * 1e7) as i32,
        bpm,
        flags: UplinkFlags { gps_valid: true, low_battery: false },
        ..Default::default()
    };
    hex::encode(encode_uplink(&f).unwrap())
}

fn env_hex(t: f64, h: u8, a: f64) -> String {
    hex::encode(encode_station(&StationFrame::environment(1, 0, 0, t, h, a).unwrap()).unwrap())
}

async fn call(state: &AppState, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn iso(s: i64) -> String {
    T0.plus_secs(s).to_iso()
}

#[tokio::test]
async fn ingest_then_query_cattle_and_telemetry() {
    let app = app();
    for (i, lat) in [0.005, 0.006, 0.007].into_iter().enumerate() {
        let (st, v) = call(
            &app,
            Method::POST,
            "/api/v1/ingest/uplink",
            Some(json!({ "hex": uplink_hex(1, lat, 0.005, 70), "arrival": iso(60 * (i as i64 + 1)) })),
        )
        .await;
        assert_eq!(st, StatusCode::OK, "{v}");
        assert_eq!(v["result"], "accepted");
    }
    let (st, v) = call(&app, Method::GET, "/api/v1/cattle", None).await;
    assert_eq!(st, StatusCode::OK);
    let cow = &v[0];
    assert_eq!(cow["cattle_id"], "cow-a");
    assert_eq!(cow["latest_bpm"], 70);
    assert_eq!(cow["in_fence"], true);
    assert_eq!(cow["last_heard"], iso(180));
    assert!((cow["latest_fix"]["lat"].as_f64().unwrap() - 0.007).abs() < 1e-6);

    let uri = format!("/api/v1/cattle/cow-a/telemetry?from={}&to={}", iso(100), iso(200));
    let (st, v) = call(&app, Method::GET, &uri, None).await;
    assert_eq!(st, StatusCode::OK);
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0]["arrival"], iso(120));

    let (st, v) = call(&app, Method::GET, "/api/v1/cattle/cow-z/telemetry", None).await;
    assert_eq!((st, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("NotFound")));
    let (st, _) = call(&app, Method::GET, "/api/v1/cattle/cow-a/telemetry?from=yesterday", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn ingest_rejections_report_their_cause() {
    let app = app();
    let mut bad = uplink_hex(1, 0.005, 0.005, 70).into_bytes();
    bad[12] = if bad[12] == b'0' { b'1' } else { b'0' };
    let cases = [
        (String::from_utf8(bad).unwrap(), "CrcMismatch"),
        (uplink_hex(9, 0.005, 0.005, 70), "UnknownNode"),
        ("0011".to_string(), "BadLength"),
    ];
    for (hex, cause) in cases {
        let (st, v) = call(&app, Method::POST, "/api/v1/ingest/uplink", Some(json!({ "hex": hex }))).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(v["cause"], cause);
    }
    let (st, v) = call(&app, Method::POST, "/api/v1/ingest/station", Some(json!({ "hex": "zz" }))).await;
    assert_eq!((st, v["error"].as_str()), (StatusCode::BAD_REQUEST, Some("BadHex")));

    let (_, stats) = call(&app, Method::GET, "/api/v1/stats", None).await;
    assert_eq!(stats["frames_rejected"], 3);
    assert_eq!(stats["rejected_by_cause"]["UnknownNode"], 1);
}

#[tokio::test]
async fn environment_latest_has_ring_and_bands() {
    let app = app();
    for i in 0..4 {
        let body = json!({ "hex": env_hex(20.0 + i as f64, 50, 40.0), "arrival": iso(30 * (i + 1)) });
        let (st, _) = call(&app, Method::POST, "/api/v1/ingest/station", Some(body)).await;
        assert_eq!(st, StatusCode::OK);
    }
    let (st, v) = call(&app, Method::GET, "/api/v1/environment/latest", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["bands"]["humidity"], json!({ "min": 30.0, "max": 80.0 }));
    assert_eq!(v["bands"]["persistence_k"], 1);
    let shed = v["stations"].as_array().unwrap().iter().find(|s| s["station_id"] == 1).unwrap();
    assert_eq!(shed["ring"].as_array().unwrap().len(), 4);
    assert_eq!(shed["latest"]["temperature"], 23.0);
    assert_eq!(shed["latest"]["arrival"], iso(120));
}

#[tokio::test]
async fn register_cattle_status_codes() {
    let app = app();
    let mut fresh = serde_json::to_value(profile("cow-b", 2, 1002)).unwrap();
    let (st, v) = call(&app, Method::POST, "/api/v1/cattle", Some(fresh.clone())).await;
    assert_eq!(st, StatusCode::CREATED, "{v}");
    assert_eq!(v["cattle"]["cattle_id"], "cow-b");
    assert_eq!(v["warnings"], json!([]));

    let (st, v) = call(&app, Method::POST, "/api/v1/cattle", Some(fresh.clone())).await;
    assert_eq!((st, v["error"].as_str()), (StatusCode::CONFLICT, Some("DuplicateId")));

    fresh["cattle_id"] = json!("");
    fresh["rfid_tag"] = json!(5);
    fresh["node_id"] = json!(5);
    let (st, v) = call(&app, Method::POST, "/api/v1/cattle", Some(fresh.clone())).await;
    assert_eq!((st, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("EmptyId")));

    fresh["cattle_id"] = json!("cow-c");
    fresh["heartbeat_band"] = json!({ "min": 90, "max": 50 });
    let (st, v) = call(&app, Method::POST, "/api/v1/cattle", Some(fresh.clone())).await;
    assert_eq!((st, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("InvalidHeartbeatBand")));

    let empty = json!({ "cattle_id": "cow-d", "rfid_tag": 6, "node_id": 6 });
    let (st, v) = call(&app, Method::POST, "/api/v1/cattle", Some(empty)).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(v["warnings"], json!(["EmptyExpectedActivity"]));
}

#[tokio::test]
async fn fence_edit_breach_and_acknowledge() {
    let app = app();
    let body = json!({ "hex": uplink_hex(1, 0.005, 0.005, 70), "arrival": iso(60) });
    call(&app, Method::POST, "/api/v1/ingest/uplink", Some(body)).await;

    let (st, v) = call(&app, Method::PUT, "/api/v1/geofence", Some(json!([[0.0, 0.0], [0.0, 0.001], [0.001, 0.0]]))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["version"], 2);
    let (st, v) = call(&app, Method::PUT, "/api/v1/geofence", Some(json!([[0.0, 0.0], [0.0, 1.0]]))).await;
    assert_eq!((st, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("InvalidFence")));
    let (_, v) = call(&app, Method::GET, "/api/v1/geofence", None).await;
    assert_eq!(v["vertices"].as_array().unwrap().len(), 3);

    // the next uplink from the same spot is now outside
    let body = json!({ "hex": uplink_hex(1, 0.005, 0.005, 70), "arrival": iso(120) });
    call(&app, Method::POST, "/api/v1/ingest/uplink", Some(body)).await;
    let (_, open) = call(&app, Method::GET, "/api/v1/alerts?state=open", None).await;
    let open = open.as_array().unwrap();
    assert_eq!(open.len(), 1);
    assert_eq!(open[0]["rule"], "GeofenceBreach");
    assert_eq!(open[0]["opened_at"], iso(120));
    let id = open[0]["alert_id"].as_u64().unwrap();

    let (st, v) = call(&app, Method::POST, &format!("/api/v1/alerts/{id}/ack"), Some(json!({ "actor": "pat" }))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["state"], "Acknowledged");
    let (st, _) = call(&app, Method::POST, &format!("/api/v1/alerts/{id}/ack"), None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = call(&app, Method::POST, "/api/v1/alerts/999/ack", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let (_, acked) = call(&app, Method::GET, "/api/v1/alerts?state=acked", None).await;
    assert_eq!(acked.as_array().unwrap().len(), 1);
    let (_, open) = call(&app, Method::GET, "/api/v1/alerts?state=open", None).await;
    assert!(open.as_array().unwrap().is_empty());
    let (st, _) = call(&app, Method::GET, "/api/v1/alerts?state=bogus", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn stream_emits_every_record_in_order() {
    let app = app();
    let resp = router(app.clone()).oneshot(Request::get("/api/v1/stream").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();

    let first_seq = app.lock().state().last_seq + 1;
    let mut sink = app.clone();
    sink.uplink(&hex::decode(uplink_hex(1, 0.005, 0.005, 70)).unwrap(), T0.plus_secs(60));
    sink.uplink(&hex::decode(uplink_hex(7, 0.005, 0.005, 70)).unwrap(), T0.plus_secs(61));

    let mut text = String::new();
    while text.matches("\n\n").count() < 2 {
        let frame = body.frame().await.unwrap().unwrap();
        if let Ok(data) = frame.into_data() {
            text.push_str(std::str::from_utf8(&data).unwrap());
        }
    }
    let events: Vec<&str> = text.split("\n\n").filter(|e| !e.is_empty()).collect();
    let field = |e: &str, name: &str| {
        e.lines().find_map(|l| l.strip_prefix(&format!("{name}:")).map(|v| v.trim().to_string())).unwrap()
    };
    assert_eq!(field(events[0], "event"), "FrameAccepted");
    assert_eq!(field(events[0], "id"), first_seq.to_string());
    assert_eq!(field(events[1], "event"), "FrameRejected");
    assert_eq!(field(events[1], "id"), (first_seq + 1).to_string());
    let record: Value = serde_json::from_str(&field(events[1], "data")).unwrap();
    assert_eq!(record["seq"], first_seq + 1);
}
