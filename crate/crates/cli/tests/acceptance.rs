//! Acceptance checks, one PASS/FAIL line each. Run with
//! `cargo test -p cattlesense-cli --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use cattlesense::aggregator::{read_log_file, Aggregator, Event, NullLog, RuleConfig};
use cattlesense::codec::{
    crc16, decode_station, decode_uplink, encode_station, encode_uplink, inspect, NodeUplinkFrame, StationBody,
    StationFrame, UplinkFlags,
};
use cattlesense::domain::{ActivityCode, AlertRule, GeoFence, LatLon};
use cattlesense::netsim::{airtime, Outcome, RadioConfig};
use cattlesense::nmea::{checksum_byte, parse_bytes, parse_sentence};
use cattlesense::biosignal::estimate_bpm;
use cattlesense::sim::{bundled, generate_scenario, run, synthesize_pulse, validate, RunOptions, StationKind, BUNDLED};
use cattlesense::Timestamp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_cattlesense");

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios").join(format!("{name}.json"))
}

fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("CATTLESENSE_RULES").output().expect("binary runs")
}

fn summary(o: &Output) -> BTreeMap<String, String> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .filter_map(|l| l.split_once(": ").map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn milking_deficit() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("deficit.jsonl");
    let t = Instant::now();
    let o = cli(&["simulate", "--scenario", scenario_path("milking-deficit").to_str().unwrap(), "--as-fast-as-possible", "--out", log.to_str().unwrap()]);
    let elapsed = t.elapsed().as_secs_f64();
    check(o.status.success(), "simulate failed")?;
    let deficits: Vec<_> = read_log_file(&log)
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter_map(|r| match r.event {
            Event::AlertOpened { alert } if alert.rule == AlertRule::ActivityFrequencyDeficit => Some(alert),
            _ => None,
        })
        .collect();
    check(deficits.len() == 1, format!("{} deficit alerts", deficits.len()))?;
    check(deficits[0].detail == "2 of 3", format!("detail {:?}", deficits[0].detail))?;
    check(deficits[0].opened_at.secs() % 86_400 == 0, format!("opened at {}", deficits[0].opened_at.to_iso()))?;

    let twin = cli(&["simulate", "--scenario", scenario_path("milking-baseline").to_str().unwrap(), "--as-fast-as-possible"]);
    let twin_count = summary(&twin).get("alerts.ActivityFrequencyDeficit").cloned().unwrap_or_default();
    check(twin_count == "0", format!("fault-free twin raised {twin_count}"))?;
    check(elapsed < 10.0, format!("runtime {elapsed:.2} s"))?;
    Ok(format!("1 alert \"2 of 3\" at {}, twin 0, runtime {elapsed:.2} s", deficits[0].opened_at.to_iso()))
}

fn threshold_matrix() -> Verdict {
    let t0 = Timestamp::from_secs(1_704_067_200);
    let cases: [(&str, f64, u8, f64, Option<AlertRule>); 11] = [
        ("humidity 29", 20.0, 29, 40.0, Some(AlertRule::HumidityOutOfRange)),
        ("humidity 30", 20.0, 30, 40.0, None),
        ("humidity 80", 20.0, 80, 40.0, None),
        ("humidity 81", 20.0, 81, 40.0, Some(AlertRule::HumidityOutOfRange)),
        ("temperature 9.9", 9.9, 50, 40.0, Some(AlertRule::TemperatureOutOfRange)),
        ("temperature 10.0", 10.0, 50, 40.0, None),
        ("temperature 30.0", 30.0, 50, 40.0, None),
        ("temperature 30.1", 30.1, 50, 40.0, Some(AlertRule::TemperatureOutOfRange)),
        ("audio 34.9", 20.0, 50, 34.9, Some(AlertRule::AudioOutOfRange)),
        ("audio 40.0", 20.0, 50, 40.0, None),
        ("audio 45.1", 20.0, 50, 45.1, Some(AlertRule::AudioOutOfRange)),
    ];
    for (name, t, h, a, want) in cases {
        let mut agg = Aggregator::in_memory(RuleConfig::strict());
        agg.register_station(1, StationKind::Environment, None, t0).unwrap();
        let frame = encode_station(&StationFrame::environment(1, 0, 0, t, h, a).unwrap()).unwrap();
        check(agg.ingest_station(&frame, t0.plus_secs(30)).is_accepted(), format!("{name}: frame rejected"))?;
        let got: Vec<AlertRule> = agg.state().alerts.values().filter(|x| x.is_active()).map(|x| x.rule).collect();
        let expected: Vec<AlertRule> = want.into_iter().collect();
        check(got == expected, format!("{name}: got {got:?}, want {expected:?}"))?;
    }
    Ok(format!("{} cases exact in strict mode", cases.len()))
}

/// Crossing-number test with edge points counted as inside.
fn ray_cast(poly: &[(f64, f64)], lat: f64, lon: f64) -> bool {
    let n = poly.len();
    for i in 0..n {
        let ((ay, ax), (by, bx)) = (poly[i], poly[(i + 1) % n]);
        let cross = (bx - ax) * (lat - ay) - (by - ay) * (lon - ax);
        if cross == 0.0 && lon >= ax.min(bx) && lon <= ax.max(bx) && lat >= ay.min(by) && lat <= ay.max(by) {
            return true;
        }
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let ((yi, xi), (yj, xj)) = (poly[i], poly[j]);
        if (yi > lat) != (yj > lat) && lon < (xj - xi) * (lat - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn geofence() -> Verdict {
    let s = bundled("wander-out").unwrap();
    let mut agg = Aggregator::in_memory(RuleConfig::default());
    agg.provision(&s).unwrap();
    run(&s, &mut agg, RunOptions::default());
    let period = s.spec.reporting.uplink_period_s;
    let (start, back) = (1800.0, 2400.0);
    let breaches: Vec<_> = agg.state().alerts.values().filter(|a| a.rule == AlertRule::GeofenceBreach).collect();
    check(breaches.len() == 1, format!("{} breach alerts", breaches.len()))?;
    let since = |t: Timestamp| (t - s.spec.start_time) as f64 / 1000.0;
    let opened = since(breaches[0].opened_at);
    let resolved = breaches[0].resolved_at.map(since).ok_or("breach never resolved")?;
    check(opened >= start && opened <= start + period, format!("opened at {opened} s"))?;
    check(resolved >= back && resolved <= back + period, format!("resolved at {resolved} s"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut polys: Vec<Vec<(f64, f64)>> = vec![
        s.fence.to_pairs(),
        vec![(0.0, 0.0), (0.0, 3.0), (3.0, 3.0), (3.0, 2.0), (1.0, 2.0), (1.0, 1.0), (3.0, 1.0), (3.0, 0.0)],
        vec![(0.0, 0.0), (2.0, 1.0), (0.0, 2.0), (1.0, 1.0)],
    ];
    for _ in 0..20 {
        let n = rng.random_range(4..16);
        let (clat, clon) = (rng.random_range(-60.0..60.0), rng.random_range(-170.0..170.0));
        let sector = std::f64::consts::TAU / n as f64;
        polys.push(
            (0..n)
                .map(|k| {
                    let a = (k as f64 + rng.random_range(0.2..0.8)) * sector;
                    let r = rng.random_range(0.001..0.05);
                    (clat + r * a.sin(), clon + r * a.cos())
                })
                .collect(),
        );
    }
    for poly in &polys {
        let fence = GeoFence::from_pairs(poly).map_err(|e| e.to_string())?;
        let (min, max) = fence.bounds();
        let (dl, dn) = ((max.lat - min.lat) * 0.2, (max.lon - min.lon) * 0.2);
        for _ in 0..1000 {
            let lat = rng.random_range(min.lat - dl..max.lat + dl);
            let lon = rng.random_range(min.lon - dn..max.lon + dn);
            check(fence.contains(LatLon::new(lat, lon)) == ray_cast(poly, lat, lon), format!("disagree at ({lat}, {lon})"))?;
        }
    }
    Ok(format!("breach opened +{:.0} s, resolved +{:.0} s; oracle agrees on {} x 1000 points", opened - start, resolved - back, polys.len()))
}

/// Largest airtime inside any trailing window, counting overlapping
/// transmissions in full.
fn max_window_airtime(mut txs: Vec<(f64, f64)>, window: f64) -> f64 {
    txs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut lo, mut sum, mut best) = (0, 0.0, 0.0f64);
    for hi in 0..txs.len() {
        sum += txs[hi].1;
        let end = txs[hi].0 + txs[hi].1;
        while txs[lo].0 + txs[lo].1 <= end - window + 1e-9 {
            sum -= txs[lo].1;
            lo += 1;
        }
        best = best.max(sum);
    }
    best
}

fn scalability() -> Verdict {
    let s = validate(generate_scenario(1000, 1, 1)).map_err(|e| e.to_string())?;
    check(s.spec.radio.loss_prob == 0.01 && s.spec.radio.lora.channels == 8, "radio is not loss 0.01 / 8 channels")?;
    let mut agg = Aggregator::new(RuleConfig::default(), Box::new(NullLog));
    agg.provision(&s).unwrap();
    let t = Instant::now();
    let report = run(&s, &mut agg, RunOptions { keep_outcomes: true, ..RunOptions::default() });
    let elapsed = t.elapsed().as_secs_f64();

    let lora = &s.spec.radio.lora;
    let budget = lora.duty_cycle_limit * lora.duty_window_s;
    let mut per_node: BTreeMap<u16, Vec<(f64, f64)>> = BTreeMap::new();
    for r in report.outcomes.iter().filter(|r| r.outcome != Outcome::DeferredDutyCycle) {
        per_node.entry(r.node_id).or_default().push((r.time, r.airtime_s));
    }
    let worst = per_node.into_values().map(|v| max_window_airtime(v, lora.duty_window_s)).fold(0.0, f64::max);
    let ratio = report.delivery_ratio.unwrap_or(0.0);
    check(elapsed < 60.0, format!("runtime {elapsed:.1} s"))?;
    check(worst <= budget + 1e-9, format!("node used {worst:.3} s of {budget} s in one window"))?;
    check(ratio >= 0.95, format!("delivery ratio {ratio:.4}"))?;
    Ok(format!("1000 cows x 24 h in {elapsed:.1} s; worst window {worst:.2}/{budget} s; delivery {ratio:.4}"))
}

fn random_uplink(rng: &mut ChaCha8Rng) -> NodeUplinkFrame {
    NodeUplinkFrame {
        node_id: rng.random(),
        seq: rng.random(),
        timestamp: rng.random(),
        latitude_e7: rng.random_range(-900_000_000..=900_000_000),
        longitude_e7: rng.random_range(-1_800_000_000..=1_800_000_000),
        altitude_dm: rng.random(),
        bpm: rng.random(),
        flags: UplinkFlags { gps_valid: rng.random(), low_battery: rng.random() },
    }
}

fn random_station(rng: &mut ChaCha8Rng) -> StationFrame {
    let body = if rng.random() {
        StationBody::Environment { temperature_dc: rng.random(), humidity: rng.random_range(0..=100), audio_ddb: rng.random() }
    } else {
        StationBody::Rfid { rfid_tag: rng.random(), activity: ActivityCode::ALL[rng.random_range(0..4)] }
    };
    StationFrame { station_id: rng.random(), seq: rng.random(), timestamp: rng.random(), body }
}

fn codec_robustness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..100_000 {
        let u = random_uplink(&mut rng);
        if decode_uplink(&encode_uplink(&u).unwrap()).ok() != Some(u) {
            mismatches += 1;
        }
        let st = random_station(&mut rng);
        if decode_station(&encode_station(&st).unwrap()).ok() != Some(st) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} round-trip mismatches"))?;

    let mut buf = Vec::with_capacity(96);
    for i in 0..1_000_000u32 {
        buf.clear();
        let len = rng.random_range(0..96);
        buf.extend((0..len).map(|_| rng.random::<u8>()));
        // bias some inputs towards the real frame lengths and a leading '$'
        if i % 4 == 0 {
            buf.resize(if i % 8 == 0 { 22 } else { 15 }, 0);
        } else if i % 4 == 1 && !buf.is_empty() {
            buf[0] = b'$';
        }
        let _ = decode_uplink(&buf);
        let _ = decode_station(&buf);
        let _ = inspect(&buf);
        let _ = parse_bytes(&buf);
    }

    check(crc16(b"123456789") == 0x29B1, "crc check value")?;
    let body = "GPGGA,123519,4807.038,N,01131.000,E,1,08,0.9,545.4,M,46.9,M,,";
    check(checksum_byte(body.as_bytes()) == 0x47, "nmea checksum")?;
    check(parse_sentence(&format!("${body}*47")).is_ok(), "nmea sentence rejected")?;
    Ok("200000 round trips exact; 1000000 random inputs survived; crc 0x29B1; nmea *47".into())
}

fn bpm_oracle() -> Verdict {
    let (mut hits, mut total, mut worst_clean) = (0, 0, 0.0f64);
    for bpm in 40..=120 {
        for seed in 0..20u64 {
            let clean = synthesize_pulse(bpm as f64, 10.0, 0.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let e = estimate_bpm(&clean).map_err(|e| format!("{bpm} seed {seed}: {e}"))?;
            worst_clean = worst_clean.max((e.bpm - bpm as f64).abs());
            let jittered = synthesize_pulse(bpm as f64, 10.0, 0.05, &mut ChaCha8Rng::seed_from_u64(seed));
            total += 1;
            if estimate_bpm(&jittered).is_ok_and(|e| (e.bpm - bpm as f64).abs() <= 2.0) {
                hits += 1;
            }
        }
    }
    let ratio = hits as f64 / total as f64;
    check(worst_clean <= 0.5, format!("clean error {worst_clean:.3}"))?;
    check(ratio >= 0.95, format!("{hits}/{total} within 2 BPM"))?;
    Ok(format!("clean max error {worst_clean:.3} BPM; jittered {hits}/{total} within 2 BPM"))
}

fn airtime_oracle() -> Verdict {
    let mut worst = 0.0f64;
    for sf in 7..=12u8 {
        for payload in 1..=51usize {
            let t_sym = 2f64.powi(sf as i32) / 125_000.0;
            let de = if t_sym >= 0.016 { 1.0 } else { 0.0 };
            let num = 8.0 * payload as f64 - 4.0 * sf as f64 + 28.0 + 16.0;
            let n_payload = 8.0 + ((num / (4.0 * (sf as f64 - 2.0 * de))).ceil() * 5.0).max(0.0);
            let want = (8.0 + 4.25) * t_sym + n_payload * t_sym;
            worst = worst.max((airtime(&RadioConfig::default().with_spreading_factor(sf), payload) - want).abs());
        }
    }
    let sf7 = airtime(&RadioConfig::default(), 22);
    check(worst < 1e-9, format!("max deviation {worst:e} s"))?;
    check((sf7 - 0.0566).abs() < 5e-5, format!("SF7 22 bytes {sf7}"))?;
    Ok(format!("max deviation {worst:.1e} s over 306 cases; SF7 22 B = {sf7:.5} s"))
}

fn determinism_and_replay() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    for (name, _) in BUNDLED {
        let path = scenario_path(name);
        let logs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("{name}-{i}.jsonl"))).collect();
        for log in &logs {
            let o = cli(&["simulate", "--scenario", path.to_str().unwrap(), "--as-fast-as-possible", "--out", log.to_str().unwrap()]);
            check(o.status.success(), format!("{name}: simulate failed"))?;
        }
        check(fs::read(&logs[0]).unwrap() == fs::read(&logs[1]).unwrap(), format!("{name}: logs differ"))?;
        let o = cli(&["replay", "--log", logs[0].to_str().unwrap(), "--verify"]);
        check(o.status.success(), format!("{name}: replay --verify exit {:?}", o.status.code()))?;
    }
    let log = dir.path().join("milking-deficit-0.jsonl");
    let mut lines: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    let idx = lines.iter().position(|l| l.contains("\"AlertOpened\"")).ok_or("no alert in log")?;
    lines[idx] = lines[idx].replace("2 of 3", "3 of 3");
    fs::write(&log, lines.join("\n") + "\n").unwrap();
    let seq = seq_of(&lines[idx]);
    let o = cli(&["replay", "--log", log.to_str().unwrap(), "--verify"]);
    let reported = summary(&o).get("divergent_seq").cloned().unwrap_or_default();
    check(o.status.code() == Some(3), format!("mutated log exit {:?}", o.status.code()))?;
    check(reported == seq.to_string(), format!("reported seq {reported}, mutated {seq}"))?;
    Ok(format!("{} scenarios byte-identical and verified; mutated seq {seq} detected", BUNDLED.len()))
}

fn seq_of(line: &str) -> u64 {
    let start = line.find("\"seq\":").expect("seq field") + 6;
    line[start..].chars().take_while(char::is_ascii_digit).collect::<String>().parse().unwrap()
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("milking-deficit reproduction", milking_deficit),
        ("threshold matrix", threshold_matrix),
        ("geofence", geofence),
        ("scalability", scalability),
        ("codec and parser robustness", codec_robustness),
        ("bpm oracle", bpm_oracle),
        ("airtime oracle", airtime_oracle),
        ("determinism and replay", determinism_and_replay),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match verdict {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
