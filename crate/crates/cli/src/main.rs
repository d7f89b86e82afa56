//! `cattlesense`: run scenarios, serve the API, replay logs and inspect frames.
//!
//! Exit codes: 0 success, 1 invalid input (scenario, frame, rules), 2 I/O
//! failure (including bind), 3 log corruption or verification divergence.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use cattlesense::aggregator::{
    read_log_file, repair_tail, Aggregator, EventLog, FileLog, FsyncPolicy, NullLog, RuleConfig, TailRepair,
};
use cattlesense::codec::{inspect, FrameFamily};
use cattlesense::sim::{generate_scenario, load_scenario, run, validate, RunOptions, Scenario, SimulationReport};
use cattlesense::Execution;
use cattlesense_server::{AppState, ClockMode};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

const RULES_ENV: &str = "CATTLESENSE_RULES";

#[derive(Debug, Parser)]
#[command(name = "cattlesense", version, about = "Herd telemetry simulator, aggregator and API server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario through the radio model into an in-process aggregator.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated seconds per wall second; 0 runs as fast as possible.
        #[arg(long, conflicts_with = "as_fast_as_possible")]
        speed: Option<f64>,
        #[arg(long)]
        as_fast_as_possible: bool,
        /// Event log to write (truncated first).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also expose the API while the run is in progress, and keep
        /// serving afterwards until interrupted.
        #[arg(long)]
        serve: bool,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Step cows one after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API, replaying an existing log first.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "cattlesense-events.jsonl")]
        log: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Registers the scenario's stations, fence and herd when the log is empty.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "per-second")]
        fsync: Fsync,
    },
    /// Rebuild state from a log and print a summary.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Recompute every rule transition and compare with the log.
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Dump the fields of one hex-encoded frame.
    DecodeFrame {
        #[arg(long)]
        hex: String,
    },
    /// Write a valid scenario with a fault-free herd on default schedules.
    GenScenario {
        #[arg(long)]
        cows: usize,
        #[arg(long, default_value_t = 1)]
        days: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Fsync {
    PerEvent,
    PerSecond,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { scenario, seed, speed, as_fast_as_possible, out, serve, port, rules, sequential, json } => {
            let speed = if as_fast_as_possible { None } else { speed.filter(|s| *s > 0.0) };
            let execution = if sequential { Execution::Sequential } else { Execution::default() };
            simulate(&scenario, seed, speed, out.as_deref(), serve.then_some(port), rules.as_deref(), execution, json)
        }
        Command::Serve { port, log, rules, scenario, fsync } => {
            let policy = match fsync {
                Fsync::PerEvent => FsyncPolicy::PerEvent,
                Fsync::PerSecond => FsyncPolicy::PerSecond,
            };
            serve(port, &log, rules.as_deref(), scenario.as_deref(), policy)
        }
        Command::Replay { log, verify, rules, json } => replay(&log, verify, rules.as_deref(), json),
        Command::DecodeFrame { hex } => decode_frame(&hex),
        Command::GenScenario { cows, days, seed, out } => gen_scenario(cows, days, seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// `--rules` wins over the environment variable; neither means defaults.
fn load_rules(path: Option<&Path>) -> Result<RuleConfig, Failure> {
    let from_env = std::env::var_os(RULES_ENV).map(PathBuf::from);
    let Some(path) = path.map(Path::to_path_buf).or(from_env) else {
        return Ok(RuleConfig::default());
    };
    let text = fs::read_to_string(&path).map_err(|e| fail(2, format!("cannot read rules {}: {e}", path.display())))?;
    RuleConfig::from_json(&text).map_err(|e| fail(1, format!("invalid rules {}: {e}", path.display())))
}

fn read_scenario(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path).map_err(|e| fail(2, format!("cannot read scenario {}: {e}", path.display())))?;
    load_scenario(&text).map_err(|errors| {
        let list: Vec<String> = errors.0.iter().map(|e| format!("  {e}")).collect();
        fail(1, format!("invalid scenario {} ({} errors):\n{}", path.display(), errors.0.len(), list.join("\n")))
    })
}

fn print_summary(lines: &[(String, Value)], json: bool) {
    let mut out = std::io::stdout().lock();
    if json {
        let map: serde_json::Map<String, Value> = lines.iter().cloned().collect();
        let _ = writeln!(out, "{}", Value::Object(map));
        return;
    }
    for (k, v) in lines {
        match v {
            Value::String(s) => {
                let _ = writeln!(out, "{k}: {s}");
            }
            other => {
                let _ = writeln!(out, "{k}: {other}");
            }
        }
    }
}

/// State-derived summary lines shared by simulate and replay.
fn state_lines(agg: &Aggregator) -> Vec<(String, Value)> {
    let s = agg.state();
    let mut lines = vec![
        ("cattle".into(), json!(s.cows.len())),
        ("frames_accepted".into(), json!(s.stats.frames_accepted)),
        ("frames_rejected".into(), json!(s.stats.frames_rejected)),
        ("events".into(), json!(s.last_seq)),
    ];
    let by_rule: BTreeMap<String, u64> = agg.alerts_by_rule();
    lines.push(("alerts_total".into(), json!(by_rule.values().sum::<u64>())));
    for (rule, n) in by_rule {
        lines.push((format!("alerts.{rule}"), json!(n)));
    }
    lines.push(("alerts_open".into(), json!(s.alerts.values().filter(|a| a.is_active()).count())));
    lines
}

fn report_lines(report: &SimulationReport) -> Vec<(String, Value)> {
    let t = &report.totals;
    vec![
        ("scenario".into(), json!(report.scenario)),
        ("seed".into(), json!(report.seed)),
        ("duration_s".into(), json!(report.duration_s)),
        ("nodes".into(), json!(report.nodes.len())),
        ("uplinks_generated".into(), json!(t.generated)),
        ("uplinks_delivered".into(), json!(t.delivered)),
        ("uplinks_lost_random".into(), json!(t.lost_random)),
        ("uplinks_lost_collision".into(), json!(t.lost_collision)),
        ("uplinks_deferred".into(), json!(t.deferred)),
        ("station_frames".into(), json!(report.station_frames.values().sum::<u64>())),
        (
            "delivery_ratio".into(),
            report.delivery_ratio.map_or(json!("n/a"), |r| json!((r * 1e6).round() / 1e6)),
        ),
    ]
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    path: &Path,
    seed: Option<u64>,
    speed: Option<f64>,
    out: Option<&Path>,
    serve_port: Option<u16>,
    rules: Option<&Path>,
    execution: Execution,
    json: bool,
) -> CmdResult {
    let mut scenario = read_scenario(path)?;
    if let Some(seed) = seed {
        scenario = scenario.with_seed(seed);
    }
    let rules = load_rules(rules)?;
    let log: Box<dyn EventLog> = match out {
        Some(p) => Box::new(
            FileLog::create(p, FsyncPolicy::PerSecond).map_err(|e| fail(2, format!("cannot write log {}: {e}", p.display())))?,
        ),
        None => Box::new(NullLog),
    };
    let mut agg = Aggregator::new(rules, log);
    agg.provision(&scenario).map_err(|e| fail(1, format!("cannot provision scenario: {e}")))?;
    let options = RunOptions { execution, keep_outcomes: false, speed };

    let (report, state) = match serve_port {
        None => {
            let report = run(&scenario, &mut agg, options);
            (report, AppState::new(agg, ClockMode::Log))
        }
        Some(port) => {
            let state = AppState::new(agg, ClockMode::Log);
            let rt = runtime()?;
            let listener = rt.block_on(bind(port))?;
            let server = state.clone();
            rt.spawn(async move {
                let _ = cattlesense_server::serve(listener, server, std::future::pending()).await;
            });
            let report = run(&scenario, state.clone(), options);
            finish_log(&state, out)?;
            let mut lines = report_lines(&report);
            lines.extend(state_lines(&state.lock()));
            print_summary(&lines, json);
            println!("serving until interrupted");
            let _ = std::io::stdout().flush();
            rt.block_on(async {
                let _ = tokio::signal::ctrl_c().await;
            });
            return Ok(());
        }
    };
    finish_log(&state, out)?;
    let mut lines = report_lines(&report);
    lines.extend(state_lines(&state.lock()));
    if let Some(p) = out {
        lines.push(("log".into(), json!(p.display().to_string())));
    }
    lines.push(("runtime_s".into(), json!((report.runtime_s * 1e3).round() / 1e3)));
    print_summary(&lines, json);
    Ok(())
}

fn finish_log(state: &AppState, out: Option<&Path>) -> CmdResult {
    let mut agg = state.lock();
    let flushed = agg.flush_log();
    let (failures, last) = agg.log_failures();
    let path = out.map(|p| p.display().to_string()).unwrap_or_default();
    if failures > 0 {
        return Err(fail(2, format!("{failures} log writes to {path} failed: {}", last.unwrap_or("unknown"))));
    }
    flushed.map_err(|e| fail(2, format!("cannot flush log {path}: {e}")))
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| fail(2, format!("cannot start runtime: {e}")))
}

async fn bind(port: u16) -> Result<tokio::net::TcpListener, Failure> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
        .await
        .map_err(|e| fail(2, format!("cannot bind port {port}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| fail(2, format!("cannot bind port {port}: {e}")))?;
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();
    Ok(listener)
}

fn serve(port: u16, log: &Path, rules: Option<&Path>, scenario: Option<&Path>, policy: FsyncPolicy) -> CmdResult {
    let rules = load_rules(rules)?;
    let scenario = scenario.map(read_scenario).transpose()?;
    let records = if log.exists() {
        match repair_tail(log).map_err(|e| fail(2, format!("cannot open log {}: {e}", log.display())))? {
            TailRepair::Clean => {}
            TailRepair::NewlineAdded => eprintln!("warning: {}: final record lacked its newline", log.display()),
            TailRepair::Truncated { line, bytes } => {
                eprintln!("warning: {}: dropped torn record at line {line} ({bytes} bytes)", log.display())
            }
        }
        read_log_file(log).map_err(|e| fail(3, format!("corrupt log {}: {e}", log.display())))?
    } else {
        Vec::new()
    };
    let file = FileLog::append_to(log, policy).map_err(|e| fail(2, format!("cannot open log {}: {e}", log.display())))?;
    let mut agg = Aggregator::replay(&records, rules, Box::new(file))
        .map_err(|e| fail(3, format!("corrupt log {}: {e}", log.display())))?;
    println!("replayed {} records from {}", records.len(), log.display());
    if let (Some(mut s), true) = (scenario, records.is_empty()) {
        // registry and fence only; the live clock starts now
        s.spec.start_time = cattlesense::Timestamp::now();
        agg.provision(&s).map_err(|e| fail(1, format!("cannot provision scenario: {e}")))?;
        println!("provisioned {} cattle from scenario {}", s.spec.herd.len(), s.spec.name);
    }
    let state = AppState::new(agg, ClockMode::Wall);
    let rt = runtime()?;
    rt.block_on(async {
        let listener = bind(port).await?;
        cattlesense_server::spawn_ticker(state.clone(), Duration::from_secs(1));
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        cattlesense_server::serve(listener, state.clone(), shutdown)
            .await
            .map_err(|e| fail(2, format!("server failed: {e}")))
    })?;
    let flushed = state.lock().flush_log();
    flushed.map_err(|e| fail(2, format!("cannot flush log {}: {e}", log.display())))
}

fn replay(log: &Path, verify: bool, rules: Option<&Path>, json: bool) -> CmdResult {
    let rules = load_rules(rules)?;
    let records = read_log_file(log).map_err(|e| match e {
        cattlesense::aggregator::LogError::Io { .. } => fail(2, e.to_string()),
        other => fail(3, format!("corrupt log {}: {other}", log.display())),
    })?;
    let agg = Aggregator::replay(&records, rules.clone(), Box::new(NullLog))
        .map_err(|e| fail(3, format!("corrupt log {}: {e}", log.display())))?;
    let mut lines = vec![("log".to_string(), json!(log.display().to_string()))];
    lines.extend(state_lines(&agg));
    if verify {
        match Aggregator::verify(&records, rules) {
            Ok(()) => lines.push(("verify".into(), json!("OK"))),
            Err(d) => {
                lines.push(("verify".into(), json!("DIVERGED")));
                lines.push(("divergent_seq".into(), json!(d.seq)));
                print_summary(&lines, json);
                let show = |r: &Option<cattlesense::aggregator::EventRecord>| {
                    r.as_ref().map_or_else(|| "(none)".to_string(), |r| r.to_json_line())
                };
                eprintln!("recorded: {}", show(&d.recorded));
                eprintln!("derived:  {}", show(&d.derived));
                return Err(fail(3, format!("verification diverged at seq {}", d.seq)));
            }
        }
    }
    print_summary(&lines, json);
    Ok(())
}

fn decode_frame(text: &str) -> CmdResult {
    let bytes = hex::decode(text.trim()).map_err(|e| fail(1, format!("BadHex: {e}")))?;
    let frame = inspect(&bytes).map_err(|e| fail(1, e.to_string()))?;
    let family = match frame.family {
        FrameFamily::NodeUplink => "node-uplink",
        FrameFamily::Station => "station",
    };
    println!("family: {family}");
    println!("type: {}", frame.type_name);
    println!("length: {} bytes", bytes.len());
    for (name, value) in &frame.fields {
        println!("{name}: {value}");
    }
    if frame.crc_ok() {
        println!("crc: OK");
        Ok(())
    } else {
        println!("crc: MISMATCH (expected {:#06x}, found {:#06x})", frame.crc_expected, frame.crc_found);
        Err(fail(1, "CrcMismatch"))
    }
}

fn gen_scenario(cows: usize, days: u32, seed: u64, out: Option<&Path>) -> CmdResult {
    let scenario = validate(generate_scenario(cows, days, seed)).map_err(|e| fail(1, format!("generated scenario invalid: {e}")))?;
    let text = scenario.to_json() + "\n";
    match out {
        Some(p) => fs::write(p, text).map_err(|e| fail(2, format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
