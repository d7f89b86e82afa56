//! Herd welfare telemetry: simulated collar nodes and shed stations, a
//! constrained radio model, byte-exact frame codecs, and an event-sourced
//! aggregator that evaluates welfare rules and manages alerts.

pub mod aggregator;
pub mod biosignal;
pub mod codec;
pub mod domain;
pub mod exec;
pub mod netsim;
pub mod nmea;
pub mod sim;
pub mod time;

pub use exec::Execution;
pub use time::Timestamp;
