//! Discrete-event model of the collar uplink: airtime, duty-cycle budgets,
//! random loss and same-channel collisions, with a single gateway.
//!
//! Two transmissions collide when their airtime intervals overlap on the same
//! (channel, spreading factor) pair; both are lost, there is no capture
//! effect. Survivors are lost independently with probability `loss_prob`.

mod airtime;

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use airtime::{airtime, RadioConfig, RadioConfigError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetSimError {
    #[error("unknown node {0}")]
    UnknownNode(u16),
    #[error("submission at t={t} precedes simulation clock {clock}")]
    TimeRegression { t: f64, clock: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Delivered,
    LostRandom,
    LostCollision,
    DeferredDutyCycle,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Delivered => "Delivered",
            Outcome::LostRandom => "LostRandom",
            Outcome::LostCollision => "LostCollision",
            Outcome::DeferredDutyCycle => "DeferredDutyCycle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub node_id: u16,
    pub seq: u8,
    pub frame: Vec<u8>,
    pub start: f64,
    pub airtime: f64,
    pub channel: u8,
    pub spreading_factor: u8,
    pub outcome: Option<Outcome>,
    collided: bool,
}

impl Transmission {
    pub fn new(node_id: u16, frame: Vec<u8>, start: f64, airtime: f64, channel: u8, spreading_factor: u8) -> Self {
        Transmission {
            node_id,
            seq: crate::codec::peek_seq(&frame).unwrap_or(0),
            frame,
            start,
            airtime,
            channel,
            spreading_factor,
            outcome: None,
            collided: false,
        }
    }

    pub fn end(&self) -> f64 {
        self.start + self.airtime
    }

    fn overlaps(&self, other: &Transmission) -> bool {
        self.channel == other.channel
            && self.spreading_factor == other.spreading_factor
            && self.start < other.end()
            && other.start < self.end()
    }
}

fn order(a: &Transmission, b: &Transmission) -> std::cmp::Ordering {
    a.start.total_cmp(&b.start).then(a.node_id.cmp(&b.node_id))
}

/// Assigns final outcomes to a batch of transmissions.
///
/// Transmissions are processed in (start, node_id) order; the loss draws are
/// taken from `rng` in that order, one per collision survivor.
pub fn resolve<R: Rng + ?Sized>(pending: &mut [Transmission], loss_prob: f64, rng: &mut R) {
    pending.sort_by(order);
    for i in 0..pending.len() {
        let mut j = i + 1;
        while j < pending.len() && pending[j].start < pending[i].end() {
            if pending[i].overlaps(&pending[j]) {
                pending[i].collided = true;
                pending[j].collided = true;
            }
            j += 1;
        }
    }
    for tx in pending.iter_mut() {
        finalize(tx, loss_prob, rng);
    }
}

fn finalize<R: Rng + ?Sized>(tx: &mut Transmission, loss_prob: f64, rng: &mut R) {
    debug_assert!(tx.outcome.is_none(), "outcome assigned twice");
    tx.outcome = Some(if tx.collided {
        Outcome::LostCollision
    } else if rng.random::<f64>() < loss_prob {
        Outcome::LostRandom
    } else {
        Outcome::Delivered
    });
}

/// Per-node record of recent transmissions for duty-cycle enforcement.
///
/// Two rules apply together: after a transmission of airtime `a` the node
/// stays silent until `start + a / limit` (off-period), and within any
/// trailing window the summed airtime stays at or below `limit * window`.
#[derive(Debug, Clone, PartialEq)]
pub struct DutyCycleLedger {
    entries: VecDeque<(f64, f64)>,
    window_s: f64,
    limit: f64,
}

impl DutyCycleLedger {
    pub fn new(limit: f64, window_s: f64) -> Self {
        DutyCycleLedger {
            entries: VecDeque::new(),
            window_s,
            limit,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.entries.iter().copied()
    }

    /// Earliest start at or after `t` that keeps both rules satisfied.
    pub fn earliest_start(&self, t: f64, airtime: f64) -> f64 {
        let mut candidate = t;
        if let Some(&(start, air)) = self.entries.back() {
            candidate = candidate.max(start + air / self.limit);
        }
        let budget = self.limit * self.window_s - airtime;
        if budget < 0.0 {
            return f64::INFINITY;
        }
        let cutoff = candidate + airtime - self.window_s;
        let mut k = self.entries.iter().take_while(|(s, a)| s + a <= cutoff).count();
        let mut sum: f64 = self.entries.iter().skip(k).map(|(_, a)| a).sum();
        let first_k = k;
        while sum > budget && k < self.entries.len() {
            sum -= self.entries[k].1;
            k += 1;
        }
        if k > first_k {
            let (s, a) = self.entries[k - 1];
            candidate = candidate.max(s + a + self.window_s - airtime);
        }
        candidate
    }

    pub fn permits(&self, t: f64, airtime: f64) -> bool {
        self.earliest_start(t, airtime) <= t
    }

    pub fn record(&mut self, start: f64, airtime: f64) {
        self.entries.push_back((start, airtime));
        let horizon = start - self.window_s;
        while self.entries.len() > 1 && self.entries.front().is_some_and(|(s, a)| s + a <= horizon) {
            self.entries.pop_front();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubmitResult {
    Accepted { start: f64, airtime: f64, channel: u8 },
    DeferredDutyCycle { earliest: f64 },
}

/// One line of the outcome log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub time: f64,
    pub node_id: u16,
    pub seq: u8,
    pub channel: Option<u8>,
    pub sf: u8,
    pub airtime_s: f64,
    pub outcome: Outcome,
}

/// A frame that survived the channel, arriving at `arrival` (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub node_id: u16,
    pub frame: Vec<u8>,
    pub arrival: f64,
}

#[derive(Debug, Clone)]
struct NodeRadio {
    spreading_factor: u8,
    ledger: DutyCycleLedger,
}

/// Single-threaded uplink simulator. Submissions must arrive in
/// nondecreasing time; [`NetworkSimulator::advance`] finalizes every
/// transmission that has ended.
pub struct NetworkSimulator<R: Rng> {
    cfg: RadioConfig,
    loss_prob: f64,
    nodes: BTreeMap<u16, NodeRadio>,
    pending: Vec<Transmission>,
    clock: f64,
    channel_rng: R,
    loss_rng: R,
    log: Vec<OutcomeRecord>,
}

impl<R: Rng> NetworkSimulator<R> {
    pub fn new(cfg: RadioConfig, loss_prob: f64, channel_rng: R, loss_rng: R) -> Self {
        NetworkSimulator {
            cfg,
            loss_prob,
            nodes: BTreeMap::new(),
            pending: Vec::new(),
            clock: 0.0,
            channel_rng,
            loss_rng,
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> &RadioConfig {
        &self.cfg
    }

    pub fn register_node(&mut self, node_id: u16, spreading_factor: Option<u8>) {
        self.nodes.insert(
            node_id,
            NodeRadio {
                spreading_factor: spreading_factor.unwrap_or(self.cfg.spreading_factor),
                ledger: DutyCycleLedger::new(self.cfg.duty_cycle_limit, self.cfg.duty_window_s),
            },
        );
    }

    pub fn ledger(&self, node_id: u16) -> Option<&DutyCycleLedger> {
        self.nodes.get(&node_id).map(|n| &n.ledger)
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn submit(&mut self, node_id: u16, frame: Vec<u8>, t: f64) -> Result<SubmitResult, NetSimError> {
        if t < self.clock {
            return Err(NetSimError::TimeRegression { t, clock: self.clock });
        }
        let node = self.nodes.get_mut(&node_id).ok_or(NetSimError::UnknownNode(node_id))?;
        self.clock = t;
        let sf = node.spreading_factor;
        let air = airtime(&self.cfg.with_spreading_factor(sf), frame.len());
        let earliest = node.ledger.earliest_start(t, air);
        if earliest > t {
            self.log.push(OutcomeRecord {
                time: t,
                node_id,
                seq: crate::codec::peek_seq(&frame).unwrap_or(0),
                channel: None,
                sf,
                airtime_s: air,
                outcome: Outcome::DeferredDutyCycle,
            });
            return Ok(SubmitResult::DeferredDutyCycle { earliest });
        }
        node.ledger.record(t, air);
        let channel = self.channel_rng.random_range(0..self.cfg.channels);
        let mut tx = Transmission::new(node_id, frame, t, air, channel, sf);
        for other in self.pending.iter_mut().filter(|o| o.end() > t) {
            if other.overlaps(&tx) {
                other.collided = true;
                tx.collided = true;
            }
        }
        self.pending.push(tx);
        Ok(SubmitResult::Accepted { start: t, airtime: air, channel })
    }

    /// Finalizes transmissions that ended at or before `now` and returns the
    /// delivered ones in (start, node_id) order.
    pub fn advance(&mut self, now: f64) -> Vec<Delivery> {
        self.clock = self.clock.max(now);
        let (mut done, rest): (Vec<_>, Vec<_>) = self.pending.drain(..).partition(|tx| tx.end() <= now);
        self.pending = rest;
        done.sort_by(order);
        let mut delivered = Vec::new();
        for mut tx in done {
            finalize(&mut tx, self.loss_prob, &mut self.loss_rng);
            let outcome = tx.outcome.unwrap_or(Outcome::LostRandom);
            self.log.push(OutcomeRecord {
                time: tx.start,
                node_id: tx.node_id,
                seq: tx.seq,
                channel: Some(tx.channel),
                sf: tx.spreading_factor,
                airtime_s: tx.airtime,
                outcome,
            });
            if outcome == Outcome::Delivered {
                delivered.push(Delivery {
                    node_id: tx.node_id,
                    arrival: tx.end(),
                    frame: tx.frame,
                });
            }
        }
        delivered
    }

    /// Finalizes everything still in flight.
    pub fn flush(&mut self) -> Vec<Delivery> {
        self.advance(f64::INFINITY)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn log(&self) -> &[OutcomeRecord] {
        &self.log
    }

    pub fn into_log(self) -> Vec<OutcomeRecord> {
        self.log
    }
}

/// Writes the outcome log as CSV with a header row.
pub fn write_outcome_csv<W: Write>(records: &[OutcomeRecord], out: W) -> csv::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["time", "node_id", "seq", "channel", "sf", "airtime_s", "outcome"])?;
    for r in records {
        writer.write_record([
            format!("{:.6}", r.time),
            r.node_id.to_string(),
            r.seq.to_string(),
            r.channel.map(|c| c.to_string()).unwrap_or_default(),
            r.sf.to_string(),
            format!("{:.9}", r.airtime_s),
            r.outcome.as_str().to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
