//! Deterministic discrete-event network simulator with a sovereignty monitor.
//!
//! Events are processed in `(time, insertion sequence)` order on a single virtual clock.
//! Messages carry only a payload digest; their content travels in typed channels owned by
//! the caller, so the monitor classifies traffic by [`MessageKind`] alone.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Digest;
use crate::domain::OperatorId;
use crate::federation::CongestionSchedule;
use crate::telemetry::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("negative delay {0}")]
    NegativeDelay(i64),
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error("malformed trace line {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Endpoint {
    Coordinator,
    Operator(OperatorId),
}

impl Endpoint {
    pub fn operator(id: &OperatorId) -> Self {
        Endpoint::Operator(id.clone())
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Coordinator => f.write_str("coordinator"),
            Endpoint::Operator(op) => write!(f, "op:{op}"),
        }
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "coordinator" {
            return Ok(Endpoint::Coordinator);
        }
        let id = s.strip_prefix("op:").ok_or_else(|| format!("unknown endpoint {s:?}"))?;
        OperatorId::new(id).map(Endpoint::Operator).map_err(|e| e.to_string())
    }
}

impl TryFrom<String> for Endpoint {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> Self {
        e.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    RawTelemetry,
    Insight,
    ModelUpdate,
    Control,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::RawTelemetry => "raw-telemetry",
            MessageKind::Insight => "insight",
            MessageKind::ModelUpdate => "model-update",
            MessageKind::Control => "control",
        }
    }
}

impl FromStr for MessageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [MessageKind::RawTelemetry, MessageKind::Insight, MessageKind::ModelUpdate, MessageKind::Control]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown message kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimMessage {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub kind: MessageKind,
    pub size_bytes: u64,
    pub digest: Digest,
}

impl SimMessage {
    /// True when the message leaves the operator it originates from.
    pub fn crosses_boundary(&self) -> bool {
        match &self.src {
            Endpoint::Operator(_) => self.src != self.dst,
            Endpoint::Coordinator => true,
        }
    }

    /// Raw telemetry may never leave its operator.
    pub fn violates_sovereignty(&self) -> bool {
        self.kind == MessageKind::RawTelemetry && self.crosses_boundary()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub base_latency_ms: f64,
    pub bandwidth_mbps: f64,
    #[serde(default)]
    pub congestion: CongestionSchedule,
}

impl LinkSpec {
    pub fn new(base_latency_ms: f64, bandwidth_mbps: f64) -> Self {
        Self { base_latency_ms, bandwidth_mbps, congestion: CongestionSchedule::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.base_latency_ms.is_finite() || self.base_latency_ms < 0.0 {
            return Err(SimError::InvalidLink(format!("base latency {} must be >= 0", self.base_latency_ms)));
        }
        if !self.bandwidth_mbps.is_finite() || self.bandwidth_mbps <= 0.0 {
            return Err(SimError::InvalidLink(format!("bandwidth {} must be > 0", self.bandwidth_mbps)));
        }
        Ok(())
    }

    /// `ceil((base + size·8 / (bandwidth·1000)) · multiplier(now))` milliseconds.
    pub fn transfer_ms(&self, size_bytes: u64, now: Timestamp) -> i64 {
        let raw = self.base_latency_ms + size_bytes as f64 * 8.0 / (self.bandwidth_mbps * 1000.0);
        (raw * self.congestion.multiplier_at(now)).ceil() as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventPayload {
    Deliver(SimMessage),
    Timer(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub id: EventId,
    pub time: Timestamp,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SendOutcome {
    Scheduled { id: EventId, delivery: Timestamp },
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceType {
    Send,
    Deliver,
    Block,
    Timer,
}

impl TraceType {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceType::Send => "send",
            TraceType::Deliver => "deliver",
            TraceType::Block => "block",
            TraceType::Timer => "timer",
        }
    }
}

impl FromStr for TraceType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "send" => Ok(TraceType::Send),
            "deliver" => Ok(TraceType::Deliver),
            "block" => Ok(TraceType::Block),
            "timer" => Ok(TraceType::Timer),
            _ => Err(format!("unknown trace type {s:?}")),
        }
    }
}

/// One line of the event trace. Timer records use `coordinator` endpoints, the `control`
/// kind, size 0 and the digest of the timer label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: Timestamp,
    pub event: TraceType,
    pub id: u64,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub kind: MessageKind,
    pub size: u64,
    pub digest: Digest,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {} {} {}",
            self.time,
            self.event.as_str(),
            self.id,
            self.src,
            self.dst,
            self.kind.as_str(),
            self.size,
            self.digest.to_hex()
        )
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 8 {
            return Err(format!("expected 8 fields, found {}", f.len()));
        }
        Ok(Self {
            time: f[0].parse().map_err(|_| format!("bad time {:?}", f[0]))?,
            event: f[1].parse()?,
            id: f[2].parse().map_err(|_| format!("bad id {:?}", f[2]))?,
            src: f[3].parse()?,
            dst: f[4].parse()?,
            kind: f[5].parse()?,
            size: f[6].parse().map_err(|_| format!("bad size {:?}", f[6]))?,
            digest: Digest::from_hex(f[7]).ok_or_else(|| format!("bad digest {:?}", f[7]))?,
        })
    }

    fn message(&self) -> SimMessage {
        SimMessage {
            src: self.src.clone(),
            dst: self.dst.clone(),
            kind: self.kind,
            size_bytes: self.size,
            digest: self.digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub time: Timestamp,
    pub id: u64,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub digest: Digest,
}

#[derive(Debug, Default)]
pub struct SimNet {
    now: Timestamp,
    next_seq: u64,
    queue: BinaryHeap<Reverse<(Timestamp, u64)>>,
    pending: BTreeMap<u64, EventPayload>,
    trace: Vec<TraceRecord>,
    violations: Vec<Violation>,
}

impl SimNet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// Violations counted live at send time.
    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    fn enqueue(&mut self, time: Timestamp, payload: EventPayload) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse((time, seq)));
        self.pending.insert(seq, payload);
        EventId(seq)
    }

    pub fn schedule(&mut self, payload: EventPayload, delay: i64) -> Result<EventId, SimError> {
        if delay < 0 {
            return Err(SimError::NegativeDelay(delay));
        }
        Ok(self.enqueue(self.now + delay, payload))
    }

    pub fn schedule_timer(&mut self, label: &str, delay: i64) -> Result<EventId, SimError> {
        self.schedule(EventPayload::Timer(label.to_string()), delay)
    }

    /// Sends a message over `link` at the current time. Raw telemetry leaving its operator is
    /// blocked, recorded as a violation and never delivered.
    pub fn send(&mut self, msg: SimMessage, link: &LinkSpec) -> Result<SendOutcome, SimError> {
        link.validate()?;
        let seq = self.next_seq;
        self.trace.push(self.record(TraceType::Send, seq, &msg));
        if msg.violates_sovereignty() {
            self.next_seq += 1;
            self.violations.push(Violation {
                time: self.now,
                id: seq,
                src: msg.src.clone(),
                dst: msg.dst.clone(),
                digest: msg.digest,
            });
            self.trace.push(self.record(TraceType::Block, seq, &msg));
            return Ok(SendOutcome::Blocked);
        }
        let delivery = self.now + link.transfer_ms(msg.size_bytes, self.now);
        let id = self.enqueue(delivery, EventPayload::Deliver(msg));
        Ok(SendOutcome::Scheduled { id, delivery })
    }

    fn record(&self, event: TraceType, id: u64, msg: &SimMessage) -> TraceRecord {
        TraceRecord {
            time: self.now,
            event,
            id,
            src: msg.src.clone(),
            dst: msg.dst.clone(),
            kind: msg.kind,
            size: msg.size_bytes,
            digest: msg.digest,
        }
    }

    pub fn peek_time(&self) -> Option<Timestamp> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    /// Processes the next event, advancing the clock to its time.
    pub fn advance(&mut self) -> Option<Event> {
        let Reverse((time, seq)) = self.queue.pop()?;
        let payload = self.pending.remove(&seq).expect("queued event has a payload");
        self.now = time;
        let record = match &payload {
            EventPayload::Deliver(msg) => self.record(TraceType::Deliver, seq, msg),
            EventPayload::Timer(label) => TraceRecord {
                time,
                event: TraceType::Timer,
                id: seq,
                src: Endpoint::Coordinator,
                dst: Endpoint::Coordinator,
                kind: MessageKind::Control,
                size: 0,
                digest: Digest::of(label.as_bytes()),
            },
        };
        self.trace.push(record);
        Some(Event { id: EventId(seq), time, payload })
    }

    /// Processes every event due at or before `until`, then moves the clock to `until`.
    pub fn run_until(&mut self, until: Timestamp) -> Vec<Event> {
        let mut out = Vec::new();
        while self.peek_time().is_some_and(|t| t <= until) {
            out.extend(self.advance());
        }
        self.now = self.now.max(until);
        out
    }

    /// Processes every remaining event.
    pub fn run_to_completion(&mut self) -> Vec<Event> {
        std::iter::from_fn(|| self.advance()).collect()
    }

    pub fn export_trace(&self) -> String {
        export_trace(&self.trace)
    }

    pub fn trace_digest(&self) -> Digest {
        Digest::of(self.export_trace().as_bytes())
    }
}

pub fn export_trace(trace: &[TraceRecord]) -> String {
    trace.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn import_trace(text: &str) -> Result<Vec<TraceRecord>, SimError> {
    text.lines()
        .enumerate()
        .map(|(i, l)| TraceRecord::parse_line(l).map_err(|reason| SimError::MalformedTrace { line: i + 1, reason }))
        .collect()
}

/// Recomputes sovereignty violations from the send attempts in a trace, independently of the
/// live counter.
pub fn audit_trace(trace: &[TraceRecord]) -> Vec<Violation> {
    trace
        .iter()
        .filter(|r| r.event == TraceType::Send)
        .filter(|r| {
            let crosses = match (&r.src, &r.dst) {
                (Endpoint::Operator(a), Endpoint::Operator(b)) => a != b,
                _ => true,
            };
            r.kind == MessageKind::RawTelemetry && crosses
        })
        .map(|r| Violation { time: r.time, id: r.id, src: r.src.clone(), dst: r.dst.clone(), digest: r.digest })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceDefect {
    ClockRegression { line: usize },
    /// A non-blocked send was delivered zero or several times.
    Delivery { id: u64, deliveries: usize },
    /// A delivery or block without a preceding send.
    Orphan { line: usize },
    /// Raw telemetry delivered across a boundary.
    Leak { id: u64 },
}

/// Structural checks over a trace: monotone clock, exactly-once delivery of every non-blocked
/// send, and no raw telemetry delivered across an operator boundary.
pub fn check_trace(trace: &[TraceRecord]) -> Vec<TraceDefect> {
    let mut defects = Vec::new();
    let mut sends: BTreeMap<u64, (bool, usize)> = BTreeMap::new();
    for (i, r) in trace.iter().enumerate() {
        if i > 0 && r.time < trace[i - 1].time {
            defects.push(TraceDefect::ClockRegression { line: i + 1 });
        }
        match r.event {
            TraceType::Send => {
                sends.insert(r.id, (false, 0));
            }
            TraceType::Block => match sends.get_mut(&r.id) {
                Some(s) => s.0 = true,
                None => defects.push(TraceDefect::Orphan { line: i + 1 }),
            },
            TraceType::Deliver => {
                match sends.get_mut(&r.id) {
                    Some(s) => s.1 += 1,
                    None => defects.push(TraceDefect::Orphan { line: i + 1 }),
                }
                if r.message().violates_sovereignty() {
                    defects.push(TraceDefect::Leak { id: r.id });
                }
            }
            TraceType::Timer => {}
        }
    }
    for (id, (blocked, deliveries)) in sends {
        let expected = usize::from(!blocked);
        if deliveries != expected {
            defects.push(TraceDefect::Delivery { id, deliveries });
        }
    }
    defects
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::CongestionWindow;
    use proptest::prelude::*;

    fn op(s: &str) -> Endpoint {
        Endpoint::Operator(OperatorId::new(s).unwrap())
    }

    fn msg(src: Endpoint, dst: Endpoint, kind: MessageKind, size: u64) -> SimMessage {
        SimMessage { src, dst, kind, size_bytes: size, digest: Digest::of(&size.to_le_bytes()) }
    }

    #[test]
    fn delivery_formula() {
        let mut net = SimNet::new();
        let link = LinkSpec::new(10.0, 100.0);
        let out = net.send(msg(op("a"), Endpoint::Coordinator, MessageKind::Insight, 0), &link).unwrap();
        assert!(matches!(out, SendOutcome::Scheduled { delivery: 10, .. }));
        let slow = LinkSpec::new(0.0, 8.0);
        assert_eq!(slow.transfer_ms(1_000_000, 0), 1000);
    }

    #[test]
    fn congestion_multiplies_latency() {
        let mut link = LinkSpec::new(10.0, 100.0);
        link.congestion = CongestionSchedule::new(vec![CongestionWindow { start: 100, end: 200, multiplier: 3.0 }]).unwrap();
        assert_eq!(link.transfer_ms(0, 50), 10);
        assert_eq!(link.transfer_ms(0, 150), 30);
        assert_eq!(link.transfer_ms(0, 200), 10);
    }

    #[test]
    fn raw_telemetry_blocked() {
        let mut net = SimNet::new();
        let link = LinkSpec::new(1.0, 1.0);
        let out = net.send(msg(op("a"), Endpoint::Coordinator, MessageKind::RawTelemetry, 10), &link).unwrap();
        assert_eq!(out, SendOutcome::Blocked);
        assert_eq!(net.violations().len(), 1);
        assert!(net.run_to_completion().is_empty());
        assert_eq!(audit_trace(net.trace()), net.violations());
        // Local raw telemetry is fine.
        let local = net.send(msg(op("a"), op("a"), MessageKind::RawTelemetry, 10), &link).unwrap();
        assert!(matches!(local, SendOutcome::Scheduled { .. }));
        assert_eq!(net.violations().len(), 1);
    }

    #[test]
    fn equal_times_keep_insertion_order() {
        let mut net = SimNet::new();
        let a = net.schedule_timer("a", 5).unwrap();
        let b = net.schedule_timer("b", 5).unwrap();
        let c = net.schedule_timer("c", 0).unwrap();
        let order: Vec<EventId> = net.run_to_completion().into_iter().map(|e| e.id).collect();
        assert_eq!(order, vec![c, a, b]);
        assert!(net.schedule_timer("x", -1).is_err());
    }

    #[test]
    fn run_until_stops_at_horizon() {
        let mut net = SimNet::new();
        net.schedule_timer("early", 5).unwrap();
        net.schedule_timer("late", 50).unwrap();
        assert_eq!(net.run_until(10).len(), 1);
        assert_eq!(net.now(), 10);
        assert_eq!(net.pending(), 1);
    }

    #[test]
    fn trace_round_trips() {
        let mut net = SimNet::new();
        let link = LinkSpec::new(3.0, 10.0);
        net.send(msg(op("a"), Endpoint::Coordinator, MessageKind::ModelUpdate, 100), &link).unwrap();
        net.send(msg(op("b"), op("a"), MessageKind::RawTelemetry, 5), &link).unwrap();
        net.schedule_timer("tick", 1).unwrap();
        net.run_to_completion();
        let text = net.export_trace();
        let parsed = import_trace(&text).unwrap();
        assert_eq!(parsed, net.trace());
        assert!(check_trace(&parsed).is_empty());
        assert!(import_trace("1 send x").is_err());
    }

    fn random_run(seed: u64, steps: usize) -> SimNet {
        let mut rng = crate::rng::SeedStream::new(seed);
        let mut net = SimNet::new();
        let kinds = [MessageKind::Insight, MessageKind::ModelUpdate, MessageKind::Control, MessageKind::RawTelemetry];
        let ends = [op("a"), op("b"), Endpoint::Coordinator];
        for _ in 0..steps {
            match rng.below(3) {
                0 => {
                    net.schedule_timer("t", rng.below(100) as i64).unwrap();
                }
                1 => {
                    let link = LinkSpec::new(rng.below(20) as f64, 1.0 + rng.below(100) as f64);
                    let m = msg(
                        ends[rng.below(2) as usize].clone(),
                        ends[rng.below(3) as usize].clone(),
                        kinds[rng.below(4) as usize],
                        rng.below(10_000),
                    );
                    net.send(m, &link).unwrap();
                }
                _ => {
                    net.advance();
                }
            }
        }
        net.run_to_completion();
        net
    }

    proptest! {
        #[test]
        fn replay_is_identical(seed in any::<u64>()) {
            prop_assert_eq!(random_run(seed, 60).trace_digest(), random_run(seed, 60).trace_digest());
        }

        #[test]
        fn live_count_matches_audit_and_trace_is_sound(seed in any::<u64>()) {
            let net = random_run(seed, 80);
            prop_assert_eq!(audit_trace(net.trace()), net.violations().to_vec());
            prop_assert!(check_trace(net.trace()).is_empty());
        }
    }
}
