//! Seeded telemetry generation and the ingestion layer that normalizes raw
//! observations into schema-valid records in canonical units.
//!
//! Canonical units: latency in `ms`, throughput and capacity in `mbps`,
//! ratios as a dimensionless value in `[0, 1]`, everything else as `count`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    ContractViolation, DomainError, FieldDef, OperatorId, Payload, SchemaDef, SchemaRef, SchemaRegistry,
    SemanticType, Tagged, Unit, Value, Version,
};
use crate::rng::SeedStream;

/// Milliseconds since scenario epoch.
pub type Timestamp = i64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TelemetryError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(&'static str),
    #[error("anomaly rate must lie strictly between 0 and 1, got {0}")]
    InvalidRate(f64),
    #[error("anomaly range {start}..{end} does not fit a series of length {len}")]
    InvalidRange { start: usize, end: usize, len: usize },
    #[error("topology needs at least two nodes, got {0}")]
    TooFewNodes(usize),
    #[error("average degree must be at least 1, got {0}")]
    DegreeTooLow(f64),
    #[error("raw record is missing field {0:?}")]
    MissingField(&'static str),
    #[error("unknown telemetry kind {0:?}")]
    UnknownKind(String),
    #[error("unknown network domain {0:?}")]
    UnknownDomain(String),
    #[error("unknown source unit {0:?}")]
    UnknownUnit(String),
    #[error("invalid timestamp {0:?}")]
    InvalidTimestamp(String),
    #[error("ratio metric {key:?} out of [0, 1]: {value}")]
    RatioOutOfRange { key: String, value: f64 },
    #[error("record failed validation: {}", crate::domain::describe_violations(.0))]
    Violations(Vec<ContractViolation>),
    #[error("record for operator {record} cannot enter the store of operator {store}")]
    ForeignRecord { store: OperatorId, record: OperatorId },
    #[error("query range is inverted: from {from} > to {to}")]
    InvertedRange { from: Timestamp, to: Timestamp },
    #[error("window timestamps must be strictly increasing")]
    UnorderedWindow,
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkDomain {
    Ran,
    Core,
    Transport,
    Oss,
    Bss,
}

impl NetworkDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            NetworkDomain::Ran => "ran",
            NetworkDomain::Core => "core",
            NetworkDomain::Transport => "transport",
            NetworkDomain::Oss => "oss",
            NetworkDomain::Bss => "bss",
        }
    }
}

impl FromStr for NetworkDomain {
    type Err = TelemetryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ran" => NetworkDomain::Ran,
            "core" => NetworkDomain::Core,
            "transport" => NetworkDomain::Transport,
            "oss" => NetworkDomain::Oss,
            "bss" => NetworkDomain::Bss,
            other => return Err(TelemetryError::UnknownDomain(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Kpi,
    Alarm,
    Log,
    TopologyEdge,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Kpi => "kpi",
            RecordKind::Alarm => "alarm",
            RecordKind::Log => "log",
            RecordKind::TopologyEdge => "topology-edge",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecordKind {
    type Err = TelemetryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "kpi" => RecordKind::Kpi,
            "alarm" => RecordKind::Alarm,
            "log" => RecordKind::Log,
            "topology-edge" => RecordKind::TopologyEdge,
            other => return Err(TelemetryError::UnknownKind(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordValue {
    Number(f64),
    Text(String),
}

impl RecordValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            RecordValue::Number(v) => Some(*v),
            RecordValue::Text(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub operator: OperatorId,
    pub domain: NetworkDomain,
    pub kind: RecordKind,
    pub key: String,
    pub timestamp: Timestamp,
    pub value: RecordValue,
    pub schema: SchemaRef,
}

/// Ordered `(timestamp, value)` series for one metric key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiWindow {
    pub key: String,
    points: Vec<(Timestamp, f64)>,
}

impl KpiWindow {
    pub fn new(key: &str, points: Vec<(Timestamp, f64)>) -> Result<Self, TelemetryError> {
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(TelemetryError::UnorderedWindow);
        }
        Ok(Self { key: key.to_string(), points })
    }

    /// Builds a window with timestamps `0, step, 2·step, …`.
    pub fn from_values(key: &str, values: &[f64], step_ms: i64) -> Self {
        let points = values.iter().enumerate().map(|(i, v)| (i as i64 * step_ms, *v)).collect();
        Self { key: key.to_string(), points }
    }

    pub fn empty(key: &str) -> Self {
        Self { key: key.to_string(), points: Vec::new() }
    }

    pub fn points(&self) -> &[(Timestamp, f64)] {
        &self.points
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn timestamps(&self) -> Vec<Timestamp> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Median spacing between consecutive timestamps, if there are at least two points.
    pub fn step(&self) -> Option<i64> {
        let mut gaps: Vec<i64> = self.points.windows(2).map(|w| w[1].0 - w[0].0).collect();
        if gaps.is_empty() {
            return None;
        }
        gaps.sort_unstable();
        Some(gaps[gaps.len() / 2])
    }
}

fn default_interval_ms() -> i64 {
    1_000
}

/// Parameters of a synthetic KPI series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub base: f64,
    #[serde(default)]
    pub trend: f64,
    #[serde(default)]
    pub season_amplitude: f64,
    #[serde(default = "one")]
    pub season_period: u32,
    #[serde(default)]
    pub noise_sigma: f64,
    pub length: usize,
    pub seed: u64,
    /// Spacing of generated timestamps.
    #[serde(default = "default_interval_ms")]
    pub interval_ms: i64,
    /// Timestamp of the first point.
    #[serde(default)]
    pub start_ms: i64,
}

fn one() -> u32 {
    1
}

impl GeneratorSpec {
    pub fn new(base: f64, length: usize, seed: u64) -> Self {
        Self {
            base,
            trend: 0.0,
            season_amplitude: 0.0,
            season_period: 1,
            noise_sigma: 0.0,
            length,
            seed,
            interval_ms: default_interval_ms(),
            start_ms: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TelemetryError> {
        if self.season_period < 1 {
            return Err(TelemetryError::InvalidSpec("season_period must be at least 1"));
        }
        if self.length < 1 {
            return Err(TelemetryError::InvalidSpec("length must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(TelemetryError::InvalidSpec("noise_sigma must be finite and non-negative"));
        }
        if self.interval_ms < 1 {
            return Err(TelemetryError::InvalidSpec("interval_ms must be at least 1"));
        }
        if self.start_ms < 0 {
            return Err(TelemetryError::InvalidSpec("start_ms must be non-negative"));
        }
        Ok(())
    }
}

/// `x_t = base + trend·t + amplitude·sin(2πt/period) + noise_sigma·z_t`, where `z_t` is the
/// `t`-th Box–Muller draw of the stream seeded with `spec.seed`.
pub fn generate_kpi_series(key: &str, spec: &GeneratorSpec) -> Result<KpiWindow, TelemetryError> {
    spec.validate()?;
    let mut rng = SeedStream::new(spec.seed);
    let period = f64::from(spec.season_period);
    let points = (0..spec.length)
        .map(|t| {
            let tf = t as f64;
            let season = spec.season_amplitude * (2.0 * std::f64::consts::PI * tf / period).sin();
            let noise = spec.noise_sigma * rng.gaussian();
            let ts = spec.start_ms + t as i64 * spec.interval_ms;
            (ts, spec.base + spec.trend * tf + season + noise)
        })
        .collect();
    Ok(KpiWindow { key: key.to_string(), points })
}

/// Shifts `⌈rate·len⌉` distinct, seeded positions upward by `amplitude_sigmas·noise_sigma`
/// (or by `amplitude_sigmas` when `noise_sigma` is zero). Returns the sorted positions.
pub fn inject_anomalies(
    series: &KpiWindow,
    rate: f64,
    amplitude_sigmas: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<(KpiWindow, Vec<usize>), TelemetryError> {
    inject_anomalies_in(series, 0..series.len(), rate, amplitude_sigmas, noise_sigma, seed)
}

/// Like [`inject_anomalies`], but positions are drawn from `eligible` only and the count is
/// `⌈rate·eligible.len()⌉`.
pub fn inject_anomalies_in(
    series: &KpiWindow,
    eligible: Range<usize>,
    rate: f64,
    amplitude_sigmas: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<(KpiWindow, Vec<usize>), TelemetryError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(TelemetryError::InvalidRate(rate));
    }
    if eligible.start >= eligible.end || eligible.end > series.len() {
        return Err(TelemetryError::InvalidRange { start: eligible.start, end: eligible.end, len: series.len() });
    }
    let span = eligible.end - eligible.start;
    let count = ((rate * span as f64).ceil() as usize).clamp(1, span);
    // Partial Fisher-Yates over the eligible positions.
    let mut pool: Vec<usize> = eligible.collect();
    let mut rng = SeedStream::new(seed);
    for i in 0..count {
        let j = i + rng.below((pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    let mut indices = pool[..count].to_vec();
    indices.sort_unstable();
    let shift = if noise_sigma == 0.0 { amplitude_sigmas } else { amplitude_sigmas * noise_sigma };
    let mut out = series.clone();
    for &i in &indices {
        out.points[i].1 += shift;
    }
    Ok((out, indices))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeType {
    Cell,
    Router,
    CoreFunction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyEdge {
    pub a: String,
    pub b: String,
    pub capacity_mbps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyGraph {
    pub nodes: Vec<(String, NodeType)>,
    pub edges: Vec<TopologyEdge>,
}

impl TopologyGraph {
    pub fn neighbors(&self, node: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter_map(|e| {
                if e.a == node {
                    Some(e.b.as_str())
                } else if e.b == node {
                    Some(e.a.as_str())
                } else {
                    None
                }
            })
            .collect()
    }

    /// Endpoints exist and no edge is a self-loop.
    pub fn is_well_formed(&self) -> bool {
        let ids: BTreeSet<&str> = self.nodes.iter().map(|n| n.0.as_str()).collect();
        self.edges
            .iter()
            .all(|e| e.a != e.b && ids.contains(e.a.as_str()) && ids.contains(e.b.as_str()))
    }
}

const CAPACITIES_MBPS: [f64; 3] = [100.0, 1_000.0, 10_000.0];

/// Connected random graph: a seeded random spanning tree plus extra distinct edges until the
/// edge count reaches `round(avg_degree·n/2)` (at least `n-1`, at most `n(n-1)/2`).
///
/// Node `n0` is a core function, the next `max(1, n/5)` nodes are routers, the rest cells.
pub fn generate_topology(n: usize, avg_degree: f64, seed: u64) -> Result<TopologyGraph, TelemetryError> {
    if n < 2 {
        return Err(TelemetryError::TooFewNodes(n));
    }
    if !(avg_degree >= 1.0) {
        return Err(TelemetryError::DegreeTooLow(avg_degree));
    }
    let routers = (n / 5).max(1);
    let nodes: Vec<(String, NodeType)> = (0..n)
        .map(|i| {
            let ty = match i {
                0 => NodeType::CoreFunction,
                i if i <= routers => NodeType::Router,
                _ => NodeType::Cell,
            };
            (format!("n{i}"), ty)
        })
        .collect();
    let max_edges = n * (n - 1) / 2;
    let target = ((avg_degree * n as f64 / 2.0).round() as usize).clamp(n - 1, max_edges);
    let mut rng = SeedStream::new(seed);
    let mut present = BTreeSet::new();
    let mut edges = Vec::with_capacity(target);
    let mut push = |a: usize, b: usize, rng: &mut SeedStream| {
        let cap = CAPACITIES_MBPS[rng.below(CAPACITIES_MBPS.len() as u64) as usize];
        edges.push(TopologyEdge { a: format!("n{a}"), b: format!("n{b}"), capacity_mbps: cap });
    };
    for i in 1..n {
        let parent = rng.below(i as u64) as usize;
        present.insert((parent, i));
        push(parent, i, &mut rng);
    }
    while present.len() < target {
        let a = rng.below(n as u64) as usize;
        let b = rng.below(n as u64) as usize;
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if present.insert(key) {
            push(key.0, key.1, &mut rng);
        }
    }
    Ok(TopologyGraph { nodes, edges })
}

/// Breadth-first reachability from the first node.
pub fn is_connected(graph: &TopologyGraph) -> bool {
    let Some(start) = graph.nodes.first() else { return true };
    let mut seen = BTreeSet::from([start.0.as_str()]);
    let mut queue = VecDeque::from([start.0.as_str()]);
    while let Some(node) = queue.pop_front() {
        for next in graph.neighbors(node) {
            if seen.insert(next) {
                queue.push_back(next);
            }
        }
    }
    seen.len() == graph.nodes.len()
}

/// Metric families and their canonical units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricFamily {
    Latency,
    Throughput,
    Loss,
    Load,
    Counter,
}

impl MetricFamily {
    /// Classifies a key by prefix: `latency*`, `throughput*`, `loss*`, `load*`/`utilization*`.
    pub fn of_key(key: &str) -> Self {
        if key.starts_with("latency") {
            MetricFamily::Latency
        } else if key.starts_with("throughput") || key.starts_with("demand") {
            MetricFamily::Throughput
        } else if key.starts_with("loss") {
            MetricFamily::Loss
        } else if key.starts_with("load") || key.starts_with("utilization") {
            MetricFamily::Load
        } else {
            MetricFamily::Counter
        }
    }

    pub fn unit(self) -> Unit {
        match self {
            MetricFamily::Latency => Unit::Ms,
            MetricFamily::Throughput => Unit::Mbps,
            MetricFamily::Loss | MetricFamily::Load => Unit::Dimensionless,
            MetricFamily::Counter => Unit::Count,
        }
    }

    fn schema_name(self) -> &'static str {
        match self {
            MetricFamily::Latency => "kpi.latency",
            MetricFamily::Throughput => "kpi.throughput",
            MetricFamily::Loss => "kpi.loss",
            MetricFamily::Load => "kpi.load",
            MetricFamily::Counter => "kpi.counter",
        }
    }

    fn is_ratio(self) -> bool {
        matches!(self, MetricFamily::Loss | MetricFamily::Load)
    }
}

const RECORD_VERSION: Version = Version::new(1, 0);

fn record_fields(value_ty: SemanticType, value_unit: Unit) -> Vec<FieldDef> {
    vec![
        FieldDef::required("operator", SemanticType::String, Unit::Dimensionless),
        FieldDef::required("domain", SemanticType::String, Unit::Dimensionless),
        FieldDef::required("key", SemanticType::String, Unit::Dimensionless),
        FieldDef::required("timestamp", SemanticType::Timestamp, Unit::Ms),
        FieldDef::required("value", value_ty, value_unit),
    ]
}

/// Record schemas registered by [`Ingestor::new`].
pub fn record_schemas() -> Vec<SchemaDef> {
    let mut out: Vec<SchemaDef> = [
        MetricFamily::Latency,
        MetricFamily::Throughput,
        MetricFamily::Loss,
        MetricFamily::Load,
        MetricFamily::Counter,
    ]
    .into_iter()
    .map(|f| SchemaDef::new(f.schema_name(), RECORD_VERSION, record_fields(SemanticType::Number, f.unit())))
    .collect();
    out.push(SchemaDef::new(
        "telemetry.event",
        RECORD_VERSION,
        record_fields(SemanticType::String, Unit::Dimensionless),
    ));
    out.push(SchemaDef::new(
        "telemetry.topology-edge",
        RECORD_VERSION,
        record_fields(SemanticType::Number, Unit::Mbps),
    ));
    out
}

/// Source unit → (canonical unit, multiplier).
fn convert_unit(source: &str) -> Result<(Unit, f64), TelemetryError> {
    Ok(match source {
        "s" => (Unit::Ms, 1_000.0),
        "ms" => (Unit::Ms, 1.0),
        "us" => (Unit::Ms, 1e-3),
        "bps" => (Unit::Mbps, 1e-6),
        "kbps" => (Unit::Mbps, 1e-3),
        "mbps" => (Unit::Mbps, 1.0),
        "gbps" => (Unit::Mbps, 1_000.0),
        "percent" => (Unit::Dimensionless, 0.01),
        "ratio" | "dimensionless" => (Unit::Dimensionless, 1.0),
        "count" => (Unit::Count, 1.0),
        other => return Err(TelemetryError::UnknownUnit(other.to_string())),
    })
}

fn scale(value: f64, factor: f64) -> f64 {
    // Exact division for the reciprocal factors keeps 2000 kbps at exactly 2 mbps.
    if factor < 1.0 {
        value / (1.0 / factor).round()
    } else {
        value * factor
    }
}

/// Normalizes raw observations into schema-validated records.
#[derive(Debug, Clone)]
pub struct Ingestor {
    registry: Arc<SchemaRegistry>,
}

impl Ingestor {
    pub fn new(registry: Arc<SchemaRegistry>) -> Result<Self, TelemetryError> {
        for def in record_schemas() {
            registry.register(def)?;
        }
        Ok(Self { registry })
    }

    pub fn registry(&self) -> &Arc<SchemaRegistry> {
        &self.registry
    }

    /// Converts a raw association (`operator`, `kind`, `key`, `timestamp`, `value`, optional
    /// `domain` defaulting to `ran`, optional `unit`) into a canonical record.
    ///
    /// The source unit comes from `raw["unit"]`, then `unit_hints[key]`, then the canonical
    /// unit of the key's metric family.
    pub fn ingest(
        &self,
        raw: &BTreeMap<String, String>,
        unit_hints: &BTreeMap<String, String>,
    ) -> Result<TelemetryRecord, TelemetryError> {
        let field = |name: &'static str| raw.get(name).map(String::as_str).ok_or(TelemetryError::MissingField(name));
        let operator = OperatorId::new(field("operator")?)?;
        let kind: RecordKind = field("kind")?.parse()?;
        let key = field("key")?.to_string();
        let ts_text = field("timestamp")?;
        let timestamp: Timestamp = ts_text
            .parse()
            .ok()
            .filter(|t| *t >= 0)
            .ok_or_else(|| TelemetryError::InvalidTimestamp(ts_text.to_string()))?;
        let domain = match raw.get("domain") {
            Some(d) => d.parse()?,
            None => NetworkDomain::Ran,
        };
        let value_text = field("value")?;

        let (schema_name, family) = match kind {
            RecordKind::Kpi => {
                let family = MetricFamily::of_key(&key);
                (family.schema_name(), Some(family))
            }
            RecordKind::TopologyEdge => ("telemetry.topology-edge", None),
            RecordKind::Alarm | RecordKind::Log => ("telemetry.event", None),
        };
        let schema = SchemaRef::new(schema_name, RECORD_VERSION);

        let tagged = match kind {
            RecordKind::Alarm | RecordKind::Log => {
                Tagged { value: Value::String(value_text.to_string()), unit: None }
            }
            RecordKind::Kpi | RecordKind::TopologyEdge => {
                let default_unit = family.map_or(Unit::Mbps, MetricFamily::unit);
                let source = raw
                    .get("unit")
                    .or_else(|| unit_hints.get(&key))
                    .map_or(default_unit.as_str(), String::as_str);
                let (unit, factor) = convert_unit(source)?;
                match value_text.parse::<f64>() {
                    Ok(v) if v.is_finite() => Tagged { value: Value::Number(scale(v, factor)), unit: Some(unit) },
                    _ => Tagged { value: Value::String(value_text.to_string()), unit: Some(unit) },
                }
            }
        };

        let mut payload = Payload::new()
            .with("operator", Value::String(operator.to_string()))
            .with("domain", Value::String(domain.as_str().to_string()))
            .with("key", Value::String(key.clone()))
            .with("timestamp", Value::Timestamp(timestamp));
        payload.insert_tagged("value", tagged.clone());
        self.registry.validate_payload(&schema, &payload)?.map_err(TelemetryError::Violations)?;

        let value = match tagged.value {
            Value::Number(v) => {
                if family.is_some_and(MetricFamily::is_ratio) && !(0.0..=1.0).contains(&v) {
                    return Err(TelemetryError::RatioOutOfRange { key, value: v });
                }
                RecordValue::Number(v)
            }
            Value::String(s) => RecordValue::Text(s),
            _ => unreachable!("validated value is a number or a string"),
        };
        Ok(TelemetryRecord { operator, domain, kind, key, timestamp, value, schema })
    }
}

impl TelemetryRecord {
    /// Raw association that re-ingests to this record.
    pub fn to_raw(&self) -> BTreeMap<String, String> {
        let mut raw = BTreeMap::new();
        raw.insert("operator".into(), self.operator.to_string());
        raw.insert("domain".into(), self.domain.as_str().into());
        raw.insert("kind".into(), self.kind.as_str().into());
        raw.insert("key".into(), self.key.clone());
        raw.insert("timestamp".into(), self.timestamp.to_string());
        match &self.value {
            RecordValue::Number(v) => {
                raw.insert("value".into(), v.to_string());
                let unit = match self.kind {
                    RecordKind::TopologyEdge => Unit::Mbps,
                    _ => MetricFamily::of_key(&self.key).unit(),
                };
                raw.insert("unit".into(), unit.as_str().into());
            }
            RecordValue::Text(s) => {
                raw.insert("value".into(), s.clone());
            }
        }
        raw
    }
}

/// Line-delimited export: `operator domain kind key timestamp value schema`, tab separated.
/// Numbers use the shortest decimal that round-trips; text values are JSON string literals.
pub fn export_records(records: &[TelemetryRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let value = match &r.value {
            RecordValue::Number(v) => v.to_string(),
            RecordValue::Text(s) => serde_json::to_string(s).expect("string serializes"),
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.operator,
            r.domain.as_str(),
            r.kind,
            r.key,
            r.timestamp,
            value,
            r.schema
        ));
    }
    out
}

/// Parses an export and re-ingests every line. Errors carry the 1-based line number.
pub fn import_records(ingestor: &Ingestor, text: &str) -> Result<Vec<TelemetryRecord>, TelemetryError> {
    let hints = BTreeMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let malformed = |reason: String| TelemetryError::MalformedLine { line: line_no, reason };
        let cols: Vec<&str> = line.split('\t').collect();
        let [operator, domain, kind, key, timestamp, value, schema] = cols[..] else {
            return Err(malformed(format!("expected 7 tab-separated fields, found {}", cols.len())));
        };
        let mut raw = BTreeMap::new();
        raw.insert("operator".to_string(), operator.to_string());
        raw.insert("domain".to_string(), domain.to_string());
        raw.insert("kind".to_string(), kind.to_string());
        raw.insert("key".to_string(), key.to_string());
        raw.insert("timestamp".to_string(), timestamp.to_string());
        if value.starts_with('"') {
            let text: String = serde_json::from_str(value).map_err(|e| malformed(e.to_string()))?;
            raw.insert("value".to_string(), text);
        } else {
            raw.insert("value".to_string(), value.to_string());
            let k: RecordKind = kind.parse().map_err(|e: TelemetryError| malformed(e.to_string()))?;
            let unit = match k {
                RecordKind::TopologyEdge => Unit::Mbps,
                _ => MetricFamily::of_key(key).unit(),
            };
            raw.insert("unit".to_string(), unit.as_str().to_string());
        }
        let record = ingestor.ingest(&raw, &hints).map_err(|e| malformed(e.to_string()))?;
        if record.schema.to_string() != schema {
            return Err(malformed(format!("schema {schema} does not match {}", record.schema)));
        }
        out.push(record);
    }
    Ok(out)
}

/// Per-operator store of normalized records, ordered by timestamp within each `(kind, key)`.
/// A later record with an existing timestamp replaces the earlier one.
#[derive(Debug)]
pub struct TelemetryStore {
    operator: OperatorId,
    series: RwLock<BTreeMap<(RecordKind, String), BTreeMap<Timestamp, RecordValue>>>,
}

impl TelemetryStore {
    pub fn new(operator: OperatorId) -> Self {
        Self { operator, series: RwLock::new(BTreeMap::new()) }
    }

    pub fn operator(&self) -> &OperatorId {
        &self.operator
    }

    pub fn insert(&self, record: TelemetryRecord) -> Result<(), TelemetryError> {
        if record.operator != self.operator {
            return Err(TelemetryError::ForeignRecord { store: self.operator.clone(), record: record.operator });
        }
        self.series
            .write()
            .expect("telemetry store lock poisoned")
            .entry((record.kind, record.key))
            .or_default()
            .insert(record.timestamp, record.value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.series.read().expect("telemetry store lock poisoned").values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every stored `(kind, key)` pair.
    pub fn keys(&self) -> Vec<(RecordKind, String)> {
        self.series.read().expect("telemetry store lock poisoned").keys().cloned().collect()
    }

    /// Records of one `(kind, key)` with `from <= t < to`, in timestamp order.
    pub fn query(
        &self,
        kind: RecordKind,
        key: &str,
        from: Timestamp,
        to: Timestamp,
    ) -> Result<Vec<(Timestamp, RecordValue)>, TelemetryError> {
        if from > to {
            return Err(TelemetryError::InvertedRange { from, to });
        }
        let series = self.series.read().expect("telemetry store lock poisoned");
        Ok(series
            .get(&(kind, key.to_string()))
            .map(|s| s.range(from..to).map(|(t, v)| (*t, v.clone())).collect())
            .unwrap_or_default())
    }

    /// Numeric KPI points of `key` with `from <= t < to`.
    pub fn query_window(&self, key: &str, from: Timestamp, to: Timestamp) -> Result<KpiWindow, TelemetryError> {
        let points = self
            .query(RecordKind::Kpi, key, from, to)?
            .into_iter()
            .filter_map(|(t, v)| v.as_number().map(|x| (t, x)))
            .collect();
        Ok(KpiWindow { key: key.to_string(), points })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ingestor() -> Ingestor {
        Ingestor::new(Arc::new(SchemaRegistry::new())).unwrap()
    }

    fn raw(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = GeneratorSpec::new(10.0, 64, 42);
        spec.noise_sigma = 2.0;
        spec.season_amplitude = 3.0;
        spec.season_period = 12;
        let a = generate_kpi_series("latency_ms", &spec).unwrap();
        let b = generate_kpi_series("latency_ms", &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn closed_form_without_noise() {
        let mut spec = GeneratorSpec::new(1.0, 4, 0);
        spec.trend = 2.0;
        let w = generate_kpi_series("x", &spec).unwrap();
        assert_eq!(w.values(), vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(w.timestamps(), vec![0, 1000, 2000, 3000]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = GeneratorSpec::new(1.0, 4, 0);
        spec.season_period = 0;
        assert!(generate_kpi_series("x", &spec).is_err());
        let spec = GeneratorSpec::new(1.0, 0, 0);
        assert!(generate_kpi_series("x", &spec).is_err());
    }

    #[test]
    fn single_anomaly_when_rate_small() {
        let w = generate_kpi_series("x", &GeneratorSpec::new(0.0, 50, 1)).unwrap();
        let (_, idx) = inject_anomalies(&w, 0.01, 5.0, 1.0, 7).unwrap();
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn zero_amplitude_leaves_series() {
        let w = generate_kpi_series("x", &GeneratorSpec::new(0.0, 50, 1)).unwrap();
        let (out, idx) = inject_anomalies(&w, 0.1, 0.0, 1.0, 7).unwrap();
        assert_eq!(out, w);
        assert_eq!(idx.len(), 5);
    }

    #[test]
    fn anomaly_rate_bounds() {
        let w = KpiWindow::from_values("x", &[0.0; 10], 1);
        assert!(inject_anomalies(&w, 0.0, 1.0, 1.0, 0).is_err());
        assert!(inject_anomalies(&w, 1.0, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn zero_noise_shifts_by_absolute_amplitude() {
        let w = KpiWindow::from_values("x", &[0.0; 10], 1);
        let (out, idx) = inject_anomalies(&w, 0.05, 4.0, 0.0, 3).unwrap();
        assert_eq!(out.values()[idx[0]], 4.0);
    }

    #[test]
    fn two_nodes_single_edge() {
        let g = generate_topology(2, 1.0, 9).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert!(is_connected(&g));
    }

    #[test]
    fn topology_deterministic_and_rejects_low_degree() {
        assert_eq!(generate_topology(20, 3.0, 5).unwrap(), generate_topology(20, 3.0, 5).unwrap());
        assert!(matches!(generate_topology(10, 0.5, 5), Err(TelemetryError::DegreeTooLow(_))));
        assert!(matches!(generate_topology(1, 2.0, 5), Err(TelemetryError::TooFewNodes(1))));
    }

    #[test]
    fn latency_seconds_to_ms() {
        let r = ingestor()
            .ingest(
                &raw(&[("operator", "op-a"), ("kind", "kpi"), ("key", "latency"), ("timestamp", "5"), ("value", "0.25"), ("unit", "s")]),
                &BTreeMap::new(),
            )
            .unwrap();
        assert_eq!(r.value, RecordValue::Number(250.0));
        assert_eq!(r.schema.name, "kpi.latency");
    }

    #[test]
    fn throughput_kbps_to_mbps_via_hint() {
        let hints = raw(&[("throughput_dl", "kbps")]);
        let r = ingestor()
            .ingest(
                &raw(&[("operator", "op-a"), ("kind", "kpi"), ("key", "throughput_dl"), ("timestamp", "5"), ("value", "2000")]),
                &hints,
            )
            .unwrap();
        assert_eq!(r.value, RecordValue::Number(2.0));
    }

    #[test]
    fn percent_to_ratio() {
        let r = ingestor()
            .ingest(
                &raw(&[("operator", "op-a"), ("kind", "kpi"), ("key", "loss_ratio"), ("timestamp", "0"), ("value", "2.5"), ("unit", "percent")]),
                &BTreeMap::new(),
            )
            .unwrap();
        assert_eq!(r.value, RecordValue::Number(0.025));
    }

    #[test]
    fn unknown_kind_rejected() {
        let err = ingestor()
            .ingest(
                &raw(&[("operator", "op-a"), ("kind", "video"), ("key", "x"), ("timestamp", "0"), ("value", "1")]),
                &BTreeMap::new(),
            )
            .unwrap_err();
        assert_eq!(err, TelemetryError::UnknownKind("video".into()));
    }

    #[test]
    fn wrong_unit_and_wrong_type_surface_violations() {
        let ing = ingestor();
        let err = ing
            .ingest(
                &raw(&[("operator", "op-a"), ("kind", "kpi"), ("key", "latency"), ("timestamp", "0"), ("value", "3"), ("unit", "mbps")]),
                &BTreeMap::new(),
            )
            .unwrap_err();
        assert_eq!(
            err,
            TelemetryError::Violations(vec![ContractViolation::new("value", crate::domain::ViolationReason::WrongUnit)])
        );
        let err = ing
            .ingest(
                &raw(&[("operator", "op-a"), ("kind", "kpi"), ("key", "latency"), ("timestamp", "0"), ("value", "fast")]),
                &BTreeMap::new(),
            )
            .unwrap_err();
        assert_eq!(
            err,
            TelemetryError::Violations(vec![ContractViolation::new("value", crate::domain::ViolationReason::WrongType)])
        );
    }

    #[test]
    fn missing_and_negative_timestamp() {
        let ing = ingestor();
        assert_eq!(
            ing.ingest(&raw(&[("operator", "op-a"), ("kind", "kpi"), ("key", "x"), ("value", "1")]), &BTreeMap::new()),
            Err(TelemetryError::MissingField("timestamp"))
        );
        assert!(matches!(
            ing.ingest(&raw(&[("operator", "op-a"), ("kind", "kpi"), ("key", "x"), ("timestamp", "-1"), ("value", "1")]), &BTreeMap::new()),
            Err(TelemetryError::InvalidTimestamp(_))
        ));
    }

    fn store_with(points: &[(i64, f64)]) -> TelemetryStore {
        let ing = ingestor();
        let store = TelemetryStore::new(OperatorId::new("op-a").unwrap());
        for (t, v) in points.iter().rev() {
            let r = ing
                .ingest(
                    &raw(&[("operator", "op-a"), ("kind", "kpi"), ("key", "latency_ms"), ("timestamp", &t.to_string()), ("value", &v.to_string())]),
                    &BTreeMap::new(),
                )
                .unwrap();
            store.insert(r).unwrap();
        }
        store
    }

    #[test]
    fn query_window_cases() {
        let store = store_with(&[(100, 1.0), (200, 2.0), (300, 3.0)]);
        assert!(store.query_window("latency_ms", 0, 100).unwrap().is_empty());
        assert_eq!(store.query_window("latency_ms", 0, 1_000).unwrap().values(), vec![1.0, 2.0, 3.0]);
        assert_eq!(store.query_window("latency_ms", 100, 300).unwrap().timestamps(), vec![100, 200]);
        assert!(matches!(store.query_window("latency_ms", 5, 4), Err(TelemetryError::InvertedRange { .. })));
    }

    #[test]
    fn foreign_records_rejected() {
        let ing = ingestor();
        let store = TelemetryStore::new(OperatorId::new("op-b").unwrap());
        let r = ing
            .ingest(&raw(&[("operator", "op-a"), ("kind", "alarm"), ("key", "link-down"), ("timestamp", "1"), ("value", "x")]), &BTreeMap::new())
            .unwrap();
        assert!(matches!(store.insert(r), Err(TelemetryError::ForeignRecord { .. })));
    }

    #[test]
    fn import_reports_line_number() {
        let ing = ingestor();
        let err = import_records(&ing, "op-a\tran\tkpi\tlatency\t0\t1\tkpi.latency@1.0\nbroken\n").unwrap_err();
        assert!(matches!(err, TelemetryError::MalformedLine { line: 2, .. }));
    }

    fn arb_record() -> impl Strategy<Value = BTreeMap<String, String>> {
        let kpi = (
            prop_oneof![Just("latency_ms"), Just("throughput_dl"), Just("loss_ratio"), Just("load"), Just("sessions")],
            0i64..10_000_000,
            0.0f64..1.0,
            prop_oneof![Just("ran"), Just("core"), Just("transport")],
        )
            .prop_map(|(key, ts, v, domain)| {
                raw(&[("operator", "op-x"), ("kind", "kpi"), ("key", key), ("timestamp", &ts.to_string()), ("value", &v.to_string()), ("domain", domain)])
            });
        let event = (0i64..10_000_000, "[ -~\t]{0,12}").prop_map(|(ts, text)| {
            raw(&[("operator", "op-x"), ("kind", "log"), ("key", "syslog"), ("timestamp", &ts.to_string()), ("value", &text), ("domain", "oss")])
        });
        prop_oneof![kpi, event]
    }

    proptest! {
        #[test]
        fn export_then_import_round_trips(raws in prop::collection::vec(arb_record(), 1..8)) {
            let ing = ingestor();
            let records: Vec<_> = raws.iter().map(|r| ing.ingest(r, &BTreeMap::new()).unwrap()).collect();
            let text = export_records(&records);
            prop_assert_eq!(import_records(&ing, &text).unwrap(), records.clone());
            for r in &records {
                prop_assert_eq!(&ing.ingest(&r.to_raw(), &BTreeMap::new()).unwrap(), r);
            }
        }

        #[test]
        fn query_results_sorted_and_bounded(ts in prop::collection::btree_set(0i64..1_000, 0..40), from in 0i64..1_000, len in 0i64..500) {
            let pts: Vec<(i64, f64)> = ts.iter().map(|t| (*t, *t as f64)).collect();
            let store = store_with(&pts);
            let w = store.query_window("latency_ms", from, from + len).unwrap();
            prop_assert!(w.points().windows(2).all(|p| p[0].0 < p[1].0));
            prop_assert!(w.points().iter().all(|p| p.0 >= from && p.0 < from + len));
            prop_assert_eq!(w.len(), ts.range(from..from + len).count());
        }

        #[test]
        fn injected_indices_equal_series_diff(seed in any::<u64>(), rate in 0.01f64..0.5, amp in 1.0f64..10.0) {
            let mut spec = GeneratorSpec::new(5.0, 80, seed);
            spec.noise_sigma = 1.0;
            let w = generate_kpi_series("x", &spec).unwrap();
            let (out, idx) = inject_anomalies(&w, rate, amp, 1.0, seed ^ 0xabc).unwrap();
            let diff: Vec<usize> = (0..w.len()).filter(|&i| w.values()[i] != out.values()[i]).collect();
            prop_assert_eq!(diff, idx);
        }
    }
}
