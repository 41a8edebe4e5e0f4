//! Scenario configuration, validation and the end-to-end simulation driver.
//!
//! A scenario is a TOML document describing operators, their links and generated telemetry,
//! the agents they host, workflow edges between agents, and federated training rounds.
//! [`run_scenario`] turns a validated configuration into a [`ScenarioReport`] plus the ledger,
//! trace and per-round metrics exports. Every random quantity is derived from the scenario
//! seed, so a run is a pure function of the configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{self, reference_agent};
use crate::codec::{Canonical, Digest};
use crate::domain::{OperatorId, Payload, SchemaRegistry, SemanticType, Value, Version};
use crate::federation::{
    plan_round, run_round, CongestionSchedule, CongestionWindow, DpConfig, FederationError, GlobalModel,
    Participant, RoundConfig, RoundEnv, RoundRecord,
};
use crate::kernel::{
    AgentDescriptor, AgentId, AgentKind, DataScope, Delivery, KernelConfig, KernelError, Kernel, KeyPattern,
    ReadRequest, ScopeOperator, TopicPattern, WorkflowEdge, WorkflowSpec,
};
use crate::ledger::{self, EntryType, KeyId, Signer};
use crate::rng::{derive_seed, SeedStream};
use crate::simnet::{audit_trace, check_trace, Endpoint, LinkSpec, MessageKind, SimMessage, SimNet, Violation};
use crate::telemetry::{generate_kpi_series, inject_anomalies_in, GeneratorSpec, Ingestor, RecordKind, TelemetryError};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A configuration problem, located by field path (or line and column for parse errors).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid scenario:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ConfigError>),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Ledger(#[from] ledger::LedgerError),
    #[error(transparent)]
    Sim(#[from] crate::simnet::SimError),
    #[error("trace failed its structural audit: {0}")]
    Trace(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Simulated time budget; federation rounds that cannot start by then are aborted.
    pub duration_ms: i64,
    #[serde(default)]
    pub operators: Vec<OperatorConfig>,
    #[serde(default)]
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub workflows: Vec<WorkflowConfig>,
    #[serde(default)]
    pub federation: Option<FederationConfig>,
    #[serde(default)]
    pub reporting: ReportingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub id: String,
    pub region: String,
    /// Link from this operator to the coordinator.
    pub link: LinkSpec,
    #[serde(default)]
    pub telemetry: Vec<TelemetryConfig>,
    /// Default data scopes for agents hosted here.
    #[serde(default)]
    pub scopes: Vec<ScopeConfig>,
    #[serde(default)]
    pub training: Option<TrainingConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryConfig {
    pub key: String,
    pub base: f64,
    #[serde(default)]
    pub trend: f64,
    #[serde(default)]
    pub season_amplitude: f64,
    #[serde(default = "one_u32")]
    pub season_period: u32,
    #[serde(default)]
    pub noise_sigma: f64,
    pub length: usize,
    #[serde(default = "default_interval")]
    pub interval_ms: i64,
    #[serde(default)]
    pub start_ms: i64,
    /// Number of injected upward anomalies.
    #[serde(default)]
    pub anomalies: usize,
    /// Anomaly magnitude in units of `noise_sigma`.
    #[serde(default = "default_anomaly_sigmas")]
    pub anomaly_sigmas: f64,
    /// Anomalies are only placed at or after this index.
    #[serde(default = "default_warmup")]
    pub anomaly_warmup: usize,
}

fn one_u32() -> u32 {
    1
}

fn default_interval() -> i64 {
    1000
}

fn default_anomaly_sigmas() -> f64 {
    8.0
}

fn default_warmup() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScopeConfig {
    /// `self` or an operator id.
    #[serde(default = "self_scope")]
    pub operator: String,
    pub kind: RecordKind,
    pub key: String,
}

fn self_scope() -> String {
    "self".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub samples: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_epochs() -> usize {
    10
}

fn default_lr() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub name: String,
    pub kind: AgentKind,
    pub hosts: Vec<String>,
    /// Telemetry key whose full window is fed to the agent.
    #[serde(default)]
    pub input: Option<String>,
    /// Fields of the kind's input schema, used both to configure the agent and as input.
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
    /// Overrides the host's default scopes.
    #[serde(default)]
    pub scopes: Option<Vec<ScopeConfig>>,
    /// Misconfiguration switch: also ships the raw input window to the coordinator.
    #[serde(default)]
    pub export_raw: bool,
    #[serde(default)]
    pub run_at_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowConfig {
    pub producer: String,
    pub consumer: String,
    /// Topic pattern; defaults to every topic of the producer.
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub defaults: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: u64,
    /// Defaults to every operator with a training section.
    #[serde(default)]
    pub participants: Option<Vec<String>>,
    #[serde(default)]
    pub masking: bool,
    pub deadline_ms: i64,
    #[serde(default = "default_lookahead")]
    pub lookahead_ms: i64,
    #[serde(default)]
    pub start_ms: i64,
    #[serde(default = "default_round_interval")]
    pub round_interval_ms: i64,
    pub dp: DpConfig,
    /// Peak windows; every instant outside them is off-peak.
    #[serde(default)]
    pub congestion: Vec<CongestionWindow>,
    pub data: DataConfig,
    #[serde(default)]
    pub dropouts: Vec<DropoutConfig>,
}

fn default_lookahead() -> i64 {
    3_600_000
}

fn default_round_interval() -> i64 {
    60_000
}

/// Synthetic regression task `y = slope·x + intercept + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub slope: f64,
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "minus_one")]
    pub x_min: f64,
    #[serde(default = "plus_one")]
    pub x_max: f64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn minus_one() -> f64 {
    -1.0
}

fn plus_one() -> f64 {
    1.0
}

fn default_eval_samples() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    pub round: u64,
    pub operator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportingConfig {
    /// Whether rounds aborted by the protocol make the run fail.
    #[serde(default = "yes")]
    pub rounds_required: bool,
}

fn yes() -> bool {
    true
}

impl Default for ReportingConfig {
    fn default() -> Self {
        Self { rounds_required: true }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

impl ScenarioConfig {
    /// Parses and validates a scenario document.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let path = match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    format!("line {line}, column {col}")
                }
                None => "document".to_string(),
            };
            ScenarioError::Invalid(vec![ConfigError::new(path, e.message().trim())])
        })?;
        cfg.validate().map_err(ScenarioError::Invalid)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    fn operator_index(&self) -> BTreeMap<&str, usize> {
        self.operators.iter().enumerate().map(|(i, o)| (o.id.as_str(), i)).collect()
    }

    /// Federation participants: the explicit list, or every operator with training data.
    pub fn participants(&self) -> Vec<String> {
        match self.federation.as_ref().and_then(|f| f.participants.clone()) {
            Some(list) => list,
            None => self.operators.iter().filter(|o| o.training.is_some()).map(|o| o.id.clone()).collect(),
        }
    }

    /// Every semantic problem in the configuration.
    pub fn validate(&self) -> Result<(), Vec<ConfigError>> {
        let mut errs = Vec::new();
        if self.duration_ms <= 0 {
            errs.push(ConfigError::new("duration_ms", "must be positive"));
        }
        if self.operators.is_empty() {
            errs.push(ConfigError::new("operators", "at least one operator is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, o) in self.operators.iter().enumerate() {
            let p = format!("operators[{i}]");
            if let Err(e) = OperatorId::new(o.id.as_str()) {
                errs.push(ConfigError::new(format!("{p}.id"), e.to_string()));
            }
            if !seen.insert(o.id.as_str()) {
                errs.push(ConfigError::new(format!("{p}.id"), format!("duplicate operator id {:?}", o.id)));
            }
            if let Err(e) = o.link.validate() {
                errs.push(ConfigError::new(format!("{p}.link"), e.to_string()));
            }
            let mut keys = BTreeSet::new();
            for (j, t) in o.telemetry.iter().enumerate() {
                let tp = format!("{p}.telemetry[{j}]");
                if !keys.insert(t.key.as_str()) {
                    errs.push(ConfigError::new(format!("{tp}.key"), format!("duplicate telemetry key {:?}", t.key)));
                }
                if let Err(e) = t.generator(0).validate() {
                    errs.push(ConfigError::new(tp.clone(), e.to_string()));
                }
                if t.anomalies > 0 && t.anomaly_warmup + t.anomalies > t.length {
                    errs.push(ConfigError::new(
                        format!("{tp}.anomalies"),
                        "not enough points after the warm-up for the requested anomalies",
                    ));
                }
            }
            for (j, s) in o.scopes.iter().enumerate() {
                if let Err(e) = s.to_scope(&self.operator_index()) {
                    errs.push(ConfigError::new(format!("{p}.scopes[{j}]"), e));
                }
            }
            if let Some(t) = &o.training {
                if t.samples == 0 {
                    errs.push(ConfigError::new(format!("{p}.training.samples"), "must be at least 1"));
                }
                if !(t.learning_rate > 0.0) {
                    errs.push(ConfigError::new(format!("{p}.training.learning_rate"), "must be positive"));
                }
            }
        }

        let ops = self.operator_index();
        let mut names = BTreeSet::new();
        for (i, a) in self.agents.iter().enumerate() {
            let p = format!("agents[{i}]");
            if !names.insert(a.name.as_str()) {
                errs.push(ConfigError::new(format!("{p}.name"), format!("duplicate agent name {:?}", a.name)));
            }
            if a.name.is_empty() || !a.name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_') {
                errs.push(ConfigError::new(format!("{p}.name"), "use letters, digits, '-' and '_' only"));
            }
            if a.hosts.is_empty() {
                errs.push(ConfigError::new(format!("{p}.hosts"), "at least one host is required"));
            }
            for (j, h) in a.hosts.iter().enumerate() {
                match ops.get(h.as_str()) {
                    None => errs.push(ConfigError::new(format!("{p}.hosts[{j}]"), format!("unknown operator {h:?}"))),
                    Some(&oi) => {
                        if let Some(key) = &a.input {
                            if !self.operators[oi].telemetry.iter().any(|t| &t.key == key) {
                                errs.push(ConfigError::new(
                                    format!("{p}.input"),
                                    format!("operator {h:?} generates no telemetry {key:?}"),
                                ));
                            }
                        }
                    }
                }
            }
            if a.run_at_ms < 0 {
                errs.push(ConfigError::new(format!("{p}.run_at_ms"), "must be non-negative"));
            }
            if let Err(e) = params_payload(a.kind, &a.params) {
                errs.push(ConfigError::new(format!("{p}.params"), e));
            }
            if let Some(scopes) = &a.scopes {
                for (j, s) in scopes.iter().enumerate() {
                    if let Err(e) = s.to_scope(&ops) {
                        errs.push(ConfigError::new(format!("{p}.scopes[{j}]"), e));
                    }
                }
            }
            if a.kind.reads_data() {
                let empty_defaults = a.hosts.iter().any(|h| ops.get(h.as_str()).is_some_and(|&oi| self.operators[oi].scopes.is_empty()));
                if a.scopes.as_ref().is_some_and(Vec::is_empty) || (a.scopes.is_none() && a.input.is_none() && empty_defaults) {
                    errs.push(ConfigError::new(format!("{p}.scopes"), "data-reading agents need at least one scope"));
                }
            }
        }

        let agent_by_name: BTreeMap<&str, &AgentConfig> = self.agents.iter().map(|a| (a.name.as_str(), a)).collect();
        let mut edges = Vec::new();
        for (i, w) in self.workflows.iter().enumerate() {
            let p = format!("workflows[{i}]");
            let producer = agent_by_name.get(w.producer.as_str());
            let consumer = agent_by_name.get(w.consumer.as_str());
            if producer.is_none() {
                errs.push(ConfigError::new(format!("{p}.producer"), format!("unknown agent {:?}", w.producer)));
            }
            match consumer {
                None => errs.push(ConfigError::new(format!("{p}.consumer"), format!("unknown agent {:?}", w.consumer))),
                Some(c) => {
                    if let Err(e) = params_payload(c.kind, &w.defaults) {
                        errs.push(ConfigError::new(format!("{p}.defaults"), e));
                    }
                }
            }
            if let (Some(pa), Some(ca)) = (producer, consumer) {
                if !pa.hosts.iter().any(|h| ca.hosts.contains(h)) {
                    errs.push(ConfigError::new(p.clone(), "producer and consumer share no host"));
                }
            }
            if let Some(t) = &w.topic {
                if let Err(e) = TopicPattern::parse(t) {
                    errs.push(ConfigError::new(format!("{p}.topic"), e.to_string()));
                }
            }
            edges.push((AgentId::new(&w.producer, Version::new(1, 0)), AgentId::new(&w.consumer, Version::new(1, 0))));
        }
        if let Some(cycle) = crate::kernel::find_cycle(edges.iter().map(|(a, b)| (a, b))) {
            let names: Vec<&str> = cycle.iter().map(|c| c.name.as_str()).collect();
            errs.push(ConfigError::new("workflows", format!("cycle {}", names.join(" -> "))));
        }

        if let Some(f) = &self.federation {
            let participants = self.participants();
            if f.masking && participants.len() < 2 {
                errs.push(ConfigError::new(
                    "federation.masking",
                    format!("masking requires at least two participants, found {}", participants.len()),
                ));
            }
            if participants.is_empty() && f.rounds > 0 {
                errs.push(ConfigError::new("federation.participants", "no operator has a training section"));
            }
            let mut dedup = BTreeSet::new();
            for (j, name) in participants.iter().enumerate() {
                if !dedup.insert(name) {
                    errs.push(ConfigError::new(format!("federation.participants[{j}]"), format!("duplicate {name:?}")));
                }
                match ops.get(name.as_str()) {
                    None => errs.push(ConfigError::new(
                        format!("federation.participants[{j}]"),
                        format!("unknown operator {name:?}"),
                    )),
                    Some(&oi) if self.operators[oi].training.is_none() => errs.push(ConfigError::new(
                        format!("federation.participants[{j}]"),
                        format!("operator {name:?} has no training section"),
                    )),
                    Some(_) => {}
                }
            }
            if let Err(e) = f.dp.validate() {
                errs.push(ConfigError::new("federation.dp", e.to_string()));
            }
            if f.deadline_ms <= 0 {
                errs.push(ConfigError::new("federation.deadline_ms", "must be positive"));
            }
            if f.lookahead_ms < 0 {
                errs.push(ConfigError::new("federation.lookahead_ms", "must be non-negative"));
            }
            if f.round_interval_ms < 0 || f.start_ms < 0 {
                errs.push(ConfigError::new("federation.start_ms", "start and round interval must be non-negative"));
            }
            if let Err(e) = CongestionSchedule::new(f.congestion.clone()) {
                errs.push(ConfigError::new("federation.congestion", e.to_string()));
            }
            if f.data.eval_samples == 0 {
                errs.push(ConfigError::new("federation.data.eval_samples", "must be at least 1"));
            }
            if !(f.data.x_max > f.data.x_min) {
                errs.push(ConfigError::new("federation.data", "x_max must exceed x_min"));
            }
            for (j, d) in f.dropouts.iter().enumerate() {
                if d.round == 0 || d.round > f.rounds {
                    errs.push(ConfigError::new(format!("federation.dropouts[{j}].round"), "no such round"));
                }
                if !participants.contains(&d.operator) {
                    errs.push(ConfigError::new(
                        format!("federation.dropouts[{j}].operator"),
                        format!("{:?} is not a participant", d.operator),
                    ));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

impl TelemetryConfig {
    fn generator(&self, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            base: self.base,
            trend: self.trend,
            season_amplitude: self.season_amplitude,
            season_period: self.season_period,
            noise_sigma: self.noise_sigma,
            length: self.length,
            seed,
            interval_ms: self.interval_ms,
            start_ms: self.start_ms,
        }
    }
}

impl ScopeConfig {
    fn to_scope(&self, ops: &BTreeMap<&str, usize>) -> Result<DataScope, String> {
        let operator = if self.operator == "self" {
            ScopeOperator::SelfOperator
        } else if ops.contains_key(self.operator.as_str()) {
            ScopeOperator::Operator(OperatorId::new(self.operator.as_str()).map_err(|e| e.to_string())?)
        } else {
            return Err(format!("unknown operator {:?}", self.operator));
        };
        let key = KeyPattern::parse(&self.key).map_err(|e| e.to_string())?;
        Ok(DataScope { operator, kind: self.kind, key })
    }
}

fn json_to_value(ty: SemanticType, v: &serde_json::Value) -> Option<Value> {
    use serde_json::Value as J;
    Some(match (ty, v) {
        (SemanticType::Number, J::Number(n)) => Value::Number(n.as_f64()?),
        (SemanticType::Integer, J::Number(n)) => Value::Integer(n.as_i64()?),
        (SemanticType::Timestamp, J::Number(n)) => Value::Timestamp(n.as_i64()?),
        (SemanticType::String, J::String(s)) => Value::String(s.clone()),
        (SemanticType::Boolean, J::Bool(b)) => Value::Boolean(*b),
        (SemanticType::ListOfNumber, J::Array(xs)) => {
            Value::ListOfNumber(xs.iter().map(|x| x.as_f64()).collect::<Option<Vec<_>>>()?)
        }
        _ => return None,
    })
}

/// Converts configuration parameters into a payload typed by the kind's input schema.
pub fn params_payload(kind: AgentKind, params: &BTreeMap<String, serde_json::Value>) -> Result<Payload, String> {
    let (input, _) = agents::schemas(kind);
    let mut out = Payload::new();
    for (name, v) in params {
        let field = input.field(name).ok_or_else(|| format!("{kind} has no input field {name:?}"))?;
        let value = json_to_value(field.ty, v).ok_or_else(|| format!("field {name:?} expects {:?}", field.ty))?;
        out.insert(name, value);
    }
    Ok(out)
}

/// Parses a TOML table of agent parameters, typed by the kind's input schema.
pub fn parse_params(kind: AgentKind, text: &str) -> Result<Payload, ConfigError> {
    let table: BTreeMap<String, serde_json::Value> = toml::from_str(text).map_err(|e| {
        let path = e.span().map_or("document".to_string(), |s| {
            let (line, col) = line_col(text, s.start);
            format!("line {line}, column {col}")
        });
        ConfigError::new(path, e.message().trim())
    })?;
    params_payload(kind, &table).map_err(|m| ConfigError::new("params", m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub agent: String,
    pub operator: String,
    pub key: String,
    pub injected: usize,
    pub flagged: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub recall: f64,
    pub false_positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentFailure {
    pub agent: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub tool_version: String,
    pub scenario: String,
    pub seed: u64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub initial_model_version: u64,
    pub final_model_version: u64,
    pub final_weights: Vec<f64>,
    pub rounds: Vec<RoundRecord>,
    pub aborted_rounds: u64,
    pub detection: Vec<DetectionMetrics>,
    pub agent_failures: Vec<AgentFailure>,
    pub insights: u64,
    pub sovereignty_violations: u64,
    pub audited_violations: u64,
    pub violations: Vec<Violation>,
    pub ledger_length: u64,
    pub ledger_head: Option<Digest>,
    pub event_count: u64,
    pub trace_digest: Digest,
    pub rounds_required: bool,
    /// SHA-256 of the report's JSON encoding with this field set to `null`.
    pub report_digest: Option<Digest>,
}

impl ScenarioReport {
    pub fn compute_digest(&self) -> Digest {
        let mut copy = self.clone();
        copy.report_digest = None;
        Digest::of(&serde_json::to_vec(&copy).expect("report serializes"))
    }

    pub fn seal(mut self) -> Self {
        self.report_digest = Some(self.compute_digest());
        self
    }

    /// 0 when the run is clean, 3 on any sovereignty violation, 2 when a required round was
    /// aborted.
    pub fn exit_code(&self) -> i32 {
        if self.sovereignty_violations > 0 || self.audited_violations != self.sovereignty_violations {
            3
        } else if self.rounds_required && self.aborted_rounds > 0 {
            2
        } else {
            0
        }
    }

    /// Per-round metrics with a header row.
    pub fn rounds_csv(&self) -> String {
        let mut out = String::from(
            "round,start,deadline,participants,received,masked,aborted,loss_before,loss_after,model_version,model_digest\n",
        );
        for r in &self.rounds {
            let join = |v: &[OperatorId]| v.iter().map(OperatorId::as_str).collect::<Vec<_>>().join(";");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.round_id,
                r.start,
                r.deadline,
                join(&r.participants),
                join(&r.received),
                r.masked,
                r.aborted,
                r.loss_before,
                r.loss_after,
                r.model_version,
                r.model_digest
            ));
        }
        out
    }
}

/// Report plus the exported artifacts of a run.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub ledger: String,
    pub trace: String,
    pub rounds_csv: String,
}

struct Instance {
    config: usize,
    host: OperatorId,
    id: AgentId,
}

fn sample_data(seed: u64, n: usize, d: &DataConfig) -> Vec<(f64, f64)> {
    let mut rng = SeedStream::new(seed);
    (0..n)
        .map(|_| {
            let x = d.x_min + (d.x_max - d.x_min) * rng.uniform();
            let noise = if d.noise_sigma > 0.0 { d.noise_sigma * rng.gaussian() } else { 0.0 };
            (x, d.slope * x + d.intercept + noise)
        })
        .collect()
}

/// Training set of a participant.
pub fn training_data(seed: u64, operator: &str, samples: usize, d: &DataConfig) -> Vec<(f64, f64)> {
    sample_data(derive_seed(seed, &format!("train/{operator}"), 0), samples, d)
}

/// Coordinator-held evaluation set.
pub fn eval_data(seed: u64, d: &DataConfig) -> Vec<(f64, f64)> {
    sample_data(derive_seed(seed, "eval", 0), d.eval_samples, d)
}

/// Runs a validated scenario. `seed` overrides the configured seed.
pub fn run_scenario(cfg: &ScenarioConfig, seed: Option<u64>) -> Result<ScenarioRun, ScenarioError> {
    cfg.validate().map_err(ScenarioError::Invalid)?;
    let seed = seed.unwrap_or(cfg.seed);
    let registry = Arc::new(SchemaRegistry::new());
    for kind in AgentKind::ALL {
        let (i, o) = agents::schemas(kind);
        registry.register(i).map_err(KernelError::from)?;
        registry.register(o).map_err(KernelError::from)?;
    }
    let ingestor = Ingestor::new(Arc::clone(&registry))?;
    let signer = Signer::derive("kernel", seed);
    let publisher = Signer::derive("publisher", seed);
    let mut kernel = Kernel::new(Arc::clone(&registry), signer.clone(), KernelConfig::default());
    let mut sim = SimNet::new();
    let ops = cfg.operator_index();
    let op_ids: Vec<OperatorId> =
        cfg.operators.iter().map(|o| OperatorId::new(o.id.as_str()).expect("validated id")).collect();

    // Telemetry stays inside its operator's partition of the data plane.
    let mut truth: BTreeMap<(String, String), (Vec<i64>, Vec<i64>)> = BTreeMap::new();
    for (oi, o) in cfg.operators.iter().enumerate() {
        for t in &o.telemetry {
            let gen_seed = derive_seed(seed, &format!("telemetry/{}/{}", o.id, t.key), oi as u64);
            let mut window = generate_kpi_series(&t.key, &t.generator(gen_seed))?;
            let mut injected = Vec::new();
            if t.anomalies > 0 {
                let span = t.length - t.anomaly_warmup;
                let rate = (t.anomalies as f64 - 0.5) / span as f64;
                let anomaly_seed = derive_seed(seed, &format!("anomalies/{}/{}", o.id, t.key), oi as u64);
                let (shifted, idx) =
                    inject_anomalies_in(&window, t.anomaly_warmup..t.length, rate, t.anomaly_sigmas, t.noise_sigma, anomaly_seed)?;
                window = shifted;
                injected = idx.into_iter().map(|i| window.points()[i].0).collect();
            }
            for &(ts, v) in window.points() {
                let raw: BTreeMap<String, String> = [
                    ("operator", o.id.clone()),
                    ("kind", "kpi".into()),
                    ("key", t.key.clone()),
                    ("timestamp", ts.to_string()),
                    ("value", format!("{v:?}")),
                ]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
                kernel.ingest_record(ingestor.ingest(&raw, &BTreeMap::new())?)?;
            }
            truth.insert((o.id.clone(), t.key.clone()), (window.timestamps(), injected));
        }
    }

    // One agent instance per (agent, host).
    let mut instances: Vec<Instance> = Vec::new();
    for (ai, a) in cfg.agents.iter().enumerate() {
        let params = params_payload(a.kind, &a.params).expect("validated params");
        for h in &a.hosts {
            let host = op_ids[ops[h.as_str()]].clone();
            let scopes: Vec<DataScope> = match &a.scopes {
                Some(list) => list.iter().map(|s| s.to_scope(&ops).expect("validated scope")).collect(),
                None => {
                    let mut s: Vec<DataScope> = cfg.operators[ops[h.as_str()]]
                        .scopes
                        .iter()
                        .map(|s| s.to_scope(&ops).expect("validated scope"))
                        .collect();
                    if let Some(key) = &a.input {
                        s.push(DataScope { operator: ScopeOperator::SelfOperator, kind: RecordKind::Kpi, key: KeyPattern::Literal(key.clone()) });
                    }
                    s
                }
            };
            let name = format!("{}.{}", a.name, h);
            let descriptor = AgentDescriptor {
                agent_id: name.clone(),
                kind: a.kind,
                version: Version::new(1, 0),
                host: host.clone(),
                input_schema: agents::input_schema_ref(a.kind),
                output_schema: agents::output_schema_ref(a.kind),
                scopes,
                topic: format!("{}/{}", a.name, h),
                publisher_key: KeyId([0; 32]),
                signature: [0; 64],
            }
            .signed_by(&publisher);
            let id = kernel.register_agent(descriptor, reference_agent(a.kind, &params))?;
            instances.push(Instance { config: ai, host, id });
        }
    }

    for w in &cfg.workflows {
        let producer = cfg.agents.iter().find(|a| a.name == w.producer).expect("validated producer");
        let consumer = cfg.agents.iter().find(|a| a.name == w.consumer).expect("validated consumer");
        let defaults = params_payload(consumer.kind, &w.defaults).expect("validated defaults");
        let mut edges = Vec::new();
        for h in producer.hosts.iter().filter(|h| consumer.hosts.contains(h)) {
            let topic = w.topic.clone().unwrap_or_else(|| format!("{}/*", producer.name));
            edges.push(WorkflowEdge {
                producer: AgentId::new(&format!("{}.{h}", producer.name), Version::new(1, 0)),
                topic: TopicPattern::parse(&topic).map_err(KernelError::from)?,
                consumer: AgentId::new(&format!("{}.{h}", consumer.name), Version::new(1, 0)),
                defaults: defaults.clone(),
            });
        }
        kernel.compose_workflow(WorkflowSpec { nodes: vec![], edges })?;
    }

    // Analysis phase: instances run in (time, configuration) order.
    let all = kernel.subscribe("*")?;
    let mut detection = Vec::new();
    let mut failures = Vec::new();
    let mut insights = 0u64;
    let consumers: BTreeSet<&str> = cfg.workflows.iter().map(|w| w.consumer.as_str()).collect();
    let mut order: Vec<usize> = (0..instances.len())
        .filter(|&i| {
            let a = &cfg.agents[instances[i].config];
            a.input.is_some() || !consumers.contains(a.name.as_str())
        })
        .collect();
    order.sort_by_key(|&i| (cfg.agents[instances[i].config].run_at_ms, i));
    for i in order {
        let inst = &instances[i];
        let a = &cfg.agents[inst.config];
        sim.run_until(a.run_at_ms);
        kernel.set_time(sim.now())?;
        let link = &cfg.operators[ops[inst.host.as_str()]].link;
        let params = params_payload(a.kind, &a.params).expect("validated params");
        let mut input = Payload::new();
        if let Some(key) = &a.input {
            let request =
                ReadRequest { operator: inst.host.clone(), kind: RecordKind::Kpi, key: key.clone(), from: 0, to: i64::MAX };
            let window = kernel.mediated_read(&inst.id, request)?;
            let (schema, _) = agents::schemas(a.kind);
            for (name, tagged) in agents::window_payload(&window).iter() {
                if schema.field(name).is_some() {
                    input.insert_tagged(name, tagged.clone());
                }
            }
            if a.export_raw {
                let msg = SimMessage {
                    src: Endpoint::operator(&inst.host),
                    dst: Endpoint::Coordinator,
                    kind: MessageKind::RawTelemetry,
                    size_bytes: 16 * window.len() as u64,
                    digest: window.points().iter().map(|p| p.1).collect::<Vec<_>>().canonical_digest(),
                };
                sim.send(msg, link)?;
            }
        }
        for (name, tagged) in params.iter() {
            input.insert_tagged(name, tagged.clone());
        }
        match kernel.invoke(&inst.id, &input) {
            Ok(insight) => {
                kernel.publish(&insight.topic.clone(), &insight)?;
                if a.kind == AgentKind::AnomalyDetector {
                    if let Some(key) = &a.input {
                        let (stamps, injected) = &truth[&(inst.host.to_string(), key.clone())];
                        let window = insight.payload.integer("window").unwrap_or(0).max(0) as usize;
                        detection.push(detection_metrics(&a.name, &inst.host, key, &insight.payload, stamps, injected, window));
                    }
                }
            }
            Err(e) => failures.push(AgentFailure { agent: inst.id.to_string(), error: e.to_string() }),
        }
        // Insights (including workflow outputs) go to the coordinator.
        for Delivery { insight, .. } in kernel.drain(all)? {
            insights += 1;
            let src = kernel.descriptor(&insight.agent).map(|d| d.host.clone()).unwrap_or_else(|| inst.host.clone());
            let link = &cfg.operators[ops[src.as_str()]].link;
            let msg = SimMessage {
                src: Endpoint::operator(&src),
                dst: Endpoint::Coordinator,
                kind: MessageKind::Insight,
                size_bytes: insight.canonical_bytes().len() as u64,
                digest: insight.canonical_digest(),
            };
            sim.send(msg, link)?;
        }
    }

    // Federated training.
    let mut model = GlobalModel::initial(vec![0.0, 0.0]);
    let initial_version = model.version;
    let mut rounds = Vec::new();
    let mut initial_loss = None;
    let mut final_loss = None;
    if let Some(f) = &cfg.federation {
        let eval = eval_data(seed, &f.data);
        initial_loss = Some(model.loss(&eval)?);
        final_loss = initial_loss;
        let names = cfg.participants();
        let eligible: Vec<OperatorId> = names.iter().map(|n| op_ids[ops[n.as_str()]].clone()).collect();
        let participants: BTreeMap<OperatorId, Participant> = names
            .iter()
            .map(|n| {
                let o = &cfg.operators[ops[n.as_str()]];
                let t = o.training.as_ref().expect("validated training");
                let p = Participant {
                    data: training_data(seed, n, t.samples, &f.data),
                    epochs: t.epochs,
                    learning_rate: t.learning_rate,
                    link: o.link.clone(),
                };
                (op_ids[ops[n.as_str()]].clone(), p)
            })
            .collect();
        let links: BTreeMap<OperatorId, LinkSpec> =
            participants.iter().map(|(k, p)| (k.clone(), p.link.clone())).collect();
        let sched = CongestionSchedule::new(f.congestion.clone())?;
        let round_cfg =
            RoundConfig { dp: f.dp, masking: f.masking, deadline_ms: f.deadline_ms, lookahead_ms: f.lookahead_ms };
        for r in 1..=f.rounds {
            let now = sim.now().max(f.start_ms + (r as i64 - 1) * f.round_interval_ms);
            let dropouts: BTreeSet<OperatorId> = f
                .dropouts
                .iter()
                .filter(|d| d.round == r)
                .map(|d| op_ids[ops[d.operator.as_str()]].clone())
                .collect();
            let planned = plan_round(r, &model, &eligible, &sched, &links, now, &round_cfg)
                .map_err(|e| e.to_string())
                .and_then(|plan| {
                    if plan.start > cfg.duration_ms {
                        Err(format!("round would start at {} after the scenario ends at {}", plan.start, cfg.duration_ms))
                    } else {
                        Ok(plan)
                    }
                });
            let record = match planned {
                Ok(plan) => {
                    let env = RoundEnv { sim: &mut sim, ledger: kernel.ledger_mut(), signer: &signer, seed, dropouts: &dropouts };
                    let outcome = run_round(&plan, &model, &participants, &eval, env)?;
                    model = outcome.model;
                    outcome.record
                }
                Err(reason) => {
                    sim.run_until(now);
                    let loss = model.loss(&eval)?;
                    let mut enc = crate::codec::Encoder::new();
                    enc.u64(r).str(&reason).digest(&model.digest());
                    kernel.ledger_mut().append(enc.as_slice(), EntryType::RoundAbort, &signer, sim.now())?;
                    RoundRecord {
                        round_id: r,
                        base_version: model.version,
                        start: now,
                        deadline: now,
                        participants: vec![],
                        received: vec![],
                        masked: f.masking,
                        aborted: true,
                        abort_reason: Some(reason),
                        model_version: model.version,
                        model_digest: model.digest(),
                        loss_before: loss,
                        loss_after: loss,
                        attribution: BTreeMap::new(),
                        commitments: BTreeMap::new(),
                    }
                }
            };
            final_loss = Some(record.loss_after);
            rounds.push(record);
        }
    }

    // Drain in-flight messages so every non-blocked send is delivered.
    sim.run_to_completion();
    kernel.set_time(sim.now())?;

    let audited = audit_trace(sim.trace());
    let defects = check_trace(sim.trace());
    if !defects.is_empty() {
        return Err(ScenarioError::Trace(format!("{defects:?}")));
    }
    let entries = kernel.ledger().entries();
    let ledger_text = ledger::export(entries).map_err(ledger::LedgerError::from)?;
    let report = ScenarioReport {
        tool_version: TOOL_VERSION.to_string(),
        scenario: cfg.name.clone(),
        seed,
        initial_loss,
        final_loss,
        initial_model_version: initial_version,
        final_model_version: model.version,
        final_weights: model.weights.clone(),
        aborted_rounds: rounds.iter().filter(|r| r.aborted).count() as u64,
        rounds,
        detection,
        agent_failures: failures,
        insights,
        sovereignty_violations: sim.violations().len() as u64,
        audited_violations: audited.len() as u64,
        violations: sim.violations().to_vec(),
        ledger_length: entries.len() as u64,
        ledger_head: entries.last().map(|e| e.entry_hash),
        event_count: sim.trace().len() as u64,
        trace_digest: sim.trace_digest(),
        rounds_required: cfg.reporting.rounds_required,
        report_digest: None,
    }
    .seal();
    let rounds_csv = report.rounds_csv();
    Ok(ScenarioRun { report, ledger: ledger_text, trace: sim.export_trace(), rounds_csv })
}

fn detection_metrics(
    agent: &str,
    host: &OperatorId,
    key: &str,
    payload: &Payload,
    stamps: &[i64],
    injected: &[i64],
    window: usize,
) -> DetectionMetrics {
    let evaluable: BTreeSet<i64> = stamps.iter().skip(window).copied().collect();
    let truth: BTreeSet<i64> = injected.iter().copied().filter(|t| evaluable.contains(t)).collect();
    let flagged: BTreeSet<i64> =
        payload.list("anomaly_timestamps").unwrap_or(&[]).iter().map(|t| *t as i64).collect();
    let tp = flagged.intersection(&truth).count();
    let fp = flagged.len() - tp;
    let negatives = evaluable.len() - truth.len();
    DetectionMetrics {
        agent: agent.to_string(),
        operator: host.to_string(),
        key: key.to_string(),
        injected: truth.len(),
        flagged: flagged.len(),
        true_positives: tp,
        false_positives: fp,
        recall: if truth.is_empty() { 1.0 } else { tp as f64 / truth.len() as f64 },
        false_positive_rate: if negatives == 0 { 0.0 } else { fp as f64 / negatives as f64 },
    }
}
