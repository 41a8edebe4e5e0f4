//! The agent kernel: signed registration, mediated data access, the insight bus,
//! synchronous invocation, workflow composition, health tracking and auditing.
//!
//! Every state change that matters for accountability is appended to the kernel's ledger and
//! mirrored in a structured [`AuditEvent`] trail that keeps the logged bytes replayable.

pub mod bus;
pub mod workflow;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, Digest, Encoder};
use crate::domain::{
    describe_violations, ContractViolation, DomainError, OperatorId, Payload, SchemaRef, SchemaRegistry, Version,
};
use crate::ledger::{verify_signature, EntryType, KeyId, Ledger, LedgerError, Signer};
use crate::telemetry::{KpiWindow, RecordKind, TelemetryError, TelemetryRecord, TelemetryStore, Timestamp};

pub use bus::{BusError, Delivery, InsightBus, SubscriptionId, TopicPattern};
pub use workflow::{find_cycle, WorkflowEdge, WorkflowId, WorkflowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    AnomalyDetector,
    ExperiencePredictor,
    SlaMonitor,
    OptimizationAdvisor,
    CapacityForecaster,
}

impl AgentKind {
    pub const ALL: [AgentKind; 5] = [
        AgentKind::AnomalyDetector,
        AgentKind::ExperiencePredictor,
        AgentKind::SlaMonitor,
        AgentKind::OptimizationAdvisor,
        AgentKind::CapacityForecaster,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::AnomalyDetector => "anomaly-detector",
            AgentKind::ExperiencePredictor => "experience-predictor",
            AgentKind::SlaMonitor => "sla-monitor",
            AgentKind::OptimizationAdvisor => "optimization-advisor",
            AgentKind::CapacityForecaster => "capacity-forecaster",
        }
    }

    /// Kinds that consume operator telemetry and therefore must declare scopes.
    pub fn reads_data(self) -> bool {
        !matches!(self, AgentKind::OptimizationAdvisor)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown agent kind {s:?}"))
    }
}

/// `(name, version)` identity of a registered agent, written `name@major.minor`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AgentId {
    pub name: String,
    pub version: Version,
}

impl AgentId {
    pub fn new(name: &str, version: Version) -> Self {
        Self { name: name.to_string(), version }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.version)
    }
}

impl FromStr for AgentId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.rsplit_once('@') {
            Some((name, v)) if !name.is_empty() => Ok(Self { name: name.to_string(), version: v.parse()? }),
            _ => Err(DomainError::MalformedVersion(s.to_string())),
        }
    }
}

impl TryFrom<String> for AgentId {
    type Error = DomainError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AgentId> for String {
    fn from(id: AgentId) -> Self {
        id.to_string()
    }
}

impl Canonical for AgentId {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.name)
            .u64(u64::from(self.version.major))
            .u64(u64::from(self.version.minor));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeOperator {
    /// The operator hosting the agent.
    #[serde(rename = "self")]
    SelfOperator,
    Operator(OperatorId),
}

/// Metric key pattern: a literal, or a prefix followed by a single trailing `*`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KeyPattern {
    Literal(String),
    Prefix(String),
}

impl KeyPattern {
    pub fn parse(s: &str) -> Result<Self, KernelError> {
        let bad = || KernelError::MalformedScope(s.to_string());
        let (body, prefix) = match s.strip_suffix('*') {
            Some(body) => (body, true),
            None => (s, false),
        };
        if body.contains('*') || (!prefix && body.is_empty()) {
            return Err(bad());
        }
        Ok(if prefix { KeyPattern::Prefix(body.to_string()) } else { KeyPattern::Literal(body.to_string()) })
    }

    pub fn matches(&self, key: &str) -> bool {
        match self {
            KeyPattern::Literal(k) => k == key,
            KeyPattern::Prefix(p) => key.starts_with(p.as_str()),
        }
    }
}

impl fmt::Display for KeyPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyPattern::Literal(k) => f.write_str(k),
            KeyPattern::Prefix(p) => write!(f, "{p}*"),
        }
    }
}

impl TryFrom<String> for KeyPattern {
    type Error = KernelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::parse(&s)
    }
}

impl From<KeyPattern> for String {
    fn from(p: KeyPattern) -> Self {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DataScope {
    pub operator: ScopeOperator,
    pub kind: RecordKind,
    pub key: KeyPattern,
}

impl DataScope {
    pub fn own(kind: RecordKind, key: &str) -> Result<Self, KernelError> {
        Ok(Self { operator: ScopeOperator::SelfOperator, kind, key: KeyPattern::parse(key)? })
    }

    pub fn permits(&self, host: &OperatorId, request: &ReadRequest) -> bool {
        let operator_ok = match &self.operator {
            ScopeOperator::SelfOperator => request.operator == *host,
            ScopeOperator::Operator(op) => request.operator == *op,
        };
        operator_ok && self.kind == request.kind && self.key.matches(&request.key)
    }

    fn encode(&self, enc: &mut Encoder) {
        match &self.operator {
            ScopeOperator::SelfOperator => enc.str("self"),
            ScopeOperator::Operator(op) => enc.str(op.as_str()),
        };
        enc.str(self.kind.as_str()).str(&self.key.to_string());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadRequest {
    pub operator: OperatorId,
    pub kind: RecordKind,
    pub key: String,
    pub from: Timestamp,
    pub to: Timestamp,
}

impl Canonical for ReadRequest {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(self.operator.as_str())
            .str(self.kind.as_str())
            .str(&self.key)
            .i64(self.from)
            .i64(self.to);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("agent {agent} is not authorized to read {} {} {:?}", .request.operator, .request.kind, .request.key)]
pub struct AuthorizationDenied {
    pub agent: AgentId,
    pub request: ReadRequest,
}

/// Registration record of an agent. The signature covers [`AgentDescriptor::signing_bytes`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentDescriptor {
    pub agent_id: String,
    pub kind: AgentKind,
    pub version: Version,
    /// Operator whose infrastructure hosts the agent; `self` scopes resolve to it.
    pub host: OperatorId,
    pub input_schema: SchemaRef,
    pub output_schema: SchemaRef,
    pub scopes: Vec<DataScope>,
    /// Topic the agent's insights are published on.
    pub topic: String,
    pub publisher_key: KeyId,
    pub signature: [u8; 64],
}

impl AgentDescriptor {
    pub fn id(&self) -> AgentId {
        AgentId::new(&self.agent_id, self.version)
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.str(&self.agent_id)
            .str(self.kind.as_str())
            .u64(u64::from(self.version.major))
            .u64(u64::from(self.version.minor))
            .str(self.host.as_str());
        self.input_schema.encode(&mut enc);
        self.output_schema.encode(&mut enc);
        enc.len(self.scopes.len());
        for s in &self.scopes {
            s.encode(&mut enc);
        }
        enc.str(&self.topic).bytes(&self.publisher_key.0);
        enc.finish()
    }

    /// Sets the publisher key to `publisher` and signs the descriptor.
    pub fn signed_by(mut self, publisher: &Signer) -> Self {
        self.publisher_key = publisher.key_id();
        self.signature = publisher.sign(&self.signing_bytes());
        self
    }

    pub fn verify_signature(&self) -> bool {
        verify_signature(&self.publisher_key, &self.signing_bytes(), &self.signature)
    }
}

/// Signed, schema-valid agent output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insight {
    pub agent: AgentId,
    pub timestamp: Timestamp,
    pub topic: String,
    pub payload: Payload,
    pub input_digest: Digest,
    #[serde(with = "key_hex")]
    pub signer: KeyId,
    #[serde(with = "sig_hex")]
    pub signature: [u8; 64],
}

mod key_hex {
    use super::KeyId;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &KeyId, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&k.to_hex())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<KeyId, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(KeyId(out))
    }
}

mod sig_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(sig: &[u8; 64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(sig))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 64], D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 64];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(out)
    }
}

impl Insight {
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.agent.encode(&mut enc);
        enc.i64(self.timestamp).str(&self.topic);
        self.payload.encode(&mut enc);
        enc.digest(&self.input_digest);
        enc.finish()
    }

    pub fn verify(&self) -> bool {
        verify_signature(&self.signer, &self.signing_bytes(), &self.signature)
    }
}

impl Canonical for Insight {
    fn encode(&self, enc: &mut Encoder) {
        let body = self.signing_bytes();
        enc.bytes(&body).bytes(&self.signer.0).bytes(&self.signature);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("agent failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Denied(#[from] AuthorizationDenied),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecutionError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("output violates the declared schema: {}", describe_violations(.0))]
    OutputViolation(Vec<ContractViolation>),
    #[error("agent panicked: {0}")]
    Panicked(String),
}

/// Invocation interface of a hosted agent.
pub trait Agent: Send + Sync {
    fn invoke(&self, ctx: &mut AgentContext<'_>, input: &Payload) -> Result<Payload, AgentError>;

    /// Virtual time charged for one invocation: 1 ms plus 1 ms per started 8 KiB of
    /// canonical input.
    fn virtual_cost_ms(&self, input: &Payload) -> u64 {
        1 + input.canonical_bytes().len() as u64 / 8192
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRecord {
    pub agent: AgentId,
    pub request: ReadRequest,
    pub granted: bool,
    pub returned: usize,
}

#[derive(Debug, Default)]
struct DataPlane {
    stores: BTreeMap<OperatorId, TelemetryStore>,
}

impl DataPlane {
    fn read(
        &self,
        agent: &AgentId,
        host: &OperatorId,
        scopes: &[DataScope],
        request: &ReadRequest,
    ) -> Result<KpiWindow, KernelError> {
        if !scopes.iter().any(|s| s.permits(host, request)) {
            return Err(KernelError::Denied(AuthorizationDenied { agent: agent.clone(), request: request.clone() }));
        }
        match self.stores.get(&request.operator) {
            Some(store) => {
                let points = store
                    .query(request.kind, &request.key, request.from, request.to)?
                    .into_iter()
                    .filter_map(|(t, v)| v.as_number().map(|x| (t, x)))
                    .collect();
                Ok(KpiWindow::new(&request.key, points)?)
            }
            None if request.from > request.to => {
                Err(TelemetryError::InvertedRange { from: request.from, to: request.to }.into())
            }
            None => Ok(KpiWindow::empty(&request.key)),
        }
    }
}

/// Mediated view of the data plane handed to an agent for the duration of one invocation.
pub struct AgentContext<'a> {
    agent: &'a AgentId,
    host: &'a OperatorId,
    scopes: &'a [DataScope],
    data: &'a DataPlane,
    now: Timestamp,
    accesses: Vec<AccessRecord>,
}

impl AgentContext<'_> {
    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn host(&self) -> &OperatorId {
        self.host
    }

    pub fn read(&mut self, request: ReadRequest) -> Result<KpiWindow, AgentError> {
        match self.data.read(self.agent, self.host, self.scopes, &request) {
            Ok(window) => {
                self.accesses.push(AccessRecord {
                    agent: self.agent.clone(),
                    returned: window.len(),
                    request,
                    granted: true,
                });
                Ok(window)
            }
            Err(KernelError::Denied(denied)) => {
                self.accesses.push(AccessRecord { agent: self.agent.clone(), request, granted: false, returned: 0 });
                Err(AgentError::Denied(denied))
            }
            Err(other) => Err(AgentError::Failed(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthStatus {
    Healthy,
    Degraded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReport {
    pub status: HealthStatus,
    pub last_invocation: Option<Timestamp>,
    /// Consecutive execution errors since the last success.
    pub error_count: u32,
    pub total_errors: u64,
    pub invocations: u64,
    pub last_cost_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Consecutive execution errors after which an agent is reported failed.
    pub failure_threshold: u32,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { failure_threshold: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AuditEvent {
    Registered { ledger_index: usize, agent: AgentId },
    Invoked { ledger_index: usize, agent: AgentId, input: Payload },
    InsightIssued { ledger_index: usize, invocation_index: usize, insight: Insight },
    InputRejected { ledger_index: usize, agent: AgentId, violations: Vec<ContractViolation> },
    ExecutionFailed { ledger_index: usize, agent: AgentId, error: ExecutionError },
    Access { ledger_index: Option<usize>, record: AccessRecord },
    PublishRejected { ledger_index: usize, agent: AgentId, topic: String },
}

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("descriptor signature does not verify for agent {0}")]
    InvalidSignature(AgentId),
    #[error("agent {agent} references unknown schema {schema}")]
    UnknownSchema { agent: AgentId, schema: SchemaRef },
    #[error("agent {0} is already registered")]
    DuplicateAgent(AgentId),
    #[error("agent {0} reads data but declares no scopes")]
    MissingScopes(AgentId),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("malformed scope pattern {0:?}")]
    MalformedScope(String),
    #[error("input rejected for agent {agent}: {}", describe_violations(.violations))]
    InputViolation { agent: AgentId, violations: Vec<ContractViolation> },
    #[error("agent {agent} failed: {error}")]
    Execution { agent: AgentId, error: ExecutionError },
    #[error(transparent)]
    Denied(#[from] AuthorizationDenied),
    #[error("publish on {topic} rejected: {}", describe_violations(.violations))]
    PublishViolation { topic: String, violations: Vec<ContractViolation> },
    #[error("insight topic {insight} does not match publish topic {topic}")]
    TopicMismatch { topic: String, insight: String },
    #[error("insight from {0} carries an invalid signature")]
    ForgedInsight(AgentId),
    #[error("workflow references unregistered agent {0}")]
    WorkflowAgent(AgentId),
    #[error("workflow contains a cycle: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join(" -> "))]
    Cycle(Vec<AgentId>),
    #[error("kernel clock cannot move from {now} back to {requested}")]
    ClockRegression { now: Timestamp, requested: Timestamp },
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

struct Registered {
    descriptor: AgentDescriptor,
    handle: Arc<dyn Agent>,
    health: HealthReport,
}

struct RegisteredWorkflow {
    id: WorkflowId,
    spec: WorkflowSpec,
    triggered: u64,
}

pub struct Kernel {
    registry: Arc<SchemaRegistry>,
    signer: Signer,
    config: KernelConfig,
    agents: BTreeMap<AgentId, Registered>,
    data: DataPlane,
    bus: InsightBus,
    workflows: Vec<RegisteredWorkflow>,
    ledger: Ledger,
    audit: Vec<AuditEvent>,
    now: Timestamp,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("agents", &self.agents.keys().collect::<Vec<_>>())
            .field("ledger_len", &self.ledger.len())
            .field("now", &self.now)
            .finish()
    }
}

impl Kernel {
    pub fn new(registry: Arc<SchemaRegistry>, signer: Signer, config: KernelConfig) -> Self {
        Self {
            registry,
            signer,
            config,
            agents: BTreeMap::new(),
            data: DataPlane::default(),
            bus: InsightBus::new(),
            workflows: Vec::new(),
            ledger: Ledger::new(),
            audit: Vec::new(),
            now: 0,
        }
    }

    pub fn registry(&self) -> &Arc<SchemaRegistry> {
        &self.registry
    }

    pub fn signer(&self) -> &Signer {
        &self.signer
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    /// Advances the kernel clock. The clock never moves backward.
    pub fn set_time(&mut self, ts: Timestamp) -> Result<(), KernelError> {
        if ts < self.now {
            return Err(KernelError::ClockRegression { now: self.now, requested: ts });
        }
        self.now = ts;
        Ok(())
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn audit_trail(&self) -> &[AuditEvent] {
        &self.audit
    }

    pub fn descriptor(&self, agent: &AgentId) -> Option<&AgentDescriptor> {
        self.agents.get(agent).map(|r| &r.descriptor)
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentDescriptor> {
        self.agents.values().map(|r| &r.descriptor)
    }

    fn append(&mut self, entry_type: EntryType, payload: &[u8]) -> Result<usize, KernelError> {
        let entry = self.ledger.append(payload, entry_type, &self.signer, self.now)?;
        Ok(entry.index as usize)
    }

    /// Stores a normalized record in its operator's partition of the data plane.
    pub fn ingest_record(&mut self, record: TelemetryRecord) -> Result<(), KernelError> {
        let store = self
            .data
            .stores
            .entry(record.operator.clone())
            .or_insert_with(|| TelemetryStore::new(record.operator.clone()));
        store.insert(record)?;
        Ok(())
    }

    pub fn store(&self, operator: &OperatorId) -> Option<&TelemetryStore> {
        self.data.stores.get(operator)
    }

    pub fn register_agent(&mut self, descriptor: AgentDescriptor, handle: Arc<dyn Agent>) -> Result<AgentId, KernelError> {
        let id = descriptor.id();
        if !descriptor.verify_signature() {
            return Err(KernelError::InvalidSignature(id));
        }
        for schema in [&descriptor.input_schema, &descriptor.output_schema] {
            if !self.registry.contains(schema) {
                return Err(KernelError::UnknownSchema { agent: id, schema: schema.clone() });
            }
        }
        if descriptor.kind.reads_data() && descriptor.scopes.is_empty() {
            return Err(KernelError::MissingScopes(id));
        }
        bus::validate_topic(&descriptor.topic)?;
        if self.agents.contains_key(&id) {
            return Err(KernelError::DuplicateAgent(id));
        }
        let ledger_index = self.append(EntryType::Registration, &descriptor.signing_bytes())?;
        self.audit.push(AuditEvent::Registered { ledger_index, agent: id.clone() });
        let health = HealthReport {
            status: HealthStatus::Healthy,
            last_invocation: None,
            error_count: 0,
            total_errors: 0,
            invocations: 0,
            last_cost_ms: None,
        };
        self.agents.insert(id.clone(), Registered { descriptor, handle, health });
        Ok(id)
    }

    fn registered(&self, agent: &AgentId) -> Result<&Registered, KernelError> {
        self.agents.get(agent).ok_or_else(|| KernelError::UnknownAgent(agent.clone()))
    }

    fn record_access(&mut self, record: AccessRecord) -> Result<(), KernelError> {
        let ledger_index = if record.granted {
            None
        } else {
            let mut enc = Encoder::new();
            record.agent.encode(&mut enc);
            record.request.encode(&mut enc);
            Some(self.append(EntryType::AuthorizationDenied, enc.as_slice())?)
        };
        self.audit.push(AuditEvent::Access { ledger_index, record });
        Ok(())
    }

    /// Reads telemetry on behalf of `agent`. Returns data only if one of the agent's scopes
    /// matches the request; every denial is written to the ledger.
    pub fn mediated_read(&mut self, agent: &AgentId, request: ReadRequest) -> Result<KpiWindow, KernelError> {
        let reg = self.registered(agent)?;
        let outcome = self.data.read(agent, &reg.descriptor.host, &reg.descriptor.scopes, &request);
        match &outcome {
            Ok(window) => self.record_access(AccessRecord {
                agent: agent.clone(),
                request,
                granted: true,
                returned: window.len(),
            })?,
            Err(KernelError::Denied(_)) => {
                self.record_access(AccessRecord { agent: agent.clone(), request, granted: false, returned: 0 })?
            }
            Err(_) => {}
        }
        outcome
    }

    /// Validates `input`, runs the agent, validates and signs its output.
    ///
    /// Agent errors and panics are converted into audited [`ExecutionError`]s.
    pub fn invoke(&mut self, agent: &AgentId, input: &Payload) -> Result<Insight, KernelError> {
        let reg = self.registered(agent)?;
        let descriptor = reg.descriptor.clone();
        let handle = Arc::clone(&reg.handle);

        if let Err(violations) = self.registry.validate_payload(&descriptor.input_schema, input)? {
            let mut enc = Encoder::new();
            agent.encode(&mut enc);
            input.encode(&mut enc);
            let ledger_index = self.append(EntryType::Violation, enc.as_slice())?;
            self.audit.push(AuditEvent::InputRejected {
                ledger_index,
                agent: agent.clone(),
                violations: violations.clone(),
            });
            return Err(KernelError::InputViolation { agent: agent.clone(), violations });
        }

        let input_bytes = input.canonical_bytes();
        let invocation_index = self.append(EntryType::Invocation, &input_bytes)?;
        self.audit.push(AuditEvent::Invoked { ledger_index: invocation_index, agent: agent.clone(), input: input.clone() });

        let mut ctx = AgentContext {
            agent,
            host: &descriptor.host,
            scopes: &descriptor.scopes,
            data: &self.data,
            now: self.now,
            accesses: Vec::new(),
        };
        let outcome = catch_unwind(AssertUnwindSafe(|| handle.invoke(&mut ctx, input)));
        let accesses = std::mem::take(&mut ctx.accesses);
        let cost = handle.virtual_cost_ms(input);
        for access in accesses {
            self.record_access(access)?;
        }

        let result = match outcome {
            Ok(Ok(output)) => match self.registry.validate_payload(&descriptor.output_schema, &output)? {
                Ok(()) => Ok(output),
                Err(v) => Err(ExecutionError::OutputViolation(v)),
            },
            Ok(Err(e)) => Err(ExecutionError::Agent(e)),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "non-string panic payload".into());
                Err(ExecutionError::Panicked(msg))
            }
        };

        let now = self.now;
        let threshold = self.config.failure_threshold;
        let health = &mut self.agents.get_mut(agent).expect("registered agent").health;
        health.last_invocation = Some(now);
        health.invocations += 1;
        health.last_cost_ms = Some(cost);
        match &result {
            Ok(_) => {
                health.error_count = 0;
                health.status = HealthStatus::Healthy;
            }
            Err(_) => {
                health.error_count += 1;
                health.total_errors += 1;
                health.status =
                    if health.error_count >= threshold { HealthStatus::Failed } else { HealthStatus::Degraded };
            }
        }

        match result {
            Ok(payload) => {
                let mut insight = Insight {
                    agent: agent.clone(),
                    timestamp: now,
                    topic: descriptor.topic.clone(),
                    payload,
                    input_digest: Digest::of(&input_bytes),
                    signer: self.signer.key_id(),
                    signature: [0; 64],
                };
                insight.signature = self.signer.sign(&insight.signing_bytes());
                let ledger_index = self.append(EntryType::Insight, &insight.canonical_bytes())?;
                self.audit.push(AuditEvent::InsightIssued { ledger_index, invocation_index, insight: insight.clone() });
                Ok(insight)
            }
            Err(error) => {
                let mut enc = Encoder::new();
                agent.encode(&mut enc);
                enc.str(&error.to_string());
                let ledger_index = self.append(EntryType::Violation, enc.as_slice())?;
                self.audit.push(AuditEvent::ExecutionFailed { ledger_index, agent: agent.clone(), error: error.clone() });
                Err(KernelError::Execution { agent: agent.clone(), error })
            }
        }
    }

    pub fn subscribe(&mut self, pattern: &str) -> Result<SubscriptionId, KernelError> {
        Ok(self.bus.subscribe(pattern)?)
    }

    pub fn unsubscribe(&mut self, id: SubscriptionId) -> Result<(), KernelError> {
        Ok(self.bus.unsubscribe(id)?)
    }

    pub fn drain(&mut self, id: SubscriptionId) -> Result<Vec<Delivery>, KernelError> {
        Ok(self.bus.drain(id)?)
    }

    fn publish_one(&mut self, topic: &str, insight: &Insight) -> Result<u64, KernelError> {
        if insight.topic != topic {
            return Err(KernelError::TopicMismatch { topic: topic.to_string(), insight: insight.topic.clone() });
        }
        let reg = self.registered(&insight.agent)?;
        if !insight.verify() || insight.signer != self.signer.key_id() {
            return Err(KernelError::ForgedInsight(insight.agent.clone()));
        }
        if let Err(violations) = self.registry.validate_payload(&reg.descriptor.output_schema, &insight.payload)? {
            let mut enc = Encoder::new();
            insight.agent.encode(&mut enc);
            enc.str(topic);
            insight.payload.encode(&mut enc);
            let ledger_index = self.append(EntryType::Violation, enc.as_slice())?;
            self.audit.push(AuditEvent::PublishRejected {
                ledger_index,
                agent: insight.agent.clone(),
                topic: topic.to_string(),
            });
            return Err(KernelError::PublishViolation { topic: topic.to_string(), violations });
        }
        Ok(self.bus.publish(topic, insight)?)
    }

    /// Publishes an insight, then runs every workflow edge it triggers. Each edge fires at
    /// most once per external publish, so a stimulus causes at most as many invocations as
    /// there are edges. Failures of triggered consumers are audited, not returned.
    pub fn publish(&mut self, topic: &str, insight: &Insight) -> Result<u64, KernelError> {
        let sequence = self.publish_one(topic, insight)?;
        let mut fired: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut queue: VecDeque<Insight> = VecDeque::from([insight.clone()]);
        while let Some(current) = queue.pop_front() {
            let mut triggers = Vec::new();
            for (wi, wf) in self.workflows.iter().enumerate() {
                for (ei, edge) in wf.spec.edges.iter().enumerate() {
                    if edge.producer == current.agent && edge.topic.matches(&current.topic) && fired.insert((wi, ei)) {
                        triggers.push((wi, edge.clone()));
                    }
                }
            }
            for (wi, edge) in triggers {
                self.workflows[wi].triggered += 1;
                let Ok(input) = self.map_input(&edge, &current.payload) else { continue };
                if let Ok(out) = self.invoke(&edge.consumer, &input) {
                    let consumer_topic = out.topic.clone();
                    if self.publish_one(&consumer_topic, &out).is_ok() {
                        queue.push_back(out);
                    }
                }
            }
        }
        Ok(sequence)
    }

    fn map_input(&self, edge: &WorkflowEdge, produced: &Payload) -> Result<Payload, KernelError> {
        let consumer = self.registered(&edge.consumer)?;
        let schema = self.registry.get(&consumer.descriptor.input_schema)?;
        let mut input = Payload::new();
        for (name, tagged) in produced.iter() {
            if schema.field(name).is_some() {
                input.insert_tagged(name, tagged.clone());
            }
        }
        for (name, tagged) in edge.defaults.iter() {
            input.insert_tagged(name, tagged.clone());
        }
        Ok(input)
    }

    /// Registers a workflow after checking that its agents exist and that its edges, together
    /// with every existing workflow, form a DAG.
    pub fn compose_workflow(&mut self, spec: WorkflowSpec) -> Result<WorkflowId, KernelError> {
        for id in spec.nodes.iter().chain(spec.edges.iter().flat_map(|e| [&e.producer, &e.consumer])) {
            if !self.agents.contains_key(id) {
                return Err(KernelError::WorkflowAgent(id.clone()));
            }
        }
        let existing = self.workflows.iter().flat_map(|w| w.spec.edges.iter());
        let all_edges = spec.edges.iter().chain(existing).map(|e| (&e.producer, &e.consumer));
        if let Some(cycle) = find_cycle(all_edges) {
            return Err(KernelError::Cycle(cycle));
        }
        let id = WorkflowId(self.workflows.len() as u64 + 1);
        self.workflows.push(RegisteredWorkflow { id, spec, triggered: 0 });
        Ok(id)
    }

    /// Number of consumer invocations a workflow has triggered so far.
    pub fn workflow_triggered(&self, id: WorkflowId) -> Option<u64> {
        self.workflows.iter().find(|w| w.id == id).map(|w| w.triggered)
    }

    pub fn health_check(&self, agent: &AgentId) -> Result<HealthReport, KernelError> {
        Ok(self.registered(agent)?.health.clone())
    }
}
