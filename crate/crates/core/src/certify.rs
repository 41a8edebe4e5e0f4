//! Agent certification suite.
//!
//! A candidate agent is registered in a fresh kernel and put through five tests: contract
//! conformance on canned inputs, determinism across two kernels, scope compliance under an
//! attempted out-of-scope read, a per-kind behavioral benchmark, and a virtual latency budget.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    self, anomaly_payload, applicable_actions, apply_action, reference_agent, utility, window_payload, Anomaly,
    AnomalyReport, CellState,
};
use crate::codec::{Canonical, Digest};
use crate::domain::{OperatorId, Payload, SchemaRegistry, Value, Version};
use crate::kernel::{
    Agent, AgentContext, AgentDescriptor, AgentError, AgentId, AgentKind, AuditEvent, DataScope, ExecutionError,
    KernelConfig, KernelError, Kernel, KeyPattern, ReadRequest, ScopeOperator,
};
use crate::ledger::{KeyId, Signer};
use crate::rng::{derive_seed, SeedStream};
use crate::telemetry::{
    generate_kpi_series, inject_anomalies_in, GeneratorSpec, Ingestor, KpiWindow, RecordKind,
};

pub const HOST: &str = "cert-host";
pub const FOREIGN: &str = "cert-foreign";

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("unknown agent kind {0:?}")]
    UnknownKind(String),
    #[error("agent cannot be registered: {0}")]
    Unregistrable(#[source] KernelError),
    #[error("fixture setup failed: {0}")]
    Fixture(String),
}

/// Agents accepted by the suite: the reference kinds plus two deliberately faulty ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateKind {
    Reference(AgentKind),
    /// Detector that flags every point.
    AlwaysFlagDetector,
    /// Detector whose output omits the required `anomaly_count` field.
    SchemaViolatingEmitter,
}

impl CandidateKind {
    pub const ADVERSARIAL: [CandidateKind; 2] = [CandidateKind::AlwaysFlagDetector, CandidateKind::SchemaViolatingEmitter];

    pub fn agent_kind(self) -> AgentKind {
        match self {
            CandidateKind::Reference(k) => k,
            _ => AgentKind::AnomalyDetector,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            CandidateKind::Reference(k) => k.as_str(),
            CandidateKind::AlwaysFlagDetector => "always-flag-detector",
            CandidateKind::SchemaViolatingEmitter => "schema-violating-emitter",
        }
    }

    pub fn all() -> Vec<CandidateKind> {
        AgentKind::ALL.iter().map(|k| CandidateKind::Reference(*k)).chain(Self::ADVERSARIAL).collect()
    }
}

impl fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for CandidateKind {
    type Err = CertifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::all().into_iter().find(|k| k.token() == s).ok_or_else(|| CertifyError::UnknownKind(s.to_string()))
    }
}

/// Builds the agent under test, configured from input-schema fields in `params`.
pub fn candidate_agent(kind: CandidateKind, params: &Payload) -> Arc<dyn Agent> {
    match kind {
        CandidateKind::Reference(k) => reference_agent(k, params),
        CandidateKind::AlwaysFlagDetector => Arc::new(AlwaysFlagDetector),
        CandidateKind::SchemaViolatingEmitter => {
            Arc::new(SchemaViolatingEmitter { inner: reference_agent(AgentKind::AnomalyDetector, params) })
        }
    }
}

fn input_window(input: &Payload) -> Result<KpiWindow, AgentError> {
    let ts = input.list("timestamps").ok_or_else(|| AgentError::InvalidInput("timestamps missing".into()))?;
    let vs = input.list("values").ok_or_else(|| AgentError::InvalidInput("values missing".into()))?;
    let points = ts.iter().zip(vs).map(|(t, v)| (*t as i64, *v)).collect();
    KpiWindow::new("input", points).map_err(|e| AgentError::InvalidInput(e.to_string()))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysFlagDetector;

impl Agent for AlwaysFlagDetector {
    fn invoke(&self, _ctx: &mut AgentContext<'_>, input: &Payload) -> Result<Payload, AgentError> {
        let window = input_window(input)?;
        let anomalies = window
            .points()
            .iter()
            .enumerate()
            .map(|(index, &(timestamp, value))| Anomaly { index, timestamp, value, score: 0.0 })
            .collect();
        Ok(anomaly_payload(&AnomalyReport { anomalies, window: 0, threshold: 0.0 }, &window))
    }
}

pub struct SchemaViolatingEmitter {
    inner: Arc<dyn Agent>,
}

impl Agent for SchemaViolatingEmitter {
    fn invoke(&self, ctx: &mut AgentContext<'_>, input: &Payload) -> Result<Payload, AgentError> {
        let mut out = self.inner.invoke(ctx, input)?;
        out.remove("anomaly_count");
        Ok(out)
    }
}

/// Attempts a read of another operator's data before delegating.
struct ScopeProbe {
    inner: Arc<dyn Agent>,
}

impl Agent for ScopeProbe {
    fn invoke(&self, ctx: &mut AgentContext<'_>, input: &Payload) -> Result<Payload, AgentError> {
        let request = ReadRequest {
            operator: OperatorId::new(FOREIGN).expect("valid id"),
            kind: RecordKind::Kpi,
            key: "kpi.secret".into(),
            from: 0,
            to: i64::MAX,
        };
        if let Ok(window) = ctx.read(request) {
            return Err(AgentError::Failed(format!("read {} foreign points", window.len())));
        }
        self.inner.invoke(ctx, input)
    }

    fn virtual_cost_ms(&self, input: &Payload) -> u64 {
        self.inner.virtual_cost_ms(input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertTest {
    ContractConformance,
    Determinism,
    ScopeCompliance,
    BehavioralBenchmark,
    LatencyBudget,
}

impl CertTest {
    pub const ALL: [CertTest; 5] = [
        CertTest::ContractConformance,
        CertTest::Determinism,
        CertTest::ScopeCompliance,
        CertTest::BehavioralBenchmark,
        CertTest::LatencyBudget,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub test: CertTest,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub agent: AgentId,
    pub candidate: CandidateKind,
    pub kind: AgentKind,
    pub seed: u64,
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
}

impl CertificationReport {
    pub fn verdict(&self, test: CertTest) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.test == test)
    }

    pub fn is_consistent(&self) -> bool {
        self.passed == self.verdicts.iter().all(|v| v.passed)
            && CertTest::ALL.iter().all(|t| self.verdicts.iter().filter(|v| v.test == *t).count() == 1)
    }

    /// 0 when certified, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            3
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Maximum virtual cost of a single invocation.
    pub latency_budget_ms: u64,
    pub anomaly_series: usize,
    pub anomaly_min_recall: f64,
    pub anomaly_max_fpr: f64,
    pub forecast_series: usize,
    /// Bound on mean absolute error over the held-out horizon.
    pub forecast_mae_bound: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            latency_budget_ms: 5,
            anomaly_series: 20,
            anomaly_min_recall: 0.9,
            anomaly_max_fpr: 0.02,
            forecast_series: 10,
            forecast_mae_bound: 1.0,
        }
    }
}

pub const BENCHMARK_LENGTH: usize = 200;
pub const BENCHMARK_WARMUP: usize = 20;
pub const BENCHMARK_ANOMALIES: usize = 3;

/// Seeded anomaly benchmark: flat series with unit gaussian noise and three upward 8σ shifts
/// placed after the warm-up. Returns each series with its injected indices.
pub fn anomaly_benchmark(seed: u64, series: usize) -> Vec<(KpiWindow, Vec<usize>)> {
    (0..series)
        .map(|i| {
            let mut spec = GeneratorSpec::new(50.0, BENCHMARK_LENGTH, derive_seed(seed, "bench/series", i as u64));
            spec.noise_sigma = 1.0;
            let clean = generate_kpi_series("bench", &spec).expect("valid spec");
            let span = BENCHMARK_LENGTH - BENCHMARK_WARMUP;
            let rate = (BENCHMARK_ANOMALIES as f64 - 0.5) / span as f64;
            inject_anomalies_in(
                &clean,
                BENCHMARK_WARMUP..BENCHMARK_LENGTH,
                rate,
                8.0,
                1.0,
                derive_seed(seed, "bench/anomalies", i as u64),
            )
            .expect("valid injection")
        })
        .collect()
}

/// Pooled detection counts over points at or after the warm-up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub positives: usize,
    pub negatives: usize,
}

impl DetectionCounts {
    pub fn add(&mut self, len: usize, warmup: usize, injected: &[usize], flagged: &[usize]) {
        let truth: BTreeSet<usize> = injected.iter().copied().filter(|i| *i >= warmup).collect();
        let flagged: BTreeSet<usize> = flagged.iter().copied().filter(|i| *i >= warmup && *i < len).collect();
        let tp = flagged.intersection(&truth).count();
        self.true_positives += tp;
        self.false_positives += flagged.len() - tp;
        self.positives += truth.len();
        self.negatives += len.saturating_sub(warmup) - truth.len();
    }

    pub fn recall(&self) -> f64 {
        if self.positives == 0 {
            1.0
        } else {
            self.true_positives as f64 / self.positives as f64
        }
    }

    pub fn false_positive_rate(&self) -> f64 {
        if self.negatives == 0 {
            0.0
        } else {
            self.false_positives as f64 / self.negatives as f64
        }
    }
}

/// Canned, schema-valid inputs for `kind`.
pub fn canned_inputs(kind: AgentKind, seed: u64) -> Vec<Payload> {
    let affine = |base: f64, slope: f64, n: usize| {
        let mut spec = GeneratorSpec::new(base, n, 0);
        spec.trend = slope;
        window_payload(&generate_kpi_series("canned", &spec).expect("valid spec"))
    };
    let noisy = |i: u64, n: usize| {
        let mut spec = GeneratorSpec::new(40.0, n, derive_seed(seed, "canned", i));
        spec.noise_sigma = 1.0;
        spec.season_amplitude = 2.0;
        spec.season_period = 24;
        window_payload(&generate_kpi_series("canned", &spec).expect("valid spec"))
    };
    match kind {
        AgentKind::AnomalyDetector => vec![
            noisy(0, 60),
            noisy(1, 120).with("window", Value::Integer(10)),
            noisy(2, 80).with("threshold", Value::Number(5.0)),
            affine(10.0, 0.5, 40),
        ],
        AgentKind::ExperiencePredictor => [(20.0, 0.0, 100.0, 80.0), (120.0, 0.01, 40.0, 80.0), (600.0, 0.2, 1.0, 50.0)]
            .iter()
            .map(|&(l, p, t, d)| {
                Payload::new()
                    .with("latency_ms", Value::Number(l))
                    .with("loss_ratio", Value::Number(p))
                    .with("throughput_mbps", Value::Number(t))
                    .with("demand_mbps", Value::Number(d))
            })
            .collect(),
        AgentKind::SlaMonitor => vec![
            affine(50.0, 1.0, 40).with("threshold", Value::Number(95.0)),
            noisy(3, 60).with("threshold", Value::Number(60.0)),
            affine(50.0, 0.0, 30),
        ],
        AgentKind::OptimizationAdvisor => vec![
            cells_payload(&[0.5, 0.95, 0.05], &[1.0, 1.0, 2.0]),
            cells_payload(&[0.3, 0.3], &[0.5, 0.5]),
            cells_payload(&[0.9, 0.85, 0.2, 0.02], &[1.0, 1.5, 1.0, 3.0]),
        ],
        AgentKind::CapacityForecaster => vec![
            affine(100.0, 2.0, 30),
            noisy(4, 48).with("horizon", Value::Integer(6)),
            affine(5.0, -0.1, 10).with("alpha", Value::Number(1.0)).with("beta", Value::Number(1.0)),
        ],
    }
}

fn cells_payload(loads: &[f64], energy: &[f64]) -> Payload {
    Payload::new()
        .with("loads", Value::ListOfNumber(loads.to_vec()))
        .with("energy", Value::ListOfNumber(energy.to_vec()))
}

struct Harness {
    kernel: Kernel,
    agent: AgentId,
}

fn agent_id(kind: CandidateKind) -> AgentId {
    AgentId::new(&format!("candidate-{}", kind.token()), Version::new(1, 0))
}

fn harness(kind: CandidateKind, agent: Arc<dyn Agent>, seed: u64) -> Result<Harness, CertifyError> {
    let registry = Arc::new(SchemaRegistry::new());
    for k in AgentKind::ALL {
        let (i, o) = agents::schemas(k);
        registry.register(i).map_err(|e| CertifyError::Fixture(e.to_string()))?;
        registry.register(o).map_err(|e| CertifyError::Fixture(e.to_string()))?;
    }
    let mut kernel = Kernel::new(registry, Signer::derive("cert-kernel", seed), KernelConfig::default());
    let host = OperatorId::new(HOST).expect("valid id");
    let ingestor = Ingestor::new(Arc::clone(kernel.registry())).map_err(|e| CertifyError::Fixture(e.to_string()))?;
    for (op, key) in [(HOST, "kpi.own"), (FOREIGN, "kpi.secret")] {
        for t in 0..10 {
            let raw: BTreeMap<String, String> = [
                ("operator", op.to_string()),
                ("kind", "kpi".into()),
                ("key", key.to_string()),
                ("timestamp", (t * 1000).to_string()),
                ("value", t.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
            let record = ingestor.ingest(&raw, &BTreeMap::new()).map_err(|e| CertifyError::Fixture(e.to_string()))?;
            kernel.ingest_record(record).map_err(|e| CertifyError::Fixture(e.to_string()))?;
        }
    }
    let akind = kind.agent_kind();
    let id = agent_id(kind);
    let descriptor = AgentDescriptor {
        agent_id: id.name.clone(),
        kind: akind,
        version: id.version,
        host,
        input_schema: agents::input_schema_ref(akind),
        output_schema: agents::output_schema_ref(akind),
        scopes: vec![DataScope { operator: ScopeOperator::SelfOperator, kind: RecordKind::Kpi, key: KeyPattern::parse("kpi.*").expect("valid pattern") }],
        topic: format!("cert/{}", kind.token()),
        publisher_key: KeyId([0; 32]),
        signature: [0; 64],
    }
    .signed_by(&Signer::derive("cert-publisher", seed));
    let agent = kernel.register_agent(descriptor, agent).map_err(CertifyError::Unregistrable)?;
    Ok(Harness { kernel, agent })
}

impl Harness {
    fn run(&mut self, input: &Payload) -> (Result<Payload, KernelError>, u64) {
        let out = self.kernel.invoke(&self.agent, input).map(|i| i.payload);
        let cost = self.kernel.health_check(&self.agent).ok().and_then(|h| h.last_cost_ms).unwrap_or(0);
        (out, cost)
    }
}

fn outcome_digest(r: &Result<Payload, KernelError>) -> Digest {
    match r {
        Ok(p) => p.canonical_digest(),
        Err(e) => Digest::of(format!("error: {e}").as_bytes()),
    }
}

fn verdict(test: CertTest, passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { test, passed, detail: detail.into() }
}

/// Runs the five-test suite on a candidate built from `kind` and `params`.
pub fn certify(kind: CandidateKind, params: &Payload, suite: &SuiteConfig) -> Result<CertificationReport, CertifyError> {
    let build = || candidate_agent(kind, params);
    let mut h = harness(kind, build(), suite.seed)?;
    let inputs = canned_inputs(kind.agent_kind(), suite.seed);
    let mut max_cost = 0u64;
    let mut verdicts = Vec::new();

    // Contract conformance.
    let mut failures = Vec::new();
    let mut outcomes = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let (r, cost) = h.run(input);
        max_cost = max_cost.max(cost);
        if let Err(e) = &r {
            failures.push(format!("input {i}: {e}"));
        }
        outcomes.push(outcome_digest(&r));
    }
    let malformed = h.kernel.invoke(&h.agent, &Payload::new().with("unexpected", Value::Boolean(true)));
    let rejected = matches!(malformed, Err(KernelError::InputViolation { .. }));
    if !rejected {
        failures.push("malformed input was not rejected by its schema".into());
    }
    verdicts.push(verdict(
        CertTest::ContractConformance,
        failures.is_empty(),
        if failures.is_empty() { format!("{} canned inputs conform", inputs.len()) } else { failures.join("; ") },
    ));

    // Determinism: a second kernel sees the same inputs.
    let mut h2 = harness(kind, build(), suite.seed)?;
    let second: Vec<Digest> = inputs.iter().map(|input| outcome_digest(&h2.run(input).0)).collect();
    let differing: Vec<usize> = (0..inputs.len()).filter(|i| outcomes[*i] != second[*i]).collect();
    verdicts.push(verdict(
        CertTest::Determinism,
        differing.is_empty(),
        if differing.is_empty() { "outputs identical across runs".to_string() } else { format!("inputs {differing:?} differ") },
    ));

    // Scope compliance.
    verdicts.push(scope_test(kind, build(), &inputs, suite.seed)?);

    // Behavioral benchmark.
    let (passed, detail) = behavioral(kind.agent_kind(), &mut h, suite, &mut max_cost);
    verdicts.push(verdict(CertTest::BehavioralBenchmark, passed, detail));

    verdicts.push(verdict(
        CertTest::LatencyBudget,
        max_cost <= suite.latency_budget_ms,
        format!("max virtual cost {max_cost} ms, budget {} ms", suite.latency_budget_ms),
    ));

    let passed = verdicts.iter().all(|v| v.passed);
    Ok(CertificationReport { agent: h.agent, candidate: kind, kind: kind.agent_kind(), seed: suite.seed, verdicts, passed })
}

fn scope_test(kind: CandidateKind, inner: Arc<dyn Agent>, inputs: &[Payload], seed: u64) -> Result<Verdict, CertifyError> {
    let mut h = harness(kind, Arc::new(ScopeProbe { inner }), seed)?;
    let foreign = ReadRequest {
        operator: OperatorId::new(FOREIGN).expect("valid id"),
        kind: RecordKind::Kpi,
        key: "kpi.secret".into(),
        from: 0,
        to: i64::MAX,
    };
    let direct_denied = matches!(h.kernel.mediated_read(&h.agent, foreign), Err(KernelError::Denied(_)));
    let mut problems = Vec::new();
    if !direct_denied {
        problems.push("mediated read of foreign data was not denied".to_string());
    }
    for (i, input) in inputs.iter().enumerate() {
        match h.kernel.invoke(&h.agent, input) {
            Ok(_) => {}
            Err(KernelError::Execution { error: ExecutionError::Panicked(msg), .. }) => {
                problems.push(format!("input {i}: agent panicked: {msg}"))
            }
            Err(KernelError::Execution { error: ExecutionError::Agent(AgentError::Failed(msg)), .. })
                if msg.contains("foreign points") =>
            {
                problems.push(format!("input {i}: {msg}"))
            }
            Err(KernelError::Execution { .. }) => {}
            Err(e) => problems.push(format!("input {i}: kernel error {e}")),
        }
    }
    let denials = h
        .kernel
        .audit_trail()
        .iter()
        .filter(|e| matches!(e, AuditEvent::Access { record, .. } if !record.granted))
        .count();
    if denials != inputs.len() + 1 {
        problems.push(format!("expected {} audited denials, found {denials}", inputs.len() + 1));
    }
    if crate::ledger::verify_chain(h.kernel.ledger().entries()).is_err() {
        problems.push("ledger no longer verifies".into());
    }
    Ok(verdict(
        CertTest::ScopeCompliance,
        problems.is_empty(),
        if problems.is_empty() { format!("{denials} out-of-scope reads denied and audited") } else { problems.join("; ") },
    ))
}

fn behavioral(kind: AgentKind, h: &mut Harness, suite: &SuiteConfig, max_cost: &mut u64) -> (bool, String) {
    let mut run = |input: &Payload| {
        let (r, cost) = h.run(input);
        *max_cost = (*max_cost).max(cost);
        r
    };
    match kind {
        AgentKind::AnomalyDetector => {
            let mut counts = DetectionCounts::default();
            for (series, injected) in anomaly_benchmark(suite.seed, suite.anomaly_series) {
                let input = window_payload(&series)
                    .with("window", Value::Integer(BENCHMARK_WARMUP as i64))
                    .with("threshold", Value::Number(3.5));
                let out = match run(&input) {
                    Ok(p) => p,
                    Err(e) => return (false, format!("benchmark invocation failed: {e}")),
                };
                let stamps = series.timestamps();
                let flagged: Vec<usize> = out
                    .list("anomaly_timestamps")
                    .unwrap_or(&[])
                    .iter()
                    .filter_map(|t| stamps.iter().position(|s| *s as f64 == *t))
                    .collect();
                counts.add(series.len(), BENCHMARK_WARMUP, &injected, &flagged);
            }
            let (recall, fpr) = (counts.recall(), counts.false_positive_rate());
            (
                recall >= suite.anomaly_min_recall && fpr <= suite.anomaly_max_fpr,
                format!(
                    "recall {recall:.4} (min {}), false-positive rate {fpr:.4} (max {})",
                    suite.anomaly_min_recall, suite.anomaly_max_fpr
                ),
            )
        }
        AgentKind::CapacityForecaster => {
            let horizon = 10;
            let mut total = 0.0;
            let mut count = 0usize;
            for i in 0..suite.forecast_series {
                let mut rng = SeedStream::new(derive_seed(suite.seed, "bench/forecast", i as u64));
                let mut spec = GeneratorSpec::new(20.0 + 80.0 * rng.uniform(), 60 + horizon, rng.next_u64());
                spec.trend = 2.0 * rng.uniform() - 1.0;
                spec.noise_sigma = 0.2;
                let full = generate_kpi_series("bench", &spec).expect("valid spec");
                let (train, held) = full.points().split_at(60);
                let train = KpiWindow::new("bench", train.to_vec()).expect("ordered");
                let input = window_payload(&train).with("horizon", Value::Integer(horizon as i64));
                let out = match run(&input) {
                    Ok(p) => p,
                    Err(e) => return (false, format!("forecast failed: {e}")),
                };
                let forecast = out.list("forecast").unwrap_or(&[]);
                if forecast.len() != horizon {
                    return (false, format!("forecast has {} steps, expected {horizon}", forecast.len()));
                }
                for (f, (_, actual)) in forecast.iter().zip(held) {
                    total += (f - actual).abs();
                    count += 1;
                }
            }
            let mae = total / count.max(1) as f64;
            (mae <= suite.forecast_mae_bound, format!("mean absolute error {mae:.4} (bound {})", suite.forecast_mae_bound))
        }
        AgentKind::SlaMonitor => {
            // Exact affine series: the breach step follows from the line itself.
            let mut problems = Vec::new();
            for (base, slope, threshold) in [(50.0, 1.0, 95.0), (50.0, 0.0, 60.0), (10.0, 2.0, 100.0), (30.0, 0.5, 60.0)] {
                let last: f64 = base + slope * 39.0;
                let expect_step = (slope > 0.0)
                    .then(|| ((threshold - last) / slope).ceil() as usize)
                    .filter(|h| (1..=10).contains(h));
                let mut spec = GeneratorSpec::new(base, 40, 0);
                spec.trend = slope;
                let series = generate_kpi_series("bench", &spec).expect("valid spec");
                let input = window_payload(&series)
                    .with("threshold", Value::Number(threshold))
                    .with("horizon", Value::Integer(10));
                match run(&input) {
                    Ok(out) => {
                        let step = out.integer("breach_step").map(|s| s as usize);
                        if step != expect_step || out.boolean("compliant") != Some(true) {
                            problems.push(format!("threshold {threshold}: breach step {step:?}, expected {expect_step:?}"));
                        }
                    }
                    Err(e) => problems.push(e.to_string()),
                }
            }
            (problems.is_empty(), if problems.is_empty() { "breach steps match".into() } else { problems.join("; ") })
        }
        AgentKind::ExperiencePredictor => {
            let score = |run: &mut dyn FnMut(&Payload) -> Result<Payload, KernelError>, latency: f64| {
                let input = Payload::new()
                    .with("latency_ms", Value::Number(latency))
                    .with("loss_ratio", Value::Number(0.0))
                    .with("throughput_mbps", Value::Number(100.0))
                    .with("demand_mbps", Value::Number(50.0));
                run(&input).ok().and_then(|p| p.number("score"))
            };
            let scores: Vec<Option<f64>> = [10.0, 100.0, 300.0, 1000.0].iter().map(|l| score(&mut run, *l)).collect();
            let ok = scores.iter().all(|s| s.is_some_and(|v| (0.0..=1.0).contains(&v)))
                && scores[0] == Some(1.0)
                && scores.windows(2).all(|w| w[0] > w[1] || (w[0] == Some(0.0) && w[1] == Some(0.0)));
            (ok, format!("scores by latency {scores:?}"))
        }
        AgentKind::OptimizationAdvisor => {
            let mut rng = SeedStream::new(derive_seed(suite.seed, "bench/advisor", 0));
            let mut problems = Vec::new();
            for _ in 0..20 {
                let n = 2 + rng.below(4) as usize;
                let cells: Vec<CellState> = (0..n)
                    .map(|_| CellState { load: rng.uniform(), energy: 0.5 + rng.uniform(), active: true })
                    .collect();
                let loads: Vec<f64> = cells.iter().map(|c| c.load).collect();
                let energy: Vec<f64> = cells.iter().map(|c| c.energy).collect();
                let out = match run(&cells_payload(&loads, &energy)) {
                    Ok(p) => p,
                    Err(e) => return (false, e.to_string()),
                };
                let base = utility(&cells, 0.1);
                let deltas: BTreeMap<String, f64> = applicable_actions(&cells)
                    .into_iter()
                    .map(|a| (a.id(), utility(&apply_action(&cells, a), 0.1) - base))
                    .collect();
                let best = deltas.values().copied().fold(f64::NEG_INFINITY, f64::max);
                match out.text("action").and_then(|a| deltas.get(a)) {
                    Some(d) if (d - best).abs() <= 1e-9 => {}
                    _ => problems.push(format!("suboptimal action {:?}", out.text("action"))),
                }
            }
            (problems.is_empty(), if problems.is_empty() { "20 random cell sets advised optimally".into() } else { problems.join("; ") })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_agents_certify() {
        for kind in AgentKind::ALL {
            let report = certify(CandidateKind::Reference(kind), &Payload::new(), &SuiteConfig::default()).unwrap();
            assert!(report.passed, "{kind}: {:#?}", report.verdicts);
            assert!(report.is_consistent());
        }
    }

    #[test]
    fn always_flag_fails_behavior_only() {
        let report = certify(CandidateKind::AlwaysFlagDetector, &Payload::new(), &SuiteConfig::default()).unwrap();
        assert!(!report.passed);
        for v in &report.verdicts {
            assert_eq!(v.passed, v.test != CertTest::BehavioralBenchmark, "{v:?}");
        }
    }

    #[test]
    fn schema_violator_fails_contract_and_behavior() {
        let report = certify(CandidateKind::SchemaViolatingEmitter, &Payload::new(), &SuiteConfig::default()).unwrap();
        assert!(!report.passed);
        for v in &report.verdicts {
            let expect_fail = matches!(v.test, CertTest::ContractConformance | CertTest::BehavioralBenchmark);
            assert_eq!(v.passed, !expect_fail, "{v:?}");
        }
        let contract = report.verdict(CertTest::ContractConformance).unwrap();
        assert!(contract.detail.contains("anomaly_count"), "{}", contract.detail);
    }

    #[test]
    fn verdicts_are_deterministic() {
        let suite = SuiteConfig::default();
        let a = certify(CandidateKind::Reference(AgentKind::CapacityForecaster), &Payload::new(), &suite).unwrap();
        let b = certify(CandidateKind::Reference(AgentKind::CapacityForecaster), &Payload::new(), &suite).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tight_latency_budget_fails() {
        let suite = SuiteConfig { latency_budget_ms: 0, ..SuiteConfig::default() };
        let report = certify(CandidateKind::Reference(AgentKind::SlaMonitor), &Payload::new(), &suite).unwrap();
        assert!(!report.verdict(CertTest::LatencyBudget).unwrap().passed);
        assert!(!report.passed);
    }

    #[test]
    fn kind_tokens_round_trip() {
        for k in CandidateKind::all() {
            assert_eq!(k.token().parse::<CandidateKind>().unwrap(), k);
        }
        assert!("oracle".parse::<CandidateKind>().is_err());
    }
}
