//! Deterministic reference agents and the local trainer used by federation participants.
//!
//! Each algorithm is a pure function. The `*Agent` types wrap them behind the kernel's
//! [`Agent`] interface; every tunable parameter is an optional field of the agent's input
//! schema and falls back to the value configured on the wrapper.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{FieldDef, Payload, SchemaDef, SchemaRef, SemanticType, Unit, Value, Version};
use crate::kernel::{Agent, AgentContext, AgentError, AgentKind};
use crate::telemetry::{KpiWindow, Timestamp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("window of {len} points is too short, need more than {need}")]
    WindowTooShort { len: usize, need: usize },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("empty input")]
    Empty,
}

fn invalid(name: &'static str, reason: impl Into<String>) -> AnalysisError {
    AnalysisError::InvalidParameter { name, reason: reason.into() }
}

pub const MAD_SCALE: f64 = 1.4826;
pub const MAD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub index: usize,
    pub timestamp: Timestamp,
    pub value: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub anomalies: Vec<Anomaly>,
    pub window: usize,
    pub threshold: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Robust score of `x` against a trailing sample: `|x - median| / (1.4826·MAD + 1e-9)`.
pub fn robust_score(x: f64, trailing: &[f64]) -> f64 {
    let sorted = sorted_copy(trailing);
    let med = median(&sorted);
    let deviations = sorted_copy(&trailing.iter().map(|v| (v - med).abs()).collect::<Vec<_>>());
    let mad = median(&deviations);
    (x - med).abs() / (MAD_SCALE * mad + MAD_FLOOR)
}

/// Flags every index `t >= window` whose robust score against the previous `window` points
/// exceeds `threshold`.
pub fn detect_anomalies(series: &KpiWindow, window: usize, threshold: f64) -> Result<AnomalyReport, AnalysisError> {
    if window == 0 {
        return Err(invalid("window", "must be at least 1"));
    }
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(invalid("threshold", "must be finite and non-negative"));
    }
    if series.len() <= window {
        return Err(AnalysisError::WindowTooShort { len: series.len(), need: window });
    }
    let values = series.values();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let anomalies = (window..values.len())
        .filter_map(|t| {
            let score = robust_score(values[t], &values[t - window..t]);
            (score > threshold).then(|| Anomaly { index: t, timestamp: series.points()[t].0, value: values[t], score })
        })
        .collect();
    Ok(AnomalyReport { anomalies, window, threshold })
}

/// Tunables of the experience model. Defaults: 50 ms floor, 500 ms ceiling, 5 % loss ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperienceParams {
    pub latency_floor_ms: f64,
    pub latency_ceiling_ms: f64,
    pub loss_ceiling: f64,
}

impl Default for ExperienceParams {
    fn default() -> Self {
        Self { latency_floor_ms: 50.0, latency_ceiling_ms: 500.0, loss_ceiling: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperienceSnapshot {
    pub latency_ms: f64,
    pub loss_ratio: f64,
    pub throughput_mbps: f64,
    pub demand_mbps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceScore {
    pub score: f64,
    pub latency: f64,
    pub loss: f64,
    pub throughput: f64,
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Geometric mean of latency, loss and throughput sub-scores.
pub fn predict_experience(s: &ExperienceSnapshot, p: &ExperienceParams) -> Result<ExperienceScore, AnalysisError> {
    let inputs = [s.latency_ms, s.loss_ratio, s.throughput_mbps, s.demand_mbps];
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    if inputs.iter().any(|v| *v < 0.0) {
        return Err(invalid("snapshot", "negative inputs are not allowed"));
    }
    if s.demand_mbps <= 0.0 {
        return Err(invalid("demand_mbps", "must be positive"));
    }
    if !(p.latency_ceiling_ms > p.latency_floor_ms) || !(p.loss_ceiling > 0.0) {
        return Err(invalid("params", "ceilings must exceed floors"));
    }
    let latency = clamp01(1.0 - (s.latency_ms - p.latency_floor_ms) / (p.latency_ceiling_ms - p.latency_floor_ms));
    let loss = clamp01(1.0 - s.loss_ratio / p.loss_ceiling);
    let throughput = clamp01(s.throughput_mbps / s.demand_mbps);
    let score = (latency * loss * throughput).cbrt();
    Ok(ExperienceScore { score, latency, loss, throughput })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoltParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for HoltParams {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.3 }
    }
}

/// Holt linear-trend forecast for steps `1..=horizon` past the last observation.
///
/// `level_1 = y_1`, `trend_1 = y_2 - y_1`, then for `t >= 2`:
/// `level_t = α·y_t + (1-α)(level_{t-1} + trend_{t-1})`,
/// `trend_t = β(level_t - level_{t-1}) + (1-β)·trend_{t-1}`.
pub fn forecast_capacity(values: &[f64], horizon: usize, params: HoltParams) -> Result<Vec<f64>, AnalysisError> {
    if values.len() < 2 {
        return Err(AnalysisError::WindowTooShort { len: values.len(), need: 1 });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    for (name, v) in [("alpha", params.alpha), ("beta", params.beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid(name, "must lie in [0, 1]"));
        }
    }
    let HoltParams { alpha, beta } = params;
    let mut level = values[0];
    let mut trend = values[1] - values[0];
    for &y in &values[1..] {
        let prev = level;
        level = alpha * y + (1.0 - alpha) * (level + trend);
        trend = beta * (level - prev) + (1.0 - beta) * trend;
    }
    Ok((1..=horizon).map(|i| level + i as f64 * trend).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlaTerms {
    pub threshold: f64,
    /// Required fraction of samples at or below the threshold.
    pub target_fraction: f64,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreachForecast {
    pub timestamp: Timestamp,
    pub step: usize,
    /// Fraction of forecast steps at or beyond the threshold.
    pub horizon_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaReport {
    pub compliant: bool,
    pub observed_fraction: f64,
    pub breach: Option<BreachForecast>,
}

/// Forecast values this close below the threshold count as reaching it.
const BREACH_TOLERANCE: f64 = 1e-9;

fn reaches(value: f64, threshold: f64) -> bool {
    value >= threshold - BREACH_TOLERANCE * threshold.abs().max(1.0)
}

/// Compliance over the observed window plus a Holt-based breach forecast. A forecast step is
/// a breach once the predicted value reaches the threshold.
pub fn monitor_sla(series: &KpiWindow, terms: &SlaTerms, holt: HoltParams) -> Result<SlaReport, AnalysisError> {
    if series.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if terms.horizon < 1 {
        return Err(invalid("horizon", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&terms.target_fraction) {
        return Err(invalid("target_fraction", "must lie in [0, 1]"));
    }
    let values = series.values();
    let within = values.iter().filter(|v| **v <= terms.threshold).count();
    let observed_fraction = within as f64 / values.len() as f64;
    let breach = match series.step() {
        Some(step) => {
            let forecast = forecast_capacity(&values, terms.horizon, holt)?;
            let beyond = forecast.iter().filter(|v| reaches(**v, terms.threshold)).count();
            forecast.iter().position(|v| reaches(*v, terms.threshold)).map(|i| BreachForecast {
                timestamp: series.points()[series.len() - 1].0 + (i as i64 + 1) * step,
                step: i + 1,
                horizon_fraction: beyond as f64 / terms.horizon as f64,
            })
        }
        None => None,
    };
    Ok(SlaReport { compliant: observed_fraction >= terms.target_fraction, observed_fraction, breach })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub load: f64,
    /// Energy cost while the cell is active.
    pub energy: f64,
    #[serde(default = "yes")]
    pub active: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    NoOp,
    Sleep(usize),
    Shift { from: usize, to: usize },
}

impl Action {
    pub fn id(&self) -> String {
        match self {
            Action::NoOp => "no-op".to_string(),
            Action::Sleep(i) => format!("sleep({i})"),
            Action::Shift { from, to } => format!("shift({from}->{to})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationAdvice {
    pub action: Action,
    pub expected_delta: f64,
}

pub const CONGESTION_KNEE: f64 = 0.8;
pub const SLEEP_LOAD_LIMIT: f64 = 0.1;

/// `1 - max(0, load - 0.8) / 0.2`.
pub fn qos(load: f64) -> f64 {
    1.0 - (load - CONGESTION_KNEE).max(0.0) / 0.2
}

/// `Σ qos(load) - λ·Σ energy` over active cells.
pub fn utility(cells: &[CellState], lambda: f64) -> f64 {
    let active = cells.iter().filter(|c| c.active);
    active.fold(0.0, |acc, c| acc + qos(c.load) - lambda * c.energy)
}

/// Actions whose preconditions hold in `cells`, with `no-op` first.
pub fn applicable_actions(cells: &[CellState]) -> Vec<Action> {
    let mut actions = vec![Action::NoOp];
    let active: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].active).collect();
    for &i in &active {
        if cells[i].load < SLEEP_LOAD_LIMIT && active.len() > 1 {
            actions.push(Action::Sleep(i));
        }
        if cells[i].load > CONGESTION_KNEE {
            for &j in active.iter().filter(|&&j| j != i) {
                actions.push(Action::Shift { from: i, to: j });
            }
        }
    }
    actions
}

/// State after `action`. Sleeping moves the cell's load to the least-loaded other active cell
/// (lowest index on ties); shifting moves the load above the 0.8 knee from `from` to `to`.
pub fn apply_action(cells: &[CellState], action: Action) -> Vec<CellState> {
    let mut next = cells.to_vec();
    match action {
        Action::NoOp => {}
        Action::Sleep(i) => {
            let target = (0..cells.len())
                .filter(|&j| j != i && cells[j].active)
                .min_by(|&a, &b| cells[a].load.total_cmp(&cells[b].load).then(a.cmp(&b)));
            if let Some(j) = target {
                next[j].load += next[i].load;
                next[i].load = 0.0;
                next[i].active = false;
            }
        }
        Action::Shift { from, to } => {
            let excess = (next[from].load - CONGESTION_KNEE).max(0.0);
            next[from].load -= excess;
            next[to].load += excess;
        }
    }
    next
}

/// Picks the applicable action with the largest utility gain; ties (within 1e-12) go to the
/// lexicographically smallest action id.
pub fn advise_optimization(cells: &[CellState], lambda: f64) -> Result<OptimizationAdvice, AnalysisError> {
    if cells.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if cells.iter().any(|c| !c.load.is_finite() || !c.energy.is_finite()) || !lambda.is_finite() {
        return Err(AnalysisError::NonFinite);
    }
    let before = utility(cells, lambda);
    let mut scored: Vec<(String, Action, f64)> = applicable_actions(cells)
        .into_iter()
        .map(|a| (a.id(), a, utility(&apply_action(cells, a), lambda) - before))
        .collect();
    scored.sort_by(|a, b| a.0.cmp(&b.0));
    let mut best = &scored[0];
    for candidate in &scored[1..] {
        if candidate.2 > best.2 + 1e-12 {
            best = candidate;
        }
    }
    Ok(OptimizationAdvice { action: best.1, expected_delta: best.2 })
}

/// Linear model `y = w·x + b` with its lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    /// `[w, b]`.
    pub weights: [f64; 2],
    /// Global model version the local model started from.
    pub base_version: u64,
}

pub fn mse_loss(weights: &[f64; 2], data: &[(f64, f64)]) -> f64 {
    let [w, b] = *weights;
    data.iter().map(|(x, y)| (w * x + b - y).powi(2)).sum::<f64>() / data.len() as f64
}

/// Analytic gradient of [`mse_loss`] with respect to `[w, b]`.
pub fn mse_gradient(weights: &[f64; 2], data: &[(f64, f64)]) -> [f64; 2] {
    let [w, b] = *weights;
    let n = data.len() as f64;
    let (gw, gb) = data.iter().fold((0.0, 0.0), |(gw, gb), (x, y)| {
        let err = w * x + b - y;
        (gw + err * x, gb + err)
    });
    [2.0 * gw / n, 2.0 * gb / n]
}

/// Largest step size for which full-batch gradient descent on [`mse_loss`] never increases
/// the loss: `2 / λ_max` of the Hessian `(2/n)·[[Σx², Σx], [Σx, n]]`.
pub fn stability_bound(data: &[(f64, f64)]) -> f64 {
    let n = data.len() as f64;
    let sxx: f64 = data.iter().map(|(x, _)| x * x).sum();
    let sx: f64 = data.iter().map(|(x, _)| x).sum();
    let (a, c, d) = (2.0 * sxx / n, 2.0 * sx / n, 2.0);
    let lambda_max = 0.5 * (a + d) + ((0.5 * (a - d)).powi(2) + c * c).sqrt();
    2.0 / lambda_max
}

/// Full-batch gradient descent. The loss trace holds the loss after each epoch.
pub fn local_train(
    base: &LocalModel,
    data: &[(f64, f64)],
    epochs: usize,
    lr: f64,
) -> Result<(LocalModel, Vec<f64>), AnalysisError> {
    if data.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(invalid("lr", "must be positive and finite"));
    }
    if data.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) || base.weights.iter().any(|w| !w.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let mut weights = base.weights;
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let g = mse_gradient(&weights, data);
        weights[0] -= lr * g[0];
        weights[1] -= lr * g[1];
        trace.push(mse_loss(&weights, data));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    Ok((LocalModel { weights, base_version: base.base_version }, trace))
}

// ---------------------------------------------------------------------------------------------
// Kernel adapters

const V1: Version = Version::new(1, 0);

fn list(name: &str, unit: Unit) -> FieldDef {
    FieldDef::required(name, SemanticType::ListOfNumber, unit)
}

fn opt(name: &str, ty: SemanticType, unit: Unit) -> FieldDef {
    FieldDef::optional(name, ty, unit)
}

fn req(name: &str, ty: SemanticType, unit: Unit) -> FieldDef {
    FieldDef::required(name, ty, unit)
}

pub fn input_schema_ref(kind: AgentKind) -> SchemaRef {
    SchemaRef::new(&format!("agent.{}.input", kind.as_str()), V1)
}

pub fn output_schema_ref(kind: AgentKind) -> SchemaRef {
    SchemaRef::new(&format!("agent.{}.output", kind.as_str()), V1)
}

/// Input and output schemas of a reference agent kind.
pub fn schemas(kind: AgentKind) -> (SchemaDef, SchemaDef) {
    use SemanticType::*;
    use Unit::*;
    let (input, output) = match kind {
        AgentKind::AnomalyDetector => (
            vec![
                list("timestamps", Ms),
                list("values", Dimensionless),
                opt("window", Integer, Count),
                opt("threshold", Number, Dimensionless),
            ],
            vec![
                req("anomaly_count", Integer, Count),
                list("anomaly_timestamps", Ms),
                list("anomaly_values", Dimensionless),
                list("anomaly_scores", Dimensionless),
                req("window", Integer, Count),
                req("threshold", Number, Dimensionless),
                opt("timestamps", ListOfNumber, Ms),
                opt("values", ListOfNumber, Dimensionless),
            ],
        ),
        AgentKind::ExperiencePredictor => (
            vec![
                req("latency_ms", Number, Ms),
                req("loss_ratio", Number, Dimensionless),
                req("throughput_mbps", Number, Mbps),
                req("demand_mbps", Number, Mbps),
                opt("latency_floor_ms", Number, Ms),
                opt("latency_ceiling_ms", Number, Ms),
                opt("loss_ceiling", Number, Dimensionless),
            ],
            vec![
                req("score", Number, Dimensionless),
                req("latency_score", Number, Dimensionless),
                req("loss_score", Number, Dimensionless),
                req("throughput_score", Number, Dimensionless),
            ],
        ),
        AgentKind::SlaMonitor => (
            vec![
                list("timestamps", Ms),
                list("values", Dimensionless),
                opt("threshold", Number, Dimensionless),
                opt("target_fraction", Number, Dimensionless),
                opt("horizon", Integer, Count),
                opt("alpha", Number, Dimensionless),
                opt("beta", Number, Dimensionless),
            ],
            vec![
                req("compliant", Boolean, Dimensionless),
                req("observed_fraction", Number, Dimensionless),
                req("breach_predicted", Boolean, Dimensionless),
                opt("breach_timestamp", Timestamp, Ms),
                opt("breach_step", Integer, Count),
                opt("breach_fraction", Number, Dimensionless),
                req("threshold", Number, Dimensionless),
            ],
        ),
        AgentKind::OptimizationAdvisor => (
            vec![
                list("loads", Dimensionless),
                list("energy", Dimensionless),
                opt("active", ListOfNumber, Dimensionless),
                opt("lambda", Number, Dimensionless),
            ],
            vec![req("action", String, Dimensionless), req("expected_delta", Number, Dimensionless)],
        ),
        AgentKind::CapacityForecaster => (
            vec![
                list("timestamps", Ms),
                list("values", Dimensionless),
                opt("horizon", Integer, Count),
                opt("alpha", Number, Dimensionless),
                opt("beta", Number, Dimensionless),
            ],
            vec![list("forecast", Dimensionless), list("forecast_timestamps", Ms)],
        ),
    };
    (
        SchemaDef { name: input_schema_ref(kind).name, version: V1, fields: input },
        SchemaDef { name: output_schema_ref(kind).name, version: V1, fields: output },
    )
}

/// Payload fields carrying a KPI window.
pub fn window_payload(window: &KpiWindow) -> Payload {
    Payload::new()
        .with("timestamps", Value::ListOfNumber(window.timestamps().iter().map(|t| *t as f64).collect()))
        .with("values", Value::ListOfNumber(window.values()))
}

fn bad_input(e: impl ToString) -> AgentError {
    AgentError::InvalidInput(e.to_string())
}

fn window_from(input: &Payload) -> Result<KpiWindow, AgentError> {
    let ts = input.list("timestamps").ok_or_else(|| bad_input("timestamps missing"))?;
    let vs = input.list("values").ok_or_else(|| bad_input("values missing"))?;
    if ts.len() != vs.len() {
        return Err(bad_input("timestamps and values differ in length"));
    }
    if ts.iter().any(|t| !t.is_finite() || t.fract() != 0.0) {
        return Err(bad_input("timestamps must be integral"));
    }
    let points = ts.iter().zip(vs).map(|(t, v)| (*t as i64, *v)).collect();
    KpiWindow::new("input", points).map_err(bad_input)
}

fn positive_int(input: &Payload, name: &str, default: usize) -> Result<usize, AgentError> {
    match input.integer(name) {
        None => Ok(default),
        Some(v) if v >= 0 => Ok(v as usize),
        Some(v) => Err(bad_input(format!("{name} must be non-negative, got {v}"))),
    }
}

fn analysis(e: AnalysisError) -> AgentError {
    match e {
        AnalysisError::Empty | AnalysisError::NonFinite | AnalysisError::InvalidParameter { .. } => bad_input(e),
        AnalysisError::WindowTooShort { .. } => bad_input(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalyDetectorAgent {
    pub window: usize,
    pub threshold: f64,
}

impl Default for AnomalyDetectorAgent {
    fn default() -> Self {
        Self { window: 20, threshold: 3.5 }
    }
}

impl Agent for AnomalyDetectorAgent {
    fn invoke(&self, _ctx: &mut AgentContext<'_>, input: &Payload) -> Result<Payload, AgentError> {
        let window = window_from(input)?;
        let w = positive_int(input, "window", self.window)?;
        let k = input.number("threshold").unwrap_or(self.threshold);
        let report = detect_anomalies(&window, w, k).map_err(analysis)?;
        Ok(anomaly_payload(&report, &window))
    }
}

pub fn anomaly_payload(report: &AnomalyReport, window: &KpiWindow) -> Payload {
    let pick = |f: fn(&Anomaly) -> f64| Value::ListOfNumber(report.anomalies.iter().map(f).collect());
    window_payload(window)
        .with("anomaly_count", Value::Integer(report.anomalies.len() as i64))
        .with("anomaly_timestamps", pick(|a| a.timestamp as f64))
        .with("anomaly_values", pick(|a| a.value))
        .with("anomaly_scores", pick(|a| a.score))
        .with("window", Value::Integer(report.window as i64))
        .with("threshold", Value::Number(report.threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExperiencePredictorAgent {
    pub params: ExperienceParams,
}

impl Agent for ExperiencePredictorAgent {
    fn invoke(&self, _ctx: &mut AgentContext<'_>, input: &Payload) -> Result<Payload, AgentError> {
        let num = |name: &str| input.number(name).ok_or_else(|| bad_input(format!("{name} missing")));
        let snapshot = ExperienceSnapshot {
            latency_ms: num("latency_ms")?,
            loss_ratio: num("loss_ratio")?,
            throughput_mbps: num("throughput_mbps")?,
            demand_mbps: num("demand_mbps")?,
        };
        let params = ExperienceParams {
            latency_floor_ms: input.number("latency_floor_ms").unwrap_or(self.params.latency_floor_ms),
            latency_ceiling_ms: input.number("latency_ceiling_ms").unwrap_or(self.params.latency_ceiling_ms),
            loss_ceiling: input.number("loss_ceiling").unwrap_or(self.params.loss_ceiling),
        };
        let s = predict_experience(&snapshot, &params).map_err(analysis)?;
        Ok(Payload::new()
            .with("score", Value::Number(s.score))
            .with("latency_score", Value::Number(s.latency))
            .with("loss_score", Value::Number(s.loss))
            .with("throughput_score", Value::Number(s.throughput)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlaMonitorAgent {
    pub terms: SlaTerms,
    pub holt: HoltParams,
}

impl Default for SlaMonitorAgent {
    fn default() -> Self {
        Self { terms: SlaTerms { threshold: 100.0, target_fraction: 0.95, horizon: 10 }, holt: HoltParams::default() }
    }
}

impl Agent for SlaMonitorAgent {
    fn invoke(&self, _ctx: &mut AgentContext<'_>, input: &Payload) -> Result<Payload, AgentError> {
        let window = window_from(input)?;
        let terms = SlaTerms {
            threshold: input.number("threshold").unwrap_or(self.terms.threshold),
            target_fraction: input.number("target_fraction").unwrap_or(self.terms.target_fraction),
            horizon: positive_int(input, "horizon", self.terms.horizon)?,
        };
        let holt = HoltParams {
            alpha: input.number("alpha").unwrap_or(self.holt.alpha),
            beta: input.number("beta").unwrap_or(self.holt.beta),
        };
        let report = monitor_sla(&window, &terms, holt).map_err(analysis)?;
        let mut out = Payload::new()
            .with("compliant", Value::Boolean(report.compliant))
            .with("observed_fraction", Value::Number(report.observed_fraction))
            .with("breach_predicted", Value::Boolean(report.breach.is_some()))
            .with("threshold", Value::Number(terms.threshold));
        if let Some(b) = report.breach {
            out.insert("breach_timestamp", Value::Timestamp(b.timestamp));
            out.insert("breach_step", Value::Integer(b.step as i64));
            out.insert("breach_fraction", Value::Number(b.horizon_fraction));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizationAdvisorAgent {
    pub lambda: f64,
}

impl Default for OptimizationAdvisorAgent {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

impl Agent for OptimizationAdvisorAgent {
    fn invoke(&self, _ctx: &mut AgentContext<'_>, input: &Payload) -> Result<Payload, AgentError> {
        let loads = input.list("loads").ok_or_else(|| bad_input("loads missing"))?;
        let energy = input.list("energy").ok_or_else(|| bad_input("energy missing"))?;
        if loads.len() != energy.len() {
            return Err(bad_input("loads and energy differ in length"));
        }
        let active = input.list("active");
        if active.is_some_and(|a| a.len() != loads.len()) {
            return Err(bad_input("active differs in length from loads"));
        }
        let cells: Vec<CellState> = (0..loads.len())
            .map(|i| CellState { load: loads[i], energy: energy[i], active: active.is_none_or(|a| a[i] != 0.0) })
            .collect();
        let lambda = input.number("lambda").unwrap_or(self.lambda);
        let advice = advise_optimization(&cells, lambda).map_err(analysis)?;
        Ok(Payload::new()
            .with("action", Value::String(advice.action.id()))
            .with("expected_delta", Value::Number(advice.expected_delta)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityForecasterAgent {
    pub horizon: usize,
    pub holt: HoltParams,
}

impl Default for CapacityForecasterAgent {
    fn default() -> Self {
        Self { horizon: 10, holt: HoltParams::default() }
    }
}

impl Agent for CapacityForecasterAgent {
    fn invoke(&self, _ctx: &mut AgentContext<'_>, input: &Payload) -> Result<Payload, AgentError> {
        let window = window_from(input)?;
        let horizon = positive_int(input, "horizon", self.horizon)?;
        let holt = HoltParams {
            alpha: input.number("alpha").unwrap_or(self.holt.alpha),
            beta: input.number("beta").unwrap_or(self.holt.beta),
        };
        let forecast = forecast_capacity(&window.values(), horizon, holt).map_err(analysis)?;
        let last = window.points().last().map_or(0, |p| p.0);
        let step = window.step().unwrap_or(1);
        let stamps = (1..=horizon).map(|i| (last + i as i64 * step) as f64).collect();
        Ok(Payload::new()
            .with("forecast", Value::ListOfNumber(forecast))
            .with("forecast_timestamps", Value::ListOfNumber(stamps)))
    }
}

/// Reference implementation of `kind`, configured from `params` (fields of the kind's input
/// schema; unknown fields are ignored).
pub fn reference_agent(kind: AgentKind, params: &Payload) -> Arc<dyn Agent> {
    match kind {
        AgentKind::AnomalyDetector => {
            let d = AnomalyDetectorAgent::default();
            Arc::new(AnomalyDetectorAgent {
                window: params.integer("window").map_or(d.window, |v| v.max(1) as usize),
                threshold: params.number("threshold").unwrap_or(d.threshold),
            })
        }
        AgentKind::ExperiencePredictor => {
            let d = ExperienceParams::default();
            Arc::new(ExperiencePredictorAgent {
                params: ExperienceParams {
                    latency_floor_ms: params.number("latency_floor_ms").unwrap_or(d.latency_floor_ms),
                    latency_ceiling_ms: params.number("latency_ceiling_ms").unwrap_or(d.latency_ceiling_ms),
                    loss_ceiling: params.number("loss_ceiling").unwrap_or(d.loss_ceiling),
                },
            })
        }
        AgentKind::SlaMonitor => {
            let d = SlaMonitorAgent::default();
            Arc::new(SlaMonitorAgent {
                terms: SlaTerms {
                    threshold: params.number("threshold").unwrap_or(d.terms.threshold),
                    target_fraction: params.number("target_fraction").unwrap_or(d.terms.target_fraction),
                    horizon: params.integer("horizon").map_or(d.terms.horizon, |v| v.max(1) as usize),
                },
                holt: HoltParams {
                    alpha: params.number("alpha").unwrap_or(d.holt.alpha),
                    beta: params.number("beta").unwrap_or(d.holt.beta),
                },
            })
        }
        AgentKind::OptimizationAdvisor => Arc::new(OptimizationAdvisorAgent {
            lambda: params.number("lambda").unwrap_or(OptimizationAdvisorAgent::default().lambda),
        }),
        AgentKind::CapacityForecaster => {
            let d = CapacityForecasterAgent::default();
            Arc::new(CapacityForecasterAgent {
                horizon: params.integer("horizon").map_or(d.horizon, |v| v.max(1) as usize),
                holt: HoltParams {
                    alpha: params.number("alpha").unwrap_or(d.holt.alpha),
                    beta: params.number("beta").unwrap_or(d.holt.beta),
                },
            })
        }
    }
}
