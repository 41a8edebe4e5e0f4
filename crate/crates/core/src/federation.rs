//! Federated training coordination: congestion-aware round planning, clipping, gaussian DP
//! noise, fixed-point pairwise-mask secure aggregation, weighted averaging, model lineage and
//! leave-one-out attribution.
//!
//! Updates are quantized at scale 2^24 into wrapping 64-bit integers, so pairwise masks cancel
//! bit-exactly in the aggregate.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{local_train, mse_loss, AnalysisError, LocalModel};
use crate::codec::{Canonical, Digest, Encoder};
use crate::domain::OperatorId;
use crate::ledger::{EntryType, Ledger, LedgerError, Signer};
use crate::rng::{derive_seed, SeedStream};
use crate::simnet::{Endpoint, EventPayload, LinkSpec, MessageKind, SendOutcome, SimError, SimMessage, SimNet};
use crate::telemetry::Timestamp;

pub const SCALE: f64 = 16_777_216.0;
/// Largest admissible `|value · sample_count|` before quantization.
pub const RANGE_BOUND: f64 = 1_048_576.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FederationError {
    #[error("no eligible participants")]
    NoParticipants,
    #[error("masking requires at least two participants, got {0}")]
    MaskingUnavailable(usize),
    #[error("no off-peak start within {lookahead_ms} ms of {now}")]
    NoOffPeakWindow { now: Timestamp, lookahead_ms: i64 },
    #[error("invalid congestion schedule: {0}")]
    InvalidSchedule(String),
    #[error("clip bound must be positive, got {0}")]
    InvalidClip(f64),
    #[error("sigma must be non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("coordinate {index} out of quantization range: {value} x {count}")]
    RangeOverflow { index: usize, value: f64, count: u64 },
    #[error("missing pairwise seed for {0} and {1}")]
    MissingSeed(OperatorId, OperatorId),
    #[error("{0} is not a round participant")]
    NotParticipant(OperatorId),
    #[error("empty update set")]
    EmptyUpdates,
    #[error("updates belong to different rounds or base versions")]
    MixedRounds,
    #[error("updates mix masked and unmasked vectors")]
    MixedMasking,
    #[error("update length {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("update commitment does not match its content for {0}")]
    BadCommitment(OperatorId),
    #[error("duplicate update from {0}")]
    DuplicateUpdate(OperatorId),
    #[error("the evaluation model must have exactly two weights")]
    UnsupportedModel,
    #[error("no training data for {0}")]
    MissingData(OperatorId),
    #[error(transparent)]
    Training(#[from] AnalysisError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub previous_version: u64,
    pub round_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub version: u64,
    pub weights: Vec<f64>,
    pub lineage: Option<Lineage>,
}

impl GlobalModel {
    pub fn initial(weights: Vec<f64>) -> Self {
        Self { version: 0, weights, lineage: None }
    }

    pub fn digest(&self) -> Digest {
        self.canonical_digest()
    }

    fn linear(&self) -> Result<[f64; 2], FederationError> {
        match self.weights.as_slice() {
            [w, b] => Ok([*w, *b]),
            _ => Err(FederationError::UnsupportedModel),
        }
    }

    /// Mean squared error of the linear model `[w, b]` on `data`.
    pub fn loss(&self, data: &[(f64, f64)]) -> Result<f64, FederationError> {
        Ok(mse_loss(&self.linear()?, data))
    }
}

impl Canonical for GlobalModel {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.version);
        self.weights.as_slice().encode(enc);
        match self.lineage {
            Some(l) => enc.bool(true).u64(l.previous_version).u64(l.round_id),
            None => enc.bool(false),
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CongestionWindow {
    pub start: Timestamp,
    pub end: Timestamp,
    pub multiplier: f64,
}

/// Sorted, non-overlapping half-open windows `[start, end)` with a latency multiplier. Time
/// outside every window is off-peak (multiplier 1).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<CongestionWindow>", into = "Vec<CongestionWindow>")]
pub struct CongestionSchedule {
    windows: Vec<CongestionWindow>,
}

impl CongestionSchedule {
    pub fn new(windows: Vec<CongestionWindow>) -> Result<Self, FederationError> {
        for (i, w) in windows.iter().enumerate() {
            if w.end <= w.start {
                return Err(FederationError::InvalidSchedule(format!("window {i} is empty or inverted")));
            }
            if !w.multiplier.is_finite() || w.multiplier < 1.0 {
                return Err(FederationError::InvalidSchedule(format!("window {i} multiplier must be >= 1")));
            }
            if i > 0 && w.start < windows[i - 1].end {
                return Err(FederationError::InvalidSchedule(format!("window {i} overlaps or is out of order")));
            }
        }
        Ok(Self { windows })
    }

    pub fn windows(&self) -> &[CongestionWindow] {
        &self.windows
    }

    pub fn multiplier_at(&self, t: Timestamp) -> f64 {
        self.windows.iter().find(|w| w.start <= t && t < w.end).map_or(1.0, |w| w.multiplier)
    }

    pub fn is_off_peak(&self, t: Timestamp) -> bool {
        self.multiplier_at(t) == 1.0
    }

    /// Earliest `t >= now` with multiplier 1.
    pub fn next_off_peak(&self, now: Timestamp) -> Timestamp {
        let mut t = now;
        for w in &self.windows {
            if w.start <= t && t < w.end && w.multiplier != 1.0 {
                t = w.end;
            }
        }
        t
    }
}

impl TryFrom<Vec<CongestionWindow>> for CongestionSchedule {
    type Error = FederationError;

    fn try_from(windows: Vec<CongestionWindow>) -> Result<Self, Self::Error> {
        Self::new(windows)
    }
}

impl From<CongestionSchedule> for Vec<CongestionWindow> {
    fn from(s: CongestionSchedule) -> Self {
        s.windows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip: f64,
    pub sigma: f64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return Err(FederationError::InvalidClip(self.clip));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(FederationError::InvalidSigma(self.sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub dp: DpConfig,
    pub masking: bool,
    /// Time between the round start and the collection deadline.
    pub deadline_ms: i64,
    /// How far past `now` the planner may push the start to reach an off-peak window.
    pub lookahead_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round_id: u64,
    pub base_version: u64,
    pub participants: Vec<OperatorId>,
    pub start: Timestamp,
    pub deadline: Timestamp,
    pub dp: DpConfig,
    pub masking: bool,
}

impl RoundPlan {
    pub fn validate(&self) -> Result<(), FederationError> {
        self.dp.validate()?;
        if self.participants.is_empty() {
            return Err(FederationError::NoParticipants);
        }
        if self.masking && self.participants.len() < 2 {
            return Err(FederationError::MaskingUnavailable(self.participants.len()));
        }
        Ok(())
    }
}

impl Canonical for RoundPlan {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.round_id).u64(self.base_version).len(self.participants.len());
        for p in &self.participants {
            enc.str(p.as_str());
        }
        enc.i64(self.start).i64(self.deadline).f64(self.dp.clip).f64(self.dp.sigma).bool(self.masking);
    }
}

/// Plans a round at the first off-peak instant of `sched` at or after `now`. Participants are
/// the eligible operators whose own link is not congested at that instant.
pub fn plan_round(
    round_id: u64,
    model: &GlobalModel,
    eligible: &[OperatorId],
    sched: &CongestionSchedule,
    links: &BTreeMap<OperatorId, LinkSpec>,
    now: Timestamp,
    cfg: &RoundConfig,
) -> Result<RoundPlan, FederationError> {
    if eligible.is_empty() {
        return Err(FederationError::NoParticipants);
    }
    cfg.dp.validate()?;
    let start = sched.next_off_peak(now);
    if start - now > cfg.lookahead_ms {
        return Err(FederationError::NoOffPeakWindow { now, lookahead_ms: cfg.lookahead_ms });
    }
    let mut participants: Vec<OperatorId> = eligible
        .iter()
        .filter(|op| links.get(*op).is_none_or(|l| l.congestion.is_off_peak(start)))
        .cloned()
        .collect();
    participants.sort();
    participants.dedup();
    let plan = RoundPlan {
        round_id,
        base_version: model.version,
        participants,
        start,
        deadline: start + cfg.deadline_ms,
        dp: cfg.dp,
        masking: cfg.masking,
    };
    plan.validate()?;
    Ok(plan)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `delta` down to L2 norm `clip` when it exceeds it.
pub fn clip_update(delta: &[f64], clip: f64) -> Result<Vec<f64>, FederationError> {
    if !(clip > 0.0) || !clip.is_finite() {
        return Err(FederationError::InvalidClip(clip));
    }
    let norm = l2_norm(delta);
    if norm <= clip {
        return Ok(delta.to_vec());
    }
    let factor = clip / norm;
    Ok(delta.iter().map(|x| x * factor).collect())
}

/// Adds independent `N(0, (sigma·clip)²)` noise to each coordinate from a seeded stream.
pub fn add_dp_noise(delta: &[f64], sigma: f64, clip: f64, seed: u64) -> Result<Vec<f64>, FederationError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(FederationError::InvalidSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(delta.to_vec());
    }
    let std = sigma * clip;
    let mut rng = SeedStream::new(seed);
    Ok(delta.iter().map(|x| x + std * rng.gaussian()).collect())
}

/// `q_i = round(delta_i · sample_count · 2^24)`.
pub fn quantize(delta: &[f64], sample_count: u64) -> Result<Vec<i64>, FederationError> {
    if sample_count == 0 {
        return Err(FederationError::ZeroSamples);
    }
    let n = sample_count as f64;
    delta
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            let weighted = value * n;
            if !weighted.is_finite() || weighted.abs() >= RANGE_BOUND {
                return Err(FederationError::RangeOverflow { index, value, count: sample_count });
            }
            Ok((weighted * SCALE).round() as i64)
        })
        .collect()
}

pub fn dequantize(q: &[i64], total_samples: u64) -> Vec<f64> {
    let denom = SCALE * total_samples as f64;
    q.iter().map(|v| *v as f64 / denom).collect()
}

/// One shared seed per unordered participant pair, keyed `(lower, higher)`.
pub type PairwiseSeeds = BTreeMap<(OperatorId, OperatorId), u64>;

fn pair_key(a: &OperatorId, b: &OperatorId) -> (OperatorId, OperatorId) {
    if a < b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

/// Derives the pairwise seeds of a participant set from a round seed.
pub fn derive_pairwise_seeds(round_seed: u64, participants: &[OperatorId]) -> PairwiseSeeds {
    let mut seeds = PairwiseSeeds::new();
    for (i, a) in participants.iter().enumerate() {
        for b in &participants[i + 1..] {
            let key = pair_key(a, b);
            let label = format!("mask/{}/{}", key.0, key.1);
            seeds.insert(key, derive_seed(round_seed, &label, 0));
        }
    }
    seeds
}

fn mask_stream(seed: u64, len: usize) -> impl Iterator<Item = i64> {
    let mut rng = SeedStream::new(seed);
    (0..len).map(move |_| rng.next_u64() as i64)
}

/// `q + Σ_{j > me} PRG(seed_{me,j}) − Σ_{j < me} PRG(seed_{j,me})`, wrapping modulo 2^64.
pub fn mask_update(
    q: &[i64],
    me: &OperatorId,
    participants: &[OperatorId],
    seeds: &PairwiseSeeds,
) -> Result<Vec<i64>, FederationError> {
    if participants.len() < 2 {
        return Err(FederationError::MaskingUnavailable(participants.len()));
    }
    if !participants.contains(me) {
        return Err(FederationError::NotParticipant(me.clone()));
    }
    let mut out = q.to_vec();
    for other in participants.iter().filter(|p| *p != me) {
        let key = pair_key(me, other);
        let seed = *seeds.get(&key).ok_or_else(|| FederationError::MissingSeed(key.0.clone(), key.1.clone()))?;
        let add = me < other;
        for (o, m) in out.iter_mut().zip(mask_stream(seed, q.len())) {
            *o = if add { o.wrapping_add(m) } else { o.wrapping_sub(m) };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelUpdate {
    pub round_id: u64,
    pub base_version: u64,
    pub operator: OperatorId,
    /// Fixed-point, sample-weighted delta; masked when `masked` is set.
    pub vector: Vec<i64>,
    pub sample_count: u64,
    /// Digest of the transmitted vector.
    pub commitment: Digest,
    pub masked: bool,
}

pub fn commit(vector: &[i64]) -> Digest {
    vector.canonical_digest()
}

impl ModelUpdate {
    pub fn new(round_id: u64, base_version: u64, operator: OperatorId, vector: Vec<i64>, sample_count: u64, masked: bool) -> Self {
        let commitment = commit(&vector);
        Self { round_id, base_version, operator, vector, sample_count, commitment, masked }
    }

    pub fn commitment_valid(&self) -> bool {
        commit(&self.vector) == self.commitment
    }
}

impl Canonical for ModelUpdate {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.round_id)
            .u64(self.base_version)
            .str(self.operator.as_str())
            .digest(&self.commitment)
            .u64(self.sample_count)
            .bool(self.masked);
    }
}

/// Wrapping sum of the update vectors, dequantized by the total sample count and added to the
/// base weights.
pub fn aggregate(updates: &[ModelUpdate], base: &GlobalModel) -> Result<GlobalModel, FederationError> {
    let first = updates.first().ok_or(FederationError::EmptyUpdates)?;
    let dim = base.weights.len();
    let mut seen = BTreeSet::new();
    for u in updates {
        if u.round_id != first.round_id || u.base_version != base.version {
            return Err(FederationError::MixedRounds);
        }
        if u.masked != first.masked {
            return Err(FederationError::MixedMasking);
        }
        if u.vector.len() != dim {
            return Err(FederationError::DimensionMismatch { expected: dim, got: u.vector.len() });
        }
        if u.sample_count == 0 {
            return Err(FederationError::ZeroSamples);
        }
        if !u.commitment_valid() {
            return Err(FederationError::BadCommitment(u.operator.clone()));
        }
        if !seen.insert(&u.operator) {
            return Err(FederationError::DuplicateUpdate(u.operator.clone()));
        }
    }
    let mut sum = vec![0i64; dim];
    for u in updates {
        for (s, v) in sum.iter_mut().zip(&u.vector) {
            *s = s.wrapping_add(*v);
        }
    }
    let total: u64 = updates.iter().map(|u| u.sample_count).sum();
    let delta = dequantize(&sum, total);
    Ok(GlobalModel {
        version: base.version + 1,
        weights: base.weights.iter().zip(delta).map(|(w, d)| w + d).collect(),
        lineage: Some(Lineage { previous_version: base.version, round_id: first.round_id }),
    })
}

/// Normalized leave-one-out scores given the full-set loss and each operator's loss without
/// it. A sole contributor scores 1.
pub fn normalize_scores(full_loss: f64, without: &BTreeMap<OperatorId, f64>) -> BTreeMap<OperatorId, f64> {
    if without.len() == 1 {
        return without.keys().map(|k| (k.clone(), 1.0)).collect();
    }
    let raw: BTreeMap<OperatorId, f64> = without
        .iter()
        .map(|(op, loss)| {
            let s = (loss - full_loss).max(0.0);
            (op.clone(), if s.is_finite() { s } else { 0.0 })
        })
        .collect();
    let total: f64 = raw.values().sum();
    if total > 0.0 {
        raw.into_iter().map(|(k, v)| (k, v / total)).collect()
    } else {
        raw.into_keys().map(|k| (k, 0.0)).collect()
    }
}

/// Leave-one-out attribution over unmasked updates:
/// `score_o = max(0, Loss(aggregate without o) − Loss(aggregate with all))`, normalized.
pub fn score_contributions(
    updates: &[ModelUpdate],
    base: &GlobalModel,
    eval: &[(f64, f64)],
) -> Result<BTreeMap<OperatorId, f64>, FederationError> {
    if updates.is_empty() {
        return Err(FederationError::EmptyUpdates);
    }
    if updates.iter().any(|u| u.masked) {
        return Err(FederationError::MixedMasking);
    }
    let full = aggregate(updates, base)?.loss(eval)?;
    let mut without = BTreeMap::new();
    for (i, u) in updates.iter().enumerate() {
        let rest: Vec<ModelUpdate> =
            updates.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, u)| u.clone()).collect();
        let loss = if rest.is_empty() { f64::INFINITY } else { aggregate(&rest, base)?.loss(eval)? };
        without.insert(u.operator.clone(), loss);
    }
    Ok(normalize_scores(full, &without))
}

/// Private state of one round participant.
#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub data: Vec<(f64, f64)>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub link: LinkSpec,
}

/// Clipped, noised and quantized update of one participant, before masking.
pub fn prepare_update(
    plan: &RoundPlan,
    base: &GlobalModel,
    participant: &Participant,
    noise_seed: u64,
) -> Result<(Vec<i64>, u64), FederationError> {
    let [w, b] = base.linear()?;
    let start = LocalModel { weights: [w, b], base_version: base.version };
    let (trained, _) = local_train(&start, &participant.data, participant.epochs, participant.learning_rate)?;
    let delta = [trained.weights[0] - w, trained.weights[1] - b];
    let clipped = clip_update(&delta, plan.dp.clip)?;
    let noised = add_dp_noise(&clipped, plan.dp.sigma, plan.dp.clip, noise_seed)?;
    let count = participant.data.len() as u64;
    Ok((quantize(&noised, count)?, count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_id: u64,
    pub base_version: u64,
    pub start: Timestamp,
    pub deadline: Timestamp,
    pub participants: Vec<OperatorId>,
    pub received: Vec<OperatorId>,
    pub masked: bool,
    pub aborted: bool,
    pub abort_reason: Option<String>,
    pub model_version: u64,
    pub model_digest: Digest,
    pub loss_before: f64,
    pub loss_after: f64,
    pub attribution: BTreeMap<OperatorId, f64>,
    pub commitments: BTreeMap<OperatorId, Digest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub model: GlobalModel,
    pub record: RoundRecord,
    /// Vectors as received by the coordinator.
    pub received: Vec<ModelUpdate>,
}

/// Shared handles for running a round.
pub struct RoundEnv<'a> {
    pub sim: &'a mut SimNet,
    pub ledger: &'a mut Ledger,
    pub signer: &'a Signer,
    /// Seed for noise and mask derivation.
    pub seed: u64,
    /// Participants that fail to send this round.
    pub dropouts: &'a BTreeSet<OperatorId>,
}

/// Size of a serialized update on the wire: 8 bytes per coordinate plus a 96-byte header.
pub fn update_size(dim: usize) -> u64 {
    8 * dim as u64 + 96
}

/// Runs one federated round through the simulator.
///
/// The simulator clock is advanced to the plan's start and then to its deadline; updates that
/// arrive later are ignored. Masked rounds abort unless every participant's update arrives;
/// unmasked rounds proceed with the received subset. Attribution in masked rounds is computed
/// from re-masked aggregates of each leave-one-out subset.
pub fn run_round(
    plan: &RoundPlan,
    base: &GlobalModel,
    participants: &BTreeMap<OperatorId, Participant>,
    eval: &[(f64, f64)],
    env: RoundEnv<'_>,
) -> Result<RoundOutcome, FederationError> {
    plan.validate()?;
    if plan.base_version != base.version {
        return Err(FederationError::MixedRounds);
    }
    let RoundEnv { sim, ledger, signer, seed, dropouts } = env;
    sim.run_until(plan.start);
    ledger.append(&plan.canonical_bytes(), EntryType::RoundStart, signer, sim.now())?;

    let mut raw: BTreeMap<OperatorId, (Vec<i64>, u64)> = BTreeMap::new();
    for (i, op) in plan.participants.iter().enumerate() {
        let p = participants.get(op).ok_or_else(|| FederationError::MissingData(op.clone()))?;
        let noise_seed = derive_seed(seed, &format!("dp/{}/{op}", plan.round_id), i as u64);
        raw.insert(op.clone(), prepare_update(plan, base, p, noise_seed)?);
    }
    let mask_seed = derive_seed(seed, "mask-round", plan.round_id);
    let seeds = if plan.masking { derive_pairwise_seeds(mask_seed, &plan.participants) } else { PairwiseSeeds::new() };

    let mut in_flight: BTreeMap<u64, ModelUpdate> = BTreeMap::new();
    for op in &plan.participants {
        if dropouts.contains(op) {
            continue;
        }
        let (q, count) = &raw[op];
        let vector = if plan.masking { mask_update(q, op, &plan.participants, &seeds)? } else { q.clone() };
        let update = ModelUpdate::new(plan.round_id, base.version, op.clone(), vector, *count, plan.masking);
        let msg = SimMessage {
            src: Endpoint::operator(op),
            dst: Endpoint::Coordinator,
            kind: MessageKind::ModelUpdate,
            size_bytes: update_size(update.vector.len()),
            digest: update.commitment,
        };
        if let SendOutcome::Scheduled { id, .. } = sim.send(msg, &participants[op].link)? {
            in_flight.insert(id.0, update);
        }
    }

    let mut received = Vec::new();
    for event in sim.run_until(plan.deadline) {
        if let EventPayload::Deliver(_) = event.payload {
            if let Some(update) = in_flight.remove(&event.id.0) {
                received.push(update);
            }
        }
    }
    received.sort_by(|a, b| a.operator.cmp(&b.operator));
    let now = sim.now();
    for u in &received {
        ledger.append(&u.canonical_bytes(), EntryType::UpdateCommitment, signer, now)?;
    }

    let loss_before = base.loss(eval)?;
    let received_ops: Vec<OperatorId> = received.iter().map(|u| u.operator.clone()).collect();
    let commitments = received.iter().map(|u| (u.operator.clone(), u.commitment)).collect();
    let missing: Vec<&OperatorId> = plan.participants.iter().filter(|p| !received_ops.contains(p)).collect();
    let abort_reason = if received.is_empty() {
        Some("no update arrived before the deadline".to_string())
    } else if plan.masking && !missing.is_empty() {
        let names: Vec<String> = missing.iter().map(|m| m.to_string()).collect();
        Some(format!("masked round missing updates from {}", names.join(", ")))
    } else {
        None
    };

    if let Some(reason) = abort_reason {
        let mut enc = Encoder::new();
        enc.u64(plan.round_id).str(&reason).digest(&base.digest());
        ledger.append(enc.as_slice(), EntryType::RoundAbort, signer, now)?;
        let record = RoundRecord {
            round_id: plan.round_id,
            base_version: base.version,
            start: plan.start,
            deadline: plan.deadline,
            participants: plan.participants.clone(),
            received: received_ops,
            masked: plan.masking,
            aborted: true,
            abort_reason: Some(reason),
            model_version: base.version,
            model_digest: base.digest(),
            loss_before,
            loss_after: loss_before,
            attribution: BTreeMap::new(),
            commitments,
        };
        return Ok(RoundOutcome { model: base.clone(), record, received });
    }

    let model = aggregate(&received, base)?;
    let loss_after = model.loss(eval)?;
    let attribution = if plan.masking {
        let mut without = BTreeMap::new();
        for left_out in &received_ops {
            let subset: Vec<OperatorId> = received_ops.iter().filter(|o| *o != left_out).cloned().collect();
            let subset_seeds = derive_pairwise_seeds(derive_seed(mask_seed, &format!("loo/{left_out}"), 0), &subset);
            let mut updates = Vec::new();
            for op in &subset {
                let (q, count) = &raw[op];
                let vector =
                    if subset.len() >= 2 { mask_update(q, op, &subset, &subset_seeds)? } else { q.clone() };
                updates.push(ModelUpdate::new(plan.round_id, base.version, op.clone(), vector, *count, subset.len() >= 2));
            }
            without.insert(left_out.clone(), aggregate(&updates, base)?.loss(eval)?);
        }
        normalize_scores(loss_after, &without)
    } else {
        score_contributions(&received, base, eval)?
    };

    let mut enc = Encoder::new();
    enc.u64(plan.round_id).u64(model.version).digest(&model.digest());
    ledger.append(enc.as_slice(), EntryType::RoundResult, signer, now)?;
    let record = RoundRecord {
        round_id: plan.round_id,
        base_version: base.version,
        start: plan.start,
        deadline: plan.deadline,
        participants: plan.participants.clone(),
        received: received_ops,
        masked: plan.masking,
        aborted: false,
        abort_reason: None,
        model_version: model.version,
        model_digest: model.digest(),
        loss_before,
        loss_after,
        attribution,
        commitments,
    };
    Ok(RoundOutcome { model, record, received })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn op(s: &str) -> OperatorId {
        OperatorId::new(s).unwrap()
    }

    fn ops(n: usize) -> Vec<OperatorId> {
        (0..n).map(|i| op(&format!("op{i}"))).collect()
    }

    fn cfg(masking: bool) -> RoundConfig {
        RoundConfig { dp: DpConfig { clip: 10.0, sigma: 0.0 }, masking, deadline_ms: 10_000, lookahead_ms: 3_600_000 }
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_update(&[3.0, 4.0], 10.0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(clip_update(&[3.0, 4.0], 5.0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(clip_update(&[6.0, 8.0], 5.0).unwrap(), vec![3.0, 4.0]);
        assert!(clip_update(&[1.0], 0.0).is_err());
    }

    #[test]
    fn noise_identity_and_determinism() {
        let d = [1.0, -2.0, 3.5];
        assert_eq!(add_dp_noise(&d, 0.0, 1.0, 9).unwrap(), d.to_vec());
        assert_eq!(add_dp_noise(&d, 1.0, 1.0, 9).unwrap(), add_dp_noise(&d, 1.0, 1.0, 9).unwrap());
        assert_ne!(add_dp_noise(&d, 1.0, 1.0, 9).unwrap(), add_dp_noise(&d, 1.0, 1.0, 10).unwrap());
    }

    #[test]
    fn noise_std_matches_sigma() {
        let zeros = vec![0.0; 10_000];
        let noised = add_dp_noise(&zeros, 1.0, 1.0, 2024).unwrap();
        let mean = noised.iter().sum::<f64>() / noised.len() as f64;
        let var = noised.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (noised.len() - 1) as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.05);
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.0], 7).unwrap(), vec![0]);
        assert_eq!(quantize(&[1.0], 1).unwrap(), vec![16_777_216]);
        assert!(quantize(&[RANGE_BOUND], 1).is_err());
        assert!(quantize(&[1.0], 0).is_err());
    }

    #[test]
    fn masking_requires_two() {
        let p = ops(1);
        assert!(matches!(
            mask_update(&[1], &p[0], &p, &PairwiseSeeds::new()),
            Err(FederationError::MaskingUnavailable(1))
        ));
    }

    #[test]
    fn two_party_masks_cancel() {
        let p = ops(2);
        let seeds = derive_pairwise_seeds(5, &p);
        let a = mask_update(&[10, -3], &p[0], &p, &seeds).unwrap();
        let b = mask_update(&[7, 4], &p[1], &p, &seeds).unwrap();
        assert_eq!(a[0].wrapping_add(b[0]), 17);
        assert_eq!(a[1].wrapping_add(b[1]), 1);
        assert_ne!(a, vec![10, -3]);
    }

    fn update(round: u64, o: &str, delta: &[f64], n: u64) -> ModelUpdate {
        ModelUpdate::new(round, 0, op(o), quantize(delta, n).unwrap(), n, false)
    }

    #[test]
    fn aggregate_examples() {
        let base = GlobalModel::initial(vec![1.0]);
        let same: Vec<ModelUpdate> = ["a", "b", "c"].iter().map(|o| update(1, o, &[0.5], 2)).collect();
        let m = aggregate(&same, &base).unwrap();
        assert_eq!(m.weights, vec![1.5]);
        assert_eq!(m.version, 1);
        assert_eq!(m.lineage, Some(Lineage { previous_version: 0, round_id: 1 }));

        let base = GlobalModel::initial(vec![0.0]);
        let m = aggregate(&[update(1, "a", &[0.0], 1), update(1, "b", &[4.0], 3)], &base).unwrap();
        assert_eq!(m.weights, vec![3.0]);

        assert!(matches!(
            aggregate(&[update(1, "a", &[0.0], 1), update(2, "b", &[0.0], 1)], &base),
            Err(FederationError::MixedRounds)
        ));
        let mut masked = update(1, "b", &[0.0], 1);
        masked.masked = true;
        assert!(matches!(
            aggregate(&[update(1, "a", &[0.0], 1), masked], &base),
            Err(FederationError::MixedMasking)
        ));
        assert!(matches!(aggregate(&[], &base), Err(FederationError::EmptyUpdates)));
    }

    #[test]
    fn schedule_rules() {
        let empty = CongestionSchedule::default();
        assert_eq!(empty.next_off_peak(123), 123);
        let s = CongestionSchedule::new(vec![
            CongestionWindow { start: 0, end: 600_000, multiplier: 2.0 },
            CongestionWindow { start: 600_000, end: 700_000, multiplier: 3.0 },
        ])
        .unwrap();
        assert_eq!(s.next_off_peak(5), 700_000);
        let single = CongestionSchedule::new(vec![CongestionWindow { start: 0, end: 600_000, multiplier: 2.0 }]).unwrap();
        assert_eq!(single.next_off_peak(100), 600_000);
        assert!(CongestionSchedule::new(vec![
            CongestionWindow { start: 10, end: 20, multiplier: 2.0 },
            CongestionWindow { start: 15, end: 30, multiplier: 2.0 },
        ])
        .is_err());
        assert!(CongestionSchedule::new(vec![CongestionWindow { start: 0, end: 5, multiplier: 0.5 }]).is_err());
    }

    #[test]
    fn plan_round_rules() {
        let model = GlobalModel::initial(vec![0.0, 0.0]);
        let p = ops(3);
        let links = BTreeMap::new();
        let plan = plan_round(1, &model, &p, &CongestionSchedule::default(), &links, 42, &cfg(true)).unwrap();
        assert_eq!(plan.start, 42);
        assert_eq!(plan.deadline, 10_042);
        let sched = CongestionSchedule::new(vec![CongestionWindow { start: 0, end: 600_000, multiplier: 2.0 }]).unwrap();
        assert_eq!(plan_round(1, &model, &p, &sched, &links, 100, &cfg(true)).unwrap().start, 600_000);
        let short = RoundConfig { lookahead_ms: 1000, ..cfg(true) };
        assert!(matches!(
            plan_round(1, &model, &p, &sched, &links, 100, &short),
            Err(FederationError::NoOffPeakWindow { .. })
        ));
        assert!(matches!(
            plan_round(1, &model, &[], &CongestionSchedule::default(), &links, 0, &cfg(false)),
            Err(FederationError::NoParticipants)
        ));

        // A participant whose link is congested at the start is excluded.
        let mut links = BTreeMap::new();
        let mut busy = LinkSpec::new(1.0, 10.0);
        busy.congestion = CongestionSchedule::new(vec![CongestionWindow { start: 0, end: 1000, multiplier: 4.0 }]).unwrap();
        links.insert(p[1].clone(), busy);
        let plan = plan_round(1, &model, &p, &CongestionSchedule::default(), &links, 0, &cfg(false)).unwrap();
        assert_eq!(plan.participants, vec![p[0].clone(), p[2].clone()]);
        let two = &p[..2];
        assert!(matches!(
            plan_round(1, &model, two, &CongestionSchedule::default(), &links, 0, &cfg(true)),
            Err(FederationError::MaskingUnavailable(1))
        ));
    }

    #[test]
    fn attribution_conventions() {
        let base = GlobalModel::initial(vec![0.0, 0.0]);
        let eval: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 / 10.0, 3.0 * i as f64 / 10.0)).collect();
        let sole = score_contributions(&[update(1, "a", &[1.0, 0.0], 5)], &base, &eval).unwrap();
        assert_eq!(sole[&op("a")], 1.0);

        let twins = [update(1, "a", &[2.0, 0.0], 5), update(1, "b", &[2.0, 0.0], 5)];
        let s = score_contributions(&twins, &base, &eval).unwrap();
        assert_eq!(s[&op("a")], s[&op("b")]);

        // Removing the zero update makes the remaining average better, so it earns nothing.
        let with_zero = [update(1, "a", &[3.0, 0.0], 5), update(1, "z", &[0.0, 0.0], 5)];
        let s = score_contributions(&with_zero, &base, &eval).unwrap();
        assert_eq!(s[&op("z")], 0.0);
        assert_eq!(s[&op("a")], 1.0);
        assert!(score_contributions(&[], &base, &eval).is_err());
    }

    fn participants(n: usize, seed: u64) -> BTreeMap<OperatorId, Participant> {
        let mut rng = SeedStream::new(seed);
        ops(n)
            .into_iter()
            .map(|o| {
                let data = (0..30)
                    .map(|_| {
                        let x = 2.0 * rng.uniform() - 1.0;
                        (x, 3.0 * x + 0.1 * rng.gaussian())
                    })
                    .collect();
                (o, Participant { data, epochs: 10, learning_rate: 0.2, link: LinkSpec::new(20.0, 100.0) })
            })
            .collect()
    }

    fn eval_set() -> Vec<(f64, f64)> {
        (0..41).map(|i| {
            let x = i as f64 / 20.0 - 1.0;
            (x, 3.0 * x)
        }).collect()
    }

    fn round(masking: bool, dropouts: &BTreeSet<OperatorId>) -> (RoundOutcome, Ledger) {
        let parts = participants(3, 11);
        let base = GlobalModel::initial(vec![0.0, 0.0]);
        let names: Vec<OperatorId> = parts.keys().cloned().collect();
        let plan = plan_round(1, &base, &names, &CongestionSchedule::default(), &BTreeMap::new(), 0, &cfg(masking)).unwrap();
        let mut sim = SimNet::new();
        let mut ledger = Ledger::new();
        let signer = Signer::derive("coordinator", 1);
        let env = RoundEnv { sim: &mut sim, ledger: &mut ledger, signer: &signer, seed: 77, dropouts };
        (run_round(&plan, &base, &parts, &eval_set(), env).unwrap(), ledger)
    }

    #[test]
    fn masked_and_unmasked_rounds_agree() {
        let (masked, _) = round(true, &BTreeSet::new());
        let (plain, _) = round(false, &BTreeSet::new());
        for (a, b) in masked.model.weights.iter().zip(&plain.model.weights) {
            assert!((a - b).abs() <= 2f64.powi(-20));
        }
        assert!(masked.record.loss_after < masked.record.loss_before);
        let sum: f64 = masked.record.attribution.values().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_dropout_aborts() {
        let dropped: BTreeSet<OperatorId> = [op("op1")].into();
        let (outcome, ledger) = round(true, &dropped);
        assert!(outcome.record.aborted);
        assert_eq!(outcome.model, GlobalModel::initial(vec![0.0, 0.0]));
        assert_eq!(ledger.count(EntryType::RoundAbort), 1);
        assert_eq!(ledger.count(EntryType::RoundResult), 0);

        let (plain, ledger) = round(false, &dropped);
        assert!(!plain.record.aborted);
        assert_eq!(plain.record.received.len(), 2);
        assert_eq!(ledger.count(EntryType::UpdateCommitment), 2);
    }

    #[test]
    fn late_updates_miss_the_deadline() {
        let mut parts = participants(2, 3);
        parts.get_mut(&op("op1")).unwrap().link = LinkSpec::new(20_000.0, 100.0);
        let base = GlobalModel::initial(vec![0.0, 0.0]);
        let names: Vec<OperatorId> = parts.keys().cloned().collect();
        let plan = plan_round(1, &base, &names, &CongestionSchedule::default(), &BTreeMap::new(), 0, &cfg(false)).unwrap();
        let mut sim = SimNet::new();
        let mut ledger = Ledger::new();
        let signer = Signer::derive("coordinator", 1);
        let none = BTreeSet::new();
        let env = RoundEnv { sim: &mut sim, ledger: &mut ledger, signer: &signer, seed: 1, dropouts: &none };
        let out = run_round(&plan, &base, &parts, &eval_set(), env).unwrap();
        assert_eq!(out.record.received, vec![op("op0")]);
    }

    proptest! {
        #[test]
        fn masks_cancel(n in 2usize..7, len in 1usize..65, seed in any::<u64>()) {
            let p = ops(n);
            let seeds = derive_pairwise_seeds(seed, &p);
            let mut rng = SeedStream::new(seed ^ 0xabcdef);
            let raw: Vec<Vec<i64>> = (0..n).map(|_| (0..len).map(|_| rng.next_u64() as i64 >> 20).collect()).collect();
            let mut masked_sum = vec![0i64; len];
            let mut raw_sum = vec![0i64; len];
            for (i, q) in raw.iter().enumerate() {
                let m = mask_update(q, &p[i], &p, &seeds).unwrap();
                prop_assert_ne!(&m, q);
                for k in 0..len {
                    masked_sum[k] = masked_sum[k].wrapping_add(m[k]);
                    raw_sum[k] = raw_sum[k].wrapping_add(q[k]);
                }
            }
            prop_assert_eq!(masked_sum, raw_sum);
        }

        #[test]
        fn clip_bound_holds(v in prop::collection::vec(-1e6f64..1e6, 1..20), c in 1e-3f64..1e3) {
            prop_assert!(l2_norm(&clip_update(&v, c).unwrap()) <= c + 1e-9);
        }

        #[test]
        fn quantize_round_trip(v in prop::collection::vec(-100.0f64..100.0, 1..20), n in 1u64..1000) {
            let back = dequantize(&quantize(&v, n).unwrap(), n);
            for (a, b) in v.iter().zip(back) {
                prop_assert!((a - b).abs() <= 2f64.powi(-24) / n as f64 + 1e-12);
            }
        }

        #[test]
        fn aggregation_permutation_invariant(
            deltas in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), 1u64..50), 1..6),
            rot in 0usize..6,
        ) {
            let base = GlobalModel::initial(vec![0.5, -0.5, 1.0]);
            let updates: Vec<ModelUpdate> = deltas.iter().enumerate()
                .map(|(i, (d, n))| ModelUpdate::new(3, 0, op(&format!("o{i}")), quantize(d, *n).unwrap(), *n, false))
                .collect();
            let mut rotated = updates.clone();
            rotated.rotate_left(rot % updates.len());
            let a = aggregate(&updates, &base).unwrap();
            let b = aggregate(&rotated, &base).unwrap();
            prop_assert_eq!(a.canonical_bytes(), b.canonical_bytes());
            prop_assert_eq!(a.version, 1);
            if updates.len() == 1 {
                let d = dequantize(&updates[0].vector, updates[0].sample_count);
                for k in 0..3 {
                    prop_assert_eq!(a.weights[k], base.weights[k] + d[k]);
                }
            }
        }

        #[test]
        fn attribution_symmetric(
            a in prop::collection::vec(-3.0f64..3.0, 2), b in prop::collection::vec(-3.0f64..3.0, 2),
            c in prop::collection::vec(-3.0f64..3.0, 2), na in 1u64..20, nb in 1u64..20,
        ) {
            let base = GlobalModel::initial(vec![0.0, 0.0]);
            let eval = eval_set();
            let mk = |o: &str, d: &[f64], n: u64| ModelUpdate::new(1, 0, op(o), quantize(d, n).unwrap(), n, false);
            let s1 = score_contributions(&[mk("x", &a, na), mk("y", &b, nb), mk("z", &c, 5)], &base, &eval).unwrap();
            let s2 = score_contributions(&[mk("x", &b, nb), mk("y", &a, na), mk("z", &c, 5)], &base, &eval).unwrap();
            prop_assert!((s1[&op("x")] - s2[&op("y")]).abs() < 1e-12);
            prop_assert!((s1[&op("y")] - s2[&op("x")]).abs() < 1e-12);
            prop_assert!(s1.values().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
