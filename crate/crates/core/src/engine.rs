//! The per-problem closed loop: sense, route, execute, verify and, on
//! failure, trace back to a root cause and re-execute from there.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{calibrate, CalibrationParams, CalibrationState};
use crate::correcting::{asymmetric_calibrate, influence, localize_root_cause};
use crate::error::CoreError;
use crate::graph::{DependencyGraph, Edge, NodeRisk};
use crate::providers::{
    fnv1a, mix_seed, EmbedRequest, ProviderError, Providers, RefinementNote, Sample, SamplerRequest, StepContext,
    VerifyRequest,
};
use crate::regulating::{
    adaptive_thresholds, branch_count, compound_risk, consensus_select, route, slot_risk, BranchCandidate,
    CandidateOrigin, Consensus,
};
use crate::sensing::{
    activation_frequencies, adaptive_similarity_threshold_from, cluster_embeddings, cosine,
    extract_complexity_features, propagate_risk, semantic_entropy,
};
use crate::trace::{
    CalibrationSnapshot, CandidateTrace, KRule, Outcome, RefinementTrace, StageTimings, TraceEdge, TraceParams,
    TraceRecord, UsageSnapshot, UNSENSED_UNCERTAINTY,
};
use crate::types::{BudgetLedger, CallKind, Mode, ProblemSpec, RecoveryMode, RunResult, Unit, Verdict};

/// Sampling temperature for Monte Carlo and branch candidates.
pub const SAMPLING_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub n: usize,
    pub tau_sim: f64,
    pub lambda: f64,
    pub beta: f64,
    pub alpha: f64,
    pub tau_slot: f64,
    pub kappa: f64,
    pub k_max: usize,
    pub tau_enf: f64,
    pub r: usize,
    pub delta: usize,
    pub tau_l: f64,
    pub tau_h: f64,
    pub theta_acc: f64,
    pub eta: f64,
    pub budget: u64,
    /// Caps the problem's own horizon when set.
    pub horizon: Option<usize>,
    pub parallelism: usize,
    pub seed: u64,
    pub initial_temperature: f64,
    pub window: usize,
    pub min_bucket: usize,
    pub disable_sensing: bool,
    pub disable_branching: bool,
    pub disable_refinement: bool,
    pub disable_calibration: bool,
    pub fixed_k: Option<usize>,
    pub recovery_mode: RecoveryMode,
    pub record_timings: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            n: 5,
            tau_sim: 0.85,
            lambda: 0.5,
            beta: 0.3,
            alpha: 0.6,
            tau_slot: 0.4,
            kappa: 3.0,
            k_max: 7,
            tau_enf: 0.5,
            r: 2,
            delta: 20,
            tau_l: 0.3,
            tau_h: 0.7,
            theta_acc: 0.7,
            eta: 0.6,
            budget: 200,
            horizon: None,
            parallelism: 4,
            seed: 0,
            initial_temperature: 1.0,
            window: 200,
            min_bucket: 5,
            disable_sensing: false,
            disable_branching: false,
            disable_refinement: false,
            disable_calibration: false,
            fixed_k: None,
            recovery_mode: RecoveryMode::RootCause,
            record_timings: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |m: &str| Err(CoreError::InvalidInput(m.to_string()));
        let unit = [
            ("tau_sim", self.tau_sim),
            ("alpha", self.alpha),
            ("tau_slot", self.tau_slot),
            ("tau_enf", self.tau_enf),
            ("tau_l", self.tau_l),
            ("tau_h", self.tau_h),
            ("theta_acc", self.theta_acc),
            ("eta", self.eta),
        ];
        for (name, v) in unit {
            Unit::checked(name, v)?;
        }
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if !(self.tau_sim > 0.0 && self.tau_sim < 1.0) {
            return bad("tau_sim must lie in (0, 1)");
        }
        if !(self.lambda >= 0.0 && self.beta >= 0.0 && self.kappa > 0.0) {
            return bad("lambda, beta must be non-negative and kappa positive");
        }
        if self.k_max < 2 {
            return bad("k_max must be at least 2");
        }
        if self.fixed_k == Some(0) {
            return bad("fixed_k must be positive");
        }
        if self.delta == 0 || self.parallelism == 0 {
            return bad("delta and parallelism must be positive");
        }
        if self.horizon == Some(0) {
            return bad("horizon must be positive");
        }
        if !(0.5..=2.0).contains(&self.initial_temperature) {
            return bad("initial_temperature must lie in [0.5, 2]");
        }
        Ok(())
    }

    pub fn calibration_params(&self) -> CalibrationParams {
        CalibrationParams {
            capacity: self.window,
            update_interval: self.delta,
            tau_low: self.tau_l,
            tau_high: self.tau_h,
            theta_acc: self.theta_acc,
            min_bucket: self.min_bucket,
        }
    }

    fn trace_params(&self) -> TraceParams {
        TraceParams {
            lambda: self.lambda,
            beta: self.beta,
            alpha: self.alpha,
            tau_slot: self.tau_slot,
            kappa: self.kappa,
            k_max: self.k_max,
        }
    }
}

/// State carried across the problems of one stream: the calibration
/// temperature and the confidence history that drives the thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    pub calibration: CalibrationState,
    pub history: Vec<f64>,
}

impl StreamState {
    pub fn new(config: &EngineConfig) -> Self {
        let t0 = if config.disable_calibration {
            1.0
        } else {
            config.initial_temperature
        };
        StreamState {
            calibration: CalibrationState::new(config.calibration_params(), t0),
            history: Vec::new(),
        }
    }

    /// Fresh calibration window and history.
    pub fn reset(&mut self, config: &EngineConfig) {
        *self = Self::new(config);
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("provider failure: {source}")]
    Provider {
        source: ProviderError,
        trace: Vec<TraceRecord>,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub result: RunResult,
    pub trace: Vec<TraceRecord>,
}

struct LiveStep {
    step_id: usize,
    output: String,
}

enum Stop {
    Budget,
    Provider(ProviderError),
    Core(CoreError),
}

impl From<ProviderError> for Stop {
    fn from(e: ProviderError) -> Self {
        Stop::Provider(e)
    }
}

impl From<CoreError> for Stop {
    fn from(e: CoreError) -> Self {
        Stop::Core(e)
    }
}

/// Runs `f` over `items` with at most `limit` in flight, preserving order.
fn parallel_map<T: Sync, R: Send>(items: &[T], limit: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if limit <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(limit) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|it| s.spawn(|| f(it))).collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("worker thread panicked")));
        });
    }
    out
}

struct Run<'a> {
    problem: &'a ProblemSpec,
    cfg: &'a EngineConfig,
    providers: Providers<'a>,
    run_id: &'a str,
    horizon: usize,
    tau_sim: f64,
    temperature: f64,
    stream: &'a mut StreamState,
    ledger: BudgetLedger,
    graph: DependencyGraph,
    live: BTreeMap<usize, LiveStep>,
    position_of: BTreeMap<usize, usize>,
    next_step_id: usize,
    avoid: BTreeMap<usize, Vec<String>>,
    failed_outputs: BTreeMap<usize, BTreeSet<String>>,
    chosen_roots: BTreeSet<usize>,
    forced: BTreeSet<usize>,
    supersedes: BTreeMap<usize, usize>,
    notes: BTreeMap<usize, RefinementNote>,
    refinements: usize,
    terminal_results: Vec<(Verdict, f64, String)>,
    last_raw_u: Option<f64>,
    records: Vec<TraceRecord>,
}

struct Sensed {
    samples: Vec<Sample>,
    embeddings: Vec<Vec<f64>>,
    clusters: Vec<Vec<usize>>,
    u: f64,
    slots: Vec<(String, f64)>,
    edges: Vec<Edge>,
}

impl<'a> Run<'a> {
    fn seed(&self, parts: &[u64]) -> u64 {
        let mut all = vec![self.cfg.seed, fnv1a(self.problem.id.as_bytes())];
        all.extend_from_slice(parts);
        mix_seed(&all)
    }

    fn usage(&self) -> UsageSnapshot {
        UsageSnapshot {
            sampler_calls: self.ledger.sampler_calls,
            verifier_calls: self.ledger.verifier_calls,
            embed_calls: self.ledger.embed_calls,
            usage: self.ledger.usage(),
        }
    }

    fn charge(&mut self, kind: CallKind, n: u64) -> Result<(), Stop> {
        self.ledger.charge(kind, n).map_err(|_| Stop::Budget)
    }

    fn context(&self, position: usize) -> StepContext {
        StepContext {
            position,
            horizon: self.horizon,
            upstream: self.live.iter().map(|(&p, s)| (p, s.output.clone())).collect(),
            avoid: self.avoid.get(&position).cloned().unwrap_or_default(),
            refinement: self.notes.get(&position).cloned(),
        }
    }

    fn embed(&mut self, texts: &[String], seed: u64) -> Result<Vec<Vec<f64>>, Stop> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.charge(CallKind::Embed, texts.len() as u64)?;
        let v = self.providers.embedder.embed(&EmbedRequest {
            problem_id: &self.problem.id,
            texts,
            seed,
        })?;
        if v.len() != texts.len() {
            return Err(ProviderError::Malformed(format!("{} embeddings for {} texts", v.len(), texts.len())).into());
        }
        Ok(v)
    }

    /// `count` independent single-sample requests, issued in parallel.
    fn fresh_samples(&mut self, position: usize, count: usize, seed: u64) -> Result<Vec<Sample>, Stop> {
        if count == 0 {
            return Ok(Vec::new());
        }
        self.charge(CallKind::Sampler, count as u64)?;
        let ctx = self.context(position);
        let requests: Vec<SamplerRequest> = (0..count)
            .map(|i| SamplerRequest {
                prompt: self.problem.statement.clone(),
                temperature: SAMPLING_TEMPERATURE,
                n: 1,
                seed: Some(mix_seed(&[seed, i as u64])),
                context: ctx.clone(),
            })
            .collect();
        let sampler = self.providers.sampler;
        let problem = self.problem;
        let results = parallel_map(&requests, self.cfg.parallelism, |r| sampler.sample(problem, r));
        let mut out = Vec::with_capacity(count);
        for r in results {
            let mut v = r?;
            if v.is_empty() {
                return Err(ProviderError::Malformed("empty completion list".into()).into());
            }
            out.push(v.swap_remove(0));
        }
        Ok(out)
    }

    fn sense(&mut self, position: usize, step_id: usize, seq: usize) -> Result<Sensed, Stop> {
        let n = self.cfg.n;
        let samples = self.fresh_samples(position, n, self.seed(&[seq as u64, 1]))?;
        let texts: Vec<String> = samples.iter().map(|s| s.text.clone()).collect();
        let embeddings = self.embed(&texts, self.seed(&[seq as u64, 2]))?;
        let clusters = cluster_embeddings(&embeddings, self.tau_sim)?;
        let sizes: Vec<usize> = clusters.iter().map(Vec::len).collect();
        let u = semantic_entropy(&sizes, n)?;

        let mut slot_values: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for s in &samples {
            for (k, v) in s.slots.iter().flatten() {
                slot_values.entry(k.clone()).or_default().push(v.clone());
            }
        }
        let mut slots = Vec::new();
        for (i, (name, values)) in slot_values.into_iter().enumerate() {
            let su = if values.len() < 2 {
                1.0
            } else {
                let e = self.embed(&values, self.seed(&[seq as u64, 3, i as u64]))?;
                let c = cluster_embeddings(&e, self.tau_sim)?;
                semantic_entropy(&c.iter().map(Vec::len).collect::<Vec<_>>(), values.len())?
            };
            slots.push((name, su));
        }
        if samples.iter().any(|s| s.slot_parse_failed) {
            slots.push(("structured_output".to_string(), 1.0));
        }

        let rollouts: Vec<BTreeSet<(usize, usize)>> = samples
            .iter()
            .map(|s| {
                s.references
                    .iter()
                    .filter(|r| r.producer != position && self.live.contains_key(&r.producer))
                    .map(|r| (position, r.producer))
                    .collect()
            })
            .collect();
        let mut consumed: BTreeMap<usize, String> = BTreeMap::new();
        for s in &samples {
            for r in &s.references {
                if self.live.contains_key(&r.producer) && r.producer != position {
                    consumed.entry(r.producer).or_insert_with(|| r.consumed.clone());
                }
            }
        }
        let mut edges = Vec::new();
        if !consumed.is_empty() {
            let producers: Vec<usize> = consumed.keys().copied().collect();
            let mut texts: Vec<String> = producers.iter().map(|p| self.live[p].output.clone()).collect();
            texts.extend(producers.iter().map(|p| consumed[p].clone()));
            let e = self.embed(&texts, self.seed(&[seq as u64, 4]))?;
            let freq = activation_frequencies(&rollouts);
            for (i, p) in producers.iter().enumerate() {
                let gamma = Unit::saturating(cosine(&e[producers.len() + i], &e[i]));
                let act = Unit::saturating(freq[&(position, *p)]);
                edges.push(Edge::new(self.live[p].step_id, step_id, act, gamma));
            }
        }
        Ok(Sensed {
            samples,
            embeddings,
            clusters,
            u,
            slots,
            edges,
        })
    }

    fn verify_all(&mut self, position: usize, answers: &[String]) -> Result<Vec<Verdict>, Stop> {
        self.charge(CallKind::Verifier, answers.len() as u64)?;
        let terminal = position + 1 == self.horizon;
        let verifier = self.providers.verifier;
        let problem = self.problem;
        let results = parallel_map(answers, self.cfg.parallelism, |a| {
            verifier.verify(&VerifyRequest {
                problem,
                position,
                terminal,
                answer: a,
            })
        });
        Ok(results.into_iter().collect::<Result<Vec<_>, _>>()?)
    }

    fn direct(&mut self, position: usize) -> Result<(String, Verdict), Stop> {
        if !self.ledger.can_afford(CallKind::Sampler, 1)
            || self.ledger.usage() + self.ledger.cost_weights.sampler + self.ledger.cost_weights.verifier
                > self.ledger.budget as f64 + 1e-9
        {
            return Err(Stop::Budget);
        }
        self.charge(CallKind::Sampler, 1)?;
        let ctx = self.context(position);
        let avoid_key = fnv1a(ctx.avoid.join("\u{1f}").as_bytes());
        let req = SamplerRequest {
            prompt: self.problem.statement.clone(),
            temperature: 0.0,
            n: 1,
            seed: Some(self.seed(&[position as u64, avoid_key, 5])),
            context: ctx,
        };
        let text = self
            .providers
            .sampler
            .sample(self.problem, &req)?
            .into_iter()
            .next()
            .ok_or_else(|| ProviderError::Malformed("empty completion list".into()))?
            .text;
        let verdict = self.verify_all(position, std::slice::from_ref(&text))?[0];
        Ok((text, verdict))
    }

    /// Candidates in priority order: primary medoid, alternative medoid, the
    /// next most central member of the primary cluster, medoids of further
    /// clusters, remaining Monte Carlo samples, then fresh samples.
    fn branch_candidates(
        &mut self,
        position: usize,
        k: usize,
        sensed: Option<&Sensed>,
        seq: usize,
    ) -> Result<Vec<BranchCandidate>, Stop> {
        let mut out: Vec<BranchCandidate> = Vec::with_capacity(k);
        if let Some(s) = sensed {
            let centrality =
                |c: &[usize], i: usize| -> f64 { c.iter().map(|&j| cosine(&s.embeddings[i], &s.embeddings[j])).sum() };
            let by_centrality = |c: &[usize]| {
                let mut v = c.to_vec();
                v.sort_by(|&a, &b| centrality(c, b).total_cmp(&centrality(c, a)).then(a.cmp(&b)));
                v
            };
            let primary = by_centrality(&s.clusters[0]);
            let mut picked: Vec<(usize, CandidateOrigin)> = vec![(primary[0], CandidateOrigin::Primary)];
            let mut used = BTreeSet::from([0]);
            if s.clusters.len() > 1 && s.clusters[1].len() >= 2 {
                picked.push((by_centrality(&s.clusters[1])[0], CandidateOrigin::Alternative));
                used.insert(1);
            }
            if let Some(&i) = primary.get(1) {
                picked.push((i, CandidateOrigin::Conservative));
            }
            for (ci, c) in s.clusters.iter().enumerate() {
                if !used.contains(&ci) {
                    picked.push((by_centrality(c)[0], CandidateOrigin::Extra));
                }
            }
            for i in 0..s.samples.len() {
                if !picked.iter().any(|p| p.0 == i) {
                    picked.push((i, CandidateOrigin::Extra));
                }
            }
            out.extend(picked.into_iter().take(k).map(|(i, origin)| BranchCandidate {
                text: s.samples[i].text.clone(),
                embedding: s.embeddings[i].clone(),
                verifier_outcome: Verdict::NotRun,
                origin,
            }));
        }
        let fresh_count = k - out.len();
        let w = self.ledger.cost_weights;
        let cost = fresh_count as f64 * w.sampler + k as f64 * w.verifier;
        if self.ledger.usage() + cost > self.ledger.budget as f64 + 1e-9 {
            return Err(Stop::Budget);
        }
        let fresh = self.fresh_samples(position, fresh_count, self.seed(&[seq as u64, 6]))?;
        let texts: Vec<String> = fresh.into_iter().map(|s| s.text).collect();
        let emb = self.embed(&texts, self.seed(&[seq as u64, 7]))?;
        for (text, embedding) in texts.into_iter().zip(emb) {
            let origin = if out.is_empty() {
                CandidateOrigin::Primary
            } else {
                CandidateOrigin::Extra
            };
            out.push(BranchCandidate {
                text,
                embedding,
                verifier_outcome: Verdict::NotRun,
                origin,
            });
        }
        Ok(out)
    }

    fn can_refine(&self) -> bool {
        !self.cfg.disable_refinement && self.refinements < self.cfg.r
    }

    /// One loop iteration. Returns `Ok(false)` when the run should stop.
    fn iterate(&mut self, position: usize) -> Result<bool, Stop> {
        let seq = self.records.len();
        let step_id = self.next_step_id;
        self.next_step_id += 1;
        self.position_of.insert(step_id, position);
        let forced = self.forced.remove(&position);
        let t0 = Instant::now();

        let sensed = if self.cfg.disable_sensing {
            None
        } else {
            Some(self.sense(position, step_id, seq)?)
        };
        let u = sensed.as_ref().map_or(UNSENSED_UNCERTAINTY, |s| s.u);
        let u_cal = calibrate(u, self.temperature);
        self.graph
            .add_node(step_id, NodeRisk::new(Unit::saturating(u), Unit::saturating(u_cal)));
        for e in sensed.iter().flat_map(|s| s.edges.iter()) {
            self.graph.add_edge(*e)?;
        }
        propagate_risk(&mut self.graph, self.cfg.lambda, self.cfg.beta)?;
        let u_prop = self.graph.node(step_id)?.propagated.get();
        let edges: Vec<TraceEdge> = self
            .graph
            .incoming(step_id)
            .map(|e| TraceEdge {
                from: e.from,
                activation: e.activation.get(),
                compatibility: e.compatibility.get(),
                coupling: e.coupling.get(),
                from_risk: self.graph.nodes[&e.from].propagated.get(),
            })
            .collect();
        let slots = sensed.as_ref().map(|s| s.slots.clone()).unwrap_or_default();
        let slot_us: Vec<f64> = slots.iter().map(|s| s.1).collect();
        let srisk = slot_risk(&slot_us, self.cfg.alpha, self.cfg.tau_slot);
        let risk = compound_risk(u_prop, &slot_us, self.cfg.alpha, self.cfg.tau_slot);
        let c = 1.0 - risk;
        let sensing_us = t0.elapsed().as_micros() as u64;

        let t1 = Instant::now();
        let thresholds = adaptive_thresholds(&self.stream.history);
        let history_len = self.stream.history.len();
        let routed = route(c, &thresholds);
        if !forced {
            self.stream.history.push(c);
        }
        let (mode, k, k_rule, reason) = if self.cfg.disable_branching {
            (Mode::Direct, 0, KRule::None, "branching disabled")
        } else if let Some(k) = self.cfg.fixed_k {
            (Mode::Branch, k, KRule::Fixed, "fixed branch count")
        } else if forced {
            (
                Mode::Branch,
                branch_count(0.0, self.cfg.kappa, self.cfg.k_max),
                KRule::Forced,
                "re-entry at root cause",
            )
        } else {
            match routed {
                Mode::Direct => (Mode::Direct, 0, KRule::None, "routed"),
                Mode::Branch => (
                    Mode::Branch,
                    branch_count(c, self.cfg.kappa, self.cfg.k_max),
                    KRule::Adaptive,
                    "routed",
                ),
                Mode::Refine if self.can_refine() => (Mode::Refine, 0, KRule::None, "routed"),
                Mode::Refine => (
                    Mode::Branch,
                    branch_count(c, self.cfg.kappa, self.cfg.k_max),
                    KRule::Adaptive,
                    "refinement unavailable",
                ),
            }
        };

        let mut record = TraceRecord {
            run_id: self.run_id.to_string(),
            problem_id: self.problem.id.clone(),
            sequence: seq,
            step_id,
            position,
            terminal: position + 1 == self.horizon,
            supersedes: self.supersedes.get(&position).copied(),
            round: self.refinements,
            timings: None,
            sensing: sensed.is_some(),
            cluster_sizes: sensed
                .as_ref()
                .map(|s| s.clusters.iter().map(Vec::len).collect())
                .unwrap_or_default(),
            tau_sim: self.tau_sim,
            u,
            u_cal,
            u_prop,
            slot_uncertainties: slots,
            slot_risk: srisk,
            risk,
            c,
            temperature: self.temperature,
            edges,
            params: self.cfg.trace_params(),
            thresholds,
            history_len,
            routed_mode: routed,
            mode,
            mode_reason: reason.to_string(),
            k_rule,
            k,
            candidates: Vec::new(),
            escalated: false,
            output: String::new(),
            verdict: Verdict::NotRun,
            usage: self.usage(),
            budget_exhausted: false,
            refinement: None,
            calibration: None,
            outcome: None,
        };
        if sensed.is_some() {
            self.last_raw_u = Some(u);
        }

        let executed = match mode {
            Mode::Direct => self.direct(position).map(|(o, v)| {
                let failed = if v == Verdict::Pass {
                    Vec::new()
                } else {
                    vec![o.clone()]
                };
                (o, v, failed)
            }),
            Mode::Branch => self.branch(position, k, sensed.as_ref(), seq, &mut record),
            Mode::Refine => Ok((String::new(), Verdict::NotRun, Vec::new())),
        };
        let (output, verdict, failed_texts) = match executed {
            Ok(x) => x,
            Err(Stop::Budget) => {
                record.budget_exhausted = true;
                record.usage = self.usage();
                self.finish_record(record, sensing_us, t1);
                return Ok(false);
            }
            Err(e) => {
                record.usage = self.usage();
                self.finish_record(record, sensing_us, t1);
                return Err(e);
            }
        };
        record.output = output.clone();
        record.verdict = verdict;
        record.usage = self.usage();
        let regulating_us = t1.elapsed().as_micros() as u64;
        if record.terminal && mode != Mode::Refine {
            self.terminal_results.push((verdict, c, output.clone()));
        }
        self.live.insert(
            position,
            LiveStep {
                step_id,
                output: output.clone(),
            },
        );
        if verdict == Verdict::Pass {
            self.finish_timed(record, sensing_us, regulating_us, 0);
            return Ok(true);
        }

        if !self.can_refine() {
            self.finish_timed(record, sensing_us, regulating_us, 0);
            return Ok(false);
        }
        let t2 = Instant::now();
        let repeat = !self.failed_outputs.entry(position).or_default().insert(output.clone());
        self.refinements += 1;
        let failure_set = BTreeSet::from([step_id]);
        let influences = influence(&self.graph, &failure_set)?;
        let mut excluded = Vec::new();
        let root = match self.cfg.recovery_mode {
            RecoveryMode::RootCause => {
                let mut pool = influences.clone();
                if repeat {
                    let skip: Vec<usize> = pool
                        .keys()
                        .copied()
                        .filter(|id| self.chosen_roots.contains(&self.position_of[id]))
                        .collect();
                    if skip.len() < pool.len() {
                        for id in &skip {
                            pool.remove(id);
                        }
                        excluded = skip;
                    }
                }
                localize_root_cause(&pool)?
            }
            RecoveryMode::FullRestart => self.live.get(&0).map_or(step_id, |s| s.step_id),
            RecoveryMode::LocalRetry => step_id,
        };
        let root_position = self.position_of[&root];
        self.chosen_roots.insert(root_position);
        asymmetric_calibrate(&mut self.graph, root, &failure_set, self.cfg.tau_enf)?;
        propagate_risk(&mut self.graph, self.cfg.lambda, self.cfg.beta)?;

        let avoid = self.avoid.entry(position).or_default();
        for t in failed_texts {
            if !t.is_empty() && !avoid.contains(&t) {
                avoid.push(t);
            }
        }
        if self.cfg.recovery_mode == RecoveryMode::RootCause && root != step_id {
            let prev = self.live[&root_position].output.clone();
            let avoid = self.avoid.entry(root_position).or_default();
            if !prev.is_empty() && !avoid.contains(&prev) {
                avoid.push(prev);
            }
        }
        self.notes.insert(
            root_position,
            RefinementNote {
                previous_answer: output,
                verdict: format!("{verdict:?}"),
                failure_reason: if mode == Mode::Refine {
                    format!("confidence {c:.3} below the refinement threshold at step {position}")
                } else {
                    format!("verification failed at step {position}")
                },
                root_cause: format!("step {root_position}"),
            },
        );

        let invalidated: BTreeSet<usize> = if self.cfg.recovery_mode == RecoveryMode::FullRestart {
            self.graph.nodes.keys().copied().collect()
        } else {
            self.graph.descendants(root)?
        };
        self.graph.remove_nodes(&invalidated);
        self.live.retain(|_, s| !invalidated.contains(&s.step_id));
        for id in &invalidated {
            self.supersedes.insert(self.position_of[id], *id);
        }
        self.forced.insert(root_position);
        record.refinement = Some(RefinementTrace {
            round: self.refinements,
            strategy: self.cfg.recovery_mode,
            failure_set: failure_set.into_iter().collect(),
            influences,
            excluded,
            root_cause: root,
            root_position,
            invalidated: invalidated.into_iter().collect(),
        });
        let correcting_us = t2.elapsed().as_micros() as u64;
        self.finish_timed(record, sensing_us, regulating_us, correcting_us);
        Ok(true)
    }

    fn branch(
        &mut self,
        position: usize,
        k: usize,
        sensed: Option<&Sensed>,
        seq: usize,
        record: &mut TraceRecord,
    ) -> Result<(String, Verdict, Vec<String>), Stop> {
        let mut candidates = self.branch_candidates(position, k, sensed, seq)?;
        let texts: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
        let verdicts = self.verify_all(position, &texts)?;
        for (c, v) in candidates.iter_mut().zip(&verdicts) {
            c.verifier_outcome = *v;
        }
        record.candidates = candidates
            .iter()
            .map(|c| CandidateTrace {
                origin: c.origin,
                text: c.text.clone(),
                verdict: c.verifier_outcome,
            })
            .collect();
        let mut failed: Vec<String> = Vec::new();
        for c in &candidates {
            if c.verifier_outcome == Verdict::Fail && !failed.contains(&c.text) {
                failed.push(c.text.clone());
            }
        }
        match consensus_select(&candidates, self.tau_sim, self.cfg.eta)? {
            Consensus::Selected { text, verdict, .. } => {
                let failed = if verdict == Verdict::Pass { Vec::new() } else { failed };
                Ok((text, verdict, failed))
            }
            Consensus::Escalate => {
                record.escalated = true;
                Ok((String::new(), Verdict::Fail, failed))
            }
        }
    }

    fn finish_timed(&mut self, mut record: TraceRecord, sensing: u64, regulating: u64, correcting: u64) {
        if self.cfg.record_timings {
            record.timings = Some(StageTimings {
                sensing_us: sensing,
                regulating_us: regulating,
                correcting_us: correcting,
            });
        }
        self.records.push(record);
    }

    fn finish_record(&mut self, record: TraceRecord, sensing: u64, t1: Instant) {
        let regulating = t1.elapsed().as_micros() as u64;
        self.finish_timed(record, sensing, regulating, 0);
    }
}

/// Runs one problem to completion, exhaustion of the budget, or exhaustion of
/// refinement rounds. `stream` carries calibration and threshold history
/// between problems.
pub fn run_problem(
    problem: &ProblemSpec,
    config: &EngineConfig,
    providers: Providers<'_>,
    stream: &mut StreamState,
    run_id: &str,
) -> Result<RunOutput, EngineError> {
    config.validate()?;
    problem.validate()?;
    let horizon = config.horizon.map_or(problem.horizon, |h| h.min(problem.horizon));
    let n_step = extract_complexity_features(&problem.statement).map_or(0, |f| f.n_step);
    let temperature = if config.disable_calibration {
        1.0
    } else {
        stream.calibration.temperature
    };
    let mut run = Run {
        problem,
        cfg: config,
        providers,
        run_id,
        horizon,
        tau_sim: adaptive_similarity_threshold_from(config.tau_sim, n_step),
        temperature,
        stream,
        ledger: BudgetLedger::new(config.budget),
        graph: DependencyGraph::new(),
        live: BTreeMap::new(),
        position_of: BTreeMap::new(),
        next_step_id: 0,
        avoid: BTreeMap::new(),
        failed_outputs: BTreeMap::new(),
        chosen_roots: BTreeSet::new(),
        forced: BTreeSet::new(),
        supersedes: BTreeMap::new(),
        notes: BTreeMap::new(),
        refinements: 0,
        terminal_results: Vec::new(),
        last_raw_u: None,
        records: Vec::new(),
    };

    let failure = loop {
        let Some(position) = (0..horizon).find(|p| !run.live.contains_key(p)) else {
            break None;
        };
        if run.ledger.exhausted()
            || (!config.disable_sensing && !run.ledger.can_afford(CallKind::Sampler, config.n as u64))
        {
            break None;
        }
        match run.iterate(position) {
            Ok(true) => {}
            Ok(false) | Err(Stop::Budget) => break None,
            Err(Stop::Provider(e)) => break Some(e),
            Err(Stop::Core(e)) => return Err(e.into()),
        }
    };
    if let Some(source) = failure {
        return Err(EngineError::Provider {
            source,
            trace: run.records,
        });
    }

    let terminal = horizon - 1;
    let solved = run.live.contains_key(&terminal) && run.terminal_results.last().is_some_and(|r| r.0 == Verdict::Pass);
    let final_output = if solved {
        run.live[&terminal].output.clone()
    } else {
        let mut best: Option<&(Verdict, f64, String)> = None;
        for r in &run.terminal_results {
            let better = match best {
                None => true,
                Some(b) => (r.0 == Verdict::Pass && b.0 != Verdict::Pass) || (r.0 == b.0 && r.1 > b.1),
            };
            if better {
                best = Some(r);
            }
        }
        best.map(|b| b.2.clone()).unwrap_or_default()
    };

    let mut snapshot = None;
    if !config.disable_calibration {
        if let Some(u) = run.last_raw_u {
            let cal = &mut run.stream.calibration;
            cal.record_observation(u, solved);
            if cal.maybe_update_temperature() {
                snapshot = Some(CalibrationSnapshot {
                    temperature: cal.temperature,
                    updates: cal.updates,
                    window: cal.observations.len(),
                    rates: cal.last_rates.unwrap_or_default(),
                });
            }
        }
    }
    let usage = run.ledger.usage();
    if let Some(last) = run.records.last_mut() {
        last.calibration = snapshot;
        last.outcome = Some(Outcome {
            solved,
            final_output: final_output.clone(),
            refinements_used: run.refinements,
            usage,
        });
    }
    Ok(RunOutput {
        result: RunResult {
            problem_id: problem.id.clone(),
            final_output,
            solved,
            refinements_used: run.refinements,
            total_usage: usage,
            ledger: run.ledger,
            trace_path: None,
        },
        trace: run.records,
    })
}
