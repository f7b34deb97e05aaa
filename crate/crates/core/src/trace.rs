//! Per-iteration execution records, JSONL persistence and replay
//! verification of every derived quantity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, BucketRates};
use crate::regulating::{
    branch_count, route, slot_risk, CandidateOrigin, RoutingThresholds, ThresholdSource, MIN_HISTORY,
};
use crate::sensing::semantic_entropy;
use crate::types::{Mode, RecoveryMode, Verdict};

/// Value of `u` recorded when sensing is disabled.
pub const UNSENSED_UNCERTAINTY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEdge {
    pub from: usize,
    pub activation: f64,
    pub compatibility: f64,
    pub coupling: f64,
    /// Propagated risk of `from` when this step was propagated.
    pub from_risk: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    pub lambda: f64,
    pub beta: f64,
    pub alpha: f64,
    pub tau_slot: f64,
    pub kappa: f64,
    pub k_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UsageSnapshot {
    pub sampler_calls: u64,
    pub verifier_calls: u64,
    pub embed_calls: u64,
    pub usage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub sensing_us: u64,
    pub regulating_us: u64,
    pub correcting_us: u64,
}

/// How the branch count was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KRule {
    None,
    Adaptive,
    Fixed,
    Forced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub origin: CandidateOrigin,
    pub text: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub round: usize,
    pub strategy: RecoveryMode,
    pub failure_set: Vec<usize>,
    pub influences: BTreeMap<usize, f64>,
    /// Nodes skipped by the repeated-failure rule.
    pub excluded: Vec<usize>,
    pub root_cause: usize,
    pub root_position: usize,
    pub invalidated: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSnapshot {
    pub temperature: f64,
    pub updates: u64,
    pub window: usize,
    pub rates: BucketRates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub solved: bool,
    pub final_output: String,
    pub refinements_used: usize,
    pub usage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub run_id: String,
    pub problem_id: String,
    pub sequence: usize,
    pub step_id: usize,
    pub position: usize,
    pub terminal: bool,
    pub supersedes: Option<usize>,
    /// Refinement cycles completed before this iteration.
    pub round: usize,
    pub timings: Option<StageTimings>,
    pub sensing: bool,
    pub cluster_sizes: Vec<usize>,
    pub tau_sim: f64,
    pub u: f64,
    pub u_cal: f64,
    pub u_prop: f64,
    pub slot_uncertainties: Vec<(String, f64)>,
    pub slot_risk: f64,
    pub risk: f64,
    pub c: f64,
    pub temperature: f64,
    pub edges: Vec<TraceEdge>,
    pub params: TraceParams,
    pub thresholds: RoutingThresholds,
    pub history_len: usize,
    pub routed_mode: Mode,
    pub mode: Mode,
    pub mode_reason: String,
    pub k_rule: KRule,
    pub k: usize,
    pub candidates: Vec<CandidateTrace>,
    pub escalated: bool,
    pub output: String,
    pub verdict: Verdict,
    pub usage: UsageSnapshot,
    pub budget_exhausted: bool,
    pub refinement: Option<RefinementTrace>,
    pub calibration: Option<CalibrationSnapshot>,
    pub outcome: Option<Outcome>,
}

pub fn write_jsonl(path: &Path, records: &[TraceRecord]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("trace records serialise"));
        s.push('\n');
    }
    s
}

pub fn read_jsonl(path: &Path) -> io::Result<Vec<TraceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// All `*.jsonl` files under `dir`, sorted by name.
pub fn read_dir(dir: &Path) -> io::Result<Vec<(String, Vec<TraceRecord>)>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| Ok((p.display().to_string(), read_jsonl(&p)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplayReport {
    pub records: usize,
    pub checks: usize,
    pub max_deviation: f64,
    pub failures: Vec<String>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Checker<'a> {
    report: &'a mut ReplayReport,
    tol: f64,
    ctx: String,
}

impl Checker<'_> {
    fn close(&mut self, what: &str, recorded: f64, recomputed: f64) {
        self.report.checks += 1;
        let d = (recorded - recomputed).abs();
        if d.is_finite() {
            self.report.max_deviation = self.report.max_deviation.max(d);
        }
        if d.is_nan() || d > self.tol {
            self.report.failures.push(format!(
                "{}: {what} recorded {recorded} recomputed {recomputed}",
                self.ctx
            ));
        }
    }

    fn holds(&mut self, what: &str, ok: bool) {
        self.report.checks += 1;
        if !ok {
            self.report.failures.push(format!("{}: {what}", self.ctx));
        }
    }
}

fn numbers(r: &TraceRecord) -> Vec<f64> {
    let mut v = vec![
        r.tau_sim,
        r.u,
        r.u_cal,
        r.u_prop,
        r.slot_risk,
        r.risk,
        r.c,
        r.temperature,
        r.thresholds.high,
        r.thresholds.low,
        r.usage.usage,
    ];
    v.extend(r.slot_uncertainties.iter().map(|s| s.1));
    for e in &r.edges {
        v.extend([e.activation, e.compatibility, e.coupling, e.from_risk]);
    }
    if let Some(f) = &r.refinement {
        v.extend(f.influences.values());
    }
    v
}

/// Recomputes the derived fields of every record from its inputs and the
/// records it references.
pub fn replay(records: &[TraceRecord], tol: f64) -> ReplayReport {
    let mut report = ReplayReport::default();
    let mut risk_by_step: BTreeMap<(&str, &str, usize), f64> = BTreeMap::new();
    let mut last_seq: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for r in records {
        report.records += 1;
        let key = (r.run_id.as_str(), r.problem_id.as_str());
        let mut ck = Checker {
            report: &mut report,
            tol,
            ctx: format!("{}/{}#{}", r.run_id, r.problem_id, r.sequence),
        };
        ck.holds("non-finite field", numbers(r).iter().all(|x| x.is_finite()));
        if let Some(&prev) = last_seq.get(&key) {
            ck.holds("sequence not increasing", r.sequence > prev);
        }
        last_seq.insert(key, r.sequence);

        if r.sensing {
            let n: usize = r.cluster_sizes.iter().sum();
            match semantic_entropy(&r.cluster_sizes, n) {
                Ok(u) => ck.close("u", r.u, u),
                Err(e) => ck.holds(&format!("cluster sizes invalid: {e}"), false),
            }
        } else {
            ck.close("u", r.u, UNSENSED_UNCERTAINTY);
        }
        ck.close("u_cal", r.u_cal, calibrate(r.u, r.temperature));

        let mut contributions = Vec::new();
        for e in &r.edges {
            ck.close("coupling", e.coupling, e.activation * e.compatibility);
            match risk_by_step.get(&(key.0, key.1, e.from)) {
                Some(&from) => ck.close("edge source risk", e.from_risk, from),
                None => ck.holds(&format!("edge from unknown step {}", e.from), false),
            }
            contributions.push(e.coupling * e.from_risk);
        }
        let propagated = if contributions.is_empty() {
            r.u_cal
        } else {
            let max = contributions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = contributions.iter().sum::<f64>() / contributions.len() as f64;
            (r.u_cal + r.params.lambda * max + r.params.beta * mean).clamp(0.0, 1.0)
        };
        ck.close("u_prop", r.u_prop, propagated);
        let slots: Vec<f64> = r.slot_uncertainties.iter().map(|s| s.1).collect();
        ck.close(
            "slot_risk",
            r.slot_risk,
            slot_risk(&slots, r.params.alpha, r.params.tau_slot),
        );
        ck.close("risk", r.risk, r.u_prop.max(r.slot_risk));
        ck.close("c", r.c, 1.0 - r.risk);

        let th = r.thresholds;
        match th.source {
            ThresholdSource::Fallback => {
                ck.holds(
                    "fallback thresholds",
                    th == RoutingThresholds::FALLBACK && r.history_len < MIN_HISTORY,
                );
            }
            ThresholdSource::Adaptive => {
                ck.holds("adaptive thresholds", th.low <= th.high && r.history_len >= MIN_HISTORY);
            }
        }
        ck.holds("routed mode", route(r.c, &th) == r.routed_mode);
        match (r.mode, r.k_rule) {
            (Mode::Branch, KRule::Adaptive) => {
                ck.holds("branch count", r.k == branch_count(r.c, r.params.kappa, r.params.k_max));
            }
            (Mode::Branch, KRule::Forced) => {
                ck.holds(
                    "forced branch count",
                    r.k == branch_count(0.0, r.params.kappa, r.params.k_max),
                );
            }
            (Mode::Branch, KRule::Fixed) => ck.holds("fixed branch count", r.k >= 1),
            (Mode::Branch, KRule::None) => ck.holds("branch without rule", false),
            (_, rule) => ck.holds("K outside Branch", r.k == 0 && rule == KRule::None),
        }
        if !r.candidates.is_empty() && !r.budget_exhausted {
            ck.holds("candidate count", r.candidates.len() == r.k);
        }
        if let Some(f) = &r.refinement {
            let excluded: BTreeSet<usize> = f.excluded.iter().copied().collect();
            let pool: BTreeMap<usize, f64> = f
                .influences
                .iter()
                .filter(|(k, _)| !excluded.contains(k))
                .map(|(&k, &v)| (k, v))
                .collect();
            if let Some((&best, _)) = pool.iter().fold(None::<(&usize, &f64)>, |acc, kv| match acc {
                Some(a) if a.1 >= kv.1 => Some(a),
                _ => Some(kv),
            }) {
                if f.strategy == RecoveryMode::RootCause {
                    ck.holds("root cause is influence argmax", best == f.root_cause);
                }
            }
            ck.holds("step in failure set", f.failure_set.contains(&r.step_id));
        }
        risk_by_step.insert((key.0, key.1, r.step_id), r.u_prop);
    }
    report
}
