//! Aggregates over trace records: per-problem summaries, risk deciles with a
//! binned Spearman coefficient, and mode / branch-count tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::trace::TraceRecord;
use crate::types::Mode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub run_id: String,
    pub problem_id: String,
    /// Largest compound risk over first-pass steps.
    pub risk: f64,
    pub solved: bool,
    pub refinements: usize,
    pub sampler_calls: u64,
    pub verifier_calls: u64,
    pub usage: f64,
}

/// Groups records by `(run_id, problem_id)` in first-seen order.
pub fn summarize_problems(records: &[TraceRecord]) -> Vec<ProblemSummary> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&TraceRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.run_id.clone(), r.problem_id.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let recs = &groups[&key];
            let last = recs.last().expect("non-empty group");
            let risk = recs
                .iter()
                .filter(|r| r.round == 0)
                .map(|r| r.risk)
                .fold(f64::NEG_INFINITY, f64::max);
            let outcome = recs.iter().rev().find_map(|r| r.outcome.as_ref());
            ProblemSummary {
                run_id: key.0,
                problem_id: key.1,
                risk: if risk.is_finite() { risk } else { 0.0 },
                solved: outcome.is_some_and(|o| o.solved),
                refinements: outcome.map_or(0, |o| o.refinements_used),
                sampler_calls: last.usage.sampler_calls,
                verifier_calls: last.usage.verifier_calls,
                usage: outcome.map_or(last.usage.usage, |o| o.usage),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskBin {
    pub bin: usize,
    pub min_risk: f64,
    pub max_risk: f64,
    pub mean_risk: f64,
    pub success_rate: f64,
    pub count: usize,
}

/// Up to `bins` equal-count bins in ascending risk order.
pub fn risk_bins(problems: &[(f64, bool)], bins: usize) -> Vec<RiskBin> {
    if problems.is_empty() || bins == 0 {
        return Vec::new();
    }
    let mut sorted: Vec<(f64, bool)> = problems.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let k = bins.min(sorted.len());
    let n = sorted.len();
    (0..k)
        .map(|b| {
            let chunk = &sorted[b * n / k..(b + 1) * n / k];
            let count = chunk.len();
            RiskBin {
                bin: b,
                min_risk: chunk[0].0,
                max_risk: chunk[count - 1].0,
                mean_risk: chunk.iter().map(|p| p.0).sum::<f64>() / count as f64,
                success_rate: chunk.iter().filter(|p| p.1).count() as f64 / count as f64,
                count,
            }
        })
        .collect()
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks. `None` with fewer than two points
/// or when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman between bin mean risk and bin success rate.
pub fn binned_spearman(bins: &[RiskBin]) -> Option<f64> {
    let x: Vec<f64> = bins.iter().map(|b| b.mean_risk).collect();
    let y: Vec<f64> = bins.iter().map(|b| b.success_rate).collect();
    spearman(&x, &y)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeStats {
    pub steps: usize,
    pub direct: usize,
    pub branch: usize,
    pub refine: usize,
    /// Mean K over Branch steps.
    pub avg_k: Option<f64>,
}

impl ModeStats {
    pub fn percent(&self, mode: Mode) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        let n = match mode {
            Mode::Direct => self.direct,
            Mode::Branch => self.branch,
            Mode::Refine => self.refine,
        };
        100.0 * n as f64 / self.steps as f64
    }
}

/// Executed modes over all records that reached routing.
pub fn mode_stats(records: &[TraceRecord]) -> ModeStats {
    let mut s = ModeStats::default();
    let mut k_sum = 0usize;
    for r in records {
        s.steps += 1;
        match r.mode {
            Mode::Direct => s.direct += 1,
            Mode::Branch => {
                s.branch += 1;
                k_sum += r.k;
            }
            Mode::Refine => s.refine += 1,
        }
    }
    s.avg_k = (s.branch > 0).then(|| k_sum as f64 / s.branch as f64);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub problems: usize,
    pub solved: usize,
    pub accuracy: f64,
    pub avg_sampler_calls: f64,
    pub avg_verifier_calls: f64,
    pub avg_calls: f64,
    pub avg_usage: f64,
    /// Fraction of problems that needed at least one refinement round.
    pub retry_rate: f64,
    pub modes: ModeStats,
}

pub fn run_summary(records: &[TraceRecord], problems: &[ProblemSummary]) -> RunSummary {
    let n = problems.len();
    let avg = |f: &dyn Fn(&ProblemSummary) -> f64| {
        if n == 0 {
            0.0
        } else {
            problems.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let solved = problems.iter().filter(|p| p.solved).count();
    RunSummary {
        problems: n,
        solved,
        accuracy: if n == 0 { 0.0 } else { solved as f64 / n as f64 },
        avg_sampler_calls: avg(&|p| p.sampler_calls as f64),
        avg_verifier_calls: avg(&|p| p.verifier_calls as f64),
        avg_calls: avg(&|p| (p.sampler_calls + p.verifier_calls) as f64),
        avg_usage: avg(&|p| p.usage),
        retry_rate: avg(&|p| (p.refinements > 0) as u8 as f64),
        modes: mode_stats(records),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub bins: Vec<RiskBin>,
    pub spearman: Option<f64>,
    pub summary: RunSummary,
}

pub const REPORT_BINS: usize = 10;

pub fn risk_report(records: &[TraceRecord]) -> RiskReport {
    let problems = summarize_problems(records);
    let pairs: Vec<(f64, bool)> = problems.iter().map(|p| (p.risk, p.solved)).collect();
    let bins = risk_bins(&pairs, REPORT_BINS);
    RiskReport {
        spearman: binned_spearman(&bins),
        bins,
        summary: run_summary(records, &problems),
    }
}

pub fn format_spearman(rho: Option<f64>) -> String {
    rho.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}"))
}

pub fn render_summary(s: &RunSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "problems      {}", s.problems);
    let _ = writeln!(out, "accuracy      {:.2}%", 100.0 * s.accuracy);
    let _ = writeln!(
        out,
        "avg calls     {:.2} (sampler {:.2}, verifier {:.2})",
        s.avg_calls, s.avg_sampler_calls, s.avg_verifier_calls
    );
    let _ = writeln!(out, "avg usage     {:.2}", s.avg_usage);
    let _ = writeln!(out, "retry rate    {:.2}%", 100.0 * s.retry_rate);
    out.push_str(&render_modes(&s.modes));
    out
}

pub fn render_modes(m: &ModeStats) -> String {
    let avg_k = m.avg_k.map_or_else(|| "-".to_string(), |k| format!("{k:.2}"));
    format!(
        "{:<8} {:>8} {:>8} {:>8} {:>6}\n{:<8} {:>7.1}% {:>7.1}% {:>7.1}% {:>6}\n",
        "steps",
        "Direct",
        "Branch",
        "Refine",
        "Avg K",
        m.steps,
        m.percent(Mode::Direct),
        m.percent(Mode::Branch),
        m.percent(Mode::Refine),
        avg_k
    )
}

pub fn render_risk_report(r: &RiskReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4} {:>9} {:>9} {:>8} {:>6}",
        "bin", "risk_lo", "risk_hi", "success", "count"
    );
    for b in &r.bins {
        let _ = writeln!(
            out,
            "{:>4} {:>9.4} {:>9.4} {:>8.3} {:>6}",
            b.bin, b.min_risk, b.max_risk, b.success_rate, b.count
        );
    }
    let _ = writeln!(out, "binned spearman: {}", format_spearman(r.spearman));
    out.push('\n');
    out.push_str(&render_summary(&r.summary));
    out
}
