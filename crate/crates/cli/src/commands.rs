//! The run, sweep, report and replay commands.

use std::fmt::Write as _;
use std::path::Path;

use riskloop_core::engine::{run_problem, EngineConfig, EngineError, StreamState};
use riskloop_core::providers::{ProviderError, Providers, SyntheticProvider};
use riskloop_core::report::{
    mode_stats, render_risk_report, render_summary, risk_report, run_summary, summarize_problems, RiskReport,
    RunSummary,
};
use riskloop_core::trace::{self, ReplayReport, TraceRecord};
use riskloop_core::types::RecoveryMode;
use riskloop_live::{ChatClient, LiveConfig, LiveProvider, LiveProviderOptions};
use serde::{Deserialize, Serialize};

use crate::tasks::TaskSource;
use crate::{io_err, CliError};

pub const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Sensing,
    Branching,
    Refinement,
    Calibration,
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub ablate: Vec<Ablation>,
    pub recovery: Option<RecoveryMode>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: EngineConfig) -> Result<EngineConfig, CliError> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.parallelism {
            cfg.parallelism = p;
        }
        if let Some(r) = self.recovery {
            cfg.recovery_mode = r;
        }
        for a in &self.ablate {
            match a {
                Ablation::Sensing => cfg.disable_sensing = true,
                Ablation::Branching => cfg.disable_branching = true,
                Ablation::Refinement => cfg.disable_refinement = true,
                Ablation::Calibration => cfg.disable_calibration = true,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trace of one problem and the provider error that cut it short, if any.
#[derive(Debug, Clone)]
pub struct ProblemRun {
    pub run_id: String,
    pub records: Vec<TraceRecord>,
    pub error: Option<ProviderError>,
}

/// Runs every task in order through one stream state. Authentication
/// failures abort; other provider failures keep the partial trace and move
/// on to the next problem.
pub fn execute(source: &TaskSource, cfg: &EngineConfig, prefix: &str) -> Result<Vec<ProblemRun>, CliError> {
    let mut stream = StreamState::new(cfg);
    let mut out = Vec::with_capacity(source.len());
    match source {
        TaskSource::Synthetic(tasks) => {
            let provider = SyntheticProvider::new(tasks.iter().cloned())?;
            for (i, t) in tasks.iter().enumerate() {
                let providers = Providers::new(&provider, &provider, &provider);
                out.push(one(&t.problem_spec(), cfg, providers, &mut stream, prefix, i)?);
            }
        }
        TaskSource::Live(live) => {
            if live.problems.is_empty() {
                return Ok(out);
            }
            let options = LiveProviderOptions {
                understanding: live.understanding,
                reference_answers: live.reference_answers,
            };
            let provider = LiveProvider::new(ChatClient::new(LiveConfig::from_env()?), options);
            for (i, p) in live.problems.iter().enumerate() {
                let providers = Providers::new(&provider, &provider, &provider);
                out.push(one(p, cfg, providers, &mut stream, prefix, i)?);
            }
        }
    }
    Ok(out)
}

fn one(
    problem: &riskloop_core::types::ProblemSpec,
    cfg: &EngineConfig,
    providers: Providers<'_>,
    stream: &mut StreamState,
    prefix: &str,
    index: usize,
) -> Result<ProblemRun, CliError> {
    let run_id = format!("{prefix}-{index:04}");
    match run_problem(problem, cfg, providers, stream, &run_id) {
        Ok(o) => Ok(ProblemRun {
            run_id,
            records: o.trace,
            error: None,
        }),
        Err(EngineError::Provider {
            source: source @ ProviderError::Auth(_),
            ..
        }) => Err(source.into()),
        Err(EngineError::Provider { source, trace }) => Ok(ProblemRun {
            run_id,
            records: trace,
            error: Some(source),
        }),
        Err(EngineError::Core(e)) => Err(e.into()),
    }
}

pub fn summarize(runs: &[ProblemRun]) -> RunSummary {
    let records: Vec<TraceRecord> = runs.iter().flat_map(|r| r.records.iter().cloned()).collect();
    run_summary(&records, &summarize_problems(&records))
}

/// Executes the tasks, writes `<run_id>.jsonl` per problem plus
/// `summary.txt` and `summary.json` into `out`.
pub fn cmd_run(cfg: &EngineConfig, source: &TaskSource, out: &Path) -> Result<RunSummary, CliError> {
    let runs = execute(source, cfg, "run")?;
    std::fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    for r in &runs {
        let path = out.join(format!("{}.jsonl", r.run_id));
        trace::write_jsonl(&path, &r.records).map_err(io_err(format!("writing {}", path.display())))?;
    }
    let summary = summarize(&runs);
    let mut text = render_summary(&summary);
    for r in runs.iter().filter(|r| r.error.is_some()) {
        let _ = writeln!(
            text,
            "provider error in {}: {}",
            r.run_id,
            r.error.as_ref().expect("filtered")
        );
    }
    write_file(&out.join("summary.txt"), &text)?;
    write_file(&out.join("summary.json"), &to_json(&summary))?;
    Ok(summary)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io_err(format!("writing {}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize") + "\n"
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    N,
    TauSim,
    KMax,
    R,
    Lambda,
    Beta,
}

impl std::str::FromStr for SweepParam {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let key: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect::<String>()
            .to_lowercase();
        Ok(match key.as_str() {
            "n" => SweepParam::N,
            "tausim" | "τsim" => SweepParam::TauSim,
            "kmax" => SweepParam::KMax,
            "r" => SweepParam::R,
            "lambda" | "λ" => SweepParam::Lambda,
            "beta" | "β" => SweepParam::Beta,
            _ => return Err(CliError::UnknownParam(s.to_string())),
        })
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::N => "N",
            SweepParam::TauSim => "tau_sim",
            SweepParam::KMax => "K_max",
            SweepParam::R => "R",
            SweepParam::Lambda => "lambda",
            SweepParam::Beta => "beta",
        }
    }

    pub fn apply(self, cfg: &EngineConfig, value: &str) -> Result<EngineConfig, CliError> {
        let bad = || CliError::BadValue(value.to_string());
        let int = || value.trim().parse::<usize>().map_err(|_| bad());
        let real = || value.trim().parse::<f64>().map_err(|_| bad());
        let mut c = cfg.clone();
        match self {
            SweepParam::N => c.n = int()?,
            SweepParam::TauSim => c.tau_sim = real()?,
            SweepParam::KMax => c.k_max = int()?,
            SweepParam::R => c.r = int()?,
            SweepParam::Lambda => c.lambda = real()?,
            SweepParam::Beta => c.beta = real()?,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub seed: u64,
    pub problems: usize,
    pub accuracy: f64,
    pub avg_calls: f64,
    pub avg_usage: f64,
    pub avg_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

/// Runs the task stream once per value, all with the config's seed.
pub fn cmd_sweep(
    cfg: &EngineConfig,
    source: &TaskSource,
    param: &str,
    values: &[String],
) -> Result<SweepReport, CliError> {
    let param: SweepParam = param.parse()?;
    let configs: Vec<EngineConfig> = values.iter().map(|v| param.apply(cfg, v)).collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, c) in values.iter().zip(&configs) {
        let runs = execute(source, c, &format!("sweep-{}-{}", param.name(), value.trim()))?;
        let s = summarize(&runs);
        rows.push(SweepRow {
            value: value.trim().to_string(),
            seed: c.seed,
            problems: s.problems,
            accuracy: s.accuracy,
            avg_calls: s.avg_calls,
            avg_usage: s.avg_usage,
            avg_k: s.modes.avg_k,
        });
    }
    Ok(SweepReport { param, rows })
}

pub fn render_sweep(r: &SweepReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8} {:>6} {:>8} {:>9} {:>9} {:>9} {:>6}",
        r.param.name(),
        "seed",
        "problems",
        "accuracy",
        "avg_calls",
        "avg_usage",
        "avg_k"
    );
    for row in &r.rows {
        let k = row.avg_k.map_or_else(|| "-".to_string(), |k| format!("{k:.2}"));
        let _ = writeln!(
            out,
            "{:>8} {:>6} {:>8} {:>8.2}% {:>9.2} {:>9.2} {:>6}",
            row.value,
            row.seed,
            row.problems,
            100.0 * row.accuracy,
            row.avg_calls,
            row.avg_usage,
            k
        );
    }
    out
}

pub fn write_sweep(r: &SweepReport, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    write_file(&out.join("sweep.txt"), &render_sweep(r))?;
    write_file(&out.join("sweep.json"), &to_json(r))
}

/// Range of the calibration temperature seen in the traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRange {
    pub first: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub files: usize,
    pub records: usize,
    pub risk: RiskReport,
    pub temperature: TemperatureRange,
}

fn read_traces(dir: &Path) -> Result<Vec<(String, Vec<TraceRecord>)>, CliError> {
    let files = trace::read_dir(dir).map_err(io_err(format!("reading {}", dir.display())))?;
    if files.iter().all(|(_, r)| r.is_empty()) {
        return Err(CliError::NoTraces(dir.to_path_buf()));
    }
    Ok(files)
}

pub fn cmd_report(dir: &Path) -> Result<TraceReport, CliError> {
    let files = read_traces(dir)?;
    let records: Vec<TraceRecord> = files.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
    let temps: Vec<f64> = records.iter().map(|r| r.temperature).collect();
    Ok(TraceReport {
        files: files.len(),
        records: records.len(),
        risk: risk_report(&records),
        temperature: TemperatureRange {
            first: temps[0],
            last: temps[temps.len() - 1],
            min: temps.iter().copied().fold(f64::INFINITY, f64::min),
            max: temps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        },
    })
}

pub fn render_report(r: &TraceReport) -> String {
    let mut out = format!("{} trace files, {} records\n\n", r.files, r.records);
    out.push_str(&render_risk_report(&r.risk));
    let t = r.temperature;
    let _ = writeln!(
        out,
        "temperature   first {:.4}, last {:.4}, range [{:.4}, {:.4}]",
        t.first, t.last, t.min, t.max
    );
    out
}

pub fn write_report(r: &TraceReport, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    write_file(&out.join("report.txt"), &render_report(r))?;
    write_file(&out.join("report.json"), &to_json(r))
}

/// Replays a trace file, or every trace file in a directory.
pub fn cmd_replay(path: &Path) -> Result<Vec<(String, ReplayReport)>, CliError> {
    let files: Vec<(String, Vec<TraceRecord>)> = if path.is_dir() {
        read_traces(path)?
    } else {
        let records = trace::read_jsonl(path).map_err(io_err(format!("reading {}", path.display())))?;
        vec![(path.display().to_string(), records)]
    };
    Ok(files
        .into_iter()
        .map(|(name, records)| (name, trace::replay(&records, REPLAY_TOLERANCE)))
        .collect())
}

pub fn render_replay(reports: &[(String, ReplayReport)]) -> String {
    let mut out = String::new();
    for (name, r) in reports {
        let status = if r.ok() { "ok" } else { "MISMATCH" };
        let _ = writeln!(
            out,
            "{status:<8} {name}: {} records, {} checks, max deviation {:.3e}",
            r.records, r.checks, r.max_deviation
        );
        for f in &r.failures {
            let _ = writeln!(out, "         {f}");
        }
    }
    out
}

/// Mode percentages for a set of runs, used by tests and the summary.
pub fn mode_percentages(runs: &[ProblemRun]) -> riskloop_core::report::ModeStats {
    let records: Vec<TraceRecord> = runs.iter().flat_map(|r| r.records.iter().cloned()).collect();
    mode_stats(&records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use riskloop_core::streams;

    #[test]
    fn sweep_params_parse_loosely() {
        for (s, p) in [
            ("N", SweepParam::N),
            ("tau_sim", SweepParam::TauSim),
            ("K_max", SweepParam::KMax),
            ("k-max", SweepParam::KMax),
            ("R", SweepParam::R),
            ("λ", SweepParam::Lambda),
            ("beta", SweepParam::Beta),
        ] {
            assert_eq!(s.parse::<SweepParam>().unwrap(), p);
        }
        assert!(matches!("gamma".parse::<SweepParam>(), Err(CliError::UnknownParam(_))));
    }

    #[test]
    fn sweep_values_are_checked() {
        let cfg = EngineConfig::default();
        assert!(matches!(SweepParam::N.apply(&cfg, "x"), Err(CliError::BadValue(_))));
        assert!(matches!(SweepParam::TauSim.apply(&cfg, "1.5"), Err(CliError::Core(_))));
        assert_eq!(SweepParam::Beta.apply(&cfg, " 0.1").unwrap().beta, 0.1);
    }

    #[test]
    fn empty_sweep_is_empty() {
        let src = TaskSource::Synthetic(streams::zero_ambiguity(3));
        let r = cmd_sweep(&EngineConfig::default(), &src, "K_max", &[]).unwrap();
        assert!(r.rows.is_empty());
        assert!(matches!(
            cmd_sweep(&EngineConfig::default(), &src, "bogus", &[]),
            Err(CliError::UnknownParam(_))
        ));
    }

    #[test]
    fn overrides_apply_ablations() {
        let o = Overrides {
            seed: Some(9),
            parallelism: Some(1),
            ablate: vec![Ablation::Branching, Ablation::Calibration],
            recovery: Some(RecoveryMode::LocalRetry),
        };
        let c = o.apply(EngineConfig::default()).unwrap();
        assert_eq!(
            (c.seed, c.parallelism, c.recovery_mode),
            (9, 1, RecoveryMode::LocalRetry)
        );
        assert!(c.disable_branching && c.disable_calibration && !c.disable_sensing);
        let bad = Overrides {
            parallelism: Some(0),
            ..Overrides::default()
        };
        assert!(bad.apply(EngineConfig::default()).is_err());
    }

    #[test]
    fn zero_ambiguity_runs_route_direct_at_low_initial_temperature() {
        let cfg = EngineConfig {
            initial_temperature: 0.5,
            ..EngineConfig::default()
        };
        let runs = execute(&TaskSource::Synthetic(streams::zero_ambiguity(10)), &cfg, "t").unwrap();
        let m = mode_percentages(&runs);
        assert!(m.percent(riskloop_core::types::Mode::Direct) >= 90.0, "{m:?}");
    }
}
