//! Domain types shared by every stage: problems, step records, budgets and
//! run outcomes.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// A real number checked to lie in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Unit(f64);

impl Unit {
    pub const ZERO: Unit = Unit(0.0);
    pub const ONE: Unit = Unit(1.0);

    pub fn new(value: f64) -> Result<Self> {
        Self::checked("value", value)
    }

    pub fn checked(field: &'static str, value: f64) -> Result<Self> {
        if value.is_finite() && (0.0..=1.0).contains(&value) {
            Ok(Unit(value))
        } else {
            Err(CoreError::OutOfRange { field, value })
        }
    }

    /// Clamps a finite value into `[0, 1]`. NaN maps to 0.
    pub fn saturating(value: f64) -> Self {
        if value.is_nan() {
            Unit(0.0)
        } else {
            Unit(value.clamp(0.0, 1.0))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Unit {
    type Error = CoreError;

    fn try_from(value: f64) -> Result<Self> {
        Unit::new(value)
    }
}

impl From<Unit> for f64 {
    fn from(u: Unit) -> f64 {
        u.0
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Math,
    Code,
    Qa,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub id: String,
    pub statement: String,
    pub task_kind: TaskKind,
    /// Maximum number of workflow steps.
    pub horizon: usize,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl ProblemSpec {
    pub fn new(id: impl Into<String>, statement: impl Into<String>, kind: TaskKind, horizon: usize) -> Result<Self> {
        let spec = ProblemSpec {
            id: id.into(),
            statement: statement.into(),
            task_kind: kind,
            horizon,
            metadata: BTreeMap::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(CoreError::InvalidInput("problem id must be non-empty".into()));
        }
        if self.horizon == 0 {
            return Err(CoreError::InvalidInput("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Execution regime chosen for a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    Refine,
    Branch,
    Direct,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Direct => "Direct",
            Mode::Branch => "Branch",
            Mode::Refine => "Refine",
        }
    }
}

/// Which node a failed verification re-executes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    /// Influence-traced root cause.
    #[default]
    RootCause,
    /// Regenerate every step from the first.
    FullRestart,
    /// Re-execute only the failing step.
    LocalRetry,
}

impl std::str::FromStr for RecoveryMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "root_cause" | "rootcause" => Ok(RecoveryMode::RootCause),
            "full_restart" | "fullrestart" => Ok(RecoveryMode::FullRestart),
            "local_retry" | "localretry" => Ok(RecoveryMode::LocalRetry),
            other => Err(CoreError::InvalidInput(format!("unknown recovery mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
    NotRun,
}

/// Immutable record of one executed (or escalated) workflow step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_id: usize,
    /// Workflow position the step executes; re-executions share a position.
    pub position: usize,
    pub raw_uncertainty: Unit,
    pub calibrated_uncertainty: Unit,
    pub propagated_risk: Unit,
    pub confidence: Unit,
    pub mode: Mode,
    pub branch_count: usize,
    pub output: String,
    pub verifier_outcome: Verdict,
    #[serde(default)]
    pub slot_uncertainties: Vec<(String, Unit)>,
}

impl StepRecord {
    /// Checks the record-level invariants given the compound risk that was
    /// used to derive `confidence`.
    pub fn validate(&self, compound_risk: f64) -> Result<()> {
        if (self.confidence.get() - (1.0 - compound_risk)).abs() > 1e-12 {
            return Err(CoreError::InvalidInput(format!(
                "confidence {} does not equal 1 - risk {}",
                self.confidence, compound_risk
            )));
        }
        if self.mode != Mode::Branch && self.branch_count != 0 {
            return Err(CoreError::InvalidInput("branch count set outside Branch mode".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Sampler,
    Verifier,
    Embed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub sampler: f64,
    pub verifier: f64,
    pub embed: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            sampler: 1.0,
            verifier: 1.0,
            embed: 0.0,
        }
    }
}

impl CostWeights {
    pub fn weight(&self, kind: CallKind) -> f64 {
        match kind {
            CallKind::Sampler => self.sampler,
            CallKind::Verifier => self.verifier,
            CallKind::Embed => self.embed,
        }
    }
}

/// Returned when a call would push usage past the budget. The call is not
/// issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetExhausted;

/// Weighted call accounting against a fixed budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub budget: u64,
    pub sampler_calls: u64,
    pub verifier_calls: u64,
    pub embed_calls: u64,
    pub cost_weights: CostWeights,
}

impl BudgetLedger {
    pub fn new(budget: u64) -> Self {
        Self::with_weights(budget, CostWeights::default())
    }

    pub fn with_weights(budget: u64, cost_weights: CostWeights) -> Self {
        BudgetLedger {
            budget,
            sampler_calls: 0,
            verifier_calls: 0,
            embed_calls: 0,
            cost_weights,
        }
    }

    pub fn usage(&self) -> f64 {
        self.cost_weights.sampler * self.sampler_calls as f64
            + self.cost_weights.verifier * self.verifier_calls as f64
            + self.cost_weights.embed * self.embed_calls as f64
    }

    pub fn remaining(&self) -> f64 {
        self.budget as f64 - self.usage()
    }

    pub fn exhausted(&self) -> bool {
        self.usage() >= self.budget as f64
    }

    pub fn can_afford(&self, kind: CallKind, count: u64) -> bool {
        self.usage() + self.cost_weights.weight(kind) * count as f64 <= self.budget as f64 + 1e-9
    }

    /// Records `count` calls of `kind` if the budget allows all of them.
    pub fn charge(&mut self, kind: CallKind, count: u64) -> std::result::Result<(), BudgetExhausted> {
        if !self.can_afford(kind, count) {
            return Err(BudgetExhausted);
        }
        match kind {
            CallKind::Sampler => self.sampler_calls += count,
            CallKind::Verifier => self.verifier_calls += count,
            CallKind::Embed => self.embed_calls += count,
        }
        Ok(())
    }

    /// Sampler plus verifier calls, unweighted.
    pub fn llm_calls(&self) -> u64 {
        self.sampler_calls + self.verifier_calls
    }
}

/// Outcome of one problem run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub problem_id: String,
    pub final_output: String,
    pub solved: bool,
    pub refinements_used: usize,
    pub total_usage: f64,
    pub ledger: BudgetLedger,
    pub trace_path: Option<String>,
}
