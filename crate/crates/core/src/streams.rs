//! Seeded generators for synthetic task streams and a runner that pushes a
//! stream through the engine with shared stream state.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{run_problem, EngineConfig, EngineError, RunOutput, StreamState};
use crate::error::Result;
use crate::providers::synthetic::{
    DeclaredReference, Interpretation, LocalVerifier, SyntheticProvider, SyntheticStep, SyntheticTask,
};
use crate::providers::Providers;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    ZeroAmbiguity,
    MixedAmbiguity,
    GradedAmbiguity,
    Overconfident,
    Underconfident,
    Adversarial,
    HighAmbiguity,
}

impl std::str::FromStr for StreamKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.replace('-', "_").as_str() {
            "zero_ambiguity" => StreamKind::ZeroAmbiguity,
            "mixed_ambiguity" => StreamKind::MixedAmbiguity,
            "graded_ambiguity" => StreamKind::GradedAmbiguity,
            "overconfident" => StreamKind::Overconfident,
            "underconfident" => StreamKind::Underconfident,
            "adversarial" => StreamKind::Adversarial,
            "high_ambiguity" => StreamKind::HighAmbiguity,
            other => return Err(format!("unknown stream kind {other}")),
        })
    }
}

pub fn generate(kind: StreamKind, n: usize, seed: u64) -> Vec<SyntheticTask> {
    match kind {
        StreamKind::ZeroAmbiguity => zero_ambiguity(n),
        StreamKind::MixedAmbiguity => mixed_ambiguity(n, seed),
        StreamKind::GradedAmbiguity => graded_ambiguity(n, seed),
        StreamKind::Overconfident => overconfident(n, seed),
        StreamKind::Underconfident => underconfident(n, seed),
        StreamKind::Adversarial => adversarial(n, seed),
        StreamKind::HighAmbiguity => high_ambiguity(n, seed),
    }
}

fn task(id: String, ambiguity: f64, steps: Vec<SyntheticStep>) -> SyntheticTask {
    SyntheticTask {
        id,
        statement: String::new(),
        steps,
        embedding_noise: 0.0,
        metadata: BTreeMap::from([("ambiguity".to_string(), format!("{ambiguity:.4}"))]),
    }
}

/// `correct` on the designated answer, the rest spread evenly over
/// `distractors` wrong answers.
fn spread_step(prefix: &str, correct: f64, distractors: usize) -> SyntheticStep {
    let mut interpretations = vec![Interpretation::new(format!("{prefix}-ok"), correct)];
    let wrong = if distractors == 0 {
        0.0
    } else {
        (1.0 - correct) / distractors as f64
    };
    for j in 0..distractors {
        interpretations.push(Interpretation::new(format!("{prefix}-w{j}"), wrong));
    }
    let total: f64 = interpretations.iter().map(|i| i.probability).sum();
    interpretations[0].probability += 1.0 - total;
    SyntheticStep {
        interpretations,
        correct_index: 0,
        references: Vec::new(),
        verifier: LocalVerifier::Exact,
        slots: Vec::new(),
        tainted_answer: None,
    }
}

fn sure_step(prefix: &str) -> SyntheticStep {
    spread_step(prefix, 1.0, 0)
}

/// Every interpretation is wrong; nothing ever passes.
fn hopeless_step(prefix: &str, interpretations: usize) -> SyntheticStep {
    let mut s = spread_step(prefix, 0.0, interpretations);
    s.interpretations[0].probability = 0.0;
    s
}

pub fn zero_ambiguity(n: usize) -> Vec<SyntheticTask> {
    (0..n)
        .map(|i| task(format!("zero-{i:04}"), 0.0, vec![sure_step("a")]))
        .collect()
}

/// Half of the problems are unambiguous, the rest have a likely but not
/// certain designated reading.
pub fn mixed_ambiguity(n: usize, seed: u64) -> Vec<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let id = format!("mixed-{i:04}");
            if rng.random_bool(0.5) {
                task(id, 0.0, vec![sure_step("a")])
            } else {
                let p = rng.random_range(0.5..0.9);
                task(id, 1.0 - p, vec![spread_step("a", p, 2)])
            }
        })
        .collect()
}

/// Ambiguity `a` uniform on [0, 1]; the designated reading has probability
/// `(1 - a)^2` and six distractors share the rest.
pub fn graded_ambiguity(n: usize, seed: u64) -> Vec<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let a: f64 = rng.random();
            let p = (1.0 - a) * (1.0 - a);
            task(format!("graded-{i:04}"), a, vec![spread_step("a", p, 6)])
        })
        .collect()
}

/// Unambiguous problems of which 60% are wrong no matter what is sampled.
pub fn overconfident(n: usize, seed: u64) -> Vec<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failing: Vec<bool> = (0..n).map(|i| i < n * 3 / 5).collect();
    failing.shuffle(&mut rng);
    failing
        .into_iter()
        .enumerate()
        .map(|(i, fail)| {
            let step = if fail {
                let mut s = spread_step("a", 0.0, 1);
                s.interpretations[0].probability = 0.0;
                s
            } else {
                sure_step("a")
            };
            task(format!("over-{i:04}"), 0.0, vec![step])
        })
        .collect()
}

/// Unambiguous problems that pass, interleaved with highly ambiguous ones
/// whose verifier accepts any reading (90%) or none (10%).
pub fn underconfident(n: usize, seed: u64) -> Vec<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let id = format!("under-{i:04}");
            if rng.random_bool(0.5) {
                return task(id, 0.0, vec![sure_step("a")]);
            }
            let mut s = spread_step("a", 0.1, 9);
            if rng.random_bool(0.9) {
                s.verifier = LocalVerifier::AcceptAny;
            } else {
                s = hopeless_step("a", 10);
            }
            task(id, 1.0, vec![s])
        })
        .collect()
}

/// Nothing ever verifies.
pub fn adversarial(n: usize, seed: u64) -> Vec<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let horizon = rng.random_range(1..=3);
            let spread = rng.random_range(1..=4);
            let steps = (0..horizon).map(|_| hopeless_step("a", spread)).collect();
            task(format!("adv-{i:04}"), 1.0, steps)
        })
        .collect()
}

/// Designated reading with probability 0.2 among four distractors.
pub fn high_ambiguity(n: usize, seed: u64) -> Vec<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let p = rng.random_range(0.1..0.3);
            task(format!("high-{i:04}"), 1.0 - p, vec![spread_step("a", p, 4)])
        })
        .collect()
}

/// Four steps: 0 feeds 1 and 2, which both feed 3. Step 1 almost always
/// produces a reading its own verifier accepts but that taints step 3; only
/// re-executing step 1 can repair the terminal step.
pub fn diamond() -> SyntheticTask {
    let r = |producer| DeclaredReference {
        producer,
        compatibility: 0.5,
        flake_rate: 0.0,
    };
    let mut s1 = SyntheticStep::new(&[("b-wrong", 0.99), ("b-right", 0.01)], 1);
    s1.references = vec![r(0)];
    s1.verifier = LocalVerifier::AcceptAny;
    let mut s2 = SyntheticStep::new(&[("c", 1.0)], 0);
    s2.references = vec![r(0)];
    let mut s3 = SyntheticStep::new(&[("d", 1.0)], 0);
    s3.references = vec![r(1), r(2)];
    SyntheticTask {
        id: "diamond".into(),
        statement: String::new(),
        steps: vec![SyntheticStep::new(&[("a", 1.0)], 0), s1, s2, s3],
        embedding_noise: 0.0,
        metadata: BTreeMap::new(),
    }
}

#[derive(Debug, Clone)]
pub struct StreamRun {
    pub outputs: Vec<RunOutput>,
    pub state: StreamState,
}

impl StreamRun {
    pub fn accuracy(&self) -> f64 {
        if self.outputs.is_empty() {
            return 0.0;
        }
        self.outputs.iter().filter(|o| o.result.solved).count() as f64 / self.outputs.len() as f64
    }

    /// Sampler plus verifier calls over the whole stream.
    pub fn llm_calls(&self) -> u64 {
        self.outputs.iter().map(|o| o.result.ledger.llm_calls()).sum()
    }
}

/// Runs `tasks` in order through one stream state, with run ids
/// `{prefix}-{index}`.
pub fn run_stream(
    tasks: &[SyntheticTask],
    config: &EngineConfig,
    prefix: &str,
) -> std::result::Result<StreamRun, EngineError> {
    let provider = SyntheticProvider::new(tasks.iter().cloned())?;
    let mut state = StreamState::new(config);
    let mut outputs = Vec::with_capacity(tasks.len());
    for (i, t) in tasks.iter().enumerate() {
        let providers = Providers::new(&provider, &provider, &provider);
        outputs.push(run_problem(
            &t.problem_spec(),
            config,
            providers,
            &mut state,
            &format!("{prefix}-{i:04}"),
        )?);
    }
    Ok(StreamRun { outputs, state })
}

/// Checks that generated tasks are valid; used by tests and the CLI.
pub fn validate_all(tasks: &[SyntheticTask]) -> Result<()> {
    tasks.iter().try_for_each(SyntheticTask::validate)
}
