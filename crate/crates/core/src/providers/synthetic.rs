//! Seeded synthetic task environment standing in for an LLM: each step draws
//! interpretations from a categorical distribution, texts embed onto fixed
//! orthogonal centroids plus optional noise, and verification is exact match
//! against the designated interpretation.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{
    fnv1a, mix_seed, EmbedRequest, Embedder, ProviderError, Reference, Sample, Sampler, SamplerRequest, Verifier,
    VerifyRequest,
};
use crate::error::{CoreError, Result};
use crate::sensing::normalize;
use crate::types::{ProblemSpec, TaskKind, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpretation {
    pub answer: String,
    pub probability: f64,
}

impl Interpretation {
    pub fn new(answer: impl Into<String>, probability: f64) -> Self {
        Interpretation {
            answer: answer.into(),
            probability,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalVerifier {
    /// Pass only the designated interpretation.
    #[default]
    Exact,
    /// Pass any interpretation of this step (but not a tainted output).
    AcceptAny,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclaredReference {
    pub producer: usize,
    /// Cosine between the consumed input and the producer's output.
    #[serde(default = "one")]
    pub compatibility: f64,
    /// Probability that a rollout omits the reference.
    #[serde(default)]
    pub flake_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub values: Vec<Interpretation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStep {
    pub interpretations: Vec<Interpretation>,
    pub correct_index: usize,
    #[serde(default)]
    pub references: Vec<DeclaredReference>,
    #[serde(default)]
    pub verifier: LocalVerifier,
    #[serde(default)]
    pub slots: Vec<SlotSpec>,
    /// Output produced whenever a referenced producer's live output is not
    /// that producer's designated answer.
    #[serde(default)]
    pub tainted_answer: Option<String>,
}

impl SyntheticStep {
    pub fn new(interpretations: &[(&str, f64)], correct_index: usize) -> Self {
        SyntheticStep {
            interpretations: interpretations
                .iter()
                .map(|&(a, p)| Interpretation::new(a, p))
                .collect(),
            correct_index,
            references: Vec::new(),
            verifier: LocalVerifier::Exact,
            slots: Vec::new(),
            tainted_answer: None,
        }
    }

    pub fn correct_answer(&self) -> &str {
        &self.interpretations[self.correct_index].answer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: String,
    #[serde(default)]
    pub statement: String,
    pub steps: Vec<SyntheticStep>,
    #[serde(default)]
    pub embedding_noise: f64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn check_distribution(what: &str, values: &[Interpretation]) -> Result<()> {
    if values.is_empty() {
        return Err(CoreError::InvalidInput(format!("{what}: no interpretations")));
    }
    if values
        .iter()
        .any(|i| i.probability.is_nan() || i.probability < 0.0 || i.answer.is_empty())
    {
        return Err(CoreError::InvalidInput(format!("{what}: bad interpretation")));
    }
    let total: f64 = values.iter().map(|i| i.probability).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CoreError::InvalidInput(format!("{what}: probabilities sum to {total}")));
    }
    Ok(())
}

impl SyntheticTask {
    /// One-step task.
    pub fn single(id: impl Into<String>, interpretations: &[(&str, f64)], correct_index: usize) -> Self {
        SyntheticTask {
            id: id.into(),
            statement: String::new(),
            steps: vec![SyntheticStep::new(interpretations, correct_index)],
            embedding_noise: 0.0,
            metadata: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(CoreError::InvalidInput("task id must be non-empty".into()));
        }
        if self.steps.is_empty() {
            return Err(CoreError::InvalidInput(format!("task {}: no steps", self.id)));
        }
        if !(self.embedding_noise >= 0.0 && self.embedding_noise.is_finite()) {
            return Err(CoreError::InvalidInput(format!(
                "task {}: bad embedding noise",
                self.id
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            let what = format!("task {} step {i}", self.id);
            check_distribution(&what, &step.interpretations)?;
            if step.correct_index >= step.interpretations.len() {
                return Err(CoreError::InvalidInput(format!("{what}: correct_index out of range")));
            }
            for r in &step.references {
                if r.producer >= i {
                    return Err(CoreError::InvalidInput(format!(
                        "{what}: reference to step {}",
                        r.producer
                    )));
                }
                Unit01::check(r.compatibility)
                    .and(Unit01::check(r.flake_rate))
                    .ok_or_else(|| CoreError::InvalidInput(format!("{what}: reference parameters outside [0, 1]")))?;
            }
            for s in &step.slots {
                check_distribution(&format!("{what} slot {}", s.name), &s.values)?;
            }
        }
        Ok(())
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        ProblemSpec {
            id: self.id.clone(),
            statement: self.statement.clone(),
            task_kind: TaskKind::Synthetic,
            horizon: self.steps.len(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn tainted_text(&self, position: usize) -> String {
        self.steps[position]
            .tainted_answer
            .clone()
            .unwrap_or_else(|| format!("step {position} tainted"))
    }
}

struct Unit01;

impl Unit01 {
    fn check(x: f64) -> Option<()> {
        (0.0..=1.0).contains(&x).then_some(())
    }
}

/// Text of the input consumed at `consumer` from `producer`.
pub fn consumed_text(consumer: usize, producer: usize, output: &str) -> String {
    format!("ref|{consumer}|{producer}|{output}")
}

fn parse_consumed(text: &str) -> Option<(usize, usize, &str)> {
    let mut it = text.splitn(4, '|');
    if it.next()? != "ref" {
        return None;
    }
    let consumer = it.next()?.parse().ok()?;
    let producer = it.next()?.parse().ok()?;
    Some((consumer, producer, it.next()?))
}

#[derive(Debug, Clone)]
struct TaskIndex {
    axes: BTreeMap<String, usize>,
    pair_axes: BTreeMap<(usize, usize), usize>,
    dim: usize,
}

impl TaskIndex {
    fn build(task: &SyntheticTask) -> Self {
        let mut axes = BTreeMap::new();
        let mut pair_axes = BTreeMap::new();
        let mut dim = 0;
        let mut add = |axes: &mut BTreeMap<String, usize>, text: &str| {
            if !axes.contains_key(text) {
                axes.insert(text.to_string(), dim);
                dim += 1;
            }
        };
        for (i, step) in task.steps.iter().enumerate() {
            for it in &step.interpretations {
                add(&mut axes, &it.answer);
            }
            add(&mut axes, &task.tainted_text(i));
            for s in &step.slots {
                for v in &s.values {
                    add(&mut axes, &v.answer);
                }
            }
        }
        for (i, step) in task.steps.iter().enumerate() {
            for r in &step.references {
                pair_axes.insert((i, r.producer), dim);
                dim += 1;
            }
        }
        TaskIndex { axes, pair_axes, dim }
    }
}

/// Sampler, embedder and verifier over a fixed set of synthetic tasks.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    tasks: BTreeMap<String, (SyntheticTask, TaskIndex)>,
}

impl SyntheticProvider {
    pub fn new(tasks: impl IntoIterator<Item = SyntheticTask>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for t in tasks {
            t.validate()?;
            let index = TaskIndex::build(&t);
            if map.insert(t.id.clone(), (t, index)).is_some() {
                return Err(CoreError::InvalidInput("duplicate task id".into()));
            }
        }
        Ok(SyntheticProvider { tasks: map })
    }

    pub fn task(&self, id: &str) -> Option<&SyntheticTask> {
        self.tasks.get(id).map(|(t, _)| t)
    }

    fn lookup(&self, id: &str) -> Result<&(SyntheticTask, TaskIndex), ProviderError> {
        self.tasks
            .get(id)
            .ok_or_else(|| ProviderError::InvalidRequest(format!("unknown synthetic task {id}")))
    }
}

fn draw<'a>(rng: &mut ChaCha8Rng, values: &'a [Interpretation], avoid: &[String]) -> &'a str {
    let allowed: Vec<f64> = values
        .iter()
        .map(|v| if avoid.contains(&v.answer) { 0.0 } else { v.probability })
        .collect();
    let weights: Vec<f64> = if allowed.iter().sum::<f64>() > 0.0 {
        allowed
    } else {
        values.iter().map(|v| v.probability).collect()
    };
    let dist = WeightedIndex::new(&weights).expect("validated distribution");
    &values[dist.sample(rng)].answer
}

impl Sampler for SyntheticProvider {
    fn sample(&self, problem: &ProblemSpec, request: &SamplerRequest) -> Result<Vec<Sample>, ProviderError> {
        request.validate()?;
        let (task, _) = self.lookup(&problem.id)?;
        let ctx = &request.context;
        let step = task
            .steps
            .get(ctx.position)
            .ok_or_else(|| ProviderError::InvalidRequest(format!("no step at position {}", ctx.position)))?;
        let seed = request
            .seed
            .ok_or_else(|| ProviderError::InvalidRequest("synthetic sampling needs a seed".into()))?;
        let tainted = step.references.iter().any(|r| {
            ctx.upstream.get(&r.producer).map(String::as_str) != Some(task.steps[r.producer].correct_answer())
        });
        let taint_text = task.tainted_text(ctx.position);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let one = |rng: &mut ChaCha8Rng| {
            let text = if tainted {
                taint_text.clone()
            } else {
                draw(rng, &step.interpretations, &ctx.avoid).to_string()
            };
            let mut references = Vec::new();
            for r in &step.references {
                let keep = !rng.random_bool(r.flake_rate);
                if let (true, Some(out)) = (keep, ctx.upstream.get(&r.producer)) {
                    references.push(Reference {
                        producer: r.producer,
                        consumed: consumed_text(ctx.position, r.producer, out),
                    });
                }
            }
            let slots = (!step.slots.is_empty()).then(|| {
                step.slots
                    .iter()
                    .map(|s| (s.name.clone(), draw(rng, &s.values, &[]).to_string()))
                    .collect()
            });
            Sample {
                text,
                references,
                slots,
                slot_parse_failed: false,
            }
        };
        if request.temperature == 0.0 {
            let s = one(&mut rng);
            Ok(vec![s; request.n])
        } else {
            Ok((0..request.n).map(|_| one(&mut rng)).collect())
        }
    }
}

impl Embedder for SyntheticProvider {
    fn embed(&self, request: &EmbedRequest<'_>) -> Result<Vec<Vec<f64>>, ProviderError> {
        let (task, index) = self.lookup(request.problem_id)?;
        let axis = |t: &str| {
            index
                .axes
                .get(t)
                .copied()
                .ok_or_else(|| ProviderError::UnknownText(t.to_string()))
        };
        let noise = (task.embedding_noise > 0.0)
            .then(|| Normal::new(0.0, task.embedding_noise).expect("validated noise scale"));
        let mut out = Vec::with_capacity(request.texts.len());
        for (i, text) in request.texts.iter().enumerate() {
            let mut v = vec![0.0; index.dim];
            if let Some((consumer, producer, output)) = parse_consumed(text) {
                let gamma = task
                    .steps
                    .get(consumer)
                    .and_then(|s| s.references.iter().find(|r| r.producer == producer))
                    .map(|r| r.compatibility)
                    .ok_or_else(|| ProviderError::UnknownText(text.clone()))?;
                v[axis(output)?] += gamma;
                v[index.pair_axes[&(consumer, producer)]] += (1.0 - gamma * gamma).max(0.0).sqrt();
            } else {
                v[axis(text)?] = 1.0;
            }
            if let Some(dist) = noise {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[request.seed, fnv1a(text.as_bytes()), i as u64]));
                for x in v.iter_mut() {
                    *x += dist.sample(&mut rng);
                }
            }
            normalize(&mut v);
            out.push(v);
        }
        Ok(out)
    }
}

impl Verifier for SyntheticProvider {
    fn verify(&self, request: &VerifyRequest<'_>) -> Result<Verdict, ProviderError> {
        let (task, _) = self.lookup(&request.problem.id)?;
        let step = task
            .steps
            .get(request.position)
            .ok_or_else(|| ProviderError::InvalidRequest(format!("no step at position {}", request.position)))?;
        let pass = match step.verifier {
            LocalVerifier::Exact => request.answer == step.correct_answer(),
            LocalVerifier::AcceptAny => step.interpretations.iter().any(|i| i.answer == request.answer),
        };
        Ok(if pass && !request.answer.is_empty() {
            Verdict::Pass
        } else {
            Verdict::Fail
        })
    }
}
