//! Engine-facing sampler, embedder and verifier backed by [`ChatClient`].

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};

use riskloop_core::providers::hash_embed::{hash_embed, tokens};
use riskloop_core::providers::{
    EmbedRequest, Embedder, ProviderError, Reference, Sample, Sampler, SamplerRequest, StepContext, Verifier,
    VerifyRequest,
};
use riskloop_core::types::{ProblemSpec, TaskKind, Verdict};
use serde_json::Value;

use crate::client::ChatClient;
use crate::prompts;

/// Share of a producer's output tokens a sample must contain to count as
/// consuming it.
pub const QUOTE_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LiveProviderOptions {
    /// Issue a structured-understanding call alongside each sampling request
    /// and attach its fields as slots.
    pub understanding: bool,
    /// Verify terminal answers against the problem's `answer` metadata
    /// instead of asking the model, when that metadata is present.
    pub reference_answers: bool,
}

pub struct LiveProvider {
    client: ChatClient,
    options: LiveProviderOptions,
    understanding_calls: AtomicU64,
}

impl LiveProvider {
    pub fn new(client: ChatClient, options: LiveProviderOptions) -> Self {
        LiveProvider {
            client,
            options,
            understanding_calls: AtomicU64::new(0),
        }
    }

    pub fn client(&self) -> &ChatClient {
        &self.client
    }

    /// Understanding requests issued; these are not charged to the engine budget.
    pub fn understanding_calls(&self) -> u64 {
        self.understanding_calls.load(Ordering::Relaxed)
    }

    fn understand(
        &self,
        problem: &ProblemSpec,
        temperature: f64,
        n: usize,
    ) -> Result<Vec<Option<BTreeMap<String, String>>>, ProviderError> {
        let prompt = understanding_prompt(problem);
        let texts = self.client.chat(&self.client.chat_request(&prompt, temperature, n))?;
        self.understanding_calls.fetch_add(1, Ordering::Relaxed);
        Ok(texts
            .iter()
            .map(|t| parse_understanding(t, problem.task_kind))
            .collect())
    }
}

fn meta<'a>(problem: &'a ProblemSpec, key: &str, default: &'a str) -> &'a str {
    problem.metadata.get(key).map(String::as_str).unwrap_or(default)
}

fn default_answer_form(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Code => "code",
        TaskKind::Qa => "entity",
        TaskKind::Math | TaskKind::Synthetic => "number",
    }
}

pub fn understanding_prompt(problem: &ProblemSpec) -> String {
    match problem.task_kind {
        TaskKind::Qa => prompts::render(
            prompts::UNDERSTANDING_QA,
            &[
                ("context", meta(problem, "context", "")),
                ("question", &problem.statement),
            ],
        ),
        _ => prompts::render(prompts::UNDERSTANDING_MATH, &[("problem_text", &problem.statement)]),
    }
}

fn step_description(problem: &ProblemSpec, position: usize, horizon: usize) -> String {
    match problem.metadata.get(&format!("step_{position}")) {
        Some(d) => format!("step {position}: {d}"),
        None => format!("step {position} of {horizon}"),
    }
}

/// Full prompt for one sampling request at `context.position`.
pub fn solve_prompt(problem: &ProblemSpec, context: &StepContext) -> String {
    let form = meta(problem, "answer_form", default_answer_form(problem.task_kind));
    let mut prompt = match &context.refinement {
        Some(note) => prompts::render(
            prompts::REFINE,
            &[
                ("problem_text", &problem.statement),
                ("previous_answer", &note.previous_answer),
                ("verdict", &note.verdict),
                ("failure_reason", &note.failure_reason),
                ("root_cause", &note.root_cause),
                (
                    "step_description",
                    &step_description(problem, context.position, context.horizon),
                ),
            ],
        ),
        None => match problem.task_kind {
            TaskKind::Code => prompts::render(
                prompts::SOLVE_CODE,
                &[
                    ("problem_text", &problem.statement),
                    (
                        "function_signature",
                        meta(problem, "function_signature", "def solve(*args):"),
                    ),
                ],
            ),
            TaskKind::Qa => prompts::render(
                prompts::SOLVE_QA,
                &[
                    ("context", meta(problem, "context", "")),
                    ("question", &problem.statement),
                    ("answer_form", form),
                ],
            ),
            TaskKind::Math | TaskKind::Synthetic => prompts::render(
                prompts::SOLVE_MATH,
                &[("problem_text", &problem.statement), ("answer_form", form)],
            ),
        },
    };
    if context.horizon > 1 {
        prompt.push_str(&format!(
            "\n\nCurrent {}.\n",
            step_description(problem, context.position, context.horizon)
        ));
        for (k, out) in context.upstream.range(..context.position) {
            prompt.push_str(&format!("\nOutput of step {k}:\n{out}\n"));
        }
    }
    if !context.avoid.is_empty() {
        prompt.push_str("\nThese answers were already rejected; do not repeat them:\n");
        for a in &context.avoid {
            prompt.push_str(&format!("- {a}\n"));
        }
    }
    prompt
}

pub fn verify_prompt(problem: &ProblemSpec, answer: &str) -> String {
    match problem.task_kind {
        TaskKind::Qa => prompts::render(
            prompts::VERIFY_QA,
            &[
                ("context", meta(problem, "context", "")),
                ("question", &problem.statement),
                ("answer", answer),
            ],
        ),
        kind => prompts::render(
            prompts::VERIFY_MATH,
            &[
                ("problem_text", &problem.statement),
                ("answer", answer),
                ("answer_form", meta(problem, "answer_form", default_answer_form(kind))),
            ],
        ),
    }
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.split_once('\n').map(|(_, body)| body).unwrap_or("");
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

fn slot_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items
            .iter()
            .map(|i| match i.get("info") {
                Some(info) => slot_value(info),
                None => slot_value(i),
            })
            .collect::<Vec<_>>()
            .join("; "),
        Value::Null => "null".into(),
        other => other.to_string(),
    }
}

/// Parses a structured-understanding reply. The reply must be a single JSON
/// object (optionally inside a code fence) with every declared field.
pub fn parse_understanding(text: &str, kind: TaskKind) -> Option<BTreeMap<String, String>> {
    let v: Value = serde_json::from_str(strip_fences(text)).ok()?;
    let obj = v.as_object()?;
    let mut slots = BTreeMap::new();
    match kind {
        TaskKind::Qa => {
            for key in [
                "question_type",
                "answer_form",
                "required_hops",
                "key_entities",
                "reasoning_chain",
            ] {
                slots.insert(key.to_string(), slot_value(obj.get(key)?));
            }
        }
        _ => {
            for key in ["goal", "constraints", "inputs"] {
                slots.insert(key.to_string(), slot_value(obj.get(key)?));
            }
            let outputs = obj.get("outputs")?.as_object()?;
            for key in ["answer_form", "units", "format"] {
                slots.insert(key.to_string(), slot_value(outputs.get(key)?));
            }
        }
    }
    Some(slots)
}

/// Reads the `verdict` field of a verification reply. Replies that do not
/// carry an explicit PASS are failures.
pub fn parse_verdict(text: &str) -> Verdict {
    let body = strip_fences(text);
    let parsed: Option<Value> = serde_json::from_str(body).ok().or_else(|| {
        let (start, end) = (body.find('{')?, body.rfind('}')?);
        serde_json::from_str(body.get(start..=end)?).ok()
    });
    match parsed.as_ref().and_then(|v| v.get("verdict")).and_then(Value::as_str) {
        Some(s) if s.trim().eq_ignore_ascii_case("pass") => Verdict::Pass,
        _ => Verdict::Fail,
    }
}

fn names_step(text: &str, k: usize) -> bool {
    let lower = text.to_lowercase();
    let needle = format!("step {k}");
    lower.match_indices(&needle).any(|(i, _)| {
        let before = lower[..i].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after = lower[i + needle.len()..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_ascii_digit());
        before && after
    })
}

fn quotes(text: &str, output: &str) -> bool {
    let have: BTreeSet<String> = tokens(text).collect();
    let want: Vec<String> = tokens(output).collect();
    if want.is_empty() {
        return false;
    }
    let hit = want.iter().filter(|t| have.contains(*t)).count();
    hit as f64 >= QUOTE_FRACTION * want.len() as f64
}

/// Upstream steps a sample consumed: it names `step k` or contains at least
/// 60% of step k's output tokens. The consumed text is the sample itself.
pub fn detect_references(text: &str, upstream: &BTreeMap<usize, String>, position: usize) -> Vec<Reference> {
    upstream
        .range(..position)
        .filter(|(k, out)| names_step(text, **k) || quotes(text, out))
        .map(|(k, _)| Reference {
            producer: *k,
            consumed: text.to_string(),
        })
        .collect()
}

impl Sampler for LiveProvider {
    fn sample(&self, problem: &ProblemSpec, request: &SamplerRequest) -> Result<Vec<Sample>, ProviderError> {
        request.validate()?;
        let prompt = solve_prompt(problem, &request.context);
        let texts = self
            .client
            .chat(&self.client.chat_request(&prompt, request.temperature, request.n))?;
        let understood = if self.options.understanding && request.temperature > 0.0 {
            Some(self.understand(problem, request.temperature, request.n)?)
        } else {
            None
        };
        Ok(texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| {
                let references = detect_references(&text, &request.context.upstream, request.context.position);
                let slots = understood.as_ref().map(|u| u[i].clone());
                Sample {
                    slot_parse_failed: matches!(slots, Some(None)),
                    slots: slots.flatten(),
                    references,
                    text,
                }
            })
            .collect())
    }
}

impl Embedder for LiveProvider {
    fn embed(&self, request: &EmbedRequest<'_>) -> Result<Vec<Vec<f64>>, ProviderError> {
        if self.client.config().embed_model.is_some() {
            return self.client.embed(request.texts);
        }
        request
            .texts
            .iter()
            .map(|t| {
                if tokens(t).next().is_some() {
                    hash_embed(t)
                } else {
                    hash_embed("empty")
                }
            })
            .collect()
    }
}

impl Verifier for LiveProvider {
    fn verify(&self, request: &VerifyRequest<'_>) -> Result<Verdict, ProviderError> {
        if self.options.reference_answers && request.problem.metadata.contains_key("answer") {
            return ReferenceVerifier.verify(request);
        }
        let prompt = verify_prompt(request.problem, request.answer);
        let reply = self.client.chat(&self.client.chat_request(&prompt, 0.0, 1))?;
        Ok(parse_verdict(&reply[0]))
    }
}

/// Checks terminal answers against the problem's `answer` metadata: the last
/// number in the answer when the reference is numeric, otherwise a
/// whole-word, case-insensitive match. Intermediate steps pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceVerifier;

fn last_number(text: &str) -> Option<f64> {
    let cleaned = text.replace(',', "");
    let mut best = None;
    let mut cur = String::new();
    for c in cleaned.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() || c == '.' || (c == '-' && cur.is_empty()) {
            cur.push(c);
        } else {
            if let Ok(v) = cur.trim_end_matches('.').parse::<f64>() {
                best = Some(v);
            }
            cur.clear();
            if c == '-' {
                cur.push(c);
            }
        }
    }
    best
}

impl Verifier for ReferenceVerifier {
    fn verify(&self, request: &VerifyRequest<'_>) -> Result<Verdict, ProviderError> {
        let Some(reference) = request.problem.metadata.get("answer") else {
            return Err(ProviderError::InvalidRequest(format!(
                "problem {} has no reference answer",
                request.problem.id
            )));
        };
        if !request.terminal {
            return Ok(Verdict::Pass);
        }
        let ok = match reference.trim().replace(',', "").parse::<f64>() {
            Ok(want) => last_number(request.answer).is_some_and(|got| (got - want).abs() <= 1e-6 * want.abs().max(1.0)),
            Err(_) => {
                let want: Vec<String> = tokens(reference).collect();
                let have: Vec<String> = tokens(request.answer).collect();
                !want.is_empty() && have.windows(want.len()).any(|w| w == want.as_slice())
            }
        };
        Ok(if ok { Verdict::Pass } else { Verdict::Fail })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use riskloop_core::providers::RefinementNote;

    fn problem(kind: TaskKind) -> ProblemSpec {
        let mut p = ProblemSpec::new("p", "What is 6 times 7?", kind, 1).unwrap();
        p.metadata.insert("answer".into(), "42".into());
        p
    }

    #[test]
    fn understanding_parses_math_fields() {
        let reply = r#"```json
{"goal": "product", "constraints": ["integer"], "inputs": ["6", "7"],
 "outputs": {"answer_form": "number", "units": null, "format": "plain"},
 "plan": ["multiply"], "complexity": "low"}
```"#;
        let slots = parse_understanding(reply, TaskKind::Math).unwrap();
        assert_eq!(slots.len(), 6);
        assert_eq!(slots["inputs"], "6; 7");
        assert_eq!(slots["units"], "null");
        assert!(parse_understanding("the goal is 42", TaskKind::Math).is_none());
        assert!(parse_understanding(r#"{"goal": "x"}"#, TaskKind::Math).is_none());
    }

    #[test]
    fn understanding_parses_qa_fields() {
        let reply = r#"{"question_type": "factoid", "answer_form": "entity",
            "required_hops": [{"hop": 1, "info": "find A"}, {"hop": 2, "info": "find B"}],
            "key_entities": ["A"], "reasoning_chain": "A then B"}"#;
        let slots = parse_understanding(reply, TaskKind::Qa).unwrap();
        assert_eq!(slots["required_hops"], "find A; find B");
    }

    #[test]
    fn verdicts_fail_closed() {
        assert_eq!(parse_verdict(r#"{"verdict": "PASS", "reason": "ok"}"#), Verdict::Pass);
        assert_eq!(
            parse_verdict("Looks right.\n{\"verdict\": \"pass\"}\nDone"),
            Verdict::Pass
        );
        assert_eq!(parse_verdict(r#"{"verdict": "FAIL"}"#), Verdict::Fail);
        assert_eq!(parse_verdict("PASS"), Verdict::Fail);
    }

    #[test]
    fn references_by_name_or_quote() {
        let up = BTreeMap::from([(0, "the total is 42 apples".to_string()), (1, "zebra".to_string())]);
        let r = detect_references("Using step 1 we get 7", &up, 2);
        assert_eq!(r.iter().map(|r| r.producer).collect::<Vec<_>>(), [1]);
        assert_eq!(r[0].consumed, "Using step 1 we get 7");
        assert!(detect_references("step 10 says so", &up, 2).is_empty());
        let r = detect_references("so the total is 42 overall", &up, 2);
        assert_eq!(r.iter().map(|r| r.producer).collect::<Vec<_>>(), [0]);
        assert!(detect_references("total 42", &up, 2).is_empty());
        assert!(detect_references("step 1", &up, 1).is_empty());
    }

    #[test]
    fn solve_prompt_switches_to_refinement() {
        let p = problem(TaskKind::Math);
        let mut ctx = StepContext {
            horizon: 1,
            ..StepContext::default()
        };
        let plain = solve_prompt(&p, &ctx);
        assert!(plain.starts_with("Solve the following math problem") && plain.contains("Final answer format: number"));
        ctx.refinement = Some(RefinementNote {
            previous_answer: "41".into(),
            verdict: "Fail".into(),
            failure_reason: "wrong".into(),
            root_cause: "step 0".into(),
        });
        ctx.avoid = vec!["41".into()];
        let refined = solve_prompt(&p, &ctx);
        assert!(refined.starts_with("The previous solution failed verification."));
        assert!(refined.contains("Previous Attempt: 41") && refined.contains("Affected Step: step 0 of 1"));
        assert!(refined.ends_with("- 41\n"));
    }

    #[test]
    fn multi_step_prompt_lists_upstream_outputs() {
        let mut p = problem(TaskKind::Qa);
        p.horizon = 3;
        p.metadata.insert("step_2".into(), "combine".into());
        let ctx = StepContext {
            position: 2,
            horizon: 3,
            upstream: BTreeMap::from([(0, "A".to_string()), (1, "B".to_string())]),
            ..StepContext::default()
        };
        let s = solve_prompt(&p, &ctx);
        assert!(s.contains("Current step 2: combine."));
        assert!(s.contains("Output of step 0:\nA\n") && s.contains("Output of step 1:\nB\n"));
    }

    #[test]
    fn reference_verifier_matches_numbers_and_words() {
        let p = problem(TaskKind::Math);
        let v = |answer: &str, terminal| {
            ReferenceVerifier
                .verify(&VerifyRequest {
                    problem: &p,
                    position: 0,
                    terminal,
                    answer,
                })
                .unwrap()
        };
        assert_eq!(v("6*7 = 42.", true), Verdict::Pass);
        assert_eq!(v("42 or maybe 41", true), Verdict::Fail);
        assert_eq!(v("anything", false), Verdict::Pass);
        let mut q = problem(TaskKind::Qa);
        q.metadata.insert("answer".into(), "New York".into());
        let r = ReferenceVerifier.verify(&VerifyRequest {
            problem: &q,
            position: 0,
            terminal: true,
            answer: "It is new york city.",
        });
        assert_eq!(r.unwrap(), Verdict::Pass);
        assert_eq!(last_number("x = -3.5, y = 1,200"), Some(1200.0));
    }
}
