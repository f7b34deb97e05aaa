//! Task files: a list of synthetic tasks, a generated synthetic stream, or a
//! list of live problems.

use std::path::Path;

use riskloop_core::providers::SyntheticTask;
use riskloop_core::streams::{self, StreamKind};
use riskloop_core::types::ProblemSpec;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    #[serde(deserialize_with = "stream_kind")]
    pub stream: StreamKind,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

fn stream_kind<'de, D: serde::Deserializer<'de>>(d: D) -> Result<StreamKind, D::Error> {
    String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveSpec {
    pub problems: Vec<ProblemSpec>,
    /// Attach structured-understanding slots to every sampling request.
    #[serde(default)]
    pub understanding: bool,
    /// Verify against each problem's `answer` metadata when present.
    #[serde(default)]
    pub reference_answers: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum RawSource {
    Synthetic(Vec<SyntheticTask>),
    Stream(StreamSpec),
    Live(LiveSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    Synthetic(Vec<SyntheticTask>),
    Live(LiveSpec),
}

impl TaskSource {
    pub fn len(&self) -> usize {
        match self {
            TaskSource::Synthetic(t) => t.len(),
            TaskSource::Live(l) => l.problems.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn parse_tasks(text: &str) -> Result<TaskSource, String> {
    if text.trim().is_empty() {
        return Ok(TaskSource::Synthetic(Vec::new()));
    }
    let raw: RawSource = serde_json::from_str(text).map_err(|e| {
        format!(
            "{e}; expected a list of synthetic tasks, {{\"stream\", \"count\", \"seed\"}} or {{\"problems\": [...]}}"
        )
    })?;
    let source = match raw {
        RawSource::Synthetic(t) => TaskSource::Synthetic(t),
        RawSource::Stream(s) => TaskSource::Synthetic(streams::generate(s.stream, s.count, s.seed)),
        RawSource::Live(l) => TaskSource::Live(l),
    };
    match &source {
        TaskSource::Synthetic(t) => streams::validate_all(t).map_err(|e| e.to_string())?,
        TaskSource::Live(l) => l
            .problems
            .iter()
            .try_for_each(ProblemSpec::validate)
            .map_err(|e| e.to_string())?,
    }
    Ok(source)
}

pub fn load_tasks(path: &Path) -> Result<TaskSource, CliError> {
    let err = |message: String| CliError::Tasks {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    parse_tasks(&text).map_err(err)
}
