//! Stage 1: local semantic uncertainty from Monte Carlo samples, structural
//! complexity cues, the probabilistic dependency graph and risk propagation.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{topological_order, DependencyGraph, Edge, NodeRisk};
use crate::types::Unit;

const NORM_TOLERANCE: f64 = 1e-6;

/// Base cosine threshold before the multi-step relaxation.
pub const BASE_SIMILARITY_THRESHOLD: f64 = 0.85;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero vectors yield 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

pub fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// N sampled texts with aligned unit-norm embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    #[serde(default)]
    pub slot_extractions: Option<Vec<BTreeMap<String, String>>>,
}

impl SampleSet {
    pub fn new(samples: Vec<String>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        let set = SampleSet {
            samples,
            embeddings,
            slot_extractions: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(CoreError::InvalidInput("a sample set needs at least 2 samples".into()));
        }
        if self.samples.len() != self.embeddings.len() {
            return Err(CoreError::InvalidInput("samples and embeddings are not aligned".into()));
        }
        if let Some(slots) = &self.slot_extractions {
            if slots.len() != self.samples.len() {
                return Err(CoreError::InvalidInput("slot extractions are not aligned".into()));
            }
        }
        for (i, e) in self.embeddings.iter().enumerate() {
            let n = norm(e);
            if n == 0.0 {
                return Err(CoreError::DegenerateEmbedding { index: i });
            }
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(CoreError::InvalidInput(format!("embedding {i} is not unit norm ({n})")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticClustering {
    /// Index sets partitioning `0..N`, largest first.
    pub clusters: Vec<Vec<usize>>,
    pub entropy: f64,
    pub threshold_used: f64,
}

impl SemanticClustering {
    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of the graph linking `i, j` whenever
/// `cos(e_i, e_j) >= threshold`. Clusters are sorted by size (descending),
/// then by smallest member; members are ascending.
pub fn cluster_embeddings(embeddings: &[Vec<f64>], threshold: f64) -> Result<Vec<Vec<usize>>> {
    for (i, e) in embeddings.iter().enumerate() {
        if norm(e) == 0.0 {
            return Err(CoreError::DegenerateEmbedding { index: i });
        }
    }
    Ok(cluster_by_similarity(embeddings.len(), threshold, |i, j| {
        cosine(&embeddings[i], &embeddings[j])
    }))
}

/// Same components, from an arbitrary symmetric similarity function.
pub fn cluster_by_similarity(n: usize, threshold: f64, sim: impl Fn(usize, usize) -> f64) -> Vec<Vec<usize>> {
    let mut sets = DisjointSet::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if sim(i, j) >= threshold {
                sets.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = sets.find(i);
        groups.entry(root).or_default().push(i);
    }
    let mut clusters: Vec<Vec<usize>> = groups.into_values().collect();
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    clusters
}

pub fn cluster_samples(samples: &SampleSet, threshold: f64) -> Result<SemanticClustering> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CoreError::InvalidInput(format!(
            "similarity threshold {threshold} not in (0, 1)"
        )));
    }
    samples.validate()?;
    let clusters = cluster_embeddings(&samples.embeddings, threshold)?;
    let sizes: Vec<usize> = clusters.iter().map(Vec::len).collect();
    let entropy = semantic_entropy(&sizes, samples.len())?;
    Ok(SemanticClustering {
        clusters,
        entropy,
        threshold_used: threshold,
    })
}

/// Shannon entropy of the cluster distribution `|c| / N`, normalised by
/// `ln N`.
pub fn semantic_entropy(cluster_sizes: &[usize], n: usize) -> Result<f64> {
    if n < 2 {
        return Err(CoreError::InvalidInput("entropy needs N >= 2".into()));
    }
    if cluster_sizes.iter().sum::<usize>() != n || cluster_sizes.contains(&0) {
        return Err(CoreError::InvalidInput("cluster sizes do not partition N".into()));
    }
    let total = n as f64;
    let h: f64 = cluster_sizes
        .iter()
        .map(|&s| {
            let p = s as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok((h / total.ln()).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Complexity features
// ---------------------------------------------------------------------------

/// Fixed keyword lists driving the presence features.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeywordLists {
    pub math: Vec<String>,
    pub multistep: Vec<String>,
    pub constraint: Vec<String>,
    pub multihop: Vec<String>,
}

impl FromStr for KeywordLists {
    type Err = CoreError;

    fn from_str(text: &str) -> Result<Self> {
        let mut lists = KeywordLists::default();
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_lowercase());
                continue;
            }
            let target = match section.as_deref() {
                Some("math") => &mut lists.math,
                Some("multistep") => &mut lists.multistep,
                Some("constraint") => &mut lists.constraint,
                Some("multihop") => &mut lists.multihop,
                Some(other) => {
                    return Err(CoreError::InvalidInput(format!("unknown keyword section [{other}]")));
                }
                None => {
                    return Err(CoreError::InvalidInput(format!(
                        "keyword on line {} precedes any section header",
                        lineno + 1
                    )));
                }
            };
            target.push(line.to_lowercase());
        }
        Ok(lists)
    }
}

impl KeywordLists {
    /// The lists shipped in `data/keywords.txt`.
    pub fn builtin() -> &'static KeywordLists {
        static LISTS: OnceLock<KeywordLists> = OnceLock::new();
        LISTS.get_or_init(|| {
            include_str!("../data/keywords.txt")
                .parse()
                .expect("bundled keyword file parses")
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComplexityFeatures {
    pub length_score: f64,
    pub math_score: f64,
    pub multistep_score: f64,
    pub constraint_score: f64,
    pub numeric_score: f64,
    pub multihop_score: f64,
    /// Distinct sequential cues found.
    pub n_step: usize,
}

/// Feature weights in order (length, math, multistep, constraint, numeric,
/// multihop).
pub const COMPLEXITY_WEIGHTS: [f64; 6] = [0.1, 0.25, 0.2, 0.2, 0.1, 0.15];

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_phrase(tokens: &[String], phrase: &str) -> bool {
    let parts: Vec<&str> = phrase.split_whitespace().collect();
    if parts.is_empty() || parts.len() > tokens.len() {
        return false;
    }
    tokens
        .windows(parts.len())
        .any(|w| w.iter().zip(&parts).all(|(a, b)| a == b))
}

/// Maximal digit runs, allowing a single inner `.` or `,` between digits.
fn count_numbers(text: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_ascii_digit() {
            count += 1;
            while i < chars.len()
                && (chars[i].is_ascii_digit()
                    || ((chars[i] == '.' || chars[i] == ',') && i + 1 < chars.len() && chars[i + 1].is_ascii_digit()))
            {
                i += 1;
            }
        } else {
            i += 1;
        }
    }
    count
}

pub fn extract_complexity_features(statement: &str) -> Result<ComplexityFeatures> {
    extract_complexity_features_with(statement, KeywordLists::builtin())
}

pub fn extract_complexity_features_with(statement: &str, lists: &KeywordLists) -> Result<ComplexityFeatures> {
    if statement.trim().is_empty() {
        return Err(CoreError::InvalidInput("statement must be non-empty".into()));
    }
    let word_count = statement.split_whitespace().count();
    let tokens = words(statement);
    let presence = |list: &[String]| {
        if list.iter().any(|k| contains_phrase(&tokens, k)) {
            1.0
        } else {
            0.0
        }
    };
    let n_step = lists
        .multistep
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| contains_phrase(&tokens, k))
        .count();
    Ok(ComplexityFeatures {
        length_score: (word_count as f64 / 200.0).min(1.0),
        math_score: presence(&lists.math),
        multistep_score: presence(&lists.multistep),
        constraint_score: presence(&lists.constraint),
        numeric_score: (count_numbers(statement) as f64 / 8.0).min(1.0),
        multihop_score: presence(&lists.multihop),
        n_step,
    })
}

pub fn complexity_score(f: &ComplexityFeatures) -> f64 {
    let values = [
        f.length_score,
        f.math_score,
        f.multistep_score,
        f.constraint_score,
        f.numeric_score,
        f.multihop_score,
    ];
    values.iter().zip(COMPLEXITY_WEIGHTS).map(|(v, w)| v * w).sum()
}

/// `0.85 - 0.05 * min(n_step, 3)`.
pub fn adaptive_similarity_threshold(n_step: usize) -> f64 {
    adaptive_similarity_threshold_from(BASE_SIMILARITY_THRESHOLD, n_step)
}

pub fn adaptive_similarity_threshold_from(base: f64, n_step: usize) -> f64 {
    base - 0.05 * n_step.min(3) as f64
}

// ---------------------------------------------------------------------------
// Dependency graph
// ---------------------------------------------------------------------------

pub fn effective_coupling(activation: f64, compatibility: f64) -> f64 {
    activation * compatibility
}

/// Evidence gathered from N rollouts for graph construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphEvidence {
    /// Per rollout, the observed `(consumer, producer)` reference pairs.
    pub rollouts: Vec<BTreeSet<(usize, usize)>>,
    /// Embedding of each producer step's output.
    pub produced: BTreeMap<usize, Vec<f64>>,
    /// Embedding of the input consumed at `consumer` from `producer`, keyed
    /// `(consumer, producer)`.
    pub consumed: BTreeMap<(usize, usize), Vec<f64>>,
}

/// Fraction of rollouts containing each `(consumer, producer)` pair; pairs
/// never observed are absent.
pub fn activation_frequencies(rollouts: &[BTreeSet<(usize, usize)>]) -> BTreeMap<(usize, usize), f64> {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for rollout in rollouts {
        for &pair in rollout {
            *counts.entry(pair).or_default() += 1;
        }
    }
    let n = rollouts.len() as f64;
    counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect()
}

/// Builds the edges `producer -> consumer` with activation `p`, compatibility
/// `gamma = clamp(cos(consumed, produced), 0, 1)` and coupling `p * gamma`.
pub fn build_dependency_graph(nodes: BTreeMap<usize, NodeRisk>, evidence: &GraphEvidence) -> Result<DependencyGraph> {
    if evidence.rollouts.is_empty() {
        return Err(CoreError::InvalidInput("at least one rollout is required".into()));
    }
    let mut graph = DependencyGraph {
        nodes,
        edges: Vec::new(),
    };
    for ((consumer, producer), p) in activation_frequencies(&evidence.rollouts) {
        let produced = evidence
            .produced
            .get(&producer)
            .ok_or_else(|| CoreError::InvalidInput(format!("no output embedding for step {producer}")))?;
        let consumed = evidence.consumed.get(&(consumer, producer)).ok_or_else(|| {
            CoreError::InvalidInput(format!("no consumed-input embedding for {producer}->{consumer}"))
        })?;
        let gamma = Unit::saturating(cosine(consumed, produced));
        graph.add_edge(Edge::new(producer, consumer, Unit::saturating(p), gamma))?;
    }
    topological_order(&graph)?;
    Ok(graph)
}

/// Fills the propagated risk of every node, in topological order:
/// `clip(u_cal + lambda * max(w * u~) + beta * mean(w * u~))`.
pub fn propagate_risk(graph: &mut DependencyGraph, lambda: f64, beta: f64) -> Result<()> {
    let values = propagate_with(graph, lambda, beta, true)?;
    for (id, v) in values {
        graph.node_mut(id)?.propagated = Unit::saturating(v);
    }
    Ok(())
}

/// The same recurrence without clipping at any node; used to check the
/// analytic growth bound.
pub fn propagate_unclipped(graph: &DependencyGraph, lambda: f64, beta: f64) -> Result<BTreeMap<usize, f64>> {
    propagate_with(graph, lambda, beta, false)
}

fn propagate_with(graph: &DependencyGraph, lambda: f64, beta: f64, clip: bool) -> Result<BTreeMap<usize, f64>> {
    let order = topological_order(graph)?;
    let mut values: BTreeMap<usize, f64> = BTreeMap::new();
    for id in order {
        let base = graph.node(id)?.calibrated.get();
        let contributions: Vec<f64> = graph.incoming(id).map(|e| e.coupling.get() * values[&e.from]).collect();
        let value = if contributions.is_empty() {
            base
        } else {
            let max = contributions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = contributions.iter().sum::<f64>() / contributions.len() as f64;
            base + lambda * max + beta * mean
        };
        values.insert(id, if clip { value.clamp(0.0, 1.0) } else { value });
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_vec(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        normalize(&mut v);
        v
    }

    fn set(embeddings: Vec<Vec<f64>>) -> SampleSet {
        let n = embeddings.len();
        SampleSet::new((0..n).map(|i| format!("s{i}")).collect(), embeddings).unwrap()
    }

    #[test]
    fn identical_embeddings_form_one_cluster() {
        let c = cluster_samples(&set(vec![unit_vec(&[1.0, 0.0]); 5]), 0.85).unwrap();
        assert_eq!(c.clusters, vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(c.entropy, 0.0);
    }

    #[test]
    fn orthogonal_embeddings_are_singletons() {
        let e: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let mut v = vec![0.0; 5];
                v[i] = 1.0;
                v
            })
            .collect();
        let c = cluster_samples(&set(e), 0.85).unwrap();
        assert_eq!(c.clusters.len(), 5);
        assert!((c.entropy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transitive_linkage_merges_chain() {
        let sim = [[1.0, 0.9, 0.6], [0.9, 1.0, 0.9], [0.6, 0.9, 1.0]];
        assert_eq!(cluster_by_similarity(3, 0.85, |i, j| sim[i][j]), vec![vec![0, 1, 2]]);

        // 0.9 / 0.9 / 0.6 is not a Gram matrix; on the sphere use a.c = 0.65.
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.9, (1.0f64 - 0.81).sqrt(), 0.0];
        let cy = (0.9 - 0.9 * 0.65) / b[1];
        let c = vec![0.65, cy, (1.0 - 0.65 * 0.65 - cy * cy).sqrt()];
        assert!((cosine(&a, &c) - 0.65).abs() < 1e-12);
        assert!((cosine(&b, &c) - 0.9).abs() < 1e-12);
        let clusters = cluster_embeddings(&[a, b, c], 0.85).unwrap();
        assert_eq!(clusters, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn zero_embedding_is_degenerate() {
        let err = cluster_embeddings(&[vec![1.0, 0.0], vec![0.0, 0.0]], 0.85).unwrap_err();
        assert_eq!(err, CoreError::DegenerateEmbedding { index: 1 });
    }

    #[test]
    fn entropy_reference_values() {
        assert_eq!(semantic_entropy(&[5], 5).unwrap(), 0.0);
        assert!((semantic_entropy(&[1, 1, 1, 1, 1], 5).unwrap() - 1.0).abs() < 1e-12);
        // -(0.6 ln 0.6 + 0.4 ln 0.4) / ln 5
        assert!((semantic_entropy(&[3, 2], 5).unwrap() - 0.418166).abs() < 1e-6);
        assert!(semantic_entropy(&[3, 1], 5).is_err());
    }

    #[test]
    fn long_statement_saturates_length() {
        let text = vec!["word"; 200].join(" ");
        assert_eq!(extract_complexity_features(&text).unwrap().length_score, 1.0);
    }

    #[test]
    fn plain_statement_has_no_cues() {
        let f = extract_complexity_features("Describe a quiet morning by the lake").unwrap();
        assert_eq!(
            f,
            ComplexityFeatures {
                length_score: 7.0 / 200.0,
                ..ComplexityFeatures::default()
            }
        );
        assert_eq!(f.n_step, 0);
    }

    #[test]
    fn numbers_and_solve() {
        let f = extract_complexity_features("Solve for x when 3 apples cost 12 dollars").unwrap();
        assert_eq!(f.numeric_score, 0.25);
        assert_eq!(f.math_score, 1.0);
        assert_eq!(f.multistep_score, 0.0);
    }

    #[test]
    fn phrases_and_sequence_cues() {
        let f = extract_complexity_features("First add, then divide; finally round. You must use at least 2 steps.")
            .unwrap();
        assert_eq!(f.n_step, 3);
        assert_eq!(f.constraint_score, 1.0);
        assert_eq!(f.multistep_score, 1.0);
        // "atleast" is not the phrase "at least"; "thence" is not "then".
        let g = extract_complexity_features("atleast thence").unwrap();
        assert_eq!(g.constraint_score, 0.0);
        assert_eq!(g.n_step, 0);
    }

    #[test]
    fn decimal_counts_once() {
        assert_eq!(count_numbers("3.5 and 1,000 and 7."), 3);
    }

    #[test]
    fn complexity_weighting() {
        assert_eq!(complexity_score(&ComplexityFeatures::default()), 0.0);
        let all = ComplexityFeatures {
            length_score: 1.0,
            math_score: 1.0,
            multistep_score: 1.0,
            constraint_score: 1.0,
            numeric_score: 1.0,
            multihop_score: 1.0,
            n_step: 5,
        };
        assert!((complexity_score(&all) - 1.0).abs() < 1e-12);
        let mixed = ComplexityFeatures {
            length_score: 0.5,
            math_score: 1.0,
            numeric_score: 0.25,
            ..ComplexityFeatures::default()
        };
        assert!((complexity_score(&mixed) - 0.325).abs() < 1e-12);
    }

    #[test]
    fn similarity_threshold_relaxation() {
        assert_eq!(adaptive_similarity_threshold(0), 0.85);
        assert!((adaptive_similarity_threshold(3) - 0.70).abs() < 1e-12);
        assert!((adaptive_similarity_threshold(7) - 0.70).abs() < 1e-12);
    }

    #[test]
    fn keyword_file_rejects_unknown_section() {
        assert!("[colors]\nred".parse::<KeywordLists>().is_err());
        assert!("orphan".parse::<KeywordLists>().is_err());
        let lists = KeywordLists::builtin();
        assert_eq!(lists.multistep, vec!["first", "then", "next", "finally", "after"]);
    }

    #[test]
    fn coupling_examples() {
        assert_eq!(effective_coupling(0.0, 0.9), 0.0);
        assert_eq!(effective_coupling(1.0, 1.0), 1.0);
        assert!((effective_coupling(0.6, 0.5) - 0.30).abs() < 1e-12);
    }

    fn evidence(present: usize, total: usize, gamma: f64) -> GraphEvidence {
        let consumed = vec![gamma, (1.0 - gamma * gamma).sqrt()];
        GraphEvidence {
            rollouts: (0..total)
                .map(|i| {
                    if i < present {
                        BTreeSet::from([(1, 0)])
                    } else {
                        BTreeSet::new()
                    }
                })
                .collect(),
            produced: BTreeMap::from([(0, vec![1.0, 0.0])]),
            consumed: BTreeMap::from([((1, 0), consumed)]),
        }
    }

    fn two_nodes() -> BTreeMap<usize, NodeRisk> {
        BTreeMap::from([(0, NodeRisk::default()), (1, NodeRisk::default())])
    }

    #[test]
    fn graph_from_rollouts() {
        let g = build_dependency_graph(two_nodes(), &evidence(5, 5, 1.0)).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert!((g.edges[0].coupling.get() - 1.0).abs() < 1e-12);

        let g = build_dependency_graph(two_nodes(), &evidence(3, 5, 0.5)).unwrap();
        assert!((g.edges[0].activation.get() - 0.6).abs() < 1e-12);
        assert!((g.edges[0].coupling.get() - 0.30).abs() < 1e-12);

        let g = build_dependency_graph(two_nodes(), &evidence(0, 5, 0.5)).unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn negative_cosine_clamps_to_zero() {
        let mut ev = evidence(5, 5, 1.0);
        ev.consumed.insert((1, 0), vec![-1.0, 0.0]);
        let g = build_dependency_graph(two_nodes(), &ev).unwrap();
        assert_eq!(g.edges[0].compatibility.get(), 0.0);
    }

    fn risk(cal: f64) -> NodeRisk {
        NodeRisk::new(Unit::new(cal).unwrap(), Unit::new(cal).unwrap())
    }

    #[test]
    fn propagation_examples() {
        let mut g = DependencyGraph::new();
        g.add_node(0, risk(0.37));
        propagate_risk(&mut g, 0.5, 0.3).unwrap();
        assert_eq!(g.nodes[&0].propagated.get(), 0.37);

        let mut g = DependencyGraph::new();
        g.add_node(0, risk(0.4));
        g.add_node(1, risk(0.2));
        g.add_edge(Edge::new(0, 1, Unit::ONE, Unit::ONE)).unwrap();
        propagate_risk(&mut g, 0.5, 0.3).unwrap();
        assert!((g.nodes[&1].propagated.get() - 0.52).abs() < 1e-12);

        let mut g = DependencyGraph::new();
        g.add_node(0, risk(1.0));
        g.add_node(1, risk(0.9));
        g.add_edge(Edge::new(0, 1, Unit::ONE, Unit::ONE)).unwrap();
        propagate_risk(&mut g, 0.5, 0.3).unwrap();
        assert_eq!(g.nodes[&1].propagated.get(), 1.0);
    }

    fn random_partition() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..6, 1..8)
    }

    proptest! {
        #[test]
        fn entropy_bounds(sizes in random_partition()) {
            let n: usize = sizes.iter().sum();
            prop_assume!(n >= 2);
            let h = semantic_entropy(&sizes, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert_eq!(h == 0.0, sizes.len() == 1);
            prop_assert_eq!((h - 1.0).abs() < 1e-12, sizes.iter().all(|&s| s == 1));
        }

        #[test]
        fn splitting_never_lowers_entropy(sizes in random_partition(), pick in 0usize..8, cut in 1usize..6) {
            let n: usize = sizes.iter().sum();
            prop_assume!(n >= 2);
            let i = pick % sizes.len();
            prop_assume!(sizes[i] >= 2);
            let cut = 1 + cut % (sizes[i] - 1);
            let mut refined = sizes.clone();
            refined[i] -= cut;
            refined.push(cut);
            prop_assert!(semantic_entropy(&refined, n).unwrap() >= semantic_entropy(&sizes, n).unwrap() - 1e-12);
        }

        #[test]
        fn raising_threshold_never_merges(
            raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..8),
            t1 in 0.05f64..0.95,
            dt in 0.0f64..0.5,
        ) {
            prop_assume!(raw.iter().all(|v| norm(v) > 1e-3));
            let t2 = (t1 + dt).min(0.99);
            let a = cluster_embeddings(&raw, t1).unwrap().len();
            let b = cluster_embeddings(&raw, t2).unwrap().len();
            prop_assert!(b >= a);
        }

        #[test]
        fn coupling_monotone(p in 0.0f64..1.0, g in 0.0f64..1.0, dp in 0.0f64..0.5) {
            let p2 = (p + dp).min(1.0);
            prop_assert!(effective_coupling(p2, g) >= effective_coupling(p, g));
            prop_assert!(effective_coupling(g, p2) >= effective_coupling(g, p));
        }

        #[test]
        fn raising_a_local_never_lowers_descendants(
            locals in prop::collection::vec(0.0f64..1.0, 2..7),
            raw_edges in prop::collection::vec((0usize..7, 0usize..7, 0.0f64..1.0), 0..12),
            bump_at in 0usize..7,
            bump in 0.0f64..0.5,
        ) {
            let n = locals.len();
            let mut g = DependencyGraph::new();
            for (i, &u) in locals.iter().enumerate() {
                g.add_node(i, risk(u));
            }
            for (a, b, w) in raw_edges {
                let (a, b) = (a % n, b % n);
                if a < b {
                    g.add_edge(Edge::new(a, b, Unit::new(w).unwrap(), Unit::ONE)).unwrap();
                }
            }
            let mut bumped = g.clone();
            let k = bump_at % n;
            let cal = (locals[k] + bump).min(1.0);
            bumped.node_mut(k).unwrap().calibrated = Unit::new(cal).unwrap();
            propagate_risk(&mut g, 0.5, 0.3).unwrap();
            propagate_risk(&mut bumped, 0.5, 0.3).unwrap();
            for d in g.descendants(k).unwrap() {
                prop_assert!(bumped.nodes[&d].propagated.get() >= g.nodes[&d].propagated.get() - 1e-12);
            }
        }
    }
}
