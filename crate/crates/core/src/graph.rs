//! Probabilistic dependency graph over executed steps.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::types::Unit;

/// Per-node uncertainty: local estimate, its calibrated value and the
/// propagated risk.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeRisk {
    pub local: Unit,
    pub calibrated: Unit,
    pub propagated: Unit,
    /// Set by asymmetric calibration; implies `local == 1`.
    #[serde(default)]
    pub boosted: bool,
}

impl NodeRisk {
    pub fn new(local: Unit, calibrated: Unit) -> Self {
        NodeRisk {
            local,
            calibrated,
            propagated: calibrated,
            boosted: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub activation: Unit,
    pub compatibility: Unit,
    pub coupling: Unit,
}

impl Edge {
    /// Builds an edge whose coupling is `activation * compatibility`.
    pub fn new(from: usize, to: usize, activation: Unit, compatibility: Unit) -> Self {
        Edge {
            from,
            to,
            activation,
            compatibility,
            coupling: Unit::saturating(activation.get() * compatibility.get()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub nodes: BTreeMap<usize, NodeRisk>,
    pub edges: Vec<Edge>,
}

impl DependencyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: usize, risk: NodeRisk) {
        self.nodes.insert(id, risk);
    }

    /// Adds an edge between existing nodes. Self-loops are rejected; cycles
    /// are detected lazily by [`topological_order`].
    pub fn add_edge(&mut self, edge: Edge) -> Result<()> {
        if edge.from == edge.to {
            return Err(CoreError::CycleDetected);
        }
        for id in [edge.from, edge.to] {
            if !self.nodes.contains_key(&id) {
                return Err(CoreError::UnknownStep(id));
            }
        }
        self.edges.push(edge);
        Ok(())
    }

    pub fn node(&self, id: usize) -> Result<&NodeRisk> {
        self.nodes.get(&id).ok_or(CoreError::UnknownStep(id))
    }

    pub fn node_mut(&mut self, id: usize) -> Result<&mut NodeRisk> {
        self.nodes.get_mut(&id).ok_or(CoreError::UnknownStep(id))
    }

    pub fn incoming(&self, id: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.to == id)
    }

    pub fn outgoing(&self, id: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.from == id)
    }

    /// `id` together with every node reachable from it.
    pub fn descendants(&self, id: usize) -> Result<BTreeSet<usize>> {
        self.node(id)?;
        let mut seen = BTreeSet::from([id]);
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            for e in self.outgoing(n) {
                if seen.insert(e.to) {
                    stack.push(e.to);
                }
            }
        }
        Ok(seen)
    }

    /// Removes the given nodes and every edge touching them.
    pub fn remove_nodes(&mut self, ids: &BTreeSet<usize>) {
        self.nodes.retain(|id, _| !ids.contains(id));
        self.edges.retain(|e| !ids.contains(&e.from) && !ids.contains(&e.to));
    }

    /// Largest and mean edge coupling, `(0, 0)` for an edgeless graph.
    pub fn coupling_stats(&self) -> (f64, f64) {
        if self.edges.is_empty() {
            return (0.0, 0.0);
        }
        let max = self.edges.iter().map(|e| e.coupling.get()).fold(0.0, f64::max);
        let mean = self.edges.iter().map(|e| e.coupling.get()).sum::<f64>() / self.edges.len() as f64;
        (max, mean)
    }
}

/// Kahn's algorithm with a min-ordered ready set, so ties resolve to the
/// smallest step id.
pub fn topological_order(graph: &DependencyGraph) -> Result<Vec<usize>> {
    let mut indegree: BTreeMap<usize, usize> = graph.nodes.keys().map(|&id| (id, 0)).collect();
    for e in &graph.edges {
        if !indegree.contains_key(&e.from) {
            return Err(CoreError::UnknownStep(e.from));
        }
        *indegree.get_mut(&e.to).ok_or(CoreError::UnknownStep(e.to))? += 1;
    }
    let mut ready: BTreeSet<usize> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
    let mut order = Vec::with_capacity(graph.nodes.len());
    while let Some(id) = ready.pop_first() {
        order.push(id);
        for e in graph.outgoing(id) {
            let d = indegree.get_mut(&e.to).expect("edge target indexed above");
            *d -= 1;
            if *d == 0 {
                ready.insert(e.to);
            }
        }
    }
    if order.len() != graph.nodes.len() {
        return Err(CoreError::CycleDetected);
    }
    Ok(order)
}
