//! Stage 3: influence tracing to a single root cause, asymmetric uncertainty
//! calibration and rollback of the affected sub-graph.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{topological_order, DependencyGraph};
use crate::types::Unit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureContext {
    pub failure_set: BTreeSet<usize>,
    pub refinement_round: usize,
    pub tau_enf: f64,
    pub max_rounds: usize,
}

impl FailureContext {
    pub fn new(failure_set: BTreeSet<usize>, refinement_round: usize, tau_enf: f64, max_rounds: usize) -> Result<Self> {
        if failure_set.is_empty() {
            return Err(CoreError::InvalidInput("failure set must be non-empty".into()));
        }
        if refinement_round > max_rounds {
            return Err(CoreError::InvalidInput(format!(
                "refinement round {refinement_round} exceeds cap {max_rounds}"
            )));
        }
        Ok(FailureContext {
            failure_set,
            refinement_round,
            tau_enf,
            max_rounds,
        })
    }
}

/// Best path product from every node to the failure set, `None` where no
/// path exists. Members of the failure set get 1 through the empty path.
fn path_products(graph: &DependencyGraph, failure_set: &BTreeSet<usize>) -> Result<BTreeMap<usize, Option<f64>>> {
    let order = topological_order(graph)?;
    let mut best: BTreeMap<usize, Option<f64>> = BTreeMap::new();
    for &id in order.iter().rev() {
        let mut value = failure_set.contains(&id).then_some(1.0);
        for e in graph.outgoing(id) {
            if let Some(down) = best[&e.to] {
                let via = e.coupling.get() * down;
                value = Some(value.map_or(via, |v: f64| v.max(via)));
            }
        }
        best.insert(id, value);
    }
    Ok(best)
}

/// Largest product of couplings along a directed path from `k` into the
/// failure set; 1 if `k` is itself failing, 0 if nothing is reachable.
pub fn max_path_product(graph: &DependencyGraph, k: usize, failure_set: &BTreeSet<usize>) -> Result<f64> {
    graph.node(k)?;
    Ok(path_products(graph, failure_set)?[&k].unwrap_or(0.0))
}

/// `I_k = u~_k * max_path_product(k)` for every node with a path into the
/// failure set.
pub fn influence(graph: &DependencyGraph, failure_set: &BTreeSet<usize>) -> Result<BTreeMap<usize, f64>> {
    let products = path_products(graph, failure_set)?;
    let mut out = BTreeMap::new();
    for (id, p) in products {
        if let Some(p) = p {
            out.insert(id, graph.node(id)?.propagated.get() * p);
        }
    }
    Ok(out)
}

/// Argmax influence, smallest step id on ties.
pub fn localize_root_cause(influences: &BTreeMap<usize, f64>) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&id, &v) in influences {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((id, v));
        }
    }
    best.map(|(id, _)| id).ok_or(CoreError::EmptyInfluence)
}

/// Boost: `u_{k*} = 1`. Enforce: `u_f = max(u_f, tau_enf)` for failure
/// nodes. The calibrated value follows the same rule, so the boosted node
/// carries full risk into propagation.
pub fn asymmetric_calibrate(
    graph: &mut DependencyGraph,
    root_cause: usize,
    failure_set: &BTreeSet<usize>,
    tau_enf: f64,
) -> Result<()> {
    graph.node(root_cause)?;
    let floor = Unit::saturating(tau_enf);
    for &f in failure_set {
        if let Some(node) = graph.nodes.get_mut(&f) {
            if node.local < floor {
                node.local = floor;
            }
            if node.calibrated < floor {
                node.calibrated = floor;
            }
        }
    }
    let node = graph.node_mut(root_cause)?;
    node.local = Unit::ONE;
    node.calibrated = Unit::ONE;
    node.boosted = true;
    Ok(())
}

/// Live step outputs plus the graph they were produced under.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub graph: DependencyGraph,
    pub outputs: BTreeMap<usize, String>,
}

/// Invalidates `k` and all of its descendants, returning the removed ids.
/// Non-descendants keep their outputs and graph nodes.
pub fn rollback(state: &mut WorkflowState, k: usize) -> Result<BTreeSet<usize>> {
    let doomed = state.graph.descendants(k)?;
    state.graph.remove_nodes(&doomed);
    state.outputs.retain(|id, _| !doomed.contains(id));
    Ok(doomed)
}
