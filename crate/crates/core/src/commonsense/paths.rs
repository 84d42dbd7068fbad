use serde::Serialize;

use super::graph::ConceptGraph;
use super::transe::{score_triplet, TransEModel};
use crate::error::{Error, Result};

/// One traversed edge. `forward` is false when the edge was walked from its
/// tail to its head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Hop {
    pub edge: usize,
    pub forward: bool,
}

/// Simple path: `nodes.len() == hops.len() + 1`, no repeated node.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ConceptPath {
    pub nodes: Vec<usize>,
    pub hops: Vec<Hop>,
}

impl ConceptPath {
    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }
}

/// Every simple path from `a` to `b` with at most `max_edges` edges, walking
/// edges in either direction. Sorted by node sequence, then hops.
pub fn enumerate_simple_paths(
    graph: &ConceptGraph,
    a: usize,
    b: usize,
    max_edges: usize,
) -> Result<Vec<ConceptPath>> {
    let n = graph.num_concepts();
    for id in [a, b] {
        if id >= n {
            return Err(Error::Lookup(format!("concept id {id} out of range ({n})")));
        }
    }
    if a == b {
        return Err(Error::Validation(format!("path endpoints must differ, got {a} twice")));
    }
    let adj = graph.undirected_neighbors();
    let mut out = Vec::new();
    let mut on_path = vec![false; n];
    let mut nodes = vec![a];
    let mut hops = Vec::new();
    on_path[a] = true;
    walk(&adj, b, max_edges, &mut on_path, &mut nodes, &mut hops, &mut out);
    out.sort();
    Ok(out)
}

fn walk(
    adj: &[Vec<(usize, usize, bool)>],
    target: usize,
    budget: usize,
    on_path: &mut [bool],
    nodes: &mut Vec<usize>,
    hops: &mut Vec<Hop>,
    out: &mut Vec<ConceptPath>,
) {
    if budget == 0 {
        return;
    }
    let here = *nodes.last().expect("path starts non-empty");
    for &(next, edge, forward) in &adj[here] {
        if on_path[next] {
            continue;
        }
        nodes.push(next);
        hops.push(Hop { edge, forward });
        if next == target {
            out.push(ConceptPath {
                nodes: nodes.clone(),
                hops: hops.clone(),
            });
        } else {
            on_path[next] = true;
            walk(adj, target, budget - 1, on_path, nodes, hops, out);
            on_path[next] = false;
        }
        nodes.pop();
        hops.pop();
    }
}

/// Score of one hop in its traversal direction.
pub fn hop_score(graph: &ConceptGraph, model: &TransEModel, hop: Hop) -> Result<f64> {
    let e = graph
        .edges
        .get(hop.edge)
        .ok_or_else(|| Error::Lookup(format!("edge {} out of range", hop.edge)))?;
    if hop.forward {
        score_triplet(model, e.head, e.relation, e.tail)
    } else {
        score_triplet(model, e.tail, e.relation, e.head)
    }
}

/// Product of hop scores.
pub fn path_score(graph: &ConceptGraph, model: &TransEModel, path: &ConceptPath) -> Result<f64> {
    path.hops
        .iter()
        .try_fold(1.0, |acc, &h| Ok(acc * hop_score(graph, model, h)?))
}

/// Paths whose score is at least `threshold`, order preserved.
pub fn prune_paths(
    paths: &[ConceptPath],
    graph: &ConceptGraph,
    model: &TransEModel,
    threshold: f64,
) -> Result<Vec<ConceptPath>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Validation(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let mut kept = Vec::new();
    for p in paths {
        if path_score(graph, model, p)? >= threshold {
            kept.push(p.clone());
        }
    }
    Ok(kept)
}
