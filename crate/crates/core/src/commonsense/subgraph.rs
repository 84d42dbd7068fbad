use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::graph::{normalize_concept, ConceptGraph};
use super::paths::{enumerate_simple_paths, path_score, prune_paths, ConceptPath};
use super::transe::TransEModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub max_edges: usize,
    pub threshold: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            max_edges: 4,
            threshold: 0.15,
        }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_edges == 0 {
            return Err(Error::Config("paths.max_edges must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "paths.threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Concept set `C^c` for one image, its symmetric adjacency `A^c` and the
/// retained paths behind every adjacency bit.
#[derive(Clone, Debug, PartialEq)]
pub struct CommonsenseSubgraph {
    /// Concept ids in the source graph, ascending.
    pub concepts: Vec<usize>,
    pub names: Vec<String>,
    pub adjacency: Tensor,
    /// Keyed by local `(u, v)` with `u < v`.
    pub provenance: BTreeMap<(usize, usize), Vec<ConceptPath>>,
    pub retained: Vec<ConceptPath>,
    pub unmatched: Vec<String>,
}

impl CommonsenseSubgraph {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Local row of an instance label, if it matched a concept.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        let key = normalize_concept(label);
        self.names.iter().position(|n| *n == key)
    }

    pub fn label_rows(&self, labels: &[String]) -> Vec<Option<usize>> {
        labels.iter().map(|l| self.index_of(l)).collect()
    }
}

/// Mines pruned paths between every pair of resolvable labels and assembles
/// the image's concept subgraph. Labels with no concept are reported in
/// `unmatched`.
pub fn build_commonsense_subgraph(
    labels: &[String],
    graph: &ConceptGraph,
    model: &TransEModel,
    config: &PathConfig,
) -> Result<CommonsenseSubgraph> {
    if model.concept_embeddings.rows() != graph.num_concepts()
        || model.relation_embeddings.rows() != graph.relations.len()
    {
        return Err(Error::dim(format!(
            "TransE model covers {} concepts / {} relations, graph has {} / {}",
            model.concept_embeddings.rows(),
            model.relation_embeddings.rows(),
            graph.num_concepts(),
            graph.relations.len()
        )));
    }
    let mut resolved = BTreeSet::new();
    let mut unmatched = Vec::new();
    for l in labels {
        match graph.concept_id(l) {
            Some(id) => {
                resolved.insert(id);
            }
            None => {
                if !unmatched.contains(l) {
                    unmatched.push(l.clone());
                }
            }
        }
    }
    let ids: Vec<usize> = resolved.iter().copied().collect();
    let mut retained = Vec::new();
    for (x, &a) in ids.iter().enumerate() {
        for &b in &ids[x + 1..] {
            let paths = enumerate_simple_paths(graph, a, b, config.max_edges)?;
            retained.extend(prune_paths(&paths, graph, model, config.threshold)?);
        }
    }
    let mut members = resolved;
    for p in &retained {
        members.extend(p.nodes.iter().copied());
    }
    let concepts: Vec<usize> = members.into_iter().collect();
    let local: HashMap<usize, usize> = concepts.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let n = concepts.len();
    let mut adjacency = Tensor::zeros(&[n, n]);
    let mut provenance: BTreeMap<(usize, usize), Vec<ConceptPath>> = BTreeMap::new();
    for p in &retained {
        for w in p.nodes.windows(2) {
            let (u, v) = (local[&w[0]], local[&w[1]]);
            adjacency.set(u, v, 1.0);
            adjacency.set(v, u, 1.0);
            let list = provenance.entry((u.min(v), u.max(v))).or_default();
            if !list.contains(p) {
                list.push(p.clone());
            }
        }
    }
    Ok(CommonsenseSubgraph {
        names: concepts.iter().map(|&c| graph.concepts[c].clone()).collect(),
        concepts,
        adjacency,
        provenance,
        retained,
        unmatched,
    })
}

/// Memoizes subgraphs by the image's set of labels.
#[derive(Debug, Default)]
pub struct SubgraphCache {
    entries: HashMap<Vec<String>, CommonsenseSubgraph>,
}

impl SubgraphCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_build(
        &mut self,
        labels: &[String],
        graph: &ConceptGraph,
        model: &TransEModel,
        config: &PathConfig,
    ) -> Result<&CommonsenseSubgraph> {
        let key: Vec<String> = labels
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if !self.entries.contains_key(&key) {
            let sub = build_commonsense_subgraph(&key, graph, model, config)?;
            self.entries.insert(key.clone(), sub);
        }
        Ok(&self.entries[&key])
    }
}

#[derive(Serialize)]
struct HopJson<'a> {
    head: &'a str,
    relation: &'a str,
    tail: &'a str,
    forward: bool,
}

#[derive(Serialize)]
struct PathJson<'a> {
    nodes: Vec<&'a str>,
    hops: Vec<HopJson<'a>>,
    score: f64,
}

#[derive(Serialize)]
struct SubgraphJson<'a> {
    concepts: &'a [String],
    adjacency: Vec<[usize; 2]>,
    unmatched: &'a [String],
    paths: Vec<PathJson<'a>>,
}

/// JSON report of the retained paths and the subgraph, with names resolved.
pub fn subgraph_report(
    sub: &CommonsenseSubgraph,
    graph: &ConceptGraph,
    model: &TransEModel,
) -> Result<serde_json::Value> {
    let n = sub.len();
    let adjacency = (0..n)
        .flat_map(|i| (0..n).map(move |j| [i, j]))
        .filter(|&[i, j]| sub.adjacency.get(i, j) != 0.0)
        .collect();
    let mut paths = Vec::new();
    for p in &sub.retained {
        let hops = p
            .hops
            .iter()
            .map(|h| {
                let e = graph.edges[h.edge];
                HopJson {
                    head: &graph.concepts[e.head],
                    relation: &graph.relations[e.relation],
                    tail: &graph.concepts[e.tail],
                    forward: h.forward,
                }
            })
            .collect();
        paths.push(PathJson {
            nodes: p.nodes.iter().map(|&c| graph.concepts[c].as_str()).collect(),
            hops,
            score: path_score(graph, model, p)?,
        });
    }
    Ok(serde_json::to_value(SubgraphJson {
        concepts: &sub.names,
        adjacency,
        unmatched: &sub.unmatched,
        paths,
    })?)
}
