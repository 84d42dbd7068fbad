use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical concept spelling: lowercase with underscores for spaces.
pub fn normalize_concept(name: &str) -> String {
    name.trim().to_lowercase().split_whitespace().collect::<Vec<_>>().join("_")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

/// Deduplicated `(head, relation, tail)` store. Concepts and relations are
/// numbered in sorted name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptGraph {
    pub concepts: Vec<String>,
    pub relations: Vec<String>,
    pub edges: Vec<Edge>,
    index: HashMap<String, usize>,
}

/// What a raw relation becomes after merging.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MergeTarget {
    Rename(String),
    Drop,
}

/// Raw relation name -> merged name or `DROP`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MergeMap(pub BTreeMap<String, MergeTarget>);

impl MergeMap {
    pub fn parse(json: &str) -> Result<Self> {
        let raw: BTreeMap<String, String> = serde_json::from_str(json)?;
        Ok(Self(
            raw.into_iter()
                .map(|(k, v)| {
                    let t = if v == "DROP" {
                        MergeTarget::Drop
                    } else {
                        MergeTarget::Rename(v)
                    };
                    (k, t)
                })
                .collect(),
        ))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Maps every relation to itself.
    pub fn identity<'a>(relations: impl IntoIterator<Item = &'a str>) -> Self {
        Self(
            relations
                .into_iter()
                .map(|r| (r.to_string(), MergeTarget::Rename(r.to_string())))
                .collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let raw: BTreeMap<&str, &str> = self
            .0
            .iter()
            .map(|(k, v)| {
                let v = match v {
                    MergeTarget::Drop => "DROP",
                    MergeTarget::Rename(s) => s.as_str(),
                };
                (k.as_str(), v)
            })
            .collect();
        Ok(serde_json::to_string_pretty(&raw)?)
    }
}

impl ConceptGraph {
    /// Builds the graph from raw triples, applying `merge`. Every raw
    /// relation must appear in the map.
    pub fn from_triples<I, S>(triples: I, merge: &MergeMap) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S, S)>,
        S: AsRef<str>,
    {
        let mut kept: BTreeSet<(String, String, String)> = BTreeSet::new();
        for (h, r, t) in triples {
            let r = r.as_ref();
            match merge.0.get(r) {
                None => {
                    return Err(Error::Config(format!(
                        "relation {r:?} has no entry in the merge map"
                    )))
                }
                Some(MergeTarget::Drop) => {}
                Some(MergeTarget::Rename(m)) => {
                    kept.insert((normalize_concept(h.as_ref()), m.clone(), normalize_concept(t.as_ref())));
                }
            }
        }
        let concepts: BTreeSet<&String> = kept.iter().flat_map(|(h, _, t)| [h, t]).collect();
        let relations: BTreeSet<&String> = kept.iter().map(|(_, r, _)| r).collect();
        let concepts: Vec<String> = concepts.into_iter().cloned().collect();
        let relations: Vec<String> = relations.into_iter().cloned().collect();
        let index: HashMap<String, usize> =
            concepts.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        let rel_index: HashMap<&str, usize> =
            relations.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
        let mut edges: Vec<Edge> = kept
            .iter()
            .map(|(h, r, t)| Edge {
                head: index[h],
                relation: rel_index[r.as_str()],
                tail: index[t],
            })
            .collect();
        edges.sort();
        Ok(Self {
            concepts,
            relations,
            edges,
            index,
        })
    }

    /// Graph over explicit concept/relation vocabularies with edges given by id.
    pub fn from_edges(concepts: Vec<String>, relations: Vec<String>, edges: Vec<Edge>) -> Result<Self> {
        for e in &edges {
            if e.head >= concepts.len() || e.tail >= concepts.len() {
                return Err(Error::Index {
                    index: e.head.max(e.tail),
                    size: concepts.len(),
                });
            }
            if e.relation >= relations.len() {
                return Err(Error::Index {
                    index: e.relation,
                    size: relations.len(),
                });
            }
        }
        let mut edges = edges;
        edges.sort();
        edges.dedup();
        let index = concepts.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Ok(Self {
            concepts,
            relations,
            edges,
            index,
        })
    }

    pub fn concept_id(&self, name: &str) -> Option<usize> {
        self.index.get(&normalize_concept(name)).copied()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    /// Adjacency list of `(neighbor, edge index, traversed forward)`,
    /// ignoring self-loops.
    pub fn undirected_neighbors(&self) -> Vec<Vec<(usize, usize, bool)>> {
        let mut adj = vec![Vec::new(); self.concepts.len()];
        for (k, e) in self.edges.iter().enumerate() {
            if e.head == e.tail {
                continue;
            }
            adj[e.head].push((e.tail, k, true));
            adj[e.tail].push((e.head, k, false));
        }
        for list in &mut adj {
            list.sort();
        }
        adj
    }
}

/// Reads a `head<TAB>relation<TAB>tail` file and builds the merged graph.
/// Without a merge map every relation keeps its own name.
pub fn ingest_conceptnet(path: &Path, merge: Option<&MergeMap>) -> Result<ConceptGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 3 tab-separated columns, got {}", cols.len()),
            });
        }
        triples.push((cols[0], cols[1], cols[2]));
    }
    match merge {
        Some(m) => ConceptGraph::from_triples(triples, m),
        None => {
            let identity = MergeMap::identity(triples.iter().map(|t| t.1));
            ConceptGraph::from_triples(triples, &identity)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_map_keeps_edge() {
        let g = ConceptGraph::from_triples([("dog", "Desires", "play")], &MergeMap::identity(["Desires"])).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.concepts, vec!["dog", "play"]);
        assert_eq!(g.concept_id("Dog"), Some(0));
    }

    #[test]
    fn dropped_relation_removes_edge() {
        let merge = MergeMap::parse(r#"{"Desires": "DROP", "UsedFor": "UsedFor"}"#).unwrap();
        let g = ConceptGraph::from_triples(
            [("dog", "Desires", "play"), ("frisbee", "UsedFor", "play")],
            &merge,
        )
        .unwrap();
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.relations, vec!["UsedFor"]);
        assert_eq!(g.concept_id("dog"), None);
    }

    #[test]
    fn merged_relations_collapse() {
        let merge = MergeMap::parse(r#"{"IsA": "is_a", "InstanceOf": "is_a"}"#).unwrap();
        let g = ConceptGraph::from_triples([("dog", "IsA", "animal"), ("dog", "InstanceOf", "animal")], &merge)
            .unwrap();
        assert_eq!(g.edges.len(), 1);
    }

    #[test]
    fn unmapped_relation_is_config_error() {
        let err = ConceptGraph::from_triples([("a", "Weird", "b")], &MergeMap::default()).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("Weird")));
    }

    #[test]
    fn tsv_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        std::fs::write(&p, "dog\tDesires\tplay\ntraffic light\tAtLocation\tstreet\n").unwrap();
        let g = ingest_conceptnet(&p, Some(&MergeMap::identity(["Desires", "AtLocation"]))).unwrap();
        assert_eq!(g.edges.len(), 2);
        assert!(g.concept_id("traffic light").is_some());
        assert_eq!(ingest_conceptnet(&p, None).unwrap(), g);
        std::fs::write(&p, "dog\tDesires\n").unwrap();
        assert!(matches!(
            ingest_conceptnet(&p, Some(&MergeMap::identity(["Desires"]))),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
