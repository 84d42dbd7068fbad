//! Commonsense knowledge: a merged concept triple store, TransE triplet
//! rating, bounded simple-path mining between instance labels and a GCN
//! encoder over each image's concept subgraph.

mod graph;
mod paths;
mod subgraph;
mod transe;

pub use graph::{ingest_conceptnet, normalize_concept, ConceptGraph, Edge, MergeMap, MergeTarget};
pub use paths::{enumerate_simple_paths, hop_score, path_score, prune_paths, ConceptPath, Hop};
pub use subgraph::{build_commonsense_subgraph, subgraph_report, CommonsenseSubgraph, PathConfig, SubgraphCache};
pub use transe::{score_triplet, train_transe, TransEConfig, TransEModel};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::nn::{normalized_adjacency, GcnStack, Linear};
use crate::relational::{embed_categories, KnowledgeFeatures, VectorSource};
use crate::tensor::Tensor;

/// Word-vector projection followed by one GCN stack over `A^c`.
#[derive(Clone, Debug)]
pub struct CommonsenseEncoder {
    pub projection: Linear,
    pub stack: GcnStack,
    pub out_dim: usize,
}

impl CommonsenseEncoder {
    pub fn new(word_dim: usize, hidden: usize, out_dim: usize, layers: usize) -> Self {
        let mut dims = vec![hidden; layers + 1];
        dims[layers] = out_dim;
        Self {
            projection: Linear::new("commonsense.input", word_dim, hidden, false),
            stack: GcnStack::new("commonsense.gcn", &dims),
            out_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.projection.init(store, seed);
        self.stack.init(store, seed);
    }

    /// `O^c`, `[|C^c| x out_dim]`. An empty subgraph gives a `[0 x out_dim]`
    /// constant.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sub: &CommonsenseSubgraph,
        vectors: &VectorSource,
    ) -> Result<Var> {
        if sub.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[0, self.out_dim])));
        }
        let e = tape.constant(embed_categories(&sub.names, vectors)?);
        let a = tape.constant(normalized_adjacency(&sub.adjacency)?);
        let h = self.projection.forward(tape, store, e)?;
        self.stack.forward(tape, store, h, a)
    }

    /// Per-instance `P^c`: the encoded row of each label's concept, or zeros
    /// when the label matched nothing.
    pub fn instance_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sub: &CommonsenseSubgraph,
        vectors: &VectorSource,
        labels: &[String],
    ) -> Result<Var> {
        let rows = sub.label_rows(labels);
        if rows.iter().all(Option::is_none) {
            return Ok(tape.constant(Tensor::zeros(&[labels.len(), self.out_dim])));
        }
        let o = self.forward(tape, store, sub, vectors)?;
        tape.gather_rows(o, &rows)
    }
}

/// Value-only `O^c` over the subgraph's concepts.
pub fn encode_commonsense(
    sub: &CommonsenseSubgraph,
    vectors: &VectorSource,
    encoder: &CommonsenseEncoder,
    store: &ParamStore,
) -> Result<KnowledgeFeatures> {
    let mut tape = Tape::new();
    let o = encoder.forward(&mut tape, store, sub, vectors)?;
    Ok(KnowledgeFeatures::new(tape.value(o).clone(), &sub.names))
}
