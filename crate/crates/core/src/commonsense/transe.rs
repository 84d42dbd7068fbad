use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{ConceptGraph, Edge};
use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::nn::{labeled_rng, sgd_step, OptimizerConfig};
use crate::tensor::{sigmoid, Tensor};

const CONCEPTS: &str = "transe.concepts";
const RELATIONS: &str = "transe.relations";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Taken from the experiment seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            margin: 1.0,
            negatives: 1,
            epochs: 100,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TransEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.negatives == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "transe: dim, negatives and batch_size must be at least 1".into(),
            ));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("transe.margin must be > 0, got {}", self.margin)));
        }
        self.optimizer().validate()
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransEModel {
    pub concept_embeddings: Tensor,
    pub relation_embeddings: Tensor,
    pub margin: f64,
}

impl TransEModel {
    /// `‖E_h + E_r − E_t‖₂`.
    pub fn distance(&self, h: usize, r: usize, t: usize) -> Result<f64> {
        let nc = self.concept_embeddings.rows();
        let nr = self.relation_embeddings.rows();
        for (id, size, what) in [(h, nc, "concept"), (t, nc, "concept"), (r, nr, "relation")] {
            if id >= size {
                return Err(Error::Lookup(format!("{what} id {id} out of range ({size})")));
            }
        }
        let (eh, er, et) = (
            self.concept_embeddings.row_slice(h),
            self.relation_embeddings.row_slice(r),
            self.concept_embeddings.row_slice(t),
        );
        Ok(eh
            .iter()
            .zip(er)
            .zip(et)
            .map(|((a, b), c)| (a + b - c).powi(2))
            .sum::<f64>()
            .sqrt())
    }
}

/// `σ(γ − ‖E_h + E_r − E_t‖₂)`.
pub fn score_triplet(model: &TransEModel, h: usize, r: usize, t: usize) -> Result<f64> {
    Ok(sigmoid(model.margin - model.distance(h, r, t)?))
}

fn normalize_rows(t: &mut Tensor) {
    let cols = t.cols();
    for row in t.data_mut().chunks_mut(cols.max(1)) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

fn init_embeddings(rows: usize, dim: usize, seed: u64, label: &str) -> Tensor {
    let bound = 6.0 / (dim as f64).sqrt();
    let mut rng = labeled_rng(seed, label);
    let data = (0..rows * dim).map(|_| rng.random_range(-bound..=bound)).collect();
    let mut t = Tensor::matrix(rows, dim, data).expect("shape is consistent");
    normalize_rows(&mut t);
    t
}

/// Margin ranking training with one uniformly corrupted head or tail per
/// negative. Concept embeddings are renormalized to unit length after every
/// epoch.
pub fn train_transe(graph: &ConceptGraph, config: &TransEConfig) -> Result<TransEModel> {
    config.validate()?;
    if graph.edges.is_empty() {
        return Err(Error::Validation("cannot train TransE on a graph without edges".into()));
    }
    let nc = graph.num_concepts();
    let mut store = ParamStore::new();
    store.insert(CONCEPTS, init_embeddings(nc, config.dim, config.seed, CONCEPTS));
    store.insert(
        RELATIONS,
        init_embeddings(graph.relations.len(), config.dim, config.seed, RELATIONS),
    );
    let opt = config.optimizer();
    let mut rng = labeled_rng(config.seed, "transe-train");
    let mut order: Vec<usize> = (0..graph.edges.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut pos: Vec<Edge> = Vec::new();
            let mut neg: Vec<Edge> = Vec::new();
            for &k in chunk {
                let e = graph.edges[k];
                for _ in 0..config.negatives {
                    pos.push(e);
                    neg.push(corrupt(e, nc, &mut rng));
                }
            }
            let mut tape = Tape::new();
            let ent = tape.param(&store, CONCEPTS)?;
            let rel = tape.param(&store, RELATIONS)?;
            let mut dist = |edges: &[Edge]| -> Result<_> {
                let h = tape.gather(ent, &edges.iter().map(|e| e.head).collect::<Vec<_>>())?;
                let r = tape.gather(rel, &edges.iter().map(|e| e.relation).collect::<Vec<_>>())?;
                let t = tape.gather(ent, &edges.iter().map(|e| e.tail).collect::<Vec<_>>())?;
                let hr = tape.add(h, r)?;
                let d = tape.sub(hr, t)?;
                tape.row_norms(d)
            };
            let dp = dist(&pos)?;
            let dn = dist(&neg)?;
            let diff = tape.sub(dp, dn)?;
            let shifted = tape.add_scalar(diff, config.margin);
            let hinge = tape.relu(shifted);
            let loss = tape.mean(hinge)?;
            let grads = tape.backward(loss)?;
            grads.accumulate_into(&mut store)?;
            sgd_step(&mut store, &opt)?;
        }
        normalize_rows(store.get_mut(CONCEPTS)?);
    }
    let detached = |name: &str| -> Result<Tensor> {
        let mut t = store.get(name)?.clone();
        t.set_requires_grad(false);
        Ok(t)
    };
    let model = TransEModel {
        concept_embeddings: detached(CONCEPTS)?,
        relation_embeddings: detached(RELATIONS)?,
        margin: config.margin,
    };
    model.concept_embeddings.check_finite()?;
    model.relation_embeddings.check_finite()?;
    Ok(model)
}

fn corrupt(e: Edge, num_concepts: usize, rng: &mut impl Rng) -> Edge {
    let mut out = e;
    for _ in 0..10 {
        let c = rng.random_range(0..num_concepts);
        out = if rng.random_bool(0.5) {
            Edge { head: c, ..e }
        } else {
            Edge { tail: c, ..e }
        };
        if out != e {
            break;
        }
    }
    out
}
