//! Relational knowledge: class/class and class/predicate co-occurrence graphs
//! mined from training triplets, encoded with two GCN stacks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::{ImageRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{labeled_rng, normalized_adjacency, GcnStack, Linear};
use crate::tensor::Tensor;

/// Pretrained word vectors, one `word v1 v2 ...` line each.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = WordVectors::default();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let v = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Validation(format!("word vector line {}: {e}", i + 1)))?;
            if out.vectors.is_empty() {
                out.dim = v.len();
            } else if v.len() != out.dim {
                return Err(Error::dim(format!(
                    "word vector line {} has {} values, expected {}",
                    i + 1,
                    v.len(),
                    out.dim
                )));
            }
            out.vectors.insert(word.to_string(), v);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Where category embeddings come from.
#[derive(Clone, Debug, PartialEq)]
pub enum VectorSource {
    File(WordVectors),
    /// Gaussian with standard deviation 0.1, seeded per name.
    Random { seed: u64, dim: usize },
}

impl VectorSource {
    pub fn dim(&self) -> usize {
        match self {
            VectorSource::File(w) => w.dim,
            VectorSource::Random { dim, .. } => *dim,
        }
    }

    /// Vector for one category name. Multi-word names (spaces or underscores)
    /// average their token vectors.
    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        match self {
            VectorSource::File(w) => {
                let tokens: Vec<&str> = name
                    .split(|c: char| c.is_whitespace() || c == '_')
                    .filter(|t| !t.is_empty())
                    .collect();
                if tokens.is_empty() {
                    return Err(Error::Lookup(format!("empty category name {name:?}")));
                }
                let mut acc = vec![0.0; w.dim];
                for t in &tokens {
                    let v = w
                        .vectors
                        .get(*t)
                        .or_else(|| w.vectors.get(&t.to_lowercase()))
                        .ok_or_else(|| Error::Lookup(format!("no word vector for {t:?}")))?;
                    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                }
                let n = tokens.len() as f64;
                Ok(acc.into_iter().map(|a| a / n).collect())
            }
            VectorSource::Random { seed, dim } => {
                let normal = Normal::new(0.0, 0.1).expect("valid sigma");
                let mut rng = labeled_rng(*seed, &format!("word-vector/{name}"));
                Ok((0..*dim).map(|_| normal.sample(&mut rng)).collect())
            }
        }
    }
}

/// `[names.len() x d_w]` embedding matrix.
pub fn embed_categories(names: &[String], source: &VectorSource) -> Result<Tensor> {
    let rows = names
        .iter()
        .map(|n| source.vector(n))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows, source.dim())
}

/// Category vocabulary (object classes, then predicates) with the two boolean
/// adjacencies. `A^o` is stored directed (subject -> object).
#[derive(Clone, Debug, PartialEq)]
pub struct RelationalKG {
    pub categories: Vec<String>,
    pub num_object_classes: usize,
    pub object_adjacency: Tensor,
    pub predicate_adjacency: Tensor,
    pub entity_vectors: Option<Tensor>,
}

impl RelationalKG {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Category row of predicate `p`.
    pub fn predicate_row(&self, p: usize) -> usize {
        self.num_object_classes + p
    }

    pub fn with_entity_vectors(mut self, source: &VectorSource) -> Result<Self> {
        self.entity_vectors = Some(embed_categories(&self.categories, source)?);
        Ok(self)
    }

    fn nonzeros(t: &Tensor) -> Vec<[usize; 2]> {
        let n = t.rows();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| [i, j]))
            .filter(|&[i, j]| t.get(i, j) != 0.0)
            .collect()
    }

    pub fn to_json(&self) -> KgJson {
        KgJson {
            categories: self.categories.clone(),
            num_object_classes: self.num_object_classes,
            object_adjacency: Self::nonzeros(&self.object_adjacency),
            predicate_adjacency: Self::nonzeros(&self.predicate_adjacency),
        }
    }

    pub fn from_json(j: &KgJson) -> Result<Self> {
        let n = j.categories.len();
        let mut a_o = Tensor::zeros(&[n, n]);
        let mut a_p = Tensor::zeros(&[n, n]);
        for (dst, coords) in [(&mut a_o, &j.object_adjacency), (&mut a_p, &j.predicate_adjacency)] {
            for &[i, k] in coords {
                if i >= n || k >= n {
                    return Err(Error::Index { index: i.max(k), size: n });
                }
                dst.set(i, k, 1.0);
            }
        }
        Ok(Self {
            categories: j.categories.clone(),
            num_object_classes: j.num_object_classes,
            object_adjacency: a_o,
            predicate_adjacency: a_p,
            entity_vectors: None,
        })
    }
}

/// On-disk form written by `build-kg`: vocabulary plus sparse coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgJson {
    pub categories: Vec<String>,
    pub num_object_classes: usize,
    pub object_adjacency: Vec<[usize; 2]>,
    pub predicate_adjacency: Vec<[usize; 2]>,
}

/// For every triplet with subject `x`, object `y` and predicate `z`:
/// `a^o[x, y] = a^p[x, z] = a^p[z, y] = 1`.
pub fn build_relational_graph(images: &[ImageRecord], vocab: &Vocabulary) -> Result<RelationalKG> {
    let no = vocab.num_objects();
    let mut categories = vocab.object_classes.clone();
    categories.extend(vocab.predicate_classes.iter().cloned());
    let n = categories.len();
    let mut a_o = Tensor::zeros(&[n, n]);
    let mut a_p = Tensor::zeros(&[n, n]);
    for rec in images {
        for t in &rec.triplets {
            if t.subject_class >= no || t.object_class >= no || t.predicate_class >= vocab.num_predicates() {
                return Err(Error::Validation(format!(
                    "image {}: triplet {:?} outside vocabulary",
                    rec.image_id,
                    t.key()
                )));
            }
            let (x, y, z) = (t.subject_class, t.object_class, no + t.predicate_class);
            a_o.set(x, y, 1.0);
            a_p.set(x, z, 1.0);
            a_p.set(z, y, 1.0);
        }
    }
    Ok(RelationalKG {
        categories,
        num_object_classes: no,
        object_adjacency: a_o,
        predicate_adjacency: a_p,
        entity_vectors: None,
    })
}

/// Encoded category features `O` with a name index.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeFeatures {
    pub features: Tensor,
    pub category_index: BTreeMap<String, usize>,
}

impl KnowledgeFeatures {
    pub fn new(features: Tensor, names: &[String]) -> Self {
        let category_index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            features,
            category_index,
        }
    }

    /// Rows for the given category names.
    pub fn select(&self, labels: &[&str]) -> Result<Tensor> {
        let idx = labels
            .iter()
            .map(|l| {
                self.category_index
                    .get(*l)
                    .copied()
                    .ok_or_else(|| Error::Lookup(format!("unknown category {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.features.select_rows(&idx)
    }
}

/// Differentiable gather of knowledge rows for instance labels.
pub fn select_knowledge_features(tape: &mut Tape, features: Var, rows: &[usize]) -> Result<Var> {
    tape.gather(features, rows)
}

/// Projection of word vectors followed by the two GCN stacks
/// (`A^o` then `A^p`).
#[derive(Clone, Debug)]
pub struct RelationalEncoder {
    pub projection: Linear,
    pub object_stack: GcnStack,
    pub predicate_stack: GcnStack,
    pub out_dim: usize,
}

impl RelationalEncoder {
    pub fn new(word_dim: usize, hidden: usize, out_dim: usize, layers: usize) -> Self {
        let mut dims1 = vec![hidden; layers + 1];
        dims1[layers] = out_dim;
        let mut dims2 = vec![hidden; layers + 1];
        dims2[0] = out_dim;
        dims2[layers] = out_dim;
        Self {
            projection: Linear::new("relational.input", word_dim, hidden, false),
            object_stack: GcnStack::new("relational.gcn_object", &dims1),
            predicate_stack: GcnStack::new("relational.gcn_predicate", &dims2),
            out_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.projection.init(store, seed);
        self.object_stack.init(store, seed);
        self.predicate_stack.init(store, seed);
    }

    /// `O^v` on the tape, `[|C| x out_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, kg: &RelationalKG) -> Result<Var> {
        let e = kg
            .entity_vectors
            .clone()
            .ok_or_else(|| Error::State("relational KG has no entity vectors".into()))?;
        if e.rows() != kg.len() {
            return Err(Error::dim(format!(
                "{} entity vectors for {} categories",
                e.rows(),
                kg.len()
            )));
        }
        let a_o = tape.constant(normalized_adjacency(&kg.object_adjacency)?);
        let a_p = tape.constant(normalized_adjacency(&kg.predicate_adjacency)?);
        let e = tape.constant(e);
        let h = self.projection.forward(tape, store, e)?;
        let o1 = self.object_stack.forward(tape, store, h, a_o)?;
        self.predicate_stack.forward(tape, store, o1, a_p)
    }
}

/// Value-only encoding of the whole category vocabulary.
pub fn encode_relational_knowledge(
    kg: &RelationalKG,
    encoder: &RelationalEncoder,
    store: &ParamStore,
) -> Result<KnowledgeFeatures> {
    let mut tape = Tape::new();
    let o = encoder.forward(&mut tape, store, kg)?;
    Ok(KnowledgeFeatures::new(tape.value(o).clone(), &kg.categories))
}
