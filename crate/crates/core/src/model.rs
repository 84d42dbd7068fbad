//! The assembled scene graph model: context encoder, optional knowledge
//! branches, predicate head and optional label refiner, plus the training step.

use std::cell::RefCell;

use log::warn;
use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::commonsense::{CommonsenseEncoder, ConceptGraph, PathConfig, SubgraphCache, TransEModel};
use crate::data::{FreqBias, ImageRecord, InstanceSet, OneShotDataset, RelationshipTriplet, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::head::{all_pairs, fuse_features, PairScores, PredicateHead};
use crate::irt::{InstanceEncoder, IrtConfig, LabelRefiner};
use crate::nn::{sgd_step, OptimizerConfig};
use crate::relational::{RelationalEncoder, RelationalKG, VectorSource};
use crate::tensor::{sigmoid, softmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub irt: IrtConfig,
    pub gcn_hidden: usize,
    pub gcn_layers: usize,
    pub use_relational_knowledge: bool,
    pub use_commonsense_knowledge: bool,
    pub refine_labels: bool,
    /// Background pairs sampled per foreground pair.
    pub background_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            irt: IrtConfig::default(),
            gcn_hidden: 32,
            gcn_layers: 2,
            use_relational_knowledge: true,
            use_commonsense_knowledge: true,
            refine_labels: true,
            background_ratio: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.irt.validate()?;
        if self.gcn_hidden == 0 || self.gcn_layers == 0 {
            return Err(Error::Config("model: gcn_hidden and gcn_layers must be at least 1".into()));
        }
        Ok(())
    }
}

pub struct RelationalKnowledge {
    /// Must carry entity vectors.
    pub kg: RelationalKG,
    pub encoder: RelationalEncoder,
}

pub struct CommonsenseKnowledge {
    pub graph: ConceptGraph,
    pub transe: TransEModel,
    pub vectors: VectorSource,
    pub paths: PathConfig,
    pub encoder: CommonsenseEncoder,
    cache: RefCell<SubgraphCache>,
}

impl CommonsenseKnowledge {
    pub fn new(
        graph: ConceptGraph,
        transe: TransEModel,
        vectors: VectorSource,
        paths: PathConfig,
        encoder: CommonsenseEncoder,
    ) -> Self {
        Self {
            graph,
            transe,
            vectors,
            paths,
            encoder,
            cache: RefCell::new(SubgraphCache::new()),
        }
    }

    fn instance_features(&self, tape: &mut Tape, store: &ParamStore, labels: &[String]) -> Result<Var> {
        let mut cache = self.cache.borrow_mut();
        let sub = cache.get_or_build(labels, &self.graph, &self.transe, &self.paths)?;
        self.encoder.instance_features(tape, store, sub, &self.vectors, labels)
    }
}

/// A training image with the indices of its supervised triplets. The other
/// annotations are never sampled as background.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub record: ImageRecord,
    pub supervised: Vec<usize>,
}

pub fn training_examples(split: &OneShotDataset) -> Vec<TrainingExample> {
    split
        .images
        .iter()
        .enumerate()
        .map(|(i, r)| TrainingExample {
            record: r.clone(),
            supervised: split.supervised_indices(i),
        })
        .collect()
}

pub struct SceneGraphModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub feature_dim: usize,
    pub encoder: InstanceEncoder,
    pub head: PredicateHead,
    pub refiner: Option<LabelRefiner>,
    pub relational: Option<RelationalKnowledge>,
    pub commonsense: Option<CommonsenseKnowledge>,
    pub freq: FreqBias,
}

impl SceneGraphModel {
    /// Knowledge branches are attached only when their flag is on.
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        feature_dim: usize,
        freq: FreqBias,
        relational: Option<RelationalKnowledge>,
        commonsense: Option<CommonsenseKnowledge>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.irt.model_dim;
        let na = vocab.num_objects();
        let relational = relational.filter(|_| config.use_relational_knowledge);
        let commonsense = commonsense.filter(|_| config.use_commonsense_knowledge);
        if config.use_relational_knowledge && relational.is_none() {
            return Err(Error::Config("relational knowledge enabled but not provided".into()));
        }
        if config.use_commonsense_knowledge && commonsense.is_none() {
            return Err(Error::Config("commonsense knowledge enabled but not provided".into()));
        }
        for (what, out) in [
            ("relational", relational.as_ref().map(|r| r.encoder.out_dim)),
            ("commonsense", commonsense.as_ref().map(|c| c.encoder.out_dim)),
        ] {
            if let Some(o) = out.filter(|&o| o != d) {
                return Err(Error::dim(format!("{what} encoder emits {o} columns, model width is {d}")));
            }
        }
        Ok(Self {
            encoder: InstanceEncoder::new("irt", config.irt, na, feature_dim),
            head: PredicateHead::new(d, feature_dim, vocab.num_predicates()),
            refiner: config
                .refine_labels
                .then(|| LabelRefiner::new(config.irt, na, feature_dim)),
            config,
            vocab,
            feature_dim,
            relational,
            commonsense,
            freq,
        })
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.encoder.init(store, seed);
        self.head.init(store, seed);
        if let Some(r) = &self.refiner {
            r.init(store, seed);
        }
        if let Some(r) = &self.relational {
            r.encoder.init(store, seed);
        }
        if let Some(c) = &self.commonsense {
            c.encoder.init(store, seed);
        }
    }

    fn class_names(&self, classes: &[usize]) -> Vec<String> {
        classes.iter().map(|&c| self.vocab.object_classes[c].clone()).collect()
    }

    /// Predicate and relatedness logits for `pairs`. `relational_rows` caches
    /// the encoded category table across images sharing a tape.
    fn score_vars(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        instances: &InstanceSet,
        classes: &[usize],
        pairs: &[(usize, usize)],
        relational_rows: &mut Option<Var>,
    ) -> Result<(Var, Var)> {
        let m = self.encoder.forward(tape, store, instances)?.context;
        let pv = match &self.relational {
            Some(r) => {
                let o = match *relational_rows {
                    Some(o) => o,
                    None => {
                        let o = r.encoder.forward(tape, store, &r.kg)?;
                        *relational_rows = Some(o);
                        o
                    }
                };
                Some(tape.gather(o, classes)?)
            }
            None => None,
        };
        let pc = match &self.commonsense {
            Some(c) => Some(c.instance_features(tape, store, &self.class_names(classes))?),
            None => None,
        };
        let er = fuse_features(tape, m, pv, pc)?;
        self.head.forward(tape, store, er, instances, classes, &self.freq, pairs)
    }

    /// Scores for every ordered pair, using `classes` for knowledge lookup and
    /// the frequency bias.
    pub fn score_pairs(&self, store: &ParamStore, instances: &InstanceSet, classes: &[usize]) -> Result<PairScores> {
        let pairs = all_pairs(instances.len());
        let mut tape = Tape::new();
        let (r, rel) = self.score_vars(&mut tape, store, instances, classes, &pairs, &mut None)?;
        PairScores::new(instances.len(), pairs, tape.value(r).clone(), tape.value(rel).clone())
    }

    /// Context encoder straight into the head, never touching knowledge.
    pub fn score_pairs_irt_only(
        &self,
        store: &ParamStore,
        instances: &InstanceSet,
        classes: &[usize],
    ) -> Result<PairScores> {
        let pairs = all_pairs(instances.len());
        let mut tape = Tape::new();
        let m = self.encoder.forward(&mut tape, store, instances)?.context;
        let (r, rel) = self
            .head
            .forward(&mut tape, store, m, instances, classes, &self.freq, &pairs)?;
        PairScores::new(instances.len(), pairs, tape.value(r).clone(), tape.value(rel).clone())
    }

    /// Refined label logits from class-agnostic inputs.
    pub fn refine(&self, store: &ParamStore, instances: &InstanceSet) -> Result<Tensor> {
        let r = self
            .refiner
            .as_ref()
            .ok_or_else(|| Error::State("model was built without a label refiner".into()))?;
        crate::irt::refine_labels(r, store, &instances.with_uniform_labels())
    }

    /// Builds the batch loss on one tape: mean predicate cross-entropy over
    /// supervised triplets, mean relatedness BCE over supervised and sampled
    /// background pairs, and (with a refiner) mean label cross-entropy.
    /// Returns `None` when the batch has no supervised triplet.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[TrainingExample],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Var>> {
        struct Plan {
            pairs: Vec<(usize, usize)>,
            rel_targets: Vec<f64>,
            ce_rows: Vec<usize>,
            ce_targets: Vec<usize>,
        }
        let mut plans = Vec::with_capacity(batch.len());
        for ex in batch {
            let rec = &ex.record;
            let supervised: Vec<RelationshipTriplet> = ex.supervised.iter().map(|&t| rec.triplets[t]).collect();
            let mut fg: Vec<(usize, usize)> = Vec::new();
            let mut ce_rows = Vec::new();
            for t in &supervised {
                let p = (t.subject_instance, t.object_instance);
                let row = fg.iter().position(|&q| q == p).unwrap_or_else(|| {
                    fg.push(p);
                    fg.len() - 1
                });
                ce_rows.push(row);
            }
            let annotated: Vec<(usize, usize)> =
                rec.triplets.iter().map(|t| (t.subject_instance, t.object_instance)).collect();
            let candidates: Vec<(usize, usize)> = all_pairs(rec.instances.len())
                .into_iter()
                .filter(|p| !annotated.contains(p))
                .collect();
            let want = (self.config.background_ratio * fg.len()).min(candidates.len());
            let mut bg: Vec<(usize, usize)> = candidates.choose_multiple(rng, want).copied().collect();
            bg.sort_unstable();
            let mut rel_targets = vec![1.0; fg.len()];
            rel_targets.extend(std::iter::repeat_n(0.0, bg.len()));
            let mut pairs = fg;
            pairs.extend(bg);
            plans.push(Plan {
                pairs,
                rel_targets,
                ce_rows,
                ce_targets: supervised.iter().map(|t| t.predicate_class).collect(),
            });
        }
        let total_fg: usize = plans.iter().map(|p| p.ce_targets.len()).sum();
        if total_fg == 0 {
            warn!("batch of {} images has no supervised triplets; skipping", batch.len());
            return Ok(None);
        }
        let total_rel: usize = plans.iter().map(|p| p.rel_targets.len()).sum();
        let total_inst: usize = batch.iter().map(|e| e.record.instances.len()).sum();
        let mut relational_rows = None;
        let mut terms = Vec::new();
        for (ex, plan) in batch.iter().zip(&plans) {
            let inst = &ex.record.instances;
            if !plan.ce_targets.is_empty() {
                let classes = inst
                    .gt_classes
                    .as_ref()
                    .ok_or_else(|| Error::Validation(format!("image {}: training needs ground-truth classes", ex.record.image_id)))?;
                let (r, rel) = self.score_vars(tape, store, inst, classes, &plan.pairs, &mut relational_rows)?;
                let rows = tape.gather(r, &plan.ce_rows)?;
                let ce = tape.softmax_cross_entropy(rows, &plan.ce_targets)?;
                terms.push(tape.scale(ce, plan.ce_targets.len() as f64 / total_fg as f64));
                let bce = tape.bce_with_logits(rel, &plan.rel_targets)?;
                terms.push(tape.scale(bce, plan.rel_targets.len() as f64 / total_rel as f64));
            }
            if let (Some(refiner), true) = (&self.refiner, !inst.is_empty()) {
                let l = refiner.loss(tape, store, &inst.with_uniform_labels())?;
                terms.push(tape.scale(l, inst.len() as f64 / total_inst as f64));
            }
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        Ok(Some(loss))
    }

    /// One SGD update on `batch`. Returns the loss before the update, or
    /// `None` when the batch was skipped.
    pub fn training_step(
        &self,
        store: &mut ParamStore,
        batch: &[TrainingExample],
        optimizer: &OptimizerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<f64>> {
        if batch.is_empty() {
            return Err(Error::Validation("training step on an empty batch".into()));
        }
        let mut tape = Tape::new();
        let Some(loss) = self.batch_loss(&mut tape, store, batch, rng)? else {
            return Ok(None);
        };
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Validity(format!("training loss is {value}")));
        }
        tape.backward(loss)?.accumulate_into(store)?;
        sgd_step(store, optimizer)?;
        Ok(Some(value))
    }
}

/// Log of the given label distributions, for predictors without a refiner.
fn input_label_logits(instances: &InstanceSet) -> Tensor {
    instances.labels.map(|p| p.max(1e-12).ln())
}

/// A trained model with its parameters, ready for evaluation.
pub struct ModelPredictor<'a> {
    pub model: &'a SceneGraphModel,
    pub store: &'a ParamStore,
}

impl Predictor for ModelPredictor<'_> {
    fn score_pairs(&self, instances: &InstanceSet, classes: &[usize]) -> Result<PairScores> {
        self.model.score_pairs(self.store, instances, classes)
    }

    fn label_logits(&self, instances: &InstanceSet) -> Result<Tensor> {
        match self.model.refiner {
            Some(_) => self.model.refine(self.store, instances),
            None => Ok(input_label_logits(instances)),
        }
    }
}

/// The frequency-only baseline.
pub struct FrequencyPredictor<'a>(pub &'a FreqBias);

impl Predictor for FrequencyPredictor<'_> {
    fn score_pairs(&self, instances: &InstanceSet, classes: &[usize]) -> Result<PairScores> {
        frequency_scores(self.0, instances, classes)
    }

    fn label_logits(&self, instances: &InstanceSet) -> Result<Tensor> {
        Ok(input_label_logits(instances))
    }
}

/// Scores from the frequency prior alone: the predicate cells as logits and
/// the foreground mass as relatedness.
pub fn frequency_scores(freq: &FreqBias, instances: &InstanceSet, classes: &[usize]) -> Result<PairScores> {
    let pairs = all_pairs(instances.len());
    let k = freq.num_predicates();
    let mut logits = Vec::with_capacity(pairs.len());
    let mut rel = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        logits.push(freq.predicate_bias(classes[i], classes[j]).to_vec());
        let bg = freq.background_log_prob(classes[i], classes[j]).exp();
        rel.push(((1.0 - bg) / bg).ln());
    }
    let n = pairs.len();
    PairScores::new(
        instances.len(),
        pairs,
        Tensor::from_rows(&logits, k)?,
        Tensor::matrix(n, 1, rel)?,
    )
}

/// Inference score of one pair: `σ(r') · max_k softmax(r)_k` with the
/// predicate `argmax_k r_k`.
pub fn triplet_score(logits: &[f64], relatedness: f64) -> (usize, f64) {
    let p = softmax(logits);
    let k = crate::data::argmax(&p);
    (k, sigmoid(relatedness) * p[k])
}
