//! End-to-end experiment: data loading, knowledge construction, the epoch
//! loop with checkpoint/resume, and evaluation.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::checkpoint::Checkpoint;
use crate::commonsense::{ingest_conceptnet, train_transe, CommonsenseEncoder, ConceptGraph, MergeMap, TransEConfig};
use crate::config::ExperimentConfig;
use crate::data::{
    attach_features, build_one_shot_split, compute_frequency_bias, load_triplet_corpus, shuffled, FeatureFile,
    FeatureSource, FreqBias, ImageRecord, OneShotDataset, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{run_setup, MetricsTable};
use crate::model::{
    training_examples, CommonsenseKnowledge, FrequencyPredictor, ModelPredictor, RelationalKnowledge,
    SceneGraphModel, TrainingExample,
};
use crate::nn::labeled_rng;
use crate::relational::{build_relational_graph, RelationalEncoder, VectorSource, WordVectors};

/// Training split, held-out images and the assembled (untrained) model.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub vocab: Vocabulary,
    pub split: OneShotDataset,
    pub examples: Vec<TrainingExample>,
    pub test: Vec<ImageRecord>,
    pub model: SceneGraphModel,
}

/// Parameters and optimizer-side state between epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub mean_loss: f64,
    pub steps: usize,
    pub skipped: usize,
}

/// Model metrics next to the frequency-only baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: MetricsTable,
    pub frequency_baseline: MetricsTable,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The feature source the config asks for.
pub fn feature_source(config: &ExperimentConfig) -> Result<FeatureSource> {
    match &config.data.features {
        Some(p) => Ok(FeatureSource::File(FeatureFile::read(p)?)),
        None => Ok(FeatureSource::Synthetic {
            seed: config.seed,
            dim: config.data.feature_dim,
        }),
    }
}

pub fn vector_source(config: &ExperimentConfig) -> Result<VectorSource> {
    match &config.data.word_vectors {
        Some(p) => Ok(VectorSource::File(WordVectors::load(p)?)),
        None => Ok(VectorSource::Random {
            seed: config.seed,
            dim: config.data.word_dim,
        }),
    }
}

/// The merged concept graph, if the config names a triple file.
pub fn concept_graph(config: &ExperimentConfig) -> Result<Option<ConceptGraph>> {
    let Some(path) = &config.data.concept_triples else {
        return Ok(None);
    };
    let merge = config.data.merge_map.as_deref().map(MergeMap::load).transpose()?;
    ingest_conceptnet(path, merge.as_ref()).map(Some)
}

/// TransE settings with the experiment seed.
pub fn transe_config(config: &ExperimentConfig) -> TransEConfig {
    TransEConfig {
        seed: config.seed,
        ..config.transe
    }
}

/// Training corpus in sampling order, before the one-shot reduction.
pub fn load_training_corpus(config: &ExperimentConfig, vocab: &Vocabulary) -> Result<Vec<ImageRecord>> {
    let corpus = load_triplet_corpus(&config.data.train, vocab)?;
    Ok(match config.data.shuffle_seed {
        Some(s) => shuffled(&corpus, s),
        None => corpus,
    })
}

/// Every annotation supervised, for corpora used without the one-shot
/// reduction.
fn full_supervision(images: Vec<ImageRecord>) -> (OneShotDataset, Vec<TrainingExample>) {
    let examples = images
        .iter()
        .map(|r| {
            let mut seen = std::collections::HashSet::new();
            let supervised = (0..r.triplets.len())
                .filter(|&t| {
                    let x = r.triplets[t];
                    seen.insert((x.subject_instance, x.predicate_class, x.object_instance))
                })
                .collect();
            TrainingExample {
                record: r.clone(),
                supervised,
            }
        })
        .collect();
    let split = OneShotDataset {
        images,
        registry: Default::default(),
    };
    (split, examples)
}

/// Training images and their supervision: the one-shot reduction of
/// `corpus`, or every annotation when the config turns the reduction off.
pub fn split_corpus(config: &ExperimentConfig, corpus: Vec<ImageRecord>) -> (OneShotDataset, Vec<TrainingExample>) {
    if config.data.one_shot {
        let split = build_one_shot_split(&corpus);
        let ex = training_examples(&split);
        (split, ex)
    } else {
        full_supervision(corpus)
    }
}

/// Each example's record with only its supervised triplets.
pub fn supervision_records(examples: &[TrainingExample]) -> Vec<ImageRecord> {
    examples
        .iter()
        .map(|e| {
            let mut r = e.record.clone();
            r.triplets = e.supervised.iter().map(|&t| e.record.triplets[t]).collect();
            r
        })
        .collect()
}

impl Experiment {
    /// Loads data, builds the frequency prior and the enabled knowledge
    /// branches. Deterministic in the config.
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::load(&config.data.vocab)?;
        let features = feature_source(&config)?;
        let dim = config.data.feature_dim;
        let mut corpus = load_training_corpus(&config, &vocab)?;
        attach_features(&mut corpus, &features, dim)?;
        let (split, examples) = split_corpus(&config, corpus);
        info!(
            "training split: {} images, {} supervised triplets",
            split.images.len(),
            examples.iter().map(|e| e.supervised.len()).sum::<usize>()
        );
        let mut test = match &config.data.test {
            Some(p) => load_triplet_corpus(p, &vocab)?,
            None => Vec::new(),
        };
        attach_features(&mut test, &features, dim)?;

        let supervision = supervision_records(&examples);
        let freq = compute_frequency_bias(&supervision, vocab.num_predicates(), config.freq_epsilon)?;
        let m = &config.model;
        let d = m.irt.model_dim;
        let needs_vectors = m.use_relational_knowledge || m.use_commonsense_knowledge;
        let vectors = if needs_vectors { Some(vector_source(&config)?) } else { None };

        let relational = match (&vectors, m.use_relational_knowledge) {
            (Some(v), true) => {
                let kg = build_relational_graph(&supervision, &vocab)?.with_entity_vectors(v)?;
                Some(RelationalKnowledge {
                    kg,
                    encoder: RelationalEncoder::new(v.dim(), m.gcn_hidden, d, m.gcn_layers),
                })
            }
            _ => None,
        };
        let commonsense = match (&vectors, m.use_commonsense_knowledge) {
            (Some(v), true) => {
                let graph = concept_graph(&config)?.ok_or_else(|| {
                    Error::Config("data.concept_triples: required for commonsense knowledge".into())
                })?;
                let transe = train_transe(&graph, &transe_config(&config))?;
                let encoder = CommonsenseEncoder::new(v.dim(), m.gcn_hidden, d, m.gcn_layers);
                Some(CommonsenseKnowledge::new(graph, transe, v.clone(), config.paths, encoder))
            }
            _ => None,
        };
        let model = SceneGraphModel::new(config.model.clone(), vocab.clone(), dim, freq, relational, commonsense)?;
        Ok(Self {
            config,
            vocab,
            split,
            examples,
            test,
            model,
        })
    }

    pub fn freq(&self) -> &FreqBias {
        &self.model.freq
    }

    /// Freshly initialized parameters at epoch 0.
    pub fn initial_state(&self) -> TrainState {
        let mut store = ParamStore::new();
        self.model.init(&mut store, self.config.seed);
        TrainState {
            store,
            rng: labeled_rng(self.config.seed, "train"),
            epoch: 0,
        }
    }

    /// One pass over the shuffled training images in batches.
    pub fn train_epoch(&self, state: &mut TrainState) -> Result<EpochSummary> {
        let opt = &self.config.optimizer;
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut state.rng);
        let (mut total, mut steps, mut skipped) = (0.0, 0, 0);
        for chunk in order.chunks(opt.batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| self.examples[i].clone()).collect();
            match self.model.training_step(&mut state.store, &batch, opt, &mut state.rng)? {
                Some(l) => {
                    total += l;
                    steps += 1;
                }
                None => skipped += 1,
            }
        }
        state.epoch += 1;
        let mean_loss = if steps == 0 { f64::NAN } else { total / steps as f64 };
        Ok(EpochSummary {
            epoch: state.epoch,
            mean_loss,
            steps,
            skipped,
        })
    }

    /// Trains until `state.epoch` reaches `epochs`, calling `on_epoch` after
    /// each pass.
    pub fn train_until(
        &self,
        state: &mut TrainState,
        epochs: u64,
        mut on_epoch: impl FnMut(&EpochSummary, &TrainState) -> Result<()>,
    ) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        while state.epoch < epochs {
            let s = self.train_epoch(state)?;
            if s.steps == 0 {
                warn!("epoch {}: no batch had supervised triplets", s.epoch);
            }
            on_epoch(&s, state)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, state: &TrainState) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.config.to_toml()?,
            epoch: state.epoch,
            rng: state.rng.clone(),
            params: state.store.clone(),
        })
    }

    /// Restores training state, refusing checkpoints written under a
    /// different configuration (the epoch budget aside) or with parameters
    /// that do not match this model.
    pub fn resume(&self, ck: Checkpoint) -> Result<TrainState> {
        let mut theirs = ExperimentConfig::from_toml(&ck.config)?;
        theirs.optimizer.max_epochs = self.config.optimizer.max_epochs;
        if theirs != self.config {
            return Err(Error::Config(
                "checkpoint was written under a different configuration".into(),
            ));
        }
        let fresh = self.initial_state();
        let ours: Vec<(&str, &[usize])> = fresh.store.iter().map(|(n, t)| (n, t.shape())).collect();
        let loaded: Vec<(&str, &[usize])> = ck.params.iter().map(|(n, t)| (n, t.shape())).collect();
        if ours != loaded {
            return Err(Error::Validation(
                "checkpoint parameters do not match the configured model".into(),
            ));
        }
        Ok(TrainState {
            store: ck.params,
            rng: ck.rng,
            epoch: ck.epoch,
        })
    }

    fn eval_images(&self) -> Result<&[ImageRecord]> {
        if self.config.data.test.is_none() {
            return Err(Error::Config("data.test: required for evaluation".into()));
        }
        Ok(&self.test)
    }

    /// Recall@K of the trained model and of the frequency baseline on the
    /// held-out images, for every configured setup.
    pub fn evaluate(&self, store: &ParamStore) -> Result<EvalReport> {
        self.evaluate_on(store, self.eval_images()?)
    }

    pub fn evaluate_on(&self, store: &ParamStore, images: &[ImageRecord]) -> Result<EvalReport> {
        let gc = self.config.eval.graph_constraint;
        let predictor = ModelPredictor {
            model: &self.model,
            store,
        };
        let baseline = FrequencyPredictor(self.freq());
        let mut report = EvalReport {
            model: MetricsTable::default(),
            frequency_baseline: MetricsTable::default(),
        };
        for setup in self.config.setups()? {
            report.model.insert(setup, run_setup(&predictor, images, setup, gc)?);
            report
                .frequency_baseline
                .insert(setup, run_setup(&baseline, images, setup, gc)?);
        }
        Ok(report)
    }
}
