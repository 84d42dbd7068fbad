//! Experiment configuration, read from TOML.
//!
//! Relative paths resolve against the directory holding the config file.
//! Every section is optional and falls back to defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commonsense::{PathConfig, TransEConfig};
use crate::error::{Error, Result};
use crate::eval::Setup;
use crate::model::ModelConfig;
use crate::nn::OptimizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub vocab: PathBuf,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    /// Binary feature file. When absent, class-prototype features are
    /// generated from the seed.
    pub features: Option<PathBuf>,
    pub feature_dim: usize,
    /// Reduce the training annotations to a one-shot split before training.
    pub one_shot: bool,
    /// Shuffle the training corpus with this seed before sampling.
    pub shuffle_seed: Option<u64>,
    pub concept_triples: Option<PathBuf>,
    pub merge_map: Option<PathBuf>,
    /// Word vectors in text format. When absent, seeded random vectors of
    /// `word_dim` are used.
    pub word_vectors: Option<PathBuf>,
    pub word_dim: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            vocab: "vocab.json".into(),
            train: "train.jsonl".into(),
            test: None,
            features: None,
            feature_dim: 8,
            one_shot: true,
            shuffle_seed: None,
            concept_triples: Some("concepts.tsv".into()),
            merge_map: None,
            word_vectors: None,
            word_dim: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub setups: Vec<String>,
    pub graph_constraint: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            setups: vec!["PredCls".into(), "SGCls".into()],
            graph_constraint: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub freq_epsilon: f64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub transe: TransEConfig,
    pub paths: PathConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            freq_epsilon: 1e-3,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            transe: TransEConfig::default(),
            paths: PathConfig::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn field(path: &str, e: Error) -> Error {
    let msg = match e {
        Error::Config(m) | Error::Validation(m) => m,
        other => other.to_string(),
    };
    Error::Config(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    /// Parses TOML without touching the filesystem.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| toml_error(text, e))
    }

    /// Reads, resolves relative paths and validates, including that every
    /// referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [&mut d.vocab, &mut d.train] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for p in [
            &mut d.test,
            &mut d.features,
            &mut d.concept_triples,
            &mut d.merge_map,
            &mut d.word_vectors,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn setups(&self) -> Result<Vec<Setup>> {
        self.eval
            .setups
            .iter()
            .map(|s| s.parse::<Setup>())
            .collect::<Result<Vec<_>>>()
    }

    /// Value checks, each error naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if !(self.freq_epsilon > 0.0) {
            return Err(Error::Config(format!(
                "freq_epsilon: must be > 0, got {}",
                self.freq_epsilon
            )));
        }
        if self.data.feature_dim == 0 {
            return Err(Error::Config("data.feature_dim: must be at least 1".into()));
        }
        if self.data.word_dim == 0 && self.data.word_vectors.is_none() {
            return Err(Error::Config("data.word_dim: must be at least 1".into()));
        }
        self.model.validate().map_err(|e| field("model", e))?;
        self.transe.validate().map_err(|e| field("transe", e))?;
        self.paths.validate().map_err(|e| field("paths", e))?;
        self.optimizer.validate().map_err(|e| field("optimizer", e))?;
        if self.model.use_commonsense_knowledge && self.data.concept_triples.is_none() {
            return Err(Error::Config(
                "data.concept_triples: required when model.use_commonsense_knowledge is on".into(),
            ));
        }
        if self.eval.setups.is_empty() {
            return Err(Error::Config("eval.setups: list at least one setup".into()));
        }
        for s in &self.eval.setups {
            s.parse::<Setup>().map_err(|e| match e {
                Error::Unsupported(m) => Error::Config(format!("eval.setups: {m}")),
                other => field("eval.setups", other),
            })?;
        }
        Ok(())
    }

    fn check_files(&self) -> Result<()> {
        let d = &self.data;
        let required = [("data.vocab", Some(&d.vocab)), ("data.train", Some(&d.train))];
        let optional = [
            ("data.test", d.test.as_ref()),
            ("data.features", d.features.as_ref()),
            ("data.concept_triples", d.concept_triples.as_ref()),
            ("data.merge_map", d.merge_map.as_ref()),
            ("data.word_vectors", d.word_vectors.as_ref()),
        ];
        for (name, p) in required.into_iter().chain(optional) {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("{name}: no such file {}", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// TOML error message prefixed with its line number.
fn toml_error(text: &str, e: toml::de::Error) -> Error {
    match e.span() {
        Some(s) => {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            Error::Config(format!("line {line}: {}", e.message()))
        }
        None => Error::Config(e.message().to_string()),
    }
}
