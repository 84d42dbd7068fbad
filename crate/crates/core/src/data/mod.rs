//! Scene annotations, detector-output surrogates, the one-shot split and the
//! frequency prior.

mod corpus;
mod features;
mod freq;
mod oneshot;
pub mod synth;

pub use corpus::{load_triplet_corpus, write_triplet_corpus};
pub use features::{attach_features, load_instance_set, FeatureFile, FeatureSource};
pub use freq::{compute_frequency_bias, FreqBias};
pub use oneshot::{build_one_shot_split, shuffled, Exemplar, OneShotDataset};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Object and predicate class names. Indices into these lists are the class ids
/// used everywhere else.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub object_classes: Vec<String>,
    pub predicate_classes: Vec<String>,
}

impl Vocabulary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Vocabulary = serde_json::from_str(&text)?;
        v.validate()?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.object_classes.is_empty() || self.predicate_classes.is_empty() {
            return Err(Error::Validation(
                "vocabulary needs at least one object and one predicate class".into(),
            ));
        }
        Ok(())
    }

    pub fn num_objects(&self) -> usize {
        self.object_classes.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicate_classes.len()
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.object_classes.iter().position(|c| c == name)
    }

    pub fn predicate_index(&self, name: &str) -> Option<usize> {
        self.predicate_classes.iter().position(|c| c == name)
    }
}

/// Type-level triplet key `(subject class, predicate, object class)`.
pub type TripletKey = (usize, usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationshipTriplet {
    pub subject_class: usize,
    pub predicate_class: usize,
    pub object_class: usize,
    pub subject_instance: usize,
    pub object_instance: usize,
}

impl RelationshipTriplet {
    pub fn key(&self) -> TripletKey {
        (self.subject_class, self.predicate_class, self.object_class)
    }
}

/// Box corners `(x1, y1, x2, y2)` in pixels.
pub type BoxCoords = [f64; 4];

pub fn validate_box(b: &BoxCoords, width: f64, height: f64) -> Result<()> {
    let [x1, y1, x2, y2] = *b;
    if !b.iter().all(|v| v.is_finite()) {
        return Err(Error::Validation(format!("box {b:?} has non-finite corners")));
    }
    if x1 >= x2 || y1 >= y2 {
        return Err(Error::Validation(format!(
            "box {b:?} must satisfy x1 < x2 and y1 < y2"
        )));
    }
    if x1 < 0.0 || y1 < 0.0 || x2 > width || y2 > height {
        return Err(Error::Validation(format!(
            "box {b:?} leaves the {width}x{height} image"
        )));
    }
    Ok(())
}

/// Per-image instances: label distribution `L`, boxes `B`, features `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSet {
    pub labels: Tensor,
    pub boxes: Vec<BoxCoords>,
    pub features: Tensor,
    pub image_width: f64,
    pub image_height: f64,
    pub gt_classes: Option<Vec<usize>>,
}

impl InstanceSet {
    /// Instances with one-hot labels from known classes and no features yet.
    pub fn from_ground_truth(
        classes: Vec<usize>,
        boxes: Vec<BoxCoords>,
        num_classes: usize,
        width: f64,
        height: f64,
    ) -> Result<Self> {
        let n = classes.len();
        let mut labels = Tensor::zeros(&[n, num_classes]);
        for (i, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::Validation(format!(
                    "instance {i} has class {c}, vocabulary has {num_classes}"
                )));
            }
            labels.set(i, c, 1.0);
        }
        let set = Self {
            labels,
            boxes,
            features: Tensor::zeros(&[n, 0]),
            image_width: width,
            image_height: height,
            gt_classes: Some(classes),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.boxes.len();
        if self.labels.rows() != n || self.features.rows() != n {
            return Err(Error::Validation(format!(
                "{} boxes but {} label rows and {} feature rows",
                n,
                self.labels.rows(),
                self.features.rows()
            )));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(Error::Validation("image size must be positive".into()));
        }
        for i in 0..n {
            let s: f64 = self.labels.row_slice(i).iter().sum();
            if (s - 1.0).abs() > 1e-6 || self.labels.row_slice(i).iter().any(|v| *v < 0.0) {
                return Err(Error::Validation(format!(
                    "label row {i} is not a probability distribution (sum {s})"
                )));
            }
            validate_box(&self.boxes[i], self.image_width, self.image_height)?;
        }
        if let Some(gt) = &self.gt_classes {
            if gt.len() != n {
                return Err(Error::Validation(format!(
                    "{} gt classes for {n} instances",
                    gt.len()
                )));
            }
        }
        self.labels.check_finite()?;
        self.features.check_finite()
    }

    /// Argmax of each label row (lowest index on ties).
    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| argmax(self.labels.row_slice(i)))
            .collect()
    }

    /// Copy with every label row replaced by the uniform distribution.
    pub fn with_uniform_labels(&self) -> Self {
        let d = self.num_classes();
        let mut s = self.clone();
        s.labels = Tensor::full(&[self.len(), d], 1.0 / d as f64);
        s
    }

    /// Copy with one-hot labels for `classes`.
    pub fn with_one_hot_labels(&self, classes: &[usize]) -> Self {
        let d = self.num_classes();
        let mut s = self.clone();
        s.labels = Tensor::zeros(&[self.len(), d]);
        for (i, &c) in classes.iter().enumerate() {
            s.labels.set(i, c, 1.0);
        }
        s
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub instances: InstanceSet,
    pub triplets: Vec<RelationshipTriplet>,
}

impl ImageRecord {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let tag = |e: Error| Error::Validation(format!("image {}: {e}", self.image_id));
        self.instances.validate().map_err(tag)?;
        let n = self.instances.len();
        let gt = self.instances.gt_classes.as_deref();
        for t in &self.triplets {
            if t.subject_instance >= n || t.object_instance >= n {
                return Err(Error::Validation(format!(
                    "image {}: triplet references instance {} but only {n} exist",
                    self.image_id,
                    t.subject_instance.max(t.object_instance)
                )));
            }
            if t.subject_instance == t.object_instance {
                return Err(Error::Validation(format!(
                    "image {}: triplet relates instance {} to itself",
                    self.image_id, t.subject_instance
                )));
            }
            if t.subject_class >= vocab.num_objects()
                || t.object_class >= vocab.num_objects()
                || t.predicate_class >= vocab.num_predicates()
            {
                return Err(Error::Validation(format!(
                    "image {}: triplet {:?} outside vocabulary",
                    self.image_id,
                    t.key()
                )));
            }
            if let Some(gt) = gt {
                if gt[t.subject_instance] != t.subject_class || gt[t.object_instance] != t.object_class {
                    return Err(Error::Validation(format!(
                        "image {}: triplet classes disagree with instance classes",
                        self.image_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Ground-truth triplets with exact duplicates removed, in first-seen order.
    pub fn unique_triplets(&self) -> Vec<RelationshipTriplet> {
        let mut seen = std::collections::HashSet::new();
        self.triplets
            .iter()
            .filter(|t| seen.insert((t.subject_instance, t.predicate_class, t.object_instance)))
            .copied()
            .collect()
    }
}
