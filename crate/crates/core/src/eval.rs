//! Triplet ranking under the graph constraint and macro-averaged Recall@K for
//! the PredCls and SGCls setups.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{argmax, ImageRecord, InstanceSet, RelationshipTriplet};
use crate::error::{Error, Result};
use crate::head::PairScores;
use crate::tensor::{sigmoid, softmax, Tensor};

pub const RECALL_KS: [usize; 3] = [20, 50, 100];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedTriplet {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub score: f64,
}

fn rank_order(a: &RankedTriplet, b: &RankedTriplet) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then((a.subject, a.object, a.predicate).cmp(&(b.subject, b.object, b.predicate)))
}

/// Candidate triplets sorted by descending `σ(r') · softmax(r)_k`, ties by
/// `(subject, object, predicate)`. With the graph constraint each ordered
/// pair contributes only its argmax predicate.
pub fn rank_triplets(scores: &PairScores, graph_constraint: bool) -> Vec<RankedTriplet> {
    let mut out = Vec::new();
    for (p, &(s, o)) in scores.pairs.iter().enumerate() {
        let probs = softmax(scores.predicate_logits.row_slice(p));
        let gate = sigmoid(scores.relatedness.data()[p]);
        if graph_constraint {
            let k = argmax(&probs);
            out.push(RankedTriplet {
                subject: s,
                object: o,
                predicate: k,
                score: gate * probs[k],
            });
        } else {
            out.extend(probs.iter().enumerate().map(|(k, &pk)| RankedTriplet {
                subject: s,
                object: o,
                predicate: k,
                score: gate * pk,
            }));
        }
    }
    out.sort_by(rank_order);
    out
}

fn dedup_gt(gt: &[RelationshipTriplet]) -> Vec<RelationshipTriplet> {
    let mut seen = HashSet::new();
    gt.iter()
        .filter(|t| seen.insert((t.subject_instance, t.predicate_class, t.object_instance)))
        .copied()
        .collect()
}

/// Fraction of (deduplicated) ground-truth triplets found in the top `k`.
/// An empty ground truth gives 1.0.
pub fn recall_at_k(ranked: &[RankedTriplet], gt: &[RelationshipTriplet], k: usize) -> f64 {
    recall_with_classes(ranked, gt, k, None)
}

/// As [`recall_at_k`], but when `predicted_classes` is given a ground-truth
/// triplet also needs both endpoint classes predicted correctly.
pub fn recall_with_classes(
    ranked: &[RankedTriplet],
    gt: &[RelationshipTriplet],
    k: usize,
    predicted_classes: Option<&[usize]>,
) -> f64 {
    let gt = dedup_gt(gt);
    if gt.is_empty() {
        return 1.0;
    }
    let top: HashSet<(usize, usize, usize)> = ranked
        .iter()
        .take(k)
        .map(|r| (r.subject, r.predicate, r.object))
        .collect();
    let hits = gt
        .iter()
        .filter(|t| top.contains(&(t.subject_instance, t.predicate_class, t.object_instance)))
        .filter(|t| {
            predicted_classes.is_none_or(|c| {
                c[t.subject_instance] == t.subject_class && c[t.object_instance] == t.object_class
            })
        })
        .count();
    hits as f64 / gt.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Setup {
    PredCls,
    SgCls,
}

impl Setup {
    pub fn name(self) -> &'static str {
        match self {
            Setup::PredCls => "PredCls",
            Setup::SgCls => "SGCls",
        }
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "predcls" => Ok(Setup::PredCls),
            "sgcls" => Ok(Setup::SgCls),
            "sgdet" => Err(Error::Unsupported(
                "SGDet requires an object detector (out of scope)".into(),
            )),
            _ => Err(Error::Config(format!(
                "unknown setup {s:?}; expected PredCls or SGCls"
            ))),
        }
    }
}

/// Anything that can score instance pairs and, for SGCls, predict labels.
pub trait Predictor {
    fn score_pairs(&self, instances: &InstanceSet, classes: &[usize]) -> Result<PairScores>;

    /// Label logits `[n x d^a]` computed without ground-truth classes.
    fn label_logits(&self, instances: &InstanceSet) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupMetrics {
    pub images: usize,
    /// `K -> mean recall`.
    pub recall: BTreeMap<usize, f64>,
}

/// Evaluates `predictor` on `images` under `setup`. Images with no ground
/// truth triplets are skipped.
pub fn run_setup<P: Predictor + ?Sized>(
    predictor: &P,
    images: &[ImageRecord],
    setup: Setup,
    graph_constraint: bool,
) -> Result<SetupMetrics> {
    let mut sums: BTreeMap<usize, f64> = RECALL_KS.iter().map(|&k| (k, 0.0)).collect();
    let mut count = 0;
    for rec in images {
        if rec.triplets.is_empty() {
            continue;
        }
        let gt_classes = rec.instances.gt_classes.as_ref().ok_or_else(|| {
            Error::Validation(format!("image {}: {} needs ground-truth classes", rec.image_id, setup.name()))
        })?;
        let (inst, predicted) = match setup {
            Setup::PredCls => (rec.instances.with_one_hot_labels(gt_classes), None),
            Setup::SgCls => {
                // Class-agnostic inputs: ground-truth labels must not leak.
                let logits = predictor.label_logits(&rec.instances.with_uniform_labels())?;
                let n = rec.instances.len();
                let rows: Vec<Vec<f64>> = (0..n).map(|i| softmax(logits.row_slice(i))).collect();
                let classes: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
                let mut inst = rec.instances.clone();
                inst.labels = Tensor::from_rows(&rows, rec.instances.num_classes())?;
                (inst, Some(classes))
            }
        };
        let classes = predicted.as_deref().unwrap_or(gt_classes);
        let scores = predictor.score_pairs(&inst, classes)?;
        let ranked = rank_triplets(&scores, graph_constraint);
        for (k, sum) in sums.iter_mut() {
            *sum += recall_with_classes(&ranked, &rec.triplets, *k, predicted.as_deref());
        }
        count += 1;
    }
    let recall = sums
        .into_iter()
        .map(|(k, s)| (k, if count == 0 { 0.0 } else { s / count as f64 }))
        .collect();
    Ok(SetupMetrics { images: count, recall })
}

/// Per-setup metrics keyed by setup name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub setups: BTreeMap<String, SetupMetrics>,
}

impl MetricsTable {
    pub fn insert(&mut self, setup: Setup, metrics: SetupMetrics) {
        self.setups.insert(setup.name().to_string(), metrics);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text with one row per setup and R@K columns in percent.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10}", "Setup");
        for k in RECALL_KS {
            let _ = write!(s, "{:>9}", format!("R@{k}"));
        }
        let _ = writeln!(s, "{:>9}", "images");
        for (name, m) in &self.setups {
            let _ = write!(s, "{name:<10}");
            for k in RECALL_KS {
                let _ = write!(s, "{:>9.1}", 100.0 * m.recall.get(&k).copied().unwrap_or(0.0));
            }
            let _ = writeln!(s, "{:>9}", m.images);
        }
        s
    }
}
