use std::collections::BTreeMap;

use super::ImageRecord;
use crate::error::{Error, Result};

/// Background pairs counted per image, as a multiple of its foreground count.
pub const BACKGROUND_CAP: usize = 4;

/// Empirical predicate distribution per `(subject class, object class)`,
/// stored as log-probabilities over `K` predicates plus a trailing
/// background cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqBias {
    num_predicates: usize,
    epsilon: f64,
    table: BTreeMap<(usize, usize), Vec<f64>>,
    uniform: Vec<f64>,
}

impl FreqBias {
    pub fn num_predicates(&self) -> usize {
        self.num_predicates
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Number of class pairs with observed counts.
    pub fn seen_pairs(&self) -> usize {
        self.table.len()
    }

    /// Log-distribution over `K + 1` cells; uniform for unseen pairs.
    pub fn lookup(&self, subject_class: usize, object_class: usize) -> &[f64] {
        self.table
            .get(&(subject_class, object_class))
            .unwrap_or(&self.uniform)
    }

    /// The `K` predicate cells of [`Self::lookup`], used as the bias `b^r`.
    pub fn predicate_bias(&self, subject_class: usize, object_class: usize) -> &[f64] {
        &self.lookup(subject_class, object_class)[..self.num_predicates]
    }

    /// Log-probability of the background cell.
    pub fn background_log_prob(&self, subject_class: usize, object_class: usize) -> f64 {
        self.lookup(subject_class, object_class)[self.num_predicates]
    }

    /// Shifts every stored row (and the unseen fallback) by `c`.
    pub fn shifted(&self, c: f64) -> FreqBias {
        let mut s = self.clone();
        s.table
            .values_mut()
            .flat_map(|v| v.iter_mut())
            .for_each(|v| *v += c);
        s.uniform.iter_mut().for_each(|v| *v += c);
        s
    }
}

/// Counts predicates per class pair over annotated triplets, plus background
/// for unannotated ordered instance pairs (capped at [`BACKGROUND_CAP`] times
/// the image's foreground count), smooths every cell by `epsilon` and
/// normalizes.
pub fn compute_frequency_bias(
    images: &[ImageRecord],
    num_predicates: usize,
    epsilon: f64,
) -> Result<FreqBias> {
    if !(epsilon > 0.0) {
        return Err(Error::Validation(format!("epsilon must be > 0, got {epsilon}")));
    }
    let cells = num_predicates + 1;
    let mut counts: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for rec in images {
        let classes = rec
            .instances
            .gt_classes
            .clone()
            .unwrap_or_else(|| rec.instances.argmax_labels());
        for t in &rec.triplets {
            if t.predicate_class >= num_predicates {
                return Err(Error::Index {
                    index: t.predicate_class,
                    size: num_predicates,
                });
            }
            counts
                .entry((t.subject_class, t.object_class))
                .or_insert_with(|| vec![0.0; cells])[t.predicate_class] += 1.0;
        }
        let n = rec.instances.len();
        let mut budget = BACKGROUND_CAP * rec.triplets.len();
        'pairs: for i in 0..n {
            for j in 0..n {
                if budget == 0 {
                    break 'pairs;
                }
                if i == j
                    || rec
                        .triplets
                        .iter()
                        .any(|t| t.subject_instance == i && t.object_instance == j)
                {
                    continue;
                }
                counts
                    .entry((classes[i], classes[j]))
                    .or_insert_with(|| vec![0.0; cells])[num_predicates] += 1.0;
                budget -= 1;
            }
        }
    }
    let table = counts
        .into_iter()
        .map(|(k, row)| {
            let total: f64 = row.iter().map(|c| c + epsilon).sum();
            (k, row.iter().map(|c| ((c + epsilon) / total).ln()).collect())
        })
        .collect();
    Ok(FreqBias {
        num_predicates,
        epsilon,
        table,
        uniform: vec![-(cells as f64).ln(); cells],
    })
}
