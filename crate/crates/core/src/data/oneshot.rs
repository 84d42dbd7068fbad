use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{ImageRecord, TripletKey};
use crate::nn::labeled_rng;

/// Where the single supervised instance of a triplet key lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exemplar {
    /// Position of the image in [`OneShotDataset::images`].
    pub image: usize,
    pub image_id: String,
    /// Position of the triplet in that image's `triplets`.
    pub triplet: usize,
}

/// Training split in which every triplet key has exactly one supervised example.
///
/// Kept images retain all of their annotations (useful as evaluation ground
/// truth), but only the registered triplets count as supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct OneShotDataset {
    pub images: Vec<ImageRecord>,
    pub registry: BTreeMap<TripletKey, Exemplar>,
}

impl OneShotDataset {
    /// Registered triplet indices of image `i`, ascending.
    pub fn supervised_indices(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .registry
            .values()
            .filter(|e| e.image == i)
            .map(|e| e.triplet)
            .collect();
        v.sort_unstable();
        v
    }

    /// Kept images with triplet lists reduced to their supervision.
    pub fn supervision_records(&self) -> Vec<ImageRecord> {
        self.images
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let mut r = rec.clone();
                r.triplets = self
                    .supervised_indices(i)
                    .into_iter()
                    .map(|t| rec.triplets[t])
                    .collect();
                r
            })
            .collect()
    }
}

/// Scans `corpus` in order and keeps an image iff it brings at least one
/// triplet key not registered yet; only those new keys become supervision.
pub fn build_one_shot_split(corpus: &[ImageRecord]) -> OneShotDataset {
    let mut images = Vec::new();
    let mut registry: BTreeMap<TripletKey, Exemplar> = BTreeMap::new();
    for rec in corpus {
        let mut fresh = Vec::new();
        for (ti, t) in rec.triplets.iter().enumerate() {
            let key = t.key();
            if !registry.contains_key(&key) && !fresh.iter().any(|(k, _)| *k == key) {
                fresh.push((key, ti));
            }
        }
        if fresh.is_empty() {
            continue;
        }
        let image = images.len();
        for (key, triplet) in fresh {
            registry.insert(
                key,
                Exemplar {
                    image,
                    image_id: rec.image_id.clone(),
                    triplet,
                },
            );
        }
        images.push(rec.clone());
    }
    OneShotDataset { images, registry }
}

/// Corpus order permuted by a seeded shuffle.
pub fn shuffled(corpus: &[ImageRecord], seed: u64) -> Vec<ImageRecord> {
    let mut v = corpus.to_vec();
    v.shuffle(&mut labeled_rng(seed, "one-shot-order"));
    v
}
