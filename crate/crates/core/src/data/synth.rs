//! Seeded synthetic scenes for tests, demos and the learning sanity check.
//!
//! Predicates are a deterministic function of box geometry, so a model that
//! reads box layout can recover them, while class pairs alone are ambiguous.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BoxCoords, ImageRecord, InstanceSet, RelationshipTriplet, Vocabulary};
use crate::nn::labeled_rng;

pub const OBJECT_NAMES: &[&str] = &[
    "person", "dog", "table", "cup", "horse", "bed", "pillow", "tree", "car", "chair", "window",
    "plate", "book", "bottle", "lamp", "shirt",
];

pub const PREDICATE_NAMES: &[&str] = &["in", "has", "above", "below", "left of", "right of"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_images: usize,
    pub num_object_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub max_triplets: usize,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_images: 40,
            num_object_classes: 8,
            min_instances: 3,
            max_instances: 5,
            max_triplets: 3,
            id_prefix: "synth".into(),
        }
    }
}

pub fn vocabulary(num_object_classes: usize) -> Vocabulary {
    assert!(
        (1..=OBJECT_NAMES.len()).contains(&num_object_classes),
        "between 1 and {} object classes",
        OBJECT_NAMES.len()
    );
    Vocabulary {
        object_classes: OBJECT_NAMES[..num_object_classes].iter().map(|s| s.to_string()).collect(),
        predicate_classes: PREDICATE_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

fn inside(a: &BoxCoords, b: &BoxCoords) -> bool {
    a[0] >= b[0] && a[1] >= b[1] && a[2] <= b[2] && a[3] <= b[3]
}

/// Predicate index (into [`PREDICATE_NAMES`]) implied by the two boxes.
pub fn geometric_predicate(subject: &BoxCoords, object: &BoxCoords) -> usize {
    if inside(subject, object) {
        return 0;
    }
    if inside(object, subject) {
        return 1;
    }
    let dx = (subject[0] + subject[2] - object[0] - object[2]) / 2.0;
    let dy = (subject[1] + subject[3] - object[1] - object[3]) / 2.0;
    if dy.abs() >= dx.abs() {
        if dy < 0.0 {
            2
        } else {
            3
        }
    } else if dx < 0.0 {
        4
    } else {
        5
    }
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BoxCoords {
    let bw = rng.random_range(10..=40) as f64;
    let bh = rng.random_range(10..=40) as f64;
    let x1 = rng.random_range(0..=(w - bw) as i64) as f64;
    let y1 = rng.random_range(0..=(h - bh) as i64) as f64;
    [x1, y1, x1 + bw, y1 + bh]
}

fn box_inside(rng: &mut ChaCha8Rng, outer: &BoxCoords) -> BoxCoords {
    let (ow, oh) = (outer[2] - outer[0], outer[3] - outer[1]);
    let bw = (ow * rng.random_range(0.3..0.7)).floor().max(1.0);
    let bh = (oh * rng.random_range(0.3..0.7)).floor().max(1.0);
    let x1 = outer[0] + ((ow - bw) * rng.random_range(0.0..1.0)).floor();
    let y1 = outer[1] + ((oh - bh) * rng.random_range(0.0..1.0)).floor();
    [x1, y1, x1 + bw, y1 + bh]
}

/// One synthetic image with ground-truth classes and geometric predicates.
pub fn generate_image(cfg: &SynthConfig, index: usize) -> ImageRecord {
    let image_id = format!("{}-{index:05}", cfg.id_prefix);
    let mut rng = labeled_rng(cfg.seed, &format!("synth-image/{image_id}"));
    let w = rng.random_range(80..=160) as f64;
    let h = rng.random_range(80..=160) as f64;
    let n = rng.random_range(cfg.min_instances..=cfg.max_instances.max(cfg.min_instances));
    let mut classes = Vec::with_capacity(n);
    let mut boxes: Vec<BoxCoords> = Vec::with_capacity(n);
    for i in 0..n {
        classes.push(rng.random_range(0..cfg.num_object_classes));
        let b = if i > 0 && rng.random_bool(0.3) {
            let outer = boxes[rng.random_range(0..i)];
            box_inside(&mut rng, &outer)
        } else {
            random_box(&mut rng, w, h)
        };
        boxes.push(b);
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    if n >= 2 {
        let want = rng.random_range(1..=cfg.max_triplets.max(1));
        for _ in 0..want * 4 {
            if pairs.len() == want {
                break;
            }
            let s = rng.random_range(0..n);
            let o = rng.random_range(0..n);
            if s != o && !pairs.contains(&(s, o)) {
                pairs.push((s, o));
            }
        }
    }
    let triplets = pairs
        .into_iter()
        .map(|(s, o)| RelationshipTriplet {
            subject_class: classes[s],
            predicate_class: geometric_predicate(&boxes[s], &boxes[o]),
            object_class: classes[o],
            subject_instance: s,
            object_instance: o,
        })
        .collect();
    let instances = InstanceSet::from_ground_truth(classes, boxes, cfg.num_object_classes, w, h)
        .expect("generator emits valid instances");
    ImageRecord {
        image_id,
        instances,
        triplets,
    }
}

/// Vocabulary plus `num_images` images; features are left empty.
pub fn generate_corpus(cfg: &SynthConfig) -> (Vocabulary, Vec<ImageRecord>) {
    let vocab = vocabulary(cfg.num_object_classes);
    let images = (0..cfg.num_images).map(|i| generate_image(cfg, i)).collect();
    (vocab, images)
}

const EXTRA_CONCEPTS: &[&str] = &[
    "animal", "furniture", "kitchen", "outdoors", "soft", "sleep", "ride", "drink", "read", "light",
    "house", "clothing",
];

const RELATIONS: &[&str] = &["IsA", "AtLocation", "UsedFor", "HasProperty", "RelatedTo", "CapableOf"];

/// Seeded ConceptNet-like `(head, relation, tail)` triples over the object
/// class names (underscored) and a handful of extra concepts.
pub fn concept_triples(vocab: &Vocabulary, seed: u64) -> Vec<(String, String, String)> {
    let mut rng = labeled_rng(seed, "synth-concepts");
    let mut concepts: Vec<String> = vocab
        .object_classes
        .iter()
        .map(|c| c.to_lowercase().replace(' ', "_"))
        .collect();
    concepts.extend(EXTRA_CONCEPTS.iter().map(|s| s.to_string()));
    let mut out: Vec<(String, String, String)> = Vec::new();
    for c in 0..vocab.num_objects() {
        for _ in 0..3 {
            let t = rng.random_range(0..concepts.len());
            if t == c {
                continue;
            }
            let r = RELATIONS[rng.random_range(0..RELATIONS.len())];
            let e = (concepts[c].clone(), r.to_string(), concepts[t].clone());
            if !out.contains(&e) {
                out.push(e);
            }
        }
    }
    out
}
