//! Instance relation transformer: label and box embeddings concatenated with
//! visual features, projected to the model width and passed through post-norm
//! self-attention blocks. A second, independent encoder with a linear
//! classifier refines instance labels.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::{validate_box, BoxCoords, InstanceSet};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrtConfig {
    pub depth: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub label_embed_dim: usize,
    pub box_embed_dim: usize,
}

impl Default for IrtConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 2,
            model_dim: 32,
            label_embed_dim: 16,
            box_embed_dim: 16,
        }
    }
}

impl IrtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.model_dim == 0 {
            return Err(Error::Config("irt: depth, heads and model_dim must be at least 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "irt.model_dim ({}) must be divisible by irt.heads ({})",
                self.model_dim, self.heads
            )));
        }
        if self.label_embed_dim == 0 || self.box_embed_dim == 0 {
            return Err(Error::Config("irt: embedding widths must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scale-free box description
/// `(x1/W, y1/H, x2/W, y2/H, cx/W, cy/H, w/W, h/H)`.
pub fn box_geometry(b: &BoxCoords, width: f64, height: f64) -> Result<[f64; 8]> {
    validate_box(b, width, height)?;
    let [x1, y1, x2, y2] = *b;
    Ok([
        x1 / width,
        y1 / height,
        x2 / width,
        y2 / height,
        (x1 + x2) / 2.0 / width,
        (y1 + y2) / 2.0 / height,
        (x2 - x1) / width,
        (y2 - y1) / height,
    ])
}

/// `[n x 8]` geometry matrix for every box of `instances`.
pub fn geometry_matrix(instances: &InstanceSet) -> Result<Tensor> {
    let rows = instances
        .boxes
        .iter()
        .map(|b| Ok(box_geometry(b, instances.image_width, instances.image_height)?.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows, 8)
}

/// `E^g = L · W_emb`.
pub fn embed_labels(tape: &mut Tape, labels: Var, w_emb: Var) -> Result<Var> {
    if tape.value(labels).cols() != tape.value(w_emb).rows() {
        return Err(Error::dim(format!(
            "labels have {} classes, embedding table has {} rows",
            tape.value(labels).cols(),
            tape.value(w_emb).rows()
        )));
    }
    tape.matmul(labels, w_emb)
}

struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff1: Linear,
    ff2: Linear,
    norms: [(String, String); 2],
}

impl Block {
    fn new(prefix: &str, d: usize) -> Self {
        let lin = |part: &str, i, o| Linear::new(&format!("{prefix}.{part}"), i, o, true);
        let norm = |part: &str| (format!("{prefix}.{part}.gain"), format!("{prefix}.{part}.bias"));
        Self {
            q: lin("query", d, d),
            // A key bias shifts each score row by a constant, which softmax ignores.
            k: Linear::new(&format!("{prefix}.key"), d, d, false),
            v: lin("value", d, d),
            o: lin("attn_out", d, d),
            ff1: lin("ff1", d, 4 * d),
            ff2: lin("ff2", 4 * d, d),
            norms: [norm("norm1"), norm("norm2")],
        }
    }

    fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.ff1, &self.ff2]
    }
}

/// Output of [`InstanceEncoder::forward`]: context features `M` and the
/// attention matrices, layer-major then head.
pub struct Encoded {
    pub context: Var,
    pub attention: Vec<Var>,
}

/// One transformer over an instance set. Parameters live under `name`.
pub struct InstanceEncoder {
    pub config: IrtConfig,
    pub num_classes: usize,
    pub feature_dim: usize,
    label_embed: String,
    box_embed: Linear,
    input: Linear,
    blocks: Vec<Block>,
}

impl InstanceEncoder {
    pub fn new(name: &str, config: IrtConfig, num_classes: usize, feature_dim: usize) -> Self {
        let d = config.model_dim;
        Self {
            config,
            num_classes,
            feature_dim,
            label_embed: format!("{name}.label_embed"),
            box_embed: Linear::new(&format!("{name}.box_embed"), 8, config.box_embed_dim, true),
            input: Linear::new(
                &format!("{name}.input"),
                feature_dim + config.label_embed_dim + config.box_embed_dim,
                d,
                true,
            ),
            blocks: (0..config.depth)
                .map(|l| Block::new(&format!("{name}.layer{l}"), d))
                .collect(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        store.insert(
            &self.label_embed,
            crate::nn::uniform_init(
                self.num_classes,
                self.config.label_embed_dim,
                self.num_classes,
                seed,
                &self.label_embed,
            ),
        );
        self.box_embed.init(store, seed);
        self.input.init(store, seed);
        let d = self.config.model_dim;
        for b in &self.blocks {
            for l in b.linears() {
                l.init(store, seed);
            }
            for (gain, bias) in &b.norms {
                store.insert(gain, Tensor::full(&[1, d], 1.0));
                store.insert(bias, Tensor::zeros(&[1, d]));
            }
        }
    }

    /// `E^v`: box geometry through a linear projection.
    pub fn embed_boxes(&self, tape: &mut Tape, store: &ParamStore, instances: &InstanceSet) -> Result<Var> {
        let g = tape.constant(geometry_matrix(instances)?);
        self.box_embed.forward(tape, store, g)
    }

    fn layer_norm(&self, tape: &mut Tape, store: &ParamStore, x: Var, names: &(String, String)) -> Result<Var> {
        let z = tape.layer_norm_rows(x, LN_EPS)?;
        let g = tape.param(store, &names.0)?;
        let b = tape.param(store, &names.1)?;
        let z = tape.mul_row(z, g)?;
        tape.add_row(z, b)
    }

    fn attention(&self, tape: &mut Tape, store: &ParamStore, b: &Block, x: Var, attn: &mut Vec<Var>) -> Result<Var> {
        let d = self.config.model_dim;
        let dh = d / self.config.heads;
        let q = b.q.forward(tape, store, x)?;
        let k = b.k.forward(tape, store, x)?;
        let v = b.v.forward(tape, store, x)?;
        let mut outs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let a = tape.softmax_rows(s)?;
            attn.push(a);
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&outs)?;
        b.o.forward(tape, store, cat)
    }

    /// Encodes `instances` with their label rows and features.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, instances: &InstanceSet) -> Result<Encoded> {
        let n = instances.len();
        if instances.num_classes() != self.num_classes {
            return Err(Error::dim(format!(
                "labels have {} classes, encoder expects {}",
                instances.num_classes(),
                self.num_classes
            )));
        }
        if instances.feature_dim() != self.feature_dim {
            return Err(Error::dim(format!(
                "features have {} columns, encoder expects {}",
                instances.feature_dim(),
                self.feature_dim
            )));
        }
        if n == 0 {
            return Ok(Encoded {
                context: tape.constant(Tensor::zeros(&[0, self.config.model_dim])),
                attention: Vec::new(),
            });
        }
        let labels = tape.constant(instances.labels.clone());
        let w_emb = tape.param(store, &self.label_embed)?;
        let eg = embed_labels(tape, labels, w_emb)?;
        let ev = self.embed_boxes(tape, store, instances)?;
        let f = tape.constant(instances.features.clone());
        let x = tape.concat_cols(&[f, eg, ev])?;
        let mut x = self.input.forward(tape, store, x)?;
        let mut attention = Vec::new();
        for b in &self.blocks {
            let a = self.attention(tape, store, b, x, &mut attention)?;
            let r = tape.add(x, a)?;
            x = self.layer_norm(tape, store, r, &b.norms[0])?;
            let h = b.ff1.forward(tape, store, x)?;
            let h = tape.relu(h);
            let h = b.ff2.forward(tape, store, h)?;
            let r = tape.add(x, h)?;
            x = self.layer_norm(tape, store, r, &b.norms[1])?;
        }
        Ok(Encoded { context: x, attention })
    }
}

/// Value-only context features `M`.
pub fn encode_instances(encoder: &InstanceEncoder, store: &ParamStore, instances: &InstanceSet) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = encoder.forward(&mut tape, store, instances)?;
    Ok(tape.value(out.context).clone())
}

/// Attention matrices of every layer and head for inspection.
pub fn attention_weights(
    encoder: &InstanceEncoder,
    store: &ParamStore,
    instances: &InstanceSet,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let out = encoder.forward(&mut tape, store, instances)?;
    Ok(out.attention.iter().map(|&a| tape.value(a).clone()).collect())
}

/// Separate encoder plus classifier producing label logits.
pub struct LabelRefiner {
    pub encoder: InstanceEncoder,
    pub classifier: Linear,
}

impl LabelRefiner {
    pub fn new(config: IrtConfig, num_classes: usize, feature_dim: usize) -> Self {
        Self {
            encoder: InstanceEncoder::new("refiner", config, num_classes, feature_dim),
            classifier: Linear::new("refiner.classifier", config.model_dim, num_classes, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.encoder.init(store, seed);
        self.classifier.init(store, seed);
    }

    /// `[n x d^a]` label logits.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, instances: &InstanceSet) -> Result<Var> {
        let m = self.encoder.forward(tape, store, instances)?.context;
        self.classifier.forward(tape, store, m)
    }

    /// Mean cross-entropy of the logits against ground-truth classes.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, instances: &InstanceSet) -> Result<Var> {
        let gt = instances
            .gt_classes
            .as_ref()
            .ok_or_else(|| Error::Validation("label refinement needs ground-truth classes".into()))?;
        let logits = self.forward(tape, store, instances)?;
        tape.softmax_cross_entropy(logits, gt)
    }
}

/// Value-only refined label logits.
pub fn refine_labels(refiner: &LabelRefiner, store: &ParamStore, instances: &InstanceSet) -> Result<Tensor> {
    let mut tape = Tape::new();
    let l = refiner.forward(&mut tape, store, instances)?;
    Ok(tape.value(l).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_corpus, SynthConfig};
    use crate::data::{attach_features, FeatureSource};
    use crate::nn::{finite_difference_check, sgd_step, OptimizerConfig};

    fn small() -> IrtConfig {
        IrtConfig {
            depth: 2,
            heads: 2,
            model_dim: 8,
            label_embed_dim: 4,
            box_embed_dim: 4,
        }
    }

    fn instances(n: usize, seed: u64) -> InstanceSet {
        let boxes: Vec<BoxCoords> = (0..n)
            .map(|i| {
                let o = 5.0 * i as f64;
                [o, o + 1.0, o + 20.0, o + 15.0]
            })
            .collect();
        let classes: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mut s = InstanceSet::from_ground_truth(classes, boxes, 3, 100.0, 80.0).unwrap();
        // Spread-out features keep attention away from uniform, where some
        // gradients sink to round-off level.
        s.features = crate::nn::uniform_init(n, 5, 1, seed, "features").map(|v| 3.0 * v);
        s
    }

    #[test]
    fn geometry_examples() {
        let g = box_geometry(&[0.0, 0.0, 100.0, 50.0], 100.0, 50.0).unwrap();
        assert_eq!(g, [0.0, 0.0, 1.0, 1.0, 0.5, 0.5, 1.0, 1.0]);
        let g = box_geometry(&[10.0, 20.0, 30.0, 60.0], 100.0, 100.0).unwrap();
        let want = [0.1, 0.2, 0.3, 0.6, 0.2, 0.4, 0.2, 0.4];
        assert!(g.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
        let g2 = box_geometry(&[20.0, 40.0, 60.0, 120.0], 200.0, 200.0).unwrap();
        assert!(g.iter().zip(g2).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(box_geometry(&[10.0, 10.0, 5.0, 20.0], 100.0, 100.0).is_err());
    }

    #[test]
    fn label_embedding_is_convex_combination() {
        let mut tape = Tape::new();
        let w = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        let l = Tensor::row(vec![0.7, 0.3]);
        let lv = tape.constant(l.clone());
        let wv = tape.constant(w.clone());
        let e = embed_labels(&mut tape, lv, wv).unwrap();
        let want = [0.7 - 0.3, 1.4, 2.1 + 1.5];
        assert!(tape.value(e).data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
        let bad = tape.constant(Tensor::row(vec![1.0, 0.0, 0.0]));
        assert!(embed_labels(&mut tape, bad, wv).is_err());
    }

    #[test]
    fn single_instance_attends_to_itself() {
        let enc = InstanceEncoder::new("irt", small(), 3, 5);
        let mut store = ParamStore::new();
        enc.init(&mut store, 1);
        let att = attention_weights(&enc, &store, &instances(1, 0)).unwrap();
        assert_eq!(att.len(), 4);
        assert!(att.iter().all(|a| a.data() == [1.0]));
    }

    #[test]
    fn attention_rows_sum_to_one_and_empty_is_valid() {
        let enc = InstanceEncoder::new("irt", small(), 3, 5);
        let mut store = ParamStore::new();
        enc.init(&mut store, 1);
        for a in attention_weights(&enc, &store, &instances(4, 2)).unwrap() {
            for i in 0..4 {
                assert!((a.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
        let m = encode_instances(&enc, &store, &instances(0, 0)).unwrap();
        assert_eq!(m.shape(), &[0, 8]);
    }

    #[test]
    fn duplicate_rows_encode_identically() {
        let enc = InstanceEncoder::new("irt", small(), 3, 5);
        let mut store = ParamStore::new();
        enc.init(&mut store, 3);
        let mut s = instances(3, 1);
        s.boxes[2] = s.boxes[0];
        s.labels = s.with_one_hot_labels(&[0, 1, 0]).labels;
        let f0 = s.features.row_slice(0).to_vec();
        for (c, v) in f0.into_iter().enumerate() {
            s.features.set(2, c, v);
        }
        let m = encode_instances(&enc, &store, &s).unwrap();
        assert_eq!(m.row_slice(0), m.row_slice(2));
    }

    #[test]
    fn encoder_gradient_check() {
        let enc = InstanceEncoder::new("irt", small(), 3, 5);
        let mut store = ParamStore::new();
        enc.init(&mut store, 7);
        let s = instances(3, 4);
        let target = crate::nn::uniform_init(3, 8, 1, 11, "target");
        let check = finite_difference_check(&mut store, 1e-5, |tape, st| {
            let m = enc.forward(tape, st, &s)?.context;
            let t = tape.constant(target.clone());
            let p = tape.mul(m, t)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn refiner_gradient_check() {
        let r = LabelRefiner::new(small(), 3, 5);
        let mut store = ParamStore::new();
        r.init(&mut store, 2);
        let s = instances(3, 5).with_uniform_labels();
        let check = finite_difference_check(&mut store, 1e-5, |tape, st| r.loss(tape, st, &s)).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn refiner_overfits_five_images() {
        let cfg = SynthConfig {
            num_images: 5,
            seed: 3,
            ..Default::default()
        };
        let (_, mut images) = generate_corpus(&cfg);
        attach_features(&mut images, &FeatureSource::Synthetic { seed: 3, dim: 16 }, 16).unwrap();
        let r = LabelRefiner::new(IrtConfig::default(), 8, 16);
        let mut store = ParamStore::new();
        r.init(&mut store, 0);
        let opt = OptimizerConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        let inputs: Vec<InstanceSet> = images.iter().map(|i| i.instances.with_uniform_labels()).collect();
        for _ in 0..60 {
            for s in &inputs {
                let mut tape = Tape::new();
                let loss = r.loss(&mut tape, &store, s).unwrap();
                tape.backward(loss).unwrap().accumulate_into(&mut store).unwrap();
                sgd_step(&mut store, &opt).unwrap();
            }
        }
        let (mut right, mut total) = (0, 0);
        for s in &inputs {
            let logits = refine_labels(&r, &store, s).unwrap();
            for (i, &c) in s.gt_classes.as_ref().unwrap().iter().enumerate() {
                total += 1;
                right += usize::from(crate::data::argmax(logits.row_slice(i)) == c);
            }
        }
        assert!(right as f64 / total as f64 >= 0.95, "{right}/{total}");
    }
}
