//! Predicate scoring: fused instance features are projected into subject and
//! object spaces and combined with a pair feature through diagonal bilinear
//! forms, one per predicate plus one for "related at all".

use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::{BoxCoords, FreqBias, InstanceSet};
use crate::error::{Error, Result};
use crate::irt::box_geometry;
use crate::nn::{uniform_init, Linear};
use crate::tensor::Tensor;

/// Width of the geometric part of a pair feature: three box descriptions,
/// IoU and the centre offset.
pub const PAIR_GEOMETRY_DIM: usize = 8 * 3 + 1 + 2;

/// Ordered pairs `(i, j)` with `i != j`, row-major.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

pub fn iou(a: &BoxCoords, b: &BoxCoords) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |x: &BoxCoords| (x[2] - x[0]) * (x[3] - x[1]);
    inter / (area(a) + area(b) - inter)
}

/// `[geom(b_i), geom(b_j), geom(union), IoU, (cx_j - cx_i)/W, (cy_j - cy_i)/H]`.
pub fn pair_geometry(bi: &BoxCoords, bj: &BoxCoords, width: f64, height: f64) -> Result<Vec<f64>> {
    let gi = box_geometry(bi, width, height)?;
    let gj = box_geometry(bj, width, height)?;
    let u = [bi[0].min(bj[0]), bi[1].min(bj[1]), bi[2].max(bj[2]), bi[3].max(bj[3])];
    let gu = box_geometry(&u, width, height)?;
    let mut v = Vec::with_capacity(PAIR_GEOMETRY_DIM);
    v.extend_from_slice(&gi);
    v.extend_from_slice(&gj);
    v.extend_from_slice(&gu);
    v.push(iou(bi, bj));
    v.push(gj[4] - gi[4]);
    v.push(gj[5] - gi[5]);
    Ok(v)
}

/// `E^r = M + P^v + P^c`; an absent knowledge term is skipped rather than
/// added as zeros.
pub fn fuse_features(tape: &mut Tape, m: Var, pv: Option<Var>, pc: Option<Var>) -> Result<Var> {
    let mut e = m;
    for p in [pv, pc].into_iter().flatten() {
        if tape.value(p).shape() != tape.value(m).shape() {
            return Err(Error::dim(format!(
                "knowledge features {:?} do not match context {:?}",
                tape.value(p).shape(),
                tape.value(m).shape()
            )));
        }
        e = tape.add(e, p)?;
    }
    Ok(e)
}

/// `Σ_d (s∘u)_d w_kd (o∘u)_d + bias_k` for every predicate `k`.
pub fn distmult_score(es: &[f64], eo: &[f64], u: &[f64], w: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let d = es.len();
    if eo.len() != d || u.len() != d || w.cols() != d || bias.len() != w.rows() {
        return Err(Error::dim(format!(
            "distmult inputs: s {d}, o {}, u {}, w {:?}, bias {}",
            eo.len(),
            u.len(),
            w.shape(),
            bias.len()
        )));
    }
    Ok((0..w.rows())
        .map(|k| {
            let wk = w.row_slice(k);
            (0..d).map(|x| es[x] * u[x] * wk[x] * eo[x] * u[x]).sum::<f64>() + bias[k]
        })
        .collect())
}

/// Single diagonal bilinear form plus scalar bias.
pub fn relatedness_score(es: &[f64], eo: &[f64], u: &[f64], w: &[f64], bias: f64) -> Result<f64> {
    let w = Tensor::row(w.to_vec());
    Ok(distmult_score(es, eo, u, &w, &[bias])?[0])
}

/// Tape version of [`distmult_score`] over stacked pairs:
/// `[P x d]` inputs, `[K x d]` weights, `[P x K]` constant bias.
pub fn distmult_logits(tape: &mut Tape, es: Var, eo: Var, u: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let su = tape.mul(es, u)?;
    let ou = tape.mul(eo, u)?;
    let x = tape.mul(su, ou)?;
    let wt = tape.transpose(w);
    let r = tape.matmul(x, wt)?;
    match bias {
        Some(b) => tape.add(r, b),
        None => Ok(r),
    }
}

/// Raw scores for a set of ordered pairs of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScores {
    pub num_instances: usize,
    pub pairs: Vec<(usize, usize)>,
    /// `[P x K]`.
    pub predicate_logits: Tensor,
    /// `[P x 1]`.
    pub relatedness: Tensor,
}

impl PairScores {
    pub fn new(num_instances: usize, pairs: Vec<(usize, usize)>, predicate_logits: Tensor, relatedness: Tensor) -> Result<Self> {
        if predicate_logits.rows() != pairs.len() || relatedness.numel() != pairs.len() {
            return Err(Error::dim(format!(
                "{} pairs, {} logit rows, {} relatedness values",
                pairs.len(),
                predicate_logits.rows(),
                relatedness.numel()
            )));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i == j || i >= num_instances || j >= num_instances) {
            return Err(Error::Validation(format!("invalid pair ({i}, {j}) for {num_instances} instances")));
        }
        Ok(Self {
            num_instances,
            pairs,
            predicate_logits,
            relatedness,
        })
    }

    pub fn num_predicates(&self) -> usize {
        self.predicate_logits.cols()
    }

    fn position(&self, i: usize, j: usize) -> Option<usize> {
        self.pairs.iter().position(|&p| p == (i, j))
    }

    pub fn logits(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.position(i, j).map(|p| self.predicate_logits.row_slice(p))
    }

    pub fn relatedness_logit(&self, i: usize, j: usize) -> Option<f64> {
        self.position(i, j).map(|p| self.relatedness.data()[p])
    }
}

/// Parameters and wiring of the scoring head. Names live under `head.`.
#[derive(Clone, Debug)]
pub struct PredicateHead {
    pub model_dim: usize,
    pub feature_dim: usize,
    pub num_predicates: usize,
    pub subject: Linear,
    pub object: Linear,
    pub union: Linear,
    pub predicate_weights: String,
    pub relatedness_weights: String,
    pub relatedness_bias: String,
}

impl PredicateHead {
    pub fn new(model_dim: usize, feature_dim: usize, num_predicates: usize) -> Self {
        Self {
            model_dim,
            feature_dim,
            num_predicates,
            subject: Linear::new("head.subject", model_dim, model_dim, true),
            object: Linear::new("head.object", model_dim, model_dim, true),
            union: Linear::new("head.union", 2 * feature_dim + PAIR_GEOMETRY_DIM, model_dim, true),
            predicate_weights: "head.predicate_weights".into(),
            relatedness_weights: "head.relatedness_weights".into(),
            relatedness_bias: "head.relatedness_bias".into(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let d = self.model_dim;
        self.subject.init(store, seed);
        self.object.init(store, seed);
        self.union.init(store, seed);
        // u starts near one so the triple product does not begin vanishingly
        // small; the diagonal weights get unit scale for the same reason.
        if let Some(b) = &self.union.bias {
            store.insert(b, Tensor::full(&[1, d], 1.0));
        }
        store.insert(
            &self.predicate_weights,
            uniform_init(self.num_predicates, d, 1, seed, &self.predicate_weights),
        );
        store.insert(
            &self.relatedness_weights,
            uniform_init(1, d, 1, seed, &self.relatedness_weights),
        );
        store.insert(&self.relatedness_bias, Tensor::zeros(&[1, 1]));
    }

    /// `(E^s, E^o) = (ReLU(FC_s(E^r)), ReLU(FC_o(E^r)))`.
    pub fn project_subject_object(&self, tape: &mut Tape, store: &ParamStore, er: Var) -> Result<(Var, Var)> {
        let s = self.subject.forward(tape, store, er)?;
        let o = self.object.forward(tape, store, er)?;
        Ok((tape.relu(s), tape.relu(o)))
    }

    /// Pair features `u_{i,j}` for `pairs`, `[P x d]`.
    pub fn union_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        instances: &InstanceSet,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        if instances.feature_dim() != self.feature_dim {
            return Err(Error::dim(format!(
                "features have {} columns, head expects {}",
                instances.feature_dim(),
                self.feature_dim
            )));
        }
        let geo = pairs
            .iter()
            .map(|&(i, j)| {
                pair_geometry(
                    &instances.boxes[i],
                    &instances.boxes[j],
                    instances.image_width,
                    instances.image_height,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let geo = tape.constant(Tensor::from_rows(&geo, PAIR_GEOMETRY_DIM)?);
        let f = tape.constant(instances.features.clone());
        let fi = tape.gather(f, &pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
        let fj = tape.gather(f, &pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
        let x = tape.concat_cols(&[fi, fj, geo])?;
        self.union.forward(tape, store, x)
    }

    /// Predicate logits `[P x K]` and relatedness logits `[P x 1]` for `pairs`.
    /// `classes` selects the frequency-bias row of each pair.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        er: Var,
        instances: &InstanceSet,
        classes: &[usize],
        freq: &FreqBias,
        pairs: &[(usize, usize)],
    ) -> Result<(Var, Var)> {
        if freq.num_predicates() != self.num_predicates {
            return Err(Error::dim(format!(
                "frequency bias has {} predicates, head has {}",
                freq.num_predicates(),
                self.num_predicates
            )));
        }
        let (es, eo) = self.project_subject_object(tape, store, er)?;
        let u = self.union_features(tape, store, instances, pairs)?;
        let si = tape.gather(es, &pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
        let oj = tape.gather(eo, &pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
        let bias: Vec<Vec<f64>> = pairs
            .iter()
            .map(|&(i, j)| freq.predicate_bias(classes[i], classes[j]).to_vec())
            .collect();
        let bias = tape.constant(Tensor::from_rows(&bias, self.num_predicates)?);
        let w = tape.param(store, &self.predicate_weights)?;
        let r = distmult_logits(tape, si, oj, u, w, Some(bias))?;
        let w2 = tape.param(store, &self.relatedness_weights)?;
        let rel = distmult_logits(tape, si, oj, u, w2, None)?;
        let b2 = tape.param(store, &self.relatedness_bias)?;
        let rel = tape.add_row(rel, b2)?;
        Ok((r, rel))
    }
}
