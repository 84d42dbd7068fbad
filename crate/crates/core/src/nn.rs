//! Layers and training utilities shared by every model component: seeded
//! initialization, fully connected layers, graph convolution, SGD and a
//! finite-difference gradient checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 64-bit FNV-1a. Used to derive independent, platform-stable RNG streams.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG stream for `label` under `seed`. Distinct labels give independent streams,
/// so adding a parameter never shifts the initial values of another.
pub fn labeled_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stable_hash(label).rotate_left(17))
}

/// `[rows x cols]` tensor with entries uniform in `±1/sqrt(fan_in)`.
pub fn uniform_init(rows: usize, cols: usize, fan_in: usize, seed: u64, label: &str) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut rng = labeled_rng(seed, label);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape is consistent")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            batch_size: 16,
            max_epochs: 50,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "optimizer.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("optimizer.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Plain SGD: `w <- w - lr * grad`, then zero every gradient.
pub fn sgd_step(params: &mut ParamStore, config: &OptimizerConfig) -> Result<()> {
    config.validate()?;
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::State(format!("parameter {name:?} has no gradient")));
    }
    let lr = config.learning_rate;
    for (_, t) in params.iter_mut() {
        let g = t.grad().expect("checked above").to_vec();
        for (w, g) in t.data_mut().iter_mut().zip(g) {
            *w -= lr * g;
        }
        t.zero_grad();
    }
    Ok(())
}

/// `-log softmax(logits)[target]`, computed stably.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            size: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

/// Fully connected layer `x W + b` backed by two named parameters.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: format!("{name}.weight"),
            bias: bias.then(|| format!("{name}.bias")),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        store.insert(
            &self.weight,
            uniform_init(self.in_dim, self.out_dim, self.in_dim, seed, &self.weight),
        );
        if let Some(b) = &self.bias {
            store.insert(b, uniform_init(1, self.out_dim, self.in_dim, seed, b));
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.in_dim {
            return Err(Error::dim(format!(
                "{}: input has {} columns, expected {}",
                self.weight,
                tape.value(x).cols(),
                self.in_dim
            )));
        }
        let w = tape.param(store, &self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Symmetric normalization with self-loops: `D^-1/2 (A' + I) D^-1/2` where
/// `A'` is `A` symmetrized by elementwise max.
pub fn normalized_adjacency(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape().len() != 2 || a.cols() != n {
        return Err(Error::dim(format!("adjacency must be square, got {:?}", a.shape())));
    }
    if let Some(v) = a.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!(
            "adjacency entries must be finite and non-negative, found {v}"
        )));
    }
    let mut s = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let v = if i == j { 1.0 } else { a.get(i, j).max(a.get(j, i)) };
            s.set(i, j, v);
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / s.row_slice(i).iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            let v = s.get(i, j) * inv_sqrt[i] * inv_sqrt[j];
            s.set(i, j, v);
        }
    }
    Ok(s)
}

/// One propagation step `Â H W`, optionally followed by ReLU. `a_hat` must
/// already be normalized.
pub fn gcn_propagate(
    tape: &mut Tape,
    h: Var,
    a_hat: Var,
    w: Var,
    relu: bool,
) -> Result<Var> {
    let n = tape.value(a_hat).rows();
    if tape.value(h).rows() != n {
        return Err(Error::dim(format!(
            "node features have {} rows, adjacency is {n}x{n}",
            tape.value(h).rows()
        )));
    }
    let hw = tape.matmul(h, w)?;
    let out = tape.matmul(a_hat, hw)?;
    Ok(if relu { tape.relu(out) } else { out })
}

/// `ReLU(Â H W)` with `Â` built from the raw adjacency `a`.
pub fn gcn_layer(tape: &mut Tape, h: Var, a: &Tensor, w: Var) -> Result<Var> {
    let a_hat = normalized_adjacency(a)?;
    let a_hat = tape.constant(a_hat);
    gcn_propagate(tape, h, a_hat, w, true)
}

/// Stack of graph convolutions: ReLU between layers, identity after the last.
#[derive(Clone, Debug)]
pub struct GcnStack {
    weights: Vec<String>,
    dims: Vec<usize>,
}

impl GcnStack {
    /// `dims` lists the input width followed by each layer's output width.
    pub fn new(name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "a GCN stack needs at least one layer");
        Self {
            weights: (0..dims.len() - 1)
                .map(|l| format!("{name}.layer{l}.weight"))
                .collect(),
            dims: dims.to_vec(),
        }
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for (l, name) in self.weights.iter().enumerate() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            store.insert(name, uniform_init(i, o, i, seed, name));
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, a_hat: Var) -> Result<Var> {
        if tape.value(h).cols() != self.dims[0] {
            return Err(Error::dim(format!(
                "GCN input has {} columns, expected {}",
                tape.value(h).cols(),
                self.dims[0]
            )));
        }
        let mut x = h;
        let last = self.weights.len() - 1;
        for (l, name) in self.weights.iter().enumerate() {
            let w = tape.param(store, name)?;
            x = gcn_propagate(tape, x, a_hat, w, l < last)?;
        }
        Ok(x)
    }
}

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of `f` against central differences for every
/// coordinate of every parameter in `params`.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// `params` is restored to its original values on return.
pub fn finite_difference_check<F>(params: &mut ParamStore, epsilon: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Validation(format!("epsilon must be > 0, got {epsilon}")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::Validity(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut analytic = params.clone();
    analytic.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, &analytic)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::Validity(format!("objective evaluated to {v}")));
        }
        tape.backward(loss)?.accumulate_into(&mut analytic)?;
    }

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    for name in names {
        let grad = analytic.get(&name)?.grad().unwrap_or(&[]).to_vec();
        let numel = params.get(&name)?.numel();
        for i in 0..numel {
            let orig = params.get(&name)?.data()[i];
            params.get_mut(&name)?.data_mut()[i] = orig + epsilon;
            let plus = eval(params);
            params.get_mut(&name)?.data_mut()[i] = orig - epsilon;
            let minus = eval(params);
            params.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let a = grad.get(i).copied().unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn self_loops_only_gives_identity() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::eye(2));
        let w = tape.constant(Tensor::eye(2));
        let out = gcn_layer(&mut tape, h, &Tensor::zeros(&[2, 2]), w).unwrap();
        assert_eq!(tape.value(out).data(), Tensor::eye(2).data());
    }

    #[test]
    fn path_graph_row_zero() {
        let a = Tensor::matrix(3, 3, vec![0., 1., 0., 1., 0., 1., 0., 1., 0.]).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::full(&[3, 1], 1.0));
        let w = tape.constant(Tensor::eye(1));
        let out = gcn_layer(&mut tape, h, &a, w).unwrap();
        // degrees with self-loops are (2, 3, 2)
        let expected = 0.5 + 1.0 / 6f64.sqrt();
        assert!(close(tape.value(out).get(0, 0), expected, 1e-15));
        assert!(close(tape.value(out).get(2, 0), expected, 1e-15));
        let mid = 2.0 / 6f64.sqrt() + 1.0 / 3.0;
        assert!(close(tape.value(out).get(1, 0), mid, 1e-15));
    }

    #[test]
    fn directed_input_is_symmetrized() {
        let a = Tensor::matrix(2, 2, vec![0., 1., 0., 0.]).unwrap();
        let n = normalized_adjacency(&a).unwrap();
        assert_eq!(n.get(0, 1), n.get(1, 0));
        assert!(close(n.get(0, 1), 0.5, 1e-15));
    }

    #[test]
    fn adjacency_errors() {
        assert!(matches!(
            normalized_adjacency(&Tensor::zeros(&[2, 3])),
            Err(Error::Dimension(_))
        ));
        let neg = Tensor::matrix(2, 2, vec![0., -1., 0., 0.]).unwrap();
        assert!(normalized_adjacency(&neg).is_err());
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[3, 2]));
        let w = tape.constant(Tensor::eye(2));
        assert!(gcn_layer(&mut tape, h, &Tensor::zeros(&[2, 2]), w).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        assert!(close(softmax_cross_entropy(&[0.3; 4], 2).unwrap(), 4f64.ln(), 1e-15));
        // -log sigmoid(10) = ln(1 + e^-10)
        let expected = (-10f64).exp().ln_1p();
        assert!(close(softmax_cross_entropy(&[10.0, 0.0], 0).unwrap(), expected, 1e-13));
        assert!(close(expected, 4.54e-5, 1e-7));
        assert!(softmax_cross_entropy(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::row(vec![0.7; 4]));
        let l = tape.softmax_cross_entropy(x, &[1]).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25, -0.75, 0.25, 0.25]);
    }

    #[test]
    fn sgd_arithmetic() {
        let cfg = OptimizerConfig::default();
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0));
        store.get_mut("p").unwrap().grad_mut().unwrap()[0] = 2.0;
        sgd_step(&mut store, &cfg).unwrap();
        assert!(close(store.get("p").unwrap().data()[0], 0.99, 1e-15));
        assert_eq!(store.get("p").unwrap().grad().unwrap(), &[0.0]);

        // zero grad leaves the value alone
        sgd_step(&mut store, &cfg).unwrap();
        assert!(close(store.get("p").unwrap().data()[0], 0.99, 1e-15));

        // two steps with constant grad g move by 2 lr g
        for _ in 0..2 {
            store.get_mut("p").unwrap().grad_mut().unwrap()[0] = 3.0;
            sgd_step(&mut store, &cfg).unwrap();
        }
        assert!(close(store.get("p").unwrap().data()[0], 0.99 - 2.0 * 5e-3 * 3.0, 1e-15));
    }

    #[test]
    fn sgd_rejects_missing_grad_and_bad_config() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0));
        store.get_mut("p").unwrap().set_requires_grad(false);
        assert!(matches!(
            sgd_step(&mut store, &OptimizerConfig::default()),
            Err(Error::State(_))
        ));
        let bad = OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gradcheck_on_square() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0));
        let report = finite_difference_check(&mut store, 1e-5, |tape, s| {
            let x = tape.param(s, "x")?;
            tape.mul(x, x)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(store.get("x").unwrap().data(), &[3.0]);
    }

    #[test]
    fn gradcheck_on_cross_entropy() {
        let mut store = ParamStore::new();
        store.insert("logits", uniform_init(1, 6, 1, 3, "logits"));
        let report = finite_difference_check(&mut store, 1e-5, |tape, s| {
            let x = tape.param(s, "logits")?;
            tape.softmax_cross_entropy(x, &[4])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn gradcheck_reports_non_finite() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(0.0));
        let res = finite_difference_check(&mut store, 1e-5, |tape, s| {
            let x = tape.param(s, "x")?;
            let big = tape.scale(x, f64::INFINITY);
            Ok(tape.sum(big))
        });
        assert!(matches!(res, Err(Error::Validity(_))));
    }

    #[test]
    fn labeled_streams_are_independent_of_each_other() {
        let a1 = uniform_init(2, 2, 2, 9, "a");
        let b = uniform_init(2, 2, 2, 9, "b");
        let a2 = uniform_init(2, 2, 2, 9, "a");
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        let bound = 1.0 / 2f64.sqrt();
        assert!(a1.data().iter().all(|v| v.abs() <= bound));
    }
}
