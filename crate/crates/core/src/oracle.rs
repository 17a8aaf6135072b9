//! Black-box threat models.
//!
//! Attack code only ever sees the [`Oracle`] trait: a top-1 label and its
//! probability per query. The concrete models here are desk-scale stand-ins
//! for real video classifiers.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{log_softmax, softmax, Adam, Layer, Network, Shape};
use crate::video::{Dims, Label, VideoTensor};

/// Checkpoint kind tag for conv oracles.
pub const ORACLE_KIND: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub label: Label,
    pub prob: f64,
}

/// Success condition of an attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Goal {
    /// Any label other than the ground truth.
    Untargeted { true_label: Label },
    /// Exactly the chosen target label.
    Targeted { target: Label },
}

impl Goal {
    pub fn is_met(&self, label: Label) -> bool {
        match *self {
            Goal::Untargeted { true_label } => label != true_label,
            Goal::Targeted { target } => label == target,
        }
    }

    pub fn is_targeted(&self) -> bool {
        matches!(self, Goal::Targeted { .. })
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            Goal::Untargeted { .. } => "untargeted",
            Goal::Targeted { .. } => "targeted",
        }
    }
}

/// Soft-label black-box classifier.
pub trait Oracle: Send + Sync {
    fn input_dims(&self) -> Dims;
    fn num_classes(&self) -> usize;
    fn query(&self, v: &VideoTensor) -> Result<OracleVerdict>;
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn input_dims(&self) -> Dims {
        (**self).input_dims()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn query(&self, v: &VideoTensor) -> Result<OracleVerdict> {
        (**self).query(v)
    }
}

impl<O: Oracle + ?Sized> Oracle for Arc<O> {
    fn input_dims(&self) -> Dims {
        (**self).input_dims()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn query(&self, v: &VideoTensor) -> Result<OracleVerdict> {
        (**self).query(v)
    }
}

/// Monotone query tally shared between workers.
#[derive(Debug, Default)]
pub struct QueryCounter(AtomicU64);

impl QueryCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn increment(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Wraps an oracle and counts every evaluation.
pub struct Counted<O> {
    inner: O,
    counter: Arc<QueryCounter>,
}

impl<O: Oracle> Counted<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, counter: Arc::new(QueryCounter::new()) }
    }

    pub fn with_counter(inner: O, counter: Arc<QueryCounter>) -> Self {
        Self { inner, counter }
    }

    pub fn counter(&self) -> &Arc<QueryCounter> {
        &self.counter
    }

    pub fn queries(&self) -> u64 {
        self.counter.get()
    }
}

impl<O: Oracle> Oracle for Counted<O> {
    fn input_dims(&self) -> Dims {
        self.inner.input_dims()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn query(&self, v: &VideoTensor) -> Result<OracleVerdict> {
        self.inner.input_dims().ensure_same(&v.dims())?;
        self.counter.increment();
        self.inner.query(v)
    }
}

/// Counts queries against a hard budget; refuses to query once it is spent.
pub struct Budgeted<'a> {
    inner: &'a dyn Oracle,
    used: AtomicU64,
    budget: u64,
}

impl<'a> Budgeted<'a> {
    pub fn new(inner: &'a dyn Oracle, budget: u64) -> Self {
        Self { inner, used: AtomicU64::new(0), budget }
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::Relaxed)
    }

    pub fn remaining(&self) -> u64 {
        self.budget.saturating_sub(self.used())
    }
}

impl Oracle for Budgeted<'_> {
    fn input_dims(&self) -> Dims {
        self.inner.input_dims()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn query(&self, v: &VideoTensor) -> Result<OracleVerdict> {
        self.inner.input_dims().ensure_same(&v.dims())?;
        let budget = self.budget;
        self.used
            .fetch_update(Ordering::Relaxed, Ordering::Relaxed, |u| (u < budget).then_some(u + 1))
            .map_err(|_| Error::BudgetExhausted(budget))?;
        self.inner.query(v)
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn top1(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn verdict_from_scores(scores: &[f64]) -> OracleVerdict {
    let label = top1(scores);
    OracleVerdict { label: Label(label), prob: softmax(scores)[label] }
}

/// Affine classifier `s_k(x) = <w_k, x> + b_k`; its boundaries have closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOracle {
    weights: Vec<VideoTensor>,
    bias: Vec<f64>,
}

impl LinearOracle {
    pub fn new(weights: Vec<VideoTensor>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 || weights.len() != bias.len() {
            return Err(invalid("linear oracle needs at least two classes with one bias each"));
        }
        let dims = weights[0].dims();
        for w in &weights {
            dims.ensure_same(&w.dims())?;
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(invalid("bias must be finite"));
        }
        if weights.windows(2).all(|p| p[0] == p[1]) && bias.windows(2).all(|p| p[0] == p[1]) {
            return Err(invalid("linear oracle needs two distinct classes"));
        }
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &[VideoTensor] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn scores(&self, v: &VideoTensor) -> Result<Vec<f64>> {
        self.weights.iter().zip(&self.bias).map(|(w, b)| Ok(w.dot(v)? + b)).collect()
    }
}

impl Oracle for LinearOracle {
    fn input_dims(&self) -> Dims {
        self.weights[0].dims()
    }
    fn num_classes(&self) -> usize {
        self.weights.len()
    }
    fn query(&self, v: &VideoTensor) -> Result<OracleVerdict> {
        Ok(verdict_from_scores(&self.scores(v)?))
    }
}

/// Smallest `lambda > 0` at which `top1(x + lambda * dir)` leaves `from`,
/// or `None` if no class overtakes `from` within `(0, lambda_max]`.
pub fn linear_boundary_distance(
    oracle: &LinearOracle,
    x: &VideoTensor,
    dir: &VideoTensor,
    from: Label,
    lambda_max: f64,
) -> Result<Option<f64>> {
    if (dir.l2_norm() - 1.0).abs() > 1e-9 {
        return Err(invalid("direction must have unit norm"));
    }
    let scores = oracle.scores(x)?;
    if top1(&scores) != from.0 {
        return Err(invalid(format!("class {from} is not top-1 at x")));
    }
    let w_from = &oracle.weights[from.0];
    let mut best: Option<f64> = None;
    for (k, w) in oracle.weights.iter().enumerate() {
        if k == from.0 {
            continue;
        }
        let gap = scores[from.0] - scores[k];
        let slope = w.dot(dir)? - w_from.dot(dir)?;
        if slope <= 0.0 {
            continue;
        }
        let lambda = gap / slope;
        if lambda > 0.0 && lambda <= lambda_max && best.is_none_or(|b| lambda < b) {
            best = Some(lambda);
        }
    }
    Ok(best)
}

/// Two spatial conv layers, temporal average, one dense layer, softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvOracle {
    dims: Dims,
    net: Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvOracleArch {
    pub channels: [usize; 2],
    pub strides: [usize; 2],
}

impl Default for ConvOracleArch {
    fn default() -> Self {
        Self { channels: [8, 16], strides: [2, 2] }
    }
}

impl ConvOracle {
    pub fn new(dims: Dims, classes: usize, arch: ConvOracleArch) -> Result<Self> {
        if classes == 0 {
            return Err(invalid("oracle needs at least one class"));
        }
        let input = Shape::from(dims);
        let conv = |c_in, i: usize| Layer::Conv { in_ch: c_in, out_ch: arch.channels[i], stride: arch.strides[i] };
        let h = (((dims.h - 1) / arch.strides[0]) + 1 - 1) / arch.strides[1] + 1;
        let w = (((dims.w - 1) / arch.strides[0]) + 1 - 1) / arch.strides[1] + 1;
        let net = Network::new(
            input,
            vec![
                conv(dims.c, 0),
                Layer::Relu,
                conv(arch.channels[0], 1),
                Layer::Relu,
                Layer::TemporalMean,
                Layer::Dense { inputs: h * w * arch.channels[1], outputs: classes },
            ],
        )?;
        Ok(Self { dims, net })
    }

    pub fn from_network(net: Network) -> Result<Self> {
        let s = net.input_shape();
        let ok = matches!(
            net.layers(),
            [Layer::Conv { .. }, Layer::Relu, Layer::Conv { .. }, Layer::Relu, Layer::TemporalMean, Layer::Dense { .. }]
        );
        if !ok {
            return Err(Error::Format("network is not a conv oracle".into()));
        }
        Ok(Self { dims: Dims::new(s.f, s.w, s.h, s.c)?, net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn logits(&self, v: &VideoTensor) -> Result<Vec<f64>> {
        self.net.forward(v.as_slice())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.net.save(path, ORACLE_KIND)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (net, kind) = Network::load(path)?;
        if kind != ORACLE_KIND {
            return Err(Error::Format(format!("checkpoint kind {kind} is not an oracle")));
        }
        Self::from_network(net)
    }
}

impl Oracle for ConvOracle {
    fn input_dims(&self) -> Dims {
        self.dims
    }
    fn num_classes(&self) -> usize {
        self.net.output_len()
    }
    fn query(&self, v: &VideoTensor) -> Result<OracleVerdict> {
        self.dims.ensure_same(&v.dims())?;
        Ok(verdict_from_scores(&self.logits(v)?))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleTrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub arch: ConvOracleArch,
    /// Below this held-out accuracy training is reported as failed.
    pub min_accuracy: f64,
}

impl Default for OracleTrainConfig {
    fn default() -> Self {
        Self { epochs: 30, seed: 7, learning_rate: 1e-2, batch_size: 16, arch: ConvOracleArch::default(), min_accuracy: 0.8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleTrainReport {
    pub epoch_losses: Vec<f64>,
    pub holdout_accuracy: f64,
}

/// Fraction of samples whose top-1 matches the label.
pub fn accuracy(oracle: &dyn Oracle, set: &[(VideoTensor, Label)]) -> Result<f64> {
    if set.is_empty() {
        return Ok(1.0);
    }
    let mut hits = 0;
    for (v, y) in set {
        if oracle.query(v)?.label == *y {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

/// Trains a [`ConvOracle`] with softmax cross-entropy and Adam. Deterministic given the seed.
pub fn train_conv_oracle(
    train: &[(VideoTensor, Label)],
    holdout: &[(VideoTensor, Label)],
    cfg: &OracleTrainConfig,
) -> Result<(ConvOracle, OracleTrainReport)> {
    let first = train.first().ok_or_else(|| invalid("empty training set"))?;
    let dims = first.0.dims();
    let classes = train.iter().chain(holdout).map(|(_, y)| y.0).max().unwrap() + 1;
    for (v, _) in train.iter().chain(holdout) {
        dims.ensure_same(&v.dims())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut oracle = ConvOracle::new(dims, classes, cfg.arch)?;
    oracle.net.init_uniform(&mut rng);
    let last = oracle.net.layers().len() - 1;
    oracle.net.zero_layer(last);

    let mut opt = Adam::new(oracle.net.num_params(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = vec![0.0; oracle.net.num_params()];
            for &i in chunk {
                let (v, y) = &train[i];
                let tape = oracle.net.forward_tape(v.as_slice())?;
                let logp = log_softmax(tape.output());
                total -= logp[y.0];
                let mut g: Vec<f64> = logp.iter().map(|l| l.exp() / chunk.len() as f64).collect();
                g[y.0] -= 1.0 / chunk.len() as f64;
                oracle.net.backward(&tape, &g, &mut grads)?;
            }
            opt.step(oracle.net.params_mut(), &grads);
        }
        let mean = total / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingFailure(format!("loss diverged in epoch {epoch}")));
        }
        log::info!("oracle epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    oracle.net.round_to_f32();
    let holdout_accuracy = accuracy(&oracle, if holdout.is_empty() { train } else { holdout })?;
    if holdout_accuracy < cfg.min_accuracy {
        return Err(Error::TrainingFailure(format!(
            "held-out accuracy {holdout_accuracy:.3} below {:.2} after {} epochs",
            cfg.min_accuracy, cfg.epochs
        )));
    }
    Ok((oracle, OracleTrainReport { epoch_losses, holdout_accuracy }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn dims() -> Dims {
        Dims::new(2, 4, 4, 1).unwrap()
    }

    fn basis(d: Dims, i: usize, scale: f64) -> VideoTensor {
        let mut v = VideoTensor::zeros(d);
        v.as_mut_slice()[i] = scale;
        v
    }

    #[test]
    fn tie_goes_to_lower_class() {
        let d = dims();
        let oracle = LinearOracle::new(vec![VideoTensor::zeros(d), basis(d, 0, 1.0)], vec![0.0, 0.0]).unwrap();
        // Exactly on the boundary: both scores zero.
        let v = oracle.query(&VideoTensor::zeros(d)).unwrap();
        assert_eq!(v.label, Label(0));
        assert_eq!(v.prob, 0.5);
    }

    #[test]
    fn one_hot_weight_difference_flips_label() {
        let d = dims();
        let margin = 0.3;
        // s_0 - s_1 = margin - x_5
        let oracle = LinearOracle::new(vec![VideoTensor::zeros(d), basis(d, 5, 1.0)], vec![margin, 0.0]).unwrap();
        let x = VideoTensor::zeros(d);
        let moved = x.add(&basis(d, 5, 2.0 * margin)).unwrap();
        assert_eq!(oracle.query(&x).unwrap().label, Label(0));
        assert_eq!(oracle.query(&moved).unwrap().label, Label(1));
    }

    #[test]
    fn counting_is_exact_and_deterministic() {
        let d = dims();
        let oracle = Counted::new(LinearOracle::new(vec![basis(d, 1, 1.0), basis(d, 2, 1.0)], vec![0.0, 0.1]).unwrap());
        let v = VideoTensor::filled(d, 0.5);
        let a = oracle.query(&v).unwrap();
        let b = oracle.query(&v).unwrap();
        assert_eq!(a, b);
        assert_eq!(oracle.queries(), 2);
        assert!(oracle.query(&VideoTensor::zeros(Dims::new(1, 4, 4, 1).unwrap())).is_err());
        assert_eq!(oracle.queries(), 2);
    }

    #[test]
    fn boundary_distance_two_class_closed_form() {
        let d = dims();
        let w1 = basis(d, 3, 2.0);
        let oracle = LinearOracle::new(vec![VideoTensor::zeros(d), w1], vec![0.8, 0.0]).unwrap();
        let x = VideoTensor::zeros(d);
        let dir = basis(d, 3, 1.0);
        // g0 = 0.8, d = 2 -> lambda = 0.4
        let l = linear_boundary_distance(&oracle, &x, &dir, Label(0), 10.0).unwrap().unwrap();
        assert!((l - 0.4).abs() < 1e-15);

        let ortho = basis(d, 7, 1.0);
        assert_eq!(linear_boundary_distance(&oracle, &x, &ortho, Label(0), 10.0).unwrap(), None);
        assert!(linear_boundary_distance(&oracle, &x, &dir, Label(1), 10.0).is_err());
    }

    #[test]
    fn boundary_distance_matches_grid_scan() {
        let d = Dims::new(2, 3, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let weights: Vec<VideoTensor> = (0..3)
                .map(|_| VideoTensor::from_vec(d, (0..d.len()).map(|_| rng.sample(StandardNormal)).collect()).unwrap())
                .collect();
            let x = VideoTensor::from_vec(d, (0..d.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            let mut bias = vec![0.0; 3];
            let s: Vec<f64> = weights.iter().map(|w| w.dot(&x).unwrap()).collect();
            bias[0] = s[1].max(s[2]) - s[0] + 0.5;
            let oracle = LinearOracle::new(weights, bias).unwrap();
            let raw = VideoTensor::from_vec(d, (0..d.len()).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            let dir = raw.scaled(1.0 / raw.l2_norm());
            let closed = linear_boundary_distance(&oracle, &x, &dir, Label(0), 5.0).unwrap();
            let step = 1e-4;
            let scanned = (1..=50_000).map(|i| i as f64 * step).find(|&l| {
                let p = x.add_scaled(&dir, l).unwrap();
                top1(&oracle.scores(&p).unwrap()) != 0
            });
            match (closed, scanned) {
                (Some(c), Some(s)) => assert!(s >= c && s - c <= step + 1e-12, "{c} vs {s}"),
                (None, None) => {}
                other => panic!("closed form and scan disagree: {other:?}"),
            }
        }
    }

    #[test]
    fn conv_oracle_shapes_and_determinism() {
        let d = Dims::new(4, 8, 8, 3).unwrap();
        let mut o = ConvOracle::new(d, 3, ConvOracleArch::default()).unwrap();
        o.net.init_uniform(&mut ChaCha8Rng::seed_from_u64(2));
        let v = VideoTensor::filled(d, 0.3);
        let a = o.query(&v).unwrap();
        assert_eq!(a, o.query(&v).unwrap());
        assert!(a.prob >= 1.0 / 3.0 && a.prob <= 1.0);
        assert_eq!(o.num_classes(), 3);
    }

    #[test]
    fn single_class_training_is_trivially_perfect() {
        let d = Dims::new(2, 4, 4, 1).unwrap();
        let set: Vec<_> = (0..4).map(|i| (VideoTensor::filled(d, i as f64 / 4.0), Label(0))).collect();
        let cfg = OracleTrainConfig { epochs: 1, ..Default::default() };
        let (oracle, report) = train_conv_oracle(&set, &set, &cfg).unwrap();
        assert_eq!(report.holdout_accuracy, 1.0);
        assert_eq!(oracle.query(&set[0].0).unwrap().prob, 1.0);
    }
}
