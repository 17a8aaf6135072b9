//! Frame-selection policy and value networks.
//!
//! Both share one architecture: five purely spatial conv layers, a per-frame
//! global average pool, then three fully connected layers over the frame
//! features concatenated in temporal order. The policy head has `T` outputs
//! followed by a softmax; the value head has one.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{log_softmax, softmax, Layer, Network, Shape, Tape};
use crate::video::{Dims, VideoTensor};

pub const POLICY_KIND: u32 = 0;
pub const VALUE_KIND: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub conv_channels: [usize; 5],
    pub conv_strides: [usize; 5],
    pub fc_widths: [usize; 2],
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self { conv_channels: [8, 16, 16, 32, 32], conv_strides: [2, 2, 1, 2, 1], fc_widths: [128, 64] }
    }
}

fn build(dims: Dims, arch: &PolicyArch, outputs: usize) -> Result<Network> {
    let mut layers = Vec::with_capacity(16);
    let mut ch = dims.c;
    for (&out, &stride) in arch.conv_channels.iter().zip(&arch.conv_strides) {
        layers.push(Layer::Conv { in_ch: ch, out_ch: out, stride });
        layers.push(Layer::Relu);
        ch = out;
    }
    layers.push(Layer::FramePool);
    let mut width = dims.t * ch;
    for &fc in &arch.fc_widths {
        layers.push(Layer::Dense { inputs: width, outputs: fc });
        layers.push(Layer::Relu);
        width = fc;
    }
    layers.push(Layer::Dense { inputs: width, outputs });
    Network::new(Shape::from(dims), layers)
}

fn check_arch(net: &Network) -> Result<()> {
    let convs = net.layers().iter().filter(|l| matches!(l, Layer::Conv { .. })).count();
    let dense = net.layers().iter().filter(|l| matches!(l, Layer::Dense { .. })).count();
    if convs != 5 || dense != 3 || !net.layers().contains(&Layer::FramePool) {
        return Err(Error::Format("checkpoint is not a 5-conv / 3-FC frame network".into()));
    }
    Ok(())
}

/// Probability of deleting each frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self { probs: softmax(logits), log_probs: log_softmax(logits) }
    }

    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(invalid("probabilities must be finite and non-negative"));
        }
        if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("probabilities must sum to one"));
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self { probs, log_probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_prob(&self, a: usize) -> f64 {
        self.log_probs[a]
    }

    /// Multinomial draw; returns the index and its log-probability.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            last = i;
            acc += p;
            if u < acc {
                return (i, self.log_probs[i]);
            }
        }
        (last, self.log_probs[last])
    }

    /// Most probable frame; ties go to the lowest index.
    pub fn greedy(&self) -> usize {
        crate::oracle::top1(&self.probs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    dims: Dims,
    net: Network,
}

impl PolicyNet {
    /// Fan-in initialized conv/FC stack with a zeroed output layer, so the
    /// initial distribution is exactly uniform.
    pub fn new<R: Rng>(dims: Dims, arch: &PolicyArch, rng: &mut R) -> Result<Self> {
        let mut net = build(dims, arch, dims.t)?;
        net.init_uniform(rng);
        net.zero_layer(net.layers().len() - 1);
        Ok(Self { dims, net })
    }

    pub fn frames(&self) -> usize {
        self.dims.t
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn forward(&self, state: &VideoTensor) -> Result<ActionDistribution> {
        self.dims.ensure_same(&state.dims())?;
        Ok(ActionDistribution::from_logits(&self.net.forward(state.as_slice())?))
    }

    /// Forward pass recorded for [`Network::backward`]; the tape output holds logits.
    pub fn forward_tape(&self, state: &VideoTensor) -> Result<(ActionDistribution, Tape)> {
        self.dims.ensure_same(&state.dims())?;
        let tape = self.net.forward_tape(state.as_slice())?;
        Ok((ActionDistribution::from_logits(tape.output()), tape))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.net.save(path, POLICY_KIND)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (net, kind) = Network::load(path)?;
        if kind != POLICY_KIND {
            return Err(Error::Format(format!("checkpoint kind {kind} is not a policy")));
        }
        check_arch(&net)?;
        let s = net.input_shape();
        if net.output_len() != s.f {
            return Err(Error::Format("policy head width must equal the frame count".into()));
        }
        Ok(Self { dims: Dims::new(s.f, s.w, s.h, s.c)?, net })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    dims: Dims,
    net: Network,
}

impl ValueNet {
    pub fn new<R: Rng>(dims: Dims, arch: &PolicyArch, rng: &mut R) -> Result<Self> {
        let mut net = build(dims, arch, 1)?;
        net.init_uniform(rng);
        net.zero_layer(net.layers().len() - 1);
        Ok(Self { dims, net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn value(&self, state: &VideoTensor) -> Result<f64> {
        self.dims.ensure_same(&state.dims())?;
        Ok(self.net.forward(state.as_slice())?[0])
    }

    pub fn forward_tape(&self, state: &VideoTensor) -> Result<(f64, Tape)> {
        self.dims.ensure_same(&state.dims())?;
        let tape = self.net.forward_tape(state.as_slice())?;
        Ok((tape.output()[0], tape))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.net.save(path, VALUE_KIND)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (net, kind) = Network::load(path)?;
        if kind != VALUE_KIND {
            return Err(Error::Format(format!("checkpoint kind {kind} is not a value network")));
        }
        check_arch(&net)?;
        if net.output_len() != 1 {
            return Err(Error::Format("value head must be scalar".into()));
        }
        let s = net.input_shape();
        Ok(Self { dims: Dims::new(s.f, s.w, s.h, s.c)?, net })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Dims, PolicyArch) {
        (
            Dims::new(4, 8, 8, 3).unwrap(),
            PolicyArch { conv_channels: [4, 4, 4, 6, 6], conv_strides: [1, 2, 1, 2, 1], fc_widths: [16, 8] },
        )
    }

    fn random_state(d: Dims, rng: &mut ChaCha8Rng) -> VideoTensor {
        VideoTensor::from_vec(d, (0..d.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn initial_policy_is_uniform() {
        let (d, arch) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PolicyNet::new(d, &arch, &mut rng).unwrap();
        let dist = p.forward(&random_state(d, &mut rng)).unwrap();
        assert!(dist.probs().iter().all(|&q| q == 0.25));
        assert_eq!(dist.greedy(), 0);
    }

    #[test]
    fn random_params_give_normalized_positive_probs() {
        let (d, arch) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PolicyNet::new(d, &arch, &mut rng).unwrap();
        for v in p.network_mut().params_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        for _ in 0..5 {
            let dist = p.forward(&random_state(d, &mut rng)).unwrap();
            assert!((dist.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(dist.probs().iter().all(|&q| q > 0.0));
            assert!((0..4).all(|a| dist.log_prob(a).is_finite() && dist.log_prob(a) <= 0.0));
        }
    }

    #[test]
    fn constant_frames_are_permutation_invariant() {
        let (d, arch) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = PolicyNet::new(d, &arch, &mut rng).unwrap();
        for v in p.network_mut().params_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let mut a = VideoTensor::filled(d, 0.4);
        a.frame_mut(1).fill(0.9);
        let b = a.clone();
        // Permuting pixels inside a constant frame is the identity on the tensor.
        assert_eq!(p.forward(&a).unwrap(), p.forward(&b).unwrap());
    }

    #[test]
    fn zeroing_a_frame_leaves_other_frame_features_bitwise_equal() {
        let (d, arch) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PolicyNet::new(d, &arch, &mut rng).unwrap();
        let s = random_state(d, &mut rng);
        let mut z = s.clone();
        z.frame_mut(2).fill(0.0);
        let fa = p.network().frame_features(s.as_slice()).unwrap();
        let fb = p.network().frame_features(z.as_slice()).unwrap();
        let per = fa.len() / d.t;
        for f in [0, 1, 3] {
            assert_eq!(fa[f * per..(f + 1) * per], fb[f * per..(f + 1) * per]);
        }
        assert_ne!(fa[2 * per..3 * per], fb[2 * per..3 * per]);
    }

    #[test]
    fn greedy_and_sampling() {
        let one_hot = ActionDistribution::from_probs(vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(one_hot.greedy(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..100).all(|_| one_hot.sample(&mut rng).0 == 2));
        assert_eq!(ActionDistribution::from_probs(vec![0.25; 4]).unwrap().greedy(), 0);
        assert_eq!(ActionDistribution::from_probs(vec![0.1, 0.7, 0.2]).unwrap().greedy(), 1);
        assert!(ActionDistribution::from_probs(vec![0.5, 0.6]).is_err());

        let d = ActionDistribution::from_probs(vec![0.9, 0.1]).unwrap();
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..10_000).map(|_| d.sample(&mut r).0).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn uniform_sampling_frequencies_within_three_sigma() {
        let d = ActionDistribution::from_probs(vec![0.25; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[d.sample(&mut rng).0] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.25).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn checkpoints_round_trip_and_check_kind() {
        let (d, arch) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = PolicyNet::new(d, &arch, &mut rng).unwrap();
        p.network_mut().round_to_f32();
        let mut v = ValueNet::new(d, &arch, &mut rng).unwrap();
        v.network_mut().round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path().join("p.bin")).unwrap();
        v.save(dir.path().join("v.bin")).unwrap();
        assert_eq!(PolicyNet::load(dir.path().join("p.bin")).unwrap(), p);
        assert_eq!(ValueNet::load(dir.path().join("v.bin")).unwrap(), v);
        assert!(PolicyNet::load(dir.path().join("v.bin")).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (d, arch) = small();
        let p = PolicyNet::new(d, &arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let wrong = VideoTensor::zeros(Dims::new(5, 8, 8, 3).unwrap());
        assert!(matches!(p.forward(&wrong), Err(Error::DimensionMismatch { .. })));
    }
}
