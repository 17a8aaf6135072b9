//! Proximal policy optimization with generalized advantage estimation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Adam, Tape};
use crate::policy::{PolicyNet, ValueNet};
use crate::video::VideoTensor;

/// Observation, reward and termination after one action.
#[derive(Debug, Clone)]
pub struct EnvStep {
    pub observation: VideoTensor,
    pub reward: f64,
    pub terminal: bool,
}

/// Episodic environment driven by a frame-selection policy.
pub trait Environment {
    fn num_actions(&self) -> usize;
    /// Starts a new episode and returns its first observation.
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<VideoTensor>;
    fn step(&mut self, action: usize) -> Result<EnvStep>;
    /// Oracle queries consumed so far, resets included.
    fn queries(&self) -> u64;
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub observation: VideoTensor,
    pub action: usize,
    pub reward: f64,
    pub value: f64,
    pub log_prob: f64,
    pub terminal: bool,
}

/// One actor's rollout segment. `bootstrap` holds `V(s_last)` when the
/// segment was cut before its final episode terminated.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    pub bootstrap: Option<f64>,
}

impl Trajectory {
    pub fn advantages(&self, gamma: f64, lambda: f64) -> Vec<f64> {
        let rewards: Vec<f64> = self.steps.iter().map(|s| s.reward).collect();
        let values: Vec<f64> = self.steps.iter().map(|s| s.value).collect();
        let terminals: Vec<bool> = self.steps.iter().map(|s| s.terminal).collect();
        gae(&rewards, &values, &terminals, self.bootstrap.unwrap_or(0.0), gamma, lambda)
    }
}

/// Generalized advantage estimates. The value after a terminal step is zero;
/// the value after the last step is `bootstrap` unless that step is terminal.
pub fn gae(rewards: &[f64], values: &[f64], terminals: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len());
    assert_eq!(rewards.len(), terminals.len());
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if terminals[t] {
            (0.0, 0.0)
        } else if t + 1 == n {
            (bootstrap, 0.0)
        } else {
            (values[t + 1], running)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * carry;
        adv[t] = running;
    }
    adv
}

fn check_batch(log_new: &[f64], log_old: &[f64], adv: &[f64]) -> Result<()> {
    if log_new.len() != log_old.len() || log_new.len() != adv.len() || log_new.is_empty() {
        return Err(Error::RejectedBatch("misaligned or empty batch".into()));
    }
    Ok(())
}

fn ratios(log_new: &[f64], log_old: &[f64]) -> Result<Vec<f64>> {
    log_new
        .iter()
        .zip(log_old)
        .map(|(n, o)| {
            let v = (n - o).exp();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::RejectedBatch(format!("non-finite probability ratio from log-probs {n} and {o}")))
            }
        })
        .collect()
}

/// Negated mean clipped surrogate `-mean(min(v A, clip(v, 1-eps, 1+eps) A))`.
pub fn clipped_objective(log_new: &[f64], log_old: &[f64], adv: &[f64], eps: f64) -> Result<f64> {
    check_batch(log_new, log_old, adv)?;
    let v = ratios(log_new, log_old)?;
    let sum: f64 = v
        .iter()
        .zip(adv)
        .map(|(&v, &a)| (v * a).min(v.clamp(1.0 - eps, 1.0 + eps) * a))
        .sum();
    Ok(-sum / adv.len() as f64)
}

/// Gradient of [`clipped_objective`] with respect to each new log-prob.
/// Samples whose clipped branch wins the min get zero.
pub fn clipped_objective_grad(log_new: &[f64], log_old: &[f64], adv: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_batch(log_new, log_old, adv)?;
    let v = ratios(log_new, log_old)?;
    let n = adv.len() as f64;
    Ok(v.iter()
        .zip(adv)
        .map(|(&v, &a)| if v * a <= v.clamp(1.0 - eps, 1.0 + eps) * a { -v * a / n } else { 0.0 })
        .collect())
}

/// Mean squared error.
pub fn value_loss(pred: &[f64], returns: &[f64]) -> f64 {
    assert_eq!(pred.len(), returns.len());
    pred.iter().zip(returns).map(|(p, r)| (p - r).powi(2)).sum::<f64>() / pred.len() as f64
}

/// One sample of a policy-gradient batch.
#[derive(Debug, Clone)]
pub struct PolicySample<'a> {
    pub observation: &'a VideoTensor,
    pub action: usize,
    pub log_prob_old: f64,
    pub advantage: f64,
}

/// Clipped-surrogate loss and its gradient with respect to every policy parameter.
pub fn policy_loss_and_grad(policy: &PolicyNet, batch: &[PolicySample<'_>], eps: f64) -> Result<(f64, Vec<f64>)> {
    let forwards: Vec<_> = batch
        .par_iter()
        .map(|s| policy.forward_tape(s.observation))
        .collect::<Result<_>>()?;
    let log_new: Vec<f64> = forwards.iter().zip(batch).map(|((d, _), s)| d.log_prob(s.action)).collect();
    let log_old: Vec<f64> = batch.iter().map(|s| s.log_prob_old).collect();
    let adv: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
    let loss = clipped_objective(&log_new, &log_old, &adv, eps)?;
    let dlogp = clipped_objective_grad(&log_new, &log_old, &adv, eps)?;
    let mut tapes = Vec::with_capacity(batch.len());
    let mut grad_outs = Vec::with_capacity(batch.len());
    for (((dist, tape), s), g) in forwards.into_iter().zip(batch).zip(dlogp) {
        // d log p_a / d logit_j = [j == a] - p_j
        let grad: Vec<f64> = dist
            .probs()
            .iter()
            .enumerate()
            .map(|(j, &p)| g * (f64::from(u8::from(j == s.action)) - p))
            .collect();
        tapes.push(tape);
        grad_outs.push(grad);
    }
    Ok((loss, policy.network().backward_batch(&tapes, &grad_outs)?))
}

/// Value MSE and its gradient with respect to every value-network parameter.
pub fn value_loss_and_grad(value: &ValueNet, observations: &[&VideoTensor], returns: &[f64]) -> Result<(f64, Vec<f64>)> {
    if observations.len() != returns.len() || returns.is_empty() {
        return Err(Error::RejectedBatch("misaligned or empty value batch".into()));
    }
    let forwards: Vec<(f64, Tape)> =
        observations.par_iter().map(|o| value.forward_tape(o)).collect::<Result<_>>()?;
    let pred: Vec<f64> = forwards.iter().map(|(v, _)| *v).collect();
    let loss = value_loss(&pred, returns);
    let n = returns.len() as f64;
    let grad_outs: Vec<Vec<f64>> = pred.iter().zip(returns).map(|(p, r)| vec![2.0 * (p - r) / n]).collect();
    let tapes: Vec<Tape> = forwards.into_iter().map(|(_, t)| t).collect();
    Ok((loss, value.network().backward_batch(&tapes, &grad_outs)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub actors: usize,
    pub timesteps: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            iterations: 30,
            actors: 4,
            timesteps: 16,
            epochs: 3,
            minibatch: 16,
            learning_rate: 3e-4,
            normalize_advantages: true,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(invalid(format!("clip epsilon {} must lie in (0, 1)", self.clip_eps)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid(format!("gamma {} must lie in (0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda {} must lie in [0, 1]", self.lambda)));
        }
        if self.actors == 0 || self.timesteps == 0 || self.epochs == 0 || self.minibatch == 0 {
            return Err(invalid("actors, timesteps, epochs and minibatch must be positive"));
        }
        let total = self.actors * self.timesteps;
        if !total.is_multiple_of(self.minibatch) {
            return Err(invalid(format!("minibatch {} does not divide the {total}-step batch", self.minibatch)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_return: f64,
    pub mean_ep_len: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub queries_used: u64,
}

impl IterationStats {
    pub const CSV_HEADER: &'static str = "iteration,mean_return,mean_ep_len,policy_loss,value_loss,queries_used";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            self.iteration, self.mean_return, self.mean_ep_len, self.policy_loss, self.value_loss, self.queries_used
        )
    }
}

fn rollout<E: Environment>(
    env: &mut E,
    policy: &PolicyNet,
    value: &ValueNet,
    timesteps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut traj = Trajectory::default();
    let mut obs = env.reset(rng)?;
    for t in 0..timesteps {
        let dist = policy.forward(&obs)?;
        let v = value.value(&obs)?;
        let (action, log_prob) = dist.sample(rng);
        let step = env.step(action)?;
        traj.steps.push(Transition { observation: obs, action, reward: step.reward, value: v, log_prob, terminal: step.terminal });
        if t + 1 == timesteps {
            if !step.terminal {
                traj.bootstrap = Some(value.value(&step.observation)?);
            }
            break;
        }
        obs = if step.terminal { env.reset(rng)? } else { step.observation };
    }
    Ok(traj)
}

/// (mean return, mean length) over episodes finished in the batch; falls
/// back to the cut segments when none finished.
fn episode_stats(trajs: &[Trajectory]) -> (f64, f64) {
    let mut done = Vec::new();
    let mut partial = Vec::new();
    for tr in trajs {
        let (mut ret, mut len) = (0.0, 0usize);
        for s in &tr.steps {
            ret += s.reward;
            len += 1;
            if s.terminal {
                done.push((ret, len));
                ret = 0.0;
                len = 0;
            }
        }
        if len > 0 {
            partial.push((ret, len));
        }
    }
    let eps = if done.is_empty() { partial } else { done };
    let n = eps.len().max(1) as f64;
    (eps.iter().map(|e| e.0).sum::<f64>() / n, eps.iter().map(|e| e.1 as f64).sum::<f64>() / n)
}

fn normalize(adv: &mut [f64]) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

fn actor_seed(seed: u64, iteration: usize, actor: usize) -> u64 {
    seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (actor as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Runs `cfg.iterations` rounds of rollout collection and clipped-surrogate
/// updates. On a non-finite loss the networks are restored to the last
/// finite parameters and a divergence error is returned.
pub fn train<E, F>(env_factory: F, policy: &mut PolicyNet, value: &mut ValueNet, cfg: &PpoConfig) -> Result<Vec<IterationStats>>
where
    E: Environment + Send,
    F: Fn(usize) -> Result<E> + Sync,
{
    train_with(env_factory, policy, value, cfg, |_| {})
}

/// [`train`] with a callback after every iteration.
pub fn train_with<E, F, C>(
    env_factory: F,
    policy: &mut PolicyNet,
    value: &mut ValueNet,
    cfg: &PpoConfig,
    mut on_iteration: C,
) -> Result<Vec<IterationStats>>
where
    E: Environment + Send,
    F: Fn(usize) -> Result<E> + Sync,
    C: FnMut(&IterationStats),
{
    cfg.validate()?;
    let mut envs: Vec<E> = (0..cfg.actors).map(&env_factory).collect::<Result<_>>()?;
    if envs.iter().any(|e| e.num_actions() != policy.frames()) {
        return Err(invalid("environment action count differs from the policy head width"));
    }
    let mut policy_opt = Adam::new(policy.network().num_params(), cfg.learning_rate);
    let mut value_opt = Adam::new(value.network().num_params(), cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stats = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let (frozen_p, frozen_v) = (&*policy, &*value);
        let trajs: Vec<Trajectory> = envs
            .par_iter_mut()
            .enumerate()
            .map(|(a, env)| {
                let mut rng = ChaCha8Rng::seed_from_u64(actor_seed(cfg.seed, it, a));
                rollout(env, frozen_p, frozen_v, cfg.timesteps, &mut rng)
            })
            .collect::<Result<_>>()?;
        let (mean_return, mean_ep_len) = episode_stats(&trajs);

        let mut samples = Vec::with_capacity(cfg.actors * cfg.timesteps);
        let mut returns = Vec::with_capacity(samples.capacity());
        let mut advantages = Vec::with_capacity(samples.capacity());
        for tr in &trajs {
            let adv = tr.advantages(cfg.gamma, cfg.lambda);
            for (s, a) in tr.steps.iter().zip(adv) {
                returns.push(a + s.value);
                advantages.push(a);
                samples.push(s);
            }
        }
        if cfg.normalize_advantages {
            normalize(&mut advantages);
        }

        let good_policy = policy.network().params().to_vec();
        let good_value = value.network().params().to_vec();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let (mut p_loss_sum, mut v_loss_sum, mut batches) = (0.0, 0.0, 0usize);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.minibatch) {
                let batch: Vec<PolicySample<'_>> = chunk
                    .iter()
                    .map(|&i| PolicySample {
                        observation: &samples[i].observation,
                        action: samples[i].action,
                        log_prob_old: samples[i].log_prob,
                        advantage: advantages[i],
                    })
                    .collect();
                let step = policy_loss_and_grad(policy, &batch, cfg.clip_eps).and_then(|(pl, pg)| {
                    let obs: Vec<&VideoTensor> = chunk.iter().map(|&i| &samples[i].observation).collect();
                    let rets: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();
                    let (vl, vg) = value_loss_and_grad(value, &obs, &rets)?;
                    Ok((pl, pg, vl, vg))
                });
                let (pl, pg, vl, vg) = match step {
                    Ok(r) if r.0.is_finite() && r.2.is_finite() => r,
                    other => {
                        policy.network_mut().params_mut().copy_from_slice(&good_policy);
                        value.network_mut().params_mut().copy_from_slice(&good_value);
                        let detail = match other {
                            Err(e) => e.to_string(),
                            Ok(r) => format!("policy loss {}, value loss {}", r.0, r.2),
                        };
                        return Err(Error::Divergence { iteration: it, detail });
                    }
                };
                policy_opt.step(policy.network_mut().params_mut(), &pg);
                value_opt.step(value.network_mut().params_mut(), &vg);
                p_loss_sum += pl;
                v_loss_sum += vl;
                batches += 1;
            }
        }
        let finite = policy.network().params().iter().chain(value.network().params()).all(|p| p.is_finite());
        if !finite {
            policy.network_mut().params_mut().copy_from_slice(&good_policy);
            value.network_mut().params_mut().copy_from_slice(&good_value);
            return Err(Error::Divergence { iteration: it, detail: "non-finite parameters after update".into() });
        }
        let s = IterationStats {
            iteration: it,
            mean_return,
            mean_ep_len,
            policy_loss: p_loss_sum / batches as f64,
            value_loss: v_loss_sum / batches as f64,
            queries_used: envs.iter().map(|e| e.queries()).sum(),
        };
        on_iteration(&s);
        stats.push(s);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyArch;
    use crate::video::Dims;

    #[test]
    fn gae_trivial_cases() {
        assert_eq!(gae(&[1.0], &[0.0], &[true], 0.0, 0.99, 0.95), vec![1.0]);
        assert_eq!(gae(&[1.0, 1.0, 0.0], &[0.0; 3], &[false, false, true], 0.0, 1.0, 1.0), vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn gae_lambda_zero_is_td_residual() {
        let r = [0.5, -0.2, 1.0, 0.3];
        let v = [0.1, 0.4, -0.3, 0.2];
        let term = [false, true, false, false];
        let a = gae(&r, &v, &term, 0.7, 0.9, 0.0);
        let expect = [0.5 + 0.9 * 0.4 - 0.1, -0.2 - 0.4, 1.0 + 0.9 * 0.2 + 0.3, 0.3 + 0.9 * 0.7 - 0.2];
        for (x, y) in a.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_lambda_one_gives_return_minus_value() {
        let r = [1.0, 2.0, 3.0];
        let v = [0.3, 0.1, 0.7];
        let a = gae(&r, &v, &[false, false, true], 0.0, 0.9, 1.0);
        let ret = [1.0 + 0.9 * 2.0 + 0.81 * 3.0, 2.0 + 0.9 * 3.0, 3.0];
        for i in 0..3 {
            assert!((a[i] - (ret[i] - v[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn clipped_objective_cases() {
        let eps = 0.2;
        let a = [1.5, -2.0];
        assert!((clipped_objective(&[0.0, 0.0], &[0.0, 0.0], &a, eps).unwrap() + (-0.25)).abs() < 1e-15);
        let up = (1.0f64 + 2.0 * eps).ln();
        assert!((clipped_objective(&[up], &[0.0], &[2.0], eps).unwrap() + 1.2 * 2.0).abs() < 1e-12);
        let down = (1.0f64 - 2.0 * eps).ln();
        assert!((clipped_objective(&[down], &[0.0], &[-2.0], eps).unwrap() + 0.8 * -2.0).abs() < 1e-12);
        assert_eq!(clipped_objective_grad(&[up], &[0.0], &[2.0], eps).unwrap(), vec![0.0]);
        assert!(matches!(clipped_objective(&[800.0], &[0.0], &[1.0], eps), Err(Error::RejectedBatch(_))));
    }

    #[test]
    fn value_loss_cases() {
        assert_eq!(value_loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((value_loss(&[1.5, 2.5], &[1.0, 2.0]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig { minibatch: 5, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { clip_eps: 1.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
    }

    struct Coin {
        dims: Dims,
        steps: u64,
    }

    impl Environment for Coin {
        fn num_actions(&self) -> usize {
            2
        }
        fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Result<VideoTensor> {
            Ok(VideoTensor::filled(self.dims, 0.5))
        }
        fn step(&mut self, action: usize) -> Result<EnvStep> {
            self.steps += 1;
            Ok(EnvStep { observation: VideoTensor::filled(self.dims, 0.5), reward: action as f64, terminal: true })
        }
        fn queries(&self) -> u64 {
            self.steps
        }
    }

    fn nets(seed: u64) -> (Dims, PolicyNet, ValueNet) {
        let d = Dims::new(2, 4, 4, 1).unwrap();
        let arch = PolicyArch { conv_channels: [2, 2, 2, 2, 2], conv_strides: [1, 2, 1, 2, 1], fc_widths: [8, 8] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PolicyNet::new(d, &arch, &mut rng).unwrap();
        let v = ValueNet::new(d, &arch, &mut rng).unwrap();
        (d, p, v)
    }

    #[test]
    fn zero_iterations_and_zero_rate_leave_parameters() {
        let (d, mut p, mut v) = nets(1);
        let p0 = p.clone();
        let v0 = v.clone();
        let cfg = PpoConfig { iterations: 0, actors: 2, timesteps: 4, minibatch: 4, ..Default::default() };
        assert!(train(|_| Ok(Coin { dims: d, steps: 0 }), &mut p, &mut v, &cfg).unwrap().is_empty());
        assert_eq!(p, p0);
        let cfg = PpoConfig { iterations: 1, learning_rate: 0.0, ..cfg };
        train(|_| Ok(Coin { dims: d, steps: 0 }), &mut p, &mut v, &cfg).unwrap();
        assert_eq!(p, p0);
        assert_eq!(v, v0);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (d, mut p, mut v) = nets(3);
            let cfg = PpoConfig { iterations: 3, actors: 2, timesteps: 4, minibatch: 4, seed: 9, ..Default::default() };
            let s = train(|_| Ok(Coin { dims: d, steps: 0 }), &mut p, &mut v, &cfg).unwrap();
            (s, p)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a[2].queries_used, 3 * 2 * 4);
    }
}
