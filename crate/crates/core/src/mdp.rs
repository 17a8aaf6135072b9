//! Key-frame selection as a Markov decision process.
//!
//! The state is the masked class difference `(x_hat - x) * M_t`. Each action
//! removes one frame from the mask; the episode ends on a repeated frame or
//! when the perturbed video `clamp01(x + s_{t+1})` stops meeting the goal.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::oracle::{Counted, Goal, Oracle};
use crate::ppo::{EnvStep, Environment};
use crate::saliency::{saliency_mask, SpatialParams};
use crate::video::{Label, Mask, VideoTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Binary success rewards.
    Pretrain,
    /// Target-probability rewards; targeted goals only.
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub terminal: bool,
    pub queries: u64,
}

#[derive(Debug, Clone)]
pub struct MdpState {
    x: VideoTensor,
    full_diff: VideoTensor,
    diff: VideoTensor,
    mask: Mask,
    last_adversarial: Mask,
    deleted: Vec<usize>,
    goal: Goal,
    phase: Phase,
    terminal: bool,
}

impl MdpState {
    /// Starts an episode at `M_0 = m_spatial`. Spends one query to confirm
    /// that `x + s_0` already meets the goal.
    pub fn reset(
        oracle: &dyn Oracle,
        x: &VideoTensor,
        x_hat: &VideoTensor,
        m_spatial: &Mask,
        goal: Goal,
        phase: Phase,
    ) -> Result<MdpState> {
        if phase == Phase::Finetune && !goal.is_targeted() {
            return Err(invalid("fine-tuning rewards need a targeted goal"));
        }
        let full_diff = x_hat.sub(x)?;
        let diff = full_diff.hadamard(m_spatial)?;
        if diff.as_slice().iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidStart("masked difference is zero".into()));
        }
        let verdict = oracle.query(&x.add(&diff)?.clamp01())?;
        if !goal.is_met(verdict.label) {
            return Err(Error::InvalidStart(format!(
                "initial perturbation is classified {} and does not meet the goal",
                verdict.label
            )));
        }
        Ok(MdpState {
            x: x.clone(),
            full_diff,
            diff,
            mask: m_spatial.clone(),
            last_adversarial: m_spatial.clone(),
            deleted: Vec::new(),
            goal,
            phase,
            terminal: false,
        })
    }

    /// The observation `s_t`.
    pub fn diff(&self) -> &VideoTensor {
        &self.diff
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn deleted(&self) -> &[usize] {
        &self.deleted
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn goal(&self) -> Goal {
        self.goal
    }

    pub fn step(&mut self, a: usize, oracle: &dyn Oracle) -> Result<StepResult> {
        if self.terminal {
            return Err(Error::ContractViolation("step on a terminal state".into()));
        }
        let frames = self.mask.dims().t;
        if a >= frames {
            return Err(invalid(format!("action {a} out of range for {frames} frames")));
        }
        if self.deleted.contains(&a) {
            self.terminal = true;
            return Ok(StepResult { reward: -1.0, terminal: true, queries: 0 });
        }
        let next_mask = self.mask.frame_zero(a)?;
        let mut next_diff = self.diff.clone();
        next_diff.frame_mut(a).fill(0.0);
        let verdict = oracle.query(&self.x.add(&next_diff)?.clamp01())?;
        self.deleted.push(a);
        self.mask = next_mask;
        self.diff = next_diff;
        if !self.goal.is_met(verdict.label) {
            self.terminal = true;
            return Ok(StepResult { reward: 0.0, terminal: true, queries: 1 });
        }
        self.last_adversarial = self.mask.clone();
        // Explicit cap: no episode outlives T deletions.
        self.terminal = self.deleted.len() >= frames;
        let reward = match self.phase {
            Phase::Pretrain => 1.0,
            Phase::Finetune => verdict.prob,
        };
        Ok(StepResult { reward, terminal: self.terminal, queries: 1 })
    }

    /// Last mask whose perturbation still met the goal.
    pub fn episode_mask(&self) -> Result<&Mask> {
        if !self.terminal {
            return Err(Error::ContractViolation("episode mask requested before termination".into()));
        }
        Ok(&self.last_adversarial)
    }

    /// `(x_hat - x) * M` for the final mask.
    pub fn episode_diff(&self) -> Result<VideoTensor> {
        self.full_diff.hadamard(self.episode_mask()?)
    }
}

/// Videos with labels and precomputed saliency masks `S(v, phi)`.
#[derive(Debug, Clone)]
pub struct VideoPool {
    videos: Vec<VideoTensor>,
    labels: Vec<Label>,
    masks: Vec<Mask>,
}

impl VideoPool {
    pub fn new(items: Vec<(VideoTensor, Label)>, spatial: &SpatialParams) -> Result<Self> {
        if items.is_empty() {
            return Err(invalid("video pool is empty"));
        }
        let dims = items[0].0.dims();
        let mut videos = Vec::with_capacity(items.len());
        let mut labels = Vec::with_capacity(items.len());
        let mut masks = Vec::with_capacity(items.len());
        for (v, y) in items {
            dims.ensure_same(&v.dims())?;
            masks.push(saliency_mask(&v, spatial)?);
            videos.push(v);
            labels.push(y);
        }
        Ok(Self { videos, labels, masks })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn video(&self, i: usize) -> &VideoTensor {
        &self.videos[i]
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels[i]
    }

    pub fn mask(&self, i: usize) -> &Mask {
        &self.masks[i]
    }

    pub fn indices_where(&self, pred: impl Fn(Label) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| pred(self.labels[i])).collect()
    }
}

/// Where episodes draw their `(x, x_hat)` pairs from.
#[derive(Debug, Clone)]
pub enum EpisodeSource<'a> {
    /// Random clean video and a random video of another class.
    Pretrain { targeted: bool },
    /// Fixed clean video, target-class videos from the pool.
    Finetune { x: &'a VideoTensor, x_mask: &'a Mask, target: Label },
}

/// [`MdpState`] wrapped as a PPO environment.
pub struct MdpEnvironment<'a> {
    oracle: Counted<&'a dyn Oracle>,
    pool: &'a VideoPool,
    source: EpisodeSource<'a>,
    phase: Phase,
    state: Option<MdpState>,
    max_resamples: usize,
}

impl<'a> MdpEnvironment<'a> {
    pub fn new(oracle: &'a dyn Oracle, pool: &'a VideoPool, source: EpisodeSource<'a>) -> Result<Self> {
        let phase = match source {
            EpisodeSource::Pretrain { .. } => Phase::Pretrain,
            EpisodeSource::Finetune { target, .. } => {
                if pool.indices_where(|y| y == target).is_empty() {
                    return Err(invalid(format!("no pool videos of target class {target}")));
                }
                Phase::Finetune
            }
        };
        Ok(Self { oracle: Counted::new(oracle), pool, source, phase, state: None, max_resamples: 200 })
    }

    pub fn state(&self) -> Option<&MdpState> {
        self.state.as_ref()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(VideoTensor, VideoTensor, Mask, Goal)> {
        match &self.source {
            EpisodeSource::Pretrain { targeted } => {
                let xi = rng.gen_range(0..self.pool.len());
                let y = self.pool.label(xi);
                let others = self.pool.indices_where(|l| l != y);
                let &hi = others.choose(rng).ok_or_else(|| invalid("pool holds a single class"))?;
                let (goal, mask) = if *targeted {
                    (Goal::Targeted { target: self.pool.label(hi) }, self.pool.mask(xi).union(self.pool.mask(hi))?)
                } else {
                    (Goal::Untargeted { true_label: y }, self.pool.mask(xi).clone())
                };
                Ok((self.pool.video(xi).clone(), self.pool.video(hi).clone(), mask, goal))
            }
            EpisodeSource::Finetune { x, x_mask, target } => {
                let targets = self.pool.indices_where(|l| l == *target);
                let &hi = targets.choose(rng).expect("checked at construction");
                let mask = x_mask.union(self.pool.mask(hi))?;
                Ok(((*x).clone(), self.pool.video(hi).clone(), mask, Goal::Targeted { target: *target }))
            }
        }
    }
}

impl Environment for MdpEnvironment<'_> {
    fn num_actions(&self) -> usize {
        self.pool.video(0).dims().t
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<VideoTensor> {
        for _ in 0..self.max_resamples {
            let (x, x_hat, mask, goal) = self.draw(rng)?;
            match MdpState::reset(&self.oracle, &x, &x_hat, &mask, goal, self.phase) {
                Ok(state) => {
                    let obs = state.diff().clone();
                    self.state = Some(state);
                    return Ok(obs);
                }
                Err(Error::InvalidStart(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::InvalidStart(format!("no valid start pair after {} draws", self.max_resamples)))
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        let state = self.state.as_mut().ok_or_else(|| Error::ContractViolation("step before reset".into()))?;
        let r = state.step(action, &self.oracle)?;
        Ok(EnvStep { observation: state.diff().clone(), reward: r.reward, terminal: r.terminal })
    }

    fn queries(&self) -> u64 {
        self.oracle.queries()
    }
}
