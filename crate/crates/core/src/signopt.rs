//! Sign-based zeroth-order search for a minimal adversarial direction.
//!
//! A direction `theta` is scored by its boundary distance `g(theta)`, the
//! smallest step `lambda` for which `clamp01(x + lambda * theta / |theta|)`
//! meets the attack goal. Descent uses one-query sign estimates of how `g`
//! changes along random probes confined to the attack mask.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::{EpisodeSource, MdpEnvironment, MdpState, Phase, VideoPool};
use crate::metrics::{map_score, mask_sparsity};
use crate::oracle::{Budgeted, Goal, Oracle};
use crate::policy::{PolicyNet, ValueNet};
use crate::ppo::{self, IterationStats, PpoConfig};
use crate::saliency::{saliency_mask, SpatialParams};
use crate::video::{Label, Mask, VideoTensor};

/// Multiplicative step used when bracketing the boundary.
pub const BRACKET_GROWTH: f64 = 1.5;
const MAX_BRACKET_PROBES: usize = 80;
const FIRST_SHRINK: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    vec: VideoTensor,
    norm: f64,
}

impl Direction {
    pub fn new(vec: VideoTensor) -> Result<Self> {
        let norm = vec.l2_norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::DirectionUnusable(format!("direction norm is {norm}")));
        }
        Ok(Self { vec, norm })
    }

    pub fn vec(&self) -> &VideoTensor {
        &self.vec
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn unit(&self) -> VideoTensor {
        self.vec.scaled(1.0 / self.norm)
    }
}

/// `clamp01(x + lambda * dir / |dir|)`, the only point construction the attack queries.
pub fn point(x: &VideoTensor, dir: &Direction, lambda: f64) -> Result<VideoTensor> {
    Ok(x.add_scaled(&dir.vec, lambda / dir.norm)?.clamp01())
}

fn meets(oracle: &dyn Oracle, goal: Goal, v: &VideoTensor) -> Result<bool> {
    Ok(goal.is_met(oracle.query(v)?.label))
}

/// Starting information for [`g_eval`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bracket {
    /// Status at this step length is unknown; it will be queried.
    Probe(f64),
    /// This step length is already known to meet the goal.
    Adversarial(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Boundary {
    /// Smallest queried step that met the goal.
    pub lambda: f64,
    /// Largest queried step that did not.
    pub lower: f64,
    pub queries: u64,
}

/// Boundary distance along `dir` by bracketing and bisection, to relative
/// tolerance `tol`. The returned `lambda` was itself queried and met the goal.
pub fn g_eval(oracle: &dyn Oracle, x: &VideoTensor, dir: &Direction, goal: Goal, start: Bracket, tol: f64) -> Result<Boundary> {
    if !(tol > 0.0) {
        return Err(invalid(format!("bisection tolerance {tol} must be positive")));
    }
    let mut queries = 0u64;
    let probe = |lambda: f64, queries: &mut u64| -> Result<bool> {
        *queries += 1;
        meets(oracle, goal, &point(x, dir, lambda)?)
    };
    let (mut lo, mut hi) = match start {
        Bracket::Adversarial(l) | Bracket::Probe(l) if !(l > 0.0 && l.is_finite()) => {
            return Err(invalid(format!("bracket seed {l} must be positive and finite")));
        }
        Bracket::Adversarial(l) => (None, l),
        Bracket::Probe(l) => {
            if probe(l, &mut queries)? {
                (None, l)
            } else {
                let mut lo = l;
                let mut found = None;
                for _ in 0..MAX_BRACKET_PROBES {
                    let next = lo * BRACKET_GROWTH;
                    if probe(next, &mut queries)? {
                        found = Some(next);
                        break;
                    }
                    lo = next;
                }
                let hi = found.ok_or_else(|| {
                    Error::DirectionUnusable(format!("no adversarial step up to {lo:.3e} along the direction"))
                })?;
                (Some(lo), hi)
            }
        }
    };
    if lo.is_none() {
        // Shrink from a known adversarial step in galloping fractions, since
        // successive descent steps usually move the boundary by a few percent.
        let mut frac = FIRST_SHRINK;
        for _ in 0..MAX_BRACKET_PROBES {
            let next = hi * (1.0 - frac);
            if probe(next, &mut queries)? {
                hi = next;
                frac = (2.0 * frac).min(1.0 - 1.0 / BRACKET_GROWTH);
            } else {
                lo = Some(next);
                break;
            }
        }
    }
    let mut lo = lo.ok_or_else(|| Error::DirectionUnusable(format!("goal already met at step {hi:.3e}")))?;
    while hi - lo > tol * lo {
        let mid = 0.5 * (lo + hi);
        if probe(mid, &mut queries)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Boundary { lambda: hi, lower: lo, queries })
}

/// One-query sign of `g(theta + eps u) - g(theta)`: `-1` when the probe
/// direction already meets the goal at the current distance (so `g` did
/// not grow), `+1` otherwise.
pub fn sign_probe(
    oracle: &dyn Oracle,
    x: &VideoTensor,
    dir: &Direction,
    g_current: f64,
    u: &VideoTensor,
    eps: f64,
    goal: Goal,
) -> Result<f64> {
    let moved = dir.unit().add_scaled(u, eps)?;
    let probe_dir = Direction::new(moved)?;
    Ok(if meets(oracle, goal, &point(x, &probe_dir, g_current)?)? { -1.0 } else { 1.0 })
}

/// Unit-norm Gaussian vector supported on `mask`.
pub fn masked_probe<R: Rng + ?Sized>(mask: &Mask, rng: &mut R) -> Result<VideoTensor> {
    let mut u = VideoTensor::zeros(mask.dims());
    for (v, &m) in u.as_mut_slice().iter_mut().zip(mask.bits()) {
        if m != 0 {
            *v = rng.sample(StandardNormal);
        }
    }
    let n = u.l2_norm();
    if n == 0.0 {
        return Err(Error::DirectionUnusable("probe mask is empty".into()));
    }
    Ok(u.scaled(1.0 / n))
}

/// `(1/Q) sum_q sign_q u_q` over `Q` masked probes; exactly `Q` queries.
#[allow(clippy::too_many_arguments)]
pub fn grad_estimate<R: Rng + ?Sized>(
    oracle: &dyn Oracle,
    x: &VideoTensor,
    dir: &Direction,
    g_current: f64,
    mask: &Mask,
    samples: usize,
    eps: f64,
    goal: Goal,
    rng: &mut R,
) -> Result<VideoTensor> {
    if samples == 0 {
        return Err(invalid("gradient estimate needs at least one probe"));
    }
    let mut acc = VideoTensor::zeros(x.dims());
    for _ in 0..samples {
        let u = masked_probe(mask, rng)?;
        let s = sign_probe(oracle, x, dir, g_current, &u, eps, goal)?;
        acc = acc.add_scaled(&u, s)?;
    }
    Ok(acc.scaled(1.0 / samples as f64))
}

/// Criterion for picking among initial candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Smallest MAP of `g(theta) * theta`.
    MinMap,
    /// Smallest `g(theta)`.
    MinG,
}

#[derive(Debug, Clone)]
pub struct Init {
    pub direction: Direction,
    pub mask: Mask,
    pub g: f64,
    pub index: usize,
    /// Selection score per candidate; `None` where the candidate did not meet the goal.
    pub scores: Vec<Option<f64>>,
}

/// Evaluates every candidate `(x_hat, M)` whose masked difference meets the
/// goal and keeps the best one under `selection`.
pub fn init_direction(
    oracle: &dyn Oracle,
    x: &VideoTensor,
    candidates: &[(VideoTensor, Mask)],
    goal: Goal,
    selection: Selection,
    tol: f64,
) -> Result<Init> {
    if candidates.is_empty() {
        return Err(invalid("no initialization candidates"));
    }
    let mut best: Option<(f64, Direction, usize, f64)> = None;
    let mut scores = Vec::with_capacity(candidates.len());
    for (i, (x_hat, mask)) in candidates.iter().enumerate() {
        let dir = match Direction::new(x_hat.sub(x)?.hadamard(mask)?) {
            Ok(d) => d,
            Err(Error::DirectionUnusable(_)) => {
                scores.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        if !meets(oracle, goal, &point(x, &dir, dir.norm())?)? {
            scores.push(None);
            continue;
        }
        let b = g_eval(oracle, x, &dir, goal, Bracket::Adversarial(dir.norm()), tol)?;
        let score = match selection {
            Selection::MinMap => map_score(&dir.unit().scaled(b.lambda)),
            Selection::MinG => b.lambda,
        };
        scores.push(Some(score));
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, dir, i, b.lambda));
        }
    }
    let (_, direction, index, g) = best.ok_or(Error::InitializationFailure)?;
    Ok(Init { direction, mask: candidates[index].1.clone(), g, index, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Initialization candidates `n`.
    pub candidates: usize,
    /// Descent iterations `T_ai`.
    pub iterations: usize,
    /// Probes per gradient estimate `Q_d`.
    pub grad_samples: usize,
    /// Probe smoothing `eps_d`.
    pub smoothing: f64,
    /// Step size `eta`.
    pub step_size: f64,
    /// Relative bisection tolerance.
    pub tolerance: f64,
    /// Stop once the perturbation's MAP is at or below this bound.
    pub map_bound: f64,
    pub budget: u64,
    pub selection: Selection,
    pub max_halvings: usize,
    pub spatial: SpatialParams,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            candidates: 100,
            iterations: 5000,
            grad_samples: 20,
            smoothing: 1e-3,
            step_size: 0.2,
            tolerance: 1e-5,
            map_bound: 3.0,
            budget: 50_000,
            selection: Selection::MinMap,
            max_halvings: 6,
            spatial: SpatialParams::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 || self.grad_samples == 0 || self.budget == 0 {
            return Err(invalid("candidates, gradient samples and budget must be positive"));
        }
        for (name, v) in [("smoothing", self.smoothing), ("tolerance", self.tolerance), ("map bound", self.map_bound)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} {v} must be positive and finite")));
            }
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(invalid("step size must be finite and non-negative"));
        }
        self.spatial.validate()
    }
}

/// Fine-tuning inputs for targeted policy attacks.
#[derive(Debug, Clone, Copy)]
pub struct FineTune<'a> {
    pub value: &'a ValueNet,
    pub config: PpoConfig,
}

/// How each candidate's mask is built.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    /// All ones.
    Dense,
    /// Saliency mask only.
    Spatial,
    /// Saliency mask pruned by a greedy policy rollout.
    Policy { policy: &'a PolicyNet, finetune: Option<FineTune<'a>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub g: f64,
    pub map: f64,
    pub queries: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackResult {
    pub goal: Goal,
    /// Goal met and MAP within the bound.
    pub success: bool,
    /// `x_adv` meets the goal (it is a queried point).
    pub adversarial: bool,
    pub g: Option<f64>,
    pub map: f64,
    pub sparsity: f64,
    pub queries: u64,
    pub finetune_queries: u64,
    pub iterations: usize,
    pub candidate: Option<usize>,
    pub failure: Option<String>,
    pub trace: Vec<TracePoint>,
    #[serde(skip)]
    pub x_adv: VideoTensor,
    #[serde(skip)]
    pub direction: Option<VideoTensor>,
    #[serde(skip)]
    pub mask: Mask,
}

impl AttackResult {
    pub fn perturbation(&self, x: &VideoTensor) -> Result<VideoTensor> {
        self.x_adv.sub(x)
    }

    fn failed(x: &VideoTensor, goal: Goal, queries: u64, finetune_queries: u64, why: String) -> Self {
        Self {
            goal,
            success: false,
            adversarial: false,
            g: None,
            map: 0.0,
            sparsity: 1.0,
            queries,
            finetune_queries,
            iterations: 0,
            candidate: None,
            failure: Some(why),
            trace: Vec::new(),
            x_adv: x.clone(),
            direction: None,
            mask: Mask::zeros(x.dims()),
        }
    }
}

fn pool_candidates(pool: &VideoPool, goal: Goal, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let eligible = pool.indices_where(|y| match goal {
        Goal::Untargeted { true_label } => y != true_label,
        Goal::Targeted { target } => y == target,
    });
    if eligible.is_empty() {
        return Err(invalid("no pool videos are eligible initialization candidates"));
    }
    Ok(if eligible.len() >= n {
        eligible.choose_multiple(rng, n).copied().collect()
    } else {
        (0..n).map(|_| *eligible.choose(rng).expect("nonempty")).collect()
    })
}

/// Fine-tunes copies of `policy` and `value` on target-probability rewards
/// for the fixed clean video `x`, drawing `x_hat` from the target class.
#[allow(clippy::too_many_arguments)]
pub fn finetune_policy(
    oracle: &dyn Oracle,
    pool: &VideoPool,
    x: &VideoTensor,
    x_mask: &Mask,
    target: Label,
    policy: &PolicyNet,
    value: &ValueNet,
    cfg: &PpoConfig,
) -> Result<(PolicyNet, ValueNet, Vec<IterationStats>)> {
    let mut tuned = policy.clone();
    let mut value = value.clone();
    let factory = |_| MdpEnvironment::new(oracle, pool, EpisodeSource::Finetune { x, x_mask, target });
    let stats = ppo::train(factory, &mut tuned, &mut value, cfg)?;
    Ok((tuned, value, stats))
}

/// Greedy rollout from `m_spatial`; `None` when the start state is not adversarial.
pub fn policy_mask(
    oracle: &dyn Oracle,
    policy: &PolicyNet,
    x: &VideoTensor,
    x_hat: &VideoTensor,
    m_spatial: &Mask,
    goal: Goal,
) -> Result<Option<Mask>> {
    let mut state = match MdpState::reset(oracle, x, x_hat, m_spatial, goal, Phase::Pretrain) {
        Ok(s) => s,
        Err(Error::InvalidStart(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    while !state.is_terminal() {
        let a = policy.forward(state.diff())?.greedy();
        state.step(a, oracle)?;
    }
    Ok(Some(state.episode_mask()?.clone()))
}

fn budget_stop<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::BudgetExhausted(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Full attack on `x`: candidate sampling, mask construction, direction
/// initialization and sign-based descent. Every query, fine-tuning
/// included, is charged to `cfg.budget`. Failure to initialize or an
/// exhausted budget yields an unsuccessful result rather than an error.
pub fn attack(
    oracle: &dyn Oracle,
    x: &VideoTensor,
    goal: Goal,
    pool: &VideoPool,
    source: MaskSource<'_>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult> {
    cfg.validate()?;
    oracle.input_dims().ensure_same(&x.dims())?;
    let budgeted = Budgeted::new(oracle, cfg.budget);
    let oracle: &dyn Oracle = &budgeted;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = pool_candidates(pool, goal, cfg.candidates, &mut rng)?;
    let sx = match source {
        MaskSource::Dense => Mask::ones(x.dims()),
        _ => saliency_mask(x, &cfg.spatial)?,
    };

    let mut policy_owned = None;
    if let (MaskSource::Policy { policy, finetune: Some(ft) }, Goal::Targeted { target }) = (source, goal) {
        let ppo_cfg = PpoConfig { seed: rng.gen(), ..ft.config };
        match finetune_policy(oracle, pool, x, &sx, target, policy, ft.value, &ppo_cfg) {
            Ok((tuned, _, _)) => policy_owned = Some(tuned),
            Err(Error::InvalidStart(why)) => log::warn!("fine-tuning skipped, keeping the pretrained policy: {why}"),
            Err(Error::BudgetExhausted(_)) => {
                let used = budgeted.used();
                return Ok(AttackResult::failed(x, goal, used, used, "budget exhausted during fine-tuning".into()));
            }
            Err(e) => return Err(e),
        }
    }
    let finetune_queries = budgeted.used();

    let mut candidates = Vec::with_capacity(picks.len());
    let mut origin = Vec::with_capacity(picks.len());
    for (k, &i) in picks.iter().enumerate() {
        let x_hat = pool.video(i);
        let mask = match source {
            MaskSource::Dense => sx.clone(),
            _ if goal.is_targeted() => sx.union(pool.mask(i))?,
            _ => sx.clone(),
        };
        let mask = match source {
            MaskSource::Policy { policy, .. } => {
                let policy = policy_owned.as_ref().unwrap_or(policy);
                match budget_stop(policy_mask(oracle, policy, x, x_hat, &mask, goal))? {
                    None => {
                        let used = budgeted.used();
                        return Ok(AttackResult::failed(x, goal, used, finetune_queries, "budget exhausted during mask rollout".into()));
                    }
                    Some(None) => continue,
                    Some(Some(m)) => m,
                }
            }
            _ => mask,
        };
        candidates.push((x_hat.clone(), mask));
        origin.push(k);
    }

    let init = if candidates.is_empty() {
        Err(Error::InitializationFailure)
    } else {
        init_direction(oracle, x, &candidates, goal, cfg.selection, cfg.tolerance)
    };
    let init = match init {
        Ok(i) => i,
        Err(e @ (Error::InitializationFailure | Error::BudgetExhausted(_))) => {
            return Ok(AttackResult::failed(x, goal, budgeted.used(), finetune_queries, e.to_string()));
        }
        Err(e) => return Err(e),
    };
    drop(candidates);

    let Init { direction: mut dir, mask, mut g, index, .. } = init;
    let current_map = |dir: &Direction, g: f64| -> Result<f64> { Ok(map_score(&point(x, dir, g)?.sub(x)?)) };
    let mut map = current_map(&dir, g)?;
    let mut trace = vec![TracePoint { iteration: 0, g, map, queries: budgeted.used() }];
    let mut iterations = 0;
    let mut failure = None;

    'descent: for it in 1..=cfg.iterations {
        if map <= cfg.map_bound {
            break;
        }
        let est = grad_estimate(oracle, x, &dir, g, &mask, cfg.grad_samples, cfg.smoothing, goal, &mut rng);
        let Some(grad) = budget_stop(est)? else {
            failure = Some("query budget exhausted".to_string());
            break;
        };
        let mut step = cfg.step_size;
        let unit = dir.unit();
        for _ in 0..=cfg.max_halvings {
            if step == 0.0 {
                break;
            }
            let cand = match Direction::new(unit.add_scaled(&grad, -step)?) {
                Ok(c) => c,
                Err(Error::DirectionUnusable(_)) => {
                    step *= 0.5;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let check = point(x, &cand, g).and_then(|p| meets(oracle, goal, &p));
            let Some(ok) = budget_stop(check)? else {
                failure = Some("query budget exhausted".to_string());
                break 'descent;
            };
            if !ok {
                step *= 0.5;
                continue;
            }
            match budget_stop(g_eval(oracle, x, &cand, goal, Bracket::Adversarial(g), cfg.tolerance))? {
                Some(b) => {
                    dir = cand;
                    g = b.lambda;
                }
                None => {
                    // The candidate is adversarial at the current g, so it is still a valid point.
                    dir = cand;
                    failure = Some("query budget exhausted".to_string());
                    iterations = it;
                    map = current_map(&dir, g)?;
                    trace.push(TracePoint { iteration: it, g, map, queries: budgeted.used() });
                    break 'descent;
                }
            }
            break;
        }
        iterations = it;
        map = current_map(&dir, g)?;
        trace.push(TracePoint { iteration: it, g, map, queries: budgeted.used() });
    }

    let x_adv = point(x, &dir, g)?;
    Ok(AttackResult {
        goal,
        success: map <= cfg.map_bound,
        adversarial: true,
        g: Some(g),
        map,
        sparsity: mask_sparsity(&mask),
        queries: budgeted.used(),
        finetune_queries,
        iterations,
        candidate: Some(origin[index]),
        failure,
        trace,
        x_adv,
        direction: Some(dir.vec),
        mask,
    })
}
