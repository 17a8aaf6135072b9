//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run a subset by number: `cargo test --release --test acceptance -- 3 4`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sparsevid::harness::config::{ExperimentConfig, Method, Mode};
use sparsevid::harness::dataset::{load_split, pairs, write_dataset, DatasetSpec};
use sparsevid::harness::experiment::{pretrain_policy, run_experiment, ExperimentOutcome, PAIRED_CSV, SUMMARY_CSV};
use sparsevid::mdp::{MdpState, Phase, VideoPool};
use sparsevid::oracle::{
    accuracy, linear_boundary_distance, train_conv_oracle, Counted, Goal, LinearOracle, Oracle, OracleTrainConfig,
    OracleVerdict,
};
use sparsevid::policy::{PolicyArch, PolicyNet, ValueNet};
use sparsevid::ppo::{self, clipped_objective, clipped_objective_grad, gae, EnvStep, Environment, PolicySample, PpoConfig};
use sparsevid::saliency::{init_spatial_mask, saliency_mask, SpatialParams};
use sparsevid::signopt::{g_eval, masked_probe, sign_probe, AttackConfig, Bracket, Direction};
use sparsevid::{Dims, Label, Mask, Result, VideoTensor};

struct Verdict {
    pass: bool,
    detail: String,
    /// Wall time of work done before the verdict was computed.
    took: Option<Duration>,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into(), took: None }
    }

    fn took(mut self, d: Duration) -> Self {
        self.took = Some(d);
        self
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn gaussian(d: Dims, rng: &mut ChaCha8Rng) -> VideoTensor {
    VideoTensor::from_vec(d, (0..d.len()).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn unit_gaussian(d: Dims, rng: &mut ChaCha8Rng) -> VideoTensor {
    let v = gaussian(d, rng);
    let n = v.l2_norm();
    v.scaled(1.0 / n)
}

fn video_dims() -> Dims {
    Dims::new(16, 32, 32, 3).unwrap()
}

/// Three-class linear oracle with class 0 on top at `x`. Along `dir` the
/// classes with positive slope take over at the requested distances.
fn linear_case(d: Dims, rng: &mut ChaCha8Rng, dir: &VideoTensor, crossings: [f64; 2]) -> (LinearOracle, VideoTensor) {
    let x = VideoTensor::from_vec(d, (0..d.len()).map(|_| rng.gen_range(0.3..0.7)).collect()).unwrap();
    let w: Vec<VideoTensor> = (0..3).map(|_| gaussian(d, rng)).collect();
    let s: Vec<f64> = w.iter().map(|wk| wk.dot(&x).unwrap()).collect();
    let mut bias = vec![0.0; 3];
    for k in 1..3 {
        let slope = w[k].dot(dir).unwrap() - w[0].dot(dir).unwrap();
        let gap = if slope > 0.0 { slope * crossings[k - 1] } else { 1.0 + slope.abs() };
        bias[k] = s[0] - s[k] - gap;
    }
    (LinearOracle::new(w, bias).unwrap(), x)
}

fn criterion_1() -> Verdict {
    let d = video_dims();
    let tol = AttackConfig::default().tolerance;
    let goal = Goal::Untargeted { true_label: Label(0) };
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut cases, mut ok) = (0, 0);
    let mut worst: f64 = 0.0;
    while cases < 50 {
        let dir = unit_gaussian(d, &mut rng);
        let crossings = [rng.gen_range(0.5..5.0), rng.gen_range(0.5..5.0)];
        let (oracle, x) = linear_case(d, &mut rng, &dir, crossings);
        // Redraw when neither class gains along dir.
        let Some(expected) = linear_boundary_distance(&oracle, &x, &dir, Label(0), f64::INFINITY).unwrap() else {
            continue;
        };
        cases += 1;
        let b = g_eval(&oracle, &x, &Direction::new(dir).unwrap(), goal, Bracket::Probe(1.0), tol).unwrap();
        let rel = (b.lambda - expected).abs() / expected;
        worst = worst.max(rel);
        if rel <= 1e-3 {
            ok += 1;
        }
    }
    Verdict::new(ok == 50, format!("{ok}/50 within 1e-3 relative, worst {worst:.2e}"))
}

fn criterion_2() -> Verdict {
    let d = video_dims();
    let eps = AttackConfig::default().smoothing;
    let goal = Goal::Untargeted { true_label: Label(0) };
    let ones = Mask::ones(d);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut trials, mut agree, mut bad) = (0usize, 0usize, 0usize);
    for _ in 0..10 {
        let anchor = unit_gaussian(d, &mut rng);
        let (oracle, x) = linear_case(d, &mut rng, &anchor, [3.0, 3.0]);
        let mut local = 0;
        while local < 1000 {
            let theta = unit_gaussian(d, &mut rng);
            let Some(g) = linear_boundary_distance(&oracle, &x, &theta, Label(0), 10.0).unwrap() else { continue };
            let dir = Direction::new(theta.clone()).unwrap();
            // Five probes per direction.
            for _ in 0..5 {
                let u = masked_probe(&ones, &mut rng).unwrap();
                let moved = theta.add_scaled(&u, eps).unwrap();
                let moved = moved.scaled(1.0 / moved.l2_norm());
                let g_moved = linear_boundary_distance(&oracle, &x, &moved, Label(0), f64::INFINITY).unwrap();
                let delta = g_moved.map_or(f64::INFINITY, |gm| gm - g);
                let s = sign_probe(&oracle, &x, &dir, g, &u, eps, goal).unwrap();
                local += 1;
                if delta != 0.0 && s == delta.signum() {
                    agree += 1;
                } else if delta.abs() >= 1e-6 * g {
                    bad += 1;
                }
            }
        }
        trials += local;
    }
    let rate = agree as f64 / trials as f64;
    Verdict::new(
        rate >= 0.99 && bad == 0,
        format!("{agree}/{trials} agree ({:.2}%), {bad} disagreements outside the tie band", 100.0 * rate),
    )
}

fn brute_gae(r: &[f64], v: &[f64], term: &[bool], boot: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let mut out = vec![0.0; n];
    for t in 0..n {
        let mut coef = 1.0;
        for j in t..n {
            let next = if term[j] {
                0.0
            } else if j + 1 < n {
                v[j + 1]
            } else {
                boot
            };
            out[t] += coef * (r[j] + gamma * next - v[j]);
            if term[j] {
                break;
            }
            coef *= gamma * lambda;
        }
    }
    out
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=64);
        let r: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let term: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
        let boot = if term[n - 1] { 0.0 } else { rng.sample(StandardNormal) };
        let gamma = rng.gen_range(0.8..=1.0);
        let lambda = rng.gen_range(0.0..=1.0);
        let a = gae(&r, &v, &term, boot, gamma, lambda);
        for (x, y) in a.iter().zip(brute_gae(&r, &v, &term, boot, gamma, lambda)) {
            worst = worst.max((x - y).abs());
        }
    }
    Verdict::new(worst <= 1e-12, format!("max abs error {worst:.2e} over 1000 trajectories"))
}

fn criterion_4() -> Verdict {
    let eps = 0.2;
    // (ratio, advantage, contribution, d contribution / d log_new)
    let cases: [(f64, f64, f64, f64); 6] = [
        (1.5, 2.0, 1.2 * 2.0, 0.0),
        (0.5, 2.0, 0.5 * 2.0, 0.5 * 2.0),
        (1.5, -2.0, 1.5 * -2.0, 1.5 * -2.0),
        (0.5, -2.0, 0.8 * -2.0, 0.0),
        (1.1, 3.0, 1.1 * 3.0, 1.1 * 3.0),
        (0.9, -1.0, -0.9, -0.9),
    ];
    let n = cases.len() as f64;
    let log_new: Vec<f64> = cases.iter().map(|c| c.0.ln()).collect();
    let log_old = vec![0.0; cases.len()];
    let adv: Vec<f64> = cases.iter().map(|c| c.1).collect();
    let loss = clipped_objective(&log_new, &log_old, &adv, eps).unwrap();
    let grad = clipped_objective_grad(&log_new, &log_old, &adv, eps).unwrap();
    let expect_loss = -cases.iter().map(|c| c.2).sum::<f64>() / n;
    let mut hand_err = (loss - expect_loss).abs();
    for (g, c) in grad.iter().zip(&cases) {
        hand_err = hand_err.max((g + c.3 / n).abs());
    }

    let d = Dims::new(4, 8, 8, 3).unwrap();
    let arch = PolicyArch { conv_channels: [4, 4, 4, 6, 6], conv_strides: [1, 2, 1, 2, 1], fc_widths: [16, 8] };
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut policy = PolicyNet::new(d, &arch, &mut rng).unwrap();
    for p in policy.network_mut().params_mut() {
        *p = rng.gen_range(-0.3..0.3);
    }
    let obs: Vec<VideoTensor> =
        (0..8).map(|_| VideoTensor::from_vec(d, (0..d.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()).collect();
    let ratios = [1.5, 0.5, 1.5, 0.5, 1.1, 0.9, 1.05, 0.95];
    let advs = [2.0, 2.0, -2.0, -2.0, 1.0, -1.5, -0.7, 0.4];
    let batch: Vec<PolicySample> = obs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let action = i % d.t;
            let lp = policy.forward(o).unwrap().log_prob(action);
            PolicySample { observation: o, action, log_prob_old: lp - f64::ln(ratios[i]), advantage: advs[i] }
        })
        .collect();
    let (_, analytic) = ppo::policy_loss_and_grad(&policy, &batch, eps).unwrap();
    let loss_at = |p: &PolicyNet| ppo::policy_loss_and_grad(p, &batch, eps).unwrap().0;
    let mut coords: Vec<usize> = (0..analytic.len()).collect();
    coords.shuffle(&mut rng);
    let h = 1e-6;
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for &i in &coords {
        if analytic[i].abs() < 1e-6 {
            continue;
        }
        let mut plus = policy.clone();
        plus.network_mut().params_mut()[i] += h;
        let mut minus = policy.clone();
        minus.network_mut().params_mut()[i] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        worst = worst.max((fd - analytic[i]).abs() / analytic[i].abs().max(fd.abs()));
        checked += 1;
        if checked == 120 {
            break;
        }
    }
    Verdict::new(
        hand_err <= 1e-10 && checked >= 100 && worst <= 1e-4,
        format!("hand-derived error {hand_err:.1e}; {checked} coordinates, worst finite-difference rel error {worst:.1e}"),
    )
}

fn criterion_5() -> Verdict {
    let d = video_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let videos: Vec<VideoTensor> =
        (0..4).map(|_| VideoTensor::from_vec(d, (0..d.len()).map(|_| rng.gen::<f64>()).collect()).unwrap()).collect();
    let mut failures = Vec::new();
    for phi in [0.3, 0.6, 1.0] {
        let p = SpatialParams::with_phi(phi);
        let want = (phi * (d.w * d.h) as f64).ceil() as usize;
        for (i, v) in videos.iter().enumerate() {
            let m = saliency_mask(v, &p).unwrap();
            for t in 0..d.t {
                let pixels = m.frame_bits(t).chunks_exact(d.c).filter(|px| px.iter().all(|&b| b != 0)).count();
                if pixels != want || m.frame_ones(t) != want * d.c {
                    failures.push(format!("phi={phi} video {i} frame {t}: {pixels} != {want}"));
                }
            }
            let other = &videos[(i + 1) % videos.len()];
            let untargeted = init_spatial_mask(v, None, &p).unwrap();
            let targeted = init_spatial_mask(v, Some(other), &p).unwrap();
            if !untargeted.is_subset_of(&targeted) {
                failures.push(format!("phi={phi} video {i}: targeted mask misses untargeted pixels"));
            }
        }
    }
    Verdict::new(failures.is_empty(), if failures.is_empty() { "all frames exact, supersets hold".into() } else { failures.join("; ") })
}

/// Hand-built oracle for the MDP check: a frame counts as perturbed when it
/// differs from `x`; the goal is met iff every key frame is perturbed and at
/// least one frame is.
struct KeyFrameOracle {
    x: VideoTensor,
    key: Vec<usize>,
}

impl KeyFrameOracle {
    fn present(&self, v: &VideoTensor) -> BTreeSet<usize> {
        (0..v.dims().t).filter(|&t| v.frame(t) != self.x.frame(t)).collect()
    }

    fn prob(present: usize) -> f64 {
        0.5 + 0.1 * present as f64
    }
}

impl Oracle for KeyFrameOracle {
    fn input_dims(&self) -> Dims {
        self.x.dims()
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn query(&self, v: &VideoTensor) -> Result<OracleVerdict> {
        let p = self.present(v);
        let fooled = !p.is_empty() && self.key.iter().all(|k| p.contains(k));
        Ok(if fooled {
            OracleVerdict { label: Label(1), prob: Self::prob(p.len()) }
        } else {
            OracleVerdict { label: Label(0), prob: 0.9 }
        })
    }
}

#[derive(Default)]
struct MdpTally {
    states: usize,
    branches: BTreeSet<&'static str>,
    errors: Vec<String>,
}

fn explore(
    state: &MdpState,
    oracle: &Counted<&KeyFrameOracle>,
    key: &[usize],
    deleted: &[usize],
    phase: Phase,
    tally: &mut MdpTally,
) {
    let frames = 4;
    for a in 0..frames {
        let mut next = state.clone();
        let before = oracle.queries();
        let step = next.step(a, oracle).unwrap();
        let spent = oracle.queries() - before;
        tally.states += 1;

        let mut now: Vec<usize> = deleted.to_vec();
        let (reward, terminal, queries, branch) = if deleted.contains(&a) {
            (-1.0, true, 0, "duplicate")
        } else {
            now.push(a);
            let present: Vec<usize> = (0..frames).filter(|f| !now.contains(f)).collect();
            let fooled = !present.is_empty() && key.iter().all(|k| present.contains(k));
            match (fooled, phase) {
                (false, _) => (0.0, true, 1, "key-frame"),
                (true, Phase::Pretrain) => (1.0, now.len() == frames, 1, "success"),
                (true, Phase::Finetune) => (KeyFrameOracle::prob(present.len()), now.len() == frames, 1, "probability"),
            }
        };
        tally.branches.insert(branch);
        let ctx = format!("key {key:?} {phase:?} path {deleted:?} action {a}");
        if step.reward != reward || step.terminal != terminal || step.queries != queries || spent != queries {
            tally.errors.push(format!("{ctx}: got {step:?} ({spent} counted), want ({reward}, {terminal}, {queries})"));
        }
        if next.deleted() != now.as_slice() {
            tally.errors.push(format!("{ctx}: deleted {:?}, want {:?}", next.deleted(), now));
        }
        for f in 0..frames {
            if next.mask().is_frame_zero(f) != now.contains(&f) {
                tally.errors.push(format!("{ctx}: frame {f} mask state wrong"));
            }
        }
        if now.len() == frames && step.reward > 0.0 {
            tally.errors.push(format!("{ctx}: all frames deleted while still meeting the goal"));
        }
        if step.terminal {
            let m = next.episode_mask().unwrap();
            let kept: Vec<usize> = (0..frames).filter(|&f| !m.is_frame_zero(f)).collect();
            if kept.is_empty() {
                tally.errors.push(format!("{ctx}: episode mask is empty"));
            }
        } else {
            explore(&next, oracle, key, &now, phase, tally);
        }
    }
}

fn criterion_6() -> Verdict {
    let d = Dims::new(4, 2, 2, 1).unwrap();
    let x = VideoTensor::filled(d, 0.25);
    let x_hat = VideoTensor::filled(d, 0.75);
    let mask = Mask::ones(d);
    let mut tally = MdpTally::default();
    for bits in 0u32..16 {
        let key: Vec<usize> = (0..4).filter(|k| bits & (1 << k) != 0).collect();
        let raw = KeyFrameOracle { x: x.clone(), key: key.clone() };
        for (phase, goal) in [
            (Phase::Pretrain, Goal::Untargeted { true_label: Label(0) }),
            (Phase::Finetune, Goal::Targeted { target: Label(1) }),
        ] {
            let oracle = Counted::new(&raw);
            let state = MdpState::reset(&oracle, &x, &x_hat, &mask, goal, phase).unwrap();
            if oracle.queries() != 1 {
                tally.errors.push(format!("reset spent {} queries", oracle.queries()));
            }
            explore(&state, &oracle, &key, &[], phase, &mut tally);
        }
    }
    let all = ["duplicate", "key-frame", "success", "probability"];
    let missing: Vec<&str> = all.iter().copied().filter(|b| !tally.branches.contains(b)).collect();
    let pass = tally.errors.is_empty() && missing.is_empty();
    let detail = if pass {
        format!("{} transitions checked, all four reward branches seen", tally.states)
    } else {
        format!("missing branches {missing:?}; {}", tally.errors.iter().take(3).cloned().collect::<Vec<_>>().join("; "))
    };
    Verdict::new(pass, detail)
}

/// Two frames; choosing frame 1 pays 1, frame 0 ends the episode with 0.
struct Bandit {
    dims: Dims,
    steps: u64,
}

impl Environment for Bandit {
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

fn criterion_7() -> Verdict {
    let d = Dims::new(2, 4, 4, 1).unwrap();
    let arch = PolicyArch { conv_channels: [2, 2, 2, 2, 2], conv_strides: [1, 2, 1, 2, 1], fc_widths: [8, 8] };
    let mut probs = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = PolicyNet::new(d, &arch, &mut rng).unwrap();
        let mut value = ValueNet::new(d, &arch, &mut rng).unwrap();
        let cfg = PpoConfig { iterations: 200, actors: 4, timesteps: 16, epochs: 4, minibatch: 4, seed, ..PpoConfig::default() };
        ppo::train(|_| Ok(Bandit { dims: d, steps: 0 }), &mut policy, &mut value, &cfg).unwrap();
        probs.push(policy.forward(&VideoTensor::filled(d, 0.5)).unwrap().probs()[1]);
    }
    let ok = probs.iter().filter(|&&p| p > 0.95).count();
    let shown: Vec<String> = probs.iter().map(|p| format!("{p:.3}")).collect();
    Verdict::new(ok == 5, format!("{ok}/5 seeds above 0.95 after 200 iterations: [{}]", shown.join(", ")))
}

/// Shared end-to-end setup for criteria 8 to 11.
struct Pipeline {
    oracle_accuracy: f64,
    sparse: ExperimentOutcome,
    dense: ExperimentOutcome,
    sparse_elapsed: Duration,
    dense_elapsed: Duration,
    cfg: ExperimentConfig,
}

fn experiment_config(root: &Path, methods: Vec<Method>, out: &str) -> ExperimentConfig {
    ExperimentConfig {
        data_dir: root.join("data"),
        oracle: root.join("oracle.bin"),
        policy: Some(root.join("policy.bin")),
        value: None,
        out_dir: root.join(out),
        methods,
        mode: Mode::Untargeted,
        videos: 20,
        seed: 11,
        workers: 1,
        ..ExperimentConfig::default()
    }
}

fn build_pipeline(root: &Path) -> Pipeline {
    let start = Instant::now();
    let spec = DatasetSpec::default();
    write_dataset(&spec, &root.join("data")).unwrap();
    let train = pairs(&load_split(&root.join("data"), "train").unwrap());
    let test = pairs(&load_split(&root.join("data"), "test").unwrap());
    let (oracle, _) = train_conv_oracle(&train, &test, &OracleTrainConfig::default()).unwrap();
    let oracle_accuracy = accuracy(&oracle, &test).unwrap();
    oracle.save(root.join("oracle.bin")).unwrap();

    let cfg = experiment_config(root, vec![Method::SparseRl], "sparse");
    let pool = VideoPool::new(train, &cfg.attack.spatial).unwrap();
    let (policy, _, _) =
        pretrain_policy(&oracle, &pool, false, &PolicyArch::default(), &PpoConfig::default(), |_| {}).unwrap();
    policy.save(root.join("policy.bin")).unwrap();
    drop(pool);

    let sparse = run_experiment(&cfg).unwrap();
    let sparse_elapsed = start.elapsed();
    let t = Instant::now();
    let dense = run_experiment(&experiment_config(root, vec![Method::DenseSignopt], "dense")).unwrap();
    Pipeline { oracle_accuracy, sparse, dense, sparse_elapsed, dense_elapsed: t.elapsed(), cfg }
}

fn criterion_8(p: &Pipeline) -> Verdict {
    let run = p.sparse.run(Method::SparseRl).unwrap();
    let s = &run.summary;
    let max_q = run.records.iter().map(|r| r.queries).max().unwrap_or(0);
    let pass = p.oracle_accuracy >= 0.95
        && s.attacks == 20
        && s.fooling_rate == 100.0
        && max_q <= p.cfg.attack.budget
        && p.cfg.attack.map_bound == 3.0
        && within(p.sparse_elapsed, 30 * 60);
    Verdict::new(
        pass,
        format!(
            "oracle accuracy {:.2}%, {} videos, FR {:.0}%, max Q {max_q}, mean MAP {:.3}",
            100.0 * p.oracle_accuracy,
            s.attacks,
            s.fooling_rate,
            s.mean_map,
        ),
    )
    .took(p.sparse_elapsed)
}

fn criterion_9(p: &Pipeline) -> Verdict {
    let sparse = p.sparse.run(Method::SparseRl).unwrap();
    let dense = p.dense.run(Method::DenseSignopt).unwrap();
    let paired = sparse.records.iter().zip(&dense.records).all(|(a, b)| a.video == b.video && a.seed == b.seed);
    let reduction = 1.0 - sparse.median_queries / dense.median_queries;
    let s_sparse = sparse.summary.sparsity_pct / 100.0;
    let s_dense = dense.summary.sparsity_pct / 100.0;
    let total = p.sparse_elapsed + p.dense_elapsed;
    let pass = paired && reduction >= 0.2 && s_sparse > 0.3 && s_dense == 0.0 && within(total, 60 * 60);
    Verdict::new(
        pass,
        format!(
            "median Q {:.0} vs {:.0} ({:.1}% lower), S {:.3} vs {:.3}, dense FR {:.0}%",
            sparse.median_queries,
            dense.median_queries,
            100.0 * reduction,
            s_sparse,
            s_dense,
            dense.summary.fooling_rate,
        ),
    )
    .took(total)
}

fn criterion_10(p: &Pipeline, root: &Path) -> Verdict {
    let oracle = sparsevid::oracle::ConvOracle::load(root.join("oracle.bin")).unwrap();
    let mut checked = 0;
    let mut problems = Vec::new();
    for outcome in [&p.sparse, &p.dense] {
        for run in &outcome.runs {
            for ((res, item), rec) in run.results.iter().zip(&outcome.videos).zip(&run.records) {
                if !res.success {
                    continue;
                }
                checked += 1;
                let diff = res.x_adv.sub(&item.video).unwrap();
                let leaks = diff.as_slice().iter().zip(res.mask.bits()).filter(|(v, &m)| m == 0 && **v != 0.0).count();
                if leaks > 0 {
                    problems.push(format!("{} {}: {leaks} off-mask coordinates", run.method.name(), rec.video));
                }
                if !res.goal.is_met(oracle.query(&res.x_adv).unwrap().label) {
                    problems.push(format!("{} {}: fresh query does not confirm", run.method.name(), rec.video));
                }
            }
        }
    }
    Verdict::new(
        problems.is_empty() && checked > 0,
        if problems.is_empty() { format!("{checked} successful attacks verified") } else { problems.join("; ") },
    )
}

fn criterion_11(p: &Pipeline, root: &Path) -> Verdict {
    let again = experiment_config(root, vec![Method::SparseRl], "sparse-rerun");
    run_experiment(&again).unwrap();
    let mut differing = Vec::new();
    for name in [SUMMARY_CSV, PAIRED_CSV] {
        let a = fs::read(p.cfg.out_dir.join(name)).unwrap();
        let b = fs::read(again.out_dir.join(name)).unwrap();
        if a != b {
            differing.push(name);
        }
    }
    Verdict::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{SUMMARY_CSV} and {PAIRED_CSV} byte-identical on rerun")
        } else {
            format!("differs: {differing:?}")
        },
    )
}

fn main() {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(u32, Verdict)> = Vec::new();
    let mut report = |n: u32, limit: &str, f: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        let v = f();
        let secs = v.took.unwrap_or_else(|| t.elapsed()).as_secs_f64();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2}: {tag} ({secs:.1}s, limit {limit}) {}", v.detail);
        results.push((n, v));
    };

    let unit: [(u32, &str, fn() -> Verdict); 7] = [
        (1, "60s", criterion_1),
        (2, "60s", criterion_2),
        (3, "10s", criterion_3),
        (4, "60s", criterion_4),
        (5, "10s", criterion_5),
        (6, "10s", criterion_6),
        (7, "300s", criterion_7),
    ];
    for (n, limit, f) in unit {
        if run(n) {
            report(n, limit, &|| timed(limit, f));
        }
    }

    if (8..=11).any(run) {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let pipeline = build_pipeline(root);
        report(8, "1800s", &|| criterion_8(&pipeline));
        report(9, "3600s", &|| criterion_9(&pipeline));
        report(10, "shared with 8-9", &|| criterion_10(&pipeline, root));
        report(11, "one rerun", &|| criterion_11(&pipeline, root));
    }

    let failed: Vec<u32> = results.iter().filter(|(_, v)| !v.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

/// Runs `f` and fails the verdict if it overran its limit.
fn timed(limit: &str, f: fn() -> Verdict) -> Verdict {
    let secs: u64 = limit.trim_end_matches('s').parse().unwrap();
    let t = Instant::now();
    let mut v = f();
    if !within(t.elapsed(), secs) {
        v.pass = false;
        v.detail.push_str(&format!("; exceeded {secs}s"));
    }
    v
}
