//! Attack runs over a test set and their CSV/JSON reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, Method, Mode, RESOLVED_CONFIG};
use super::dataset::{load_split, Item};
use crate::error::{invalid, Error, Result};
use crate::mdp::{EpisodeSource, MdpEnvironment, VideoPool};
use crate::metrics::{aggregate, MetricsRecord, Summary};
use crate::oracle::{ConvOracle, Goal, Oracle};
use crate::policy::{PolicyArch, PolicyNet, ValueNet};
use crate::ppo::{self, IterationStats, PpoConfig};
use crate::saliency::SpatialParams;
use crate::signopt::{attack, AttackConfig, AttackResult, FineTune, MaskSource};
use crate::video::Label;

pub const SUMMARY_CSV: &str = "summary.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const PAIRED_CSV: &str = "paired.csv";
pub const PHI_GRID_CSV: &str = "phi_grid.csv";

/// Seed of the attack on the `index`-th selected video; shared by every method.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Goal for a video under `mode`; targeted attacks aim at the next class.
pub fn goal_for(mode: Mode, label: Label, classes: usize) -> Goal {
    match mode {
        Mode::Untargeted => Goal::Untargeted { true_label: label },
        Mode::Targeted => Goal::Targeted { target: Label((label.0 + 1) % classes) },
    }
}

/// Correctly classified items, shuffled by `seed`, truncated to `count` (0 keeps all).
/// These checks are not charged to any attack.
pub fn select_videos(oracle: &dyn Oracle, items: Vec<Item>, count: usize, seed: u64) -> Result<Vec<Item>> {
    let mut correct = Vec::with_capacity(items.len());
    for it in items {
        if oracle.query(&it.video)?.label == it.label {
            correct.push(it);
        }
    }
    correct.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if count > 0 {
        correct.truncate(count);
    }
    Ok(correct)
}

/// Per-attack outcome; everything but `wall_seconds` is deterministic.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub video: String,
    pub label: Label,
    pub goal: Goal,
    pub method: Method,
    pub seed: u64,
    pub success: bool,
    pub adversarial: bool,
    pub queries: u64,
    pub finetune_queries: u64,
    pub iterations: usize,
    pub map: f64,
    pub sparsity: f64,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str =
        "video,label,mode,target,method,seed,success,queries,finetune_queries,iterations,map,sparsity";

    pub fn csv_row(&self) -> String {
        let target = match self.goal {
            Goal::Targeted { target } => target.0.to_string(),
            Goal::Untargeted { .. } => String::new(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6},{:.6}",
            self.video,
            self.label.0,
            self.goal.mode_name(),
            target,
            self.method.name(),
            self.seed,
            self.success,
            self.queries,
            self.finetune_queries,
            self.iterations,
            self.map,
            self.sparsity
        )
    }

    pub fn metrics(&self) -> MetricsRecord {
        MetricsRecord {
            fooled: self.success,
            queries: self.queries,
            map: self.map,
            sparsity: self.sparsity,
            wall_seconds: self.wall_seconds,
        }
    }
}

/// Per-attack report file contents.
#[derive(Serialize)]
struct AttackReport<'a> {
    record: &'a RunRecord,
    result: &'a AttackResult,
}

/// Results of one method over the selected videos, plus per-video attack outputs.
pub struct MethodRun {
    pub method: Method,
    pub records: Vec<RunRecord>,
    pub results: Vec<AttackResult>,
    pub summary: Summary,
    pub median_queries: f64,
}

pub struct ExperimentOutcome {
    pub videos: Vec<Item>,
    pub runs: Vec<MethodRun>,
}

impl ExperimentOutcome {
    pub fn run(&self, method: Method) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.method == method)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Loaded inputs shared by every method of an experiment.
pub struct Inputs {
    pub oracle: ConvOracle,
    pub pool: VideoPool,
    pub policy: Option<PolicyNet>,
    pub value: Option<ValueNet>,
    pub classes: usize,
}

impl Inputs {
    /// Loads the oracle, the candidate pool (training split) and any needed
    /// checkpoints, failing before any attack runs if one is missing.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let oracle = ConvOracle::load(&cfg.oracle)
            .map_err(|e| invalid(format!("cannot load oracle {}: {e}", cfg.oracle.display())))?;
        let needs_policy = cfg.methods.contains(&Method::SparseRl);
        let policy = match (&cfg.policy, needs_policy) {
            (Some(p), true) => Some(
                PolicyNet::load(p).map_err(|e| invalid(format!("cannot load policy {}: {e}", p.display())))?,
            ),
            (None, true) => return Err(invalid("method sparse-rl needs a policy checkpoint")),
            _ => None,
        };
        let needs_value = needs_policy && cfg.mode == Mode::Targeted && cfg.finetune.iterations > 0;
        let value = match (&cfg.value, needs_value) {
            (Some(p), true) => Some(
                ValueNet::load(p).map_err(|e| invalid(format!("cannot load value network {}: {e}", p.display())))?,
            ),
            (None, true) => return Err(invalid("targeted sparse-rl fine-tuning needs a value checkpoint")),
            _ => None,
        };
        let train = load_split(&cfg.data_dir, "train")?;
        let pool = VideoPool::new(super::dataset::pairs(&train), &cfg.attack.spatial)?;
        let classes = oracle.num_classes();
        Ok(Self { oracle, pool, policy, value, classes })
    }
}

/// Runs `method` on every video. Attacks run in a pool of `workers` threads;
/// results come back in video order.
pub fn run_method(
    inputs: &Inputs,
    videos: &[Item],
    method: Method,
    mode: Mode,
    attack_cfg: &AttackConfig,
    finetune: &PpoConfig,
    seed: u64,
    workers: usize,
) -> Result<(Vec<RunRecord>, Vec<AttackResult>)> {
    let source = match method {
        Method::DenseSignopt => MaskSource::Dense,
        Method::SpatialOnly => MaskSource::Spatial,
        Method::SparseRl => MaskSource::Policy {
            policy: inputs.policy.as_ref().ok_or_else(|| invalid("sparse-rl needs a policy"))?,
            finetune: match (mode, &inputs.value) {
                (Mode::Targeted, Some(value)) if finetune.iterations > 0 => Some(FineTune { value, config: *finetune }),
                _ => None,
            },
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid(format!("cannot build worker pool: {e}")))?;
    let outcomes: Vec<(RunRecord, AttackResult)> = pool.install(|| {
        videos
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let seed = video_seed(seed, i);
                let goal = goal_for(mode, item.label, inputs.classes);
                let start = Instant::now();
                let result = attack(&inputs.oracle, &item.video, goal, &inputs.pool, source, attack_cfg, seed)?;
                let wall_seconds = start.elapsed().as_secs_f64();
                log::info!(
                    "{} {}: success={} queries={} map={:.3}",
                    method.name(),
                    item.name,
                    result.success,
                    result.queries,
                    result.map
                );
                let record = RunRecord {
                    video: item.name.clone(),
                    label: item.label,
                    goal,
                    method,
                    seed,
                    success: result.success,
                    adversarial: result.adversarial,
                    queries: result.queries,
                    finetune_queries: result.finetune_queries,
                    iterations: result.iterations,
                    map: result.map,
                    sparsity: result.sparsity,
                    wall_seconds,
                };
                Ok((record, result))
            })
            .collect::<Result<_>>()
    })?;
    Ok(outcomes.into_iter().unzip())
}

fn file_stem(name: &str) -> String {
    name.trim_end_matches(".vid").replace(['/', '\\'], "_")
}

/// Runs every configured method over the selected test videos and writes
/// `summary.csv`, `timing.csv`, `paired.csv`, the resolved config, and per
/// attack a JSON report and a `.vid` perturbation under `attacks/<method>/`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let inputs = Inputs::load(cfg)?;
    let test = load_split(&cfg.data_dir, "test")?;
    let videos = select_videos(&inputs.oracle, test, cfg.videos, cfg.seed)?;
    if videos.is_empty() {
        return Err(invalid("no correctly classified test videos to attack"));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(RESOLVED_CONFIG), cfg.to_kv())?;

    let mut runs = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let (records, results) =
            run_method(&inputs, &videos, method, cfg.mode, &cfg.attack, &cfg.finetune, cfg.seed, cfg.workers)?;
        let dir = cfg.out_dir.join("attacks").join(method.name());
        fs::create_dir_all(&dir)?;
        for ((rec, res), item) in records.iter().zip(&results).zip(&videos) {
            let stem = file_stem(&item.name);
            let report = AttackReport { record: rec, result: res };
            fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&report)?)?;
            res.perturbation(&item.video)?.write_vid(dir.join(format!("{stem}.pert.vid")))?;
        }
        let metrics: Vec<MetricsRecord> = records.iter().map(RunRecord::metrics).collect();
        let summary = aggregate(&metrics)?;
        let mut q: Vec<f64> = records.iter().map(|r| r.queries as f64).collect();
        let median_queries = median(&mut q);
        runs.push(MethodRun { method, records, results, summary, median_queries });
    }
    write_reports(&cfg.out_dir, cfg.mode, &runs)?;
    Ok(ExperimentOutcome { videos, runs })
}

fn write_reports(dir: &Path, mode: Mode, runs: &[MethodRun]) -> Result<()> {
    let mut summary = String::from("method,mode,attacks,fr,q_mean,q_median,map,s_pct\n");
    let mut timing = String::from("method,mode,t_mean_s\n");
    let mut paired = format!("{}\n", RunRecord::CSV_HEADER);
    for r in runs {
        let s = &r.summary;
        let _ = writeln!(
            summary,
            "{},{},{},{:.2},{:.1},{:.1},{:.4},{:.2}",
            r.method.name(),
            mode.name(),
            s.attacks,
            s.fooling_rate,
            s.mean_queries,
            r.median_queries,
            s.mean_map,
            s.sparsity_pct
        );
        let _ = writeln!(timing, "{},{},{:.3}", r.method.name(), mode.name(), s.mean_seconds);
        for rec in &r.records {
            let _ = writeln!(paired, "{}", rec.csv_row());
        }
    }
    fs::write(dir.join(SUMMARY_CSV), summary)?;
    fs::write(dir.join(TIMING_CSV), timing)?;
    fs::write(dir.join(PAIRED_CSV), paired)?;
    Ok(())
}

/// Joins `summary.csv` and `timing.csv` into a fixed-width table.
pub fn render_report(dir: &Path) -> Result<String> {
    let read = |name: &str| -> Result<Vec<Vec<String>>> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        Ok(text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect())
    };
    let summary = read(SUMMARY_CSV)?;
    let timing = read(TIMING_CSV).unwrap_or_default();
    let mut out = format!(
        "{:<14} {:<10} {:>7} {:>7} {:>10} {:>10} {:>8} {:>7} {:>9}\n",
        "method", "mode", "attacks", "FR(%)", "Q(mean)", "Q(median)", "MAP", "S(%)", "t(s)"
    );
    for row in &summary {
        if row.len() != 8 {
            return Err(Error::Format(format!("summary row has {} fields", row.len())));
        }
        let t = timing
            .iter()
            .find(|t| t.len() == 3 && t[0] == row[0] && t[1] == row[1])
            .map_or("-".to_string(), |t| t[2].clone());
        let _ = writeln!(
            out,
            "{:<14} {:<10} {:>7} {:>7} {:>10} {:>10} {:>8} {:>7} {:>9}",
            row[0], row[1], row[2], row[3], row[4], row[5], row[6], row[7], t
        );
    }
    Ok(out)
}

/// One row of the phi trade-off table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiRow {
    pub phi: f64,
    pub fooling_rate: f64,
    pub mean_map: f64,
    pub mean_queries: f64,
    pub mean_sparsity: f64,
}

/// Spatial-only attacks on the validation videos for every `phi` in `values`.
/// Writes `phi_grid.csv` into the output directory.
pub fn phi_grid_search(values: &[f64], cfg: &ExperimentConfig) -> Result<Vec<PhiRow>> {
    if values.is_empty() {
        return Err(invalid("empty phi grid"));
    }
    for &phi in values {
        SpatialParams::with_phi(phi).validate()?;
    }
    let mut base = cfg.clone();
    base.methods = vec![Method::SpatialOnly];
    base.validate()?;
    let inputs = Inputs::load(&base)?;
    let test = load_split(&base.data_dir, "test")?;
    let videos = select_videos(&inputs.oracle, test, base.videos, base.seed)?;
    let mut rows = Vec::with_capacity(values.len());
    for &phi in values {
        let mut attack_cfg = base.attack.clone();
        attack_cfg.spatial.phi = phi;
        let (records, _) =
            run_method(&inputs, &videos, Method::SpatialOnly, base.mode, &attack_cfg, &base.finetune, base.seed, base.workers)?;
        let s = aggregate(&records.iter().map(RunRecord::metrics).collect::<Vec<_>>())?;
        rows.push(PhiRow {
            phi,
            fooling_rate: s.fooling_rate,
            mean_map: s.mean_map,
            mean_queries: s.mean_queries,
            mean_sparsity: s.sparsity_pct / 100.0,
        });
    }
    let mut csv = String::from("phi,fr,map,q_mean,s\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{:.2},{:.4},{:.1},{:.4}", r.phi, r.fooling_rate, r.mean_map, r.mean_queries, r.mean_sparsity);
    }
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join(PHI_GRID_CSV), csv)?;
    Ok(rows)
}

/// Class-agnostic pretraining of fresh policy and value networks on random
/// `(x, x_hat)` pairs from `pool`.
pub fn pretrain_policy(
    oracle: &dyn Oracle,
    pool: &VideoPool,
    targeted: bool,
    arch: &PolicyArch,
    cfg: &PpoConfig,
    on_iteration: impl FnMut(&IterationStats),
) -> Result<(PolicyNet, ValueNet, Vec<IterationStats>)> {
    let dims = pool.video(0).dims();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = PolicyNet::new(dims, arch, &mut rng)?;
    let mut value = ValueNet::new(dims, arch, &mut rng)?;
    let factory = |_| MdpEnvironment::new(oracle, pool, EpisodeSource::Pretrain { targeted });
    let stats = match ppo::train_with(factory, &mut policy, &mut value, cfg, on_iteration) {
        Ok(s) => s,
        Err(e) => {
            policy.network_mut().round_to_f32();
            value.network_mut().round_to_f32();
            return Err(e);
        }
    };
    policy.network_mut().round_to_f32();
    value.network_mut().round_to_f32();
    Ok((policy, value, stats))
}
