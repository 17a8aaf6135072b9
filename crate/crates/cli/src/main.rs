use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sparsevid::harness::config::{ExperimentConfig, Method, Mode, OUT_ENV};
use sparsevid::harness::dataset::{self, load_split, pairs, DatasetSpec};
use sparsevid::harness::experiment::{phi_grid_search, pretrain_policy, render_report};
use sparsevid::mdp::VideoPool;
use sparsevid::oracle::{train_conv_oracle, ConvOracle, Goal, Oracle, OracleTrainConfig};
use sparsevid::policy::{PolicyArch, PolicyNet, ValueNet};
use sparsevid::ppo::{IterationStats, PpoConfig};
use sparsevid::saliency::{saliency_mask, SpatialParams};
use sparsevid::signopt::{attack, finetune_policy, AttackConfig, FineTune, MaskSource, Selection};
use sparsevid::{Label, VideoTensor};

#[derive(Parser)]
#[command(name = "sparsevid", version, about = "Sparse black-box adversarial attacks on video classifiers")]
struct Cli {
    /// Default root for outputs.
    #[arg(long, env = OUT_ENV, default_value = "out", global = true)]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic moving-shape dataset.
    GenData(GenData),
    /// Train the conv threat model.
    TrainOracle(TrainOracle),
    /// Pretrain frame-selection policy and value networks.
    PretrainPolicy(Pretrain),
    /// Fine-tune a pretrained policy for one clean video and target class.
    FinetunePolicy(Finetune),
    /// Attack one video.
    Attack(AttackCmd),
    /// Run methods over a test set and write summary, timing and paired CSVs.
    RunExperiment(RunExperiment),
    /// Spatial-only attacks over a grid of salient-area ratios.
    PhiGrid(PhiGrid),
    /// Print the results table of an experiment directory.
    Report(Report),
    /// Saliency utilities.
    Saliency {
        #[command(subcommand)]
        command: SaliencyCmd,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 250)]
    per_class: usize,
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

#[derive(Args)]
struct TrainOracle {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    learning_rate: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.8)]
    min_accuracy: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Clone)]
struct PpoArgs {
    #[arg(long, default_value_t = 30)]
    iterations: usize,
    #[arg(long, default_value_t = 4)]
    actors: usize,
    #[arg(long, default_value_t = 16)]
    timesteps: usize,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    minibatch: usize,
    #[arg(long, default_value_t = 3e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.2)]
    clip_eps: f64,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 0.95)]
    lambda: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize_advantages: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl PpoArgs {
    fn config(&self) -> PpoConfig {
        PpoConfig {
            clip_eps: self.clip_eps,
            gamma: self.gamma,
            lambda: self.lambda,
            iterations: self.iterations,
            actors: self.actors,
            timesteps: self.timesteps,
            epochs: self.epochs,
            minibatch: self.minibatch,
            learning_rate: self.learning_rate,
            normalize_advantages: self.normalize_advantages,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Untargeted,
    Targeted,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Untargeted => Mode::Untargeted,
            ModeArg::Targeted => Mode::Targeted,
        }
    }
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    policy_ckpt: Option<PathBuf>,
    #[arg(long)]
    value_ckpt: Option<PathBuf>,
    /// Per-iteration statistics CSV.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "untargeted")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.6)]
    phi: f64,
    #[command(flatten)]
    ppo: PpoArgs,
}

#[derive(Args)]
struct Finetune {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    target_class: usize,
    #[arg(long)]
    policy_ckpt: PathBuf,
    #[arg(long)]
    value_ckpt: PathBuf,
    #[arg(long)]
    out_policy: PathBuf,
    #[arg(long)]
    out_value: Option<PathBuf>,
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value_t = 0.6)]
    phi: f64,
    #[command(flatten)]
    ppo: PpoArgs,
}

#[derive(Args)]
struct AttackCmd {
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Dataset whose training split supplies initialization candidates.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    video: PathBuf,
    /// Ground-truth label; defaults to the oracle's prediction (not charged).
    #[arg(long)]
    label: Option<usize>,
    #[arg(long, value_enum, default_value = "untargeted")]
    mode: ModeArg,
    #[arg(long)]
    target_class: Option<usize>,
    #[arg(long, default_value = "sparse-rl")]
    method: String,
    #[arg(long)]
    policy_ckpt: Option<PathBuf>,
    #[arg(long)]
    value_ckpt: Option<PathBuf>,
    #[arg(long)]
    map_bound: Option<f64>,
    #[arg(long, default_value_t = 100)]
    candidates: usize,
    #[arg(long, default_value_t = 5000)]
    iterations: usize,
    #[arg(long, default_value_t = 20)]
    grad_samples: usize,
    #[arg(long, default_value_t = 50_000)]
    budget: u64,
    #[arg(long, default_value_t = 0.2)]
    step_size: f64,
    /// Probe radius for sign estimates.
    #[arg(long, default_value_t = 1e-3)]
    smoothing: f64,
    /// Relative bisection tolerance.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 0.6)]
    phi: f64,
    /// Pick the initial candidate by smallest boundary distance instead of smallest MAP.
    #[arg(long)]
    min_g: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Fine-tuning iterations for targeted sparse-rl attacks.
    #[arg(long, default_value_t = 5)]
    ft_iterations: usize,
}

#[derive(Args)]
struct RunExperiment {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set videos=10.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PhiGrid {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    values: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SaliencyCmd {
    /// Write the saliency mask of a video as a 0/1 `.vid` tensor.
    Dump {
        #[arg(long)]
        video: PathBuf,
        #[arg(long, default_value_t = 0.6)]
        phi: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_stats(path: Option<&Path>, stats: &[IterationStats]) -> Result<()> {
    if let Some(p) = path {
        let mut s = format!("{}\n", IterationStats::CSV_HEADER);
        for st in stats {
            s.push_str(&st.csv_row());
            s.push('\n');
        }
        fs::write(p, s).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn load_pool(data: &Path, phi: f64) -> Result<VideoPool> {
    let train = load_split(data, "train").with_context(|| format!("loading {}", data.display()))?;
    Ok(VideoPool::new(pairs(&train), &SpatialParams::with_phi(phi))?)
}

fn load_oracle(path: &Path) -> Result<ConvOracle> {
    ConvOracle::load(path).with_context(|| format!("loading oracle {}", path.display()))
}

fn experiment_config(root: &Path, config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig {
            data_dir: root.join("data"),
            oracle: root.join("oracle.bin"),
            policy: Some(root.join("policy.bin")),
            value: Some(root.join("value.bin")),
            out_dir: root.join("experiment"),
            ..ExperimentConfig::default()
        },
    };
    cfg.apply_overrides(overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = cli.out_root;
    match cli.command {
        Command::GenData(a) => {
            let spec = DatasetSpec { classes: a.classes, per_class: a.per_class, noise: a.noise, seed: a.seed, ..Default::default() };
            let out = a.out.unwrap_or_else(|| root.join("data"));
            let entries = dataset::write_dataset(&spec, &out)?;
            let train = entries.iter().filter(|e| e.split == "train").count();
            println!("wrote {} train and {} test videos to {}", train, entries.len() - train, out.display());
        }
        Command::TrainOracle(a) => {
            let data = a.data.unwrap_or_else(|| root.join("data"));
            let train = load_split(&data, "train")?;
            let test = load_split(&data, "test")?;
            let cfg = OracleTrainConfig {
                epochs: a.epochs,
                seed: a.seed,
                learning_rate: a.learning_rate,
                batch_size: a.batch_size,
                min_accuracy: a.min_accuracy,
                ..Default::default()
            };
            let (oracle, report) = train_conv_oracle(&pairs(&train), &pairs(&test), &cfg)?;
            let out = a.out.unwrap_or_else(|| root.join("oracle.bin"));
            oracle.save(&out)?;
            println!("test accuracy {:.4}; saved {}", report.holdout_accuracy, out.display());
        }
        Command::PretrainPolicy(a) => {
            let data = a.data.unwrap_or_else(|| root.join("data"));
            let oracle = load_oracle(&a.oracle.unwrap_or_else(|| root.join("oracle.bin")))?;
            let pool = load_pool(&data, a.phi)?;
            let cfg = a.ppo.config();
            let targeted = matches!(a.mode, ModeArg::Targeted);
            let result = pretrain_policy(&oracle, &pool, targeted, &PolicyArch::default(), &cfg, |s| {
                log::info!("iteration {}: return {:.3}, length {:.2}, queries {}", s.iteration, s.mean_return, s.mean_ep_len, s.queries_used)
            });
            let (policy, value, stats) = result?;
            let pp = a.policy_ckpt.unwrap_or_else(|| root.join("policy.bin"));
            let vp = a.value_ckpt.unwrap_or_else(|| root.join("value.bin"));
            policy.save(&pp)?;
            value.save(&vp)?;
            write_stats(a.stats.as_deref(), &stats)?;
            println!("saved {} and {}", pp.display(), vp.display());
        }
        Command::FinetunePolicy(a) => {
            let data = a.data.unwrap_or_else(|| root.join("data"));
            let oracle = load_oracle(&a.oracle.unwrap_or_else(|| root.join("oracle.bin")))?;
            let pool = load_pool(&data, a.phi)?;
            let x = VideoTensor::read_vid(&a.video)?;
            let policy = PolicyNet::load(&a.policy_ckpt)?;
            let value = ValueNet::load(&a.value_ckpt)?;
            let x_mask = saliency_mask(&x, &SpatialParams::with_phi(a.phi))?;
            let (mut tuned, mut tuned_value, stats) =
                finetune_policy(&oracle, &pool, &x, &x_mask, Label(a.target_class), &policy, &value, &a.ppo.config())?;
            tuned.network_mut().round_to_f32();
            tuned.save(&a.out_policy)?;
            if let Some(p) = &a.out_value {
                tuned_value.network_mut().round_to_f32();
                tuned_value.save(p)?;
            }
            write_stats(a.stats.as_deref(), &stats)?;
            println!("saved {}", a.out_policy.display());
        }
        Command::Attack(a) => run_attack(&root, a)?,
        Command::RunExperiment(a) => {
            let cfg = experiment_config(&root, a.config.as_deref(), &a.overrides, a.seed)?;
            sparsevid::harness::run_experiment(&cfg)?;
            print!("{}", render_report(&cfg.out_dir)?);
        }
        Command::PhiGrid(a) => {
            let cfg = experiment_config(&root, a.config.as_deref(), &a.overrides, a.seed)?;
            println!("phi     FR(%)   MAP      Q       S");
            for r in phi_grid_search(&a.values, &cfg)? {
                println!("{:<6.2} {:>6.2} {:>7.3} {:>8.1} {:>7.3}", r.phi, r.fooling_rate, r.mean_map, r.mean_queries, r.mean_sparsity);
            }
        }
        Command::Report(a) => print!("{}", render_report(&a.dir.unwrap_or_else(|| root.join("experiment")))?),
        Command::Saliency { command: SaliencyCmd::Dump { video, phi, out } } => {
            let v = VideoTensor::read_vid(&video)?;
            let m = saliency_mask(&v, &SpatialParams::with_phi(phi))?;
            m.to_tensor().write_vid(&out)?;
            println!("{} of {} entries salient; wrote {}", m.count_ones(), m.bits().len(), out.display());
        }
    }
    Ok(())
}

fn run_attack(root: &Path, a: AttackCmd) -> Result<()> {
    let oracle = load_oracle(&a.oracle.unwrap_or_else(|| root.join("oracle.bin")))?;
    let data = a.data.unwrap_or_else(|| root.join("data"));
    let pool = load_pool(&data, a.phi)?;
    let x = VideoTensor::read_vid(&a.video)?;
    let label = match a.label {
        Some(l) => Label(l),
        None => oracle.query(&x)?.label,
    };
    let mode: Mode = a.mode.into();
    let goal = match mode {
        Mode::Untargeted => Goal::Untargeted { true_label: label },
        Mode::Targeted => match a.target_class {
            Some(t) if t != label.0 => Goal::Targeted { target: Label(t) },
            Some(_) => bail!("target class equals the true label"),
            None => bail!("--target-class is required for targeted attacks"),
        },
    };
    let method: Method = a.method.parse()?;
    let mut cfg = AttackConfig {
        candidates: a.candidates,
        iterations: a.iterations,
        grad_samples: a.grad_samples,
        budget: a.budget,
        step_size: a.step_size,
        smoothing: a.smoothing,
        tolerance: a.tolerance,
        map_bound: a.map_bound.unwrap_or(if goal.is_targeted() { 9.0 } else { 3.0 }),
        selection: if a.min_g { Selection::MinG } else { Selection::MinMap },
        ..AttackConfig::default()
    };
    cfg.spatial.phi = a.phi;
    let policy = match (method, &a.policy_ckpt) {
        (Method::SparseRl, Some(p)) => Some(PolicyNet::load(p)?),
        (Method::SparseRl, None) => bail!("--policy-ckpt is required for sparse-rl"),
        _ => None,
    };
    let value = match (&policy, goal.is_targeted(), &a.value_ckpt) {
        (Some(_), true, Some(p)) if a.ft_iterations > 0 => Some(ValueNet::load(p)?),
        (Some(_), true, None) if a.ft_iterations > 0 => bail!("--value-ckpt is required to fine-tune a targeted attack"),
        _ => None,
    };
    let ft_cfg = PpoConfig {
        iterations: a.ft_iterations,
        actors: 2,
        timesteps: 8,
        minibatch: 8,
        epochs: 2,
        seed: a.seed,
        ..PpoConfig::default()
    };
    let source = match method {
        Method::DenseSignopt => MaskSource::Dense,
        Method::SpatialOnly => MaskSource::Spatial,
        Method::SparseRl => MaskSource::Policy {
            policy: policy.as_ref().expect("loaded above"),
            finetune: value.as_ref().map(|v| FineTune { value: v, config: ft_cfg }),
        },
    };
    let result = attack(&oracle, &x, goal, &pool, source, &cfg, a.seed)?;
    let report = serde_json::json!({
        "video": a.video.display().to_string(),
        "label": label.0,
        "method": method.name(),
        "seed": a.seed,
        "result": result,
    });
    fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
    let pert = a.out.with_extension("pert.vid");
    result.perturbation(&x)?.write_vid(&pert)?;
    println!(
        "success={} queries={} MAP={:.3} S={:.3}; wrote {} and {}",
        result.success,
        result.queries,
        result.map,
        result.sparsity,
        a.out.display(),
        pert.display()
    );
    Ok(())
}
