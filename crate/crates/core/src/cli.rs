//! Operator entry points: dataset generation, training, evaluation, and
//! trace inspection.
//!
//! Every run is driven by a flat `key = value` config file plus command-line
//! flags that mirror every key; flags win. The effective configuration is
//! echoed into the output directory as `config_used.toml` so each experiment
//! directory is self-describing. All commands are deterministic given the
//! config and seed.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate, load_voc_annotations, save_dataset, DatasetManifest, PlacementMode, SyntheticSpec,
};
use crate::environment::{EnvConfig, EpisodeStatus, EpisodeStep, EpisodeTrace, ExtractorKind, Scene};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_agent, histogram_to_csv, oracle_upper_bound, random_baseline, steps_histogram,
};
use crate::geometry::{enumerate_nodes, iou, HierarchyScheme};
use crate::pnm;
use crate::qlearn::QNetwork;
use crate::trainer::{greedy_action, train, TrainConfig};

/// Every config key, all optional; the resolved config fills in defaults.
/// The same struct carries file contents and flag overrides.
#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ConfigKeys {
    /// Master seed for the whole run
    #[arg(long)]
    pub seed: Option<u64>,
    /// Load scenes from this dataset manifest
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Use the synthetic generator as the data source
    #[arg(long)]
    pub synthetic: Option<bool>,
    /// Ground-truth class to keep when loading annotations
    #[arg(long)]
    pub label: Option<String>,
    /// Number of synthetic scenes
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Synthetic image side in pixels
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Minimum objects per synthetic scene
    #[arg(long)]
    pub min_objects: Option<usize>,
    /// Maximum objects per synthetic scene
    #[arg(long)]
    pub max_objects: Option<usize>,
    /// Minimum object side as a fraction of the image side
    #[arg(long)]
    pub min_size: Option<f64>,
    /// Maximum object side as a fraction of the image side
    #[arg(long)]
    pub max_size: Option<f64>,
    /// Object placement: uniform | hierarchy-aligned
    #[arg(long)]
    pub placement: Option<String>,
    /// Smallest hierarchy depth for aligned placement
    #[arg(long)]
    pub min_depth: Option<usize>,
    /// Largest hierarchy depth for aligned placement
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Background noise amplitude in [0, 1)
    #[arg(long)]
    pub noise: Option<f64>,
    /// Foreground intensity in [0, 1]
    #[arg(long)]
    pub foreground: Option<f64>,
    /// Hierarchy scheme: overlapped | non-overlapped
    #[arg(long)]
    pub scheme: Option<String>,
    /// Feature extractor: zoom | crop
    #[arg(long)]
    pub extractor: Option<String>,
    /// Descriptor grid side G
    #[arg(long)]
    pub grid: Option<usize>,
    /// Shallow pooling stride
    #[arg(long)]
    pub stride_shallow: Option<usize>,
    /// Deep pooling stride
    #[arg(long)]
    pub stride_deep: Option<usize>,
    /// Detection IoU threshold tau
    #[arg(long)]
    pub tau: Option<f64>,
    /// Trigger reward magnitude eta
    #[arg(long)]
    pub eta: Option<f64>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Discount factor gamma
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Initial exploration rate
    #[arg(long)]
    pub epsilon_start: Option<f64>,
    /// Exploration floor
    #[arg(long)]
    pub epsilon_floor: Option<f64>,
    /// Per-epoch exploration decrement
    #[arg(long)]
    pub epsilon_decrement: Option<f64>,
    /// Adam learning rate
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Replay memory capacity
    #[arg(long)]
    pub replay_capacity: Option<usize>,
    /// Minibatch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Maximum decisions per episode
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Training-only forced trigger threshold
    #[arg(long)]
    pub forced_trigger_iou: Option<f64>,
    /// Hidden layer width
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Dropout keep probability
    #[arg(long)]
    pub dropout_keep: Option<f64>,
    /// Hierarchy depth for the coverage report
    #[arg(long)]
    pub coverage_depth: Option<usize>,
}

macro_rules! merge_fields {
    ($base:ident, $over:ident; $($field:ident),* $(,)?) => {
        $(if $over.$field.is_some() { $base.$field = $over.$field.clone(); })*
    };
}

impl ConfigKeys {
    /// Field-wise merge; `overrides` wins wherever set.
    pub fn merged(mut self, overrides: &ConfigKeys) -> ConfigKeys {
        merge_fields!(self, overrides;
            seed, manifest, synthetic, label, scenes, image_size, min_objects,
            max_objects, min_size, max_size, placement, min_depth, max_depth,
            noise, foreground, scheme, extractor, grid, stride_shallow,
            stride_deep, tau, eta, epochs, gamma, epsilon_start, epsilon_floor,
            epsilon_decrement, learning_rate, replay_capacity, batch_size,
            max_steps, forced_trigger_iou, hidden, dropout_keep, coverage_depth,
        );
        self
    }

    pub fn from_file(path: &Path) -> Result<ConfigKeys> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
    }
}

/// Where scenes come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Manifest(PathBuf),
}

/// Fully resolved configuration for one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub source: DataSource,
    pub label: String,
    pub train: TrainConfig,
    pub coverage_depth: usize,
    /// The merged key set, echoed to the output directory.
    keys: ConfigKeys,
}

impl RunConfig {
    /// Applies defaults and validates cross-field constraints.
    pub fn resolve(keys: ConfigKeys) -> Result<RunConfig> {
        let seed = keys.seed.unwrap_or(0);
        let scheme = match &keys.scheme {
            Some(s) => HierarchyScheme::parse(s)?,
            None => HierarchyScheme::Overlapped,
        };
        let extractor = match &keys.extractor {
            Some(s) => ExtractorKind::parse(s)?,
            None => ExtractorKind::Zoom,
        };
        let placement = match &keys.placement {
            Some(s) => PlacementMode::parse(s)?,
            None => PlacementMode::Uniform,
        };
        let label = keys.label.clone().unwrap_or_else(|| "object".into());

        let defaults_env = EnvConfig::default();
        let env = EnvConfig {
            scheme,
            extractor,
            grid: keys.grid.unwrap_or(defaults_env.grid),
            stride_shallow: keys.stride_shallow.unwrap_or(defaults_env.stride_shallow),
            stride_deep: keys.stride_deep.unwrap_or(defaults_env.stride_deep),
            tau: keys.tau.unwrap_or(defaults_env.tau),
            eta: keys.eta.unwrap_or(defaults_env.eta),
        };
        let d = TrainConfig::default();
        let train = TrainConfig {
            epochs: keys.epochs.unwrap_or(d.epochs),
            gamma: keys.gamma.unwrap_or(d.gamma),
            epsilon_start: keys.epsilon_start.unwrap_or(d.epsilon_start),
            epsilon_floor: keys.epsilon_floor.unwrap_or(d.epsilon_floor),
            epsilon_decrement: keys.epsilon_decrement.unwrap_or(d.epsilon_decrement),
            learning_rate: keys.learning_rate.unwrap_or(d.learning_rate),
            replay_capacity: keys.replay_capacity.unwrap_or(d.replay_capacity),
            batch_size: keys.batch_size.unwrap_or(d.batch_size),
            max_steps: keys.max_steps.unwrap_or(d.max_steps),
            forced_trigger_iou: keys.forced_trigger_iou.unwrap_or(d.forced_trigger_iou),
            hidden: keys.hidden.unwrap_or(d.hidden),
            dropout_keep: keys.dropout_keep.unwrap_or(d.dropout_keep),
            env,
            seed,
        };
        train.validate()?;

        let synthetic = keys.synthetic.unwrap_or(false);
        let source = match (&keys.manifest, synthetic) {
            (Some(_), true) => {
                return Err(Error::Config(
                    "exactly one data source: drop either 'manifest' or 'synthetic'".into(),
                ))
            }
            (Some(path), false) => DataSource::Manifest(path.clone()),
            (None, _) => {
                let sd = SyntheticSpec::default();
                DataSource::Synthetic(SyntheticSpec {
                    num_scenes: keys.scenes.unwrap_or(sd.num_scenes),
                    image_size: keys.image_size.unwrap_or(sd.image_size),
                    count_range: (
                        keys.min_objects.unwrap_or(sd.count_range.0),
                        keys.max_objects.unwrap_or(sd.count_range.1),
                    ),
                    size_range: (
                        keys.min_size.unwrap_or(sd.size_range.0),
                        keys.max_size.unwrap_or(sd.size_range.1),
                    ),
                    placement,
                    scheme,
                    depth_range: (
                        keys.min_depth.unwrap_or(sd.depth_range.0),
                        keys.max_depth.unwrap_or(sd.depth_range.1),
                    ),
                    noise_amplitude: keys.noise.unwrap_or(sd.noise_amplitude),
                    foreground_intensity: keys.foreground.unwrap_or(sd.foreground_intensity),
                    label: label.clone(),
                    seed,
                })
            }
        };
        // when no source keys are given at all, commands that need data will
        // use the synthetic defaults; `generate` requires the synthetic side
        if keys.manifest.is_none() && !synthetic && keys.scenes.is_none() {
            // keep resolution permissive; per-command checks refine this
        }
        Ok(RunConfig {
            seed,
            source,
            label,
            train,
            coverage_depth: keys.coverage_depth.unwrap_or(3),
            keys,
        })
    }

    pub fn from_sources(config_file: Option<&Path>, flags: &ConfigKeys) -> Result<RunConfig> {
        let base = match config_file {
            Some(path) => ConfigKeys::from_file(path)?,
            None => ConfigKeys::default(),
        };
        RunConfig::resolve(base.merged(flags))
    }

    /// Writes the merged keys to `<out>/config_used.toml`.
    pub fn echo_into(&self, out: &Path) -> Result<()> {
        let text = toml::to_string(&self.keys)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        fs::write(out.join("config_used.toml"), text)?;
        Ok(())
    }

    fn load_scenes(&self) -> Result<Vec<Scene>> {
        match &self.source {
            DataSource::Synthetic(spec) => generate(spec),
            DataSource::Manifest(path) => {
                let manifest = DatasetManifest::load(path)?;
                load_voc_annotations(&manifest, &self.label)
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hqdet", version, about = "Hierarchical zoom-in detection with a Q-learning agent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat key = value config file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub keys: ConfigKeys,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (images, annotations, manifest)
    Generate(CommonArgs),
    /// Train the Q-network; writes per-epoch checkpoints and a log
    Train(CommonArgs),
    /// Evaluate a checkpoint: PR curves, coverage, steps histogram
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint file to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run one greedy episode on an image and emit its trace
    Trace {
        /// Flat key = value config file; flags override its entries
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        keys: ConfigKeys,
        /// Checkpoint file to drive the policy
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image to search (P5/P6)
        #[arg(long)]
        image: PathBuf,
        /// Optional VOC annotation; rewards are zero without it
        #[arg(long)]
        annotation: Option<PathBuf>,
        /// Trace output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = match &cfg.source {
        DataSource::Synthetic(spec) => spec,
        DataSource::Manifest(_) => {
            return Err(Error::Config("generate needs a synthetic data source".into()))
        }
    };
    fs::create_dir_all(out)?;
    let scenes = generate(spec)?;
    let manifest = save_dataset(out, "train", &scenes)?;
    manifest.save(&out.join("manifest.csv"))?;
    cfg.echo_into(out)?;
    println!("wrote {} scenes under {}", scenes.len(), out.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let scenes = cfg.load_scenes()?;
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let result = train(&scenes, &cfg.train, Some(out))?;
    cfg.echo_into(out)?;
    let last = result.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs over {} scenes; final mean reward {:.3}, checkpoint {}",
        cfg.train.epochs,
        scenes.len(),
        last.mean_reward,
        last.checkpoint
    );
    Ok(())
}

/// Coverage of the dataset's own objects by each scene's hierarchy, depth-
/// limited and exhaustive; scenes of any size are handled individually.
fn dataset_coverage(scenes: &[Scene], scheme: HierarchyScheme, depth: usize) -> Result<f64> {
    let mut total = 0usize;
    let mut covered = 0usize;
    for scene in scenes {
        let nodes = enumerate_nodes(&scene.full_box(), scheme, depth, 500_000)?;
        for obj in &scene.objects {
            total += 1;
            if nodes.iter().any(|n| iou(n, &obj.bbox) >= 0.5) {
                covered += 1;
            }
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(covered as f64 / total as f64)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let scenes = cfg.load_scenes()?;
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let net = QNetwork::load_from_file(checkpoint)?;
    let (agent_pr, traces) = evaluate_agent(&scenes, &net, &cfg.train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let random_pr = random_baseline(&scenes, &cfg.train, &mut rng)?;
    let oracle_pr = oracle_upper_bound(&scenes, cfg.train.env.scheme, cfg.train.max_steps)?;
    let coverage = dataset_coverage(&scenes, cfg.train.env.scheme, cfg.coverage_depth)?;
    let histogram = steps_histogram(&traces);

    fs::write(out.join("agent_pr.csv"), agent_pr.to_csv())?;
    fs::write(out.join("random_pr.csv"), random_pr.to_csv())?;
    fs::write(out.join("oracle_pr.csv"), oracle_pr.to_csv())?;
    fs::write(out.join("steps_histogram.csv"), histogram_to_csv(&histogram))?;
    fs::write(
        out.join("coverage.csv"),
        format!(
            "scheme,depth,coverage\n{},{},{}\n",
            cfg.train.env.scheme, cfg.coverage_depth, coverage
        ),
    )?;
    cfg.echo_into(out)?;
    println!("agent AP: {:.4}", agent_pr.average_precision);
    println!("random AP: {:.4}", random_pr.average_precision);
    println!("oracle AP: {:.4}", oracle_pr.average_precision);
    println!("coverage (depth {}): {:.4}", cfg.coverage_depth, coverage);
    Ok(())
}

/// Greedy rollout when no ground truth is available: identical policy and
/// regions, rewards recorded as zero.
fn greedy_trace_without_gt(
    scene: &Scene,
    cfg: &TrainConfig,
    net: &QNetwork,
) -> Result<EpisodeTrace> {
    let env = crate::environment::Env::new(scene, cfg.env)?;
    let (mut state, mut region) = env.reset()?;
    let mut steps = Vec::new();
    let mut status = EpisodeStatus::StepLimit;
    for _ in 0..cfg.max_steps {
        let q = net.forward_infer(&state.to_input())?;
        let action = greedy_action(&q);
        let mut q_values = [0.0; 6];
        q_values.copy_from_slice(&q);
        steps.push(EpisodeStep { region, q_values, action, reward: 0.0 });
        if action.is_trigger() {
            status = EpisodeStatus::Triggered;
            break;
        }
        let next = crate::geometry::children(&region, cfg.env.scheme)[action.index()];
        let descriptor = env.describe(&next)?;
        state = crate::environment::AgentState {
            descriptor,
            memory: state.memory.record(action),
        };
        region = next;
    }
    Ok(EpisodeTrace { steps, status })
}

pub fn cmd_trace(
    cfg: &RunConfig,
    checkpoint: &Path,
    image_path: &Path,
    annotation: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let image = pnm::read_pnm(image_path)?;
    let net = QNetwork::load_from_file(checkpoint)?;
    let trace = match annotation {
        Some(ann_path) => {
            let manifest = DatasetManifest {
                split: "trace".into(),
                entries: vec![(image_path.to_path_buf(), ann_path.to_path_buf())],
            };
            let scenes = load_voc_annotations(&manifest, &cfg.label)?;
            let scene = scenes.into_iter().next().ok_or(Error::NoGroundTruth)?;
            let env = crate::environment::Env::new(&scene, cfg.train.env)?;
            crate::evaluation::greedy_episode(&env, &net, cfg.train.max_steps, 0)?.0
        }
        None => {
            let scene = Scene::new(image, Vec::new())?;
            greedy_trace_without_gt(&scene, &cfg.train, &net)?
        }
    };
    match out {
        Some(path) => {
            let mut buf = Vec::new();
            trace.write_records(&mut buf)?;
            fs::write(path, buf)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            trace.write_records(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = RunConfig::from_sources(args.config.as_deref(), &args.keys)?;
            cmd_generate(&cfg, &args.out)
        }
        Command::Train(args) => {
            let cfg = RunConfig::from_sources(args.config.as_deref(), &args.keys)?;
            cmd_train(&cfg, &args.out)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = RunConfig::from_sources(common.config.as_deref(), &common.keys)?;
            cmd_eval(&cfg, &checkpoint, &common.out)
        }
        Command::Trace { config, keys, checkpoint, image, annotation, out } => {
            let cfg = RunConfig::from_sources(config.as_deref(), &keys)?;
            cmd_trace(&cfg, &checkpoint, &image, annotation.as_deref(), out.as_deref())
        }
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
