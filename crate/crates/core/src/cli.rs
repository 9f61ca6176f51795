//! Command-line front end. Every subcommand writes `manifest.json` first and
//! then its result files; `replay` re-runs a manifest into a new directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::am::{run_am, AmConfig, AmTrajectory, InitSpec, Regularizer};
use crate::analysis::{
    bn_after_activation, bn_input_std_profile, layer_gradient_magnitude, monte_carlo_estimate,
    rectified_gaussian_mean, rectified_gaussian_var, spearman, ProbeBatch, ProfileMode,
};
use crate::error::{Error, Result};
use crate::io::{encode_image, write_csv, write_json};
use crate::layers::ActivationRule;
use crate::netspec::load_network;
use crate::rng::{Rng, Stream, ALGORITHM};
use crate::toy::{ProblemKind, WhiteImageProblem};
use crate::train::{
    self, build_small_cnn, build_tiny_resnet, load_idx, synthetic_shapes, Augment, Dataset,
    LrSchedule, Optimizer, SmallCnnSpec, Split, TinyResNetSpec, TrainConfig,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "proxygrad", version, about = "Forward/backward-asymmetric rectifier experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Activation maximization on a white image problem.
    Toy(ToyArgs),
    /// Activation maximization on a network read from a JSON spec.
    Am(AmArgs),
    /// Closed-form vs Monte-Carlo moments of rectified standard normals.
    Moments(MomentsArgs),
    /// Mean absolute loss gradient at probe layers of random residual nets.
    Gradmag(GradmagArgs),
    /// Standard deviation of batch-norm inputs in random residual nets.
    Bnstd(BnstdArgs),
    /// Train a classifier and record per-epoch history.
    Train(TrainArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Toy(_) => "toy",
            Command::Am(_) => "am",
            Command::Moments(_) => "moments",
            Command::Gradmag(_) => "gradmag",
            Command::Bnstd(_) => "bnstd",
            Command::Train(_) => "train",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Relu,
    Lrelu,
    Proxygrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnArg {
    On,
    Off,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetArg {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetArg {
    Resnet,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

/// Options shared by the two activation-maximization commands.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AscentArgs {
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    /// Divide the gradient by its Euclidean norm before each step.
    #[arg(long)]
    pub normalize: bool,
    /// Gaussian blur after each step; 0 disables.
    #[arg(long, default_value_t = 0.0)]
    pub blur_sigma: f64,
    #[arg(long, default_value_t = 3)]
    pub blur_size: usize,
    /// Random rotation in [-deg, deg] after each step; 0 disables.
    #[arg(long, default_value_t = 0.0)]
    pub rot_deg: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub background: f64,
    #[arg(long, default_value_t = 0.5)]
    pub init_noise: f64,
    /// Save the image every this many iterations; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub frame_stride: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl AscentArgs {
    fn config(&self) -> AmConfig {
        let mut regularizers = Vec::new();
        if self.blur_sigma > 0.0 {
            regularizers.push(Regularizer::Blur {
                sigma: self.blur_sigma,
                kernel_size: self.blur_size,
            });
        }
        if self.rot_deg > 0.0 {
            regularizers.push(Regularizer::Rotate {
                max_degrees: self.rot_deg,
            });
        }
        AmConfig {
            learning_rate: self.lr,
            iterations: self.iters,
            normalize_gradient: self.normalize,
            clamp: (-1.0, 1.0),
            regularizers,
            init: InitSpec {
                background: self.background,
                noise_std: self.init_noise,
                seed: self.seed,
            },
            frame_stride: self.frame_stride,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ToyArgs {
    #[arg(long, default_value = "f1")]
    pub problem: ProblemKind,
    #[arg(long, value_enum, default_value_t = ModeArg::Relu)]
    pub mode: ModeArg,
    /// Negative slope of the problem's rectifiers (ignored by f1).
    #[arg(long, default_value_t = 0.1)]
    pub slope_fwd: f64,
    /// Backward slope used by `--mode proxygrad`.
    #[arg(long, default_value_t = 0.5)]
    pub slope_bwd: f64,
    #[arg(long, default_value_t = 0.2)]
    pub p: f64,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub ascent: AscentArgs,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    pub outdir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AmArgs {
    #[arg(long)]
    pub net_spec: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Relu)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.0)]
    pub slope_fwd: f64,
    #[arg(long, default_value_t = 0.5)]
    pub slope_bwd: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub ascent: AscentArgs,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    pub outdir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MomentsArgs {
    #[arg(long, value_delimiter = ',', default_values_t = (0..=10).map(|i| i as f64 / 10.0).collect::<Vec<_>>())]
    pub slopes: Vec<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    pub mc_n: usize,
    /// Agreement tolerance in standard errors.
    #[arg(long, default_value_t = 4.0)]
    pub k_se: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    pub outdir: PathBuf,
}

/// Residual network and probe-batch options of the profiling commands.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProfileArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.3, 0.6, 0.9])]
    pub slopes: Vec<f64>,
    /// Number of seeds, `0..seeds` offset by `--seed`.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 12)]
    pub size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![4, 8])]
    pub widths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 1])]
    pub blocks: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
}

impl ProfileArgs {
    fn spec(&self, batchnorm: bool) -> TinyResNetSpec {
        TinyResNetSpec {
            input_shape: [1, self.size, self.size],
            widths: self.widths.clone(),
            blocks: self.blocks.clone(),
            rule: ActivationRule::relu(),
            batchnorm,
            classes: self.classes,
            bias: true,
        }
    }

    fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds).map(|k| self.seed + k).collect()
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GradmagArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub profile: ProfileArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["leaky".to_string(), "proxygrad".to_string()])]
    pub modes: Vec<String>,
    #[arg(long, value_enum, default_value_t = BnArg::Both)]
    pub bn: BnArg,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["stage0.block0.conv1".to_string()])]
    pub probes: Vec<String>,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    pub outdir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BnstdArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub profile: ProfileArgs,
    #[arg(long, default_value = "leaky")]
    pub mode: String,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    pub outdir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = DatasetArg::Synthetic)]
    pub dataset: DatasetArg,
    #[arg(long)]
    pub train_images: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 12)]
    pub size: usize,
    #[arg(long, value_enum, default_value_t = NetArg::Resnet)]
    pub net: NetArg,
    #[arg(long, value_delimiter = ',', default_values_t = vec![4, 8])]
    pub widths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 1])]
    pub blocks: Vec<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Relu)]
    pub mode: ModeArg,
    /// Negative slope: both passes for lrelu, backward only for proxygrad.
    #[arg(long, default_value_t = 0.1)]
    pub slope: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lr_decay: f64,
    #[arg(long, value_delimiter = ',')]
    pub milestones: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub crop_pad: usize,
    #[arg(long)]
    pub flip: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    #[serde(skip)]
    pub outdir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "out")]
    pub outdir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub rng: String,
    /// Every option of the subcommand, defaults included.
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Process exit status for an error: 3 for numerical failures, 1 for I/O, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        3
    } else if matches!(e, Error::Io(_) | Error::Csv(_)) {
        1
    } else {
        2
    }
}

fn rule_for(mode: ModeArg, slope_fwd: f64, slope_bwd: f64) -> Result<ActivationRule> {
    match mode {
        ModeArg::Relu => Ok(ActivationRule::relu()),
        ModeArg::Lrelu => ActivationRule::leaky(slope_fwd),
        ModeArg::Proxygrad => ActivationRule::new(slope_fwd, slope_bwd),
    }
}

fn profile_mode(s: &str) -> Result<ProfileMode> {
    match s {
        "leaky" | "lrelu" => Ok(ProfileMode::Leaky),
        "proxygrad" | "proxy" => Ok(ProfileMode::Proxygrad),
        other => Err(usage(format!("unknown mode `{other}`, expected leaky or proxygrad"))),
    }
}

struct Run<'a> {
    dir: &'a Path,
    manifest: RunManifest,
}

impl<'a> Run<'a> {
    fn start(dir: &'a Path, command: &Command, seed: u64, outputs: Vec<String>, notes: Vec<String>) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let config = match serde_json::to_value(command)? {
            serde_json::Value::Object(mut m) => m.remove(command.name()).unwrap_or_default(),
            v => v,
        };
        let manifest = RunManifest {
            tool: "proxygrad".into(),
            version: VERSION.into(),
            subcommand: command.name().into(),
            seed,
            rng: ALGORITHM.into(),
            config,
            outputs,
            notes,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(Self { dir, manifest })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn image(&mut self, name: &str, x: &crate::tensor::Tensor) -> Result<()> {
        std::fs::write(self.path(name), encode_image(x)?)?;
        Ok(())
    }

    /// Rewrites the manifest when the output list is only known at the end.
    fn finish(self) -> Result<()> {
        write_json(&self.dir.join("manifest.json"), &self.manifest)
    }
}

#[derive(Serialize)]
struct TrajectoryRow {
    iteration: usize,
    objective: f64,
    grad_norm: f64,
}

#[derive(Serialize)]
struct CrossingRow {
    pixel: usize,
    init: f64,
    final_value: f64,
    crossing: Option<usize>,
}

fn image_ext(shape: &[usize]) -> Option<&'static str> {
    let s = if shape.len() == 4 && shape[0] == 1 { &shape[1..] } else { shape };
    match s {
        [1, _, _] | [_, _] => Some("pgm"),
        [3, _, _] => Some("ppm"),
        _ => None,
    }
}

fn am_outputs(shape: &[usize], config: &AmConfig) -> Vec<String> {
    let mut out = vec!["trajectory.csv".to_string(), "pixels.csv".to_string()];
    if let Some(ext) = image_ext(shape) {
        out.push(format!("init.{ext}"));
        out.push(format!("final.{ext}"));
        if config.frame_stride > 0 {
            for t in (0..=config.iterations).step_by(config.frame_stride) {
                out.push(format!("frame_{t:05}.{ext}"));
            }
        }
    }
    out
}

fn write_am_outputs(run: &mut Run, traj: &AmTrajectory) -> Result<()> {
    let rows: Vec<TrajectoryRow> = traj
        .objective
        .iter()
        .zip(&traj.grad_norm)
        .enumerate()
        .map(|(iteration, (&objective, &grad_norm))| TrajectoryRow {
            iteration,
            objective,
            grad_norm,
        })
        .collect();
    write_csv(&run.path("trajectory.csv"), &rows)?;
    let pixels: Vec<CrossingRow> = traj
        .initial_image
        .data()
        .iter()
        .zip(traj.final_image.data())
        .zip(&traj.crossings)
        .enumerate()
        .map(|(pixel, ((&init, &final_value), &crossing))| CrossingRow {
            pixel,
            init,
            final_value,
            crossing,
        })
        .collect();
    write_csv(&run.path("pixels.csv"), &pixels)?;
    if let Some(ext) = image_ext(traj.initial_image.shape()) {
        run.image(&format!("init.{ext}"), &traj.initial_image)?;
        run.image(&format!("final.{ext}"), &traj.final_image)?;
        for (t, frame) in &traj.frames {
            run.image(&format!("frame_{t:05}.{ext}"), frame)?;
        }
    }
    Ok(())
}

fn cmd_toy(args: &ToyArgs, command: &Command) -> Result<()> {
    let slope = if args.problem == ProblemKind::F1 { 0.0 } else { args.slope_fwd };
    let problem = WhiteImageProblem::new(args.problem, slope, args.p, args.height, args.width)?;
    let rule = rule_for(args.mode, slope, args.slope_bwd)?;
    if rule.forward_slope != problem.slope {
        return Err(usage(format!(
            "mode {:?} has forward slope {} but the problem uses {}",
            args.mode, rule.forward_slope, problem.slope
        )));
    }
    let config = args.ascent.config();
    config.validate()?;
    let mut run = Run::start(&args.outdir, command, args.ascent.seed, am_outputs(&problem.shape(), &config), vec![])?;
    let graph = problem.build_graph(rule)?;
    let traj = run_am(&graph, "x", &problem.shape(), &config)?;
    write_am_outputs(&mut run, &traj)?;
    run.finish()
}

fn cmd_am(args: &AmArgs, command: &Command) -> Result<()> {
    let json = std::fs::read_to_string(&args.net_spec)?;
    let rule = rule_for(args.mode, args.slope_fwd, args.slope_bwd)?;
    let net = load_network(&json, rule, &mut Rng::stream(args.ascent.seed, Stream::Weights))?;
    if net.output_shape != [1] {
        return Err(Error::NetSpec(format!(
            "the last layer must produce a scalar to maximize, got {:?}; end with select or sum",
            net.output_shape
        )));
    }
    let config = args.ascent.config();
    config.validate()?;
    let mut run = Run::start(&args.outdir, command, args.ascent.seed, am_outputs(&net.input_shape, &config), vec![])?;
    let traj = run_am(&net.graph, &net.input, &net.input_shape, &config)?;
    write_am_outputs(&mut run, &traj)?;
    run.finish()
}

#[derive(Serialize)]
struct MomentRow {
    slope: f64,
    mean_closed: f64,
    mean_mc: f64,
    mean_se: f64,
    var_closed: f64,
    var_mc: f64,
    var_se: f64,
    k_se: f64,
    agree: bool,
}

fn cmd_moments(args: &MomentsArgs, command: &Command) -> Result<()> {
    if args.slopes.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(usage("slopes must lie in [0, 1]"));
    }
    if args.mc_n < 2 {
        return Err(usage("--mc-n must be at least 2"));
    }
    let run = Run::start(&args.outdir, command, args.seed, vec!["moments.csv".into()], vec![])?;
    let mut rows = Vec::new();
    for &s in &args.slopes {
        let mc = monte_carlo_estimate(s, args.mc_n, &mut Rng::stream(args.seed, Stream::MonteCarlo))?;
        let (m, v) = (rectified_gaussian_mean(s), rectified_gaussian_var(s));
        rows.push(MomentRow {
            slope: s,
            mean_closed: m,
            mean_mc: mc.moments.mean,
            mean_se: mc.mean_se,
            var_closed: v,
            var_mc: mc.moments.variance,
            var_se: mc.variance_se,
            k_se: args.k_se,
            agree: (m - mc.moments.mean).abs() <= args.k_se * mc.mean_se
                && (v - mc.moments.variance).abs() <= args.k_se * mc.variance_se,
        });
    }
    write_csv(&run.path("moments.csv"), &rows)?;
    run.finish()
}

#[derive(Serialize)]
struct GradRow {
    mode: ProfileMode,
    slope: f64,
    bn: bool,
    layer: String,
    mean_abs_grad: f64,
    std: f64,
    n_seeds: usize,
}

#[derive(Serialize)]
struct TrendRow {
    mode: ProfileMode,
    bn: bool,
    layer: String,
    spearman: f64,
}

fn cmd_gradmag(args: &GradmagArgs, command: &Command) -> Result<()> {
    let modes: Vec<ProfileMode> = args.modes.iter().map(|m| profile_mode(m)).collect::<Result<_>>()?;
    let bns: &[bool] = match args.bn {
        BnArg::On => &[true],
        BnArg::Off => &[false],
        BnArg::Both => &[true, false],
    };
    let p = &args.profile;
    if p.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let run = Run::start(&args.outdir, command, p.seed, vec!["gradmag.csv".into(), "trends.csv".into()], vec![])?;
    let probes: Vec<&str> = args.probes.iter().map(String::as_str).collect();
    let batch = ProbeBatch::Synthetic { batch_size: p.batch };
    let (mut rows, mut trends) = (Vec::new(), Vec::new());
    for &bn in bns {
        let spec = p.spec(bn);
        for &mode in &modes {
            let mut series = vec![Vec::new(); probes.len()];
            for &s in &p.slopes {
                let prof = layer_gradient_magnitude(&spec, &batch, mode.rule(s)?, &probes, &p.seed_list())?;
                for (k, l) in prof.layers.into_iter().enumerate() {
                    series[k].push(l.mean);
                    rows.push(GradRow {
                        mode,
                        slope: s,
                        bn,
                        layer: l.layer,
                        mean_abs_grad: l.mean,
                        std: l.std,
                        n_seeds: prof.n_seeds,
                    });
                }
            }
            if p.slopes.len() >= 2 {
                for (k, probe) in probes.iter().enumerate() {
                    trends.push(TrendRow {
                        mode,
                        bn,
                        layer: probe.to_string(),
                        spearman: spearman(&p.slopes, &series[k])?,
                    });
                }
            }
        }
    }
    write_csv(&run.path("gradmag.csv"), &rows)?;
    write_csv(&run.path("trends.csv"), &trends)?;
    run.finish()
}

#[derive(Serialize)]
struct BnRow {
    mode: ProfileMode,
    slope: f64,
    layer: String,
    after_activation: bool,
    mean_std: f64,
    std: f64,
    n_seeds: usize,
}

fn cmd_bnstd(args: &BnstdArgs, command: &Command) -> Result<()> {
    let mode = profile_mode(&args.mode)?;
    let p = &args.profile;
    if p.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let spec = p.spec(true);
    let probe_graph = build_tiny_resnet(&spec, &mut Rng::new(0))?;
    let downstream: Vec<String> = bn_after_activation(&probe_graph)
        .iter()
        .filter_map(|&id| probe_graph.node(id).label.clone())
        .collect();
    let run = Run::start(&args.outdir, command, p.seed, vec!["bnstd.csv".into(), "trends.csv".into()], vec![])?;
    let batch = ProbeBatch::Synthetic { batch_size: p.batch };
    let mut rows = Vec::new();
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    for &s in &p.slopes {
        let prof = bn_input_std_profile(&spec, &batch, mode.rule(s)?, &p.seed_list())?;
        for (k, l) in prof.into_iter().enumerate() {
            if series.len() <= k {
                series.push((l.layer.clone(), Vec::new()));
            }
            series[k].1.push(l.mean);
            rows.push(BnRow {
                mode,
                slope: s,
                after_activation: downstream.contains(&l.layer),
                layer: l.layer,
                mean_std: l.mean,
                std: l.std,
                n_seeds: p.seeds as usize,
            });
        }
    }
    let mut trends = Vec::new();
    if p.slopes.len() >= 2 {
        for (layer, v) in &series {
            trends.push(TrendRow {
                mode,
                bn: true,
                layer: layer.clone(),
                spearman: spearman(&p.slopes, v)?,
            });
        }
    }
    write_csv(&run.path("bnstd.csv"), &rows)?;
    write_csv(&run.path("trends.csv"), &trends)?;
    run.finish()
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    loss: f64,
    train_acc: f64,
    test_acc: Option<f64>,
}

fn train_datasets(args: &TrainArgs) -> Result<(Dataset, Option<Dataset>)> {
    match args.dataset {
        DatasetArg::Synthetic => {
            let tr = synthetic_shapes(args.n_per_class, args.classes, args.size, &mut Rng::stream(args.seed, Stream::Data))?;
            let te = if args.test_per_class > 0 {
                Some(
                    synthetic_shapes(args.test_per_class, args.classes, args.size, &mut Rng::stream(args.seed, Stream::Test))?
                        .with_split(Split::Test),
                )
            } else {
                None
            };
            Ok((tr, te))
        }
        DatasetArg::Idx => {
            let (Some(ti), Some(tl)) = (&args.train_images, &args.train_labels) else {
                return Err(usage("--dataset idx needs --train-images and --train-labels"));
            };
            let tr = load_idx(ti, tl)?;
            let te = match (&args.test_images, &args.test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l)?.with_split(Split::Test)),
                (None, None) => None,
                _ => return Err(usage("give both --test-images and --test-labels")),
            };
            Ok((tr, te))
        }
    }
}

fn cmd_train(args: &TrainArgs, command: &Command) -> Result<()> {
    let rule = match args.mode {
        ModeArg::Relu => ActivationRule::relu(),
        ModeArg::Lrelu => ActivationRule::leaky(args.slope)?,
        ModeArg::Proxygrad => ActivationRule::proxy(args.slope)?,
    };
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr: LrSchedule {
            initial: args.lr,
            decay: args.lr_decay,
            milestones: args.milestones.clone(),
        },
        weight_decay: args.weight_decay,
        optimizer: match args.optimizer {
            OptimizerArg::Sgd => Optimizer::SgdMomentum {
                momentum: args.momentum,
            },
            OptimizerArg::Adam => Optimizer::ADAM,
        },
        augment: Augment {
            crop_pad: args.crop_pad,
            flip: args.flip,
        },
        seed: args.seed,
    };
    config.validate()?;
    let (tr, te) = train_datasets(args)?;
    let classes = te.as_ref().map_or(tr.classes(), |t| t.classes().max(tr.classes()));
    let input_shape = tr.image_shape();
    let mut weights = Rng::stream(args.seed, Stream::Weights);
    let mut graph = match args.net {
        NetArg::Resnet => build_tiny_resnet(
            &TinyResNetSpec {
                input_shape,
                widths: args.widths.clone(),
                blocks: args.blocks.clone(),
                rule,
                batchnorm: true,
                classes,
                bias: true,
            },
            &mut weights,
        )?,
        NetArg::Cnn => build_small_cnn(
            &SmallCnnSpec {
                input_shape,
                width: args.widths[0],
                rule,
                classes,
            },
            &mut weights,
        )?,
    };
    let notes = vec![
        format!("optimizer {:?}; the large-batch Lamb optimizer is not implemented", config.optimizer),
        format!(
            "desk-scale recipe: {} epochs, batch {}, learning rate {}, weight decay {}",
            config.epochs, config.batch_size, config.lr.initial, config.weight_decay
        ),
        format!("activation rule: forward slope {}, backward slope {}", rule.forward_slope, rule.backward_slope),
    ];
    let run = Run::start(&args.outdir, command, args.seed, vec!["history.csv".into()], notes)?;
    let history = train::train(&mut graph, &tr, te.as_ref(), &config)?;
    let rows: Vec<HistoryRow> = history
        .iter()
        .map(|r| HistoryRow {
            epoch: r.epoch,
            loss: r.loss,
            train_acc: r.train_acc,
            test_acc: r.test_acc,
        })
        .collect();
    write_csv(&run.path("history.csv"), &rows)?;
    run.finish()
}

fn cmd_replay(args: &ReplayArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.manifest)?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    if manifest.subcommand == "replay" {
        return Err(usage("cannot replay a replay manifest"));
    }
    let mut wrapped = serde_json::Map::new();
    wrapped.insert(manifest.subcommand.clone(), manifest.config);
    let mut command: Command = serde_json::from_value(serde_json::Value::Object(wrapped))?;
    match &mut command {
        Command::Toy(a) => a.outdir = args.outdir.clone(),
        Command::Am(a) => a.outdir = args.outdir.clone(),
        Command::Moments(a) => a.outdir = args.outdir.clone(),
        Command::Gradmag(a) => a.outdir = args.outdir.clone(),
        Command::Bnstd(a) => a.outdir = args.outdir.clone(),
        Command::Train(a) => a.outdir = args.outdir.clone(),
        Command::Replay(_) => unreachable!(),
    }
    execute(&command)
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Toy(a) => cmd_toy(a, command),
        Command::Am(a) => cmd_am(a, command),
        Command::Moments(a) => cmd_moments(a, command),
        Command::Gradmag(a) => cmd_gradmag(a, command),
        Command::Bnstd(a) => cmd_bnstd(a, command),
        Command::Train(a) => cmd_train(a, command),
        Command::Replay(a) => cmd_replay(a),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
