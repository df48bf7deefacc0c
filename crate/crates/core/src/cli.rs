//! Command-line entry point: `gen-data`, `train`, `sample`, `eval`, `score`.
//!
//! Every command writes `run_config.json` into its output directory with the
//! fully resolved settings, the seed and the source revision.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use anyhow::{anyhow, Context};
use candle_core::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::geometry::{Camera, Pose};
use crate::image::{Image, PosedImage};
use crate::model::{Architecture, UNet, XUNetConfig};
use crate::sampling::{generate_trajectory, SamplerConfig, SamplerMode};
use crate::scenes::{make_dataset, Dataset, DatasetConfig, Split};
use crate::scoring::{consistency_score, holdout_indices, psnr, ssim, ConsistencyReport, FieldConfig};
use crate::training::{load_checkpoint, MetricsLog, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const TRAJECTORY_FILE: &str = "trajectory.json";

#[derive(Debug, Parser)]
#[command(name = "viewdiff", version, about = "Pose-conditional diffusion for novel view synthesis")]
struct Cli {
    /// Root under which commands create their default output directory.
    #[arg(long, global = true, env = "VIEWDIFF_OUT", default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset.
    GenData(GenDataArgs),
    /// Train a denoiser on a dataset.
    Train(TrainArgs),
    /// Generate a trajectory of novel views from one input view.
    Sample(SampleArgs),
    /// PSNR/SSIM of generated trajectories against ground-truth views.
    Eval(EvalArgs),
    /// Fit a neural field to a set of views and score held-out views.
    Score(ScoreArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long, default_value_t = 1)]
    test_scenes: usize,
    #[arg(long, default_value_t = 24)]
    views: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Focal length as a multiple of the image width.
    #[arg(long, default_value_t = 1.0)]
    focal_factor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ArchArg {
    XUnet,
    ConcatUnet,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::XUnet => Architecture::XUnet,
            ArchArg::ConcatUnet => Architecture::ConcatUnet,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Stochastic,
    Naive,
    Regression,
}

impl From<ModeArg> for SamplerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Stochastic => SamplerMode::Stochastic,
            ModeArg::Naive => SamplerMode::Naive,
            ModeArg::Regression => SamplerMode::Regression,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Dataset directory created by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `paper`, `desk`, `tiny`, or a TOML file.
    #[arg(long, default_value = "desk")]
    config: String,
    /// Overrides the architecture chosen by the config.
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from `checkpoint.safetensors` in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args, Serialize)]
struct SamplerArgs {
    #[arg(long, value_enum, default_value = "stochastic")]
    mode: ModeArg,
    /// Denoising steps per frame.
    #[arg(long, default_value_t = 256)]
    steps: usize,
    #[arg(long, default_value_t = 3.0)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.steps,
            guidance_weight: self.guidance,
            mode: self.mode.into(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Scene position within the split.
    #[arg(long, default_value_t = 0)]
    scene: usize,
    /// Index of the input view within the scene.
    #[arg(long, default_value_t = 0)]
    cond_view: usize,
    /// Number of frames, taken in order from the remaining views' poses.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 64)]
    cond_view: usize,
    /// Evaluate only the first N scenes of the split.
    #[arg(long)]
    max_scenes: Option<usize>,
    /// Evaluate only the first N frames of each trajectory.
    #[arg(long)]
    max_frames: Option<usize>,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    /// A `sample` output directory or a dataset directory.
    #[arg(long)]
    views: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// For dataset input: split to score.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// For dataset input: score only this scene position within the split.
    #[arg(long)]
    scene: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    holdout_frac: f64,
    #[arg(long)]
    field_steps: Option<usize>,
    #[arg(long)]
    rays_per_step: Option<usize>,
    #[arg(long)]
    samples_per_ray: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 1 on a usage error and 2 on a runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(&cli.out_root, a),
        Command::Train(a) => train(&cli.out_root, a),
        Command::Sample(a) => sample(&cli.out_root, a),
        Command::Eval(a) => eval(&cli.out_root, a),
        Command::Score(a) => score(&cli.out_root, a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn out_dir(root: &Path, explicit: &Option<PathBuf>, command: &str) -> anyhow::Result<PathBuf> {
    let dir = explicit.clone().unwrap_or_else(|| root.join(command));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn git_revision() -> String {
    Process::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write_run_config(dir: &Path, command: &str, seed: u64, resolved: Value) -> anyhow::Result<()> {
    let snapshot = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "git": git_revision(),
        "seed": seed,
        "resolved": resolved,
    });
    write_json(&dir.join(RUN_CONFIG_FILE), &snapshot)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(root: &Path, a: &GenDataArgs) -> CmdResult {
    let cfg = DatasetConfig {
        num_scenes: a.scenes,
        num_test_scenes: a.test_scenes,
        views_per_scene: a.views,
        resolution: a.resolution,
        focal_factor: a.focal_factor,
        seed: a.seed,
        ..DatasetConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let dir = out_dir(root, &a.out, "data")?;
    let manifest = make_dataset(&dir, &cfg)?;
    write_run_config(&dir, "gen-data", a.seed, serde_json::to_value(&cfg).map_err(anyhow::Error::from)?)?;
    println!("wrote {} scenes to {}", manifest.scene_count(), dir.display());
    Ok(())
}

/// Model and training settings for `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub architecture: Architecture,
    pub model: XUNetConfig,
    pub train: TrainConfig,
}

impl ResolvedConfig {
    pub fn named(name: &str) -> Option<Self> {
        Some(Self {
            architecture: Architecture::XUnet,
            model: XUNetConfig::named(name)?,
            train: TrainConfig::named(name)?,
        })
    }

    /// Reads a TOML file holding an optional `base` preset name (default
    /// `desk`), an optional `architecture`, and `[model]`/`[train]` tables
    /// whose keys override the preset.
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let file: toml::Table = toml::from_str(text)?;
        let base_name = match file.get("base") {
            Some(v) => v.as_str().ok_or_else(|| anyhow!("`base` must be a string"))?,
            None => "desk",
        };
        let base = Self::named(base_name).ok_or_else(|| anyhow!("unknown base config {base_name:?}"))?;
        let mut merged = serde_json::to_value(&base)?;
        let overrides = serde_json::to_value(&file)?;
        for (key, value) in overrides.as_object().into_iter().flatten() {
            match key.as_str() {
                "base" => {}
                "architecture" => merged[key] = value.clone(),
                "model" | "train" => merge(&mut merged[key], value),
                other => return Err(anyhow!("unknown config key {other:?}")),
            }
        }
        let cfg: Self = serde_json::from_value(merged)?;
        Ok(cfg)
    }

    pub fn resolve(spec: &str) -> anyhow::Result<Self> {
        if let Some(c) = Self::named(spec) {
            return Ok(c);
        }
        let path = Path::new(spec);
        if !path.is_file() {
            return Err(anyhow!("{spec:?} is neither a named config (paper, desk, tiny) nor a file"));
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("config file {}", path.display()))
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn open_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::open(path).with_context(|| format!("opening dataset {}", path.display()))
}

fn train(root: &Path, a: &TrainArgs) -> CmdResult {
    let mut cfg = ResolvedConfig::resolve(&a.config).map_err(|e| Failure::Usage(format!("{e:#}")))?;
    if let Some(arch) = a.arch {
        cfg.architecture = arch.into();
    }
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.model.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let data = open_dataset(&a.data)?;
    if data.manifest.resolution != cfg.model.resolution {
        return Err(Failure::Runtime(anyhow!(
            "dataset resolution {} does not match model resolution {}",
            data.manifest.resolution,
            cfg.model.resolution
        )));
    }
    let scenes = data.load_split(Split::Train)?;
    if scenes.is_empty() {
        return Err(Failure::Runtime(anyhow!("dataset has no training scenes")));
    }

    let dir = out_dir(root, &a.out, "train")?;
    let ckpt = dir.join("checkpoint.safetensors");
    let mut trainer = if a.resume && ckpt.exists() {
        let mut t = load_checkpoint(&ckpt)?;
        if t.net.config != cfg.model || t.net.arch != cfg.architecture {
            return Err(Failure::Runtime(anyhow!("checkpoint model differs from the requested config")));
        }
        t.config.total_steps = cfg.train.total_steps;
        t
    } else {
        let net = UNet::new(cfg.architecture, cfg.model.clone())?;
        Trainer::new(net, cfg.train.clone(), DType::F32)?
    };
    write_run_config(&dir, "train", cfg.train.seed, json!({ "config": cfg, "args": a }))?;
    log::info!("training {} parameters", trainer.net.num_params());

    let mut metrics = MetricsLog::create(&dir.join("metrics.txt"))?;
    let every = (cfg.train.total_steps / 20).max(1);
    trainer.run(&scenes, &dir, &mut metrics, |s| {
        if s.step % every == 0 {
            log::info!("step {} loss {:.5} lr {:.3e}", s.step, s.loss, s.lr);
        }
    })?;
    if let (Some(first), Some(last)) = (metrics.history.first(), metrics.history.last()) {
        println!(
            "trained steps {}..{} loss {:.5} -> {:.5}; checkpoint {}",
            first.step,
            last.step,
            first.loss,
            last.loss,
            ckpt.display()
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameEntry {
    image: String,
    pose: Pose,
}

/// Index of a `sample` output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Trajectory {
    camera: Camera,
    input: FrameEntry,
    frames: Vec<FrameEntry>,
}

fn split_scene(data: &Dataset, split: SplitArg, pos: usize) -> anyhow::Result<usize> {
    let indices = data.scene_indices(split.into());
    indices
        .get(pos)
        .copied()
        .ok_or_else(|| anyhow!("split {split:?} has {} scenes, no scene {pos}", indices.len()))
}

fn save_trajectory(dir: &Path, input: &PosedImage, frames: &[PosedImage]) -> anyhow::Result<()> {
    input.image.save_png(&dir.join("input.png"))?;
    let mut entries = Vec::with_capacity(frames.len());
    for (j, f) in frames.iter().enumerate() {
        let name = format!("frame_{j:03}.png");
        f.image.save_png(&dir.join(&name))?;
        entries.push(FrameEntry { image: name, pose: f.pose });
    }
    let traj = Trajectory {
        camera: input.camera,
        input: FrameEntry {
            image: "input.png".into(),
            pose: input.pose,
        },
        frames: entries,
    };
    write_json(&dir.join(TRAJECTORY_FILE), &traj)
}

fn sample(root: &Path, a: &SampleArgs) -> CmdResult {
    if !a.checkpoint.is_file() {
        return Err(Failure::Runtime(anyhow!("checkpoint {} not found", a.checkpoint.display())));
    }
    let data = open_dataset(&a.data)?;
    let scene = split_scene(&data, a.split, a.scene)?;
    let views = data.load_scene(scene)?;
    if a.cond_view >= views.len() {
        return Err(Failure::Runtime(anyhow!(
            "conditioning view {} out of range for {} views",
            a.cond_view,
            views.len()
        )));
    }
    let targets: Vec<Pose> = (0..views.len())
        .filter(|&i| i != a.cond_view)
        .take(a.frames)
        .map(|i| views[i].pose)
        .collect();
    let trainer = load_checkpoint(&a.checkpoint)?;
    check_resolution(&trainer, &data)?;

    let dir = out_dir(root, &a.out, "sample")?;
    write_run_config(&dir, "sample", a.sampler.seed, serde_json::to_value(a).map_err(anyhow::Error::from)?)?;
    let input = views[a.cond_view].clone();
    let model = trainer.ema_model();
    let (frames, _) = generate_trajectory(&model, input.clone(), &targets, &a.sampler.config(), |j, _, t| {
        log::info!("frame {j} done ({} evaluations)", t.evaluations);
    })?;
    save_trajectory(&dir, &input, &frames)?;
    println!("wrote {} frames to {}", frames.len(), dir.display());
    Ok(())
}

fn check_resolution(trainer: &Trainer, data: &Dataset) -> anyhow::Result<()> {
    let r = trainer.net.config.resolution;
    if data.manifest.resolution != r {
        return Err(anyhow!(
            "dataset resolution {} does not match checkpoint resolution {r}",
            data.manifest.resolution
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct FrameMetrics {
    view: usize,
    psnr: f64,
    ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
struct SceneMetrics {
    scene: String,
    cond_view: usize,
    psnr: f64,
    ssim: f64,
    frames: Vec<FrameMetrics>,
}

fn eval(root: &Path, a: &EvalArgs) -> CmdResult {
    if !a.checkpoint.is_file() {
        return Err(Failure::Runtime(anyhow!("checkpoint {} not found", a.checkpoint.display())));
    }
    let data = open_dataset(&a.data)?;
    let mut scenes = data.scene_indices(a.split.into());
    if let Some(n) = a.max_scenes {
        scenes.truncate(n);
    }
    if scenes.is_empty() {
        return Err(Failure::Runtime(anyhow!("no scenes in split {:?}", a.split)));
    }
    if a.cond_view >= data.manifest.views_per_scene {
        return Err(Failure::Runtime(anyhow!(
            "conditioning view {} out of range for {} views per scene",
            a.cond_view,
            data.manifest.views_per_scene
        )));
    }
    let trainer = load_checkpoint(&a.checkpoint)?;
    check_resolution(&trainer, &data)?;
    let dir = out_dir(root, &a.out, "eval")?;
    write_run_config(&dir, "eval", a.sampler.seed, serde_json::to_value(a).map_err(anyhow::Error::from)?)?;

    let model = trainer.ema_model();
    let cfg = a.sampler.config();
    let mut results = Vec::with_capacity(scenes.len());
    for &s in &scenes {
        let id = data.manifest.scenes[s].id.clone();
        let views = data.load_scene(s)?;
        let mut order: Vec<usize> = (0..views.len()).filter(|&i| i != a.cond_view).collect();
        if let Some(n) = a.max_frames {
            order.truncate(n);
        }
        let targets: Vec<Pose> = order.iter().map(|&i| views[i].pose).collect();
        let input = views[a.cond_view].clone();
        let (frames, _) = generate_trajectory(&model, input.clone(), &targets, &cfg, |_, _, _| {})?;
        let scene_dir = dir.join(&id);
        fs::create_dir_all(&scene_dir).with_context(|| format!("creating {}", scene_dir.display()))?;
        save_trajectory(&scene_dir, &input, &frames)?;

        let mut per_frame = Vec::with_capacity(frames.len());
        for (f, &v) in frames.iter().zip(&order) {
            per_frame.push(FrameMetrics {
                view: v,
                psnr: psnr(&f.image, &views[v].image)?,
                ssim: ssim(&f.image, &views[v].image)?,
            });
        }
        let n = per_frame.len().max(1) as f64;
        let m = SceneMetrics {
            scene: id,
            cond_view: a.cond_view,
            psnr: per_frame.iter().map(|f| f.psnr).sum::<f64>() / n,
            ssim: per_frame.iter().map(|f| f.ssim).sum::<f64>() / n,
            frames: per_frame,
        };
        log::info!("{} psnr {:.3} ssim {:.4}", m.scene, m.psnr, m.ssim);
        results.push(m);
    }
    let n = results.len() as f64;
    let mean_psnr = results.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = results.iter().map(|r| r.ssim).sum::<f64>() / n;
    write_json(
        &dir.join("eval.json"),
        &json!({ "mean_psnr": mean_psnr, "mean_ssim": mean_ssim, "scenes": results }),
    )?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&format!("{} psnr {:.3} ssim {:.4}\n", r.scene, r.psnr, r.ssim));
    }
    text.push_str(&format!("mean psnr {mean_psnr:.3} ssim {mean_ssim:.4}\n"));
    write_text(&dir.join("eval.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Views to score with the indices that must stay in training.
struct ScoreInput {
    name: String,
    views: Vec<PosedImage>,
    conditioning: Vec<usize>,
}

fn load_trajectory(dir: &Path) -> anyhow::Result<ScoreInput> {
    let path = dir.join(TRAJECTORY_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let traj: Trajectory = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut views = Vec::with_capacity(traj.frames.len() + 1);
    for e in std::iter::once(&traj.input).chain(&traj.frames) {
        views.push(PosedImage {
            image: Image::load_png(&dir.join(&e.image))?,
            pose: e.pose,
            camera: traj.camera,
        });
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trajectory".into());
    Ok(ScoreInput {
        name,
        views,
        conditioning: vec![0],
    })
}

fn score(root: &Path, a: &ScoreArgs) -> CmdResult {
    if !(0.0..1.0).contains(&a.holdout_frac) {
        return Err(Failure::Usage(format!("--holdout-frac {} must be in [0, 1)", a.holdout_frac)));
    }
    let mut field = FieldConfig {
        seed: a.seed,
        ..FieldConfig::default()
    };
    if let Some(s) = a.field_steps {
        field.steps = s;
    }
    if let Some(r) = a.rays_per_step {
        field.rays_per_step = r;
    }
    if let Some(n) = a.samples_per_ray {
        field.n_samples = n;
    }
    field.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let inputs = if a.views.join(TRAJECTORY_FILE).is_file() {
        vec![load_trajectory(&a.views)?]
    } else {
        let data = open_dataset(&a.views)?;
        let mut idx = data.scene_indices(a.split.into());
        if let Some(p) = a.scene {
            idx = vec![split_scene(&data, a.split, p)?];
        }
        idx.into_iter()
            .map(|s| {
                Ok(ScoreInput {
                    name: data.manifest.scenes[s].id.clone(),
                    views: data.load_scene(s)?,
                    conditioning: Vec::new(),
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    if inputs.is_empty() {
        return Err(Failure::Runtime(anyhow!("nothing to score")));
    }

    let dir = out_dir(root, &a.out, "score")?;
    write_run_config(&dir, "score", a.seed, json!({ "field": field, "args": a }))?;
    let renders_dir = dir.join("renders");
    fs::create_dir_all(&renders_dir).with_context(|| format!("creating {}", renders_dir.display()))?;

    let mut scores = Vec::with_capacity(inputs.len());
    for input in &inputs {
        let holdout = holdout_indices(input.views.len(), a.holdout_frac, a.seed, &input.conditioning)?;
        if holdout.is_empty() {
            return Err(Failure::Runtime(anyhow!(
                "{}: holdout fraction {} selects no views out of {}",
                input.name,
                a.holdout_frac,
                input.views.len()
            )));
        }
        let (s, _, renders) = consistency_score(&input.name, &input.views, &input.conditioning, &holdout, &field)?;
        for (img, h) in renders.iter().zip(&holdout) {
            img.save_png(&renders_dir.join(format!("{}_{h:03}.png", input.name)))?;
        }
        log::info!("{} psnr {:.3} ssim {:.4}", s.scene, s.psnr, s.ssim);
        scores.push(s);
    }
    let report = ConsistencyReport::new(scores, &field);
    write_json(&dir.join("score.json"), &report)?;
    let text = report.to_text();
    write_text(&dir.join("score.txt"), &text)?;
    print!("{text}");
    Ok(())
}
