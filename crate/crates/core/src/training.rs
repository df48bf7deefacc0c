//! Denoiser training: ε-prediction loss over view pairs, unconditional
//! dropout, linear warmup, EMA and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose};
use crate::image::{stack_images, Image, PosedImage};
use crate::model::{randn, Architecture, DenoiserBatch, Snapshot, UNet, XUNetConfig};
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Dropout, Params};
use crate::scenes::draw_pair;

pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "viewdiff";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Examples over which the learning rate ramps linearly from 0 to `peak_lr`.
    pub warmup_examples: u64,
    pub ema_half_life_examples: f64,
    pub uncond_prob: f64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip. Diffusion training runs without one.
    pub grad_clip: Option<f64>,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            batch_size: 128,
            peak_lr: 1e-4,
            warmup_examples: 10_000_000,
            ema_half_life_examples: 500_000.0,
            uncond_prob: 0.1,
            adam: AdamConfig {
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            grad_clip: None,
            total_steps: 1_000_000,
            checkpoint_every: 10_000,
            seed: 0,
        }
    }

    /// Short-run schedule: a few thousand examples of warmup and EMA memory.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            peak_lr: 5e-4,
            warmup_examples: 1_000,
            ema_half_life_examples: 2_000.0,
            total_steps: 20_000,
            checkpoint_every: 1_000,
            ..Self::paper()
        }
    }

    pub fn tiny() -> Self {
        Self {
            batch_size: 4,
            peak_lr: 1e-3,
            warmup_examples: 200,
            ema_half_life_examples: 400.0,
            total_steps: 200,
            checkpoint_every: 100,
            ..Self::paper()
        }
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.peak_lr > 0.0
            && self.warmup_examples > 0
            && self.ema_half_life_examples > 0.0
            && self.total_steps > 0
            && self.checkpoint_every > 0
            && (0.0..=1.0).contains(&self.uncond_prob)
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training config: {self:?}")))
        }
    }

    /// Learning rate after `examples_seen` examples.
    pub fn lr_at(&self, examples_seen: u64) -> f64 {
        self.peak_lr * (examples_seen as f64 / self.warmup_examples as f64).min(1.0)
    }

    pub fn ema_decay(&self) -> f64 {
        ema_decay(self.batch_size, self.ema_half_life_examples)
    }
}

/// Per-step EMA decay giving the requested half-life in examples.
pub fn ema_decay(batch_size: usize, half_life_examples: f64) -> f64 {
    0.5f64.powf(batch_size as f64 / half_life_examples)
}

/// `ema ← d·ema + (1 − d)·params`.
pub fn ema_update(ema: &Params, params: &Params, decay: f64) -> Result<()> {
    for (name, var) in params.iter() {
        let e = ema.get(name)?;
        let next = (e.affine(decay, 0.0)? + var.as_tensor().affine(1.0 - decay, 0.0)?)?;
        ema.set(name, &next)?;
    }
    Ok(())
}

/// A batch of same-scene view pairs. Images are in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x1: Vec<Image>,
    pub x2: Vec<Image>,
    pub poses: Vec<[Pose; 2]>,
    pub camera: Camera,
}

/// Draws a scene uniformly, then two distinct views of it uniformly.
pub fn sample_pairs<R: Rng + ?Sized>(scenes: &[Vec<PosedImage>], batch_size: usize, rng: &mut R) -> Result<TrainBatch> {
    if scenes.is_empty() || scenes.iter().any(|s| s.len() < 2) {
        return Err(Error::InvalidArgument("every scene needs at least two views".into()));
    }
    let camera = scenes[0][0].camera;
    let mut batch = TrainBatch {
        x1: Vec::with_capacity(batch_size),
        x2: Vec::with_capacity(batch_size),
        poses: Vec::with_capacity(batch_size),
        camera,
    };
    let counts: Vec<usize> = scenes.iter().map(Vec::len).collect();
    for _ in 0..batch_size {
        let (s, i, j) = draw_pair(rng, &counts);
        let scene = &scenes[s];
        batch.x1.push(scene[i].image.clone());
        batch.x2.push(scene[j].image.clone());
        batch.poses.push([scene[i].pose, scene[j].pose]);
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub examples_seen: u64,
    pub uncond: usize,
}

#[derive(Debug)]
pub struct TrainState {
    pub params: Params,
    pub ema: Params,
    pub adam: Adam,
    pub step: u64,
    pub examples_seen: u64,
    /// Noise, timesteps, unconditional draws and dropout.
    pub rng: ChaCha8Rng,
    /// View-pair selection.
    pub data_rng: ChaCha8Rng,
}

#[derive(Debug)]
pub struct Trainer {
    pub net: UNet,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(net: UNet, config: TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let params = net.init_params(config.seed, dtype, &Device::Cpu)?;
        let ema = params.deep_clone()?;
        let adam = Adam::new(config.adam, &params)?;
        let state = TrainState {
            params,
            ema,
            adam,
            step: 0,
            examples_seen: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00_0001),
            data_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x6461_7461_0000_0002),
        };
        Ok(Self {
            net,
            config,
            schedule: NoiseSchedule::cosine(),
            state,
        })
    }

    /// EMA weights bound to the network, for sampling.
    pub fn ema_model(&self) -> Snapshot<'_> {
        Snapshot {
            net: &self.net,
            params: &self.state.ema,
        }
    }

    pub fn next_batch(&mut self, scenes: &[Vec<PosedImage>]) -> Result<TrainBatch> {
        sample_pairs(scenes, self.config.batch_size, &mut self.state.data_rng)
    }

    /// Builds the noised denoiser inputs and the target noise for a batch.
    fn prepare(&mut self, batch: &TrainBatch) -> Result<(DenoiserBatch, Tensor, usize)> {
        let n = batch.x1.len();
        if n == 0 || batch.x2.len() != n || batch.poses.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "train batch with {} / {} images and {} pose pairs",
                n,
                batch.x2.len(),
                batch.poses.len()
            )));
        }
        let dtype = self.state.params.dtype();
        let device = Device::Cpu;
        let rng = &mut self.state.rng;
        let ts: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let logsnr: Vec<f64> = ts.iter().map(|&t| self.schedule.logsnr(t)).collect::<Result<_>>()?;
        let cond_mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= self.config.uncond_prob).collect();

        let signed = |v: &[Image]| v.iter().map(Image::to_signed).collect::<Vec<_>>();
        let x1 = signed(&batch.x1);
        let x2 = signed(&batch.x2);
        let x1 = stack_images(&x1.iter().collect::<Vec<_>>(), dtype, &device)?;
        let x2 = stack_images(&x2.iter().collect::<Vec<_>>(), dtype, &device)?;
        let eps = randn(rng, x2.dims(), dtype, &device)?;
        let z = diffusion::q_sample_batch(&x2, &logsnr, &eps)?;

        let uncond = cond_mask.iter().filter(|&&c| !c).count();
        let x1 = if uncond > 0 {
            let noise = randn(rng, x1.dims(), dtype, &device)?;
            let keep: Vec<f32> = cond_mask.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
            let keep = Tensor::from_vec(keep, (n, 1, 1, 1), &device)?.to_dtype(dtype)?;
            let drop = keep.affine(-1.0, 1.0)?;
            (x1.broadcast_mul(&keep)? + noise.broadcast_mul(&drop)?)?
        } else {
            x1
        };
        let pairs = logsnr
            .iter()
            .zip(&cond_mask)
            .map(|(&l, &c)| {
                let clean = if c { self.schedule.logsnr_max } else { self.schedule.logsnr_min };
                [clean, l]
            })
            .collect();
        let inputs = DenoiserBatch {
            x: x1,
            z,
            logsnr: pairs,
            poses: batch.poses.clone(),
            camera: batch.camera,
            cond_mask,
        };
        Ok((inputs, eps, uncond))
    }

    /// Loss of the current parameters on a batch, without updating anything
    /// except the random streams.
    pub fn eval_loss(&mut self, batch: &TrainBatch) -> Result<f64> {
        let (inputs, eps, _) = self.prepare(batch)?;
        let eps_hat = self.net.forward(&self.state.params, &inputs, &mut Dropout::eval())?;
        Ok(diffusion::eps_loss(&eps_hat, &eps)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepStats> {
        let (inputs, eps, uncond) = self.prepare(batch)?;
        let rate = self.net.config.dropout;
        let eps_hat = {
            let mut dropout = Dropout::train(rate, &mut self.state.rng);
            self.net.forward(&self.state.params, &inputs, &mut dropout)?
        };
        let loss_t = diffusion::eps_loss(&eps_hat, &eps)?;
        let loss = loss_t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let step = self.state.step + 1;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let grads = loss_t.backward()?;
        let mut grads = self.state.params.gradients(&grads)?;
        if let Some(max) = self.config.grad_clip {
            clip_grad_norm(&mut grads, max)?;
        }
        let examples_seen = self.state.examples_seen + inputs.len() as u64;
        let lr = self.config.lr_at(examples_seen);
        self.state.adam.update(&self.state.params, &grads, lr)?;
        ema_update(&self.state.ema, &self.state.params, ema_decay(inputs.len(), self.config.ema_half_life_examples))?;
        self.state.step = step;
        self.state.examples_seen = examples_seen;
        Ok(StepStats {
            step,
            loss,
            lr,
            examples_seen,
            uncond,
        })
    }

    /// Runs until `total_steps`, appending to `metrics` and writing
    /// `checkpoint.safetensors` into `out_dir` periodically and at the end.
    pub fn run(
        &mut self,
        scenes: &[Vec<PosedImage>],
        out_dir: &Path,
        metrics: &mut MetricsLog,
        mut on_step: impl FnMut(&StepStats),
    ) -> Result<()> {
        let ckpt = out_dir.join("checkpoint.safetensors");
        while self.state.step < self.config.total_steps {
            let batch = self.next_batch(scenes)?;
            let stats = self.train_step(&batch)?;
            metrics.record(&stats)?;
            on_step(&stats);
            if stats.step % self.config.checkpoint_every == 0 {
                self.save(&ckpt)?;
            }
        }
        self.save(&ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_checkpoint(path)
    }
}

/// Plain-text log with one `step loss lr examples_seen` line per step.
pub struct MetricsLog {
    file: Option<fs::File>,
    pub history: Vec<StepStats>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self {
            file: None,
            history: Vec::new(),
        }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "step loss lr examples_seen").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Some(file),
            history: Vec::new(),
        })
    }

    pub fn record(&mut self, s: &StepStats) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{} {:.6} {:.6e} {}", s.step, s.loss, s.lr, s.examples_seen)
                .map_err(|e| Error::io(Path::new("metrics.txt"), e))?;
        }
        self.history.push(*s);
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    architecture: Architecture,
    model: XUNetConfig,
    train: TrainConfig,
    schedule: NoiseSchedule,
    step: u64,
    examples_seen: u64,
    adam_step: u64,
    rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
}

fn st_dtype(dtype: DType) -> Result<StDtype> {
    match dtype {
        DType::F32 => Ok(StDtype::F32),
        DType::F64 => Ok(StDtype::F64),
        other => Err(Error::InvalidArgument(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::InvalidArgument(format!("unsupported checkpoint dtype {other:?}"))),
    })
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let s = &trainer.state;
    let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
    for (prefix, map) in [
        ("params", s.params.tensors()),
        ("ema", s.ema.tensors()),
        ("adam.m", s.adam.m.clone()),
        ("adam.v", s.adam.v.clone()),
    ] {
        for (k, t) in map {
            named.insert(format!("{prefix}.{k}"), t);
        }
    }
    let dtype = st_dtype(s.params.dtype())?;
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = named
        .into_iter()
        .map(|(k, t)| Ok((k, t.dims().to_vec(), tensor_bytes(&t)?)))
        .collect::<Result<_>>()?;
    let views = buffers
        .iter()
        .map(|(k, shape, bytes)| {
            TensorView::new(dtype, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::CorruptCheckpoint {
                    path: path.to_path_buf(),
                    msg: e.to_string(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        architecture: trainer.net.arch,
        model: trainer.net.config.clone(),
        train: trainer.config.clone(),
        schedule: trainer.schedule,
        step: s.step,
        examples_seen: s.examples_seen,
        adam_step: s.adam.step,
        rng: s.rng.clone(),
        data_rng: s.data_rng.clone(),
    };
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    if !path.exists() {
        return Err(Error::CheckpointNotFound(path.to_path_buf()));
    }
    let corrupt = |msg: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| corrupt("missing metadata".into()))?;
    let version: serde_json::Value = serde_json::from_str(raw).map_err(|e| corrupt(e.to_string()))?;
    let found = version["format_version"].as_u64().unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            found,
        });
    }
    let meta: CheckpointMeta = serde_json::from_str(raw).map_err(|e| corrupt(e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(e.to_string()))?;

    let mut groups: BTreeMap<&str, BTreeMap<String, Tensor>> = BTreeMap::new();
    let mut dtype = None;
    for (name, view) in st.iter() {
        let (t, dt) = match view.dtype() {
            StDtype::F32 => {
                let v: Vec<f32> = view
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect();
                (Tensor::from_vec(v, view.shape(), &Device::Cpu)?, DType::F32)
            }
            StDtype::F64 => {
                let v: Vec<f64> = view
                    .data()
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                (Tensor::from_vec(v, view.shape(), &Device::Cpu)?, DType::F64)
            }
            other => return Err(corrupt(format!("unexpected dtype {other:?} for {name}"))),
        };
        dtype = Some(dt);
        let (group, rest) = ["params.", "ema.", "adam.m.", "adam.v."]
            .iter()
            .find_map(|p| name.strip_prefix(p).map(|r| (*p, r)))
            .ok_or_else(|| corrupt(format!("unexpected tensor {name}")))?;
        groups.entry(group).or_default().insert(rest.to_string(), t);
    }
    let dtype = dtype.ok_or_else(|| corrupt("no tensors".into()))?;
    let mut take = |g: &str| groups.remove(g).ok_or_else(|| corrupt(format!("missing group {g}")));
    let params = Params::from_tensors(take("params.")?, dtype, &Device::Cpu)?;
    let ema = Params::from_tensors(take("ema.")?, dtype, &Device::Cpu)?;
    let m = take("adam.m.")?;
    let v = take("adam.v.")?;

    let net = UNet::new(meta.architecture, meta.model)?;
    let expected: Vec<String> = net.param_specs().into_iter().map(|s| s.name).collect();
    let found: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let mut expected_sorted = expected.clone();
    expected_sorted.sort();
    if expected_sorted != found || ema.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(corrupt("parameter set does not match the stored model config".into()));
    }
    let adam = Adam {
        config: meta.train.adam,
        step: meta.adam_step,
        m,
        v,
    };
    Ok(Trainer {
        net,
        config: meta.train,
        schedule: meta.schedule,
        state: TrainState {
            params,
            ema,
            adam,
            step: meta.step,
            examples_seen: meta.examples_seen,
            rng: meta.rng,
            data_rng: meta.data_rng,
        },
    })
}
