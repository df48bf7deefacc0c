//! Frame generation with stochastic conditioning.
//!
//! Every denoising step re-draws the conditioning view uniformly from the
//! growing set of known views, so frames generated later are coupled to all
//! earlier ones without the network ever seeing more than two frames.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose};
use crate::image::{Image, PosedImage};
use crate::model::{randn, regression_forward, DenoiserBatch, EpsModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Conditioning view redrawn from the whole set at every step.
    Stochastic,
    /// Always conditions on the first view.
    Naive,
    /// Single network evaluation from pure noise.
    Regression,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(Self::Stochastic),
            "naive" => Ok(Self::Naive),
            "regression" => Ok(Self::Regression),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampler mode {other:?} (expected stochastic, naive or regression)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_weight: f64,
    pub mode: SamplerMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 256,
            guidance_weight: 3.0,
            mode: SamplerMode::Stochastic,
            seed: 0,
        }
    }
}

/// Known views of a scene. Images are in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ConditioningSet {
    views: Vec<PosedImage>,
}

impl ConditioningSet {
    pub fn new(first: PosedImage) -> Self {
        Self { views: vec![first] }
    }

    pub fn from_views(views: Vec<PosedImage>) -> Result<Self> {
        let mut it = views.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::InvalidArgument("conditioning set needs at least one view".into()))?;
        let mut set = Self::new(first);
        for v in it {
            set.push(v)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, view: PosedImage) -> Result<()> {
        let cam = self.camera();
        if view.camera != cam || !view.image.same_shape(&self.views[0].image) {
            return Err(Error::InvalidArgument(
                "all conditioning views must share one camera".into(),
            ));
        }
        self.views.push(view);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn camera(&self) -> Camera {
        self.views[0].camera
    }

    pub fn views(&self) -> &[PosedImage] {
        &self.views
    }
}

/// Record of what the sampler did for one frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    /// Conditioning index drawn at each step, first step first.
    pub cond_indices: Vec<usize>,
    /// Single-frame network evaluations (rows of every batch).
    pub evaluations: usize,
}

fn frame_rng(seed: u64, frame: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame * 2 + stream);
    rng
}

/// Generates one frame at `target` from the views in `set`.
pub fn sample_frame(
    model: &dyn EpsModel,
    set: &ConditioningSet,
    target: &Pose,
    cfg: &SamplerConfig,
    frame_index: u64,
) -> Result<(PosedImage, SampleTrace)> {
    let camera = set.camera();
    let mut noise_rng = frame_rng(cfg.seed, frame_index, 0);
    let mut index_rng = frame_rng(cfg.seed, frame_index, 1);
    let mut trace = SampleTrace::default();

    if cfg.mode == SamplerMode::Regression {
        let x = set.views[0].image.to_signed();
        let out = regression_forward(model, &x, [set.views[0].pose, *target], &camera, &mut noise_rng)?;
        trace.evaluations = 1;
        trace.cond_indices.push(0);
        return Ok((posed(out.to_unit(), *target, camera), trace));
    }
    if cfg.num_steps == 0 {
        return Err(Error::InvalidArgument("num_steps must be positive".into()));
    }

    let (dtype, device) = (model.dtype(), model.device());
    let schedule = NoiseSchedule::cosine();
    let grid = schedule.grid(cfg.num_steps)?;
    let signed: Vec<Tensor> = set
        .views
        .iter()
        .map(|v| Ok(v.image.to_signed().to_tensor(dtype, &device)?.unsqueeze(0)?))
        .collect::<Result<_>>()?;
    let shape = signed[0].dims().to_vec();
    let mut z = randn(&mut noise_rng, &shape, dtype, &device)?;

    for i in (1..=cfg.num_steps).rev() {
        let logsnr_t = grid[i];
        let logsnr_s = grid[i - 1];
        let idx = match cfg.mode {
            SamplerMode::Stochastic => index_rng.random_range(0..set.len()),
            _ => 0,
        };
        trace.cond_indices.push(idx);
        let uncond_x = randn(&mut noise_rng, &shape, dtype, &device)?;
        let pose_i = set.views[idx].pose;
        let batch = DenoiserBatch {
            x: Tensor::cat(&[&signed[idx], &uncond_x], 0)?,
            z: Tensor::cat(&[&z, &z], 0)?,
            logsnr: vec![
                [schedule.logsnr_max, logsnr_t],
                [schedule.logsnr_min, logsnr_t],
            ],
            poses: vec![[pose_i, *target]; 2],
            camera,
            cond_mask: vec![true, false],
        };
        let eps = model.predict_eps(&batch)?;
        trace.evaluations += 2;
        let eps = diffusion::guide(&eps.narrow(0, 0, 1)?, &eps.narrow(0, 1, 1)?, cfg.guidance_weight)?;
        let x_hat = diffusion::predict_x(&z, logsnr_t, &eps)?;
        if i == 1 {
            let img = Image::from_tensor(&x_hat)?.to_unit();
            return Ok((posed(img, *target, camera), trace));
        }
        let noise = randn(&mut noise_rng, &shape, dtype, &device)?;
        z = diffusion::posterior_step(&z, &x_hat, logsnr_t, logsnr_s, Some(&noise))?;
    }
    unreachable!("loop returns at its final step")
}

fn posed(image: Image, pose: Pose, camera: Camera) -> PosedImage {
    PosedImage { image, pose, camera }
}

/// Autoregressively generates one frame per target pose; each frame joins
/// the conditioning set once complete.
pub fn generate_trajectory(
    model: &dyn EpsModel,
    input: PosedImage,
    targets: &[Pose],
    cfg: &SamplerConfig,
    mut on_frame: impl FnMut(usize, &PosedImage, &SampleTrace),
) -> Result<(Vec<PosedImage>, Vec<SampleTrace>)> {
    let mut set = ConditioningSet::new(input);
    let mut frames = Vec::with_capacity(targets.len());
    let mut traces = Vec::with_capacity(targets.len());
    for (j, target) in targets.iter().enumerate() {
        let (frame, trace) = sample_frame(model, &set, target, cfg, j as u64)?;
        on_frame(j, &frame, &trace);
        set.push(frame.clone())?;
        frames.push(frame);
        traces.push(trace);
    }
    Ok((frames, traces))
}
