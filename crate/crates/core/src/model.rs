//! Two-frame denoisers.
//!
//! [`UNet`] implements both the X-UNet (two frames stacked on a frame axis,
//! shared weights, per-frame noise levels, self- then cross-attention) and
//! the Concat-UNet baseline (both images concatenated on the channel axis and
//! processed as a single stream). Every residual block is FiLM-modulated by
//! the sum of the noise-level embedding and that resolution's pose embedding.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, LOGSNR_MAX, LOGSNR_MIN};
use crate::error::{Error, Result};
use crate::geometry::{posenc_ddpm, Camera, Pose, PoseEmbedder, RayEncodingConfig};
use crate::image::Image;
use crate::nn::{self, count_params, Conv3x3, Dense, Dropout, GroupNorm, ParamSpec, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    XUnet,
    ConcatUnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XUNetConfig {
    /// Square input resolution in pixels.
    pub resolution: usize,
    pub ch: usize,
    pub ch_mult: Vec<usize>,
    pub emb_ch: usize,
    pub num_res_blocks: usize,
    pub attn_resolutions: Vec<usize>,
    pub attn_heads: usize,
    pub dropout: f64,
    pub use_pos_emb: bool,
    pub use_ref_pose_emb: bool,
    pub num_groups: usize,
    #[serde(default)]
    pub ray_encoding: RayEncodingConfig,
}

impl XUNetConfig {
    /// Full-size configuration at 128×128 (~471M parameters as an X-UNet).
    pub fn paper() -> Self {
        Self {
            resolution: 128,
            ch: 256,
            ch_mult: vec![1, 2, 2, 4],
            emb_ch: 1024,
            num_res_blocks: 3,
            attn_resolutions: vec![8, 16, 32],
            attn_heads: 4,
            dropout: 0.1,
            use_pos_emb: true,
            use_ref_pose_emb: true,
            num_groups: 32,
            ray_encoding: RayEncodingConfig::default(),
        }
    }

    /// Desk-scale configuration for 32×32 inputs.
    pub fn desk() -> Self {
        Self {
            resolution: 32,
            ch: 32,
            ch_mult: vec![1, 2, 4],
            emb_ch: 128,
            num_res_blocks: 2,
            attn_resolutions: vec![8, 16],
            num_groups: 32,
            ..Self::paper()
        }
    }

    /// Small configuration for 16×16 smoke runs.
    pub fn tiny() -> Self {
        Self {
            resolution: 16,
            ch: 16,
            ch_mult: vec![1, 2],
            emb_ch: 64,
            num_res_blocks: 1,
            attn_resolutions: vec![8],
            num_groups: 16,
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

    pub fn num_levels(&self) -> usize {
        self.ch_mult.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.ch_mult.is_empty() || self.ch == 0 || self.num_res_blocks == 0 {
            return bad("ch, ch_mult and num_res_blocks must be non-empty/positive".into());
        }
        let factor = 1 << (self.num_levels() - 1);
        if self.resolution == 0 || self.resolution % factor != 0 {
            return bad(format!(
                "resolution {} not divisible by 2^{} for {} levels",
                self.resolution,
                self.num_levels() - 1,
                self.num_levels()
            ));
        }
        if self.num_groups == 0 || self.ch % self.num_groups != 0 {
            return bad(format!("{} groups do not divide ch = {}", self.num_groups, self.ch));
        }
        for m in &self.ch_mult {
            let c = self.ch * m;
            if c % self.attn_heads != 0 {
                return bad(format!("{} heads do not divide {c} channels", self.attn_heads));
            }
        }
        if self.emb_ch % 2 != 0 || self.emb_ch < 4 {
            return bad(format!("emb_ch must be even and >= 4, got {}", self.emb_ch));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Inputs for a batch of `B` frame pairs. Frame 0 is the clean conditioning
/// view `x`, frame 1 the noisy target `z`. Images are `(B, 3, H, W)` in `[−1, 1]`.
#[derive(Debug, Clone)]
pub struct DenoiserBatch {
    pub x: Tensor,
    pub z: Tensor,
    /// `[clean frame, noisy frame]` log-SNR per element.
    pub logsnr: Vec<[f64; 2]>,
    pub poses: Vec<[Pose; 2]>,
    pub camera: Camera,
    /// `false` selects the unconditional pathway (pose embedding zeroed).
    pub cond_mask: Vec<bool>,
}

impl DenoiserBatch {
    pub fn len(&self) -> usize {
        self.logsnr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logsnr.is_empty()
    }

    fn validate(&self, resolution: usize) -> Result<()> {
        let (b, c, h, w) = self.x.dims4()?;
        if self.z.dims() != self.x.dims() {
            return Err(Error::ShapeMismatch(format!(
                "frames differ: {:?} vs {:?}",
                self.x.dims(),
                self.z.dims()
            )));
        }
        if c != 3 || h != resolution || w != resolution {
            return Err(Error::ShapeMismatch(format!(
                "expected (B, 3, {resolution}, {resolution}) frames, got {:?}",
                self.x.dims()
            )));
        }
        if self.logsnr.len() != b || self.poses.len() != b || self.cond_mask.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "batch of {b} with {} log-SNR pairs, {} pose pairs, {} mask entries",
                self.logsnr.len(),
                self.poses.len(),
                self.cond_mask.len()
            )));
        }
        Ok(())
    }
}

/// Anything that predicts ε for a [`DenoiserBatch`].
pub trait EpsModel {
    fn predict_eps(&self, batch: &DenoiserBatch) -> Result<Tensor>;

    fn dtype(&self) -> DType {
        DType::F32
    }

    fn device(&self) -> Device {
        Device::Cpu
    }
}

/// Maps log-SNR to `(0, 1)`: `2·atan(exp(−λ/2))/π` after clipping to ±20.
pub fn logsnr_to_unit(logsnr: f64) -> f64 {
    let l = logsnr.clamp(LOGSNR_MIN, LOGSNR_MAX);
    2.0 * (-l / 2.0).exp().atan() / PI
}

#[derive(Debug, Clone)]
enum Resample {
    Up,
    Down,
}

#[derive(Debug, Clone)]
struct ResnetBlock {
    norm1: GroupNorm,
    conv1: Conv3x3,
    film: Dense,
    norm2: GroupNorm,
    conv2: Conv3x3,
    skip: Option<Dense>,
    resample: Option<Resample>,
    features: usize,
}

impl ResnetBlock {
    fn new(name: &str, in_ch: usize, features: usize, emb_ch: usize, groups: usize, resample: Option<Resample>) -> Self {
        Self {
            norm1: GroupNorm::new(&format!("{name}.norm1"), in_ch, groups),
            conv1: Conv3x3::new(&format!("{name}.conv1"), in_ch, features),
            film: Dense::new(&format!("{name}.film"), emb_ch, 2 * features),
            norm2: GroupNorm::new(&format!("{name}.norm2"), features, groups),
            conv2: Conv3x3::new(&format!("{name}.conv2"), features, features).zero_init(),
            skip: (in_ch != features).then(|| Dense::new(&format!("{name}.skip"), in_ch, features)),
            resample,
            features,
        }
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm1.specs(out);
        self.conv1.specs(out);
        self.film.specs(out);
        self.norm2.specs(out);
        self.conv2.specs(out);
        if let Some(s) = &self.skip {
            s.specs(out);
        }
    }

    /// `emb_act` is the already-activated embedding at the output resolution.
    fn forward(&self, p: &Params, h_in: &Tensor, emb_act: &Tensor, dropout: &mut Dropout) -> Result<Tensor> {
        let mut h = nn::silu(&self.norm1.forward(p, h_in)?)?;
        let mut h_in = h_in.clone();
        match self.resample {
            Some(Resample::Down) => {
                h = h.avg_pool2d(2)?;
                h_in = h_in.avg_pool2d(2)?;
            }
            Some(Resample::Up) => {
                let (_, _, hh, ww) = h.dims4()?;
                h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
                h_in = h_in.upsample_nearest2d(2 * hh, 2 * ww)?;
            }
            None => {}
        }
        let h = self.conv1.forward(p, &h)?;
        let h = self.norm2.forward(p, &h)?;
        let film = self.film.forward_channels(p, emb_act)?;
        let scale = film.narrow(1, 0, self.features)?;
        let shift = film.narrow(1, self.features, self.features)?;
        let h = (h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift))?;
        let h = dropout.apply(&nn::silu(&h)?)?;
        let h = self.conv2.forward(p, &h)?;
        let h_in = match &self.skip {
            Some(s) => s.forward_channels(p, &h_in)?,
            None => h_in,
        };
        Ok((h + h_in)?.affine(FRAC_1_SQRT_2, 0.0)?)
    }
}

#[derive(Debug, Clone)]
struct AttnBlock {
    norm: GroupNorm,
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
    heads: usize,
    cross: bool,
}

impl AttnBlock {
    fn new(name: &str, ch: usize, heads: usize, groups: usize, cross: bool) -> Self {
        Self {
            norm: GroupNorm::new(&format!("{name}.norm"), ch, groups),
            q: Dense::new(&format!("{name}.query"), ch, ch),
            k: Dense::new(&format!("{name}.key"), ch, ch),
            v: Dense::new(&format!("{name}.value"), ch, ch),
            out: Dense::new(&format!("{name}.out"), ch, ch).zero_init(),
            heads,
            cross,
        }
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.norm.specs(out);
        self.q.specs(out);
        self.k.specs(out);
        self.v.specs(out);
        self.out.specs(out);
    }

    fn forward(&self, p: &Params, h_in: &Tensor) -> Result<Tensor> {
        let (n, c, hh, ww) = h_in.dims4()?;
        let hw = hh * ww;
        let head_dim = c / self.heads;
        let seq = self
            .norm
            .forward(p, h_in)?
            .reshape((n, c, hw))?
            .transpose(1, 2)?
            .contiguous()?;
        let kv_src = if self.cross { swap_frames(&seq)? } else { seq.clone() };
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((n, hw, self.heads, head_dim))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(p, &seq)?)?;
        let k = split(self.k.forward(p, &kv_src)?)?;
        let v = split(self.v.forward(p, &kv_src)?)?;
        let scores = q
            .matmul(&k.transpose(2, 3)?.contiguous()?)?
            .affine(1.0 / (head_dim as f64).sqrt(), 0.0)?;
        let attn = nn::softmax_last(&scores)?;
        let o = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, hw, c))?;
        let o = self
            .out
            .forward(p, &o)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, c, hh, ww))?;
        Ok((o + h_in)?.affine(FRAC_1_SQRT_2, 0.0)?)
    }
}

/// Swaps the two frames of every pair along an interleaved `(2B, …)` axis.
fn swap_frames(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let n = dims[0];
    let mut paired = vec![n / 2, 2];
    paired.extend_from_slice(&dims[1..]);
    let t = x.reshape(paired)?;
    let swapped = Tensor::cat(&[t.narrow(1, 1, 1)?, t.narrow(1, 0, 1)?], 1)?;
    Ok(swapped.reshape(dims)?)
}

#[derive(Debug, Clone)]
struct UNetBlock {
    res: ResnetBlock,
    attn: Vec<AttnBlock>,
}

impl UNetBlock {
    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.res.specs(out);
        for a in &self.attn {
            a.specs(out);
        }
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Block(UNetBlock),
    Resample(ResnetBlock),
}

/// The denoiser network description. Parameters are held separately in a
/// [`Params`] store created from [`UNet::param_specs`].
#[derive(Debug, Clone)]
pub struct UNet {
    pub arch: Architecture,
    pub config: XUNetConfig,
    logsnr_dense0: Dense,
    logsnr_dense1: Dense,
    pose: PoseEmbedder,
    conv_in: Conv3x3,
    /// `(level, stage)` in execution order.
    down: Vec<(usize, Stage)>,
    middle: UNetBlock,
    up: Vec<(usize, Stage)>,
    out_norm: GroupNorm,
    conv_out: Conv3x3,
    /// Skip the cross-attention layers (wiring ablation).
    cross_attention_enabled: bool,
}

impl UNet {
    pub fn new(arch: Architecture, config: XUNetConfig) -> Result<Self> {
        config.validate()?;
        let paired = arch == Architecture::XUnet;
        let levels = config.num_levels();
        let e = config.emb_ch;
        let g = config.num_groups;
        let logsnr_in = if paired { e } else { 2 * e };
        let pose = PoseEmbedder::new(
            config.ray_encoding,
            config.resolution,
            e,
            levels,
            config.use_pos_emb,
            config.use_ref_pose_emb,
            !paired,
        )?;
        let in_ch = if paired { 3 } else { 6 };
        let block = |name: String, cin: usize, cout: usize, res: usize| UNetBlock {
            res: ResnetBlock::new(&format!("{name}.res"), cin, cout, e, g, None),
            attn: if config.attn_resolutions.contains(&res) {
                let mut v = vec![AttnBlock::new(&format!("{name}.self_attn"), cout, config.attn_heads, g, false)];
                if paired {
                    v.push(AttnBlock::new(&format!("{name}.cross_attn"), cout, config.attn_heads, g, true));
                }
                v
            } else {
                vec![]
            },
        };

        let mut down = Vec::new();
        let mut skips = vec![config.ch];
        let mut c = config.ch;
        let mut res = config.resolution;
        for level in 0..levels {
            let f = config.ch * config.ch_mult[level];
            for b in 0..config.num_res_blocks {
                down.push((level, Stage::Block(block(format!("down{level}.block{b}"), c, f, res))));
                c = f;
                skips.push(c);
            }
            if level != levels - 1 {
                down.push((
                    level + 1,
                    Stage::Resample(ResnetBlock::new(&format!("down{level}.downsample"), c, c, e, g, Some(Resample::Down))),
                ));
                res /= 2;
                skips.push(c);
            }
        }
        let middle = block("mid".into(), c, c, res);
        let mut up = Vec::new();
        for level in (0..levels).rev() {
            let f = config.ch * config.ch_mult[level];
            for b in 0..=config.num_res_blocks {
                let s = skips.pop().expect("skip bookkeeping");
                up.push((level, Stage::Block(block(format!("up{level}.block{b}"), c + s, f, res))));
                c = f;
            }
            if level != 0 {
                up.push((
                    level - 1,
                    Stage::Resample(ResnetBlock::new(&format!("up{level}.upsample"), c, c, e, g, Some(Resample::Up))),
                ));
                res *= 2;
            }
        }
        debug_assert!(skips.is_empty());
        Ok(Self {
            arch,
            logsnr_dense0: Dense::new("cond.logsnr_dense0", logsnr_in, e),
            logsnr_dense1: Dense::new("cond.logsnr_dense1", e, e),
            pose,
            conv_in: Conv3x3::new("conv_in", in_ch, config.ch),
            down,
            middle,
            up,
            out_norm: GroupNorm::new("out_norm", c, g),
            conv_out: Conv3x3::new("conv_out", c, 3).zero_init(),
            config,
            cross_attention_enabled: true,
        })
    }

    pub fn xunet(config: XUNetConfig) -> Result<Self> {
        Self::new(Architecture::XUnet, config)
    }

    pub fn concat_unet(config: XUNetConfig) -> Result<Self> {
        Self::new(Architecture::ConcatUnet, config)
    }

    /// Disables the cross-attention layers while keeping their parameters.
    pub fn without_cross_attention(mut self) -> Self {
        self.cross_attention_enabled = false;
        self
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.logsnr_dense0.specs(&mut out);
        self.logsnr_dense1.specs(&mut out);
        self.pose.specs(&mut out);
        self.conv_in.specs(&mut out);
        for (_, s) in self.down.iter().chain(&self.up) {
            match s {
                Stage::Block(b) => b.specs(&mut out),
                Stage::Resample(r) => r.specs(&mut out),
            }
        }
        self.middle.specs(&mut out);
        self.out_norm.specs(&mut out);
        self.conv_out.specs(&mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        count_params(&self.param_specs())
    }

    pub fn init_params(&self, seed: u64, dtype: DType, device: &Device) -> Result<Params> {
        Params::init(&self.param_specs(), seed, dtype, device)
    }

    /// Initialises every parameter, including zero-init layers, which get
    /// `Normal(0, std)` instead. Used for gradient and wiring checks.
    pub fn init_params_nonzero(&self, seed: u64, std: f64, dtype: DType, device: &Device) -> Result<Params> {
        let specs: Vec<ParamSpec> = self
            .param_specs()
            .into_iter()
            .map(|mut s| {
                if s.init == nn::Init::Zeros {
                    s.init = nn::Init::Normal { std };
                }
                s
            })
            .collect();
        Params::init(&specs, seed, dtype, device)
    }

    fn paired(&self) -> bool {
        self.arch == Architecture::XUnet
    }

    /// Noise-level embedding, `(N, emb_ch)` with `N = 2B` for the X-UNet
    /// (one row per frame) and `N = B` for the Concat-UNet.
    pub fn logsnr_embed(&self, p: &Params, logsnr: &[[f64; 2]]) -> Result<Tensor> {
        let units: Vec<f64> = logsnr.iter().flatten().map(|&l| logsnr_to_unit(l)).collect();
        let pe = posenc_ddpm(&units, self.config.emb_ch, 1.0)?;
        let rows = if self.paired() { units.len() } else { logsnr.len() };
        let pe = Tensor::from_vec(pe, (rows, self.logsnr_dense0.in_dim), p.device())?.to_dtype(p.dtype())?;
        let h = self.logsnr_dense0.forward(p, &pe)?;
        self.logsnr_dense1.forward(p, &nn::silu(&h)?)
    }

    /// Predicted ε for the noisy frame, `(B, 3, H, W)`.
    pub fn forward(&self, p: &Params, batch: &DenoiserBatch, dropout: &mut Dropout) -> Result<Tensor> {
        batch.validate(self.config.resolution)?;
        let (b, _, hh, ww) = batch.x.dims4()?;
        let x = batch.x.to_dtype(p.dtype())?;
        let z = batch.z.to_dtype(p.dtype())?;

        let logsnr_emb = self.logsnr_embed(p, &batch.logsnr)?;
        let n = logsnr_emb.dim(0)?;
        let logsnr_emb = logsnr_emb.reshape((n, self.config.emb_ch, 1, 1))?;
        let raw = self.pose.raw(&batch.poses, &batch.camera, &batch.cond_mask, p.dtype(), p.device())?;
        let emb: Vec<Tensor> = self
            .pose
            .forward(p, &raw)?
            .iter()
            .map(|pe| nn::silu(&pe.broadcast_add(&logsnr_emb)?))
            .collect::<Result<_>>()?;

        let h = if self.paired() {
            Tensor::stack(&[&x, &z], 1)?.reshape((2 * b, 3, hh, ww))?
        } else {
            Tensor::cat(&[&x, &z], 1)?
        };
        let mut h = self.conv_in.forward(p, &h)?;
        let mut hs = vec![h.clone()];
        for (level, stage) in &self.down {
            h = self.run_stage(p, stage, &h, &emb[*level], dropout)?;
            hs.push(h.clone());
        }
        h = self.run_block(p, &self.middle, &h, emb.last().expect("at least one level"), dropout)?;
        for (level, stage) in &self.up {
            if let Stage::Block(_) = stage {
                let skip = hs.pop().expect("skip bookkeeping");
                h = Tensor::cat(&[&h, &skip], 1)?;
            }
            h = self.run_stage(p, stage, &h, &emb[*level], dropout)?;
        }
        let h = nn::silu(&self.out_norm.forward(p, &h)?)?;
        let out = self.conv_out.forward(p, &h)?;
        if self.paired() {
            Ok(out.reshape((b, 2, 3, hh, ww))?.narrow(1, 1, 1)?.squeeze(1)?)
        } else {
            Ok(out)
        }
    }

    fn run_stage(&self, p: &Params, stage: &Stage, h: &Tensor, emb: &Tensor, dropout: &mut Dropout) -> Result<Tensor> {
        match stage {
            Stage::Block(block) => self.run_block(p, block, h, emb, dropout),
            Stage::Resample(r) => r.forward(p, h, emb, dropout),
        }
    }

    fn run_block(&self, p: &Params, block: &UNetBlock, h: &Tensor, emb: &Tensor, dropout: &mut Dropout) -> Result<Tensor> {
        let mut h = block.res.forward(p, h, emb, dropout)?;
        for a in &block.attn {
            if a.cross && !self.cross_attention_enabled {
                continue;
            }
            h = a.forward(p, &h)?;
        }
        Ok(h)
    }
}

/// A network bound to a parameter snapshot, evaluated without dropout.
#[derive(Clone, Copy)]
pub struct Snapshot<'a> {
    pub net: &'a UNet,
    pub params: &'a Params,
}

impl EpsModel for Snapshot<'_> {
    fn predict_eps(&self, batch: &DenoiserBatch) -> Result<Tensor> {
        Ok(self.net.forward(self.params, batch, &mut Dropout::eval())?.detach())
    }

    fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn device(&self) -> Device {
        self.params.device().clone()
    }
}

/// Unit Gaussian tensor drawn from a host RNG.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n)
        .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
        .collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// One-step regression mode: feed white noise at `λ_min` for the target
/// frame and convert the prediction to an image in a single step.
pub fn regression_forward<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    x: &Image,
    poses: [Pose; 2],
    camera: &Camera,
    rng: &mut R,
) -> Result<Image> {
    let (dtype, device) = (model.dtype(), model.device());
    let xt = x.to_tensor(dtype, &device)?.unsqueeze(0)?;
    let z = randn(rng, xt.dims(), dtype, &device)?;
    let batch = DenoiserBatch {
        x: xt,
        z: z.clone(),
        logsnr: vec![[LOGSNR_MAX, LOGSNR_MIN]],
        poses: vec![poses],
        camera: *camera,
        cond_mask: vec![true],
    };
    let eps = model.predict_eps(&batch)?;
    let x_hat = diffusion::predict_x(&z, LOGSNR_MIN, &eps)?;
    Image::from_tensor(&x_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> XUNetConfig {
        XUNetConfig {
            resolution: 8,
            ch: 8,
            ch_mult: vec![1, 2],
            emb_ch: 16,
            num_res_blocks: 1,
            attn_resolutions: vec![4, 8],
            attn_heads: 2,
            dropout: 0.0,
            num_groups: 8,
            ..XUNetConfig::paper()
        }
    }

    fn pose(eye: [f64; 3]) -> Pose {
        Pose::look_at(Vector3::from(eye), Vector3::zeros(), Vector3::z()).unwrap()
    }

    fn batch(b: usize, dtype: DType, seed: u64) -> DenoiserBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[b, 3, 8, 8], dtype, &Device::Cpu).unwrap();
        let z = randn(&mut rng, &[b, 3, 8, 8], dtype, &Device::Cpu).unwrap();
        DenoiserBatch {
            x,
            z,
            logsnr: (0..b).map(|i| [LOGSNR_MAX, -3.0 + i as f64]).collect(),
            poses: (0..b)
                .map(|i| [pose([2.0, 0.1 * i as f64, 0.5]), pose([0.0, 2.0, 0.7])])
                .collect(),
            camera: Camera::centered(8.0, 8, 8).unwrap(),
            cond_mask: (0..b).map(|i| i % 2 == 0).collect(),
        }
    }

    fn randomised(net: &UNet, seed: u64, dtype: DType) -> Params {
        net.init_params_nonzero(seed, 0.1, dtype, &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_init_head_outputs_exact_zeros() {
        for arch in [Architecture::XUnet, Architecture::ConcatUnet] {
            let net = UNet::new(arch, small_config()).unwrap();
            let p = net.init_params(3, DType::F32, &Device::Cpu).unwrap();
            let out = net.forward(&p, &batch(3, DType::F32, 1), &mut Dropout::eval()).unwrap();
            assert_eq!(out.dims(), &[3, 3, 8, 8]);
            let s = out.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(s, 0.0, "{arch:?}");
        }
    }

    #[test]
    fn logsnr_unit_map() {
        assert!((logsnr_to_unit(0.0) - 0.5).abs() < 1e-15);
        let at20 = logsnr_to_unit(20.0);
        assert!((at20 - 2.0 * (-10.0f64).exp() / PI).abs() < 1e-12);
        assert!((at20 - 2.9e-5).abs() < 1e-6);
        assert_eq!(logsnr_to_unit(25.0), at20);
        assert_eq!(logsnr_to_unit(-30.0), logsnr_to_unit(-20.0));
    }

    #[test]
    fn logsnr_embed_clips() {
        let net = UNet::xunet(small_config()).unwrap();
        let p = net.init_params(0, DType::F64, &Device::Cpu).unwrap();
        let a = net.logsnr_embed(&p, &[[20.0, 0.0]]).unwrap();
        let b = net.logsnr_embed(&p, &[[25.0, 0.0]]).unwrap();
        assert_eq!(a.dims(), &[2, 16]);
        let d = (a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn returns_the_noisy_frame_slice() {
        let net = UNet::xunet(small_config()).unwrap();
        let p = randomised(&net, 5, DType::F64);
        let b = batch(1, DType::F64, 9);
        let ones = b.x.ones_like().unwrap();
        let fwd = DenoiserBatch {
            x: ones.clone(),
            z: ones.neg().unwrap(),
            logsnr: vec![[LOGSNR_MAX, -2.0]],
            ..b.clone()
        };
        let swapped = DenoiserBatch {
            x: ones.neg().unwrap(),
            z: ones.clone(),
            logsnr: vec![[-2.0, LOGSNR_MAX]],
            poses: vec![[b.poses[0][1], b.poses[0][0]]],
            ..b.clone()
        };
        let a = net.forward(&p, &fwd, &mut Dropout::eval()).unwrap();
        let s = net.forward(&p, &swapped, &mut Dropout::eval()).unwrap();
        let d = (&a - &s).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d > 1e-6, "swapping frames must change which slice is returned");
    }

    #[test]
    fn cross_attention_carries_information_between_frames() {
        let cfg = XUNetConfig {
            ch_mult: vec![1],
            ..small_config()
        };
        let net = UNet::xunet(cfg).unwrap();
        let p = randomised(&net, 11, DType::F64);
        let b = batch(1, DType::F64, 4);
        let zeroed = DenoiserBatch {
            x: b.x.zeros_like().unwrap(),
            ..b.clone()
        };
        let diff = |net: &UNet| {
            let a = net.forward(&p, &b, &mut Dropout::eval()).unwrap();
            let c = net.forward(&p, &zeroed, &mut Dropout::eval()).unwrap();
            (a - c).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
        };
        assert!(diff(&net) > 1e-6);
        // Pose embeddings, GroupNorm and convs are per frame, so without
        // cross-attention frame 0 cannot reach frame 1's output.
        let ablated = net.clone().without_cross_attention();
        assert_eq!(diff(&ablated), 0.0);
    }

    #[test]
    fn residual_blocks_do_not_amplify_variance() {
        let block = ResnetBlock::new("r", 16, 16, 8, 8, None);
        let mut specs = vec![];
        block.specs(&mut specs);
        let p = Params::init(&specs, 2, DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f64, 1.0, (4, 16, 8, 8), &Device::Cpu).unwrap();
        let emb = Tensor::randn(0f64, 1.0, (4, 8, 8, 8), &Device::Cpu).unwrap();
        let y = block.forward(&p, &x, &emb, &mut Dropout::eval()).unwrap();
        let std = |t: &Tensor| t.sqr().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap().sqrt();
        assert!(std(&y) <= std(&x) * 1.1);

        let attn = AttnBlock::new("a", 16, 4, 8, false);
        let mut specs = vec![];
        attn.specs(&mut specs);
        let p = Params::init(&specs, 2, DType::F64, &Device::Cpu).unwrap();
        let y = attn.forward(&p, &x).unwrap();
        assert!(std(&y) <= std(&x) * 1.1);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.resolution = 7;
        assert!(UNet::xunet(c).is_err());
        let mut c = small_config();
        c.num_groups = 3;
        assert!(UNet::xunet(c).is_err());
        let net = UNet::xunet(small_config()).unwrap();
        let p = net.init_params(0, DType::F32, &Device::Cpu).unwrap();
        let mut b = batch(2, DType::F32, 0);
        b.logsnr.pop();
        assert!(net.forward(&p, &b, &mut Dropout::eval()).is_err());
    }

    #[test]
    fn regression_mode_saturates_with_untrained_net() {
        let net = UNet::xunet(small_config()).unwrap();
        let p = net.init_params(0, DType::F32, &Device::Cpu).unwrap();
        let snap = Snapshot { net: &net, params: &p };
        let x = Image::filled(8, 8, [0.0, 0.5, -0.5]);
        let poses = [pose([2.0, 0.0, 0.5]), pose([0.0, 2.0, 0.5])];
        let cam = Camera::centered(8.0, 8, 8).unwrap();
        let a = regression_forward(&snap, &x, poses, &cam, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = regression_forward(&snap, &x, poses, &cam, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        let saturated = a.data.iter().filter(|v| v.abs() == 1.0).count();
        assert!(saturated as f64 >= 0.99 * a.data.len() as f64);
    }
}
