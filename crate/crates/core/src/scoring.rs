//! 3D consistency scoring.
//!
//! A small view-independent radiance field is fitted to a set of generated
//! views by volume rendering and scored on held-out poses. Views that do not
//! agree on a single 3D scene cannot all be explained by one field, so
//! held-out quality drops.

use candle_core::{DType, Device, Tensor, D};
use nalgebra::{Rotation3, Unit, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_rays, posenc_nerf, posenc_nerf_width, Camera, Pose, RayBundle};
use crate::image::{Image, PosedImage};
use crate::nn::{self, clip_grad_norm, Adam, AdamConfig, Dense, ParamSpec, Params};

/// PSNR in dB for images in `[0, 1]`, capped at 99.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|i| g[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| g[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5, shrunk to the image for
/// smaller inputs), averaged over valid positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = (a.height, a.width);
    let size = 11.min(h).min(w);
    let g = gaussian_window(size, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let plane = |im: &Image| -> Vec<f64> { (0..h * w).map(|i| im.data[i * 3 + ch] as f64).collect() };
        let (x, y) = (plane(a), plane(b));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let (mx, oh, ow) = filter_valid(&x, h, w, &g);
        let (my, ..) = filter_valid(&y, h, w, &g);
        let (sxx, ..) = filter_valid(&prod(&x, &x), h, w, &g);
        let (syy, ..) = filter_valid(&prod(&y, &y), h, w, &g);
        let (sxy, ..) = filter_valid(&prod(&x, &y), h, w, &g);
        let mut sum = 0.0;
        for i in 0..oh * ow {
            let (vx, vy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i]);
            let cov = sxy[i] - mx[i] * my[i];
            sum += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / 3.0)
}

/// Distance between two image sets in some feature space (e.g. FID).
/// No feature network is bundled.
pub trait FeatureDistance {
    fn distance(&self, generated: &[Image], reference: &[Image]) -> Result<f64>;
}

/// Near/far bounds from camera distances: `3·r_min/8` and `3·r_max/2`.
pub fn scene_bounds(poses: &[Pose]) -> Result<(f64, f64)> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("no poses".into()));
    }
    let d: Vec<f64> = poses.iter().map(Pose::distance_to_origin).collect();
    let rmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let rmax = d.iter().copied().fold(0.0, f64::max);
    Ok((3.0 * rmin / 8.0, 3.0 * rmax / 2.0))
}

/// `α_i = 1 − exp(−σ_i δ_i)`, `T_i = exp(−Σ_{j<i} σ_j δ_j)`, `w_i = T_i α_i`.
/// `sigma` and `deltas` are `(R, n)`.
pub fn volume_weights(sigma: &Tensor, deltas: &Tensor) -> Result<Tensor> {
    let sd = (sigma * deltas)?;
    let before = (sd.cumsum(D::Minus1)? - &sd)?;
    let trans = before.neg()?.exp()?;
    let alpha = sd.neg()?.exp()?.affine(-1.0, 1.0)?;
    Ok((trans * alpha)?)
}

/// `Σ_{i,j} w_i w_j |m_i − m_j| + ⅓ Σ_i w_i² δ_i` per ray, averaged over rays.
/// Midpoints must be ascending along each ray.
pub fn distortion_loss(weights: &Tensor, midpoints: &Tensor, deltas: &Tensor) -> Result<Tensor> {
    let wm = (weights * midpoints)?;
    let w_before = (weights.cumsum(D::Minus1)? - weights)?;
    let wm_before = (wm.cumsum(D::Minus1)? - &wm)?;
    let cross = (weights * ((midpoints * w_before)? - wm_before)?)?.sum(D::Minus1)?.affine(2.0, 0.0)?;
    let intra = (weights.sqr()? * deltas)?.sum(D::Minus1)?.affine(1.0 / 3.0, 0.0)?;
    Ok((cross + intra)?.mean_all()?)
}

/// `Σ_i w_i · max(0, n_i · d)²` per ray, averaged over rays. `normals` is
/// `(R, n, 3)`, `dirs` `(R, 3)`.
pub fn orientation_loss(weights: &Tensor, normals: &Tensor, dirs: &Tensor) -> Result<Tensor> {
    let dot = normals.broadcast_mul(&dirs.unsqueeze(1)?)?.sum(D::Minus1)?;
    Ok((weights * dot.relu()?.sqr()?)?.sum(D::Minus1)?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub hidden: usize,
    pub pos_max_deg: usize,
    /// Positions are multiplied by `position_scale / r_max` before encoding.
    pub position_scale: f64,
    pub steps: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub lr_decay_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub distortion_weight: f64,
    pub orientation_weight: f64,
    pub n_samples: usize,
    pub rays_per_step: usize,
    pub background: [f32; 3],
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            pos_max_deg: 10,
            position_scale: 0.25,
            steps: 1000,
            lr_init: 0.01,
            lr_final: 0.001,
            lr_decay_steps: 100,
            weight_decay: 0.1,
            grad_clip: 1.0,
            distortion_weight: 0.01,
            orientation_weight: 0.01,
            n_samples: 128,
            rays_per_step: 256,
            background: [1.0; 3],
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let f = (step as f64 / self.lr_decay_steps.max(1) as f64).min(1.0);
        self.lr_init + (self.lr_final - self.lr_init) * f
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.position_scale <= 0.0 || self.n_samples == 0 || self.rays_per_step == 0 || self.grad_clip <= 0.0 {
            return Err(Error::InvalidArgument(format!("invalid field config: {self:?}")));
        }
        Ok(())
    }

    /// Short hex digest of the serialized config.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Density MLP (one hidden layer) and color MLP (two hidden layers) over a
/// frequency encoding of position. No view direction input.
#[derive(Debug, Clone)]
pub struct NeuralField {
    pub hidden: usize,
    pub pos_max_deg: usize,
    /// Positions are multiplied by this before encoding.
    pub scale: f64,
    density0: Dense,
    density1: Dense,
    color0: Dense,
    color1: Dense,
    color2: Dense,
}

pub struct FieldQuery {
    /// `(P)`, non-negative.
    pub sigma: Tensor,
    /// `(P, 3)` in `(0, 1)`.
    pub rgb: Tensor,
    /// `(P, 3)` unit vectors `−∇σ/|∇σ|`, when requested.
    pub normals: Option<Tensor>,
}

impl NeuralField {
    pub fn new(hidden: usize, pos_max_deg: usize, scale: f64) -> Self {
        let e = posenc_nerf_width(0, pos_max_deg);
        Self {
            hidden,
            pos_max_deg,
            scale,
            density0: Dense::new("field.density0", e, hidden),
            density1: Dense::new("field.density1", hidden, 1),
            color0: Dense::new("field.color0", e, hidden),
            color1: Dense::new("field.color1", hidden, hidden),
            color2: Dense::new("field.color2", hidden, 3),
        }
    }

    pub fn encoding_width(&self) -> usize {
        posenc_nerf_width(0, self.pos_max_deg)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = vec![];
        for d in [&self.density0, &self.density1, &self.color0, &self.color1, &self.color2] {
            d.specs(&mut out);
        }
        out
    }

    pub fn init_params(&self, seed: u64, dtype: DType) -> Result<Params> {
        Params::init(&self.specs(), seed, dtype, &Device::Cpu)
    }

    /// Encoding and its derivative with respect to the coordinate each
    /// entry depends on, both `(P, E)` row-major.
    fn encode(&self, pts: &[[f64; 3]], with_derivative: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let scaled: Vec<[f64; 3]> = pts.iter().map(|p| p.map(|v| v * self.scale)).collect();
        let enc = posenc_nerf(&scaled, 0, self.pos_max_deg)?;
        if !with_derivative {
            return Ok((enc, None));
        }
        let e = self.encoding_width();
        let half = 3 * self.pos_max_deg;
        let mut der = vec![0.0; enc.len()];
        for p in 0..pts.len() {
            let row = &enc[p * e..(p + 1) * e];
            let out = &mut der[p * e..(p + 1) * e];
            out[..3].fill(self.scale);
            for i in 0..half {
                let f = (1u64 << (i / 3)) as f64 * self.scale;
                out[3 + i] = f * row[3 + half + i];
                out[3 + half + i] = -f * row[3 + i];
            }
        }
        Ok((enc, Some(der)))
    }

    /// Entry `k` of the encoding depends on coordinate `axis(k)`; returns
    /// the `(E, 3)` one-hot map.
    fn axis_selector(&self, dtype: DType) -> Result<Tensor> {
        let e = self.encoding_width();
        let mut s = vec![0f32; e * 3];
        for k in 0..e {
            let axis = if k < 3 { k } else { (k - 3) % 3 };
            s[k * 3 + axis] = 1.0;
        }
        Ok(Tensor::from_vec(s, (e, 3), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn query(&self, p: &Params, pts: &[[f64; 3]], with_normals: bool) -> Result<FieldQuery> {
        let dtype = p.dtype();
        let e = self.encoding_width();
        let n = pts.len();
        let (enc, der) = self.encode(pts, with_normals)?;
        let enc = Tensor::from_vec(enc, (n, e), &Device::Cpu)?.to_dtype(dtype)?;
        let h = self.density0.forward(p, &enc)?;
        let act = h.relu()?;
        let raw = self.density1.forward(p, &act)?.squeeze(1)?;
        let sigma = nn::softplus(&raw)?;
        let c = self.color0.forward(p, &enc)?.relu()?;
        let c = self.color1.forward(p, &c)?.relu()?;
        let rgb = nn::sigmoid(&self.color2.forward(p, &c)?)?;
        let normals = match der {
            Some(der) => {
                // ∂raw/∂enc = W0 · (relu'(h) ⊙ w1); the chain through the
                // encoding is diagonal per coordinate.
                let mask = h.gt(0.0)?.to_dtype(dtype)?;
                let w1 = p.get(&self.density1.kernel)?.squeeze(1)?;
                let g_hidden = mask.broadcast_mul(&w1)?;
                let g_enc = g_hidden.matmul(&p.get(&self.density0.kernel)?.t()?)?;
                let der = Tensor::from_vec(der, (n, e), &Device::Cpu)?.to_dtype(dtype)?;
                let grad = (g_enc * der)?.matmul(&self.axis_selector(dtype)?)?;
                let norm = (grad.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
                Some(grad.broadcast_div(&norm)?.neg()?)
            }
            None => None,
        };
        Ok(FieldQuery { sigma, rgb, normals })
    }
}

/// Sample distances along `rays` rays: stratified with jitter when an rng
/// is given, bin midpoints otherwise.
pub fn sample_distances<R: Rng + ?Sized>(rays: usize, near: f64, far: f64, n: usize, jitter: Option<&mut R>) -> Vec<f64> {
    let delta = (far - near) / n as f64;
    match jitter {
        Some(rng) => (0..rays * n)
            .map(|k| near + delta * ((k % n) as f64 + rng.random::<f64>()))
            .collect(),
        None => (0..rays * n).map(|k| near + delta * ((k % n) as f64 + 0.5)).collect(),
    }
}

pub struct RenderOutput {
    /// `(R, 3)`.
    pub rgb: Tensor,
    /// `(R, n)`.
    pub weights: Tensor,
    /// `(R, n)` sample distances.
    pub ts: Tensor,
    /// `(R, n)` bin widths.
    pub deltas: Tensor,
    /// `(R, n, 3)`, when requested.
    pub normals: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct RenderSettings {
    pub near: f64,
    pub far: f64,
    pub n_samples: usize,
    pub background: [f32; 3],
}

pub fn render_rays<R: Rng + ?Sized>(
    field: &NeuralField,
    p: &Params,
    origins: &[Vector3<f64>],
    dirs: &[Vector3<f64>],
    s: &RenderSettings,
    jitter: Option<&mut R>,
    with_normals: bool,
) -> Result<RenderOutput> {
    if !(s.far > s.near && s.near > 0.0) {
        return Err(Error::InvalidArgument(format!("need far > near > 0, got {} and {}", s.near, s.far)));
    }
    let dtype = p.dtype();
    let (r, n) = (origins.len(), s.n_samples);
    let ts = sample_distances(r, s.near, s.far, n, jitter);
    let pts: Vec<[f64; 3]> = ts
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let x = origins[k / n] + dirs[k / n] * *t;
            [x[0], x[1], x[2]]
        })
        .collect();
    let q = field.query(p, &pts, with_normals)?;
    let sigma = q.sigma.reshape((r, n))?;
    let delta = (s.far - s.near) / n as f64;
    let deltas = Tensor::full(delta, (r, n), &Device::Cpu)?.to_dtype(dtype)?;
    let weights = volume_weights(&sigma, &deltas)?;
    let rgb = q.rgb.reshape((r, n, 3))?;
    let color = weights.unsqueeze(2)?.broadcast_mul(&rgb)?.sum(1)?;
    let acc = weights.sum_keepdim(1)?;
    let bg = Tensor::from_vec(s.background.to_vec(), (1, 3), &Device::Cpu)?.to_dtype(dtype)?;
    let color = (color + acc.affine(-1.0, 1.0)?.broadcast_mul(&bg)?)?;
    let ts = Tensor::from_vec(ts, (r, n), &Device::Cpu)?.to_dtype(dtype)?;
    let normals = q.normals.map(|t| t.reshape((r, n, 3))).transpose()?;
    Ok(RenderOutput {
        rgb: color,
        weights,
        ts,
        deltas,
        normals,
    })
}

/// A fitted field together with its rendering settings.
pub struct TrainedField {
    pub field: NeuralField,
    pub params: Params,
    pub settings: RenderSettings,
    pub losses: Vec<f64>,
}

const RENDER_CHUNK: usize = 1024;

/// Renders a full image with deterministic midpoint quadrature.
pub fn render_field(tf: &TrainedField, pose: &Pose, camera: &Camera) -> Result<Image> {
    let rays = make_rays(pose, camera)?;
    let mut data = Vec::with_capacity(rays.len() * 3);
    for start in (0..rays.len()).step_by(RENDER_CHUNK) {
        let end = (start + RENDER_CHUNK).min(rays.len());
        let out = render_rays::<ChaCha8Rng>(
            &tf.field,
            &tf.params,
            &rays.origins[start..end],
            &rays.directions[start..end],
            &tf.settings,
            None,
            false,
        )?;
        data.extend(out.rgb.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
    }
    Image::new(camera.height, camera.width, data)
}

struct RayPool {
    bundles: Vec<RayBundle>,
    images: Vec<Image>,
}

impl RayPool {
    fn new(views: &[&PosedImage]) -> Result<Self> {
        let bundles = views.iter().map(|v| make_rays(&v.pose, &v.camera)).collect::<Result<_>>()?;
        let images = views.iter().map(|v| v.image.clone()).collect();
        Ok(Self { bundles, images })
    }

    fn draw<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<f32>) {
        let mut o = Vec::with_capacity(count);
        let mut d = Vec::with_capacity(count);
        let mut rgb = Vec::with_capacity(count * 3);
        for _ in 0..count {
            let v = rng.random_range(0..self.bundles.len());
            let k = rng.random_range(0..self.bundles[v].len());
            o.push(self.bundles[v].origins[k]);
            d.push(self.bundles[v].directions[k]);
            rgb.extend_from_slice(&self.images[v].data[k * 3..k * 3 + 3]);
        }
        (o, d, rgb)
    }
}

/// Photometric loss plus the weighted distortion and orientation terms.
pub fn field_loss(
    field: &NeuralField,
    p: &Params,
    origins: &[Vector3<f64>],
    dirs: &[Vector3<f64>],
    target: &Tensor,
    settings: &RenderSettings,
    cfg: &FieldConfig,
    jitter: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    let with_normals = cfg.orientation_weight > 0.0;
    let out = render_rays(field, p, origins, dirs, settings, jitter, with_normals)?;
    let mut loss = (&out.rgb - target)?.sqr()?.mean_all()?;
    if cfg.distortion_weight > 0.0 {
        let d = distortion_loss(&out.weights, &out.ts, &out.deltas)?;
        loss = (loss + d.affine(cfg.distortion_weight, 0.0)?)?;
    }
    if let Some(normals) = &out.normals {
        let dirs: Vec<f64> = dirs.iter().flat_map(|d| [d[0], d[1], d[2]]).collect();
        let dirs = Tensor::from_vec(dirs, (origins.len(), 3), &Device::Cpu)?.to_dtype(p.dtype())?;
        let o = orientation_loss(&out.weights, normals, &dirs)?;
        loss = (loss + o.affine(cfg.orientation_weight, 0.0)?)?;
    }
    Ok(loss)
}

/// Fits a field to `views` with AdamW, global-norm clipping and the
/// linear-then-constant learning rate schedule.
pub fn train_field(views: &[&PosedImage], cfg: &FieldConfig) -> Result<TrainedField> {
    cfg.validate()?;
    if views.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 training views, got {}", views.len())));
    }
    let poses: Vec<Pose> = views.iter().map(|v| v.pose).collect();
    let (near, far) = scene_bounds(&poses)?;
    let r_max = poses.iter().map(Pose::distance_to_origin).fold(0.0, f64::max);
    let field = NeuralField::new(cfg.hidden, cfg.pos_max_deg, cfg.position_scale / r_max);
    let params = field.init_params(cfg.seed, DType::F32)?;
    let settings = RenderSettings {
        near,
        far,
        n_samples: cfg.n_samples,
        background: cfg.background,
    };
    let mut adam = Adam::new(
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
        &params,
    )?;
    let pool = RayPool::new(views)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (o, d, rgb) = pool.draw(cfg.rays_per_step, &mut rng);
        let target = Tensor::from_vec(rgb, (o.len(), 3), &Device::Cpu)?;
        let loss = field_loss(&field, &params, &o, &d, &target, &settings, cfg, Some(&mut rng))?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as u64 + 1,
                loss: value,
            });
        }
        losses.push(value);
        let grads = loss.backward()?;
        let mut grads = params.gradients(&grads)?;
        clip_grad_norm(&mut grads, cfg.grad_clip)?;
        adam.update(&params, &grads, cfg.lr_at(step))?;
    }
    Ok(TrainedField {
        field,
        params,
        settings,
        losses,
    })
}

/// `round(frac · n)` indices drawn once from `seed`, never from `exclude`.
pub fn holdout_indices(n: usize, frac: f64, seed: u64, exclude: &[usize]) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = (0..n).filter(|i| !exclude.contains(i)).collect();
    let count = (frac * n as f64).round() as usize;
    if count > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {count} of {n} views with {} excluded",
            exclude.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), count)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene: String,
    pub psnr: f64,
    pub ssim: f64,
    pub train_views: usize,
    pub holdout_views: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub scenes: Vec<SceneScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub holdout_count: usize,
    pub config: FieldConfig,
    pub fingerprint: String,
}

impl ConsistencyReport {
    pub fn new(scenes: Vec<SceneScore>, config: &FieldConfig) -> Self {
        let n = scenes.len().max(1) as f64;
        Self {
            mean_psnr: scenes.iter().map(|s| s.psnr).sum::<f64>() / n,
            mean_ssim: scenes.iter().map(|s| s.ssim).sum::<f64>() / n,
            holdout_count: scenes.iter().map(|s| s.holdout_views).sum(),
            fingerprint: config.fingerprint(),
            config: config.clone(),
            scenes,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("config {}\n", self.fingerprint);
        for sc in &self.scenes {
            s.push_str(&format!(
                "{} psnr {:.3} ssim {:.4} train {} holdout {}\n",
                sc.scene, sc.psnr, sc.ssim, sc.train_views, sc.holdout_views
            ));
        }
        s.push_str(&format!("mean psnr {:.3} ssim {:.4}\n", self.mean_psnr, self.mean_ssim));
        s
    }
}

/// Fits a field on every view not in `holdout` and scores its renders at
/// the held-out poses against the views themselves.
pub fn consistency_score(
    name: &str,
    views: &[PosedImage],
    conditioning: &[usize],
    holdout: &[usize],
    cfg: &FieldConfig,
) -> Result<(SceneScore, TrainedField, Vec<Image>)> {
    if let Some(c) = conditioning.iter().find(|c| holdout.contains(c)) {
        return Err(Error::InvalidArgument(format!("conditioning view {c} is in the holdout set")));
    }
    if let Some(h) = holdout.iter().find(|&&h| h >= views.len()) {
        return Err(Error::InvalidArgument(format!("holdout index {h} out of range")));
    }
    let train: Vec<&PosedImage> = (0..views.len())
        .filter(|i| !holdout.contains(i))
        .map(|i| &views[i])
        .collect();
    let tf = train_field(&train, cfg)?;
    let mut renders = Vec::with_capacity(holdout.len());
    let (mut p, mut s) = (0.0, 0.0);
    for &h in holdout {
        let img = render_field(&tf, &views[h].pose, &views[h].camera)?;
        p += psnr(&img, &views[h].image)?;
        s += ssim(&img, &views[h].image)?;
        renders.push(img);
    }
    let k = holdout.len().max(1) as f64;
    let score = SceneScore {
        scene: name.to_string(),
        psnr: p / k,
        ssim: s / k,
        train_views: train.len(),
        holdout_views: holdout.len(),
    };
    if !score.psnr.is_finite() || !score.ssim.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite metrics for {name}")));
    }
    Ok((score, tf, renders))
}

/// Rotates the poses of `round(fraction · n)` randomly chosen views about
/// the origin by `angle` radians around random axes, leaving the images.
pub fn perturb_poses(views: &[PosedImage], fraction: f64, angle: f64, seed: u64, keep: &[usize]) -> Result<Vec<PosedImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = holdout_indices(views.len(), fraction, rng.random(), keep)?;
    let mut out = views.to_vec();
    for i in chosen {
        let axis = loop {
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() <= 1.0 {
                break Unit::new_normalize(v);
            }
        };
        let r = *Rotation3::from_axis_angle(&axis, angle).matrix();
        let p = out[i].pose;
        out[i].pose = Pose::new(r * p.rotation, r * p.translation)?;
    }
    Ok(out)
}
