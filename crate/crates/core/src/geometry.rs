//! Camera poses, pinhole rays and the positional encodings that feed the
//! denoiser's conditioning pathway.
//!
//! Conventions used everywhere in the crate:
//! - poses are world-from-camera: `x_world = R · x_cam + t`;
//! - the camera looks along `+z`, with `+x` to the right and `+y` down the image;
//! - pixel `(u, v)` (column, row) is sampled at its centre `(u + 0.5, v + 0.5)`.

use candle_core::{DType, Device, Tensor};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv3x3, Init, ParamSpec, Params};

const POSE_TOL: f64 = 1e-5;

/// Rigid world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if orth > POSE_TOL || (det - 1.0).abs() > POSE_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation not in SO(3): |RᵀR - I|max = {orth:.2e}, det = {det:.6}"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll (image `-y`
    /// is as close to `up` as possible).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidPose("eye coincides with target".into()));
        }
        let forward = forward.normalize();
        let mut down = -up;
        // Fall back to another up axis when looking straight along it.
        if forward.cross(&down).norm() < 1e-6 {
            down = -Vector3::new(0.0, 1.0, 0.0);
            if forward.cross(&down).norm() < 1e-6 {
                down = -Vector3::new(1.0, 0.0, 0.0);
            }
        }
        let right = down.cross(&forward).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Pose::new(rotation, eye)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let mut rows = [[0.0; 4]; 3];
        for (i, row) in rows.iter_mut().enumerate() {
            for j in 0..3 {
                row[j] = self.rotation[(i, j)];
            }
            row[3] = self.translation[i];
        }
        rows
    }

    pub fn from_rows(rows: &[[f64; 4]; 3]) -> Result<Pose> {
        let rotation = Matrix3::from_fn(|i, j| rows[i][j]);
        let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        Pose::new(rotation, translation)
    }

    /// Distance from the camera centre to the world origin.
    pub fn distance_to_origin(&self) -> f64 {
        self.translation.norm()
    }
}

/// Pinhole intrinsics plus resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    pub height: usize,
    pub width: usize,
}

impl Camera {
    pub fn new(intrinsics: Matrix3<f64>, height: usize, width: usize) -> Result<Self> {
        let cam = Self {
            intrinsics,
            height,
            width,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn from_focal(fx: f64, fy: f64, cx: f64, cy: f64, height: usize, width: usize) -> Result<Self> {
        Camera::new(
            Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0),
            height,
            width,
        )
    }

    /// Square pixels with the principal point at the image centre.
    pub fn centered(focal: f64, height: usize, width: usize) -> Result<Self> {
        Camera::from_focal(focal, focal, width as f64 / 2.0, height as f64 / 2.0, height, width)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        let lower = [k[(1, 0)], k[(2, 0)], k[(2, 1)]];
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("camera resolution must be positive".into()));
        }
        if lower.iter().any(|v| *v != 0.0) || k[(2, 2)] != 1.0 || !(k[(0, 0)] > 0.0) || !(k[(1, 1)] > 0.0) {
            return Err(Error::DegenerateIntrinsics);
        }
        Ok(())
    }

    pub fn focal(&self) -> (f64, f64) {
        (self.intrinsics[(0, 0)], self.intrinsics[(1, 1)])
    }
}

/// Per-pixel rays, row-major over `(row, col)`.
#[derive(Debug, Clone)]
pub struct RayBundle {
    pub height: usize,
    pub width: usize,
    pub origins: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Unit-direction rays through every pixel centre.
pub fn make_rays(pose: &Pose, camera: &Camera) -> Result<RayBundle> {
    let k = &camera.intrinsics;
    if k.determinant().abs() < 1e-12 {
        return Err(Error::DegenerateIntrinsics);
    }
    let k_inv = k.try_inverse().ok_or(Error::DegenerateIntrinsics)?;
    let n = camera.height * camera.width;
    let mut directions = Vec::with_capacity(n);
    let cam_to_world = pose.rotation * k_inv;
    for v in 0..camera.height {
        for u in 0..camera.width {
            let pixel = Vector3::new(u as f64 + 0.5, v as f64 + 0.5, 1.0);
            directions.push((cam_to_world * pixel).normalize());
        }
    }
    Ok(RayBundle {
        height: camera.height,
        width: camera.width,
        origins: vec![pose.translation; n],
        directions,
    })
}

pub fn posenc_nerf_width(min_deg: usize, max_deg: usize) -> usize {
    3 + 6 * (max_deg - min_deg)
}

/// Frequency encoding of 3-vectors: `[x, sin(2^k x), sin(2^k x + π/2)]` for
/// `k ∈ [min_deg, max_deg)`, degree-major within each block.
///
/// Returns `N × (3 + 6·(max_deg − min_deg))` values, row-major.
pub fn posenc_nerf(x: &[[f64; 3]], min_deg: usize, max_deg: usize) -> Result<Vec<f64>> {
    if min_deg > max_deg {
        return Err(Error::InvalidArgument(format!(
            "min_deg {min_deg} exceeds max_deg {max_deg}"
        )));
    }
    let width = posenc_nerf_width(min_deg, max_deg);
    let mut out = Vec::with_capacity(x.len() * width);
    for p in x {
        posenc_nerf_into(p, min_deg, max_deg, &mut out);
    }
    Ok(out)
}

fn posenc_nerf_into(p: &[f64; 3], min_deg: usize, max_deg: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(p);
    if min_deg == max_deg {
        return;
    }
    let start = out.len();
    for deg in min_deg..max_deg {
        let s = (1u64 << deg) as f64;
        out.extend(p.iter().map(|v| (v * s).sin()));
    }
    let n = out.len() - start;
    for i in 0..n {
        let deg = min_deg + i / 3;
        let y = p[i % 3] * (1u64 << deg) as f64;
        out.push((y + std::f64::consts::FRAC_PI_2).sin());
    }
}

/// Sinusoidal noise-level embedding. Inputs are rescaled by `1000 / max_time`;
/// the first half of the output is `sin`, the second `cos`, with frequencies
/// `exp(-i · ln(10000) / (emb_ch/2 − 1))`.
pub fn posenc_ddpm(timesteps: &[f64], emb_ch: usize, max_time: f64) -> Result<Vec<f64>> {
    if emb_ch % 2 != 0 || emb_ch < 4 {
        return Err(Error::InvalidArgument(format!(
            "embedding width must be even and at least 4, got {emb_ch}"
        )));
    }
    let half = emb_ch / 2;
    let scale = (10000f64).ln() / (half - 1) as f64;
    let freqs: Vec<f64> = (0..half).map(|i| (-(i as f64) * scale).exp()).collect();
    let mut out = Vec::with_capacity(timesteps.len() * emb_ch);
    for &t in timesteps {
        let t = t * (1000.0 / max_time);
        out.extend(freqs.iter().map(|f| (t * f).sin()));
        out.extend(freqs.iter().map(|f| (t * f).cos()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayEncodingConfig {
    pub pos_min_deg: usize,
    pub pos_max_deg: usize,
    pub dir_min_deg: usize,
    pub dir_max_deg: usize,
}

impl Default for RayEncodingConfig {
    fn default() -> Self {
        Self {
            pos_min_deg: 0,
            pos_max_deg: 15,
            dir_min_deg: 0,
            dir_max_deg: 8,
        }
    }
}

impl RayEncodingConfig {
    pub fn width(&self) -> usize {
        posenc_nerf_width(self.pos_min_deg, self.pos_max_deg)
            + posenc_nerf_width(self.dir_min_deg, self.dir_max_deg)
    }
}

/// Encoded rays of one view as a channel-first `(D, H, W)` buffer.
pub fn ray_encoding(pose: &Pose, camera: &Camera, cfg: &RayEncodingConfig) -> Result<Vec<f64>> {
    let rays = make_rays(pose, camera)?;
    let d = cfg.width();
    let n = rays.len();
    let o = rays.origins[0];
    let pos = posenc_nerf(&[[o.x, o.y, o.z]], cfg.pos_min_deg, cfg.pos_max_deg)?;
    let dirs: Vec<[f64; 3]> = rays.directions.iter().map(|v| [v.x, v.y, v.z]).collect();
    let dir = posenc_nerf(&dirs, cfg.dir_min_deg, cfg.dir_max_deg)?;
    let dw = posenc_nerf_width(cfg.dir_min_deg, cfg.dir_max_deg);
    let mut out = vec![0.0; d * n];
    for (c, &v) in pos.iter().enumerate() {
        out[c * n..(c + 1) * n].fill(v);
    }
    let pw = pos.len();
    for p in 0..n {
        for c in 0..dw {
            out[(pw + c) * n + p] = dir[p * dw + c];
        }
    }
    Ok(out)
}

/// Learned part of the pose conditioning: optional position and frame
/// embeddings plus one strided convolution per UNet resolution.
#[derive(Debug, Clone)]
pub struct PoseEmbedder {
    pub encoding: RayEncodingConfig,
    pub resolution: usize,
    pub emb_ch: usize,
    pub num_levels: usize,
    pub use_pos_emb: bool,
    pub use_ref_pose_emb: bool,
    /// Concat-UNet mode: both frames' encodings stacked along channels.
    pub channel_stacked: bool,
    level_convs: Vec<Conv3x3>,
}

impl PoseEmbedder {
    pub fn new(
        encoding: RayEncodingConfig,
        resolution: usize,
        emb_ch: usize,
        num_levels: usize,
        use_pos_emb: bool,
        use_ref_pose_emb: bool,
        channel_stacked: bool,
    ) -> Result<Self> {
        let factor = 1usize << num_levels.saturating_sub(1);
        if num_levels == 0 || resolution % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {resolution} not divisible by 2^{} for {num_levels} levels",
                num_levels.saturating_sub(1)
            )));
        }
        let in_ch = Self::in_channels_for(&encoding, channel_stacked);
        let level_convs = (0..num_levels)
            .map(|l| Conv3x3::new(&format!("cond.pose_conv{l}"), in_ch, emb_ch).with_stride(1 << l))
            .collect();
        Ok(Self {
            encoding,
            resolution,
            emb_ch,
            num_levels,
            use_pos_emb,
            use_ref_pose_emb: use_ref_pose_emb && !channel_stacked,
            channel_stacked,
            level_convs,
        })
    }

    fn in_channels_for(encoding: &RayEncodingConfig, channel_stacked: bool) -> usize {
        encoding.width() * if channel_stacked { 2 } else { 1 }
    }

    pub fn in_channels(&self) -> usize {
        Self::in_channels_for(&self.encoding, self.channel_stacked)
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let d = self.in_channels();
        let std = 1.0 / (d as f64).sqrt();
        if self.use_pos_emb {
            out.push(ParamSpec {
                name: "cond.pos_emb".into(),
                shape: vec![d, self.resolution, self.resolution],
                init: Init::Normal { std },
            });
        }
        if self.use_ref_pose_emb {
            for name in ["cond.ref_pose_emb_first", "cond.ref_pose_emb_other"] {
                out.push(ParamSpec {
                    name: name.into(),
                    shape: vec![d],
                    init: Init::Normal { std },
                });
            }
        }
        for conv in &self.level_convs {
            conv.specs(out);
        }
    }

    /// Raw ray encodings for a batch, `(B·2, D, H, W)` (or `(B, 2D, H, W)`
    /// when channel-stacked), zeroed for elements whose mask is false.
    pub fn raw(&self, poses: &[[Pose; 2]], camera: &Camera, cond_mask: &[bool], dtype: DType, device: &Device) -> Result<Tensor> {
        if poses.len() != cond_mask.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} pose pairs but {} mask entries",
                poses.len(),
                cond_mask.len()
            )));
        }
        if camera.height != self.resolution || camera.width != self.resolution {
            return Err(Error::ShapeMismatch(format!(
                "camera {}x{} does not match model resolution {}",
                camera.height, camera.width, self.resolution
            )));
        }
        let d = self.encoding.width();
        let hw = camera.height * camera.width;
        let mut data = Vec::with_capacity(poses.len() * 2 * d * hw);
        for (pair, &on) in poses.iter().zip(cond_mask) {
            for pose in pair {
                if on {
                    data.extend(ray_encoding(pose, camera, &self.encoding)?);
                } else {
                    data.extend(std::iter::repeat_n(0.0, d * hw));
                }
            }
        }
        let b = poses.len();
        let shape = if self.channel_stacked {
            (b, 2 * d, camera.height, camera.width)
        } else {
            (b * 2, d, camera.height, camera.width)
        };
        Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
    }

    /// Adds the learned terms to `raw` and downsamples to every level:
    /// element `l` has shape `(N, emb_ch, H/2^l, W/2^l)`.
    pub fn forward(&self, p: &Params, raw: &Tensor) -> Result<Vec<Tensor>> {
        let mut emb = raw.clone();
        if self.use_pos_emb {
            emb = emb.broadcast_add(&p.get("cond.pos_emb")?.unsqueeze(0)?)?;
        }
        if self.use_ref_pose_emb {
            let (n, d, _, _) = emb.dims4()?;
            let first = p.get("cond.ref_pose_emb_first")?;
            let other = p.get("cond.ref_pose_emb_other")?;
            let pair = Tensor::stack(&[first, other], 0)?; // (2, D)
            let per_item = pair
                .unsqueeze(0)?
                .broadcast_as((n / 2, 2, d))?
                .reshape((n, d, 1, 1))?;
            emb = emb.broadcast_add(&per_item)?;
        }
        self.level_convs.iter().map(|c| c.forward(p, &emb)).collect()
    }
}

/// Pose embeddings at every UNet resolution for a batch of frame pairs.
pub fn build_pose_embeddings(
    embedder: &PoseEmbedder,
    params: &Params,
    poses: &[[Pose; 2]],
    camera: &Camera,
    cond_mask: &[bool],
) -> Result<Vec<Tensor>> {
    let raw = embedder.raw(poses, camera, cond_mask, params.dtype(), params.device())?;
    embedder.forward(params, &raw)
}
