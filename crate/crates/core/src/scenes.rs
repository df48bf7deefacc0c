//! Synthetic multi-view scenes: a small Lambertian ray tracer, the on-disk
//! dataset layout and its loaders.
//!
//! Layout of a generated dataset:
//!
//! ```text
//! manifest.json
//! scene_0000/intrinsics.txt
//! scene_0000/view_000.png
//! scene_0000/pose_000.txt     3×4 world-from-camera, row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_rays, Camera, Pose};
use crate::image::{Image, PosedImage};

pub const LAYOUT_VERSION: u32 = 1;
const AMBIENT: f64 = 0.1;
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        albedo: [f64; 3],
    },
}

impl Primitive {
    fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Box { albedo, .. } => *albedo,
        }
    }

    /// Nearest hit distance and outward normal.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let c = Vector3::from(*center);
                let oc = o - c;
                let b = oc.dot(d);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [-b - sq, -b + sq].into_iter().find(|&t| t > HIT_EPS)?;
                Some((t, (o + d * t - c) / *radius))
            }
            Primitive::Box { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for a in 0..3 {
                    let inv = 1.0 / d[a];
                    let (mut near, mut far) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
                    if near > far {
                        std::mem::swap(&mut near, &mut far);
                    }
                    if near > t0 {
                        t0 = near;
                        axis = a;
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t0 <= HIT_EPS {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis] = -d[axis].signum();
                Some((t0, n))
            }
        }
    }

    fn fits_unit_ball(&self) -> bool {
        match self {
            Primitive::Sphere { center, radius, .. } => *radius > 0.0 && Vector3::from(*center).norm() + radius <= 1.0 + 1e-9,
            Primitive::Box { min, max, .. } => {
                (0..3).all(|a| min[a] < max[a])
                    && (0..8).all(|k| {
                        let corner = Vector3::from_fn(|a, _| if k >> a & 1 == 1 { max[a] } else { min[a] });
                        corner.norm() <= 1.0 + 1e-9
                    })
            }
        }
    }
}

/// Directional light. `direction` is the way the light travels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub direction: [f64; 3],
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub light: Light,
    pub background: [f64; 3],
    pub seed: u64,
}

impl SceneSpec {
    pub fn empty() -> Self {
        Self {
            primitives: vec![],
            light: Light {
                direction: [0.0, 0.0, -1.0],
                intensity: 1.0,
            },
            background: [1.0; 3],
            seed: 0,
        }
    }

    /// A single sphere at the origin.
    pub fn sphere(radius: f64, albedo: [f64; 3]) -> Self {
        Self {
            primitives: vec![Primitive::Sphere {
                center: [0.0; 3],
                radius,
                albedo,
            }],
            light: Light {
                direction: normalized([-0.4, -0.3, -1.0]),
                intensity: 1.0,
            },
            ..Self::empty()
        }
    }

    /// One to three random spheres and boxes inside the unit ball.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=3);
        let primitives = (0..n)
            .map(|_| {
                let albedo = [0.0; 3].map(|_: f64| rng.random_range(0.15..0.95));
                if rng.random::<f64>() < 0.5 {
                    let radius = rng.random_range(0.2..0.5);
                    let center = random_in_ball(&mut rng, 1.0 - radius);
                    Primitive::Sphere { center, radius, albedo }
                } else {
                    let half = [0.0; 3].map(|_: f64| rng.random_range(0.1..0.3));
                    let extent = Vector3::from(half).norm();
                    let c = random_in_ball(&mut rng, 1.0 - extent);
                    Primitive::Box {
                        min: [c[0] - half[0], c[1] - half[1], c[2] - half[2]],
                        max: [c[0] + half[0], c[1] + half[1], c[2] + half[2]],
                        albedo,
                    }
                }
            })
            .collect();
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let el = rng.random_range(0.3..1.2f64);
        Self {
            primitives,
            light: Light {
                direction: [-el.cos() * az.cos(), -el.cos() * az.sin(), -el.sin()],
                intensity: 1.0,
            },
            background: [1.0; 3],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.primitives.len() > 3 {
            return bad(format!("{} primitives, at most 3 allowed", self.primitives.len()));
        }
        for p in &self.primitives {
            if !p.fits_unit_ball() {
                return bad(format!("primitive outside the unit ball: {p:?}"));
            }
            if p.albedo().iter().any(|a| !(0.0..=1.0).contains(a)) {
                return bad(format!("albedo outside [0, 1]: {p:?}"));
            }
        }
        let l = Vector3::from(self.light.direction);
        if (l.norm() - 1.0).abs() > 1e-6 || self.light.intensity < 0.0 {
            return bad(format!("light direction must be unit and intensity >= 0: {:?}", self.light));
        }
        Ok(())
    }
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = Vector3::from(v).normalize();
    [n[0], n[1], n[2]]
}

fn random_in_ball<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> [f64; 3] {
    loop {
        let p = [0.0; 3].map(|_: f64| rng.random_range(-1.0..1.0));
        if Vector3::from(p).norm_squared() <= 1.0 {
            return p.map(|v| v * radius);
        }
    }
}

/// Ray traces `spec` from `pose`. Values are in `[0, 1]`.
pub fn render_scene(spec: &SceneSpec, pose: &Pose, camera: &Camera) -> Result<Image> {
    let rays = make_rays(pose, camera)?;
    let to_light = -Vector3::from(spec.light.direction);
    let mut data = Vec::with_capacity(rays.len() * 3);
    for (o, d) in rays.origins.iter().zip(&rays.directions) {
        let hit = spec
            .primitives
            .iter()
            .filter_map(|p| p.intersect(o, d).map(|(t, n)| (t, n, p.albedo())))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let rgb = match hit {
            Some((_, n, albedo)) => {
                let shade = n.dot(&to_light).max(0.0) * spec.light.intensity + AMBIENT;
                albedo.map(|a| (a * shade).min(1.0))
            }
            None => spec.background,
        };
        data.extend(rgb.map(|v| v as f32));
    }
    Image::new(camera.height, camera.width, data)
}

/// Camera on a sphere of `radius` at the given azimuth/elevation (radians),
/// looking at the origin with +z up.
pub fn orbit_pose(radius: f64, azimuth: f64, elevation: f64) -> Result<Pose> {
    let eye = Vector3::new(
        radius * elevation.cos() * azimuth.cos(),
        radius * elevation.cos() * azimuth.sin(),
        radius * elevation.sin(),
    );
    Pose::look_at(eye, Vector3::zeros(), Vector3::z())
}

/// `n` poses evenly spaced in azimuth, starting after `start_azimuth`.
pub fn orbit(radius: f64, elevation: f64, start_azimuth: f64, n: usize) -> Result<Vec<Pose>> {
    (1..=n)
        .map(|k| orbit_pose(radius, start_azimuth + std::f64::consts::TAU * k as f64 / (n + 1) as f64, elevation))
        .collect()
}

/// Uniform direction on the upper hemisphere at a radius drawn from `radius_range`.
pub fn random_hemisphere_pose<R: Rng + ?Sized>(rng: &mut R, radius_range: (f64, f64)) -> Result<Pose> {
    let (lo, hi) = radius_range;
    let r = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let z: f64 = rng.random_range(0.0..1.0);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let s = (1.0 - z * z).sqrt();
    let eye = Vector3::new(s * phi.cos(), s * phi.sin(), z) * r;
    Pose::look_at(eye, Vector3::zeros(), Vector3::z())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_scenes: usize,
    pub num_test_scenes: usize,
    pub views_per_scene: usize,
    pub resolution: usize,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub radius_range: (f64, f64),
    /// Camera distances for test scenes; defaults to `radius_range`.
    pub test_radius_range: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_scenes: 8,
            num_test_scenes: 0,
            views_per_scene: 24,
            resolution: 32,
            focal_factor: 1.0,
            radius_range: (2.0, 2.5),
            test_radius_range: None,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.radius_range;
        let radii_ok = |(lo, hi): (f64, f64)| lo > 1.0 && hi >= lo;
        if self.num_scenes + self.num_test_scenes == 0
            || self.views_per_scene == 0
            || self.resolution == 0
            || self.focal_factor <= 0.0
            || !radii_ok((lo, hi))
            || !self.test_radius_range.is_none_or(radii_ok)
        {
            return Err(Error::InvalidArgument(format!("invalid dataset config: {self:?}")));
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<Camera> {
        let r = self.resolution;
        Camera::centered(self.focal_factor * r as f64, r, r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub image: String,
    pub pose_file: String,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub split: Split,
    /// Generator description; absent for imported data.
    pub spec: Option<SceneSpec>,
    pub views: Vec<ViewEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub layout_version: u32,
    pub resolution: usize,
    pub views_per_scene: usize,
    pub camera: Camera,
    pub config: Option<DatasetConfig>,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn scene_count(&self) -> usize {
        self.scenes.len()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::dataset(&path, "missing file"));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::dataset(&path, e))?;
        if m.layout_version != LAYOUT_VERSION {
            return Err(Error::dataset(
                &path,
                format!("layout version {} (expected {LAYOUT_VERSION})", m.layout_version),
            ));
        }
        Ok(m)
    }
}

fn write_text(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pose_text(pose: &Pose) -> String {
    pose.to_rows()
        .iter()
        .map(|r| r.map(|v| v.to_string()).join(" ") + "\n")
        .collect()
}

fn intrinsics_text(camera: &Camera) -> String {
    let k = camera.intrinsics;
    let mut s: String = (0..3)
        .map(|r| (0..3).map(|c| k[(r, c)].to_string()).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    s.push_str(&format!("{} {}\n", camera.height, camera.width));
    s
}

fn parse_numbers(path: &Path, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::dataset(path, format!("bad number {t:?}: {e}"))))
        .collect()
}

pub fn read_pose_file(path: &Path) -> Result<Pose> {
    let text = fs::read_to_string(path).map_err(|_| Error::dataset(path, "missing file"))?;
    let v = parse_numbers(path, &text)?;
    if v.len() != 12 && v.len() != 16 {
        return Err(Error::dataset(path, format!("expected 12 or 16 numbers, found {}", v.len())));
    }
    let rows = [0, 1, 2].map(|r| [v[4 * r], v[4 * r + 1], v[4 * r + 2], v[4 * r + 3]]);
    Pose::from_rows(&rows).map_err(|e| Error::dataset(path, e))
}

pub fn read_intrinsics_file(path: &Path) -> Result<Camera> {
    let text = fs::read_to_string(path).map_err(|_| Error::dataset(path, "missing file"))?;
    let v = parse_numbers(path, &text)?;
    if v.len() != 11 {
        return Err(Error::dataset(path, format!("expected 11 numbers, found {}", v.len())));
    }
    let k = Matrix3::from_row_slice(&v[..9]);
    Camera::new(k, v[9] as usize, v[10] as usize).map_err(|e| Error::dataset(path, e))
}

/// Renders and writes a dataset to `dir`.
pub fn make_dataset(dir: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let camera = cfg.camera()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let total = cfg.num_scenes + cfg.num_test_scenes;
    let mut scenes = Vec::with_capacity(total);
    for s in 0..total {
        let split = if s < cfg.num_scenes { Split::Train } else { Split::Test };
        let radii = match split {
            Split::Test => cfg.test_radius_range.unwrap_or(cfg.radius_range),
            Split::Train => cfg.radius_range,
        };
        let scene_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(s as u64);
        let spec = SceneSpec::random(scene_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x5ca1_ab1e);
        let id = format!("scene_{s:04}");
        let sdir = dir.join(&id);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        write_text(&sdir.join("intrinsics.txt"), intrinsics_text(&camera))?;
        let mut views = Vec::with_capacity(cfg.views_per_scene);
        for v in 0..cfg.views_per_scene {
            let pose = random_hemisphere_pose(&mut rng, radii)?;
            let image = format!("{id}/view_{v:03}.png");
            let pose_file = format!("{id}/pose_{v:03}.txt");
            render_scene(&spec, &pose, &camera)?.save_png(&dir.join(&image))?;
            write_text(&dir.join(&pose_file), pose_text(&pose))?;
            views.push(ViewEntry { image, pose_file, pose });
        }
        scenes.push(SceneEntry {
            id,
            split,
            spec: Some(spec),
            views,
        });
    }
    let manifest = DatasetManifest {
        layout_version: LAYOUT_VERSION,
        resolution: cfg.resolution,
        views_per_scene: cfg.views_per_scene,
        camera,
        config: Some(cfg.clone()),
        scenes,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

/// A dataset directory opened through its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Reads the manifest and checks that every listed file exists.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(root)?;
        for s in &manifest.scenes {
            for v in &s.views {
                for f in [&v.image, &v.pose_file] {
                    let p = root.join(f);
                    if !p.exists() {
                        return Err(Error::dataset(&p, "missing file"));
                    }
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn scene_indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.scenes.len())
            .filter(|&i| self.manifest.scenes[i].split == split)
            .collect()
    }

    /// All views of a scene with images in `[0, 1]`.
    pub fn load_scene(&self, index: usize) -> Result<Vec<PosedImage>> {
        let entry = self
            .manifest
            .scenes
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no scene with index {index}")))?;
        entry
            .views
            .iter()
            .map(|v| {
                Ok(PosedImage {
                    image: Image::load_png(&self.root.join(&v.image))?,
                    pose: read_pose_file(&self.root.join(&v.pose_file))?,
                    camera: self.manifest.camera,
                })
            })
            .collect()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Vec<PosedImage>>> {
        self.scene_indices(split).into_iter().map(|i| self.load_scene(i)).collect()
    }

    /// Infinite seeded stream of same-scene view pairs from `split`.
    pub fn pairs(&self, split: Split, seed: u64) -> Result<PairStream> {
        let scenes = self.load_split(split)?;
        PairStream::new(scenes, seed)
    }
}

/// Scene uniformly, then two distinct view indices uniformly.
pub fn draw_pair<R: Rng + ?Sized>(rng: &mut R, views_per_scene: &[usize]) -> (usize, usize, usize) {
    let s = rng.random_range(0..views_per_scene.len());
    let n = views_per_scene[s];
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (s, i, j)
}

/// One training pair with images in `[−1, 1]`.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub scene: usize,
    pub views: (usize, usize),
    pub x1: Image,
    pub x2: Image,
    pub poses: [Pose; 2],
    pub camera: Camera,
}

pub struct PairStream {
    scenes: Vec<Vec<PosedImage>>,
    counts: Vec<usize>,
    rng: ChaCha8Rng,
}

impl PairStream {
    pub fn new(scenes: Vec<Vec<PosedImage>>, seed: u64) -> Result<Self> {
        if scenes.is_empty() || scenes.iter().any(|s| s.len() < 2) {
            return Err(Error::InvalidArgument("every scene needs at least two views".into()));
        }
        let counts = scenes.iter().map(Vec::len).collect();
        Ok(Self {
            scenes,
            counts,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Iterator for PairStream {
    type Item = TrainingPair;

    fn next(&mut self) -> Option<TrainingPair> {
        let (s, i, j) = draw_pair(&mut self.rng, &self.counts);
        let (a, b) = (&self.scenes[s][i], &self.scenes[s][j]);
        Some(TrainingPair {
            scene: s,
            views: (i, j),
            x1: a.image.to_signed(),
            x2: b.image.to_signed(),
            poses: [a.pose, b.pose],
            camera: a.camera,
        })
    }
}

/// Loads one SRN-style instance directory: `rgb/*.png`, `pose/*.txt`
/// (4×4 world-from-camera) and `intrinsics.txt` (`f cx cy 0`, then the
/// grid origin, scale and `H W` lines).
pub fn load_srn_scene(dir: &Path) -> Result<Vec<PosedImage>> {
    let ipath = dir.join("intrinsics.txt");
    let text = fs::read_to_string(&ipath).map_err(|_| Error::dataset(&ipath, "missing file"))?;
    let lines: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_numbers(&ipath, l))
        .collect::<Result<_>>()?;
    if lines.len() < 4 || lines[0].len() < 3 || lines[3].len() < 2 {
        return Err(Error::dataset(&ipath, "unexpected intrinsics layout"));
    }
    let (f, cx, cy) = (lines[0][0], lines[0][1], lines[0][2]);
    let (h, w) = (lines[3][0] as usize, lines[3][1] as usize);
    let listing = |sub: &str, ext: &str| -> Result<Vec<PathBuf>> {
        let d = dir.join(sub);
        let mut v: Vec<PathBuf> = fs::read_dir(&d)
            .map_err(|_| Error::dataset(&d, "missing directory"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == ext))
            .collect();
        v.sort();
        Ok(v)
    };
    let images = listing("rgb", "png")?;
    let poses = listing("pose", "txt")?;
    if images.len() != poses.len() {
        return Err(Error::dataset(dir, format!("{} images but {} poses", images.len(), poses.len())));
    }
    let mut out = Vec::with_capacity(images.len());
    for (ip, pp) in images.iter().zip(&poses) {
        let image = Image::load_png(ip)?;
        // Intrinsics are given at the original resolution; rescale to the image.
        let s = image.width as f64 / w as f64;
        let camera = Camera::from_focal(f * s, f * s, cx * s, cy * image.height as f64 / h as f64, image.height, image.width)
            .map_err(|e| Error::dataset(&ipath, e))?;
        out.push(PosedImage {
            image,
            pose: read_pose_file(pp)?,
            camera,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn cam(n: usize) -> Camera {
        Camera::centered(n as f64, n, n).unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        let pose = orbit_pose(2.0, 0.3, 0.5).unwrap();
        let img = render_scene(&SceneSpec::empty(), &pose, &cam(8)).unwrap();
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn head_on_red_sphere_centre_pixel() {
        let spec = SceneSpec {
            primitives: vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 1.0,
                albedo: [1.0, 0.0, 0.0],
            }],
            light: Light {
                direction: [0.0, 0.0, -1.0],
                intensity: 1.0,
            },
            ..SceneSpec::empty()
        };
        let pose = Pose::look_at(Vector3::new(0.0, 0.0, 3.0), Vector3::zeros(), Vector3::y()).unwrap();
        // Odd size so a pixel centre lies exactly on the optical axis.
        let camera = Camera::centered(9.0, 9, 9).unwrap();
        let img = render_scene(&spec, &pose, &camera).unwrap();
        assert_eq!(img.pixel(4, 4), [1.0, 0.0, 0.0]);
        // Dimmer away from the centre, never below ambient.
        let edge = img.pixel(4, 2)[0];
        assert!(edge < 1.0 && edge >= 0.1);
    }

    #[test]
    fn box_face_shading() {
        let spec = SceneSpec {
            primitives: vec![Primitive::Box {
                min: [-0.3; 3],
                max: [0.3; 3],
                albedo: [0.5, 0.5, 0.5],
            }],
            light: Light {
                direction: [0.0, 0.0, -1.0],
                intensity: 1.0,
            },
            ..SceneSpec::empty()
        };
        spec.validate().unwrap();
        let pose = Pose::look_at(Vector3::new(0.0, 0.0, 3.0), Vector3::zeros(), Vector3::y()).unwrap();
        let img = render_scene(&spec, &pose, &Camera::centered(9.0, 9, 9).unwrap()).unwrap();
        let p = img.pixel(4, 4);
        assert!((p[0] - 0.55).abs() < 1e-6);
    }

    #[test]
    fn validation() {
        for s in 0..50 {
            SceneSpec::random(s).validate().unwrap();
        }
        let mut s = SceneSpec::sphere(1.5, [0.5; 3]);
        assert!(s.validate().is_err());
        s = SceneSpec::sphere(0.5, [1.5, 0.0, 0.0]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_round_trips() {
        let cfg = DatasetConfig {
            num_scenes: 2,
            num_test_scenes: 1,
            views_per_scene: 4,
            resolution: 8,
            test_radius_range: Some((4.0, 5.0)),
            seed: 7,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = make_dataset(a.path(), &cfg).unwrap();
        make_dataset(b.path(), &cfg).unwrap();
        for s in &m.scenes {
            for v in &s.views {
                for f in [&v.image, &v.pose_file] {
                    assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
                }
                let r = v.pose.distance_to_origin();
                let (lo, hi) = if s.split == Split::Test { (4.0, 5.0) } else { (2.0, 2.5) };
                assert!(r >= lo - 1e-9 && r <= hi + 1e-9);
            }
        }
        let text = fs::read(a.path().join("manifest.json")).unwrap();
        let back = DatasetManifest::read(a.path()).unwrap();
        assert_eq!(back, m);
        back.write(b.path()).unwrap();
        assert_eq!(text, fs::read(b.path().join("manifest.json")).unwrap());

        let ds = Dataset::open(a.path()).unwrap();
        assert_eq!(ds.scene_indices(Split::Test), vec![2]);
        let views = ds.load_scene(0).unwrap();
        let cam = read_intrinsics_file(&a.path().join("scene_0000/intrinsics.txt")).unwrap();
        assert_eq!(cam, ds.manifest.camera);
        for (v, e) in views.iter().zip(&m.scenes[0].views) {
            assert_eq!(v.pose, e.pose);
            let again = render_scene(m.scenes[0].spec.as_ref().unwrap(), &v.pose, &cam).unwrap();
            let quantised = again.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            assert_eq!(quantised, v.image);
        }
    }

    #[test]
    fn missing_view_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            num_scenes: 1,
            views_per_scene: 2,
            resolution: 4,
            ..Default::default()
        };
        make_dataset(dir.path(), &cfg).unwrap();
        fs::remove_file(dir.path().join("scene_0000/view_001.png")).unwrap();
        let e = Dataset::open(dir.path()).unwrap_err().to_string();
        assert!(e.contains("view_001.png"), "{e}");
    }

    #[test]
    fn pairs_share_a_scene_and_are_uniform() {
        let camera = cam(2);
        let scenes: Vec<Vec<PosedImage>> = (0..2)
            .map(|s| {
                (0..3)
                    .map(|v| PosedImage {
                        image: Image::filled(2, 2, [s as f32, v as f32 / 2.0, 1.0]),
                        pose: orbit_pose(2.0, v as f64, 0.2).unwrap(),
                        camera,
                    })
                    .collect()
            })
            .collect();
        let stream = PairStream::new(scenes, 11).unwrap();
        let mut counts = [0usize; 12];
        let draws = 10_000;
        for p in stream.take(draws) {
            assert_ne!(p.views.0, p.views.1);
            assert_eq!(p.x1.data[0], p.scene as f32 * 2.0 - 1.0);
            assert_eq!(p.x2.data[0], p.scene as f32 * 2.0 - 1.0);
            let (i, j) = p.views;
            let jj = if j > i { j - 1 } else { j };
            counts[p.scene * 6 + i * 2 + jj] += 1;
        }
        // 12 equally likely cells; chi-square with 11 dof, 3σ bound.
        let e = draws as f64 / 12.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let bound = 11.0 + 3.0 * (2.0 * 11.0f64).sqrt();
        assert!(chi2 < bound, "chi2 = {chi2}");
    }

    #[test]
    fn srn_layout_loads() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("rgb")).unwrap();
        fs::create_dir_all(dir.path().join("pose")).unwrap();
        fs::write(dir.path().join("intrinsics.txt"), "16 8 8 0.\n0. 0. 0.\n1.\n16 16\n").unwrap();
        let pose = orbit_pose(2.0, 0.1, 0.4).unwrap();
        let rows = pose.to_rows();
        let mut text: String = rows.iter().map(|r| r.map(|v| v.to_string()).join(" ") + " ").collect();
        text.push_str("0 0 0 1\n");
        fs::write(dir.path().join("pose/000000.txt"), text).unwrap();
        Image::filled(8, 8, [0.0, 0.5, 1.0]).save_png(&dir.path().join("rgb/000000.png")).unwrap();
        let views = load_srn_scene(dir.path()).unwrap();
        assert_eq!(views.len(), 1);
        assert_eq!(views[0].camera.focal(), (8.0, 8.0));
        assert!((views[0].pose.translation - pose.translation).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn global_rotation_invariance(ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, seed in 0u64..20) {
            let spec = SceneSpec::random(seed);
            let pose = orbit_pose(2.2, 0.4, 0.7).unwrap();
            let rot = Rotation3::from_euler_angles(ax, ay, az);
            let r = *rot.matrix();
            let rotated_pose = Pose::new(r * pose.rotation, r * pose.translation).unwrap();
            // Only spheres rotate into spheres; boxes stay axis-aligned.
            let spheres: Vec<Primitive> = spec.primitives.iter().filter_map(|p| match p {
                Primitive::Sphere { center, radius, albedo } => {
                    let c = r * Vector3::from(*center);
                    Some(Primitive::Sphere { center: [c[0], c[1], c[2]], radius: *radius, albedo: *albedo })
                }
                _ => None,
            }).collect();
            let base = SceneSpec { primitives: spec.primitives.iter().filter(|p| matches!(p, Primitive::Sphere { .. })).cloned().collect(), ..spec.clone() };
            let l = r * Vector3::from(spec.light.direction);
            let rotated = SceneSpec { primitives: spheres, light: Light { direction: [l[0], l[1], l[2]], intensity: spec.light.intensity }, ..spec.clone() };
            let a = render_scene(&base, &pose, &cam(12)).unwrap();
            let b = render_scene(&rotated, &rotated_pose, &cam(12)).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() < 1e-4);
            }
        }
    }
}
