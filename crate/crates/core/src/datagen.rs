//! Synthetic in-the-wild datasets.
//!
//! A procedural scene of flat-colored spheres is rendered analytically, then
//! every training image receives its own color shift and occluders. Clean
//! originals, perturbation parameters and occluder masks are kept so every
//! downstream metric is exact.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cameras::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GAIN_RANGE: (f64, f64) = (0.6, 1.4);
pub const BIAS_LIMIT: f64 = 0.15;
pub const COVERAGE_RANGE: (f64, f64) = (0.10, 0.30);
pub const COVERAGE_TOLERANCE: f64 = 0.02;
const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub spheres: Vec<Sphere>,
    pub background: [f64; 3],
    /// Lambertian shading under a fixed light instead of flat albedo.
    #[serde(default)]
    pub diffuse_shading: bool,
}

impl SyntheticScene {
    pub fn new(spheres: Vec<Sphere>, background: [f64; 3]) -> Result<Self> {
        for (i, s) in spheres.iter().enumerate() {
            if s.radius.is_nan() || s.radius <= 0.0 {
                return Err(Error::Input(format!("sphere {i} has radius {}", s.radius)));
            }
            if s.center.iter().any(|c| c.abs() + s.radius > 1.0) {
                return Err(Error::Input(format!(
                    "sphere {i} leaves the cube [-1, 1]^3"
                )));
            }
        }
        Ok(Self {
            spheres,
            background,
            diffuse_shading: false,
        })
    }

    /// Four to six saturated spheres on a light background.
    pub fn procedural(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..=6);
        let spheres = (0..n)
            .map(|_| {
                let radius = rng.random_range(0.2..0.45);
                let lim = 0.85 - radius;
                let center = [
                    rng.random_range(-lim..lim),
                    rng.random_range(-lim..lim),
                    rng.random_range(-lim..lim),
                ];
                let hue = rng.random::<f64>();
                Sphere {
                    center,
                    radius,
                    albedo: hue_to_rgb(hue, rng.random_range(0.75..0.95)),
                }
            })
            .collect();
        let grey = rng.random_range(0.75..0.9);
        Self {
            spheres,
            background: [grey, grey, grey + 0.05],
            diffuse_shading: false,
        }
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.spheres.is_empty() {
            return Vector3::zeros();
        }
        let sum = self
            .spheres
            .iter()
            .fold(Vector3::zeros(), |acc, s| acc + Vector3::from(s.center));
        sum / self.spheres.len() as f64
    }
}

fn hue_to_rgb(h: f64, value: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        value * (1.0 - 0.8 * (k.min(4.0 - k).clamp(0.0, 1.0)))
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// Nearest positive ray parameter hitting `s`, for unit `d`.
fn intersect(s: &Sphere, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let oc = o - Vector3::from(s.center);
    let b = oc.dot(d);
    let c = oc.norm_squared() - s.radius * s.radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    [-b - root, -b + root].into_iter().find(|&t| t > 1e-9)
}

/// Analytic render: each pixel center takes the albedo of the nearest sphere
/// it hits, or the background.
pub fn render_ground_truth(
    scene: &SyntheticScene,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
) -> Image {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let light = Vector3::new(0.4, -0.3, 0.85).normalize();
    let r = pose.rotation();
    let o = *pose.translation();
    let mut img = Image::filled(w, h, scene.background);
    for y in 0..h {
        for x in 0..w {
            let cam = Vector3::new(
                (x as f64 + 0.5 - intr.cx) / intr.focal,
                (intr.cy - y as f64 - 0.5) / intr.focal,
                -1.0,
            );
            let d = (r * cam).normalize();
            let hit = scene
                .spheres
                .iter()
                .filter_map(|s| intersect(s, &o, &d).map(|t| (t, s)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((t, s)) = hit {
                let mut c = s.albedo;
                if scene.diffuse_shading {
                    let n = (o + t * d - Vector3::from(s.center)).normalize();
                    let shade = 0.3 + 0.7 * n.dot(&light).max(0.0);
                    c = c.map(|v| v * shade);
                }
                img.set_pixel(x, y, c);
            }
        }
    }
    img
}

/// `clamp(gain ⊙ c + bias, 0, 1)` per pixel.
pub fn apply_color_perturbation(image: &Image, gain: [f64; 3], bias: [f64; 3]) -> Image {
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (gain[c] * px[c] + bias[c]).clamp(0.0, 1.0);
        }
    }
    out
}

/// Random gain in [0.6, 1.4]³ and bias in [−0.15, 0.15]³.
pub fn sample_color_perturbation<R: Rng + ?Sized>(rng: &mut R) -> ([f64; 3], [f64; 3]) {
    let gain = [(); 3].map(|_| rng.random_range(GAIN_RANGE.0..=GAIN_RANGE.1));
    let bias = [(); 3].map(|_| rng.random_range(-BIAS_LIMIT..=BIAS_LIMIT));
    (gain, bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccluderSpec {
    /// Fraction of pixels to cover.
    pub coverage: f64,
    /// Number of shapes, at most 3. Zero leaves images untouched.
    pub shapes: usize,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64, scale: f64) -> bool {
        match *self {
            Shape::Rect { cx, cy, hw, hh } => {
                (x - cx).abs() <= hw * scale && (y - cy).abs() <= hh * scale
            }
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / (rx * scale), (y - cy) / (ry * scale));
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn coverage_at(shapes: &[Shape], w: usize, h: usize, scale: f64) -> usize {
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if shapes.iter().any(|s| s.contains(px, py, scale)) {
                n += 1;
            }
        }
    }
    n
}

/// Paints solid-colored rectangles and ellipses over `image`, scaled so the
/// union covers `spec.coverage` of the pixels within ±2%.
pub fn composite_occluder(image: &Image, spec: &OccluderSpec, seed: u64) -> Result<(Image, Mask)> {
    let (w, h) = (image.width(), image.height());
    if spec.shapes == 0 || spec.coverage == 0.0 {
        return Ok((image.clone(), Mask::empty(w, h)));
    }
    if spec.shapes > 3 {
        return Err(Error::Input(format!(
            "at most 3 occluders, got {}",
            spec.shapes
        )));
    }
    if !(COVERAGE_RANGE.0..=COVERAGE_RANGE.1).contains(&spec.coverage) {
        return Err(Error::Input(format!(
            "occluder coverage {} outside [{}, {}]",
            spec.coverage, COVERAGE_RANGE.0, COVERAGE_RANGE.1
        )));
    }
    let total = (w * h) as f64;
    let target = spec.coverage * total;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let shapes: Vec<Shape> = (0..spec.shapes)
            .map(|_| {
                let cx = rng.random_range(0.15..0.85) * w as f64;
                let cy = rng.random_range(0.15..0.85) * h as f64;
                let a = rng.random_range(0.1..0.3) * w as f64;
                let b = rng.random_range(0.1..0.3) * h as f64;
                if rng.random_bool(0.5) {
                    Shape::Rect {
                        cx,
                        cy,
                        hw: a,
                        hh: b,
                    }
                } else {
                    Shape::Ellipse {
                        cx,
                        cy,
                        rx: a,
                        ry: b,
                    }
                }
            })
            .collect();
        let colors: Vec<[f64; 3]> = shapes
            .iter()
            .map(|_| [(); 3].map(|_| rng.random::<f64>()))
            .collect();
        // Union area grows monotonically with the common scale.
        let (mut lo, mut hi) = (0.0, 4.0);
        if (coverage_at(&shapes, w, h, hi) as f64) < target {
            continue;
        }
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if (coverage_at(&shapes, w, h, mid) as f64) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let covered = coverage_at(&shapes, w, h, hi) as f64;
        if ((covered - target) / total).abs() > COVERAGE_TOLERANCE {
            continue;
        }
        let mut out = image.clone();
        let mut mask = Mask::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // Later shapes are painted on top.
                if let Some(k) = (0..shapes.len())
                    .rev()
                    .find(|&k| shapes[k].contains(px, py, hi))
                {
                    out.set_pixel(x, y, colors[k]);
                    mask.data[y * w + x] = true;
                }
            }
        }
        return Ok((out, mask));
    }
    Err(Error::Generation(format!(
        "could not place {} occluders covering {:.0}% of a {w}x{h} image in {MAX_PLACEMENT_ATTEMPTS} attempts",
        spec.shapes,
        100.0 * spec.coverage
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub color: bool,
    pub occlusion: bool,
    /// Per-image occluder coverage; drawn from [0.10, 0.30] when unset.
    pub coverage: Option<f64>,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn color_only(seed: u64) -> Self {
        Self {
            color: true,
            occlusion: false,
            coverage: None,
            seed,
        }
    }

    pub fn occlusion_only(seed: u64) -> Self {
        Self {
            color: false,
            occlusion: true,
            coverage: None,
            seed,
        }
    }

    pub fn combined(seed: u64) -> Self {
        Self {
            color: true,
            occlusion: true,
            coverage: None,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub width: u32,
    pub height: u32,
    pub fov_x_deg: f64,
    /// Distance from the scene centroid to every camera.
    pub camera_distance: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 100,
            n_test: 8,
            width: 64,
            height: 64,
            fov_x_deg: 40.0,
            camera_distance: 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestIntrinsics {
    pub fx: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: u32,
    pub h: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: usize,
    pub split: Split,
    /// Row-major 4×4 camera-to-world matrix.
    pub pose: Vec<f64>,
    /// Perturbed image, relative to the manifest directory.
    pub image: String,
    pub clean: String,
    pub mask: Option<String>,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub intrinsics: ManifestIntrinsics,
    pub frames: Vec<Frame>,
}

impl DatasetManifest {
    pub fn camera(&self) -> Result<CameraIntrinsics> {
        let i = &self.intrinsics;
        CameraIntrinsics::new(i.fx, i.cx, i.cy, i.w, i.h)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        let mut ids: Vec<usize> = m.frames.iter().map(|f| f.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::Format(format!(
                "{}: duplicate frame ids",
                path.display()
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn hemisphere_pose<R: Rng + ?Sized>(
    rng: &mut R,
    target: Vector3<f64>,
    distance: f64,
) -> Result<CameraPose> {
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let elevation = rng.random_range(10f64.to_radians()..70f64.to_radians());
    let eye = target
        + distance
            * Vector3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
    CameraPose::look_at(eye, target, Vector3::z())
}

/// Renders and perturbs a dataset into `out_dir` and writes `manifest.json`.
///
/// Training frames get ids `0..n_train` and are written as `train/NNN.png`
/// (perturbed), `NNN_clean.png` and, with occlusion, `NNN_mask.png`. Test
/// frames follow with `test/NNN_clean.png` and a color-only perturbed variant
/// `test/NNN.png`. Identical inputs produce byte-identical files.
pub fn generate_dataset(
    scene: &SyntheticScene,
    spec: &DatasetSpec,
    perturb: &PerturbationSpec,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if spec.n_train == 0 {
        return Err(Error::Input(
            "dataset needs at least one training image".into(),
        ));
    }
    if let Some(c) = perturb.coverage {
        if perturb.occlusion && !(COVERAGE_RANGE.0..=COVERAGE_RANGE.1).contains(&c) {
            return Err(Error::Input(format!(
                "occluder coverage {c} outside [0.10, 0.30]"
            )));
        }
    }
    let intr = CameraIntrinsics::from_fov(spec.width, spec.height, spec.fov_x_deg)?;
    for split in ["train", "test"] {
        let dir = out_dir.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(perturb.seed);
    let centroid = scene.centroid();
    let mut frames = Vec::with_capacity(spec.n_train + spec.n_test);
    for id in 0..spec.n_train + spec.n_test {
        let split = if id < spec.n_train {
            Split::Train
        } else {
            Split::Test
        };
        let pose = hemisphere_pose(&mut rng, centroid, spec.camera_distance)?;
        let (gain, bias) = sample_color_perturbation(&mut rng);
        let coverage = perturb
            .coverage
            .unwrap_or_else(|| rng.random_range(COVERAGE_RANGE.0..=COVERAGE_RANGE.1));
        let shapes = rng.random_range(1..=3);
        let occluder_seed = rng.random::<u64>();
        let (gain, bias) = if perturb.color {
            (gain, bias)
        } else {
            ([1.0; 3], [0.0; 3])
        };

        let clean = render_ground_truth(scene, &intr, &pose);
        let colored = apply_color_perturbation(&clean, gain, bias);
        let dir_name = if split == Split::Train {
            "train"
        } else {
            "test"
        };
        let rel = |suffix: &str| format!("{dir_name}/{id:03}{suffix}.png");
        let mut mask_path = None;
        let perturbed = if split == Split::Train && perturb.occlusion {
            let (img, mask) =
                composite_occluder(&colored, &OccluderSpec { coverage, shapes }, occluder_seed)?;
            let m = rel("_mask");
            mask.save_png(&out_dir.join(&m))?;
            mask_path = Some(m);
            img
        } else {
            colored
        };
        perturbed.save_png(&out_dir.join(rel("")))?;
        clean.save_png(&out_dir.join(rel("_clean")))?;
        frames.push(Frame {
            id,
            split,
            pose: pose.to_row_major().to_vec(),
            image: rel(""),
            clean: rel("_clean"),
            mask: mask_path,
            gain,
            bias,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        intrinsics: ManifestIntrinsics {
            fx: intr.focal,
            cx: intr.cx,
            cy: intr.cy,
            w: intr.width,
            h: intr.height,
        },
        frames,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// One frame with its images loaded.
#[derive(Clone, Debug)]
pub struct View {
    pub id: usize,
    pub pose: CameraPose,
    pub image: Image,
    pub clean: Image,
    pub mask: Option<Mask>,
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub intrinsics: CameraIntrinsics,
    pub train: Vec<View>,
    pub test: Vec<View>,
}

impl Dataset {
    /// Loads `manifest.json` (or the given manifest file) and every image it
    /// references.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = manifest_path
            .parent()
            .map_or_else(PathBuf::new, Path::to_path_buf);
        let manifest = DatasetManifest::load(&manifest_path)?;
        let intrinsics = manifest.camera()?;
        let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);
        let check = |img: &Image, name: &str| {
            if img.width() != w || img.height() != h {
                return Err(Error::Input(format!(
                    "{name} is {}x{}, manifest says {w}x{h}",
                    img.width(),
                    img.height()
                )));
            }
            Ok(())
        };
        let mut train = Vec::new();
        let mut test = Vec::new();
        for f in &manifest.frames {
            let image = Image::load_png(&root.join(&f.image))?;
            check(&image, &f.image)?;
            let clean = Image::load_png(&root.join(&f.clean))?;
            check(&clean, &f.clean)?;
            let mask = f
                .mask
                .as_ref()
                .map(|m| Mask::load_png(&root.join(m)))
                .transpose()?;
            let view = View {
                id: f.id,
                pose: CameraPose::from_row_major(&f.pose)?,
                image,
                clean,
                mask,
            };
            match f.split {
                Split::Train => train.push(view),
                Split::Test => test.push(view),
            }
        }
        if train.is_empty() {
            return Err(Error::Input(format!(
                "{}: no training frames",
                manifest_path.display()
            )));
        }
        Ok(Self {
            root,
            manifest,
            intrinsics,
            train,
            test,
        })
    }

    pub fn train_poses(&self) -> Vec<CameraPose> {
        self.train.iter().map(|v| v.pose).collect()
    }
}
