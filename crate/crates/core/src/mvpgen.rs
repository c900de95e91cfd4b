//! Multi-view partial scan generation.
//!
//! Each model is seen from 26 fixed relative directions (the non-zero offsets
//! of the 3x3x3 integer lattice) under one random global rotation. A view is
//! an orthographic z-buffer pass over the dense surface sample; the visible
//! subset is reduced to the base resolution with farthest point sampling.
//! Ground truth comes from Poisson-disk elimination at 1x, 2x, 4x and 8x the
//! base resolution.
//!
//! On disk a dataset is a `manifest.json` plus one little-endian `f32` blob
//! per cloud, named `{model_id}_{view}_{role}_{multiple}x.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{self, dot, normalize, Point, PointCloud, Role};

pub const VIEW_COUNT: usize = 26;
pub const RESOLUTION_MULTIPLES: [usize; 4] = [1, 2, 4, 8];
pub const DATASET_VERSION: u32 = 1;
/// Blobs per sample: one partial plus four ground-truth resolutions.
pub const FILES_PER_SAMPLE: usize = 1 + RESOLUTION_MULTIPLES.len();

pub type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: &Point) -> Point {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

fn unit(v: Point) -> Point {
    let n = geometry::norm(&v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: &Point, b: &Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn det3(m: &Mat3) -> f64 {
    dot(&m[0], &cross(&m[1], &m[2]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Viewing direction (from the camera towards the object).
    pub direction: Point,
    pub up: Point,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub poses: Vec<CameraPose>,
    pub global_rotation: Mat3,
    pub seed: u64,
}

/// Uniform random rotation from a normalised Gaussian quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    let mut q = [0.0f64; 4];
    loop {
        for v in &mut q {
            *v = rng.sample(StandardNormal);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// The 26 lattice directions in a fixed order.
pub fn lattice_directions() -> Vec<Point> {
    let mut dirs = Vec::with_capacity(VIEW_COUNT);
    for x in -1i32..=1 {
        for y in -1i32..=1 {
            for z in -1i32..=1 {
                if (x, y, z) != (0, 0, 0) {
                    dirs.push(unit([x as f64, y as f64, z as f64]));
                }
            }
        }
    }
    dirs
}

/// Unit vector orthogonal to `d`, from the world z axis (or y when `d` is
/// vertical).
fn up_for(d: &Point) -> Point {
    let reference = if dot(d, &[0.0, 0.0, 1.0]).abs() > 0.99 {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let k = dot(&reference, d);
    unit([reference[0] - k * d[0], reference[1] - k * d[1], reference[2] - k * d[2]])
}

pub fn camera_view_set(seed: u64) -> ViewSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = random_rotation(&mut rng);
    let poses = lattice_directions()
        .iter()
        .map(|d| {
            let up = up_for(d);
            CameraPose {
                direction: unit(mat_vec(&rot, d)),
                up: unit(mat_vec(&rot, &up)),
                distance: 2.0,
            }
        })
        .collect();
    ViewSet {
        poses,
        global_rotation: rot,
        seed,
    }
}

/// Orthographic depth buffer settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZBuffer {
    pub grid_w: usize,
    pub grid_h: usize,
    /// Half-width, in pixels, of the square footprint each point occludes.
    pub splat_px: usize,
    /// Depth slack, in pixel widths, before a splat hides a point.
    pub depth_tol_px: f64,
}

impl ZBuffer {
    pub fn new(grid_w: usize, grid_h: usize) -> Self {
        Self {
            grid_w,
            grid_h,
            splat_px: 1,
            depth_tol_px: 3.0,
        }
    }

    /// Image-plane extent covers `[-1.1, 1.1]` vertically; normalised shapes
    /// fit inside.
    fn pixel_size(&self) -> f64 {
        2.2 / self.grid_h as f64
    }
}

/// Visible subset of `dense` seen along `pose.direction` with the default
/// splat settings.
pub fn render_partial(dense: &PointCloud, pose: &CameraPose, grid_w: usize, grid_h: usize) -> Result<PointCloud> {
    render_partial_with(dense, pose, &ZBuffer::new(grid_w, grid_h))
}

/// Each pixel keeps only its nearest point (ties to the lower index). A
/// kept point must in addition not lie behind the splatted footprint of a
/// nearer point, which stops back surfaces showing through gaps between
/// samples.
pub fn render_partial_with(dense: &PointCloud, pose: &CameraPose, zb: &ZBuffer) -> Result<PointCloud> {
    if zb.grid_w == 0 || zb.grid_h == 0 {
        return Err(Error::config("render grid must be non-empty"));
    }
    let right = cross(&pose.up, &pose.direction);
    let px = zb.pixel_size();
    let (w, h) = (zb.grid_w as i64, zb.grid_h as i64);
    let mut owner: Vec<Option<(f64, usize)>> = vec![None; zb.grid_w * zb.grid_h];
    let mut splat = vec![f64::INFINITY; zb.grid_w * zb.grid_h];
    let mut pix = Vec::with_capacity(dense.len());
    for (i, p) in dense.points().iter().enumerate() {
        let u = (dot(&right, p) / px + w as f64 / 2.0).floor() as i64;
        let v = (dot(&pose.up, p) / px + h as f64 / 2.0).floor() as i64;
        let depth = dot(&pose.direction, p);
        if u < 0 || v < 0 || u >= w || v >= h {
            pix.push(None);
            continue;
        }
        let cell = (v * w + u) as usize;
        pix.push(Some((cell, depth)));
        match owner[cell] {
            Some((d, _)) if d <= depth => {}
            _ => owner[cell] = Some((depth, i)),
        }
        let r = zb.splat_px as i64;
        for dv in -r..=r {
            for du in -r..=r {
                let (uu, vv) = (u + du, v + dv);
                if uu >= 0 && vv >= 0 && uu < w && vv < h {
                    let c = (vv * w + uu) as usize;
                    if depth < splat[c] {
                        splat[c] = depth;
                    }
                }
            }
        }
    }
    let tol = zb.depth_tol_px * px;
    let mut keep = Vec::new();
    for (i, slot) in pix.iter().enumerate() {
        if let Some((cell, depth)) = slot {
            if owner[*cell].map(|(_, j)| j) == Some(i) && *depth <= splat[*cell] + tol {
                keep.push(i);
            }
        }
    }
    if keep.is_empty() {
        return Err(Error::Generation("no point is visible from this pose".into()));
    }
    Ok(dense.select(&keep).with_role(Role::Partial))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Deterministic split by model id, so every view of one shape lands on the
/// same side.
pub fn split_for(model_id: &str, test_frac: f64) -> Split {
    let digest = Sha256::digest(model_id.as_bytes());
    let head = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    if (head as f64 / u64::MAX as f64) < test_frac {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionSample {
    pub partial: PointCloud,
    /// Ground truth at 1x, 2x, 4x and 8x the partial resolution.
    pub complete: Vec<PointCloud>,
    pub category: String,
    pub model_id: String,
    pub view_index: usize,
    pub split: Split,
}

impl CompletionSample {
    pub fn complete_at(&self, multiple: usize) -> Option<&PointCloud> {
        RESOLUTION_MULTIPLES
            .iter()
            .position(|&m| m == multiple)
            .and_then(|i| self.complete.get(i))
    }

    pub fn base_n(&self) -> usize {
        self.partial.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedView {
    pub model_id: String,
    pub view: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct ModelSamples {
    pub samples: Vec<CompletionSample>,
    pub skipped: Vec<SkippedView>,
}

/// Seed for one view's farthest point sampling.
fn view_seed(views: &ViewSet, view: usize) -> u64 {
    views.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(view as u64 + 1)
}

/// All 26 samples for one dense model. Views whose visible set is smaller
/// than `base_n` are skipped and reported.
pub fn build_sample(
    dense: &PointCloud,
    category: &str,
    model_id: &str,
    views: &ViewSet,
    base_n: usize,
    zbuffer: &ZBuffer,
    split: Split,
) -> Result<ModelSamples> {
    if base_n == 0 {
        return Err(Error::config("base resolution must be positive"));
    }
    if dense.len() < 32 * base_n {
        return Err(Error::contract(format!(
            "model {model_id}: {} dense points, need at least {}",
            dense.len(),
            32 * base_n
        )));
    }
    let (dense, _) = normalize(dense);
    let complete = RESOLUTION_MULTIPLES
        .iter()
        .map(|&m| Ok(geometry::poisson_disk_sample(&dense, m * base_n)?.cloud.with_role(Role::Complete)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = ModelSamples::default();
    for (v, pose) in views.poses.iter().enumerate() {
        let visible = match render_partial_with(&dense, pose, zbuffer) {
            Ok(c) => c,
            Err(e) => {
                out.skipped.push(SkippedView {
                    model_id: model_id.to_string(),
                    view: v,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if visible.len() < base_n {
            out.skipped.push(SkippedView {
                model_id: model_id.to_string(),
                view: v,
                reason: format!("{} visible points, need {base_n}", visible.len()),
            });
            continue;
        }
        let partial = geometry::farthest_point_sample(&visible, base_n, view_seed(views, v))?;
        out.samples.push(CompletionSample {
            partial,
            complete: complete.clone(),
            category: category.to_string(),
            model_id: model_id.to_string(),
            view_index: v,
            split,
        });
    }
    Ok(out)
}

/// A dense surface sample of one object, before normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSource {
    pub category: String,
    pub model_id: String,
    pub points: PointCloud,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub base_n: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub seed: u64,
    /// Fraction of model ids assigned to the test split.
    pub split_frac: f64,
    pub jobs: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            base_n: 512,
            grid_w: 200,
            grid_h: 150,
            seed: 0,
            split_frac: 0.2,
            jobs: 1,
        }
    }
}

fn model_seed(seed: u64, model_id: &str) -> u64 {
    let digest = Sha256::digest(model_id.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Runs [`build_sample`] over every model, fanning out over `cfg.jobs`
/// threads. Output order follows the input order.
pub fn generate(models: &[ModelSource], cfg: &GenConfig) -> Result<ModelSamples> {
    let zb = ZBuffer::new(cfg.grid_w, cfg.grid_h);
    let one = |m: &ModelSource| -> Result<ModelSamples> {
        let views = camera_view_set(model_seed(cfg.seed, &m.model_id));
        let split = split_for(&m.model_id, cfg.split_frac);
        build_sample(&m.points, &m.category, &m.model_id, &views, cfg.base_n, &zb, split)
    };
    let jobs = cfg.jobs.max(1).min(models.len().max(1));
    let parts: Vec<Result<ModelSamples>> = if jobs == 1 {
        models.iter().map(one).collect()
    } else {
        let chunk = models.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = models
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(one).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("generation worker panicked"))
                .collect()
        })
    };
    let mut all = ModelSamples::default();
    for p in parts {
        let p = p?;
        all.samples.extend(p.samples);
        all.skipped.extend(p.skipped);
    }
    Ok(all)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [Primitive::Sphere, Primitive::Cube, Primitive::Cylinder, Primitive::Torus];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Cube => "cube",
            Primitive::Cylinder => "cylinder",
            Primitive::Torus => "torus",
        }
    }
}

/// Area-uniform random samples on the surface of a unit-scale primitive.
pub fn sample_surface(shape: Primitive, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let p = match shape {
            Primitive::Sphere => {
                let v: Point = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                if geometry::norm(&v) < 1e-12 {
                    continue;
                }
                unit(v)
            }
            Primitive::Cube => {
                let face = rng.random_range(0..6);
                let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
            Primitive::Cylinder => {
                // radius 0.5, height 2: side area 2pi, caps 2 * pi/4
                let side = 2.0 * std::f64::consts::PI;
                let caps = 0.5 * std::f64::consts::PI;
                let t = rng.random_range(0.0..side + caps);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                if t < side {
                    [0.5 * phi.cos(), 0.5 * phi.sin(), rng.random_range(-1.0..1.0)]
                } else {
                    let r = 0.5 * rng.random_range(0.0f64..1.0).sqrt();
                    let z = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    [r * phi.cos(), r * phi.sin(), z]
                }
            }
            Primitive::Torus => {
                let (big, small) = (0.7, 0.3);
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                if rng.random_range(0.0..1.0) > (big + small * theta.cos()) / (big + small) {
                    continue;
                }
                let ring = big + small * theta.cos();
                [ring * phi.cos(), ring * phi.sin(), small * theta.sin()]
            }
        };
        pts.push(p);
    }
    pts
}

/// `count` synthetic models cycling through the primitives, each with
/// `points` dense samples and a random anisotropic scale.
pub fn synthetic_models(count: usize, points: usize, seed: u64) -> Result<Vec<ModelSource>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let shape = Primitive::ALL[i % Primitive::ALL.len()];
            let scale: Point = [
                rng.random_range(0.6..1.4),
                rng.random_range(0.6..1.4),
                rng.random_range(0.6..1.4),
            ];
            let pts = sample_surface(shape, points, &mut rng)
                .into_iter()
                .map(|p| [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]])
                .collect();
            Ok(ModelSource {
                category: shape.name().to_string(),
                model_id: format!("{}_{i:04}", shape.name()),
                points: PointCloud::new(pts, Role::Complete)?,
            })
        })
        .collect()
}

/// Reads `<dir>/<category>/<model_id>.xyz` (whitespace separated text, one
/// point per line) and `.bin` (little-endian `f32` triplets) files.
pub fn load_models(dir: &Path) -> Result<Vec<ModelSource>> {
    let mut out = Vec::new();
    let mut cats: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    cats.sort();
    for cat in cats {
        let category = cat.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let mut files: Vec<PathBuf> = fs::read_dir(&cat)
            .map_err(|e| Error::io(&cat, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("xyz" | "bin")))
            .collect();
        files.sort();
        for f in files {
            let model_id = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let points = read_points(&f)?;
            out.push(ModelSource {
                category: category.clone(),
                model_id,
                points: PointCloud::new(points, Role::Complete)?,
            });
        }
    }
    Ok(out)
}

/// Reads a `.bin` blob or a whitespace separated text point file.
pub fn read_points(path: &Path) -> Result<Vec<Point>> {
    if path.extension().and_then(|e| e.to_str()) == Some("bin") {
        read_blob(path, None)
    } else {
        read_xyz(path)
    }
}

/// Writes one `x y z` line per point.
pub fn write_xyz(path: &Path, points: &[Point]) -> Result<()> {
    let mut text = String::with_capacity(points.len() * 40);
    for p in points {
        text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_xyz(path: &Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pts = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        if vals.len() != 3 {
            return Err(Error::Manifest(format!("{}:{}: expected 3 coordinates", path.display(), ln + 1)));
        }
        pts.push([vals[0], vals[1], vals[2]]);
    }
    Ok(pts)
}

pub fn write_blob(path: &Path, points: &[Point]) -> Result<()> {
    let mut bytes = Vec::with_capacity(points.len() * 12);
    for p in points {
        for v in p {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads `f32` triplets; `expected` pins the point count.
pub fn read_blob(path: &Path, expected: Option<usize>) -> Result<Vec<Point>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = expected.map(|n| n * 12);
    if bytes.len() % 12 != 0 || want.is_some_and(|w| w != bytes.len()) {
        return Err(Error::TruncatedBlob {
            file: path.to_path_buf(),
            expected: want.unwrap_or(bytes.len() / 12 * 12 + 12),
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes(c[o..o + 4].try_into().expect("4 bytes")) as f64;
            [f(0), f(4), f(8)]
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub model_id: String,
    pub category: String,
    pub view: usize,
    pub split: Split,
    /// Blob file names keyed `partial_1x`, `complete_1x`, ... `complete_8x`.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub base_n: usize,
    pub seed: u64,
    pub grid: [usize; 2],
    pub split_frac: f64,
    pub resolutions: Vec<usize>,
    pub categories: BTreeMap<String, usize>,
    pub sample_count: usize,
    pub samples: Vec<SampleRecord>,
    pub skipped: Vec<SkippedView>,
}

fn blob_name(model_id: &str, view: usize, role: Role, multiple: usize) -> String {
    format!("{model_id}_{view:02}_{}_{multiple}x.bin", role.as_str())
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every sample and a manifest into `dir` (created if missing).
pub fn write_dataset(dir: &Path, data: &ModelSamples, cfg: &GenConfig) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut categories = BTreeMap::new();
    let mut records = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        *categories.entry(s.category.clone()).or_insert(0) += 1;
        let mut files = BTreeMap::new();
        let name = blob_name(&s.model_id, s.view_index, Role::Partial, 1);
        write_blob(&dir.join(&name), s.partial.points())?;
        files.insert("partial_1x".to_string(), name);
        for (&m, cloud) in RESOLUTION_MULTIPLES.iter().zip(&s.complete) {
            let name = blob_name(&s.model_id, s.view_index, Role::Complete, m);
            write_blob(&dir.join(&name), cloud.points())?;
            files.insert(format!("complete_{m}x"), name);
        }
        records.push(SampleRecord {
            model_id: s.model_id.clone(),
            category: s.category.clone(),
            view: s.view_index,
            split: s.split,
            files,
        });
    }
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        base_n: cfg.base_n,
        seed: cfg.seed,
        grid: [cfg.grid_w, cfg.grid_h],
        split_frac: cfg.split_frac,
        resolutions: RESOLUTION_MULTIPLES.iter().map(|m| m * cfg.base_n).collect(),
        categories,
        sample_count: records.len(),
        samples: records,
        skipped: data.skipped.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    crate::diff::write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// Inverse of [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<CompletionSample>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.format_version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_VERSION,
            found: manifest.format_version,
        });
    }
    if manifest.sample_count != manifest.samples.len() {
        return Err(Error::CountMismatch {
            manifest: manifest.sample_count,
            found: manifest.samples.len(),
        });
    }
    let on_disk = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().and_then(|x| x.to_str()) == Some("bin"))
        .count();
    if on_disk != manifest.sample_count * FILES_PER_SAMPLE {
        return Err(Error::CountMismatch {
            manifest: manifest.sample_count * FILES_PER_SAMPLE,
            found: on_disk,
        });
    }
    let base = manifest.base_n;
    let file = |rec: &SampleRecord, key: &str| -> Result<PathBuf> {
        rec.files
            .get(key)
            .map(|f| dir.join(f))
            .ok_or_else(|| Error::Manifest(format!("sample {}/{} lacks `{key}`", rec.model_id, rec.view)))
    };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let partial = PointCloud::new(read_blob(&file(rec, "partial_1x")?, Some(base))?, Role::Partial)?;
        let complete = RESOLUTION_MULTIPLES
            .iter()
            .map(|&m| {
                let pts = read_blob(&file(rec, &format!("complete_{m}x"))?, Some(m * base))?;
                PointCloud::new(pts, Role::Complete)
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(CompletionSample {
            partial,
            complete,
            category: rec.category.clone(),
            model_id: rec.model_id.clone(),
            view_index: rec.view,
            split: rec.split,
        });
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(sample_surface(Primitive::Sphere, n, &mut rng), Role::Complete).unwrap()
    }

    #[test]
    fn view_set_shape() {
        for seed in [0, 1, 99] {
            let vs = camera_view_set(seed);
            assert_eq!(vs.poses.len(), VIEW_COUNT);
            for p in &vs.poses {
                assert!((geometry::norm(&p.direction) - 1.0).abs() < 1e-12);
                assert!(dot(&p.direction, &p.up).abs() < 1e-12);
            }
            assert!((det3(&vs.global_rotation) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_geometry_is_seed_independent() {
        let dots = |seed| {
            let vs = camera_view_set(seed);
            let mut d: Vec<i64> = Vec::new();
            for i in 0..VIEW_COUNT {
                for j in i + 1..VIEW_COUNT {
                    d.push((dot(&vs.poses[i].direction, &vs.poses[j].direction) * 1e9).round() as i64);
                }
            }
            d.sort();
            d
        };
        assert_eq!(dots(3), dots(4242));
        assert_ne!(camera_view_set(3).poses[0].direction, camera_view_set(4242).poses[0].direction);
    }

    #[test]
    fn zbuffer_basics() {
        let pose = camera_view_set(0).poses[5];
        let single = PointCloud::new(vec![[0.1, 0.2, 0.3]], Role::Complete).unwrap();
        assert_eq!(render_partial(&single, &pose, 20, 15).unwrap().points(), single.points());
        let near: Point = [0.0; 3];
        let d = pose.direction;
        let far: Point = [0.5 * d[0], 0.5 * d[1], 0.5 * d[2]];
        let two = PointCloud::new(vec![far, near], Role::Complete).unwrap();
        assert_eq!(render_partial(&two, &pose, 20, 15).unwrap().points(), &[near]);
    }

    #[test]
    fn zbuffer_keeps_pixel_minimum() {
        let dense = sphere(20000, 1);
        let zb = ZBuffer::new(80, 60);
        for pose in camera_view_set(2).poses.iter().take(6) {
            let vis = render_partial_with(&dense, pose, &zb).unwrap();
            let right = cross(&pose.up, &pose.direction);
            let px = zb.pixel_size();
            let cell = |p: &Point| {
                (
                    (dot(&right, p) / px + 40.0).floor() as i64,
                    (dot(&pose.up, p) / px + 30.0).floor() as i64,
                )
            };
            for p in vis.points() {
                let c = cell(p);
                for q in dense.points().iter().filter(|q| cell(q) == c) {
                    assert!(dot(&pose.direction, p) <= dot(&pose.direction, q) + 1e-12);
                }
            }
            // nothing visible from the far hemisphere
            assert!(vis.points().iter().all(|p| dot(&pose.direction, p) < 0.2));
        }
    }

    #[test]
    fn build_sample_counts_and_subset() {
        let base = 16;
        let dense = sphere(32 * base * 2, 3);
        let views = camera_view_set(5);
        let out = build_sample(&dense, "sphere", "s0", &views, base, &ZBuffer::new(40, 30), Split::Train).unwrap();
        assert_eq!(out.samples.len() + out.skipped.len(), VIEW_COUNT);
        assert_eq!(out.samples.len(), VIEW_COUNT);
        let (norm_dense, _) = normalize(&dense);
        for s in &out.samples {
            assert_eq!(s.partial.len(), base);
            let counts: Vec<usize> = s.complete.iter().map(PointCloud::len).collect();
            assert_eq!(counts, vec![base, 2 * base, 4 * base, 8 * base]);
            for p in s.partial.points() {
                assert!(norm_dense.points().iter().any(|q| geometry::dist2(p, q).sqrt() < 1e-9));
            }
        }
        assert!(build_sample(&dense, "sphere", "s0", &views, 64, &ZBuffer::new(40, 30), Split::Train).is_err());
    }

    #[test]
    fn tiny_grid_skips_views() {
        let base = 16;
        let dense = sphere(32 * base, 4);
        let out = build_sample(&dense, "sphere", "s1", &camera_view_set(1), base, &ZBuffer::new(3, 2), Split::Test).unwrap();
        assert_eq!(out.samples.len(), 0);
        assert_eq!(out.skipped.len(), VIEW_COUNT);
    }

    #[test]
    fn split_is_stable_per_model() {
        assert_eq!(split_for("abc", 0.5), split_for("abc", 0.5));
        assert_eq!(split_for("abc", 0.0), Split::Train);
        assert_eq!(split_for("abc", 1.0), Split::Test);
        let tests = (0..1000).filter(|i| split_for(&format!("m{i}"), 0.2) == Split::Test).count();
        assert!((150..250).contains(&tests), "{tests}");
    }
}
