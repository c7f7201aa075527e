//! Synthetic top-view dishes with closed-form volumes.
//!
//! Geometry is in millimetres, volumes in millilitres, energy in kCal. One
//! class is locked to one (shape, color, density) triple.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depth::{RawDepthMap, SegMask, DEPTH_UNIT_MM};
use crate::error::{invalid, Error, Result};
use crate::pnm::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    SphericalCap,
    Cone,
    Cylinder,
    Paraboloid,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::SphericalCap, Shape::Cone, Shape::Cylinder, Shape::Paraboloid];

    pub fn name(self) -> &'static str {
        match self {
            Shape::SphericalCap => "spherical_cap",
            Shape::Cone => "cone",
            Shape::Cylinder => "cylinder",
            Shape::Paraboloid => "paraboloid",
        }
    }

    /// Range of height / radius drawn for this shape.
    fn aspect_range(self) -> (f64, f64) {
        match self {
            Shape::SphericalCap => (0.5, 0.8),
            Shape::Cone => (0.8, 1.1),
            Shape::Cylinder => (0.4, 0.6),
            Shape::Paraboloid => (0.6, 0.9),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub shape: Shape,
    /// kCal per ml.
    pub density: f64,
    pub color: [f64; 3],
}

const BASE_COLORS: [[f64; 3]; 4] = [[0.85, 0.55, 0.2], [0.3, 0.7, 0.25], [0.75, 0.2, 0.2], [0.9, 0.85, 0.35]];

pub fn class_table(k: usize) -> Vec<ClassInfo> {
    (0..k)
        .map(|id| {
            let shape = Shape::ALL[id % 4];
            let color = if id < 4 {
                BASE_COLORS[id]
            } else {
                hue_color(id as f64 * 0.618_034 % 1.0)
            };
            let name = if id < 4 {
                shape.name().to_owned()
            } else {
                format!("{}_{}", shape.name(), id / 4)
            };
            ClassInfo {
                id,
                name,
                shape,
                density: 0.5 * (id + 1) as f64,
                color,
            }
        })
        .collect()
}

/// Saturated color (s = 0.7, v = 0.85) at hue `h` in [0, 1).
fn hue_color(h: f64) -> [f64; 3] {
    let (s, v) = (0.7, 0.85);
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Camera and rendering parameters shared by every dish.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Side length of the square field of view at the plate.
    pub field_mm: f64,
    /// Plate plane distance; maps to normalized depth 1.
    pub far_mm: f64,
    /// Depth span covered by the voxel grid, ending at the plate.
    pub range_mm: f64,
    pub plate_radius_mm: f64,
    /// How far the table sits below the plate surface.
    pub table_drop_mm: f64,
    pub noise_sigma: f64,
    /// Specular highlights brighter than this lose their depth reading.
    pub specular_threshold: Option<f64>,
    pub salt_rate: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            field_mm: 160.0,
            far_mm: 400.0,
            range_mm: 64.0,
            plate_radius_mm: 70.0,
            table_drop_mm: 15.0,
            noise_sigma: 0.02,
            specular_threshold: Some(0.9),
            salt_rate: 0.02,
        }
    }
}

impl SceneConfig {
    /// Noise-free, hole-free rendering at the given resolution.
    pub fn clean(image_size: usize) -> Self {
        Self {
            image_size,
            noise_sigma: 0.0,
            specular_threshold: None,
            salt_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn near_mm(&self) -> f64 {
        self.far_mm - self.range_mm
    }

    pub fn pitch_mm(&self) -> f64 {
        self.field_mm / self.image_size as f64
    }

    /// Physical volume (ml) of one cell when the grid has `z_res` slices spanning the range.
    pub fn cell_volume_ml(&self, z_res: usize) -> f64 {
        self.pitch_mm().powi(2) * self.range_mm / z_res as f64 / 1000.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 {
            return Err(invalid("image_size must be at least 2"));
        }
        if !(self.range_mm > 0.0 && self.range_mm < self.far_mm) {
            return Err(invalid(format!("range {} mm must lie in (0, far)", self.range_mm)));
        }
        if !(0.0..1.0).contains(&self.salt_rate) || self.noise_sigma < 0.0 {
            return Err(invalid("salt rate must be in [0, 1) and noise sigma non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DishSpec {
    pub shape: Shape,
    pub class_id: usize,
    pub radius_mm: f64,
    pub height_mm: f64,
    /// Offset of the dish axis from the image centre.
    pub center_mm: [f64; 2],
    pub density: f64,
    pub plate_radius_mm: f64,
    pub seed: u64,
}

impl DishSpec {
    fn sphere_radius(&self) -> f64 {
        (self.radius_mm.powi(2) + self.height_mm.powi(2)) / (2.0 * self.height_mm)
    }

    /// Height above the plate at radial distance `rho`; zero outside the base.
    pub fn height_at(&self, rho: f64) -> f64 {
        let (r, h) = (self.radius_mm, self.height_mm);
        if rho >= r {
            return 0.0;
        }
        match self.shape {
            Shape::Cylinder => h,
            Shape::Cone => h * (1.0 - rho / r),
            Shape::Paraboloid => h * (1.0 - (rho / r).powi(2)),
            Shape::SphericalCap => {
                // sqrt(R^2 - rho^2) - (R - h), rearranged to avoid cancellation for flat caps.
                let big = self.sphere_radius();
                h - rho * rho / (big + (big * big - rho * rho).sqrt())
            }
        }
    }

    /// d(height)/d(rho) inside the base.
    fn slope_at(&self, rho: f64) -> f64 {
        let (r, h) = (self.radius_mm, self.height_mm);
        match self.shape {
            Shape::Cylinder => 0.0,
            Shape::Cone => -h / r,
            Shape::Paraboloid => -2.0 * h * rho / (r * r),
            Shape::SphericalCap => {
                let big = self.sphere_radius();
                -rho / (big * big - rho * rho).sqrt()
            }
        }
    }

    pub fn validate(&self, scene: &SceneConfig) -> Result<()> {
        if !(self.height_mm > 0.0 && self.radius_mm > 0.0) {
            return Err(invalid("dish radius and height must be positive"));
        }
        if self.radius_mm >= self.plate_radius_mm {
            return Err(invalid(format!(
                "dish radius {} mm does not fit the {} mm plate",
                self.radius_mm, self.plate_radius_mm
            )));
        }
        let half = scene.field_mm / 2.0;
        let reach = self.radius_mm + self.center_mm[0].abs().max(self.center_mm[1].abs());
        if reach > half {
            return Err(invalid(format!("dish reaches {reach} mm, beyond the {half} mm half-field")));
        }
        if self.height_mm > scene.range_mm {
            return Err(invalid(format!(
                "dish height {} mm exceeds the {} mm depth range",
                self.height_mm, scene.range_mm
            )));
        }
        Ok(())
    }
}

/// Closed-form volume in cubic millimetres.
pub fn analytic_volume(spec: &DishSpec) -> f64 {
    let (r, h) = (spec.radius_mm, spec.height_mm);
    match spec.shape {
        Shape::Cylinder => PI * r * r * h,
        Shape::Cone => PI * r * r * h / 3.0,
        Shape::Paraboloid => PI * r * r * h / 2.0,
        Shape::SphericalCap => PI * h * h * (3.0 * spec.sphere_radius() - h) / 3.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DishSample {
    pub rgb: RgbImage,
    pub raw_depth: RawDepthMap,
    pub mask: SegMask,
    pub spec: DishSpec,
    pub true_volume_ml: f64,
    pub energy_kcal: f64,
}

const PLATE_COLOR: [f64; 3] = [0.92, 0.92, 0.9];
const TABLE_COLOR: [f64; 3] = [0.35, 0.35, 0.35];

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Renders RGB, raw depth with simulated sensor holes, and the food mask.
pub fn generate_dish(spec: &DishSpec, scene: &SceneConfig) -> Result<DishSample> {
    scene.validate()?;
    spec.validate(scene)?;
    let classes = class_table(spec.class_id + 1);
    let color = classes[spec.class_id].color;
    let n = scene.image_size;
    let pitch = scene.pitch_mm();
    let light = normalize3([-0.5, -0.5, 1.0]);
    let half_vec = normalize3([light[0], light[1], light[2] + 1.0]);
    let noise = Normal::new(0.0, scene.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut rgb = Vec::with_capacity(n * n * 3);
    let mut depth = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let x = (col as f64 + 0.5) * pitch - scene.field_mm / 2.0;
            let y = (row as f64 + 0.5) * pitch - scene.field_mm / 2.0;
            let (dx, dy) = (x - spec.center_mm[0], y - spec.center_mm[1]);
            let rho = dx.hypot(dy);
            let h = spec.height_at(rho);
            let food = h > 0.0;

            let (base, normal, depth_mm) = if food {
                let slope = spec.slope_at(rho);
                let (gx, gy) = if rho > 0.0 { (slope * dx / rho, slope * dy / rho) } else { (0.0, 0.0) };
                (color, normalize3([-gx, -gy, 1.0]), scene.far_mm - h)
            } else if x.hypot(y) < spec.plate_radius_mm {
                (PLATE_COLOR, [0.0, 0.0, 1.0], scene.far_mm)
            } else {
                (TABLE_COLOR, [0.0, 0.0, 1.0], scene.far_mm + scene.table_drop_mm)
            };

            let shade = 0.3 + 0.7 * dot(normal, light).max(0.0);
            for c in base {
                let mut v = c * shade;
                if scene.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }

            let mut q = (depth_mm / DEPTH_UNIT_MM).round().clamp(1.0, 65535.0) as u16;
            if food {
                if let Some(t) = scene.specular_threshold {
                    if dot(normal, half_vec).max(0.0).powi(40) > t {
                        q = 0;
                    }
                }
            }
            if scene.salt_rate > 0.0 && rng.random::<f64>() < scene.salt_rate {
                q = 0;
            }
            depth.push(q);
            mask.push(food);
        }
    }

    let true_volume_ml = analytic_volume(spec) / 1000.0;
    Ok(DishSample {
        rgb: RgbImage::new(n, n, rgb)?,
        raw_depth: RawDepthMap::new(n, n, depth, scene.near_mm(), scene.far_mm)?,
        mask: SegMask {
            width: n,
            height: n,
            values: mask,
        },
        spec: spec.clone(),
        true_volume_ml,
        energy_kcal: spec.density * true_volume_ml,
    })
}

/// Draws a random dish of class `class_id` from its per-class geometry ranges.
pub fn sample_spec<R: Rng>(class: &ClassInfo, scene: &SceneConfig, rng: &mut R) -> DishSpec {
    let radius = rng.random_range(30.0..60.0);
    let (lo, hi) = class.shape.aspect_range();
    let height = (rng.random_range(lo..hi) * radius).min(0.95 * scene.range_mm);
    let center = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];
    DishSpec {
        shape: class.shape,
        class_id: class.id,
        radius_mm: radius,
        height_mm: height,
        center_mm: center,
        density: class.density,
        plate_radius_mm: scene.plate_radius_mm,
        seed: rng.random(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub split: Split,
    pub class_id: usize,
    pub energy_kcal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: f64,
    pub classes: usize,
    pub scene: SceneConfig,
    pub entries: Vec<ManifestEntry>,
}

impl SplitManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Per-sample ground truth stored as `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub class_id: usize,
    pub class_name: String,
    pub density: f64,
    pub true_volume: f64,
    pub energy_kcal: f64,
    pub spec: DishSpec,
    pub seed: u64,
    pub near_mm: f64,
    pub far_mm: f64,
}

pub fn train_count(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + 1e-9).floor() as usize
}

/// Sample specs and the split, without touching the disk. Classes cycle with
/// the sample index so every class gets `n / k` samples (plus one for the
/// first `n % k`).
pub fn plan_dataset(n: usize, k: usize, seed: u64, ratio: f64, scene: &SceneConfig) -> Result<(SplitManifest, Vec<DishSpec>)> {
    if k == 0 || n < k {
        return Err(invalid(format!("need at least one sample per class: n={n}, K={k}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    scene.validate()?;
    let classes = class_table(k);
    let specs: Vec<DishSpec> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            sample_spec(&classes[i % k], scene, &mut rng)
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut split_rng);
    let mut split = vec![Split::Test; n];
    for &i in &order[..train_count(n, ratio)] {
        split[i] = Split::Train;
    }

    let entries = specs
        .iter()
        .enumerate()
        .map(|(i, s)| ManifestEntry {
            sample_id: sample_id(i),
            split: split[i],
            class_id: s.class_id,
            energy_kcal: s.density * (analytic_volume(s) / 1000.0),
        })
        .collect();
    Ok((
        SplitManifest {
            seed,
            ratio,
            classes: k,
            scene: scene.clone(),
            entries,
        },
        specs,
    ))
}

pub fn sample_id(i: usize) -> String {
    format!("dish_{i:05}")
}

/// Generates `n` dishes under `out_dir` with `classes.json`, `manifest.json`
/// and `manifest.csv` alongside one directory per sample.
pub fn make_dataset(n: usize, k: usize, seed: u64, ratio: f64, scene: &SceneConfig, out_dir: &Path) -> Result<SplitManifest> {
    let (manifest, specs) = plan_dataset(n, k, seed, ratio, scene)?;
    std::fs::create_dir_all(out_dir)?;
    let classes = class_table(k);
    for (entry, spec) in manifest.entries.iter().zip(&specs) {
        let sample = generate_dish(spec, scene)?;
        let dir = out_dir.join(&entry.sample_id);
        std::fs::create_dir_all(&dir)?;
        sample.rgb.write(&dir.join("rgb.ppm"))?;
        sample.raw_depth.write_pgm(&dir.join("depth.pgm"))?;
        sample.mask.write_pgm(&dir.join("mask.pgm"))?;
        let meta = SampleMeta {
            class_id: spec.class_id,
            class_name: classes[spec.class_id].name.clone(),
            density: spec.density,
            true_volume: sample.true_volume_ml,
            energy_kcal: sample.energy_kcal,
            spec: spec.clone(),
            seed: spec.seed,
            near_mm: scene.near_mm(),
            far_mm: scene.far_mm,
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    }
    std::fs::write(out_dir.join("classes.json"), serde_json::to_vec_pretty(&classes)?)?;
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    let mut w = csv::Writer::from_path(out_dir.join("manifest.csv"))?;
    w.write_record(["sample_id", "split", "class_id", "energy_kcal"])?;
    for e in &manifest.entries {
        w.write_record([
            e.sample_id.clone(),
            e.split.as_str().to_owned(),
            e.class_id.to_string(),
            e.energy_kcal.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(manifest)
}

/// A dataset directory written by [`make_dataset`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: SplitManifest,
    pub classes: Vec<ClassInfo>,
}

/// One sample read back from disk. Depth and mask are optional because the
/// inference path never reads them.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub rgb: RgbImage,
    pub meta: SampleMeta,
    pub depth: Option<RawDepthMap>,
    pub mask: Option<SegMask>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<u8>> {
            let p = root.join(name);
            std::fs::read(&p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(p),
                _ => e.into(),
            })
        };
        Ok(Self {
            root: root.to_owned(),
            manifest: serde_json::from_slice(&read("manifest.json")?)?,
            classes: serde_json::from_slice(&read("classes.json")?)?,
        })
    }

    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn load(&self, id: &str, with_depth: bool) -> Result<LoadedSample> {
        let dir = self.sample_dir(id);
        let need = |p: PathBuf| if p.exists() { Ok(p) } else { Err(Error::MissingArtifact(p)) };
        let meta: SampleMeta = serde_json::from_slice(&std::fs::read(need(dir.join("meta.json"))?)?)?;
        let rgb = RgbImage::read(&need(dir.join("rgb.ppm"))?)?;
        let (depth, mask) = if with_depth {
            (
                Some(RawDepthMap::read_pgm(&need(dir.join("depth.pgm"))?, meta.near_mm, meta.far_mm)?),
                Some(SegMask::read_pgm(&need(dir.join("mask.pgm"))?)?),
            )
        } else {
            (None, None)
        };
        Ok(LoadedSample {
            id: id.to_owned(),
            rgb,
            meta,
            depth,
            mask,
        })
    }

    pub fn load_split(&self, split: Split, with_depth: bool) -> Result<Vec<LoadedSample>> {
        self.manifest
            .split(split)
            .map(|e| self.load(&e.sample_id, with_depth))
            .collect()
    }
}
