//! Dataset plumbing: text point-cloud files, synthetic shape
//! generation, dataset manifests, and downsampling for robustness
//! sweeps.
//!
//! Point files are line oriented: one point per line, 3, 6, or 9
//! numbers separated by whitespace or commas. Three columns are bare
//! coordinates. Six are coordinates plus a normal; the normal becomes
//! the cloud's 3-wide attribute block. Nine columns are the full
//! 9-dimensional per-point feature vector (coordinates, color, and
//! normalized location); the whole row becomes a 9-wide attribute
//! block so networks that consume the full vector see all of it, with
//! the first three doubling as the positions. Blank lines and `#`
//! comments are skipped.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, PointCloud};
use crate::tensor::Tensor;

/// A cloud paired with its class index.
#[derive(Debug, Clone)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSchema {
    Xyz,
    XyzNormal,
    NineDim,
}

impl FeatureSchema {
    fn as_str(self) -> &'static str {
        match self {
            FeatureSchema::Xyz => "xyz",
            FeatureSchema::XyzNormal => "xyz_normal",
            FeatureSchema::NineDim => "nine_dim",
        }
    }

    fn from_str(s: &str) -> Option<Self> {
        match s {
            "xyz" => Some(FeatureSchema::Xyz),
            "xyz_normal" => Some(FeatureSchema::XyzNormal),
            "nine_dim" => Some(FeatureSchema::NineDim),
            _ => None,
        }
    }
}

/// Index of a dataset on disk: class names, file schema, and the
/// per-split sample lists as `(class index, path relative to root)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub schema: FeatureSchema,
    pub points_per_sample: usize,
    pub train: Vec<(usize, PathBuf)>,
    pub test: Vec<(usize, PathBuf)>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn samples(&self, split: Split) -> &[(usize, PathBuf)] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# dataset manifest\n");
        out.push_str(&format!("classes {}\n", self.classes.join(",")));
        out.push_str(&format!("schema {}\n", self.schema.as_str()));
        out.push_str(&format!("points {}\n", self.points_per_sample));
        for (name, list) in [("train", &self.train), ("test", &self.test)] {
            out.push_str(&format!("split {}\n", name));
            for (class, rel) in list {
                out.push_str(&format!("{}\t{}\n", class, rel.display()));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads a manifest and checks that every listed file exists under
    /// the manifest's directory.
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path)?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let loc = |n: usize| format!("{}:{}", path.display(), n);

        let mut classes: Option<Vec<String>> = None;
        let mut schema = None;
        let mut points = None;
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut section: Option<Split> = None;

        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("classes ") {
                classes = Some(rest.split(',').map(|s| s.trim().to_string()).collect());
            } else if let Some(rest) = line.strip_prefix("schema ") {
                schema = Some(FeatureSchema::from_str(rest.trim()).ok_or_else(|| {
                    Error::parse(loc(n), format!("unknown schema {:?}", rest.trim()))
                })?);
            } else if let Some(rest) = line.strip_prefix("points ") {
                points = Some(rest.trim().parse::<usize>().map_err(|_| {
                    Error::parse(loc(n), format!("bad point count {:?}", rest.trim()))
                })?);
            } else if let Some(rest) = line.strip_prefix("split ") {
                section = Some(match rest.trim() {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => {
                        return Err(Error::parse(loc(n), format!("unknown split {:?}", other)))
                    }
                });
            } else {
                let (class_str, rel) = line.split_once('\t').ok_or_else(|| {
                    Error::parse(loc(n), "expected class<TAB>path")
                })?;
                let class = class_str.parse::<usize>().map_err(|_| {
                    Error::parse(loc(n), format!("bad class index {:?}", class_str))
                })?;
                let target = match section {
                    Some(Split::Train) => &mut train,
                    Some(Split::Test) => &mut test,
                    None => {
                        return Err(Error::parse(loc(n), "sample row before any split line"))
                    }
                };
                target.push((class, PathBuf::from(rel)));
            }
        }

        let manifest = DatasetManifest {
            root,
            classes: classes
                .ok_or_else(|| Error::parse(path.display().to_string(), "missing classes line"))?,
            schema: schema
                .ok_or_else(|| Error::parse(path.display().to_string(), "missing schema line"))?,
            points_per_sample: points
                .ok_or_else(|| Error::parse(path.display().to_string(), "missing points line"))?,
            train,
            test,
        };
        for (class, rel) in manifest.train.iter().chain(&manifest.test) {
            if *class >= manifest.classes.len() {
                return Err(Error::invalid(
                    "manifest",
                    format!("class index {} with {} classes", class, manifest.classes.len()),
                ));
            }
            let full = manifest.root.join(rel);
            if !full.is_file() {
                return Err(Error::invalid(
                    "manifest",
                    format!("listed file missing: {}", full.display()),
                ));
            }
        }
        Ok(manifest)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LabeledCloud>> {
        self.samples(split)
            .iter()
            .map(|(class, rel)| {
                Ok(LabeledCloud {
                    cloud: load_pointcloud_text(&self.root.join(rel))?,
                    label: *class,
                })
            })
            .collect()
    }
}

/// Reads a point file (see the module docs for the format).
pub fn load_pointcloud_text(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let loc = |n: usize| format!("{}:{}", path.display(), n);

    let mut width = None;
    let mut positions = Vec::new();
    let mut extra = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(loc(n), format!("bad number {:?}", s)))
            })
            .collect::<Result<_>>()?;
        if !matches!(fields.len(), 3 | 6 | 9) {
            return Err(Error::parse(
                loc(n),
                format!("{} fields per point; expected 3, 6, or 9", fields.len()),
            ));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::parse(
                    loc(n),
                    format!("{} fields, previous lines had {}", fields.len(), w),
                ));
            }
            _ => {}
        }
        positions.push([fields[0], fields[1], fields[2]]);
        match fields.len() {
            6 => extra.extend_from_slice(&fields[3..]),
            9 => extra.extend_from_slice(&fields),
            _ => {}
        }
    }

    let cloud = PointCloud::new(positions)?;
    match width {
        Some(6) => {
            let n = cloud.len();
            cloud.with_attributes(Tensor::from_vec(&[n, 3], extra)?)
        }
        Some(9) => {
            let n = cloud.len();
            cloud.with_attributes(Tensor::from_vec(&[n, 9], extra)?)
        }
        _ => Ok(cloud),
    }
}

/// Writes a cloud in the format [`load_pointcloud_text`] reads, using
/// the shortest exact decimal for every value so a round trip is
/// lossless. Attribute width picks the schema: none -> 3 columns,
/// 3 -> 6 columns, 9 -> 9 columns (whose first three must equal the
/// positions).
pub fn save_pointcloud_text(path: &Path, cloud: &PointCloud) -> Result<()> {
    use fmt::Write as _;
    let mut out = String::new();
    match cloud.attributes() {
        None => {
            for p in cloud.positions() {
                writeln!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
            }
        }
        Some(a) if a.shape()[1] == 3 => {
            for (i, p) in cloud.positions().iter().enumerate() {
                let row = &a.data()[i * 3..(i + 1) * 3];
                writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], row[0], row[1], row[2])
                    .unwrap();
            }
        }
        Some(a) if a.shape()[1] == 9 => {
            for (i, p) in cloud.positions().iter().enumerate() {
                let row = &a.data()[i * 9..(i + 1) * 9];
                if row[..3] != p[..] {
                    return Err(Error::invalid(
                        "save_pointcloud_text",
                        format!("row {}: 9-wide attributes must start with the position", i),
                    ));
                }
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{}", cells.join(" ")).unwrap();
            }
        }
        Some(a) => {
            return Err(Error::invalid(
                "save_pointcloud_text",
                format!("no text schema for {}-wide attributes", a.shape()[1]),
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// The shape families the synthetic generator can sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
    Helix,
    Cross,
}

impl ShapeFamily {
    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Plane => "plane",
            ShapeFamily::Helix => "helix",
            ShapeFamily::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SyntheticShapeSpec {
    pub family: ShapeFamily,
    /// Isotropic Gaussian surface noise, applied before normalization.
    pub noise: f64,
}

/// The standard eight-class roster, chosen so local curvature and
/// density differ between classes.
pub fn default_shape_specs() -> Vec<SyntheticShapeSpec> {
    [
        ShapeFamily::Sphere,
        ShapeFamily::Cube,
        ShapeFamily::Cylinder,
        ShapeFamily::Cone,
        ShapeFamily::Torus,
        ShapeFamily::Plane,
        ShapeFamily::Helix,
        ShapeFamily::Cross,
    ]
    .into_iter()
    .map(|family| SyntheticShapeSpec { family, noise: 0.02 })
    .collect()
}

fn rotate_x(p: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]]
}

/// One point uniform on the surface of an axis-aligned box with the
/// given half-extents.
fn box_surface<R: Rng>(rng: &mut R, h: [f64; 3]) -> [f64; 3] {
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 0;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            axis = i;
            break;
        }
        pick -= a;
    }
    let side = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
    let mut p = [
        rng.random_range(-h[0]..=h[0]),
        rng.random_range(-h[1]..=h[1]),
        rng.random_range(-h[2]..=h[2]),
    ];
    p[axis] = side * h[axis];
    p
}

fn sample_shape_point<R: Rng>(family: ShapeFamily, rng: &mut R) -> [f64; 3] {
    match family {
        ShapeFamily::Sphere => {
            let g = [
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
            ];
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-9);
            [g[0] / norm, g[1] / norm, g[2] / norm]
        }
        ShapeFamily::Cube => box_surface(rng, [1.0, 1.0, 1.0]),
        ShapeFamily::Cylinder => {
            let r = 0.6;
            let hh = 0.8;
            let lateral = std::f64::consts::TAU * r * (2.0 * hh);
            let cap = std::f64::consts::PI * r * r;
            let pick = rng.random_range(0.0..lateral + 2.0 * cap);
            if pick < lateral {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [r * a.cos(), r * a.sin(), rng.random_range(-hh..=hh)]
            } else {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let rr = r * rng.random_range(0.0..1.0f64).sqrt();
                let z = if pick < lateral + cap { hh } else { -hh };
                [rr * a.cos(), rr * a.sin(), z]
            }
        }
        ShapeFamily::Cone => {
            let r = 0.7f64;
            let h = 1.4f64;
            let slant = (r * r + h * h).sqrt();
            let lateral = std::f64::consts::PI * r * slant;
            let base = std::f64::consts::PI * r * r;
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let p = if rng.random_range(0.0..lateral + base) < lateral {
                // area grows linearly toward the base along the slant
                let t = rng.random_range(0.0..1.0f64).sqrt();
                [t * r * a.cos(), t * r * a.sin(), h * (1.0 - t) - h / 2.0]
            } else {
                let rr = r * rng.random_range(0.0..1.0f64).sqrt();
                [rr * a.cos(), rr * a.sin(), -h / 2.0]
            };
            rotate_x(p, 0.5)
        }
        ShapeFamily::Torus => {
            let big = 0.7;
            let small = 0.25;
            let u = rng.random_range(0.0..std::f64::consts::TAU);
            // surface density is proportional to big + small*cos(v)
            let v = loop {
                let v = rng.random_range(0.0..std::f64::consts::TAU);
                let accept = (big + small * v.cos()) / (big + small);
                if rng.random_range(0.0..1.0) < accept {
                    break v;
                }
            };
            let ring = big + small * v.cos();
            [ring * u.cos(), ring * u.sin(), small * v.sin()]
        }
        ShapeFamily::Plane => {
            let p = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0];
            rotate_x(p, 0.6)
        }
        ShapeFamily::Helix => {
            let turns = 2.0;
            let t = rng.random_range(0.0..1.0f64);
            let a = std::f64::consts::TAU * turns * t;
            let tube = 0.08;
            [
                0.7 * a.cos() + rng.random_range(-tube..=tube),
                0.7 * a.sin() + rng.random_range(-tube..=tube),
                1.6 * t - 0.8 + rng.random_range(-tube..=tube),
            ]
        }
        ShapeFamily::Cross => {
            let arms = [
                [1.0, 0.18, 0.18],
                [0.18, 0.75, 0.18],
                [0.18, 0.18, 0.5],
            ];
            let areas: Vec<f64> = arms
                .iter()
                .map(|h| 8.0 * (h[0] * h[1] + h[0] * h[2] + h[1] * h[2]))
                .collect();
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut arm = arms[2];
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    arm = arms[i];
                    break;
                }
                pick -= a;
            }
            box_surface(rng, arm)
        }
    }
}

/// Samples one cloud: surface points, Gaussian noise, then centering
/// and scaling so the farthest point sits on the unit sphere.
pub fn sample_shape(spec: &SyntheticShapeSpec, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("sample_shape", "no points requested"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise.max(1e-300)).map_err(|e| {
        Error::invalid("sample_shape", format!("bad noise level: {}", e))
    })?;
    let mut points: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let mut p = sample_shape_point(spec.family, &mut rng);
            if spec.noise > 0.0 {
                for v in &mut p {
                    *v += noise.sample(&mut rng);
                }
            }
            p
        })
        .collect();

    let mut centroid = [0.0; 3];
    for p in &points {
        for d in 0..3 {
            centroid[d] += p[d];
        }
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let mut max_norm = 0.0f64;
    for p in &mut points {
        for d in 0..3 {
            p[d] -= centroid[d];
        }
        max_norm = max_norm.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    }
    if max_norm > 0.0 {
        for p in &mut points {
            for v in p.iter_mut() {
                *v /= max_norm;
            }
        }
    }
    PointCloud::new(points)
}

/// Generates a labeled dataset on disk: `n_train`/`n_test` clouds per
/// class, written as text point files under `root` with a manifest.
/// Everything derives from `seed`, so a rerun reproduces the files
/// byte for byte.
pub fn generate_synthetic_dataset(
    root: &Path,
    specs: &[SyntheticShapeSpec],
    n_train: usize,
    n_test: usize,
    points_per_sample: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if specs.len() < 2 {
        return Err(Error::invalid(
            "generate_synthetic_dataset",
            "need at least two classes",
        ));
    }
    if points_per_sample < 64 {
        return Err(Error::invalid(
            "generate_synthetic_dataset",
            format!("points_per_sample {} below 64", points_per_sample),
        ));
    }
    fs::create_dir_all(root.join("train"))?;
    fs::create_dir_all(root.join("test"))?;

    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, spec) in specs.iter().enumerate() {
        for (split, count, list) in [
            ("train", n_train, &mut train),
            ("test", n_test, &mut test),
        ] {
            for i in 0..count {
                let rel = PathBuf::from(format!(
                    "{}/{}_{:03}.txt",
                    split,
                    spec.family.name(),
                    i
                ));
                let cloud = sample_shape(spec, points_per_sample, seeder.random())?;
                save_pointcloud_text(&root.join(&rel), &cloud)?;
                list.push((class, rel));
            }
        }
    }

    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes: specs.iter().map(|s| s.family.name().to_string()).collect(),
        schema: FeatureSchema::Xyz,
        points_per_sample,
        train,
        test,
    };
    manifest.save(&root.join("manifest.txt"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownsampleMode {
    Random,
    Fps,
}

/// Keeps `n` of the cloud's points: a seeded uniform subset (in
/// original order) or the canonical farthest-point prefix. `n == len`
/// returns the cloud unchanged.
pub fn downsample(
    cloud: &PointCloud,
    n: usize,
    mode: DownsampleMode,
    seed: u64,
) -> Result<PointCloud> {
    if n == 0 || n > cloud.len() {
        return Err(Error::invalid(
            "downsample",
            format!("n {} outside 1..={}", n, cloud.len()),
        ));
    }
    if n == cloud.len() {
        return Ok(cloud.clone());
    }
    let indices = match mode {
        DownsampleMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pool: Vec<usize> = (0..cloud.len()).collect();
            for i in 0..n {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            let mut chosen = pool[..n].to_vec();
            chosen.sort_unstable();
            chosen
        }
        DownsampleMode::Fps => farthest_point_sample(cloud, n)?,
    };
    cloud.select(&indices)
}
