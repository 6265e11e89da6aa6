//! Synthetic shapes, perturbed registration pairs, augmentation and file IO.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{dualquat_from_transform, FeatureKind, PointCloud, RigidTransform};

/// Surface primitives, centered at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere { radius: f64 },
    /// Edge lengths along x, y, z.
    Box { size: [f64; 3] },
    /// Axis along z, closed by two caps.
    Cylinder { radius: f64, height: f64 },
    /// Ring in the xy plane.
    Torus { major: f64, minor: f64 },
    /// Rectangle in the xy plane, normal +z.
    Plane { width: f64, depth: f64 },
}

impl ShapeFamily {
    fn sizes(&self) -> Vec<f64> {
        match *self {
            Self::Sphere { radius } => vec![radius],
            Self::Box { size } => size.to_vec(),
            Self::Cylinder { radius, height } => vec![radius, height],
            Self::Torus { major, minor } => vec![major, minor],
            Self::Plane { width, depth } => vec![width, depth],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sphere { .. } => "sphere",
            Self::Box { .. } => "box",
            Self::Cylinder { .. } => "cylinder",
            Self::Torus { .. } => "torus",
            Self::Plane { .. } => "plane",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub family: ShapeFamily,
    pub n_points: usize,
    #[serde(default)]
    pub with_normals: bool,
}

impl ShapeSpec {
    pub fn new(family: ShapeFamily, n_points: usize) -> Self {
        Self {
            family,
            n_points,
            with_normals: false,
        }
    }

    pub fn with_normals(mut self) -> Self {
        self.with_normals = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::Config("shape sample count must be at least 1".into()));
        }
        if self.family.sizes().iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!("{} sizes must be positive", self.family.name())));
        }
        if let ShapeFamily::Torus { major, minor } = self.family {
            if minor >= major {
                return Err(Error::Config("torus minor radius must be below the major radius".into()));
            }
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Picks an index with probability proportional to `weights`.
fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn sample_surface(family: &ShapeFamily, rng: &mut ChaCha8Rng) -> (Vector3<f64>, Vector3<f64>) {
    match *family {
        ShapeFamily::Sphere { radius } => {
            let n = unit_vector(rng);
            (n * radius, n)
        }
        ShapeFamily::Box { size: [a, b, c] } => {
            let face = pick(&[b * c, b * c, a * c, a * c, a * b, a * b], rng);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let half = Vector3::new(a, b, c) / 2.0;
            let mut p = Vector3::new(
                rng.random_range(-half.x..=half.x),
                rng.random_range(-half.y..=half.y),
                rng.random_range(-half.z..=half.z),
            );
            p[axis] = sign * half[axis];
            let mut n = Vector3::zeros();
            n[axis] = sign;
            (p, n)
        }
        ShapeFamily::Cylinder { radius, height } => {
            let part = pick(&[2.0 * PI * radius * height, PI * radius * radius, PI * radius * radius], rng);
            let theta = rng.random_range(0.0..2.0 * PI);
            let (s, c) = theta.sin_cos();
            if part == 0 {
                let z = rng.random_range(-height / 2.0..=height / 2.0);
                (Vector3::new(radius * c, radius * s, z), Vector3::new(c, s, 0.0))
            } else {
                let r = radius * rng.random::<f64>().sqrt();
                let sign = if part == 1 { 1.0 } else { -1.0 };
                (Vector3::new(r * c, r * s, sign * height / 2.0), Vector3::new(0.0, 0.0, sign))
            }
        }
        ShapeFamily::Torus { major, minor } => loop {
            let u = rng.random_range(0.0..2.0 * PI);
            let v = rng.random_range(0.0..2.0 * PI);
            let accept = (major + minor * v.cos()) / (major + minor);
            if rng.random::<f64>() < accept {
                let (su, cu) = u.sin_cos();
                let (sv, cv) = v.sin_cos();
                let ring = major + minor * cv;
                let n = Vector3::new(cv * cu, cv * su, sv);
                break (Vector3::new(ring * cu, ring * su, minor * sv), n);
            }
        },
        ShapeFamily::Plane { width, depth } => (
            Vector3::new(
                rng.random_range(-width / 2.0..=width / 2.0),
                rng.random_range(-depth / 2.0..=depth / 2.0),
                0.0,
            ),
            Vector3::z(),
        ),
    }
}

/// Uniform area-weighted surface samples, deterministic per seed.
pub fn sample_shape(spec: &ShapeSpec, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(spec.n_points);
    let mut normals = Vec::new();
    for _ in 0..spec.n_points {
        let (p, n) = sample_surface(&spec.family, &mut rng);
        points.push(p);
        if spec.with_normals {
            normals.extend_from_slice(&[n.x, n.y, n.z]);
        }
    }
    if spec.with_normals {
        PointCloud::with_features(points, normals, 3, FeatureKind::Normals).expect("normals sized")
    } else {
        PointCloud::new(points)
    }
}

/// How ground-truth transforms and point noise are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationSpec {
    /// Translation magnitude and rotation angle uniform in their ranges;
    /// translation direction and rotation axis uniform on the sphere.
    Uniform {
        translation: [f64; 2],
        rotation_deg: [f64; 2],
        noise_std: f64,
    },
    /// Per-axis Gaussian translation and Euler angles. The rotation
    /// standard deviations are (roll, pitch, yaw) of an intrinsic Z-Y-X
    /// sequence.
    GaussianEuler {
        translation_std: [f64; 3],
        rotation_std_deg: [f64; 3],
        noise_std: f64,
    },
}

impl PerturbationSpec {
    /// Object-scale protocol: up to 0.1 units, up to 5 degrees, noise 0.02.
    pub fn modelnet() -> Self {
        Self::Uniform {
            translation: [0.0, 0.1],
            rotation_deg: [0.0, 5.0],
            noise_std: 0.02,
        }
    }

    /// LiDAR augmentation preset in meters and degrees.
    pub fn kitti() -> Self {
        Self::GaussianEuler {
            translation_std: [0.2, 0.02, 0.02],
            rotation_std_deg: [0.1, 0.1, 1.0],
            noise_std: 0.01,
        }
    }

    pub fn none() -> Self {
        Self::Uniform {
            translation: [0.0, 0.0],
            rotation_deg: [0.0, 0.0],
            noise_std: 0.0,
        }
    }

    pub fn noise_std(&self) -> f64 {
        match *self {
            Self::Uniform { noise_std, .. } | Self::GaussianEuler { noise_std, .. } => noise_std,
        }
    }

    pub fn with_noise(self, std: f64) -> Self {
        match self {
            Self::Uniform {
                translation,
                rotation_deg,
                ..
            } => Self::Uniform {
                translation,
                rotation_deg,
                noise_std: std,
            },
            Self::GaussianEuler {
                translation_std,
                rotation_std_deg,
                ..
            } => Self::GaussianEuler {
                translation_std,
                rotation_std_deg,
                noise_std: std,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Uniform {
                translation,
                rotation_deg,
                noise_std,
            } => {
                translation[0] >= 0.0
                    && translation[0] <= translation[1]
                    && rotation_deg[0] >= 0.0
                    && rotation_deg[0] <= rotation_deg[1]
                    && rotation_deg[1] < 180.0
                    && *noise_std >= 0.0
            }
            Self::GaussianEuler {
                translation_std,
                rotation_std_deg,
                noise_std,
            } => {
                translation_std.iter().chain(rotation_std_deg).all(|s| *s >= 0.0) && *noise_std >= 0.0
            }
        };
        let values: Vec<f64> = match self {
            Self::Uniform {
                translation,
                rotation_deg,
                noise_std,
            } => [translation.as_slice(), rotation_deg, &[*noise_std]].concat(),
            Self::GaussianEuler {
                translation_std,
                rotation_std_deg,
                noise_std,
            } => [translation_std.as_slice(), rotation_std_deg, &[*noise_std]].concat(),
        };
        if ok && values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("perturbation ranges must be finite, non-negative and ordered".into()))
        }
    }

    /// Draws a transform whose rotation is not a half turn.
    pub fn sample_transform(&self, rng: &mut ChaCha8Rng) -> RigidTransform {
        loop {
            let t = match *self {
                Self::Uniform {
                    translation,
                    rotation_deg,
                    ..
                } => {
                    let mag = uniform(rng, translation);
                    let dir = unit_vector(rng);
                    let angle = uniform(rng, rotation_deg).to_radians();
                    let axis = unit_vector(rng);
                    RigidTransform::from_axis_angle(&axis, angle, dir * mag)
                }
                Self::GaussianEuler {
                    translation_std,
                    rotation_std_deg,
                    ..
                } => {
                    let mut g = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
                    let t = Vector3::new(g(translation_std[0]), g(translation_std[1]), g(translation_std[2]));
                    let roll = g(rotation_std_deg[0]).to_radians();
                    let pitch = g(rotation_std_deg[1]).to_radians();
                    let yaw = g(rotation_std_deg[2]).to_radians();
                    RigidTransform::from_euler_zyx(roll, pitch, yaw, t)
                }
            };
            if dualquat_from_transform(&t).real.w > 0.0 {
                return t;
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

fn add_noise(cloud: &PointCloud, std: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    if std == 0.0 {
        return cloud.clone();
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    let points = cloud
        .points()
        .iter()
        .map(|p| p + Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng)))
        .collect();
    cloud.with_points(points)
}

/// A registration problem: `gt` maps `source` into the template frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub template: PointCloud,
    pub source: PointCloud,
    pub gt: RigidTransform,
}

/// Draws `gt`, sets `source = gt^-1 · cloud` and adds independent noise to
/// both clouds.
pub fn make_pair(cloud: &PointCloud, perturb: &PerturbationSpec, seed: u64) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = perturb.sample_transform(&mut rng);
    let moved = gt.inverse().apply_rotating_normals(cloud);
    let std = perturb.noise_std();
    let template = add_noise(cloud, std, &mut rng);
    let source = add_noise(&moved, std, &mut rng);
    Pair { template, source, gt }
}

/// For every pair, appends a pair whose source is a freshly transformed and
/// noised copy of the template.
pub fn duplicate_template_augment(pairs: &[Pair], perturb: &PerturbationSpec, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = pairs.to_vec();
    for p in pairs {
        let gt = perturb.sample_transform(&mut rng);
        let source = add_noise(&gt.inverse().apply_rotating_normals(&p.template), perturb.noise_std(), &mut rng);
        out.push(Pair {
            template: p.template.clone(),
            source,
            gt,
        });
    }
    out
}

/// ASCII PLY with `x y z`, optional `nx ny nz` and optional `intensity`.
pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ply_string(cloud)).map_err(|e| Error::io(path, e))
}

pub fn ply_string(cloud: &PointCloud) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len());
    for name in ["x", "y", "z"] {
        let _ = writeln!(s, "property double {name}");
    }
    let names = feature_names(cloud);
    for name in &names {
        let _ = writeln!(s, "property double {name}");
    }
    s.push_str("end_header\n");
    for i in 0..cloud.len() {
        let p = cloud.points()[i];
        let _ = write!(s, "{:?} {:?} {:?}", p.x, p.y, p.z);
        for v in cloud.feature(i) {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    s
}

fn feature_names(cloud: &PointCloud) -> Vec<String> {
    match cloud.feature_kind() {
        FeatureKind::None => Vec::new(),
        FeatureKind::Normals => vec!["nx".into(), "ny".into(), "nz".into()],
        FeatureKind::Intensity if cloud.feature_width() == 1 => vec!["intensity".into()],
        _ => (0..cloud.feature_width()).map(|i| format!("f{i}")).collect(),
    }
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, &path.display().to_string())
}

pub fn parse_ply(text: &str, source_name: &str) -> Result<PointCloud> {
    let err = |line: usize, detail: String| Error::parse(source_name, line, detail);
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err(1, "missing ply magic".into())),
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    let mut header_end = 0;
    for (no, line) in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(err(no, format!("unsupported format {other}"))),
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| err(no, format!("bad vertex count {n}")))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _ty, name] if in_vertex => props.push(name.to_string()),
            ["property", ..] if in_vertex => return Err(err(no, "list properties are not supported".into())),
            ["property", ..] => {}
            ["end_header"] => {
                header_end = no;
                break;
            }
            _ => return Err(err(no, format!("unexpected header line {line:?}"))),
        }
    }
    if header_end == 0 {
        return Err(err(text.lines().count().max(1), "missing end_header".into()));
    }
    let count = count.ok_or_else(|| err(header_end, "missing vertex element".into()))?;
    if props.len() < 3 || props[..3] != ["x", "y", "z"] {
        return Err(err(header_end, "vertex properties must start with x y z".into()));
    }
    let extra = &props[3..];
    let kind = match extra.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        [] => FeatureKind::None,
        ["nx", "ny", "nz"] => FeatureKind::Normals,
        ["intensity"] => FeatureKind::Intensity,
        _ => FeatureKind::Generic,
    };
    let mut points = Vec::with_capacity(count);
    let mut features = Vec::with_capacity(count * extra.len());
    let mut last = header_end;
    for (no, line) in lines {
        if points.len() == count {
            if line.is_empty() {
                continue;
            }
            return Err(err(no, format!("more than {count} vertex rows")));
        }
        last = no;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|w| w.parse::<f64>().map_err(|_| err(no, format!("bad number {w:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != props.len() {
            return Err(err(no, format!("expected {} values, found {}", props.len(), vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err(no, "non-finite value".into()));
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
        features.extend_from_slice(&vals[3..]);
    }
    if points.len() != count {
        return Err(err(last + 1, format!("expected {count} vertex rows, found {}", points.len())));
    }
    PointCloud::with_features(points, features, extra.len(), kind)
}

/// Little-endian `f32` quadruplets `x y z intensity`. Clouds without an
/// intensity channel are written with intensity 0.
pub fn write_kitti_bin(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for i in 0..cloud.len() {
        let p = cloud.points()[i];
        let intensity = match (cloud.feature_kind(), cloud.feature(i)) {
            (FeatureKind::Intensity, [v]) => *v,
            _ => 0.0,
        };
        for v in [p.x, p.y, p.z, intensity] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_bin(&bytes, &path.display().to_string())
}

/// Parse errors report the 1-based record index as the line.
pub fn parse_kitti_bin(bytes: &[u8], source_name: &str) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::parse(
            source_name,
            bytes.len() / 16 + 1,
            format!("truncated record: {} trailing bytes", bytes.len() % 16),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let v: Vec<f64> = rec
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(source_name, i + 1, "non-finite value"));
        }
        points.push(Vector3::new(v[0], v[1], v[2]));
        intensity.push(v[3]);
    }
    PointCloud::with_features(points, intensity, 1, FeatureKind::Intensity)
}

/// Reads `.ply` or `.bin` by extension.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => read_kitti_bin(path),
        _ => read_ply(path),
    }
}

/// Writes `.ply` or `.bin` by extension.
pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => write_kitti_bin(cloud, path),
        _ => write_ply(cloud, path),
    }
}

fn format_number(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v:?}").trim_end_matches(".0").to_string()
    }
}

/// One row of 12 numbers: the row-major `[R | t]` matrix.
pub fn pose_row(t: &RigidTransform) -> String {
    t.to_row_major_3x4()
        .iter()
        .map(|&v| format_number(v))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn trajectory_string(poses: &[RigidTransform]) -> String {
    poses.iter().map(|p| pose_row(p) + "\n").collect()
}

pub fn write_trajectory(poses: &[RigidTransform], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, trajectory_string(poses)).map_err(|e| Error::io(path, e))
}

pub fn parse_trajectory(text: &str, source_name: &str) -> Result<Vec<RigidTransform>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|w| {
                w.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(source_name, i + 1, format!("bad number {w:?}")))
            })
            .collect::<Result<_>>()?;
        let arr: [f64; 12] = vals
            .as_slice()
            .try_into()
            .map_err(|_| Error::parse(source_name, i + 1, format!("expected 12 values, found {}", vals.len())))?;
        out.push(RigidTransform::from_row_major_3x4(&arr));
    }
    Ok(out)
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<RigidTransform>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text, &path.display().to_string())
}

/// Dataset generation recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub shapes: Vec<ShapeSpec>,
    pub perturbation: PerturbationSpec,
    /// Pairs generated per shape.
    pub pairs_per_shape: usize,
    pub seed: u64,
    /// Also emit one duplicated-template pair per generated pair.
    #[serde(default)]
    pub augment: bool,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.pairs_per_shape == 0 {
            return Err(Error::Config("dataset needs at least one shape and one pair per shape".into()));
        }
        for s in &self.shapes {
            s.validate()?;
        }
        self.perturbation.validate()
    }
}

/// Generates pairs in a fixed order; the shape surface and each pair get
/// their own derived seeds.
pub fn generate_pairs(spec: &DatasetSpec) -> Result<Vec<Pair>> {
    spec.validate()?;
    let mut pairs = Vec::new();
    for (s, shape) in spec.shapes.iter().enumerate() {
        for k in 0..spec.pairs_per_shape {
            let base = derive_seed(spec.seed, (s * spec.pairs_per_shape + k) as u64);
            let cloud = sample_shape(shape, base);
            pairs.push(make_pair(&cloud, &spec.perturbation, derive_seed(base, 1)));
        }
    }
    if spec.augment {
        pairs = duplicate_template_augment(&pairs, &spec.perturbation, derive_seed(spec.seed, u64::MAX));
    }
    Ok(pairs)
}

/// Mixes a stream index into a seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub template: String,
    pub source: String,
}

/// Textual index of a dataset directory: cloud files per pair and a label
/// file holding one ground-truth pose row per pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub labels: String,
    pub pairs: Vec<PairEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DatasetSpec>,
}

pub const DATASET_FORMAT: &str = "flowreg-dataset";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// A loaded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<Pair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Writes `pairs` as PLY files plus `labels.txt` and `manifest.toml` in
/// `dir`.
pub fn write_dataset(pairs: &[Pair], spec: Option<&DatasetSpec>, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let entry = PairEntry {
            template: format!("pair_{i:05}_template.ply"),
            source: format!("pair_{i:05}_source.ply"),
        };
        write_ply(&p.template, dir.join(&entry.template))?;
        write_ply(&p.source, dir.join(&entry.source))?;
        entries.push(entry);
    }
    let labels: Vec<RigidTransform> = pairs.iter().map(|p| p.gt).collect();
    write_trajectory(&labels, dir.join("labels.txt"))?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        labels: "labels.txt".into(),
        pairs: entries,
        spec: spec.cloned(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a dataset from its manifest file or directory.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let name = manifest_path.display().to_string();
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start].matches('\n').count() + 1)
            .unwrap_or(1);
        Error::parse(&name, line, e.message().to_string())
    })?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::parse(&name, 1, format!("unknown format tag {:?}", manifest.format)));
    }
    let labels = read_trajectory(dir.join(&manifest.labels))?;
    if labels.len() != manifest.pairs.len() {
        return Err(Error::parse(
            dir.join(&manifest.labels).display().to_string(),
            labels.len() + 1,
            format!("{} labels for {} pairs", labels.len(), manifest.pairs.len()),
        ));
    }
    let pairs = manifest
        .pairs
        .iter()
        .zip(labels)
        .map(|(e, gt)| {
            Ok(Pair {
                template: read_cloud(dir.join(&e.template))?,
                source: read_cloud(dir.join(&e.source))?,
                gt,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_error_chordal, translation_error};

    fn box_spec(n: usize) -> ShapeSpec {
        ShapeSpec::new(ShapeFamily::Box { size: [1.0, 0.6, 0.3] }, n)
    }

    #[test]
    fn sphere_samples_lie_on_surface() {
        let c = sample_shape(&ShapeSpec::new(ShapeFamily::Sphere { radius: 1.0 }, 10_000), 3);
        assert_eq!(c.len(), 10_000);
        for p in c.points() {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
        assert!(c.centroid().norm() < 0.05);
    }

    #[test]
    fn box_normals_axis_aligned() {
        let c = sample_shape(&box_spec(2000).with_normals(), 1);
        assert_eq!(c.feature_kind(), FeatureKind::Normals);
        for i in 0..c.len() {
            let n = c.feature(i);
            assert_eq!(n.iter().filter(|v| **v != 0.0).count(), 1);
            assert_eq!(n.iter().map(|v| v.abs()).sum::<f64>(), 1.0);
            let axis = n.iter().position(|v| *v != 0.0).unwrap();
            let half = [0.5, 0.3, 0.15][axis];
            assert_eq!(c.points()[i][axis], n[axis] * half);
        }
    }

    #[test]
    fn box_faces_are_area_weighted() {
        let c = sample_shape(&box_spec(60_000), 2);
        let on_x = c.points().iter().filter(|p| p.x.abs() == 0.5).count() as f64;
        let area_x = 2.0 * 0.6 * 0.3;
        let total = 2.0 * (0.6 * 0.3 + 1.0 * 0.3 + 1.0 * 0.6);
        let expected = area_x / total;
        assert!((on_x / 60_000.0 - expected).abs() < 0.01);
    }

    #[test]
    fn every_family_has_unit_outward_normals() {
        let families = [
            ShapeFamily::Sphere { radius: 0.7 },
            ShapeFamily::Box { size: [1.0, 2.0, 3.0] },
            ShapeFamily::Cylinder { radius: 0.5, height: 1.0 },
            ShapeFamily::Torus { major: 1.0, minor: 0.3 },
            ShapeFamily::Plane { width: 2.0, depth: 1.0 },
        ];
        for f in families {
            let spec = ShapeSpec::new(f, 500).with_normals();
            spec.validate().unwrap();
            let c = sample_shape(&spec, 4);
            assert_eq!(c, sample_shape(&spec, 4));
            for i in 0..c.len() {
                let n = Vector3::from_column_slice(c.feature(i));
                assert!((n.norm() - 1.0).abs() < 1e-12, "{}", f.name());
                let p = c.points()[i];
                let inside = match f {
                    ShapeFamily::Plane { .. } => continue,
                    ShapeFamily::Torus { major, .. } => Vector3::new(p.x, p.y, 0.0).normalize() * major,
                    _ => Vector3::zeros(),
                };
                assert!(n.dot(&(p - inside)) > 0.0, "{}", f.name());
            }
        }
        let bad = ShapeSpec::new(ShapeFamily::Sphere { radius: -1.0 }, 10);
        assert!(bad.validate().is_err());
        assert!(ShapeSpec::new(ShapeFamily::Sphere { radius: 1.0 }, 0).validate().is_err());
    }

    #[test]
    fn zero_perturbation_pair_is_identity() {
        let c = sample_shape(&box_spec(100), 5);
        let p = make_pair(&c, &PerturbationSpec::none(), 9);
        assert_eq!(p.template, p.source);
        assert_eq!(p.gt.rotation, RigidTransform::identity().rotation);
        assert_eq!(p.gt.translation, Vector3::zeros());
    }

    #[test]
    fn pair_labels_follow_the_convention() {
        let c = sample_shape(&box_spec(100), 5);
        let spec = PerturbationSpec::modelnet().with_noise(0.0);
        for seed in 0..50 {
            let p = make_pair(&c, &spec, seed);
            assert!(p.gt.is_valid());
            assert!(dualquat_from_transform(&p.gt).real.w > 0.0);
            assert!(p.gt.angle().to_degrees() <= 5.0 + 1e-9);
            assert!(p.gt.translation.norm() <= 0.1 + 1e-12);
            let aligned = p.gt.apply(&p.source);
            for (a, b) in aligned.points().iter().zip(p.template.points()) {
                assert!((a - b).norm() < 1e-12);
            }
        }
        assert_eq!(make_pair(&c, &PerturbationSpec::modelnet(), 3), make_pair(&c, &PerturbationSpec::modelnet(), 3));
    }

    #[test]
    fn noise_is_zero_mean() {
        let c = sample_shape(&box_spec(5000), 6);
        let spec = PerturbationSpec::none().with_noise(0.02);
        let p = make_pair(&c, &spec, 1);
        let n = c.len() as f64;
        let mean: Vector3<f64> = p
            .template
            .points()
            .iter()
            .zip(c.points())
            .map(|(a, b)| a - b)
            .sum::<Vector3<f64>>()
            / n;
        let bound = 3.0 * 0.02 / n.sqrt();
        assert!(mean.iter().all(|m| m.abs() < bound), "{mean:?}");
    }

    #[test]
    fn kitti_preset_draws_small_motions() {
        let spec = PerturbationSpec::kitti();
        spec.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<RigidTransform> = (0..2000).map(|_| spec.sample_transform(&mut rng)).collect();
        let std_x = (draws.iter().map(|t| t.translation.x.powi(2)).sum::<f64>() / 2000.0).sqrt();
        assert!((std_x - 0.2).abs() < 0.02);
        let std_yaw = (draws.iter().map(|t| t.euler_zyx()[2].to_degrees().powi(2)).sum::<f64>() / 2000.0).sqrt();
        assert!((std_yaw - 1.0).abs() < 0.1);
    }

    #[test]
    fn augmentation_doubles_and_is_exact() {
        let c = sample_shape(&box_spec(64), 7);
        let pairs: Vec<Pair> = (0..3).map(|s| make_pair(&c, &PerturbationSpec::modelnet(), s)).collect();
        let spec = PerturbationSpec::modelnet().with_noise(0.0);
        let aug = duplicate_template_augment(&pairs, &spec, 11);
        assert_eq!(aug.len(), 6);
        for p in &aug[3..] {
            let aligned = p.gt.apply(&p.source);
            for (a, b) in aligned.points().iter().zip(p.template.points()) {
                assert!((a - b).norm() < 1e-12);
            }
        }
        let other = duplicate_template_augment(&pairs, &spec, 12);
        assert_ne!(aug[3].source, other[3].source);
    }

    #[test]
    fn ply_round_trip_and_fixture() {
        let c = sample_shape(&box_spec(20).with_normals(), 8);
        let back = parse_ply(&ply_string(&c), "mem").unwrap();
        assert_eq!(back, c);

        let fixture = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n\
                       property float z\nproperty float intensity\nend_header\n0 0 0 1\n1 0 0 2\n0 1 0 3\n";
        let c = parse_ply(fixture, "fixture").unwrap();
        assert_eq!((c.len(), c.feature_width(), c.feature_kind()), (3, 1, FeatureKind::Intensity));
    }

    #[test]
    fn ply_errors_carry_lines() {
        let short = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n\
                     property float z\nend_header\n0 0 0\n1 0 0\n";
        match parse_ply(short, "s") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 10),
            other => panic!("{other:?}"),
        }
        let bad = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
                   property float z\nend_header\n0 zero 0\n";
        match parse_ply(bad, "b") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 8),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_ply("nope\n", "n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn kitti_bin_round_trip_and_truncation() {
        let points = vec![Vector3::new(1.5, -2.25, 0.1), Vector3::new(3.0, 4.0, 5.0)];
        let c = PointCloud::with_features(points, vec![0.5, 0.75], 1, FeatureKind::Intensity).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.bin");
        write_kitti_bin(&c, &path).unwrap();
        let back = read_kitti_bin(&path).unwrap();
        for (a, b) in back.points().iter().zip(c.points()) {
            for k in 0..3 {
                assert_eq!(a[k], b[k] as f32 as f64);
            }
        }
        assert_eq!(back.features(), &[0.5, 0.75]);
        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(
            parse_kitti_bin(&bytes[..20], "t"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn pose_rows() {
        assert_eq!(pose_row(&RigidTransform::identity()), "1 0 0 0 0 1 0 0 0 0 1 0");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let poses: Vec<RigidTransform> = (0..5)
            .map(|_| PerturbationSpec::modelnet().sample_transform(&mut rng))
            .collect();
        let back = parse_trajectory(&trajectory_string(&poses), "mem").unwrap();
        for (a, b) in back.iter().zip(&poses) {
            assert_eq!(a, b);
        }
        assert!(matches!(
            parse_trajectory("1 0 0 0 0 1 0 0 0 0 1 0\n1 2 3\n", "t"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn dataset_round_trip() {
        let spec = DatasetSpec {
            shapes: vec![box_spec(32)],
            perturbation: PerturbationSpec::modelnet(),
            pairs_per_shape: 3,
            seed: 4,
            augment: true,
        };
        let pairs = generate_pairs(&spec).unwrap();
        assert_eq!(pairs.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&pairs, Some(&spec), dir.path()).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.pairs.len(), 6);
        for (a, b) in ds.pairs.iter().zip(&pairs) {
            assert_eq!(a.template, b.template);
            assert_eq!(a.source, b.source);
            assert!(translation_error(&a.gt, &b.gt) < 1e-15);
            assert!(rotation_error_chordal(&a.gt, &b.gt) < 1e-6);
        }
    }
}
