//! Synthetic pedestrian clouds: stacked ellipsoid shells with per-identity
//! body proportions and clothing colors.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::format::write_cloud;
use super::manifest::{Manifest, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const MANIFEST_FILE: &str = "manifest.tsv";
/// Camera ids used by queries; gallery cameras follow them.
pub const QUERY_CAMERAS: i64 = 2;
pub const GALLERY_CAMERAS: i64 = 4;
pub const TRAIN_CAMERAS: i64 = 6;
/// Clothing regions that can carry an identity color.
pub const COLOR_GROUPS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub points_per_cloud: usize,
    /// How many of the clothing regions (upper, lower, shoes, head) take an
    /// identity color; the rest stay neutral grey.
    pub color_signature_dim: usize,
    /// Std of the per-sample translation after normalization.
    pub pose_noise: f64,
    /// Share of each cloud's points spent on background: a floor patch and
    /// a few blobs colored from the clothing palette.
    pub clutter: f64,
    pub seed: u64,
    pub num_test_identities: usize,
    pub queries_per_identity: usize,
    pub gallery_per_identity: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 32,
            samples_per_identity: 12,
            points_per_cloud: 8192,
            color_signature_dim: 3,
            pose_noise: 0.05,
            clutter: 0.5,
            seed: 0,
            num_test_identities: 16,
            queries_per_identity: 2,
            gallery_per_identity: 4,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_identities", self.num_identities),
            ("samples_per_identity", self.samples_per_identity),
            ("points_per_cloud", self.points_per_cloud),
            ("color_signature_dim", self.color_signature_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.color_signature_dim > COLOR_GROUPS {
            return Err(Error::Config(format!(
                "color_signature_dim {} exceeds {COLOR_GROUPS}",
                self.color_signature_dim
            )));
        }
        if self.num_test_identities > 0 && (self.queries_per_identity == 0 || self.gallery_per_identity == 0) {
            return Err(Error::Config("test identities need queries and gallery samples".into()));
        }
        if !(0.0..1.0).contains(&self.clutter) {
            return Err(Error::Config(format!("clutter {} outside [0,1)", self.clutter)));
        }
        if !(self.pose_noise >= 0.0 && self.pose_noise.is_finite()) {
            return Err(Error::Config(format!("pose_noise {} must be >= 0", self.pose_noise)));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_identities * self.samples_per_identity
            + self.num_test_identities * (self.queries_per_identity + self.gallery_per_identity)
    }
}

/// Saturated clothing palette; identities combine these per region so that
/// pooled color alone does not tell two identities apart.
const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.25, 0.80],
    [0.15, 0.65, 0.20],
    [0.90, 0.80, 0.15],
    [0.10, 0.10, 0.10],
    [0.92, 0.92, 0.92],
    [0.55, 0.30, 0.65],
    [0.90, 0.50, 0.10],
];
const NEUTRAL: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Clone, Copy)]
enum Limb {
    None,
    Arm(f64),
    Leg(f64),
}

struct Part {
    center: [f64; 3],
    radii: [f64; 3],
    group: usize,
    limb: Limb,
}

/// Color groups: 0 upper body, 1 lower body, 2 shoes, 3 head.
fn body_parts(height: f64, width: f64) -> Vec<Part> {
    let p = |center: [f64; 3], radii: [f64; 3], group, limb| Part {
        center: [center[0] * width, center[1] * height, center[2]],
        radii: [radii[0] * width, radii[1] * height, radii[2] * width],
        group,
        limb,
    };
    vec![
        p([0.0, 1.62, 0.0], [0.10, 0.12, 0.10], 3, Limb::None),
        p([0.0, 1.17, 0.0], [0.20, 0.30, 0.12], 0, Limb::None),
        p([-0.27, 1.12, 0.0], [0.055, 0.30, 0.055], 0, Limb::Arm(1.0)),
        p([0.27, 1.12, 0.0], [0.055, 0.30, 0.055], 0, Limb::Arm(-1.0)),
        p([-0.10, 0.46, 0.0], [0.08, 0.42, 0.08], 1, Limb::Leg(1.0)),
        p([0.10, 0.46, 0.0], [0.08, 0.42, 0.08], 1, Limb::Leg(-1.0)),
        p([-0.10, 0.03, 0.05], [0.06, 0.03, 0.11], 2, Limb::Leg(1.0)),
        p([0.10, 0.03, 0.05], [0.06, 0.03, 0.11], 2, Limb::Leg(-1.0)),
    ]
}

fn ellipsoid_area(r: [f64; 3]) -> f64 {
    let p = 1.6075;
    let (a, b, c) = (r[0].powf(p), r[1].powf(p), r[2].powf(p));
    4.0 * PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p)
}

/// Points per part proportional to surface area; leftovers go to the
/// largest remainders.
fn allocate(parts: &[Part], m: usize) -> Vec<usize> {
    let areas: Vec<f64> = parts.iter().map(|p| ellipsoid_area(p.radii)).collect();
    let total: f64 = areas.iter().sum();
    let exact: Vec<f64> = areas.iter().map(|a| a / total * m as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = m - counts.iter().sum::<usize>();
    for &i in order.iter().cycle().take(short) {
        counts[i] += 1;
    }
    counts
}

struct Identity {
    height: f64,
    width: f64,
    colors: [[f64; 3]; COLOR_GROUPS],
}

fn identity_template(spec: &SyntheticSpec, identity: u64) -> Identity {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, identity, u64::MAX));
    let height = rng.random_range(0.9..1.1);
    let width = rng.random_range(0.85..1.15);
    let mut colors = [NEUTRAL; COLOR_GROUPS];
    for c in colors.iter_mut().take(spec.color_signature_dim) {
        let base = PALETTE[rng.random_range(0..PALETTE.len())];
        *c = base.map(|v: f64| (v + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0));
    }
    Identity { height, width, colors }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rotation of `v` about the x axis through `pivot`.
fn swing(v: [f64; 3], pivot: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let (y, z) = (v[1] - pivot[1], v[2] - pivot[2]);
    [v[0], pivot[1] + c * y - s * z, pivot[2] + s * y + c * z]
}

fn sample_cloud(spec: &SyntheticSpec, id: &Identity, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let parts = body_parts(id.height, id.width);
    let m = spec.points_per_cloud;
    let background = ((spec.clutter * m as f64).round() as usize).min(m - 1);
    let counts = allocate(&parts, m - background);
    let stride = rng.random_range(-0.45..0.45);
    let yaw = rng.random_range(0.0..2.0 * PI);
    let illumination = rng.random_range(0.65..1.25);
    let jitter = Normal::new(0.0, 0.008).expect("constant std");
    let color_noise = Normal::new(0.0, 0.03).expect("constant std");
    let shoulder = 1.42 * id.height;
    let hip = 0.88 * id.height;

    let mut positions = Vec::with_capacity(m);
    let mut colors = Vec::with_capacity(m);
    for (part, &count) in parts.iter().zip(&counts) {
        let base = id.colors[part.group];
        for _ in 0..count {
            let mut d: [f64; 3] = [0.0; 3];
            for v in &mut d {
                *v = StandardNormal.sample(rng);
            }
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = part.center[a] + part.radii[a] * d[a] / norm + jitter.sample(rng);
            }
            p = match part.limb {
                Limb::None => p,
                Limb::Arm(side) => swing(p, [0.0, shoulder, 0.0], side * stride),
                Limb::Leg(side) => swing(p, [0.0, hip, 0.0], -side * stride),
            };
            positions.push(p);
            colors.push(base.map(|v| (v * illumination + color_noise.sample(rng)).clamp(0.0, 1.0) as f32));
        }
    }

    add_clutter(&mut positions, &mut colors, background, illumination, rng);

    let (s, c) = yaw.sin_cos();
    for p in &mut positions {
        *p = [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]];
    }
    let mut mean = [0.0; 3];
    for p in &positions {
        for a in 0..3 {
            mean[a] += p[a] / m as f64;
        }
    }
    let radius = positions
        .iter()
        .map(|p| (0..3).map(|a| (p[a] - mean[a]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
        .max(1e-12);
    let mut shift = [0.0; 3];
    if spec.pose_noise > 0.0 {
        let t = Normal::new(0.0, spec.pose_noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut shift {
            *v = t.sample(rng);
        }
    }
    let positions = positions
        .iter()
        .map(|p| std::array::from_fn(|a| ((p[a] - mean[a]) / radius + shift[a]) as f32))
        .collect();
    PointCloud::new(positions, colors)
}

/// Fills `count` points with a floor disk and up to three palette-colored
/// blobs placed around the body.
fn add_clutter(
    positions: &mut Vec<[f64; 3]>,
    colors: &mut Vec<[f32; 3]>,
    count: usize,
    illumination: f64,
    rng: &mut ChaCha8Rng,
) {
    if count == 0 {
        return;
    }
    let blobs = rng.random_range(1..=3usize);
    let floor = count * 2 / 5;
    let floor_color = PALETTE[rng.random_range(0..PALETTE.len())];
    let color_noise = Normal::new(0.0, 0.03).expect("constant std");
    let shade = |base: [f64; 3], rng: &mut ChaCha8Rng| {
        base.map(|v| (v * illumination + color_noise.sample(rng)).clamp(0.0, 1.0) as f32)
    };
    for _ in 0..floor {
        let r = 0.9 * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..2.0 * PI);
        positions.push([r * a.cos(), 0.0, r * a.sin()]);
        colors.push(shade(floor_color, rng));
    }
    let rest = count - floor;
    for b in 0..blobs {
        let n = rest / blobs + usize::from(b < rest % blobs);
        let a = rng.random_range(0.0..2.0 * PI);
        let dist = rng.random_range(0.5..0.9);
        let center = [dist * a.cos(), rng.random_range(0.1..1.6), dist * a.sin()];
        let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.06..0.25));
        let base = PALETTE[rng.random_range(0..PALETTE.len())];
        for _ in 0..n {
            let d: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
            positions.push(std::array::from_fn(|k| center[k] + radii[k] * d[k] / norm));
            colors.push(shade(base, rng));
        }
    }
}

/// Generates every sample in manifest order without touching the disk.
/// Train identities are `0..num_identities`; test identities follow.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<(SampleRecord, PointCloud)>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.total_samples());
    let mut emit = |identity: usize, index: usize, camera: i64, split: Split| -> Result<()> {
        let template = identity_template(spec, identity as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, identity as u64, index as u64));
        let cloud = sample_cloud(spec, &template, &mut rng)?;
        let path = PathBuf::from(format!("{split}/{identity:05}_{index:03}.ogpc"));
        out.push((
            SampleRecord {
                path,
                identity: identity as i64,
                camera,
                split,
            },
            cloud,
        ));
        Ok(())
    };
    for id in 0..spec.num_identities {
        for s in 0..spec.samples_per_identity {
            emit(id, s, s as i64 % TRAIN_CAMERAS, Split::Train)?;
        }
    }
    for t in 0..spec.num_test_identities {
        let id = spec.num_identities + t;
        for q in 0..spec.queries_per_identity {
            emit(id, q, q as i64 % QUERY_CAMERAS, Split::Query)?;
        }
        for g in 0..spec.gallery_per_identity {
            let index = spec.queries_per_identity + g;
            emit(id, index, QUERY_CAMERAS + g as i64 % GALLERY_CAMERAS, Split::Gallery)?;
        }
    }
    Ok(out)
}

/// Writes the dataset under `dir` with a manifest at `dir/manifest.tsv`.
/// Returns the manifest path.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    let samples = synthesize(spec)?;
    for split in ["train", "query", "gallery"] {
        fs::create_dir_all(dir.join(split))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    for (record, cloud) in samples {
        write_cloud(&cloud, &dir.join(&record.path))?;
        records.push(record);
    }
    let manifest = Manifest {
        base_dir: dir.to_path_buf(),
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    manifest.write(&path)?;
    Ok(path)
}
