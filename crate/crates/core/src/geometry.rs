//! Order-independent point-set kernels: exact KNN graphs, farthest point
//! sampling, neighborhood grouping, subsampling and augmentation.
//!
//! Every tie is broken by the canonical order `(distance, key coordinates
//! lexicographically, original index)`, which keeps the outputs stable under
//! permutations of the input.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default neighbor count for position graphs.
pub const DEFAULT_K: usize = 20;
/// Grouping rates of the three branches.
pub const GROUPING_RATES: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f32; 3]>,
    colors: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f32; 3]>, colors: Vec<[f32; 3]>) -> Result<Self> {
        if positions.is_empty() || positions.len() != colors.len() {
            return Err(Error::Shape(format!(
                "cloud needs equal non-zero row counts, got {} positions and {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(i) = colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::Parameter(format!("color of point {i} outside [0,1]")));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numeric(format!("position of point {i} is not finite")));
        }
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f32; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f32; 3]] {
        &self.colors
    }

    pub fn positions_f64(&self) -> Vec<[f64; 3]> {
        self.positions
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect()
    }

    pub fn colors_f64(&self) -> Vec<[f64; 3]> {
        self.colors
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect()
    }

    /// Subset of points in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.positions[i]).collect(),
            indices.iter().map(|&i| self.colors[i]).collect(),
        )
    }
}

/// Directed k-nearest-neighbor graph. Row `i` lists the `k` nearest keys to
/// key `i` (excluding `i`) in ascending canonical order; the self-loop is
/// implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Flat `m × k` neighbor table.
    pub fn neighbors(&self) -> &[usize] {
        &self.neighbors
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Canonical candidate order: distance, then key coordinates, then index.
fn canonical(keys: &[f64], dim: usize, a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then_with(|| lex_cmp(&keys[a.1 * dim..(a.1 + 1) * dim], &keys[b.1 * dim..(b.1 + 1) * dim]))
        .then(a.1.cmp(&b.1))
}

fn check_keys(keys: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || keys.is_empty() || keys.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "{} key values do not form rows of dimension {dim}",
            keys.len()
        )));
    }
    if keys.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite key".into()));
    }
    Ok(keys.len() / dim)
}

/// The `count` canonically-nearest keys to key `i`, optionally including `i`.
fn nearest_of(
    keys: &[f64],
    dim: usize,
    i: usize,
    count: usize,
    include_self: bool,
    scratch: &mut Vec<(f64, usize)>,
    out: &mut Vec<usize>,
) {
    let m = keys.len() / dim;
    let q = &keys[i * dim..(i + 1) * dim];
    scratch.clear();
    if count == 0 {
        return;
    }
    // Bounded sorted insertion: most candidates fail the distance check
    // against the current worst entry and never reach the comparator.
    for j in 0..m {
        if !include_self && j == i {
            continue;
        }
        let cand = (sq_dist(q, &keys[j * dim..(j + 1) * dim]), j);
        if scratch.len() == count {
            let worst = scratch[count - 1];
            if cand.0 > worst.0 || canonical(keys, dim, cand, worst).is_ge() {
                continue;
            }
            scratch.pop();
        }
        let pos = scratch.partition_point(|e| canonical(keys, dim, *e, cand).is_lt());
        scratch.insert(pos, cand);
    }
    out.extend(scratch.iter().map(|c| c.1));
}

/// Exact Euclidean KNN graph over `m` keys of dimension `dim` (row-major).
pub fn knn_graph(keys: &[f64], dim: usize, k: usize) -> Result<KnnGraph> {
    let m = check_keys(keys, dim)?;
    if k == 0 || k >= m {
        return Err(Error::Parameter(format!(
            "knn needs 1 <= k <= m-1, got k={k} for m={m}"
        )));
    }
    let mut neighbors = Vec::with_capacity(m * k);
    let mut scratch = Vec::with_capacity(m);
    for i in 0..m {
        nearest_of(keys, dim, i, k, false, &mut scratch, &mut neighbors);
    }
    Ok(KnnGraph { k, neighbors })
}

/// Flattens 3D positions into a key buffer.
pub fn position_keys(positions: &[[f64; 3]]) -> Vec<f64> {
    positions.iter().flatten().copied().collect()
}

/// Greedy max-min farthest point sampling, returned in selection order.
///
/// The seed is the point farthest from the centroid.
pub fn farthest_point_sample(positions: &[[f64; 3]], target: usize) -> Result<Vec<usize>> {
    let m = positions.len();
    if target == 0 || target > m {
        return Err(Error::Parameter(format!(
            "farthest point sampling needs 1 <= target <= {m}, got {target}"
        )));
    }
    let mut centroid = [0.0; 3];
    for p in positions {
        for d in 0..3 {
            centroid[d] += p[d];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= m as f64);

    // Larger distance first, then the canonical coordinate/index order.
    let better = |a: (f64, usize), b: (f64, usize)| -> bool {
        match a.0.total_cmp(&b.0) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => lex_cmp(&positions[a.1], &positions[b.1])
                .then(a.1.cmp(&b.1))
                .is_lt(),
        }
    };

    let mut best = (sq_dist(&positions[0], &centroid), 0);
    for (j, p) in positions.iter().enumerate().skip(1) {
        let cand = (sq_dist(p, &centroid), j);
        if better(cand, best) {
            best = cand;
        }
    }

    let mut selected = Vec::with_capacity(target);
    let mut taken = vec![false; m];
    let mut min_d = vec![f64::INFINITY; m];
    let mut next = best.1;
    loop {
        selected.push(next);
        taken[next] = true;
        if selected.len() == target {
            break;
        }
        let mut choice: Option<(f64, usize)> = None;
        for j in 0..m {
            if taken[j] {
                continue;
            }
            let d = sq_dist(&positions[j], &positions[next]);
            if d < min_d[j] {
                min_d[j] = d;
            }
            let cand = (min_d[j], j);
            if choice.map_or(true, |c| better(cand, c)) {
                choice = Some(cand);
            }
        }
        next = choice.expect("unselected point remains").1;
    }
    Ok(selected)
}

/// For every key, the `r` canonically-nearest keys with the key itself
/// included. When `r > m`, rows are padded with their nearest entry.
pub fn nearest_groups(keys: &[f64], dim: usize, r: usize) -> Result<Vec<usize>> {
    let m = check_keys(keys, dim)?;
    if r == 0 {
        return Err(Error::Parameter("grouping rate must be >= 1".into()));
    }
    let take = r.min(m);
    let mut out = Vec::with_capacity(m * r);
    let mut scratch = Vec::with_capacity(m);
    for i in 0..m {
        let start = out.len();
        nearest_of(keys, dim, i, take, true, &mut scratch, &mut out);
        let first = out[start];
        out.resize(start + r, first);
    }
    Ok(out)
}

/// Gathers the features of each point's `r` nearest neighbors into an
/// `m × r × c` tensor.
pub fn group_neighbors(features: &Tensor, keys: &[f64], dim: usize, r: usize) -> Result<Tensor> {
    let m = check_keys(keys, dim)?;
    if features.shape().len() != 2 || features.shape()[0] != m {
        return Err(Error::Shape(format!(
            "features {:?} do not match {m} keys",
            features.shape()
        )));
    }
    let c = features.shape()[1];
    let index = nearest_groups(keys, dim, r)?;
    let mut data = Vec::with_capacity(m * r * c);
    for &j in &index {
        data.extend_from_slice(&features.data()[j * c..(j + 1) * c]);
    }
    Tensor::new(vec![m, r, c], data)
}

/// Keeps `round(fraction * m)` points chosen uniformly without replacement,
/// preserving their original order.
pub fn uniform_subsample(cloud: &PointCloud, fraction: f64, seed: u64) -> Result<PointCloud> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("fraction {fraction} outside (0,1]")));
    }
    let m = cloud.len();
    let count = (fraction * m as f64).round() as usize;
    if count == 0 {
        return Err(Error::Parameter(format!(
            "fraction {fraction} of {m} points selects nothing"
        )));
    }
    if count == m {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, m, count).into_vec();
    idx.sort_unstable();
    cloud.select(&idx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: (0.9, 1.1),
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            scale_range: (1.0, 1.0),
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Parameter(format!("bad scale range [{lo}, {hi}]")));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_clip >= 0.0) {
            return Err(Error::Parameter("jitter sigma and clip must be >= 0".into()));
        }
        Ok(())
    }
}

/// Random global scale followed by clipped Gaussian jitter. Colors are untouched.
pub fn augment<R: Rng + ?Sized>(
    cloud: &PointCloud,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<PointCloud> {
    cfg.validate()?;
    let (lo, hi) = cfg.scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let noise = Normal::new(0.0, cfg.jitter_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let clip = cfg.jitter_clip;
    let positions = cloud
        .positions()
        .iter()
        .map(|p| {
            p.map(|v| {
                let j = if cfg.jitter_sigma > 0.0 {
                    noise.sample(rng).clamp(-clip, clip)
                } else {
                    0.0
                };
                (v as f64 * scale + j) as f32
            })
        })
        .collect();
    PointCloud::new(positions, cloud.colors().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec(), vec![[0.5; 3]; points.len()]).unwrap()
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::new(vec![], vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![[1.5, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn two_points_are_mutual_neighbors() {
        let g = knn_graph(&[0.0, 0.0, 0.0, 1.0, 2.0, 3.0], 3, 1).unwrap();
        assert_eq!(g.row(0), &[1]);
        assert_eq!(g.row(1), &[0]);
        assert!(matches!(
            knn_graph(&[0.0, 0.0, 0.0, 1.0, 2.0, 3.0], 3, 2),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn knn_ties_follow_canonical_order() {
        // 0 at origin, 1 and 2 equidistant; the smaller x comes first.
        let keys = [0.0, 0.0, -1.0, 0.0, 1.0, 0.0];
        let g = knn_graph(&keys, 2, 2).unwrap();
        assert_eq!(g.row(0), &[1, 2]);
        let keys = [0.0, 0.0, 1.0, 0.0, -1.0, 0.0];
        let g = knn_graph(&keys, 2, 2).unwrap();
        assert_eq!(g.row(0), &[2, 1]);
        let keys = [0.0, 0.0, 0.0, 1.0, 0.0, -1.0];
        let g = knn_graph(&keys, 2, 2).unwrap();
        assert_eq!(g.row(0), &[2, 1]);
    }

    #[test]
    fn fps_seed_and_full_selection() {
        let pts = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(farthest_point_sample(&pts, 1).unwrap(), vec![1]);
        let mut all = farthest_point_sample(&pts, 3).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(matches!(
            farthest_point_sample(&pts, 4),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn group_with_rate_one_is_identity() {
        let feats = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let keys = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 5.0, 0.0, 0.0];
        let g = group_neighbors(&feats, &keys, 3, 1).unwrap();
        assert_eq!(g.shape(), &[3, 1, 2]);
        assert_eq!(g.data(), feats.data());
    }

    #[test]
    fn groups_pad_when_rate_exceeds_points() {
        let keys = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let idx = nearest_groups(&keys, 3, 4).unwrap();
        assert_eq!(idx, vec![0, 1, 0, 0, 1, 0, 1, 1]);
    }

    #[test]
    fn subsample_counts_and_determinism() {
        let pts: Vec<[f32; 3]> = (0..8192).map(|i| [i as f32, 0.0, 0.0]).collect();
        let c = cloud(&pts);
        assert_eq!(uniform_subsample(&c, 1.0, 0).unwrap(), c);
        let half = uniform_subsample(&c, 0.5, 7).unwrap();
        assert_eq!(half.len(), 4096);
        assert_eq!(half, uniform_subsample(&c, 0.5, 7).unwrap());
        assert_ne!(half, uniform_subsample(&c, 0.5, 8).unwrap());
        let small = cloud(&pts[..3]);
        assert!(uniform_subsample(&small, 0.1, 0).is_err());
        assert!(uniform_subsample(&small, 0.0, 0).is_err());
        assert!(uniform_subsample(&small, 1.5, 0).is_err());
    }

    #[test]
    fn augment_identity_and_scale() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-1.0, 0.5, 0.25]];
        let c = cloud(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&c, &AugmentConfig::identity(), &mut rng).unwrap(), c);
        let double = AugmentConfig {
            scale_range: (2.0, 2.0),
            ..AugmentConfig::identity()
        };
        let a = augment(&c, &double, &mut rng).unwrap();
        let p = a.positions_f64();
        let q = c.positions_f64();
        for i in 0..3 {
            for j in 0..3 {
                let da = sq_dist(&p[i], &p[j]).sqrt();
                let db = sq_dist(&q[i], &q[j]).sqrt();
                assert!((da - 2.0 * db).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jitter_is_clipped() {
        let pts: Vec<[f32; 3]> = vec![[0.0; 3]; 10_000];
        let c = cloud(&pts);
        let cfg = AugmentConfig {
            scale_range: (1.0, 1.0),
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = augment(&c, &cfg, &mut rng).unwrap();
        assert!(a
            .positions()
            .iter()
            .flatten()
            .all(|v| v.abs() <= 0.05 + 1e-7));
        assert!(a.positions().iter().flatten().any(|v| *v != 0.0));
        assert_eq!(a.colors(), c.colors());
    }
}
