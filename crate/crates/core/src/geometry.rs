//! Point sets and the non-differentiable algorithms over them: k-nearest
//! neighbours, farthest point sampling, Poisson-disk sample elimination and
//! normalisation.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// What a cloud stands for in the completion pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Partial,
    Complete,
    Coarse,
    Fine,
    Reconstructed,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Partial => "partial",
            Role::Complete => "complete",
            Role::Coarse => "coarse",
            Role::Fine => "fine",
            Role::Reconstructed => "reconstructed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    role: Role,
}

impl PointCloud {
    /// Fails on an empty set or any non-finite coordinate.
    pub fn new(points: Vec<Point>, role: Role) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("point cloud must hold at least one point"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("point cloud has non-finite coordinates"));
        }
        Ok(Self { points, role })
    }

    pub fn from_tensor(t: &Tensor, role: Role) -> Result<Self> {
        if t.cols() != 3 {
            return Err(Error::contract(format!("expected N x 3 coordinates, got {:?}", t.shape())));
        }
        Self::new(t.to_points(), role)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.points)
    }

    /// Subset by index, keeping the role.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            role: self.role,
        }
    }
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Point) -> f64 {
    dot(a, a).sqrt()
}

/// `k` neighbours per point, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborhoodIndex {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborhoodIndex {
    pub fn new(k: usize, indices: Vec<usize>) -> Result<Self> {
        if k == 0 || !indices.len().is_multiple_of(k) {
            return Err(Error::contract("neighbourhood index length is not a multiple of k"));
        }
        Ok(Self { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }

    /// The first `k` entries of every row; rows are sorted, so this is the
    /// `k`-neighbourhood.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(Error::contract(format!("cannot narrow a {}-neighbourhood to {k}", self.k)));
        }
        let indices = self.indices.chunks_exact(self.k).flat_map(|r| r[..k].iter().copied()).collect();
        Self::new(k, indices)
    }
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` smallest `(distance, index)` pairs in ascending order.
fn smallest_k(mut cands: Vec<(f64, usize)>, k: usize) -> impl Iterator<Item = usize> {
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, by_distance);
        cands.truncate(k);
    }
    cands.sort_unstable_by(by_distance);
    cands.into_iter().map(|(_, i)| i)
}

/// For every point, itself followed by its `k - 1` nearest other points
/// (Euclidean, ties to the lower index).
pub fn knn_index(cloud: &PointCloud, k: usize) -> Result<NeighborhoodIndex> {
    knn_self(cloud.points(), k)
}

pub fn knn_self(points: &[Point], k: usize) -> Result<NeighborhoodIndex> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!("knn needs 1 <= k <= N, got k = {k}, N = {n}")));
    }
    let mut indices = Vec::with_capacity(n * k);
    for (i, p) in points.iter().enumerate() {
        indices.push(i);
        if k > 1 {
            let cands: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (dist2(p, q), j))
                .collect();
            indices.extend(smallest_k(cands, k - 1));
        }
    }
    NeighborhoodIndex::new(k, indices)
}

/// For every query, the `k` nearest reference points (ties to the lower
/// index).
pub fn knn_query(queries: &[Point], reference: &[Point], k: usize) -> Result<NeighborhoodIndex> {
    if k == 0 || k > reference.len() {
        return Err(Error::contract(format!(
            "knn query needs 1 <= k <= {}, got {k}",
            reference.len()
        )));
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    for p in queries {
        let cands: Vec<(f64, usize)> = reference.iter().enumerate().map(|(j, q)| (dist2(p, q), j)).collect();
        indices.extend(smallest_k(cands, k));
    }
    NeighborhoodIndex::new(k, indices)
}

/// Greedy max-min selection of `m` indices starting from `start`. Ties go to
/// the lower index.
pub fn fps_indices(points: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::contract(format!("farthest point sampling needs 1 <= m <= N, got m = {m}, N = {n}")));
    }
    if start >= n {
        return Err(Error::contract("start index out of range"));
    }
    let mut picked = Vec::with_capacity(m);
    let mut gap = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..m {
        picked.push(cur);
        let c = points[cur];
        gap[cur] = -1.0;
        let mut best = -1.0;
        let mut next = cur;
        for (j, p) in points.iter().enumerate() {
            if gap[j] < 0.0 {
                continue;
            }
            let d = dist2(&c, p);
            if d < gap[j] {
                gap[j] = d;
            }
            if gap[j] > best {
                best = gap[j];
                next = j;
            }
        }
        cur = next;
    }
    Ok(picked)
}

/// Farthest point sampling whose first pick is drawn from `seed`.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed: u64) -> Result<PointCloud> {
    let idx = fps_seeded(cloud.points(), m, seed)?;
    Ok(cloud.select(&idx))
}

pub fn fps_seeded(points: &[Point], m: usize, seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::contract("farthest point sampling of an empty set"));
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..points.len());
    fps_indices(points, m, start)
}

/// Smallest distance between two distinct points (`inf` for one point).
pub fn min_pairwise_distance(points: &[Point]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(dist2(&points[i], &points[j]));
        }
    }
    best.sqrt()
}

/// Uniform hash grid for fixed-radius queries.
pub struct UniformGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl UniformGrid {
    pub fn new(points: &[Point], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key_of(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key_of(p: &Point, cell: f64) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Calls `f` for every indexed point within `radius` of `p` (inclusive),
    /// in ascending index order.
    pub fn for_each_within(&self, points: &[Point], p: &Point, radius: f64, mut f: impl FnMut(usize, f64)) {
        let reach = (radius / self.cell).ceil() as i64;
        let (cx, cy, cz) = Self::key_of(p, self.cell);
        let r2 = radius * radius;
        let mut hits = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(list) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in list {
                            let d = dist2(p, &points[j]);
                            if d <= r2 {
                                hits.push((j, d));
                            }
                        }
                    }
                }
            }
        }
        hits.sort_unstable_by_key(|h| h.0);
        for (j, d) in hits {
            f(j, d.sqrt());
        }
    }
}

/// Output of Poisson-disk sample elimination.
#[derive(Clone, Debug)]
pub struct PoissonDiskSample {
    pub cloud: PointCloud,
    /// Indices of the kept points in the dense input, ascending.
    pub indices: Vec<usize>,
    /// Elimination radius: the minimum pairwise distance of the result.
    pub radius: f64,
}

#[derive(PartialEq)]
struct HeapEntry {
    weight: f64,
    index: usize,
    version: u32,
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.weight.total_cmp(&other.weight).then(self.index.cmp(&other.index))
    }
}

/// Reduces an oversampled set (at least 4x `target`) to `target` points by
/// weighted sample elimination: every point carries a crowding weight from
/// its neighbours inside `2 r_max`, and the most crowded point is removed
/// until `target` remain. `r_max` is taken from a farthest point sample of
/// the same size, which makes the procedure independent of the surface's
/// intrinsic dimension.
///
/// `target == N` returns the input unchanged.
pub fn poisson_disk_sample(dense: &PointCloud, target: usize) -> Result<PoissonDiskSample> {
    let pts = dense.points();
    let n = pts.len();
    if target == 0 {
        return Err(Error::contract("poisson disk target must be positive"));
    }
    if target == n {
        let indices: Vec<usize> = (0..n).collect();
        return Ok(PoissonDiskSample {
            cloud: dense.clone(),
            radius: min_pairwise_distance(pts),
            indices,
        });
    }
    if n < 4 * target {
        return Err(Error::contract(format!(
            "poisson disk sampling needs at least {} source points for {target} samples, got {n}",
            4 * target
        )));
    }

    let fps = fps_indices(pts, target, 0)?;
    let r_max = min_pairwise_distance(&fps.iter().map(|&i| pts[i]).collect::<Vec<_>>());
    let r_max = if r_max.is_finite() && r_max > 0.0 { r_max } else { 1.0 };
    let reach = 2.0 * r_max;
    let r_min = r_max * (1.0 - (target as f64 / n as f64).powf(1.5)) * 0.65;
    let weight = |d: f64| (1.0 - d.max(r_min) / reach).max(0.0).powi(8);

    let grid = UniformGrid::new(pts, reach);
    let mut weights = vec![0.0; n];
    for (i, p) in pts.iter().enumerate() {
        let mut w = 0.0;
        grid.for_each_within(pts, p, reach, |j, d| {
            if j != i {
                w += weight(d);
            }
        });
        weights[i] = w;
    }
    let mut alive = vec![true; n];
    let mut version = vec![0u32; n];
    let mut heap: BinaryHeap<HeapEntry> = (0..n)
        .map(|i| HeapEntry {
            weight: weights[i],
            index: i,
            version: 0,
        })
        .collect();
    let mut remaining = n;
    while remaining > target {
        let Some(top) = heap.pop() else { break };
        if !alive[top.index] || top.version != version[top.index] {
            continue;
        }
        let i = top.index;
        alive[i] = false;
        remaining -= 1;
        grid.for_each_within(pts, &pts[i], reach, |j, d| {
            if j != i && alive[j] {
                weights[j] -= weight(d);
                version[j] += 1;
                heap.push(HeapEntry {
                    weight: weights[j],
                    index: j,
                    version: version[j],
                });
            }
        });
    }
    let indices: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    let cloud = dense.select(&indices);
    let radius = min_pairwise_distance(cloud.points());
    Ok(PoissonDiskSample { cloud, indices, radius })
}

/// Transform applied by [`normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Point,
    pub scale: f64,
    /// All points coincided; `scale` was forced to one.
    pub degenerate: bool,
}

impl Normalization {
    pub fn apply(&self, p: &Point) -> Point {
        [
            (p[0] - self.center[0]) / self.scale,
            (p[1] - self.center[1]) / self.scale,
            (p[2] - self.center[2]) / self.scale,
        ]
    }

    pub fn invert(&self, p: &Point) -> Point {
        [
            p[0] * self.scale + self.center[0],
            p[1] * self.scale + self.center[1],
            p[2] * self.scale + self.center[2],
        ]
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|p| self.apply(p)).collect(),
            role: cloud.role,
        }
    }

    pub fn invert_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|p| self.invert(p)).collect(),
            role: cloud.role,
        }
    }
}

/// Centres on the centroid and scales the farthest point to unit norm.
pub fn normalize(cloud: &PointCloud) -> (PointCloud, Normalization) {
    let n = cloud.len() as f64;
    let mut center = [0.0; 3];
    for p in cloud.points() {
        for d in 0..3 {
            center[d] += p[d];
        }
    }
    center.iter_mut().for_each(|c| *c /= n);
    let radius = cloud
        .points()
        .iter()
        .map(|p| dist2(p, &center))
        .fold(0.0, f64::max)
        .sqrt();
    let degenerate = !(radius > 0.0);
    let t = Normalization {
        center,
        scale: if degenerate { 1.0 } else { radius },
        degenerate,
    };
    (t.apply_cloud(cloud), t)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        PointCloud::new(pts, Role::Complete).unwrap()
    }

    /// Exhaustive sort of all candidates; self forced to the front.
    fn knn_oracle(pts: &[Point], k: usize) -> Vec<Vec<usize>> {
        (0..pts.len())
            .map(|i| {
                let mut all: Vec<(f64, usize)> = (0..pts.len())
                    .filter(|&j| j != i)
                    .map(|j| (dist2(&pts[i], &pts[j]), j))
                    .collect();
                all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                std::iter::once(i).chain(all.into_iter().map(|x| x.1)).take(k).collect()
            })
            .collect()
    }

    #[test]
    fn knn_k1_is_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(&mut rng, 10);
        let nb = knn_index(&c, 1).unwrap();
        for i in 0..10 {
            assert_eq!(nb.row(i), &[i]);
        }
    }

    #[test]
    fn knn_collinear() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]], Role::Partial).unwrap();
        let nb = knn_index(&c, 2).unwrap();
        assert_eq!(nb.row(1), &[1, 0]);
        assert!(matches!(knn_index(&c, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn knn_matches_exhaustive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cloud(&mut rng, 32);
        let nb = knn_index(&c, 5).unwrap();
        for (i, row) in knn_oracle(c.points(), 5).iter().enumerate() {
            assert_eq!(nb.row(i), row.as_slice());
        }
    }

    #[test]
    fn knn_is_permutation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random_cloud(&mut rng, 40);
        let mut perm: Vec<usize> = (0..40).collect();
        for i in (1..40).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = c.select(&perm);
        let a = knn_index(&c, 6).unwrap();
        let b = knn_index(&permuted, 6).unwrap();
        let mut inv = vec![0; 40];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        for (new, &old) in perm.iter().enumerate() {
            let mapped: Vec<usize> = a.row(old).iter().map(|&j| inv[j]).collect();
            assert_eq!(b.row(new), mapped.as_slice());
        }
    }

    #[test]
    fn fps_full_selection_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_cloud(&mut rng, 25);
        let mut idx = fps_seeded(c.points(), 25, 9).unwrap();
        idx.sort();
        assert_eq!(idx, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn fps_square_corners() {
        // corners first, centre last: hand-run greedy from corner 0
        let pts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
        ];
        let idx = fps_indices(&pts, 4, 0).unwrap();
        assert_eq!(idx, vec![0, 3, 1, 2]);
    }

    #[test]
    fn fps_single_pick_is_seeded_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_cloud(&mut rng, 30);
        let start = ChaCha8Rng::seed_from_u64(77).random_range(0..30);
        let one = farthest_point_sample(&c, 1, 77).unwrap();
        assert_eq!(one.points(), &[c.points()[start]]);
        assert!(farthest_point_sample(&c, 31, 0).is_err());
    }

    #[test]
    fn fps_dominates_random_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..5 {
            let c = random_cloud(&mut rng, 200);
            let a = fps_seeded(c.points(), 20, trial).unwrap();
            let b = fps_seeded(c.points(), 20, trial).unwrap();
            assert_eq!(a, b);
            let fps_min = min_pairwise_distance(&c.select(&a).into_points());
            for _ in 0..100 {
                let mut idx: Vec<usize> = (0..200).collect();
                for i in 0..20 {
                    let j = rng.random_range(i..200);
                    idx.swap(i, j);
                }
                let r = min_pairwise_distance(&c.select(&idx[..20]).into_points());
                assert!(fps_min >= r);
            }
        }
    }

    #[test]
    fn pds_identity_when_target_is_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_cloud(&mut rng, 50);
        let s = poisson_disk_sample(&c, 50).unwrap();
        assert_eq!(s.cloud, c);
        assert_eq!(s.radius, min_pairwise_distance(c.points()));
        assert!(poisson_disk_sample(&c, 13).is_err());
    }

    #[test]
    fn pds_segment_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Point> = (0..100).map(|_| [rng.random_range(0.0..1.0), 0.0, 0.0]).collect();
        let c = PointCloud::new(pts, Role::Complete).unwrap();
        let s = poisson_disk_sample(&c, 10).unwrap();
        assert_eq!(s.cloud.len(), 10);
        assert!(s.radius >= 0.5 / 9.0, "spacing {}", s.radius);
        assert!(min_pairwise_distance(s.cloud.points()) >= s.radius);
    }

    #[test]
    fn pds_beats_random_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut wins = 0;
        for _ in 0..100 {
            let c = random_cloud(&mut rng, 400);
            let s = poisson_disk_sample(&c, 50).unwrap();
            let mut idx: Vec<usize> = (0..400).collect();
            for i in 0..50 {
                let j = rng.random_range(i..400);
                idx.swap(i, j);
            }
            let r = min_pairwise_distance(&c.select(&idx[..50]).into_points());
            if s.radius > r {
                wins += 1;
            }
            assert!(s.indices.iter().all(|&i| i < 400));
        }
        assert!(wins >= 95, "{wins}");
    }

    #[test]
    fn normalize_round_trip_and_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = random_cloud(&mut rng, 64);
        let (n, t) = normalize(&c);
        let mut centroid = [0.0; 3];
        for p in n.points() {
            for d in 0..3 {
                centroid[d] += p[d] / 64.0;
            }
        }
        assert!(norm(&centroid) < 1e-9);
        let max = n.points().iter().map(norm).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-9);
        for (a, b) in t.invert_cloud(&n).points().iter().zip(c.points()) {
            assert!(dist2(a, b).sqrt() < 1e-12);
        }
        let (_, again) = normalize(&n);
        assert!(norm(&again.center) < 1e-9 && (again.scale - 1.0).abs() < 1e-9);

        let shifted = PointCloud::new(n.points().iter().map(|p| [p[0] + 5.0, p[1], p[2]]).collect(), Role::Complete).unwrap();
        let (_, ts) = normalize(&shifted);
        assert!(dist2(&ts.center, &[5.0, 0.0, 0.0]).sqrt() < 1e-9);
    }

    #[test]
    fn normalize_flags_degenerate_cloud() {
        let c = PointCloud::new(vec![[2.0, 2.0, 2.0]; 3], Role::Complete).unwrap();
        let (n, t) = normalize(&c);
        assert!(t.degenerate);
        assert_eq!(t.scale, 1.0);
        assert!(n.points().iter().all(|p| *p == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn sampling_returns_input_points_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = random_cloud(&mut rng, 120);
        let f = farthest_point_sample(&c, 17, 3).unwrap();
        let p = poisson_disk_sample(&c, 30).unwrap();
        for q in f.points().iter().chain(p.cloud.points()) {
            assert!(c.points().contains(q));
        }
    }
}
