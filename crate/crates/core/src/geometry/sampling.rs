//! Farthest point sampling and nested multi-scale neighborhoods.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::parallel;

use super::{dist2, PointCloud};

/// Nested kNN neighborhoods around sampled centroids.
///
/// `groups[m][t]` lists the point indices of centroid `m` at scale `t`; the
/// scale-`t` group is a prefix of every larger-scale group, always starts with
/// the centroid's own index, and has exactly `scales[t]` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPyramid {
    pub centroid_indices: Vec<usize>,
    pub groups: Vec<Vec<Vec<usize>>>,
    pub scales: Vec<usize>,
}

impl RegionPyramid {
    pub fn num_regions(&self) -> usize {
        self.centroid_indices.len()
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn group(&self, region: usize, scale: usize) -> &[usize] {
        &self.groups[region][scale]
    }

    /// Points of one group gathered from the source cloud.
    pub fn gather(&self, cloud: &PointCloud, region: usize, scale: usize) -> Vec<[f64; 3]> {
        self.group(region, scale)
            .iter()
            .map(|&i| cloud.points[i])
            .collect()
    }
}

/// Select `m` distinct point indices by farthest point sampling.
///
/// The first index is drawn from the seeded generator; each following index
/// maximizes the minimum distance to the points already chosen. Comparisons
/// use squared distances and ties break toward the lower index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 {
        return Err(Error::invalid("farthest point sample of zero points"));
    }
    if m > n {
        return Err(Error::invalid(format!(
            "cannot sample {m} centroids from {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);

    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    selected.push(first);
    taken[first] = true;

    while selected.len() < m {
        let last = cloud.points[*selected.last().expect("non-empty")];
        let updated = parallel::map_indices(n, |i| min_d2[i].min(dist2(cloud.points[i], last)));
        min_d2 = updated;
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for i in 0..n {
            if !taken[i] && min_d2[i] > best_d2 {
                best = i;
                best_d2 = min_d2[i];
            }
        }
        selected.push(best);
        taken[best] = true;
    }
    Ok(selected)
}

/// Number of points above which `knn_group` switches to the grid index.
const GRID_MIN_POINTS: usize = 1024;

/// Build nested neighborhoods around the given centroids.
///
/// Scales must be strictly increasing and the largest must fit in the cloud.
/// Neighbors are ranked by squared distance with ties toward the lower index,
/// except that the centroid itself always ranks first so every group contains
/// it even when other points coincide with it.
pub fn knn_group(
    cloud: &PointCloud,
    centroid_indices: &[usize],
    scales: &[usize],
) -> Result<RegionPyramid> {
    validate_grouping(cloud, centroid_indices, scales)?;
    let k_max = *scales.last().expect("non-empty scales");
    let ranked: Vec<Vec<usize>> = if cloud.len() >= GRID_MIN_POINTS {
        let grid = CellGrid::build(&cloud.points);
        parallel::map_slice(centroid_indices, |&c| grid.nearest(&cloud.points, c, k_max))
    } else {
        parallel::map_slice(centroid_indices, |&c| {
            rank_brute(&cloud.points, c, k_max)
        })
    };
    Ok(assemble(centroid_indices, scales, ranked))
}

/// Brute-force variant of [`knn_group`], used to cross-check the grid index.
pub fn knn_group_brute(
    cloud: &PointCloud,
    centroid_indices: &[usize],
    scales: &[usize],
) -> Result<RegionPyramid> {
    validate_grouping(cloud, centroid_indices, scales)?;
    let k_max = *scales.last().expect("non-empty scales");
    let ranked = parallel::map_slice(centroid_indices, |&c| {
        rank_brute(&cloud.points, c, k_max)
    });
    Ok(assemble(centroid_indices, scales, ranked))
}

fn validate_grouping(
    cloud: &PointCloud,
    centroid_indices: &[usize],
    scales: &[usize],
) -> Result<()> {
    if centroid_indices.is_empty() {
        return Err(Error::invalid("no centroids to group around"));
    }
    if scales.is_empty() {
        return Err(Error::invalid("no neighborhood scales"));
    }
    if !scales.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::invalid(format!(
            "scales must be strictly increasing, got {scales:?}"
        )));
    }
    if scales[0] == 0 {
        return Err(Error::invalid("neighborhood scale of zero"));
    }
    let k_max = *scales.last().expect("non-empty");
    if k_max > cloud.len() {
        return Err(Error::invalid(format!(
            "largest scale {k_max} exceeds cloud size {}",
            cloud.len()
        )));
    }
    if let Some(&bad) = centroid_indices.iter().find(|&&c| c >= cloud.len()) {
        return Err(Error::invalid(format!(
            "centroid index {bad} out of range for {} points",
            cloud.len()
        )));
    }
    Ok(())
}

fn assemble(
    centroid_indices: &[usize],
    scales: &[usize],
    ranked: Vec<Vec<usize>>,
) -> RegionPyramid {
    let groups = ranked
        .into_iter()
        .map(|order| scales.iter().map(|&k| order[..k].to_vec()).collect())
        .collect();
    RegionPyramid {
        centroid_indices: centroid_indices.to_vec(),
        groups,
        scales: scales.to_vec(),
    }
}

/// Rank every point by `(squared distance, index)` from the centroid, then
/// move the centroid itself to the front and truncate to `k`.
fn rank_brute(points: &[[f64; 3]], centroid: usize, k: usize) -> Vec<usize> {
    let c = points[centroid];
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        dist2(points[i], c)
            .total_cmp(&dist2(points[j], c))
            .then(i.cmp(&j))
    });
    centroid_first(order, centroid, k)
}

fn centroid_first(mut order: Vec<usize>, centroid: usize, k: usize) -> Vec<usize> {
    let pos = order
        .iter()
        .position(|&i| i == centroid)
        .expect("centroid is one of the ranked points");
    order[..=pos].rotate_right(1);
    order.truncate(k);
    order
}

/// Uniform cell grid over the cloud's bounding box.
///
/// Queries expand outward one Chebyshev ring of cells at a time and stop once
/// the next ring cannot beat the current k-th best squared distance. Candidates
/// are ranked with the same comparator as the brute-force path, so both paths
/// return identical groups.
struct CellGrid {
    min: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl CellGrid {
    fn build(points: &[[f64; 3]]) -> CellGrid {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let extent = (0..3).map(|k| max[k] - min[k]).fold(0.0f64, f64::max);
        // Aim for a handful of points per cell; collapse to one cell when the
        // cloud is (near) degenerate.
        let per_axis = ((points.len() as f64 / 4.0).cbrt().ceil() as usize).clamp(1, 64);
        let cell = if extent > 1e-12 {
            extent / per_axis as f64
        } else {
            1.0
        };
        let dims = [
            Self::axis_cells(min[0], max[0], cell),
            Self::axis_cells(min[1], max[1], cell),
            Self::axis_cells(min[2], max[2], cell),
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let grid = CellGrid {
            min,
            cell,
            dims,
            buckets: Vec::new(),
        };
        for (i, p) in points.iter().enumerate() {
            let c = grid.cell_of(*p);
            buckets[grid.flat(c)].push(i as u32);
        }
        CellGrid { buckets, ..grid }
    }

    fn axis_cells(lo: f64, hi: f64, cell: f64) -> usize {
        (((hi - lo) / cell).floor() as usize + 1).max(1)
    }

    fn cell_of(&self, p: [f64; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let idx = ((p[k] - self.min[k]) / self.cell).floor() as isize;
            c[k] = idx.clamp(0, self.dims[k] as isize - 1) as usize;
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn nearest(&self, points: &[[f64; 3]], centroid: usize, k: usize) -> Vec<usize> {
        let c = points[centroid];
        let home = self.cell_of(c);
        let max_ring = self.dims.iter().max().copied().unwrap_or(1);
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(4 * k);
        for ring in 0..=max_ring {
            self.visit_ring(home, ring, |bucket| {
                for &i in bucket {
                    cand.push((dist2(points[i as usize], c), i as usize));
                }
            });
            if cand.len() >= k {
                let kth = {
                    let mut d: Vec<f64> = cand.iter().map(|&(d, _)| d).collect();
                    d.sort_by(f64::total_cmp);
                    d[k - 1]
                };
                // Any point in ring r+1 or beyond is at least r cell widths away
                // along some axis.
                let lower = ring as f64 * self.cell;
                if lower * lower > kth {
                    break;
                }
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let order: Vec<usize> = cand.into_iter().map(|(_, i)| i).collect();
        centroid_first(order, centroid, k)
    }

    /// Apply `f` to every bucket whose cell sits at exactly the given
    /// Chebyshev ring around `home`.
    fn visit_ring(&self, home: [usize; 3], ring: usize, mut f: impl FnMut(&[u32])) {
        let r = ring as isize;
        let lo = |k: usize| home[k] as isize - r;
        let hi = |k: usize| home[k] as isize + r;
        for x in lo(0)..=hi(0) {
            if x < 0 || x >= self.dims[0] as isize {
                continue;
            }
            for y in lo(1)..=hi(1) {
                if y < 0 || y >= self.dims[1] as isize {
                    continue;
                }
                for z in lo(2)..=hi(2) {
                    if z < 0 || z >= self.dims[2] as isize {
                        continue;
                    }
                    let cheb = (x - home[0] as isize)
                        .abs()
                        .max((y - home[1] as isize).abs())
                        .max((z - home[2] as isize).abs());
                    if cheb != r {
                        continue;
                    }
                    f(&self.buckets[self.flat([x as usize, y as usize, z as usize])]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        PointCloud::new(format!("rand-{seed}"), points)
    }

    #[test]
    fn fps_selects_distinct_indices() {
        let cloud = random_cloud(100, 3);
        let idx = farthest_point_sample(&cloud, 20, 0).unwrap();
        assert_eq!(idx.len(), 20);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20, "indices must be distinct");
    }

    #[test]
    fn fps_is_seed_deterministic() {
        let cloud = random_cloud(100, 3);
        let a = farthest_point_sample(&cloud, 10, 42).unwrap();
        let b = farthest_point_sample(&cloud, 10, 42).unwrap();
        let c = farthest_point_sample(&cloud, 10, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c, "different seeds should start elsewhere");
    }

    #[test]
    fn fps_maximizes_min_distance_greedily() {
        // Four collinear points; from either end the greedy order is forced.
        let cloud = PointCloud::new(
            "line",
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [10.0, 0.0, 0.0],
            ],
        );
        let idx = farthest_point_sample(&cloud, 3, 0).unwrap();
        let first = idx[0];
        // Whatever the start, the second pick is the point farthest from it.
        let expected_second = match first {
            3 => 0,
            _ => 3,
        };
        assert_eq!(idx[1], expected_second);
    }

    #[test]
    fn fps_survives_all_coincident_points() {
        let cloud = PointCloud::new("dup", vec![[1.0, 2.0, 3.0]; 5]);
        let idx = farthest_point_sample(&cloud, 5, 9).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
    }

    #[test]
    fn fps_rejects_bad_counts() {
        let cloud = random_cloud(10, 0);
        assert!(farthest_point_sample(&cloud, 0, 0).is_err());
        assert!(farthest_point_sample(&cloud, 11, 0).is_err());
    }

    #[test]
    fn knn_groups_are_nested_prefixes_and_centroid_first() {
        let cloud = random_cloud(64, 5);
        let centroids = farthest_point_sample(&cloud, 8, 0).unwrap();
        let pyr = knn_group(&cloud, &centroids, &[4, 8, 16]).unwrap();
        assert_eq!(pyr.num_regions(), 8);
        assert_eq!(pyr.num_scales(), 3);
        for (m, &c) in centroids.iter().enumerate() {
            for t in 0..3 {
                let g = pyr.group(m, t);
                assert_eq!(g.len(), pyr.scales[t]);
                assert_eq!(g[0], c, "group must start at its centroid");
            }
            for t in 0..2 {
                let small = pyr.group(m, t);
                let large = pyr.group(m, t + 1);
                assert_eq!(&large[..small.len()], small, "scales must nest");
            }
        }
    }

    #[test]
    fn knn_ranks_by_distance_then_index() {
        // Point 2 ties point 3 in distance from centroid 0; lower index wins.
        let cloud = PointCloud::new(
            "ties",
            vec![
                [0.0, 0.0, 0.0],
                [3.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
            ],
        );
        let pyr = knn_group(&cloud, &[0], &[4]).unwrap();
        assert_eq!(pyr.group(0, 0), &[0, 2, 3, 1]);
    }

    #[test]
    fn knn_keeps_centroid_first_among_duplicates() {
        // Index 2 coincides with the centroid at index 1; without the
        // centroid-first rule the (distance, index) order would put 1 second.
        let cloud = PointCloud::new(
            "dup",
            vec![[5.0, 0.0, 0.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]],
        );
        let pyr = knn_group(&cloud, &[2], &[2]).unwrap();
        assert_eq!(pyr.group(0, 0), &[2, 1]);
    }

    #[test]
    fn knn_validates_scales() {
        let cloud = random_cloud(16, 0);
        assert!(knn_group(&cloud, &[0], &[4, 4]).is_err());
        assert!(knn_group(&cloud, &[0], &[8, 4]).is_err());
        assert!(knn_group(&cloud, &[0], &[32]).is_err());
        assert!(knn_group(&cloud, &[0], &[]).is_err());
        assert!(knn_group(&cloud, &[], &[4]).is_err());
        assert!(knn_group(&cloud, &[16], &[4]).is_err());
    }

    #[test]
    fn grid_index_matches_brute_force() {
        // Above the grid threshold so knn_group takes the grid path.
        let cloud = random_cloud(2000, 11);
        let centroids = farthest_point_sample(&cloud, 64, 1).unwrap();
        let scales = [4, 16, 64, 128];
        let fast = knn_group(&cloud, &centroids, &scales).unwrap();
        let brute = knn_group_brute(&cloud, &centroids, &scales).unwrap();
        assert_eq!(fast, brute);
    }

    #[test]
    fn grid_index_matches_brute_force_on_clustered_cloud() {
        // Tight clusters stress the ring expansion's stopping rule.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut points = Vec::new();
        for _ in 0..20 {
            let center = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            for _ in 0..100 {
                points.push([
                    center[0] + rng.random_range(-0.01..0.01),
                    center[1] + rng.random_range(-0.01..0.01),
                    center[2] + rng.random_range(-0.01..0.01),
                ]);
            }
        }
        let cloud = PointCloud::new("clusters", points);
        let centroids = farthest_point_sample(&cloud, 32, 2).unwrap();
        let scales = [8, 32];
        let fast = knn_group(&cloud, &centroids, &scales).unwrap();
        let brute = knn_group_brute(&cloud, &centroids, &scales).unwrap();
        assert_eq!(fast, brute);
    }
}
