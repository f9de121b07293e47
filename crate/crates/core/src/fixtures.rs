//! Synthetic shape corpus: spheres, boxes, and planes with seeded jitter
//! and random orientation. Lets the whole pipeline run and be tested with
//! zero external downloads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{Dataset, Sample, Split};
use crate::error::Result;
use crate::geometry::{normalize, PointCloud};

pub const CLASS_NAMES: [&str; 3] = ["sphere", "box", "plane"];

#[derive(Debug, Clone, Copy)]
pub struct FixtureConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    /// Standard deviation of per-point Gaussian jitter, applied before
    /// normalization.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            train_per_class: 50,
            test_per_class: 20,
            points: 256,
            jitter: 0.01,
            seed: 0,
        }
    }
}

/// A cube OFF mesh in the quad-face form common in the wild; the reader
/// fan-triangulates each quad.
pub fn cube_off() -> &'static str {
    "OFF\n\
     8 6 0\n\
     0 0 0\n1 0 0\n1 1 0\n0 1 0\n\
     0 0 1\n1 0 1\n1 1 1\n0 1 1\n\
     4 0 1 2 3\n\
     4 4 5 6 7\n\
     4 0 1 5 4\n\
     4 2 3 7 6\n\
     4 1 2 6 5\n\
     4 3 0 4 7\n"
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniformly random rotation matrix from a normalized Gaussian quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [gauss(rng), gauss(rng), gauss(rng), gauss(rng)];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut q {
        *v /= n;
    }
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn rotate(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
}

fn sphere_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let p = [gauss(rng), gauss(rng), gauss(rng)];
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if n > 1e-9 {
            return [p[0] / n, p[1] / n, p[2] / n];
        }
    }
}

/// Uniform on the surface of the unit cube centered at the origin: pick one
/// of six equal-area faces, then a uniform point on it.
fn box_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let face = rng.random_range(0..6u32);
    let u = rng.random_range(-0.5..0.5);
    let v = rng.random_range(-0.5..0.5);
    let s = if face % 2 == 0 { 0.5 } else { -0.5 };
    match face / 2 {
        0 => [s, u, v],
        1 => [u, s, v],
        _ => [u, v, s],
    }
}

fn plane_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0]
}

fn make_cloud(
    id: String,
    class: usize,
    n: usize,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PointCloud> {
    let rot = random_rotation(rng);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let base = match class {
            0 => sphere_point(rng),
            1 => box_point(rng),
            _ => plane_point(rng),
        };
        let mut p = rotate(&rot, base);
        for v in &mut p {
            *v += jitter * gauss(rng);
        }
        points.push(p);
    }
    normalize(&PointCloud::new(id, points))
}

/// Deterministic three-class corpus; same config gives identical clouds.
pub fn synthetic_dataset(config: FixtureConfig) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::new();
    for (class, name) in CLASS_NAMES.iter().enumerate() {
        for i in 0..config.train_per_class + config.test_per_class {
            let split = if i < config.train_per_class {
                Split::Train
            } else {
                Split::Test
            };
            let id = format!("{name}-{}-{i:03}", split.as_str());
            let cloud = make_cloud(id, class, config.points, config.jitter, &mut rng)?;
            samples.push(Sample {
                cloud,
                label: name.to_string(),
                split,
            });
        }
    }
    Dataset::new(config.points, samples)
}

/// Single normalized cloud for overfit tests: a jittered sphere.
pub fn overfit_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = sphere_point(&mut rng);
        for v in &mut p {
            *v += 0.02 * gauss(&mut rng);
        }
        points.push(p);
    }
    normalize(&PointCloud::new(format!("overfit-{seed}"), points)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{read_off, sample_mesh_surface};

    #[test]
    fn corpus_shape_and_determinism() {
        let cfg = FixtureConfig {
            train_per_class: 3,
            test_per_class: 2,
            points: 32,
            jitter: 0.01,
            seed: 5,
        };
        let a = synthetic_dataset(cfg).unwrap();
        assert_eq!(a.len(), 15);
        assert_eq!(a.split(Split::Train).count(), 9);
        assert_eq!(a.split(Split::Test).count(), 6);
        for s in &a.samples {
            assert_eq!(s.cloud.len(), 32);
            assert!(s.cloud.points.iter().all(|p| p.iter().all(|v| v.is_finite())));
        }
        let b = synthetic_dataset(cfg).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.cloud.points, y.cloud.points);
        }
    }

    #[test]
    fn classes_are_geometrically_distinct() {
        let cfg = FixtureConfig {
            train_per_class: 1,
            test_per_class: 0,
            points: 200,
            jitter: 0.0,
            seed: 11,
        };
        let ds = synthetic_dataset(cfg).unwrap();
        // Spheres have tighter radial spread than boxes; planes span a rank-2
        // subspace, so their covariance determinant vanishes.
        let radial_spread = |c: &PointCloud| {
            let norms: Vec<f64> = c
                .points
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .collect();
            let mean = norms.iter().sum::<f64>() / norms.len() as f64;
            norms.iter().map(|n| (n - mean).abs()).fold(0.0, f64::max)
        };
        let cov_det = |c: &PointCloud| {
            let n = c.points.len() as f64;
            let mut cov = [[0.0f64; 3]; 3];
            for p in &c.points {
                for i in 0..3 {
                    for j in 0..3 {
                        cov[i][j] += p[i] * p[j] / n;
                    }
                }
            }
            cov[0][0] * (cov[1][1] * cov[2][2] - cov[1][2] * cov[2][1])
                - cov[0][1] * (cov[1][0] * cov[2][2] - cov[1][2] * cov[2][0])
                + cov[0][2] * (cov[1][0] * cov[2][1] - cov[1][1] * cov[2][0])
        };
        let sphere = &ds.samples[0].cloud;
        let boxc = &ds.samples[1].cloud;
        let plane = &ds.samples[2].cloud;
        assert!(radial_spread(sphere) < radial_spread(boxc));
        assert!(cov_det(plane).abs() < 1e-12);
        assert!(cov_det(sphere).abs() > 1e-4);
    }

    #[test]
    fn cube_off_samples_lie_on_the_surface() {
        let dir = std::env::temp_dir().join("pcae-fixture-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cube.off");
        std::fs::write(&path, cube_off()).unwrap();
        let mesh = read_off(&path).unwrap();
        assert_eq!(mesh.vertices.len(), 8);
        assert_eq!(mesh.faces.len(), 12);
        let cloud = sample_mesh_surface(&mesh, 500, 3).unwrap();
        for p in &cloud.points {
            let on_face = p.iter().any(|&v| v.abs() < 1e-9 || (v - 1.0).abs() < 1e-9);
            let inside = p.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v));
            assert!(on_face && inside, "off-surface sample {p:?}");
        }
    }

    #[test]
    fn overfit_cloud_is_normalized_and_stable() {
        let a = overfit_cloud(64, 1);
        let b = overfit_cloud(64, 1);
        assert_eq!(a.points, b.points);
        let max_norm = a
            .points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        assert!((max_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-12);
                }
            }
        }
    }
}
