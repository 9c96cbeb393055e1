//! RANSAC ground-plane fitting and ground / non-ground segmentation.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Point3, PointCloud};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundError {
    #[error("need at least 3 candidate points for plane fitting, got {0}")]
    InsufficientPoints(usize),
    #[error("no near-horizontal plane hypothesis found in {0} iterations")]
    NoPlane(usize),
    #[error("invalid RANSAC config: {0}")]
    InvalidConfig(String),
    #[error("invalid plane: {0}")]
    InvalidPlane(String),
}

/// `{p : normal . p + offset = 0}` with a unit, upward-facing normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    normal: Vector3<f64>,
    offset: f64,
}

impl Plane {
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self, GroundError> {
        if !normal.iter().all(|c| c.is_finite()) || !offset.is_finite() {
            return Err(GroundError::InvalidPlane("non-finite coefficients".into()));
        }
        if (normal.norm() - 1.0).abs() > 1e-9 {
            return Err(GroundError::InvalidPlane(format!(
                "normal length {} is not 1",
                normal.norm()
            )));
        }
        if !(normal.z > 0.0) {
            return Err(GroundError::InvalidPlane(
                "normal must point upward (z > 0)".into(),
            ));
        }
        Ok(Self { normal, offset })
    }

    /// Horizontal plane at height `z`.
    pub fn horizontal(z: f64) -> Self {
        Self {
            normal: Vector3::z(),
            offset: -z,
        }
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Signed distance, positive above the plane.
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal.dot(&p.coords) + self.offset
    }

    pub fn distance(&self, p: &Point3) -> f64 {
        self.signed_distance(p).abs()
    }

    /// Plane height at `(x, y)`.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        -(self.normal.x * x + self.normal.y * y + self.offset) / self.normal.z
    }

    pub fn tilt_deg(&self) -> f64 {
        self.normal.z.clamp(-1.0, 1.0).acos().to_degrees()
    }

    fn through(a: &Point3, b: &Point3, c: &Point3) -> Option<Self> {
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        let scale = (b - a).norm().max((c - a).norm());
        if !(len > 1e-12 * scale * scale) {
            return None;
        }
        let mut n = n / len;
        if n.z < 0.0 {
            n = -n;
        }
        if n.z == 0.0 {
            return None;
        }
        Some(Self {
            normal: n,
            offset: -n.dot(&a.coords),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub d_thresh: f64,
    pub candidate_height_quantile: f64,
    pub max_tilt_deg: f64,
    pub rng_seed: u64,
    /// Least-squares refit on the winning hypothesis' inliers.
    pub refit: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            d_thresh: 0.4,
            candidate_height_quantile: 0.5,
            max_tilt_deg: 10.0,
            rng_seed: 0,
            refit: false,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), GroundError> {
        if self.iterations < 1 {
            return Err(GroundError::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.d_thresh > 0.0 && self.d_thresh.is_finite()) {
            return Err(GroundError::InvalidConfig(format!(
                "d_thresh {} must be > 0",
                self.d_thresh
            )));
        }
        if !(self.candidate_height_quantile > 0.0 && self.candidate_height_quantile <= 1.0) {
            return Err(GroundError::InvalidConfig(format!(
                "candidate_height_quantile {} must be in (0, 1]",
                self.candidate_height_quantile
            )));
        }
        if !(self.max_tilt_deg > 0.0 && self.max_tilt_deg < 90.0) {
            return Err(GroundError::InvalidConfig(format!(
                "max_tilt_deg {} must be in (0, 90)",
                self.max_tilt_deg
            )));
        }
        Ok(())
    }
}

/// Points whose height is at or below the given quantile of the cloud's heights.
pub fn ground_candidates(cloud: &PointCloud, quantile: f64) -> Vec<usize> {
    if cloud.is_empty() {
        return Vec::new();
    }
    let mut zs: Vec<f64> = cloud.points().iter().map(|p| p.z).collect();
    zs.sort_by(f64::total_cmp);
    let rank = ((quantile * zs.len() as f64).ceil() as usize).clamp(1, zs.len()) - 1;
    let cut = zs[rank];
    cloud
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.z <= cut)
        .map(|(i, _)| i)
        .collect()
}

/// RANSAC over the low-height candidates: the near-horizontal hypothesis with
/// the most candidate inliers wins, earlier hypotheses winning ties.
pub fn fit_ground_plane(cloud: &PointCloud, cfg: &RansacConfig) -> Result<Plane, GroundError> {
    cfg.validate()?;
    let candidates = ground_candidates(cloud, cfg.candidate_height_quantile);
    if candidates.len() < 3 {
        return Err(GroundError::InsufficientPoints(candidates.len()));
    }
    let pts: Vec<Point3> = candidates.iter().map(|&i| cloud.points()[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let hypotheses: Vec<Option<Plane>> = (0..cfg.iterations)
        .map(|_| {
            let s = index::sample(&mut rng, pts.len(), 3);
            Plane::through(&pts[s.index(0)], &pts[s.index(1)], &pts[s.index(2)])
                .filter(|p| p.tilt_deg() <= cfg.max_tilt_deg)
        })
        .collect();

    let counts: Vec<usize> = hypotheses
        .par_iter()
        .map(|h| h.map_or(0, |plane| count_inliers(&pts, &plane, cfg.d_thresh)))
        .collect();

    let mut best: Option<(usize, Plane)> = None;
    for (h, &n) in hypotheses.iter().zip(&counts) {
        if let Some(plane) = h {
            if best.map_or(true, |(b, _)| n > b) {
                best = Some((n, *plane));
            }
        }
    }
    let (_, plane) = best.ok_or(GroundError::NoPlane(cfg.iterations))?;
    if cfg.refit {
        // refit on every inlier of the cloud; the candidates alone are the low half
        let inliers: Vec<Point3> = cloud
            .points()
            .iter()
            .filter(|p| plane.distance(p) < cfg.d_thresh)
            .copied()
            .collect();
        if let Some(refined) = least_squares_plane(&inliers) {
            return Ok(refined);
        }
    }
    Ok(plane)
}

fn count_inliers(pts: &[Point3], plane: &Plane, d_thresh: f64) -> usize {
    pts.iter().filter(|p| plane.distance(p) < d_thresh).count()
}

/// Total-least-squares plane through `pts` (smallest principal axis).
pub fn least_squares_plane(pts: &[Point3]) -> Option<Plane> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let centroid = pts.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p.coords - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let k = eig.eigenvalues.imin();
    let mut normal: Vector3<f64> = eig.eigenvectors.column(k).into_owned();
    if normal.z < 0.0 {
        normal = -normal;
    }
    let normal = normal.normalize();
    Plane::new(normal, -normal.dot(&centroid)).ok()
}

/// Splits point indices into (ground, non-ground) by perpendicular distance
/// to `plane`: strictly closer than `d_thresh` is ground.
pub fn segment_by_plane(
    cloud: &PointCloud,
    plane: &Plane,
    d_thresh: f64,
) -> (Vec<usize>, Vec<usize>) {
    let mut ground = Vec::new();
    let mut nonground = Vec::new();
    for (i, p) in cloud.points().iter().enumerate() {
        if plane.distance(p) < d_thresh {
            ground.push(i);
        } else {
            nonground.push(i);
        }
    }
    (ground, nonground)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn plane_with_boxes(z0: f64, sigma: f64, seed: u64) -> (PointCloud, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let mut pts = Vec::new();
        let mut is_ground = Vec::new();
        let jitter = |rng: &mut ChaCha8Rng| if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        for _ in 0..3000 {
            let x = rng.random_range(-20.0..20.0);
            let y = rng.random_range(-20.0..20.0);
            pts.push([
                x + jitter(&mut rng),
                y + jitter(&mut rng),
                z0 + jitter(&mut rng),
            ]);
            is_ground.push(true);
        }
        for (cx, cy) in [(5.0, 5.0), (-8.0, 3.0), (0.0, -10.0)] {
            for _ in 0..300 {
                let x = cx + rng.random_range(-1.0..1.0);
                let y = cy + rng.random_range(-1.0..1.0);
                let z = z0 + rng.random_range(0.5..2.0);
                pts.push([
                    x + jitter(&mut rng),
                    y + jitter(&mut rng),
                    z + jitter(&mut rng),
                ]);
                is_ground.push(false);
            }
        }
        (PointCloud::from_xyz(&pts).unwrap(), is_ground)
    }

    #[test]
    fn noiseless_plane_recovered() {
        let (cloud, _) = plane_with_boxes(0.0, 0.0, 1);
        let plane = fit_ground_plane(&cloud, &RansacConfig::default()).unwrap();
        assert!((plane.normal() - Vector3::z()).norm() < 1e-6);
        assert!(plane.offset().abs() < 1e-6);
    }

    #[test]
    fn noisy_plane_offset_matches_least_squares_oracle() {
        let (cloud, is_ground) = plane_with_boxes(-1.8, 0.02, 2);
        let plane = fit_ground_plane(&cloud, &RansacConfig::default()).unwrap();
        // oracle: total least squares over the true ground points
        let truth: Vec<Point3> = cloud
            .points()
            .iter()
            .zip(&is_ground)
            .filter(|(_, g)| **g)
            .map(|(p, _)| *p)
            .collect();
        let oracle = least_squares_plane(&truth).unwrap();
        assert!((oracle.height_at(0.0, 0.0) + 1.8).abs() < 0.01);
        assert!((plane.height_at(0.0, 0.0) - oracle.height_at(0.0, 0.0)).abs() < 0.05);
    }

    #[test]
    fn refit_tightens_estimate() {
        let (cloud, _) = plane_with_boxes(-1.8, 0.02, 3);
        let cfg = RansacConfig {
            refit: true,
            ..Default::default()
        };
        let plane = fit_ground_plane(&cloud, &cfg).unwrap();
        assert!((plane.height_at(0.0, 0.0) + 1.8).abs() < 0.01);
        assert!(plane.tilt_deg() < 0.5);
    }

    #[test]
    fn collinear_samples_are_skipped() {
        // most candidates lie on one line; a few span the plane
        let mut pts: Vec<[f64; 3]> = (0..200).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        pts.extend([
            [0.0, 5.0, 0.0],
            [3.0, -4.0, 0.0],
            [8.0, 6.0, 0.0],
            [1.0, 1.0, 0.0],
        ]);
        let cloud = PointCloud::from_xyz(&pts).unwrap();
        let cfg = RansacConfig {
            iterations: 200,
            candidate_height_quantile: 1.0,
            ..Default::default()
        };
        let plane = fit_ground_plane(&cloud, &cfg).unwrap();
        assert!((plane.normal() - Vector3::z()).norm() < 1e-9);
    }

    #[test]
    fn errors() {
        let two = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(
            fit_ground_plane(&two, &RansacConfig::default()),
            Err(GroundError::InsufficientPoints(2))
        );
        // a vertical wall has no valid horizontal hypothesis
        let wall: Vec<[f64; 3]> = (0..50)
            .map(|i| [0.0, (i % 10) as f64, (i / 10) as f64])
            .collect();
        let cfg = RansacConfig {
            candidate_height_quantile: 1.0,
            ..Default::default()
        };
        assert_eq!(
            fit_ground_plane(&PointCloud::from_xyz(&wall).unwrap(), &cfg),
            Err(GroundError::NoPlane(100))
        );
        let bad = RansacConfig {
            max_tilt_deg: 90.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(GroundError::InvalidConfig(_))));
    }

    #[test]
    fn threshold_semantics() {
        let plane = Plane::horizontal(0.0);
        let cloud = PointCloud::from_xyz(&[
            [0.0, 0.0, 0.0],
            [1.0, 2.0, 0.39],
            [3.0, 1.0, 0.41],
            [0.0, 0.0, -0.2],
        ])
        .unwrap();
        let (g, ng) = segment_by_plane(&cloud, &plane, 0.4);
        assert_eq!(g, vec![0, 1, 3]);
        assert_eq!(ng, vec![2]);
    }

    #[test]
    fn scene_accuracy() {
        let (cloud, is_ground) = plane_with_boxes(-1.8, 0.02, 4);
        let plane = fit_ground_plane(&cloud, &RansacConfig::default()).unwrap();
        let (g, _) = segment_by_plane(&cloud, &plane, 0.4);
        let mut pred = vec![false; cloud.len()];
        for i in g {
            pred[i] = true;
        }
        let correct = pred.iter().zip(&is_ground).filter(|(a, b)| a == b).count();
        assert!(correct as f64 / cloud.len() as f64 >= 0.99);
    }

    #[test]
    fn deterministic_given_seed() {
        let (cloud, _) = plane_with_boxes(-1.8, 0.05, 5);
        let cfg = RansacConfig {
            rng_seed: 42,
            ..Default::default()
        };
        let a = fit_ground_plane(&cloud, &cfg).unwrap();
        let b = fit_ground_plane(&cloud, &cfg).unwrap();
        assert_eq!(a.normal().as_slice(), b.normal().as_slice());
        assert_eq!(a.offset().to_bits(), b.offset().to_bits());
    }

    proptest! {
        #[test]
        fn segmentation_partitions_and_is_monotone(seed in 0u64..500, t1 in 0.05f64..1.0, dt in 0.0f64..1.0) {
            let (cloud, _) = plane_with_boxes(-1.0, 0.05, seed);
            let plane = Plane::new(Vector3::new(0.02, -0.01, 1.0).normalize(), 1.0).unwrap();
            let (g1, n1) = segment_by_plane(&cloud, &plane, t1);
            let mut all: Vec<usize> = g1.iter().chain(&n1).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..cloud.len()).collect::<Vec<_>>());
            let (g2, _) = segment_by_plane(&cloud, &plane, t1 + dt);
            prop_assert!(g1.iter().all(|i| g2.binary_search(i).is_ok()));
        }

        #[test]
        fn segmentation_is_permutation_invariant(seed in 0u64..200) {
            let (cloud, _) = plane_with_boxes(-1.0, 0.05, seed);
            let plane = Plane::horizontal(-1.0);
            let n = cloud.len();
            let perm: Vec<usize> = (0..n).map(|i| (i * 7919 + 13) % n).collect();
            let shuffled = cloud.select(&perm);
            let (g, _) = segment_by_plane(&cloud, &plane, 0.4);
            let (gs, _) = segment_by_plane(&shuffled, &plane, 0.4);
            let mut mapped: Vec<usize> = gs.iter().map(|&i| perm[i]).collect();
            mapped.sort();
            prop_assert_eq!(mapped, g);
        }
    }
}
