//! Deterministic synthetic LiDAR-like scenes: a ground plane, static boxes
//! (background structures) and constant-velocity movers, observed from an
//! ego vehicle moving at constant velocity.

use nalgebra::{Rotation2, Vector2, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{
    extract_triple, Category, Frame, FrameSequence, GeometryError, Point3, PointCloud, RigidPose,
    SyncedTriple,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// An upright box. `center` is the footprint center at t = 0 in world
/// coordinates; the box spans `clearance..clearance + height` above ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSpec {
    pub center: (f64, f64),
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub clearance: f64,
    pub velocity: (f64, f64),
}

impl BoxSpec {
    pub fn new(center: (f64, f64), dims: (f64, f64, f64)) -> Self {
        Self {
            center,
            yaw: 0.0,
            length: dims.0,
            width: dims.1,
            height: dims.2,
            clearance: 0.5,
            velocity: (0.0, 0.0),
        }
    }

    pub fn with_velocity(mut self, vx: f64, vy: f64) -> Self {
        self.velocity = (vx, vy);
        self
    }

    pub fn with_clearance(mut self, clearance: f64) -> Self {
        self.clearance = clearance;
        self
    }

    pub fn speed(&self) -> f64 {
        Vector2::new(self.velocity.0, self.velocity.1).norm()
    }

    fn center_at(&self, t: f64) -> Vector2<f64> {
        Vector2::new(
            self.center.0 + self.velocity.0 * t,
            self.center.1 + self.velocity.1 * t,
        )
    }

    fn covers(&self, t: f64, x: f64, y: f64) -> bool {
        let local = Rotation2::new(-self.yaw) * (Vector2::new(x, y) - self.center_at(t));
        local.x.abs() <= 0.5 * self.length && local.y.abs() <= 0.5 * self.width
    }

    /// Area-uniform samples on the top and the four side faces, in box-local
    /// coordinates (origin at the footprint center on the ground).
    fn sample_surface(&self, density: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        let (l, w, h, z0) = (self.length, self.width, self.height, self.clearance);
        let mut out = Vec::new();
        let mut face =
            |area: f64, f: &mut dyn FnMut(f64, f64) -> Vector3<f64>, rng: &mut ChaCha8Rng| {
                let n = (area * density).round() as usize;
                for _ in 0..n {
                    let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
                    out.push(f(u, v));
                }
            };
        face(
            l * w,
            &mut |u, v| Vector3::new((u - 0.5) * l, (v - 0.5) * w, z0 + h),
            rng,
        );
        for sx in [-0.5, 0.5] {
            face(
                w * h,
                &mut |u, v| Vector3::new(sx * l, (u - 0.5) * w, z0 + v * h),
                rng,
            );
        }
        for sy in [-0.5, 0.5] {
            face(
                l * h,
                &mut |u, v| Vector3::new((u - 0.5) * l, sy * w, z0 + v * h),
                rng,
            );
        }
        out
    }

    fn validate(&self, what: &str) -> Result<(), SynthError> {
        let vals = [self.length, self.width, self.height];
        if vals.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(SynthError::InvalidSpec(format!(
                "{what} dimensions must be > 0"
            )));
        }
        if !(self.clearance >= 0.0 && self.clearance.is_finite()) {
            return Err(SynthError::InvalidSpec(format!(
                "{what} clearance must be >= 0"
            )));
        }
        let rest = [
            self.center.0,
            self.center.1,
            self.yaw,
            self.velocity.0,
            self.velocity.1,
        ];
        if rest.iter().any(|v| !v.is_finite()) {
            return Err(SynthError::InvalidSpec(format!(
                "{what} has non-finite pose or velocity"
            )));
        }
        Ok(())
    }
}

/// Azimuth sector (degrees, sensor frame) whose points are dropped; the
/// sector start advances by `drift_deg` each frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occlusion {
    pub start_deg: f64,
    pub width_deg: f64,
    pub drift_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub ground_height: f64,
    /// Half side of the square ground patch around the world origin.
    pub ground_extent: f64,
    /// Ground samples per square meter.
    pub ground_density: f64,
    /// Box-surface samples per square meter.
    pub surface_density: f64,
    pub movers: Vec<BoxSpec>,
    pub statics: Vec<BoxSpec>,
    pub ego_velocity: (f64, f64),
    pub noise_sigma: f64,
    pub frame_count: usize,
    pub frame_dt: f64,
    pub occlusion: Option<Occlusion>,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            ground_height: -1.8,
            ground_extent: 32.0,
            ground_density: 2.0,
            surface_density: 40.0,
            movers: Vec::new(),
            statics: Vec::new(),
            ego_velocity: (0.0, 0.0),
            noise_sigma: 0.02,
            frame_count: 3,
            frame_dt: 0.5,
            occlusion: None,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if !(self.frame_dt > 0.0 && self.frame_dt.is_finite()) {
            return bad("frame_dt must be > 0");
        }
        if self.frame_count < 1 {
            return bad("frame_count must be >= 1");
        }
        if !(self.ground_density > 0.0 && self.surface_density > 0.0) {
            return bad("densities must be > 0");
        }
        if !(self.ground_extent > 0.0 && self.ground_extent.is_finite()) {
            return bad("ground_extent must be > 0");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0");
        }
        if !self.ground_height.is_finite()
            || !self.ego_velocity.0.is_finite()
            || !self.ego_velocity.1.is_finite()
        {
            return bad("ground_height and ego_velocity must be finite");
        }
        for m in &self.movers {
            m.validate("mover")?;
        }
        for s in &self.statics {
            s.validate("static box")?;
            if s.velocity != (0.0, 0.0) {
                return bad("static boxes must have zero velocity");
            }
        }
        if let Some(o) = self.occlusion {
            if !(o.width_deg > 0.0 && o.width_deg < 360.0)
                || !o.start_deg.is_finite()
                || !o.drift_deg.is_finite()
            {
                return bad("occlusion width must be in (0, 360)");
            }
        }
        Ok(())
    }

    /// Index of the current frame within the sequence.
    pub fn current_index(&self) -> usize {
        self.frame_count / 2
    }
}

/// Where a sample point comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleSource {
    Ground(usize),
    Static { object: usize, sample: usize },
    Mover { object: usize, sample: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    pub spec: ScenarioSpec,
    /// Observed frames; each cloud carries full FG/BG labels and the 1 s
    /// ground-truth displacement in its own sensor frame.
    pub sequence: FrameSequence,
    /// Frame clouds before outlier injection.
    pub clean: Vec<PointCloud>,
    pub is_ground: Vec<Vec<bool>>,
    pub gt_05: Vec<Vec<Vector3<f64>>>,
    pub gt_1: Vec<Vec<Vector3<f64>>>,
    /// Noise-free position of every point, in its frame's sensor coordinates.
    pub noise_free: Vec<Vec<Point3>>,
    pub sources: Vec<Vec<SampleSource>>,
    /// Indices displaced by [`inject_outliers`], per frame.
    pub outliers: Vec<Vec<usize>>,
}

impl SynthSequence {
    pub fn current_index(&self) -> usize {
        self.sequence.past_count()
    }

    /// Observed triple with neighbors `stride` frames away.
    pub fn triple(&self, stride: usize) -> Result<SyncedTriple, SynthError> {
        Ok(extract_triple(&self.sequence, stride)?)
    }

    /// Triple built from the outlier-free clouds.
    pub fn clean_triple(&self, stride: usize) -> Result<SyncedTriple, SynthError> {
        let frames = self
            .sequence
            .frames()
            .iter()
            .zip(&self.clean)
            .map(|(f, c)| Frame {
                timestamp: f.timestamp,
                cloud: c.clone(),
                pose: f.pose,
            })
            .collect();
        Ok(extract_triple(
            &FrameSequence::new(frames, self.sequence.past_count())?,
            stride,
        )?)
    }
}

fn azimuth_deg(p: &Point3) -> f64 {
    p.y.atan2(p.x).to_degrees().rem_euclid(360.0)
}

fn occluded(o: &Occlusion, frame: usize, p: &Point3) -> bool {
    let start = (o.start_deg + o.drift_deg * frame as f64).rem_euclid(360.0);
    (azimuth_deg(p) - start).rem_euclid(360.0) < o.width_deg
}

/// Samples the scene once and observes it at every frame time. Ground samples
/// hidden under a box footprint are not observed in that frame.
pub fn generate_scene(spec: &ScenarioSpec) -> Result<SynthSequence, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.ground_extent;
    let n_ground = ((2.0 * e) * (2.0 * e) * spec.ground_density).round() as usize;
    let ground: Vec<Vector2<f64>> = (0..n_ground)
        .map(|_| Vector2::new(rng.random_range(-e..e), rng.random_range(-e..e)))
        .collect();
    let statics: Vec<Vec<Vector3<f64>>> = spec
        .statics
        .iter()
        .map(|b| b.sample_surface(spec.surface_density, &mut rng))
        .collect();
    let movers: Vec<Vec<Vector3<f64>>> = spec
        .movers
        .iter()
        .map(|b| b.sample_surface(spec.surface_density, &mut rng))
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let cur = spec.current_index();
    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut clean = Vec::new();
    let mut is_ground = Vec::new();
    let mut gt_05 = Vec::new();
    let mut gt_1 = Vec::new();
    let mut noise_free = Vec::new();
    let mut all_sources = Vec::new();

    for k in 0..spec.frame_count {
        let t = (k as f64 - cur as f64) * spec.frame_dt;
        let pose = RigidPose::from_translation(Vector3::new(
            spec.ego_velocity.0 * t,
            spec.ego_velocity.1 * t,
            0.0,
        ));
        let to_sensor = pose.inverse();
        let hidden = |x: f64, y: f64| {
            spec.statics.iter().any(|b| b.covers(t, x, y))
                || spec.movers.iter().any(|b| b.covers(t, x, y))
        };

        let mut world: Vec<(Point3, SampleSource, Vector3<f64>)> = Vec::new();
        for (i, g) in ground.iter().enumerate() {
            if !hidden(g.x, g.y) {
                world.push((
                    Point3::new(g.x, g.y, spec.ground_height),
                    SampleSource::Ground(i),
                    Vector3::zeros(),
                ));
            }
        }
        let mut place = |b: &BoxSpec, samples: &[Vector3<f64>], object: usize, mover: bool| {
            let c = b.center_at(t);
            let rot = Rotation2::new(b.yaw);
            let v = Vector3::new(b.velocity.0, b.velocity.1, 0.0);
            for (s, local) in samples.iter().enumerate() {
                let xy = rot * local.xy() + c;
                let p = Point3::new(xy.x, xy.y, spec.ground_height + local.z);
                let src = if mover {
                    SampleSource::Mover { object, sample: s }
                } else {
                    SampleSource::Static { object, sample: s }
                };
                world.push((p, src, if mover { v } else { Vector3::zeros() }));
            }
        };
        for (o, (b, s)) in spec.statics.iter().zip(&statics).enumerate() {
            place(b, s, o, false);
        }
        for (o, (b, s)) in spec.movers.iter().zip(&movers).enumerate() {
            place(b, s, o, true);
        }

        let mut pts = Vec::with_capacity(world.len());
        let mut clean_pos = Vec::with_capacity(world.len());
        let mut labels = Vec::with_capacity(world.len());
        let mut ground_flags = Vec::with_capacity(world.len());
        let mut g05 = Vec::with_capacity(world.len());
        let mut g1 = Vec::with_capacity(world.len());
        let mut sources = Vec::with_capacity(world.len());
        for (p, src, v) in world {
            let q = to_sensor.apply(&p);
            if spec.occlusion.as_ref().is_some_and(|o| occluded(o, k, &q)) {
                continue;
            }
            let jitter = if spec.noise_sigma > 0.0 {
                Vector3::new(
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                )
            } else {
                Vector3::zeros()
            };
            pts.push(q + jitter);
            clean_pos.push(q);
            let mover = matches!(src, SampleSource::Mover { .. });
            labels.push(if mover {
                Category::Foreground
            } else {
                Category::Background
            });
            ground_flags.push(matches!(src, SampleSource::Ground(_)));
            let v = to_sensor.apply_vector(&v);
            g05.push(v * 0.5);
            g1.push(v);
            sources.push(src);
        }
        let cloud = PointCloud::new(pts)?
            .with_labels(labels)?
            .with_gt_motion(g1.clone())?;
        clean.push(cloud.clone());
        frames.push(Frame {
            timestamp: t,
            cloud,
            pose,
        });
        is_ground.push(ground_flags);
        gt_05.push(g05);
        gt_1.push(g1);
        noise_free.push(clean_pos);
        all_sources.push(sources);
    }
    Ok(SynthSequence {
        spec: spec.clone(),
        sequence: FrameSequence::new(frames, cur)?,
        clean,
        is_ground,
        gt_05,
        gt_1,
        noise_free,
        sources: all_sources,
        outliers: vec![Vec::new(); spec.frame_count],
    })
}

/// Displaces `round(fraction * n)` points of every frame by offsets drawn
/// uniformly from `[-magnitude, magnitude]^3`. Labels and ground truth stay
/// attached to the displaced points; `clean` keeps the original clouds.
pub fn inject_outliers(
    seq: &SynthSequence,
    fraction: f64,
    magnitude: f64,
    seed: u64,
) -> Result<SynthSequence, SynthError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SynthError::InvalidSpec(format!(
            "outlier fraction {fraction} must be in [0, 1]"
        )));
    }
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(SynthError::InvalidSpec(format!(
            "outlier magnitude {magnitude} must be >= 0"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = seq.clone();
    let mut frames = Vec::with_capacity(seq.sequence.len());
    for (k, f) in seq.sequence.frames().iter().enumerate() {
        let n = f.cloud.len();
        let count = (fraction * n as f64).round() as usize;
        let mut picked: Vec<usize> = index::sample(&mut rng, n, count).into_vec();
        picked.sort_unstable();
        let mut pts = f.cloud.points().to_vec();
        for &i in &picked {
            if magnitude > 0.0 {
                let d = Vector3::new(
                    rng.random_range(-magnitude..=magnitude),
                    rng.random_range(-magnitude..=magnitude),
                    rng.random_range(-magnitude..=magnitude),
                );
                pts[i] += d;
            }
        }
        let mut cloud = PointCloud::new(pts)?;
        if let Some(l) = f.cloud.labels() {
            cloud = cloud.with_labels(l.to_vec())?;
        }
        if let Some(g) = f.cloud.gt_motion() {
            cloud = cloud.with_gt_motion(g.to_vec())?;
        }
        let mut all = seq.outliers[k].clone();
        all.extend(&picked);
        all.sort_unstable();
        all.dedup();
        out.outliers[k] = all;
        frames.push(Frame {
            timestamp: f.timestamp,
            cloud,
            pose: f.pose,
        });
    }
    out.sequence = FrameSequence::new(frames, seq.sequence.past_count())?;
    Ok(out)
}

/// Keeps the FG/BG label of a `fraction` of points (at least one when the
/// fraction is positive) and marks the rest unlabeled.
pub fn sample_weak_labels(labels: &[Category], fraction: f64, seed: u64) -> Vec<Category> {
    let n = labels.len();
    let mut count = (fraction.clamp(0.0, 1.0) * n as f64).round() as usize;
    if fraction > 0.0 && n > 0 {
        count = count.max(1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Category::Unlabeled; n];
    for i in index::sample(&mut rng, n, count) {
        out[i] = labels[i];
    }
    out
}
