//! Point clouds, rigid poses, and ego-motion synchronization of frame sequences.

use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("{field} has {got} entries, expected {expected} (one per point)")]
    LengthMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("frame index {index} out of range for a sequence of {len} frames")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("timestamps must be strictly increasing (frame {0})")]
    NonIncreasingTimestamps(usize),
    #[error("past frame count {past} needs at least {} frames, got {len}", past + 1)]
    TooFewFrames { past: usize, len: usize },
    #[error("cannot take frames {lo}..={hi} around frame {center} from {len} frames")]
    InsufficientFrames {
        center: usize,
        lo: isize,
        hi: usize,
        len: usize,
    },
    #[error("stride must be at least 1")]
    ZeroStride,
}

/// Per-point semantic category. `Unlabeled` marks points without a weak label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Background,
    Foreground,
    Unlabeled,
}

impl Category {
    pub fn is_labeled(self) -> bool {
        self != Category::Unlabeled
    }
}

/// An ordered set of 3D points. Indices are identities: every operation that
/// produces a cloud from a cloud keeps the order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
    labels: Option<Vec<Category>>,
    gt_motion: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeometryError> {
        if let Some(i) = points
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(Self {
            points,
            labels: None,
            gt_motion: None,
        })
    }

    pub fn from_xyz(coords: &[[f64; 3]]) -> Result<Self, GeometryError> {
        Self::new(
            coords
                .iter()
                .map(|c| Point3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_labels(mut self, labels: Vec<Category>) -> Result<Self, GeometryError> {
        if labels.len() != self.points.len() {
            return Err(GeometryError::LengthMismatch {
                field: "labels",
                expected: self.points.len(),
                got: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_gt_motion(mut self, gt: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        if gt.len() != self.points.len() {
            return Err(GeometryError::LengthMismatch {
                field: "gt_motion",
                expected: self.points.len(),
                got: gt.len(),
            });
        }
        if let Some(i) = gt.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        self.gt_motion = Some(gt);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[Category]> {
        self.labels.as_deref()
    }

    pub fn gt_motion(&self) -> Option<&[Vector3<f64>]> {
        self.gt_motion.as_deref()
    }

    pub fn clear_labels(&mut self) {
        self.labels = None;
    }

    /// Sub-cloud holding `indices` in the given order, with labels and
    /// ground truth carried along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            gt_motion: self
                .gt_motion
                .as_ref()
                .map(|g| indices.iter().map(|&i| g[i]).collect()),
        }
    }

    /// Replaces the coordinates while keeping labels and ground truth.
    pub(crate) fn with_points_unchecked(&self, points: Vec<Point3>) -> PointCloud {
        debug_assert_eq!(points.len(), self.points.len());
        PointCloud {
            points,
            labels: self.labels.clone(),
            gt_motion: self.gt_motion.clone(),
        }
    }
}

/// World-from-sensor rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation
            .iter()
            .chain(translation.iter())
            .all(|c| c.is_finite())
        {
            return Err(GeometryError::InvalidPose("non-finite entries".into()));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let off = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if off > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation is not orthonormal (max |R^T R - I| = {off:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::InvalidPose(format!(
                "rotation determinant {det}, expected +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about +z by `yaw` radians followed by translation `t`.
    pub fn from_yaw_translation(yaw: f64, t: Vector3<f64>) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }
}

/// Applies `pose` to every point. Ground-truth displacements are rotated
/// (they are vectors) but not translated.
pub fn transform_points(cloud: &PointCloud, pose: &RigidPose) -> Result<PointCloud, GeometryError> {
    // composed poses can drift away from orthonormality
    let pose = RigidPose::new(pose.rotation, pose.translation)?;
    Ok(PointCloud {
        points: cloud.points.iter().map(|p| pose.apply(p)).collect(),
        labels: cloud.labels.clone(),
        gt_motion: cloud
            .gt_motion
            .as_ref()
            .map(|g| g.iter().map(|v| pose.apply_vector(v)).collect()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub cloud: PointCloud,
    pub pose: RigidPose,
}

/// Time-ordered frames with world-from-sensor poses. The frame at index
/// `past_count` is the current frame; frames before it are the past sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    past_count: usize,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, past_count: usize) -> Result<Self, GeometryError> {
        if past_count + 1 > frames.len() {
            return Err(GeometryError::TooFewFrames {
                past: past_count,
                len: frames.len(),
            });
        }
        for (i, w) in frames.windows(2).enumerate() {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(GeometryError::NonIncreasingTimestamps(i + 1));
            }
        }
        Ok(Self { frames, past_count })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn past_count(&self) -> usize {
        self.past_count
    }
}

/// Past, current and future clouds, all in the current frame's coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncedTriple {
    pub past: PointCloud,
    pub current: PointCloud,
    pub future: PointCloud,
    pub dt: f64,
}

impl SyncedTriple {
    pub fn new(
        past: PointCloud,
        current: PointCloud,
        future: PointCloud,
        dt: f64,
    ) -> Result<Self, GeometryError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(GeometryError::InvalidPose(format!(
                "triple dt must be positive, got {dt}"
            )));
        }
        Ok(Self {
            past,
            current,
            future,
            dt,
        })
    }

    /// The same scene with time reversed: past and future swapped.
    pub fn reversed(&self) -> Self {
        Self {
            past: self.future.clone(),
            current: self.current.clone(),
            future: self.past.clone(),
            dt: self.dt,
        }
    }
}

/// Relative transform taking coordinates of frame `source` into frame `target`.
pub fn relative_pose(target: &RigidPose, source: &RigidPose) -> RigidPose {
    target.inverse().compose(source)
}

/// Expresses every frame's cloud in the coordinates of frame `target_index`.
pub fn synchronize_sequence(
    seq: &FrameSequence,
    target_index: usize,
) -> Result<Vec<PointCloud>, GeometryError> {
    let target = seq
        .frames
        .get(target_index)
        .ok_or(GeometryError::IndexOutOfRange {
            index: target_index,
            len: seq.frames.len(),
        })?;
    seq.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if i == target_index {
                Ok(f.cloud.clone())
            } else {
                transform_points(&f.cloud, &relative_pose(&target.pose, &f.pose))
            }
        })
        .collect()
}

/// Triple around the sequence's current frame (index `past_count`).
pub fn extract_triple(seq: &FrameSequence, stride: usize) -> Result<SyncedTriple, GeometryError> {
    extract_triple_at(seq, seq.past_count, stride)
}

/// Frames `center - stride`, `center`, `center + stride`, synchronized to `center`.
pub fn extract_triple_at(
    seq: &FrameSequence,
    center: usize,
    stride: usize,
) -> Result<SyncedTriple, GeometryError> {
    if stride == 0 {
        return Err(GeometryError::ZeroStride);
    }
    let len = seq.frames.len();
    if center >= len || stride > center || center + stride >= len {
        return Err(GeometryError::InsufficientFrames {
            center,
            lo: center as isize - stride as isize,
            hi: center + stride,
            len,
        });
    }
    let target = &seq.frames[center];
    let sync = |f: &Frame| transform_points(&f.cloud, &relative_pose(&target.pose, &f.pose));
    let past = &seq.frames[center - stride];
    let future = &seq.frames[center + stride];
    let dt = 0.5 * (future.timestamp - past.timestamp);
    SyncedTriple::new(sync(past)?, target.cloud.clone(), sync(future)?, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn frame(t: f64, cloud: PointCloud, pose: RigidPose) -> Frame {
        Frame {
            timestamp: t,
            cloud,
            pose,
        }
    }

    #[test]
    fn identity_pose_is_noop() {
        let c = PointCloud::from_xyz(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0]]).unwrap();
        assert_eq!(transform_points(&c, &RigidPose::identity()).unwrap(), c);
    }

    #[test]
    fn pure_translation_shifts() {
        let c = PointCloud::from_xyz(&[[0.0, 0.0, 0.0]]).unwrap();
        let out = transform_points(
            &c,
            &RigidPose::from_translation(Vector3::new(1.0, 0.0, 0.0)),
        )
        .unwrap();
        assert_eq!(out.points()[0], Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn yaw_quarter_turn() {
        let c = PointCloud::from_xyz(&[[1.0, 0.0, 0.0]])
            .unwrap()
            .with_gt_motion(vec![Vector3::new(2.0, 0.0, 0.0)])
            .unwrap();
        let out = transform_points(
            &c,
            &RigidPose::from_yaw_translation(FRAC_PI_2, Vector3::zeros()),
        )
        .unwrap();
        let p = out.points()[0];
        assert!((p - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        let g = out.gt_motion().unwrap()[0];
        assert!((g - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.1;
        assert!(matches!(
            RigidPose::new(r, Vector3::zeros()),
            Err(GeometryError::InvalidPose(_))
        ));
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidPose::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn rejects_nan_points() {
        assert_eq!(
            PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [f64::NAN, 0.0, 0.0]]),
            Err(GeometryError::NonFinite(1))
        );
    }

    #[test]
    fn sync_single_and_identical_frames() {
        let c = PointCloud::from_xyz(&[[1.0, 2.0, 0.5]]).unwrap();
        let seq =
            FrameSequence::new(vec![frame(0.0, c.clone(), RigidPose::identity())], 0).unwrap();
        assert_eq!(synchronize_sequence(&seq, 0).unwrap(), vec![c.clone()]);

        let pose = RigidPose::from_yaw_translation(0.3, Vector3::new(4.0, -1.0, 0.0));
        let seq = FrameSequence::new(
            vec![frame(0.0, c.clone(), pose), frame(0.1, c.clone(), pose)],
            1,
        )
        .unwrap();
        let out = synchronize_sequence(&seq, 1).unwrap();
        for cloud in &out {
            assert!((cloud.points()[0] - c.points()[0]).norm() < 1e-12);
        }
    }

    #[test]
    fn sync_compensates_ego_translation() {
        // A world-static point at x = 10. The ego moves +2m along x, so in the
        // second sensor frame the point sits at x = 8.
        let p0 = PointCloud::from_xyz(&[[10.0, 0.0, 0.0]]).unwrap();
        let p1 = PointCloud::from_xyz(&[[8.0, 0.0, 0.0]]).unwrap();
        let seq = FrameSequence::new(
            vec![
                frame(0.0, p0, RigidPose::identity()),
                frame(
                    0.1,
                    p1.clone(),
                    RigidPose::from_translation(Vector3::new(2.0, 0.0, 0.0)),
                ),
            ],
            1,
        )
        .unwrap();
        let out = synchronize_sequence(&seq, 1).unwrap();
        assert!((out[0].points()[0] - out[1].points()[0]).norm() < 1e-9);
        assert_eq!(out[1], p1);
    }

    #[test]
    fn sync_index_out_of_range() {
        let seq = FrameSequence::new(
            vec![frame(0.0, PointCloud::empty(), RigidPose::identity())],
            0,
        )
        .unwrap();
        assert_eq!(
            synchronize_sequence(&seq, 3),
            Err(GeometryError::IndexOutOfRange { index: 3, len: 1 })
        );
    }

    #[test]
    fn sequence_validation() {
        let f = |t| frame(t, PointCloud::empty(), RigidPose::identity());
        assert!(matches!(
            FrameSequence::new(vec![f(0.0), f(0.0)], 0),
            Err(GeometryError::NonIncreasingTimestamps(1))
        ));
        assert!(matches!(
            FrameSequence::new(vec![f(0.0)], 1),
            Err(GeometryError::TooFewFrames { .. })
        ));
    }

    fn uniform_sequence(n: usize, spacing: f64, past: usize) -> FrameSequence {
        let frames = (0..n)
            .map(|i| {
                frame(
                    i as f64 * spacing,
                    PointCloud::from_xyz(&[[i as f64, 0.0, 0.0]]).unwrap(),
                    RigidPose::identity(),
                )
            })
            .collect();
        FrameSequence::new(frames, past).unwrap()
    }

    #[test]
    fn triple_dt_from_stride() {
        let seq = uniform_sequence(11, 0.1, 5);
        let tr = extract_triple(&seq, 5).unwrap();
        assert!((tr.dt - 0.5).abs() < 1e-12);
        assert_eq!(tr.past.points()[0].x, 0.0);
        assert_eq!(tr.current.points()[0].x, 5.0);
        assert_eq!(tr.future.points()[0].x, 10.0);

        let seq = uniform_sequence(3, 0.1, 1);
        assert!((extract_triple(&seq, 1).unwrap().dt - 0.1).abs() < 1e-12);
    }

    #[test]
    fn triple_stride_too_large() {
        let seq = uniform_sequence(3, 0.1, 1);
        assert!(matches!(
            extract_triple(&seq, 2),
            Err(GeometryError::InsufficientFrames { .. })
        ));
        assert_eq!(extract_triple(&seq, 0), Err(GeometryError::ZeroStride));
    }

    fn arb_pose() -> impl Strategy<Value = RigidPose> {
        (
            -3.2f64..3.2,
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            prop::array::uniform3(-50.0f64..50.0),
        )
            .prop_map(|(angle, ax, ay, az, t)| {
                let axis = Vector3::new(ax, ay, az + 1e-3);
                let axis = nalgebra::Unit::new_normalize(axis);
                let r = *Rotation3::from_axis_angle(&axis, angle).matrix();
                RigidPose::new(r, Vector3::from(t)).unwrap()
            })
    }

    proptest! {
        #[test]
        fn transform_then_inverse_roundtrips(
            pose in arb_pose(),
            pts in prop::collection::vec(prop::array::uniform3(-100.0f64..100.0), 1..40),
        ) {
            let c = PointCloud::from_xyz(&pts).unwrap();
            let back = transform_points(&transform_points(&c, &pose).unwrap(), &pose.inverse()).unwrap();
            for (a, b) in c.points().iter().zip(back.points()) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn synchronized_static_scene_aligns(
            poses in prop::collection::vec(arb_pose(), 2..5),
            pts in prop::collection::vec(prop::array::uniform3(-30.0f64..30.0), 1..20),
        ) {
            let world = PointCloud::from_xyz(&pts).unwrap();
            let frames: Vec<Frame> = poses
                .iter()
                .enumerate()
                .map(|(i, p)| frame(i as f64, transform_points(&world, &p.inverse()).unwrap(), *p))
                .collect();
            let seq = FrameSequence::new(frames, 0).unwrap();
            let out = synchronize_sequence(&seq, poses.len() - 1).unwrap();
            for c in &out[1..] {
                for (a, b) in c.points().iter().zip(out[0].points()) {
                    for k in 0..3 {
                        prop_assert!((a[k] - b[k]).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
