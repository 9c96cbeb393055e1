//! Motion-supervision losses with analytic gradients.
//!
//! Every loss returns a [`LossReport`]: the scalar value and its gradient with
//! respect to the horizontal motion of each supervised current-frame point (or,
//! for the classification loss, with respect to the two category scores).
//!
//! Within one evaluation, nearest-neighbor correspondences and confidence
//! weights are constants. Both are piecewise constant in the motion, so the
//! reported gradient is exact away from correspondence switches.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{Category, Point3, PointCloud, SyncedTriple};
use crate::spatial::NnIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{0} point set is empty")]
    EmptySet(&'static str),
    #[error("{what}: expected {expected} entries, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{which} weights sum to {sum:e}, below the degeneracy floor for {n} points")]
    DegenerateWeights {
        which: &'static str,
        sum: f64,
        n: usize,
    },
    #[error("no labeled points to supervise the classification loss")]
    DegenerateLabels,
    #[error("neighborhood of point {point} references index {index} out of {n}")]
    BadNeighborhood {
        point: usize,
        index: usize,
        n: usize,
    },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

/// Robust penalty applied to a 3D residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PenaltyKind {
    L2,
    L1,
    WelschLeclerc,
    #[default]
    GemanMcClure,
}

impl PenaltyKind {
    pub const ALL: [PenaltyKind; 4] = [
        PenaltyKind::L2,
        PenaltyKind::L1,
        PenaltyKind::WelschLeclerc,
        PenaltyKind::GemanMcClure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::L2 => "l2",
            PenaltyKind::L1 => "l1",
            PenaltyKind::WelschLeclerc => "wl",
            PenaltyKind::GemanMcClure => "gm",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Penalty value and its gradient with respect to the residual.
///
/// L2, Welsch-Leclerc and Geman-McClure act on the squared Euclidean norm
/// `s = |r|^2`; L1 is the component-wise absolute sum (subgradient 0 at 0).
pub fn penalty(kind: PenaltyKind, r: &Vector3<f64>) -> (f64, Vector3<f64>) {
    match kind {
        PenaltyKind::L2 => (r.norm_squared(), 2.0 * r),
        PenaltyKind::L1 => (r.abs().sum(), r.map(sign)),
        PenaltyKind::WelschLeclerc => {
            let e = (-0.5 * r.norm_squared()).exp();
            (1.0 - e, e * r)
        }
        PenaltyKind::GemanMcClure => {
            let s = r.norm_squared();
            let d = s + 1.0;
            (s / d, (2.0 / (d * d)) * r)
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpDirection {
    Forward,
    Backward,
}

impl WarpDirection {
    pub fn sign(self) -> f64 {
        match self {
            WarpDirection::Forward => 1.0,
            WarpDirection::Backward => -1.0,
        }
    }
}

/// `p + f` (forward) or `p - f` (backward) for every point.
pub fn warp(
    points: &PointCloud,
    motion: &[Vector3<f64>],
    dir: WarpDirection,
) -> Result<PointCloud, LossError> {
    check_len("motion", points.len(), motion.len())?;
    Ok(points.with_points_unchecked(warp_points(points.points(), motion, dir.sign())))
}

fn warp_points(points: &[Point3], motion: &[Vector3<f64>], sign: f64) -> Vec<Point3> {
    points
        .iter()
        .zip(motion)
        .map(|(p, f)| p + sign * f)
        .collect()
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), LossError> {
    if expected != got {
        return Err(LossError::CountMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Which supervision signal splits the clouds into dynamic and static parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SupervisionMode {
    /// Foreground / background points (dense or predicted from weak labels).
    Fb,
    /// Non-ground / ground points, with weak FG/BG labels on annotated frames.
    Ng,
    /// Non-ground / ground points, no annotations.
    SelfSupervised,
}

impl SupervisionMode {
    pub fn name(self) -> &'static str {
        match self {
            SupervisionMode::Fb => "fb",
            SupervisionMode::Ng => "ng",
            SupervisionMode::SelfSupervised => "self",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "fb" => Some(SupervisionMode::Fb),
            "ng" => Some(SupervisionMode::Ng),
            "self" => Some(SupervisionMode::SelfSupervised),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Gaussian kernel width of the consistency confidence, m^2.
    pub theta_sq: f64,
    pub penalty: PenaltyKind,
    pub beta1: f64,
    pub beta2: f64,
    /// Static-loss weight on background points (FB mode).
    pub phi_bg: f64,
    /// Static-loss weight on ground points (NG and self modes).
    pub phi_g: f64,
    /// Class weight of background labels in the classification loss.
    pub alpha_bg: f64,
    pub smooth_radius: f64,
    pub smooth_k: usize,
    /// Whether the current frame carries weak FG/BG annotations (NG mode gate).
    pub omega: bool,
    /// Include the backward (past-frame) term.
    pub use_past: bool,
    /// Reweight by forward/backward consistency; requires `use_past`.
    pub use_confidence: bool,
    pub use_smoothness: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            theta_sq: 0.5,
            penalty: PenaltyKind::GemanMcClure,
            beta1: 1.0,
            beta2: 5.0,
            phi_bg: 0.005,
            phi_g: 0.02,
            alpha_bg: 0.005,
            smooth_radius: 2.5,
            smooth_k: 8,
            omega: true,
            use_past: true,
            use_confidence: true,
            use_smoothness: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let positive = [
            ("theta_sq", self.theta_sq),
            ("smooth_radius", self.smooth_radius),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LossError::InvalidConfig(format!(
                    "{k} must be > 0, got {v}"
                )));
            }
        }
        let nonneg = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("phi_bg", self.phi_bg),
            ("phi_g", self.phi_g),
            ("alpha_bg", self.alpha_bg),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::InvalidConfig(format!(
                    "{k} must be >= 0, got {v}"
                )));
            }
        }
        if self.smooth_k < 1 {
            return Err(LossError::InvalidConfig("smooth_k must be >= 1".into()));
        }
        if self.use_confidence && !self.use_past {
            return Err(LossError::InvalidConfig(
                "use_confidence needs the past frame (use_past = true)".into(),
            ));
        }
        Ok(())
    }

    pub fn static_weight(&self, mode: SupervisionMode) -> f64 {
        match mode {
            SupervisionMode::Fb => self.phi_bg,
            SupervisionMode::Ng | SupervisionMode::SelfSupervised => self.phi_g,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad: Vec<Vector2<f64>>,
}

impl LossReport {
    pub fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![Vector2::zeros(); n],
        }
    }

    fn from_3d(value: f64, grad: &[Vector3<f64>]) -> Self {
        Self {
            value,
            grad: grad.iter().map(|g| g.xy()).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            value: s * self.value,
            grad: self.grad.iter().map(|g| g * s).collect(),
        }
    }
}

/// Nearest-neighbor correspondences in both directions between a warped
/// source set and a target set: `(index, squared distance)`.
struct Matches {
    src_to_tgt: Vec<(usize, f64)>,
    tgt_to_src: Vec<(usize, f64)>,
}

fn match_sets(
    warped: &[Point3],
    target: &[Point3],
    target_index: &NnIndex,
) -> Result<Matches, LossError> {
    let warped_index = NnIndex::from_points(warped).map_err(|_| LossError::EmptySet("warped"))?;
    Ok(Matches {
        src_to_tgt: target_index.nearest_batch(warped),
        tgt_to_src: warped_index.nearest_batch(target),
    })
}

fn index_of(points: &[Point3], what: &'static str) -> Result<NnIndex, LossError> {
    NnIndex::from_points(points).map_err(|_| LossError::EmptySet(what))
}

/// Symmetric Chamfer distance with squared Euclidean penalty:
/// mean over warped points of the squared distance to the target set plus
/// the mean over target points of the squared distance to the warped set.
/// The gradient is with respect to the motion that produced `warped`.
pub fn chamfer_l2(warped: &PointCloud, target: &PointCloud) -> Result<LossReport, LossError> {
    if warped.is_empty() {
        return Err(LossError::EmptySet("warped"));
    }
    let tindex = index_of(target.points(), "target")?;
    let m = match_sets(warped.points(), target.points(), &tindex)?;
    let n = warped.len() as f64;
    let t = target.len() as f64;
    let value = m.src_to_tgt.iter().map(|x| x.1).sum::<f64>() / n
        + m.tgt_to_src.iter().map(|x| x.1).sum::<f64>() / t;

    let wp = warped.points();
    let tp = target.points();
    let mut grad = vec![Vector3::zeros(); wp.len()];
    for (i, (j, _)) in m.src_to_tgt.iter().enumerate() {
        grad[i] += (2.0 / n) * (wp[i] - tp[*j]);
    }
    for (j, (i, _)) in m.tgt_to_src.iter().enumerate() {
        grad[*i] += (2.0 / t) * (wp[*i] - tp[j]);
    }
    Ok(LossReport::from_3d(value, &grad))
}

fn weight_sum(w: &[f64], which: &'static str) -> Result<f64, LossError> {
    let sum: f64 = w.iter().sum();
    if !(sum >= 1e-8 * w.len() as f64) || sum == 0.0 {
        return Err(LossError::DegenerateWeights {
            which,
            sum,
            n: w.len(),
        });
    }
    Ok(sum)
}

/// Weighted robust Chamfer term on fixed correspondences. Returns the value
/// and the gradient with respect to each warped point.
fn weighted_term(
    warped: &[Point3],
    target: &[Point3],
    m: &Matches,
    w_src: &[f64],
    w_tgt: &[f64],
    kind: PenaltyKind,
) -> Result<(f64, Vec<Vector3<f64>>), LossError> {
    let ws = weight_sum(w_src, "source")?;
    let wt = weight_sum(w_tgt, "target")?;
    let mut grad = vec![Vector3::zeros(); warped.len()];
    let mut fwd = 0.0;
    for (i, (j, _)) in m.src_to_tgt.iter().enumerate() {
        if w_src[i] == 0.0 {
            continue;
        }
        let (v, g) = penalty(kind, &(warped[i] - target[*j]));
        fwd += w_src[i] * v;
        grad[i] += (w_src[i] / ws) * g;
    }
    let mut rev = 0.0;
    for (j, (i, _)) in m.tgt_to_src.iter().enumerate() {
        if w_tgt[j] == 0.0 {
            continue;
        }
        let (v, g) = penalty(kind, &(target[j] - warped[*i]));
        rev += w_tgt[j] * v;
        grad[*i] -= (w_tgt[j] / wt) * g;
    }
    Ok((fwd / ws + rev / wt, grad))
}

/// Confidence-weighted robust Chamfer loss between a warped cloud and its
/// target. Each directed term is normalized by the L1 norm of its weights.
pub fn weighted_robust_chamfer(
    warped: &PointCloud,
    target: &PointCloud,
    w_src: &[f64],
    w_tgt: &[f64],
    kind: PenaltyKind,
) -> Result<LossReport, LossError> {
    if warped.is_empty() {
        return Err(LossError::EmptySet("warped"));
    }
    check_len("source weights", warped.len(), w_src.len())?;
    check_len("target weights", target.len(), w_tgt.len())?;
    let tindex = index_of(target.points(), "target")?;
    let m = match_sets(warped.points(), target.points(), &tindex)?;
    let (value, grad) = weighted_term(warped.points(), target.points(), &m, w_src, w_tgt, kind)?;
    Ok(LossReport::from_3d(value, &grad))
}

/// Forward and backward pseudo motion labels of each current point: the offset
/// from the point to the future (past) point closest to its forward (backward)
/// warped position.
pub fn pseudo_labels(
    triple: &SyncedTriple,
    motion_current: &[Vector3<f64>],
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>), LossError> {
    check_len("motion", triple.current.len(), motion_current.len())?;
    let fi = index_of(triple.future.points(), "future")?;
    let pi = index_of(triple.past.points(), "past")?;
    let cur = triple.current.points();
    let wf = warp_points(cur, motion_current, 1.0);
    let wb = warp_points(cur, motion_current, -1.0);
    let yf = labels_from(&fi.nearest_batch(&wf), triple.future.points(), cur);
    let yb = labels_from(&pi.nearest_batch(&wb), triple.past.points(), cur);
    Ok((yf, yb))
}

fn labels_from(nn: &[(usize, f64)], target: &[Point3], cur: &[Point3]) -> Vec<Vector3<f64>> {
    nn.iter()
        .zip(cur)
        .map(|((j, _), p)| target[*j] - p)
        .collect()
}

/// Gaussian consistency confidence `exp(-|y_f + y_b|^2 / (2 theta^2))`.
pub fn confidence_current(
    y_f: &[Vector3<f64>],
    y_b: &[Vector3<f64>],
    theta_sq: f64,
) -> Result<Vec<f64>, LossError> {
    check_len("backward labels", y_f.len(), y_b.len())?;
    if !(theta_sq > 0.0) {
        return Err(LossError::InvalidConfig(format!(
            "theta_sq must be > 0, got {theta_sq}"
        )));
    }
    Ok(y_f
        .iter()
        .zip(y_b)
        .map(|(f, b)| (-(f + b).norm_squared() / (2.0 * theta_sq)).exp())
        .collect())
}

/// Each target point adopts the confidence of its nearest warped current point.
pub fn propagate_confidence(
    target: &PointCloud,
    warped_current: &PointCloud,
    w0: &[f64],
) -> Result<Vec<f64>, LossError> {
    check_len("current weights", warped_current.len(), w0.len())?;
    let idx = index_of(warped_current.points(), "warped current")?;
    Ok(idx
        .nearest_batch(target.points())
        .iter()
        .map(|(i, _)| w0[*i])
        .collect())
}

/// Confidence maps of the three clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub past: Vec<f64>,
    pub current: Vec<f64>,
    pub future: Vec<f64>,
}

/// Precomputed target indices for repeated RCCD evaluations on one triple.
pub struct RccdEvaluator<'a> {
    triple: &'a SyncedTriple,
    past_index: NnIndex,
    future_index: NnIndex,
    cfg: LossConfig,
}

/// Full output of one RCCD evaluation.
#[derive(Debug, Clone)]
pub struct RccdOutput {
    pub value: f64,
    /// Gradient with respect to the full 3D motion of each current point.
    pub grad: Vec<Vector3<f64>>,
    pub confidence: ConfidenceMap,
}

impl<'a> RccdEvaluator<'a> {
    pub fn new(triple: &'a SyncedTriple, cfg: &LossConfig) -> Result<Self, LossError> {
        cfg.validate()?;
        if triple.current.is_empty() {
            return Err(LossError::EmptySet("current"));
        }
        Ok(Self {
            triple,
            past_index: index_of(triple.past.points(), "past")?,
            future_index: index_of(triple.future.points(), "future")?,
            cfg: *cfg,
        })
    }

    pub fn evaluate(&self, motion: &[Vector3<f64>]) -> Result<RccdOutput, LossError> {
        let cur = self.triple.current.points();
        check_len("motion", cur.len(), motion.len())?;
        let past = self.triple.past.points();
        let future = self.triple.future.points();
        let n = cur.len();

        let wf = warp_points(cur, motion, 1.0);
        let mf = match_sets(&wf, future, &self.future_index)?;
        let mb = if self.cfg.use_past {
            let wb = warp_points(cur, motion, -1.0);
            let mb = match_sets(&wb, past, &self.past_index)?;
            Some((wb, mb))
        } else {
            None
        };

        let w0 = match (&mb, self.cfg.use_confidence) {
            (Some((_, mb)), true) => {
                let yf = labels_from(&mf.src_to_tgt, future, cur);
                let yb = labels_from(&mb.src_to_tgt, past, cur);
                confidence_current(&yf, &yb, self.cfg.theta_sq)?
            }
            _ => vec![1.0; n],
        };
        let w_future: Vec<f64> = mf.tgt_to_src.iter().map(|(i, _)| w0[*i]).collect();

        let (vf, gf) = weighted_term(&wf, future, &mf, &w0, &w_future, self.cfg.penalty)?;
        let mut value = vf;
        let mut grad = gf;
        let mut w_past = Vec::new();
        if let Some((wb, mb)) = &mb {
            w_past = mb.tgt_to_src.iter().map(|(i, _)| w0[*i]).collect();
            let (vb, gb) = weighted_term(wb, past, mb, &w0, &w_past, self.cfg.penalty)?;
            value += vb;
            // d(p - f)/df = -1
            for (g, b) in grad.iter_mut().zip(&gb) {
                *g -= b;
            }
        }
        Ok(RccdOutput {
            value,
            grad,
            confidence: ConfidenceMap {
                past: w_past,
                current: w0,
                future: w_future,
            },
        })
    }
}

/// Robust consistency-aware Chamfer loss over a synchronized triple: the
/// weighted robust Chamfer of the backward-warped current cloud against the
/// past plus that of the forward-warped current cloud against the future.
pub fn rccd(
    triple: &SyncedTriple,
    motion_current: &[Vector3<f64>],
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    let out = RccdEvaluator::new(triple, cfg)?.evaluate(motion_current)?;
    Ok(LossReport::from_3d(out.value, &out.grad))
}

/// Neighborhoods for the smoothness term: up to `k` nearest other points of
/// the same set within `radius`.
pub fn build_neighborhoods(points: &[Point3], radius: f64, k: usize) -> Vec<Vec<usize>> {
    use rayon::prelude::*;
    let Ok(index) = NnIndex::from_points(points) else {
        return Vec::new();
    };
    (0..points.len())
        .into_par_iter()
        .map(|i| index.radius_neighbors(&points[i], radius, k, Some(i)))
        .collect()
}

/// Mean over points of the mean L1 motion difference to their neighbors.
pub fn smoothness(
    points: &PointCloud,
    motion: &[Vector3<f64>],
    neighborhoods: &[Vec<usize>],
) -> Result<LossReport, LossError> {
    let n = points.len();
    check_len("motion", n, motion.len())?;
    check_len("neighborhoods", n, neighborhoods.len())?;
    if n == 0 {
        return Ok(LossReport::zero(0));
    }
    let mut value = 0.0;
    let mut grad = vec![Vector2::zeros(); n];
    for (i, nb) in neighborhoods.iter().enumerate() {
        if nb.is_empty() {
            continue;
        }
        let scale = 1.0 / (n as f64 * nb.len() as f64);
        let mut acc = 0.0;
        for &j in nb {
            if j >= n {
                return Err(LossError::BadNeighborhood {
                    point: i,
                    index: j,
                    n,
                });
            }
            let d = motion[i] - motion[j];
            acc += d.abs().sum();
            let s = Vector2::new(sign(d.x), sign(d.y));
            grad[i] += scale * s;
            grad[j] -= scale * s;
        }
        value += acc * scale;
    }
    Ok(LossReport { value, grad })
}

/// Mean L1 norm of the motion of points treated as static; 0 for an empty set.
pub fn static_loss(motion: &[Vector3<f64>]) -> LossReport {
    let n = motion.len();
    if n == 0 {
        return LossReport::zero(0);
    }
    let inv = 1.0 / n as f64;
    let value = motion.iter().map(|f| f.abs().sum()).sum::<f64>() * inv;
    let grad = motion
        .iter()
        .map(|f| Vector2::new(sign(f.x), sign(f.y)) * inv)
        .collect();
    LossReport { value, grad }
}

/// Class-weighted cross-entropy over labeled points. `scores[i] = [fg, bg]`;
/// the gradient is with respect to those raw scores.
pub fn weak_cls_loss(
    scores: &[[f64; 2]],
    labels: &[Category],
    alpha_bg: f64,
) -> Result<LossReport, LossError> {
    check_len("labels", scores.len(), labels.len())?;
    let labeled = labels.iter().filter(|l| l.is_labeled()).count();
    if labeled == 0 {
        return Err(LossError::DegenerateLabels);
    }
    let inv = 1.0 / labeled as f64;
    let mut value = 0.0;
    let mut grad = vec![Vector2::zeros(); scores.len()];
    for (i, (s, l)) in scores.iter().zip(labels).enumerate() {
        let (target, alpha) = match l {
            Category::Foreground => (0, 1.0),
            Category::Background => (1, alpha_bg),
            Category::Unlabeled => continue,
        };
        let m = s[0].max(s[1]);
        let lse = m + ((s[0] - m).exp() + (s[1] - m).exp()).ln();
        value += alpha * (lse - s[target]);
        let p = [(s[0] - lse).exp(), (s[1] - lse).exp()];
        let mut g = Vector2::new(p[0], p[1]);
        g[target] -= 1.0;
        grad[i] = g * (alpha * inv);
    }
    Ok(LossReport {
        value: value * inv,
        grad,
    })
}

/// The three parts of the motion loss.
#[derive(Debug, Clone)]
pub struct MotionTerms {
    pub rccd: LossReport,
    pub smooth: LossReport,
    pub stat: LossReport,
    pub static_weight: f64,
    pub confidence: ConfidenceMap,
}

impl MotionTerms {
    pub fn value(&self) -> f64 {
        self.rccd.value + self.smooth.value + self.static_weight * self.stat.value
    }

    /// Gradient of the dynamic points followed by that of the static points.
    pub fn report(&self) -> LossReport {
        let mut grad: Vec<Vector2<f64>> = self
            .rccd
            .grad
            .iter()
            .zip(&self.smooth.grad)
            .map(|(a, b)| a + b)
            .collect();
        grad.extend(self.stat.grad.iter().map(|g| g * self.static_weight));
        LossReport {
            value: self.value(),
            grad,
        }
    }
}

/// Motion loss evaluator reusing target indices across calls.
pub struct MotionLoss<'a> {
    mode: SupervisionMode,
    rccd: RccdEvaluator<'a>,
    neighborhoods: &'a [Vec<usize>],
    cfg: LossConfig,
}

impl<'a> MotionLoss<'a> {
    pub fn new(
        mode: SupervisionMode,
        dynamic: &'a SyncedTriple,
        neighborhoods: &'a [Vec<usize>],
        cfg: &LossConfig,
    ) -> Result<Self, LossError> {
        for (name, c) in [
            ("past dynamic", &dynamic.past),
            ("future dynamic", &dynamic.future),
        ] {
            if c.is_empty() {
                return Err(LossError::EmptySet(name));
            }
        }
        check_len("neighborhoods", dynamic.current.len(), neighborhoods.len())?;
        Ok(Self {
            mode,
            rccd: RccdEvaluator::new(dynamic, cfg)?,
            neighborhoods,
            cfg: *cfg,
        })
    }

    pub fn evaluate(
        &self,
        dynamic_motion: &[Vector3<f64>],
        static_motion: &[Vector3<f64>],
    ) -> Result<MotionTerms, LossError> {
        let out = self.rccd.evaluate(dynamic_motion)?;
        let smooth = if self.cfg.use_smoothness {
            smoothness(
                &self.rccd.triple.current,
                dynamic_motion,
                self.neighborhoods,
            )?
        } else {
            LossReport::zero(dynamic_motion.len())
        };
        Ok(MotionTerms {
            rccd: LossReport::from_3d(out.value, &out.grad),
            smooth,
            stat: static_loss(static_motion),
            static_weight: self.cfg.static_weight(self.mode),
            confidence: out.confidence,
        })
    }
}

/// RCCD on the dynamic triple, smoothness on the dynamic current points, and
/// the weighted static loss on the static current points. The weight is
/// `phi_bg` in FB mode and `phi_g` otherwise.
pub fn composite_motion_loss(
    mode: SupervisionMode,
    dynamic: &SyncedTriple,
    dynamic_motion: &[Vector3<f64>],
    static_motion: &[Vector3<f64>],
    cfg: &LossConfig,
    neighborhoods: &[Vec<usize>],
) -> Result<LossReport, LossError> {
    Ok(MotionLoss::new(mode, dynamic, neighborhoods, cfg)?
        .evaluate(dynamic_motion, static_motion)?
        .report())
}

/// Total training objective: gradients of the motion and score parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub motion_grad: Vec<Vector2<f64>>,
    pub score_grad: Vec<Vector2<f64>>,
}

/// Weights of the classification and motion terms in the total loss.
pub fn loss_weights(mode: SupervisionMode, cfg: &LossConfig) -> (f64, f64) {
    match mode {
        SupervisionMode::Fb => (cfg.beta1, cfg.beta2),
        SupervisionMode::Ng => (if cfg.omega { cfg.beta1 } else { 0.0 }, cfg.beta2),
        SupervisionMode::SelfSupervised => (0.0, 1.0),
    }
}

/// FB: `beta1 cls + beta2 mot`. NG: `omega beta1 cls + beta2 mot`, with
/// omega from `cfg.omega`. Self-supervised: the motion loss alone.
pub fn total_weak_loss(
    mode: SupervisionMode,
    mot: &LossReport,
    cls: Option<&LossReport>,
    cfg: &LossConfig,
) -> TotalLoss {
    let (cls_w, mot_w) = loss_weights(mode, cfg);
    let (cls_value, score_grad) = match cls {
        Some(c) if cls_w != 0.0 => (cls_w * c.value, c.grad.iter().map(|g| g * cls_w).collect()),
        Some(c) => (0.0, vec![Vector2::zeros(); c.grad.len()]),
        None => (0.0, Vec::new()),
    };
    TotalLoss {
        value: cls_value + mot_w * mot.value,
        motion_grad: mot.grad.iter().map(|g| g * mot_w).collect(),
        score_grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_xyz(pts).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, span: f64) -> PointCloud {
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-span..span),
                    rng.random_range(-span..span),
                    rng.random_range(-span * 0.3..span * 0.3),
                ]
            })
            .collect();
        cloud(&pts)
    }

    fn brute_min(p: &Point3, set: &[Point3], kind: PenaltyKind) -> f64 {
        set.iter()
            .map(|s| penalty(kind, &(p - s)).0)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn penalty_values() {
        for k in PenaltyKind::ALL {
            assert_eq!(penalty(k, &Vector3::zeros()), (0.0, Vector3::zeros()));
        }
        let unit = Vector3::new(0.6, 0.8, 0.0);
        assert!((penalty(PenaltyKind::GemanMcClure, &unit).0 - 0.5).abs() < 1e-15);
        let r = Vector3::new(1.0, 1.0, 0.0);
        assert!(
            (penalty(PenaltyKind::WelschLeclerc, &r).0 - (1.0 - (-1.0f64).exp())).abs() < 1e-15
        );
        assert!((penalty(PenaltyKind::WelschLeclerc, &r).0 - 0.632121).abs() < 1e-6);
        assert_eq!(
            penalty(PenaltyKind::L1, &Vector3::new(-1.0, 2.0, 0.0)).0,
            3.0
        );
        assert_eq!(
            penalty(PenaltyKind::L2, &Vector3::new(-1.0, 2.0, 0.5)).0,
            5.25
        );
        assert_eq!(
            penalty(PenaltyKind::L1, &Vector3::new(-1.0, 0.0, 0.5)).1,
            Vector3::new(-1.0, 0.0, 1.0)
        );
        assert_eq!(PenaltyKind::default(), PenaltyKind::GemanMcClure);
    }

    #[test]
    fn penalty_gradients_match_finite_differences() {
        let r = Vector3::new(0.7, -1.3, 0.4);
        for k in PenaltyKind::ALL {
            let (_, g) = penalty(k, &r);
            for c in 0..3 {
                let h = 1e-6;
                let mut a = r;
                let mut b = r;
                a[c] += h;
                b[c] -= h;
                let fd = (penalty(k, &a).0 - penalty(k, &b).0) / (2.0 * h);
                assert!((fd - g[c]).abs() < 1e-8, "{k:?} component {c}");
            }
        }
    }

    #[test]
    fn robust_penalties_are_bounded() {
        let far = Vector3::new(1e3, -2e3, 5e2);
        assert!(penalty(PenaltyKind::GemanMcClure, &far).0 <= 1.0);
        assert!(penalty(PenaltyKind::WelschLeclerc, &far).0 <= 1.0);
    }

    #[test]
    fn warp_examples() {
        let c = cloud(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let zero = vec![Vector3::zeros(); 2];
        assert_eq!(warp(&c, &zero, WarpDirection::Forward).unwrap(), c);
        let f = vec![Vector3::new(0.5, -1.0, 0.0), Vector3::new(2.0, 0.0, 1.0)];
        let back = warp(&c, &f, WarpDirection::Backward).unwrap();
        assert_eq!(back.points()[0], Point3::new(0.5, 3.0, 3.0));
        let fwd = warp(&c, &f, WarpDirection::Forward).unwrap();
        assert_eq!(warp(&fwd, &f, WarpDirection::Backward).unwrap(), c);
        assert!(matches!(
            warp(&c, &f[..1], WarpDirection::Forward),
            Err(LossError::CountMismatch { .. })
        ));
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 2.0, 0.5]]);
        assert_eq!(chamfer_l2(&a, &a).unwrap().value, 0.0);
        let r = chamfer_l2(&cloud(&[[0.0, 0.0, 0.0]]), &cloud(&[[1.0, 0.0, 0.0]])).unwrap();
        assert_eq!(r.value, 2.0);
        // d/dx of (x-1)^2 + (1-x)^2 at 0
        assert_eq!(r.grad[0], Vector2::new(-4.0, 0.0));
        assert_eq!(
            chamfer_l2(&PointCloud::empty(), &a),
            Err(LossError::EmptySet("warped"))
        );
        assert_eq!(
            chamfer_l2(&a, &PointCloud::empty()),
            Err(LossError::EmptySet("target"))
        );
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let a = random_cloud(&mut rng, 50, 3.0);
            let b = random_cloud(&mut rng, 50, 3.0);
            let fwd: f64 = a
                .points()
                .iter()
                .map(|p| brute_min(p, b.points(), PenaltyKind::L2))
                .sum::<f64>()
                / 50.0;
            let rev: f64 = b
                .points()
                .iter()
                .map(|p| brute_min(p, a.points(), PenaltyKind::L2))
                .sum::<f64>()
                / 50.0;
            assert!((chamfer_l2(&a, &b).unwrap().value - (fwd + rev)).abs() < 1e-10);
        }
    }

    #[test]
    fn weighted_reduces_to_chamfer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_cloud(&mut rng, 40, 2.0);
        let b = random_cloud(&mut rng, 55, 2.0);
        let c = chamfer_l2(&a, &b).unwrap();
        let w = weighted_robust_chamfer(&a, &b, &[0.3; 40], &[0.3; 55], PenaltyKind::L2).unwrap();
        assert!((c.value - w.value).abs() < 1e-12);
        for (x, y) in c.grad.iter().zip(&w.grad) {
            assert!((x - y).norm() < 1e-12);
        }
        for k in PenaltyKind::ALL {
            assert_eq!(
                weighted_robust_chamfer(&a, &a, &[1.0; 40], &[1.0; 40], k)
                    .unwrap()
                    .value,
                0.0
            );
        }
    }

    #[test]
    fn zero_weight_outlier_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_cloud(&mut rng, 30, 2.0);
        let b = random_cloud(&mut rng, 30, 2.0);
        let mut with_outlier: Vec<[f64; 3]> = b.points().iter().map(|p| [p.x, p.y, p.z]).collect();
        with_outlier.push([50.0, 50.0, 0.0]);
        let mut wt: Vec<f64> = (0..30).map(|i| 0.2 + 0.02 * i as f64).collect();
        let ws: Vec<f64> = (0..30).map(|i| 1.0 - 0.01 * i as f64).collect();
        for k in PenaltyKind::ALL {
            let base = weighted_robust_chamfer(&a, &b, &ws, &wt, k).unwrap();
            wt.push(0.0);
            let out = weighted_robust_chamfer(&a, &cloud(&with_outlier), &ws, &wt, k).unwrap();
            wt.pop();
            assert!((base.value - out.value).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_weights_rejected() {
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(
            weighted_robust_chamfer(&a, &a, &[0.0, 0.0], &[1.0, 1.0], PenaltyKind::GemanMcClure),
            Err(LossError::DegenerateWeights {
                which: "source",
                ..
            })
        ));
        assert!(matches!(
            weighted_robust_chamfer(
                &a,
                &a,
                &[1.0, 1.0],
                &[1e-12, 0.0],
                PenaltyKind::GemanMcClure
            ),
            Err(LossError::DegenerateWeights {
                which: "target",
                ..
            })
        ));
    }

    #[test]
    fn gm_outlier_influence_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_cloud(&mut rng, 25, 1.0);
        let b = random_cloud(&mut rng, 25, 1.0);
        let mut far: Vec<[f64; 3]> = b.points().iter().map(|p| [p.x, p.y, p.z]).collect();
        far.push([1e4, 0.0, 0.0]);
        let base =
            weighted_robust_chamfer(&a, &b, &[1.0; 25], &[1.0; 25], PenaltyKind::GemanMcClure)
                .unwrap();
        let out = weighted_robust_chamfer(
            &a,
            &cloud(&far),
            &[1.0; 25],
            &[1.0; 26],
            PenaltyKind::GemanMcClure,
        )
        .unwrap();
        // base / 25 rescaled to 26 weights, plus at most 1/26 from the outlier
        assert!((out.value - base.value).abs() <= 1.0 / 26.0 + 1e-12);
    }

    #[test]
    fn pseudo_label_examples() {
        let cur = cloud(&[[0.0, 0.0, 0.0]]);
        let triple = SyncedTriple::new(
            cloud(&[[-3.0, 0.0, 0.0]]),
            cur,
            cloud(&[[1.0, 0.0, 0.0]]),
            0.5,
        )
        .unwrap();
        let (yf, yb) = pseudo_labels(&triple, &[Vector3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(yf[0], Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(yb[0], Vector3::new(-3.0, 0.0, 0.0));

        let s = cloud(&[[0.0, 0.0, 0.0], [2.0, 1.0, 0.0], [-1.0, 4.0, 1.0]]);
        let stat = SyncedTriple::new(s.clone(), s.clone(), s, 0.5).unwrap();
        let (yf, yb) = pseudo_labels(&stat, &[Vector3::zeros(); 3]).unwrap();
        assert!(yf.iter().chain(&yb).all(|y| *y == Vector3::zeros()));

        let empty = SyncedTriple::new(
            PointCloud::empty(),
            cloud(&[[0.0; 3]]),
            cloud(&[[0.0; 3]]),
            0.5,
        )
        .unwrap();
        assert_eq!(
            pseudo_labels(&empty, &[Vector3::zeros()]),
            Err(LossError::EmptySet("past"))
        );
    }

    #[test]
    fn pseudo_labels_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let triple = SyncedTriple::new(
            random_cloud(&mut rng, 60, 3.0),
            random_cloud(&mut rng, 40, 3.0),
            random_cloud(&mut rng, 70, 3.0),
            0.5,
        )
        .unwrap();
        let motion: Vec<Vector3<f64>> = (0..40)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    0.0,
                )
            })
            .collect();
        let (yf, yb) = pseudo_labels(&triple, &motion).unwrap();
        let argmin = |q: Point3, set: &[Point3]| {
            let mut best = (f64::INFINITY, 0);
            for (j, s) in set.iter().enumerate() {
                let d = (q - s).norm();
                if d < best.0 {
                    best = (d, j);
                }
            }
            set[best.1]
        };
        for (i, p) in triple.current.points().iter().enumerate() {
            assert_eq!(yf[i], argmin(p + motion[i], triple.future.points()) - p);
            assert_eq!(yb[i], argmin(p - motion[i], triple.past.points()) - p);
        }
    }

    #[test]
    fn confidence_examples() {
        let yf = vec![
            Vector3::new(1.0, 2.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(5.0, 0.0, 0.0),
        ];
        let yb = vec![
            Vector3::new(-1.0, -2.0, 0.0),
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 0.0),
        ];
        let w = confidence_current(&yf, &yb, 0.5).unwrap();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((w[1] - 0.367879).abs() < 1e-6);
        assert!(w[2] < w[1] && w[2] > 0.0);
        assert!(confidence_current(&yf, &yb, 0.0).is_err());
    }

    #[test]
    fn propagation_examples() {
        let target = cloud(&[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [9.0, 9.0, 9.0]]);
        let single = cloud(&[[1.0, 1.0, 1.0]]);
        assert_eq!(
            propagate_confidence(&target, &single, &[0.25]).unwrap(),
            vec![0.25; 3]
        );
        let two = cloud(&[[0.0, 0.0, 0.0], [6.0, 0.0, 0.0]]);
        assert_eq!(
            propagate_confidence(&target, &two, &[1.0, 1.0]).unwrap(),
            vec![1.0; 3]
        );
        assert_eq!(
            propagate_confidence(&target, &two, &[0.1, 0.9]).unwrap(),
            vec![0.1, 0.9, 0.9]
        );
        assert_eq!(
            propagate_confidence(&target, &PointCloud::empty(), &[]),
            Err(LossError::EmptySet("warped current"))
        );
    }

    #[test]
    fn rccd_static_copies_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_cloud(&mut rng, 80, 4.0);
        let t = SyncedTriple::new(c.clone(), c.clone(), c, 0.5).unwrap();
        let r = rccd(&t, &vec![Vector3::zeros(); 80], &LossConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn rccd_symmetry_under_time_reversal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = SyncedTriple::new(
            random_cloud(&mut rng, 50, 3.0),
            random_cloud(&mut rng, 45, 3.0),
            random_cloud(&mut rng, 55, 3.0),
            0.5,
        )
        .unwrap();
        let motion: Vec<Vector3<f64>> = (0..45)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    0.0,
                )
            })
            .collect();
        let neg: Vec<Vector3<f64>> = motion.iter().map(|m| -m).collect();
        let cfg = LossConfig::default();
        let a = rccd(&t, &motion, &cfg).unwrap().value;
        let b = rccd(&t.reversed(), &neg, &cfg).unwrap().value;
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn rccd_prefers_true_motion() {
        // a rigid cluster translating by 1m per step along x
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = random_cloud(&mut rng, 60, 0.6);
        let shift = |dx: f64| {
            let pts: Vec<[f64; 3]> = base.points().iter().map(|p| [p.x + dx, p.y, p.z]).collect();
            cloud(&pts)
        };
        let t = SyncedTriple::new(shift(-1.0), shift(0.0), shift(1.0), 0.5).unwrap();
        let cfg = LossConfig::default();
        let at_truth = rccd(&t, &vec![Vector3::new(1.0, 0.0, 0.0); 60], &cfg)
            .unwrap()
            .value;
        let at_zero = rccd(&t, &vec![Vector3::zeros(); 60], &cfg).unwrap().value;
        assert!(at_truth <= at_zero);
        assert!(at_truth < 1e-12);
    }

    #[test]
    fn rccd_config_checks() {
        let c = cloud(&[[0.0; 3]]);
        let t = SyncedTriple::new(c.clone(), c.clone(), c, 0.5).unwrap();
        let cfg = LossConfig {
            use_past: false,
            ..Default::default()
        };
        assert!(matches!(
            rccd(&t, &[Vector3::zeros()], &cfg),
            Err(LossError::InvalidConfig(_))
        ));
        let cfg = LossConfig {
            theta_sq: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            rccd(&t, &[Vector3::zeros()], &cfg),
            Err(LossError::InvalidConfig(_))
        ));
    }

    #[test]
    fn smoothness_examples() {
        let pts = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let nb = vec![vec![1], vec![0]];
        let r = smoothness(&pts, &[Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()], &nb).unwrap();
        assert_eq!(r.value, 1.0);
        let c = smoothness(&pts, &[Vector3::new(2.0, 3.0, 0.0); 2], &nb).unwrap();
        assert_eq!(c.value, 0.0);
        let isolated = smoothness(
            &pts,
            &[Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()],
            &[vec![], vec![]],
        )
        .unwrap();
        assert_eq!(isolated.value, 0.0);
        assert!(matches!(
            smoothness(&pts, &[Vector3::zeros(); 2], &[vec![5], vec![]]),
            Err(LossError::BadNeighborhood { .. })
        ));
    }

    #[test]
    fn static_loss_examples() {
        assert_eq!(static_loss(&[Vector3::zeros(); 4]).value, 0.0);
        assert_eq!(static_loss(&[Vector3::new(3.0, 4.0, 0.0)]).value, 7.0);
        assert_eq!(static_loss(&[]).value, 0.0);
        let m = [Vector3::new(0.3, -1.0, 0.0), Vector3::new(-2.0, 0.5, 0.0)];
        let scaled: Vec<Vector3<f64>> = m.iter().map(|v| v * 2.5).collect();
        assert!((static_loss(&scaled).value - 2.5 * static_loss(&m).value).abs() < 1e-12);
    }

    #[test]
    fn cls_examples() {
        let r = weak_cls_loss(&[[0.0, 0.0]], &[Category::Foreground], 1.0).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((r.value - 0.693147).abs() < 1e-6);
        let confident = weak_cls_loss(
            &[[40.0, -40.0], [-40.0, 40.0]],
            &[Category::Foreground, Category::Background],
            0.005,
        )
        .unwrap();
        assert!(confident.value < 1e-30);
        let with_unlabeled = weak_cls_loss(
            &[[0.0, 0.0], [9.0, -3.0], [1.0, 2.0]],
            &[
                Category::Foreground,
                Category::Unlabeled,
                Category::Unlabeled,
            ],
            0.005,
        )
        .unwrap();
        assert_eq!(with_unlabeled.value, r.value);
        assert_eq!(with_unlabeled.grad[1], Vector2::zeros());
        assert_eq!(
            weak_cls_loss(&[[0.0, 0.0]], &[Category::Unlabeled], 1.0),
            Err(LossError::DegenerateLabels)
        );
        // overflow-safe
        let huge = weak_cls_loss(&[[1000.0, -1000.0]], &[Category::Background], 1.0).unwrap();
        assert_eq!(huge.value, 2000.0);
        assert!(huge.grad[0].iter().all(|g| g.is_finite()));
    }

    #[test]
    fn bg_weight_scales_background_terms() {
        let full = weak_cls_loss(&[[0.0, 0.0]], &[Category::Background], 1.0).unwrap();
        let down = weak_cls_loss(&[[0.0, 0.0]], &[Category::Background], 0.005).unwrap();
        assert!((down.value - 0.005 * full.value).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        let mot = LossReport {
            value: 0.1,
            grad: vec![Vector2::new(1.0, 0.0)],
        };
        let cls = LossReport {
            value: 0.2,
            grad: vec![Vector2::new(0.0, 1.0)],
        };
        let t = total_weak_loss(SupervisionMode::Fb, &mot, Some(&cls), &cfg);
        assert!((t.value - 0.7).abs() < 1e-15);
        assert_eq!(t.motion_grad[0], Vector2::new(5.0, 0.0));
        let gated = LossConfig {
            omega: false,
            ..cfg
        };
        let t = total_weak_loss(SupervisionMode::Ng, &mot, Some(&cls), &gated);
        assert!((t.value - 0.5).abs() < 1e-15);
        assert_eq!(t.score_grad[0], Vector2::zeros());
        let zero = LossReport {
            value: 0.0,
            grad: vec![],
        };
        assert_eq!(
            total_weak_loss(SupervisionMode::Fb, &zero, Some(&zero), &cfg).value,
            0.0
        );
    }

    #[test]
    fn composite_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = SyncedTriple::new(
            random_cloud(&mut rng, 40, 3.0),
            random_cloud(&mut rng, 30, 3.0),
            random_cloud(&mut rng, 45, 3.0),
            0.5,
        )
        .unwrap();
        let mut rand_motion = |n: usize| -> Vec<Vector3<f64>> {
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        0.0,
                    )
                })
                .collect()
        };
        let dm = rand_motion(30);
        let sm = rand_motion(12);
        let cfg = LossConfig::default();
        let nb = build_neighborhoods(t.current.points(), cfg.smooth_radius, cfg.smooth_k);
        let total = composite_motion_loss(SupervisionMode::SelfSupervised, &t, &dm, &sm, &cfg, &nb)
            .unwrap();
        let parts = rccd(&t, &dm, &cfg).unwrap().value
            + smoothness(&t.current, &dm, &nb).unwrap().value
            + cfg.phi_g * static_loss(&sm).value;
        assert!((total.value - parts).abs() < 1e-12);
        assert_eq!(total.grad.len(), 42);

        let no_static =
            composite_motion_loss(SupervisionMode::Fb, &t, &dm, &[], &cfg, &nb).unwrap();
        let rs =
            rccd(&t, &dm, &cfg).unwrap().value + smoothness(&t.current, &dm, &nb).unwrap().value;
        assert!((no_static.value - rs).abs() < 1e-12);
        let phi0 = LossConfig { phi_bg: 0.0, ..cfg };
        let dropped = composite_motion_loss(SupervisionMode::Fb, &t, &dm, &sm, &phi0, &nb).unwrap();
        assert!((dropped.value - rs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_weights_in_range(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = SyncedTriple::new(
                random_cloud(&mut rng, 20, 2.0),
                random_cloud(&mut rng, 15, 2.0),
                random_cloud(&mut rng, 25, 2.0),
                0.5,
            ).unwrap();
            let motion: Vec<Vector3<f64>> = (0..15)
                .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0))
                .collect();
            for k in PenaltyKind::ALL {
                let cfg = LossConfig { penalty: k, ..Default::default() };
                let out = RccdEvaluator::new(&t, &cfg).unwrap().evaluate(&motion).unwrap();
                prop_assert!(out.value >= 0.0);
                let c = &out.confidence;
                for w in c.current.iter().chain(&c.past).chain(&c.future) {
                    prop_assert!(*w > 0.0 && *w <= 1.0);
                }
            }
            let (yf, yb) = pseudo_labels(&t, &motion).unwrap();
            let w = confidence_current(&yf, &yb, 0.5).unwrap();
            for ((f, b), w) in yf.iter().zip(&yb).zip(&w) {
                if (f + b).norm_squared() == 0.0 {
                    prop_assert_eq!(*w, 1.0);
                }
            }
        }

        #[test]
        fn rccd_gradient_matches_finite_differences(seed in 0u64..200, k in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = SyncedTriple::new(
                random_cloud(&mut rng, 25, 2.0),
                random_cloud(&mut rng, 20, 2.0),
                random_cloud(&mut rng, 30, 2.0),
                0.5,
            ).unwrap();
            let motion: Vec<Vector3<f64>> = (0..20)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0))
                .collect();
            let cfg = LossConfig { penalty: PenaltyKind::ALL[k], ..Default::default() };
            let nb = build_neighborhoods(t.current.points(), cfg.smooth_radius, cfg.smooth_k);
            let eval = |m: &[Vector3<f64>]| {
                rccd(&t, m, &cfg).unwrap().value + smoothness(&t.current, m, &nb).unwrap().value
            };
            let g = composite_motion_loss(SupervisionMode::Fb, &t, &motion, &[], &cfg, &nb).unwrap().grad;
            let h = 1e-7;
            for i in [0usize, 7, 19] {
                for c in 0..2 {
                    let mut a = motion.clone();
                    let mut b = motion.clone();
                    a[i][c] += h;
                    b[i][c] -= h;
                    let fd = (eval(&a) - eval(&b)) / (2.0 * h);
                    let an = g[i][c];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    prop_assert!(rel < 1e-4 || (fd - an).abs() < 1e-7, "i={} c={} fd={} an={}", i, c, fd, an);
                }
            }
        }
    }
}
