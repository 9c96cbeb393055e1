//! Speed-grouped motion errors and FG/BG cell accuracies over nonempty cells.

use nalgebra::Vector2;
use thiserror::Error;

use crate::bev::{voxelize, BevError, CategoryMap, GridConfig, MotionField};
use crate::geometry::{Category, PointCloud};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("expected a field with horizon 0.5 s, got {0} s")]
    WrongHorizon(f64),
    #[error("grid mismatch: prediction is {ph}x{pw}, truth is {th}x{tw}")]
    GridMismatch {
        ph: usize,
        pw: usize,
        th: usize,
        tw: usize,
    },
    #[error("cloud lacks {0} needed for evaluation")]
    MissingTruth(&'static str),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error(transparent)]
    Bev(#[from] BevError),
}

/// Doubles every displacement: 0.5 s horizon to 1 s.
pub fn extrapolate_to_1s(field: &MotionField) -> Result<MotionField, EvalError> {
    if (field.horizon() - 0.5).abs() > 1e-9 {
        return Err(EvalError::WrongHorizon(field.horizon()));
    }
    let cells = field.cells().iter().map(|v| v * 2.0).collect();
    Ok(MotionField::from_cells(
        field.height(),
        field.width(),
        cells,
        1.0,
    )?)
}

/// Per-cell ground truth of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTruth {
    pub h: usize,
    pub w: usize,
    pub nonempty: Vec<bool>,
    /// FG if any point of the cell is FG, BG otherwise; unlabeled when empty.
    pub category: Vec<Category>,
    /// Mean 1 s displacement of the cell's FG points; zero for BG cells.
    pub displacement_1s: Vec<Vector2<f64>>,
}

impl CellTruth {
    pub fn nonempty_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nonempty.len()).filter(|&c| self.nonempty[c])
    }
}

/// Builds cell truth from a fully labeled cloud carrying 1 s displacements.
pub fn cell_truth(cloud: &PointCloud, grid: &GridConfig) -> Result<CellTruth, EvalError> {
    let labels = cloud.labels().ok_or(EvalError::MissingTruth("labels"))?;
    let gt = cloud
        .gt_motion()
        .ok_or(EvalError::MissingTruth("ground-truth motion"))?;
    let (_, assign) = voxelize(cloud, grid)?;
    let dims = assign.dims();
    let mut nonempty = vec![false; dims.cells()];
    let mut category = vec![Category::Unlabeled; dims.cells()];
    let mut displacement_1s = vec![Vector2::zeros(); dims.cells()];
    for c in assign.nonempty_cells() {
        nonempty[c] = true;
        let fg: Vec<usize> = assign
            .points_in(c)
            .iter()
            .copied()
            .filter(|&p| labels[p] == Category::Foreground)
            .collect();
        if fg.is_empty() {
            category[c] = Category::Background;
        } else {
            category[c] = Category::Foreground;
            let sum: Vector2<f64> = fg.iter().map(|&p| gt[p].xy()).sum();
            displacement_1s[c] = sum / fg.len() as f64;
        }
    }
    Ok(CellTruth {
        h: dims.h,
        w: dims.w,
        nonempty,
        category,
        displacement_1s,
    })
}

/// Speed boundaries in m/s: static if `speed <= static_max`, fast if
/// `speed >= fast_min`, slow in between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedThresholds {
    pub static_max: f64,
    pub fast_min: f64,
}

impl Default for SpeedThresholds {
    fn default() -> Self {
        Self {
            static_max: 0.2,
            fast_min: 5.0,
        }
    }
}

impl SpeedThresholds {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.static_max >= 0.0 && self.fast_min > self.static_max && self.fast_min.is_finite())
        {
            return Err(EvalError::InvalidThresholds(format!(
                "need 0 <= static_max < fast_min, got {} and {}",
                self.static_max, self.fast_min
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpeedGroup {
    Static,
    Slow,
    Fast,
}

impl SpeedGroup {
    pub fn of(speed: f64, thr: &SpeedThresholds) -> Self {
        if speed <= thr.static_max {
            SpeedGroup::Static
        } else if speed >= thr.fast_min {
            SpeedGroup::Fast
        } else {
            SpeedGroup::Slow
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SpeedGroup::Static => "static",
            SpeedGroup::Slow => "slow",
            SpeedGroup::Fast => "fast",
        }
    }
}

/// Mean and median are `None` for an empty group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

impl GroupStats {
    pub fn from_errors(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self {
                count: 0,
                mean: None,
                median: None,
            };
        }
        let mut s = errors.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        Self {
            count: n,
            mean: Some(errors.iter().sum::<f64>() / n as f64),
            median: Some(median),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionMetrics {
    pub static_: GroupStats,
    pub slow: GroupStats,
    pub fast: GroupStats,
}

impl MotionMetrics {
    pub fn group(&self, g: SpeedGroup) -> &GroupStats {
        match g {
            SpeedGroup::Static => &self.static_,
            SpeedGroup::Slow => &self.slow,
            SpeedGroup::Fast => &self.fast,
        }
    }
}

fn check_grid(ph: usize, pw: usize, t: &CellTruth) -> Result<(), EvalError> {
    if (ph, pw) != (t.h, t.w) {
        return Err(EvalError::GridMismatch {
            ph,
            pw,
            th: t.h,
            tw: t.w,
        });
    }
    Ok(())
}

/// L2 error of every nonempty cell's 1 s prediction, grouped by the speed of
/// its ground-truth displacement.
pub fn motion_errors(
    pred: &MotionField,
    truth: &CellTruth,
    thr: &SpeedThresholds,
) -> Result<MotionMetrics, EvalError> {
    thr.validate()?;
    check_grid(pred.height(), pred.width(), truth)?;
    if (pred.horizon() - 1.0).abs() > 1e-9 {
        return Err(EvalError::WrongHorizon(pred.horizon()));
    }
    let mut groups: [Vec<f64>; 3] = Default::default();
    for c in truth.nonempty_cells() {
        let gt = truth.displacement_1s[c];
        let err = (pred.cells()[c] - gt).norm();
        let g = match SpeedGroup::of(gt.norm(), thr) {
            SpeedGroup::Static => 0,
            SpeedGroup::Slow => 1,
            SpeedGroup::Fast => 2,
        };
        groups[g].push(err);
    }
    Ok(MotionMetrics {
        static_: GroupStats::from_errors(&groups[0]),
        slow: GroupStats::from_errors(&groups[1]),
        fast: GroupStats::from_errors(&groups[2]),
    })
}

/// Accuracies over nonempty cells; a class with no truth cells is `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub bg: Option<f64>,
    pub fg: Option<f64>,
    pub overall: Option<f64>,
    pub bg_cells: usize,
    pub fg_cells: usize,
}

pub fn seg_accuracy(pred: &CategoryMap, truth: &CellTruth) -> Result<SegMetrics, EvalError> {
    check_grid(pred.height(), pred.width(), truth)?;
    let (mut bg_right, mut bg_n, mut fg_right, mut fg_n) = (0usize, 0usize, 0usize, 0usize);
    for c in truth.nonempty_cells() {
        let p = pred.argmax(c);
        match truth.category[c] {
            Category::Foreground => {
                fg_n += 1;
                fg_right += usize::from(p == Category::Foreground);
            }
            _ => {
                bg_n += 1;
                bg_right += usize::from(p == Category::Background);
            }
        }
    }
    let frac = |a: usize, n: usize| (n > 0).then(|| a as f64 / n as f64);
    Ok(SegMetrics {
        bg: frac(bg_right, bg_n),
        fg: frac(fg_right, fg_n),
        overall: frac(bg_right + fg_right, bg_n + fg_n),
        bg_cells: bg_n,
        fg_cells: fg_n,
    })
}
