//! Per-sample fitting of a BEV motion field by Adam on the per-cell
//! parameters, plus finite-difference gradient checking and BG zeroing.

use std::time::{Duration, Instant};

use nalgebra::{Vector2, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bev::{
    lift_categories_to_points, lift_motion_to_points, scatter_to_cells, softmax2, voxelize,
    BevError, CategoryMap, CellAssignment, GridConfig, MotionField,
};
use crate::geometry::{Category, PointCloud, SyncedTriple};
use crate::ground::{fit_ground_plane, segment_by_plane, GroundError, RansacConfig};
use crate::losses::{
    build_neighborhoods, total_weak_loss, weak_cls_loss, LossConfig, LossError, LossReport,
    MotionLoss, SupervisionMode,
};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("nothing to supervise: {0}")]
    NothingToSupervise(&'static str),
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
    #[error("supervision index {index} out of range for {what} cloud of {len} points")]
    BadIndex {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error(transparent)]
    Ground(#[from] GroundError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub mode: SupervisionMode,
    pub steps: usize,
    pub step_size: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    /// Number of coarser parameter levels above the per-cell one.
    pub coarse_levels: usize,
    /// Step scale of each level relative to the next coarser one.
    pub level_gain: f64,
    /// Cosine annealing floor: the step size falls from `step_size` to
    /// `step_size * final_step_fraction` over the run. 1 keeps it constant.
    pub final_step_fraction: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mode: SupervisionMode::SelfSupervised,
            steps: 300,
            step_size: 0.05,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            coarse_levels: 5,
            level_gain: 0.5,
            final_step_fraction: 0.02,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.steps < 1 {
            return Err(FitError::InvalidConfig("steps must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(FitError::InvalidConfig(format!(
                "step_size {} must be > 0",
                self.step_size
            )));
        }
        for (k, v) in [("b1", self.b1), ("b2", self.b2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(FitError::InvalidConfig(format!(
                    "{k} {v} must be in (0, 1)"
                )));
            }
        }
        if !(self.final_step_fraction > 0.0 && self.final_step_fraction <= 1.0) {
            return Err(FitError::InvalidConfig(format!(
                "final_step_fraction {} must be in (0, 1]",
                self.final_step_fraction
            )));
        }
        if !(self.level_gain > 0.0 && self.level_gain <= 1.0) {
            return Err(FitError::InvalidConfig(format!(
                "level_gain {} must be in (0, 1]",
                self.level_gain
            )));
        }
        if !(self.eps > 0.0) {
            return Err(FitError::InvalidConfig(format!(
                "eps {} must be > 0",
                self.eps
            )));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Index partitions of the triple's clouds. Dynamic sets feed the Chamfer and
/// smoothness terms; static current points feed the static term. Optional
/// weak labels on current points drive the auxiliary FG/BG scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Supervision {
    pub past_dynamic: Vec<usize>,
    pub current_dynamic: Vec<usize>,
    pub future_dynamic: Vec<usize>,
    pub current_static: Vec<usize>,
    pub current_labels: Option<Vec<Category>>,
}

impl Supervision {
    /// Every point is dynamic.
    pub fn all_dynamic(triple: &SyncedTriple) -> Self {
        Self {
            past_dynamic: (0..triple.past.len()).collect(),
            current_dynamic: (0..triple.current.len()).collect(),
            future_dynamic: (0..triple.future.len()).collect(),
            current_static: Vec::new(),
            current_labels: None,
        }
    }

    /// Non-ground points are dynamic and current ground points static; one
    /// plane is fitted per cloud.
    pub fn from_ground(triple: &SyncedTriple, ransac: &RansacConfig) -> Result<Self, FitError> {
        let split = |c: &PointCloud| -> Result<(Vec<usize>, Vec<usize>), FitError> {
            let plane = fit_ground_plane(c, ransac)?;
            Ok(segment_by_plane(c, &plane, ransac.d_thresh))
        };
        let (_, past) = split(&triple.past)?;
        let (ground, current) = split(&triple.current)?;
        let (_, future) = split(&triple.future)?;
        Ok(Self {
            past_dynamic: past,
            current_dynamic: current,
            future_dynamic: future,
            current_static: ground,
            current_labels: None,
        })
    }

    /// FG points are dynamic and current BG points static.
    pub fn from_categories(past: &[Category], current: &[Category], future: &[Category]) -> Self {
        let pick = |c: &[Category], want: Category| -> Vec<usize> {
            c.iter()
                .enumerate()
                .filter(|(_, x)| **x == want)
                .map(|(i, _)| i)
                .collect()
        };
        Self {
            past_dynamic: pick(past, Category::Foreground),
            current_dynamic: pick(current, Category::Foreground),
            future_dynamic: pick(future, Category::Foreground),
            current_static: pick(current, Category::Background),
            current_labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<Category>) -> Self {
        self.current_labels = Some(labels);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    /// Objective at the iterate evaluated in each step.
    pub losses: Vec<f64>,
    pub best_step: usize,
    pub wall_clock: Duration,
}

impl FitTrace {
    pub fn best_loss(&self) -> f64 {
        self.losses[self.best_step]
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Best iterate; displacement over the triple's `dt`.
    pub field: MotionField,
    /// Auxiliary FG/BG scores when weak labels were supplied.
    pub categories: Option<CategoryMap>,
    pub trace: FitTrace,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], free: &[bool], cfg: &FitConfig, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - cfg.b1.powi(self.t);
        let c2 = 1.0 - cfg.b2.powi(self.t);
        for k in 0..params.len() {
            if !free[k] {
                continue;
            }
            let g = grad[k];
            self.m[k] = cfg.b1 * self.m[k] + (1.0 - cfg.b1) * g;
            self.v[k] = cfg.b2 * self.v[k] + (1.0 - cfg.b2) * g * g;
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + cfg.eps);
        }
    }
}

/// Multi-resolution parameterization of the field. A cell holding dynamic
/// points moves by the sum of its own parameters and those of every coarser
/// block (2, 4, ... cells on a side) containing it, level `l` scaled by
/// `gain^(top - l)`. Cells holding only static points keep a single per-cell
/// parameter; cells without supervised points stay zero.
struct Pyramid {
    w: usize,
    /// (block side in cells, blocks per row, parameter offset)
    levels: Vec<(usize, usize, usize)>,
    gain: f64,
    dynamic_cell: Vec<bool>,
    free_cell: Vec<bool>,
    len: usize,
}

impl Pyramid {
    fn new(
        h: usize,
        w: usize,
        coarse_levels: usize,
        gain: f64,
        dynamic_cell: Vec<bool>,
        free_cell: Vec<bool>,
    ) -> Self {
        let mut levels = Vec::with_capacity(coarse_levels + 1);
        let mut len = 0;
        for l in 0..=coarse_levels {
            let side = 1usize << l;
            let (hb, wb) = (h.div_ceil(side), w.div_ceil(side));
            levels.push((side, wb, len));
            len += hb * wb * 2;
        }
        Self {
            w,
            levels,
            gain,
            dynamic_cell,
            free_cell,
            len,
        }
    }

    fn len(&self) -> usize {
        self.len
    }

    /// Parameter slots of cell `c` with their gains.
    fn slots(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let top = self.levels.len() - 1;
        let (i, j) = (c / self.w, c % self.w);
        let n = match (self.free_cell[c], self.dynamic_cell[c]) {
            (false, _) => 0,
            (true, false) => 1,
            (true, true) => self.levels.len(),
        };
        self.levels[..n]
            .iter()
            .enumerate()
            .map(move |(l, &(side, wb, offset))| {
                let gain = if n == 1 {
                    1.0
                } else {
                    self.gain.powi((top - l) as i32)
                };
                (offset + 2 * ((i / side) * wb + j / side), gain)
            })
    }

    fn free_params(&self) -> Vec<bool> {
        let mut free = vec![false; self.len];
        for c in 0..self.free_cell.len() {
            for (k, _) in self.slots(c) {
                free[k] = true;
                free[k + 1] = true;
            }
        }
        free
    }

    fn compose(&self, params: &[f64], field: &mut MotionField) {
        for (c, v) in field.cells_mut().iter_mut().enumerate() {
            *v = Vector2::zeros();
            for (k, gain) in self.slots(c) {
                *v += gain * Vector2::new(params[k], params[k + 1]);
            }
        }
    }

    fn pull_back(&self, cell_grad: &[Vector2<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (c, g) in cell_grad.iter().enumerate() {
            for (k, gain) in self.slots(c) {
                out[k] += gain * g.x;
                out[k + 1] += gain * g.y;
            }
        }
        out
    }
}

fn step_size_at(cfg: &FitConfig, step: usize) -> f64 {
    if cfg.steps < 2 {
        return cfg.step_size;
    }
    let progress = step as f64 / (cfg.steps - 1) as f64;
    let f = cfg.final_step_fraction;
    cfg.step_size * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn check_indices(what: &'static str, idx: &[usize], len: usize) -> Result<(), FitError> {
    match idx.iter().find(|&&i| i >= len) {
        Some(&index) => Err(FitError::BadIndex { what, index, len }),
        None => Ok(()),
    }
}

fn in_grid(grid: &GridConfig, cloud: &PointCloud, idx: &[usize]) -> Vec<usize> {
    idx.iter()
        .copied()
        .filter(|&i| grid.voxel_of(&cloud.points()[i]).is_some())
        .collect()
}

fn flatten(v: &[Vector2<f64>]) -> Vec<f64> {
    v.iter().flat_map(|g| [g.x, g.y]).collect()
}

/// Fits the per-cell horizontal displacement over `dt` by minimizing the
/// composite motion loss (plus the weighted classification loss on the
/// auxiliary scores when labels are supplied). Only cells holding supervised
/// current points are free; every other cell stays exactly zero.
pub fn fit_motion_field(
    triple: &SyncedTriple,
    sup: &Supervision,
    grid: &GridConfig,
    cfg: &FitConfig,
) -> Result<FitResult, FitError> {
    let start = Instant::now();
    cfg.validate()?;
    grid.validate()?;
    if triple.current.is_empty() {
        return Err(FitError::NothingToSupervise("current cloud is empty"));
    }
    check_indices("past", &sup.past_dynamic, triple.past.len())?;
    check_indices("current", &sup.current_dynamic, triple.current.len())?;
    check_indices("current", &sup.current_static, triple.current.len())?;
    check_indices("future", &sup.future_dynamic, triple.future.len())?;

    let cur_dyn = in_grid(grid, &triple.current, &sup.current_dynamic);
    let dynamic = SyncedTriple {
        past: triple
            .past
            .select(&in_grid(grid, &triple.past, &sup.past_dynamic)),
        current: triple.current.select(&cur_dyn),
        future: triple
            .future
            .select(&in_grid(grid, &triple.future, &sup.future_dynamic)),
        dt: triple.dt,
    };
    if dynamic.current.is_empty() {
        return Err(FitError::NothingToSupervise(
            "no dynamic current points in the grid",
        ));
    }
    if dynamic.future.is_empty() || (cfg.loss.use_past && dynamic.past.is_empty()) {
        return Err(FitError::NothingToSupervise(
            "no dynamic points in a target frame",
        ));
    }
    let statics = triple
        .current
        .select(&in_grid(grid, &triple.current, &sup.current_static));

    let (_, assign_dyn) = voxelize(&dynamic.current, grid)?;
    let (_, assign_stat) = voxelize(&statics, grid)?;
    let dims = assign_dyn.dims();
    let mut free_cell = vec![false; dims.cells()];
    let mut dynamic_cell = vec![false; dims.cells()];
    for c in assign_dyn.nonempty_cells() {
        dynamic_cell[c] = true;
        free_cell[c] = true;
    }
    for c in assign_stat.nonempty_cells() {
        free_cell[c] = true;
    }
    let pyramid = Pyramid::new(
        dims.h,
        dims.w,
        cfg.coarse_levels,
        cfg.level_gain,
        dynamic_cell,
        free_cell,
    );
    let free = pyramid.free_params();

    let labels = sup.current_labels.as_deref();
    let cls_setup = match labels {
        Some(l) if cfg.mode != SupervisionMode::SelfSupervised => {
            if l.len() != triple.current.len() {
                return Err(FitError::BadIndex {
                    what: "label",
                    index: l.len(),
                    len: triple.current.len(),
                });
            }
            let (_, assign_all) = voxelize(&triple.current, grid)?;
            let labeled: Vec<usize> = (0..l.len())
                .filter(|&i| l[i].is_labeled() && assign_all.cell_of(i).is_some())
                .collect();
            if labeled.is_empty() {
                None
            } else {
                let assign = assign_all.restrict(&labeled);
                let lab: Vec<Category> = labeled.iter().map(|&i| l[i]).collect();
                let mut score_free = vec![false; dims.cells() * 2];
                for c in assign.nonempty_cells() {
                    score_free[2 * c] = true;
                    score_free[2 * c + 1] = true;
                }
                Some((assign, lab, score_free))
            }
        }
        _ => None,
    };

    let neighborhoods = build_neighborhoods(
        dynamic.current.points(),
        cfg.loss.smooth_radius,
        cfg.loss.smooth_k,
    );
    let loss = MotionLoss::new(cfg.mode, &dynamic, &neighborhoods, &cfg.loss)?;

    let mut params = vec![0.0; pyramid.len()];
    let mut scores = vec![0.0; dims.cells() * 2];
    let mut adam = Adam::new(params.len());
    let mut adam_s = Adam::new(scores.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, usize, Vec<f64>, Vec<f64>)> = None;
    let mut field = MotionField::zeros(dims.h, dims.w, triple.dt);
    let mut cell_grad = vec![Vector2::zeros(); dims.cells()];

    for step in 0..cfg.steps {
        pyramid.compose(&params, &mut field);
        let m_dyn = lift_motion_to_points(&field, &assign_dyn, dynamic.current.len())?;
        let m_stat = lift_motion_to_points(&field, &assign_stat, statics.len())?;
        let mot = loss.evaluate(&m_dyn, &m_stat)?.report();

        let cls = match &cls_setup {
            Some((assign, lab, _)) => {
                let map = CategoryMap::from_cells(
                    dims.h,
                    dims.w,
                    scores.chunks(2).map(|s| [s[0], s[1]]).collect(),
                )?;
                let per_point = lift_categories_to_points(&map, assign, lab.len())?;
                Some(weak_cls_loss(&per_point, lab, cfg.loss.alpha_bg)?)
            }
            None => None,
        };
        let total = total_weak_loss(cfg.mode, &mot, cls.as_ref(), &cfg.loss);
        losses.push(total.value);
        if best.as_ref().is_none_or(|b| total.value < b.0) {
            best = Some((total.value, step, params.clone(), scores.clone()));
        }

        let n_dyn = dynamic.current.len();
        cell_grad.iter_mut().for_each(|g| *g = Vector2::zeros());
        scatter_to_cells(&assign_dyn, &total.motion_grad[..n_dyn], &mut cell_grad);
        scatter_to_cells(&assign_stat, &total.motion_grad[n_dyn..], &mut cell_grad);
        let lr = step_size_at(cfg, step);
        adam.step(&mut params, &pyramid.pull_back(&cell_grad), &free, cfg, lr);

        if let Some((assign, _, score_free)) = &cls_setup {
            cell_grad.iter_mut().for_each(|g| *g = Vector2::zeros());
            scatter_to_cells(assign, &total.score_grad, &mut cell_grad);
            adam_s.step(&mut scores, &flatten(&cell_grad), score_free, cfg, lr);
        }
    }

    let (_, best_step, bp, bs) = best.expect("steps >= 1");
    pyramid.compose(&bp, &mut field);
    let categories = match cls_setup {
        Some(_) => {
            let probs = bs.chunks(2).map(|s| softmax2([s[0], s[1]])).collect();
            Some(CategoryMap::from_cells(dims.h, dims.w, probs)?)
        }
        None => None,
    };
    Ok(FitResult {
        field,
        categories,
        trace: FitTrace {
            losses,
            best_step,
            wall_clock: start.elapsed(),
        },
    })
}

/// Largest relative error between an analytic gradient and central finite
/// differences over a random subset of `min(count, n)` components, with
/// relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn gradient_check<F>(loss: F, point: &[f64], step: f64, count: usize, seed: u64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let (_, analytic) = loss(point);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, point.len(), count.min(point.len()));
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for k in picks.iter() {
        x[k] = point[k] + step;
        let up = loss(&x).0;
        x[k] = point[k] - step;
        let down = loss(&x).0;
        x[k] = point[k];
        let fd = (up - down) / (2.0 * step);
        let a = analytic[k];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
    }
    worst
}

/// [`gradient_check`] over the cells of a motion field; `loss` returns the
/// value and per-cell gradient.
pub fn gradient_check_field<F>(
    loss: F,
    point: &MotionField,
    step: f64,
    count: usize,
    seed: u64,
) -> f64
where
    F: Fn(&MotionField) -> (f64, Vec<Vector2<f64>>),
{
    let (h, w, horizon) = (point.height(), point.width(), point.horizon());
    let flat = loss_adapter(&loss, h, w, horizon);
    gradient_check(flat, &flatten(point.cells()), step, count, seed)
}

fn loss_adapter<'a, F>(
    loss: &'a F,
    h: usize,
    w: usize,
    horizon: f64,
) -> impl Fn(&[f64]) -> (f64, Vec<f64>) + 'a
where
    F: Fn(&MotionField) -> (f64, Vec<Vector2<f64>>),
{
    move |x: &[f64]| {
        let cells = x.chunks(2).map(|p| Vector2::new(p[0], p[1])).collect();
        let field = MotionField::from_cells(h, w, cells, horizon).expect("shape preserved");
        let (v, g) = loss(&field);
        (v, flatten(&g))
    }
}

/// Per-cell objective of a fixed motion loss: lifts the field to the dynamic
/// and static points and scatters the gradient back (`U^T`).
pub fn field_objective<'a>(
    loss: &'a MotionLoss<'a>,
    assign_dyn: &'a CellAssignment,
    assign_stat: &'a CellAssignment,
) -> impl Fn(&MotionField) -> Result<(f64, Vec<Vector2<f64>>), FitError> + 'a {
    move |field: &MotionField| {
        let md: Vec<Vector3<f64>> =
            lift_motion_to_points(field, assign_dyn, assign_dyn.n_points())?;
        let ms = lift_motion_to_points(field, assign_stat, assign_stat.n_points())?;
        let r: LossReport = loss.evaluate(&md, &ms)?.report();
        let mut g = vec![Vector2::zeros(); field.cells().len()];
        scatter_to_cells(assign_dyn, &r.grad[..md.len()], &mut g);
        scatter_to_cells(assign_stat, &r.grad[md.len()..], &mut g);
        Ok((r.value, g))
    }
}

/// Sets the motion of every BG-argmax cell to zero.
pub fn zero_background(
    field: &MotionField,
    categories: &CategoryMap,
) -> Result<MotionField, BevError> {
    categories.check_dims(field.height(), field.width())?;
    let mut out = field.clone();
    for (c, v) in out.cells_mut().iter_mut().enumerate() {
        if categories.argmax(c) == Category::Background {
            *v = Vector2::zeros();
        }
    }
    Ok(out)
}
