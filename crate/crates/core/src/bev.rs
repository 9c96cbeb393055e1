//! Bird's-eye-view voxelization, the point/cell assignment, and lifting of
//! per-cell quantities back to points.
//!
//! Grids are indexed row-major with `i` along x and `j` along y; the flat cell
//! index is `i * width + j`. Voxel intervals are half-open, so a point lying
//! exactly on the upper edge of the cropped range is out of range.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{Category, Point3, PointCloud};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BevError {
    #[error("invalid grid config: {0}")]
    InvalidConfig(String),
    #[error("grid mismatch: {what} is {got_h}x{got_w}, expected {h}x{w}")]
    DimensionMismatch {
        what: &'static str,
        h: usize,
        w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("point count mismatch: assignment covers {expected} points, got {got}")]
    PointCountMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub voxel_size: (f64, f64, f64),
}

impl Default for GridConfig {
    /// The nuScenes crop: [-32, 32] x [-32, 32] x [-3, 2] m, 0.25 x 0.25 x 0.4 m voxels.
    fn default() -> Self {
        Self {
            x_range: (-32.0, 32.0),
            y_range: (-32.0, 32.0),
            z_range: (-3.0, 2.0),
            voxel_size: (0.25, 0.25, 0.4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl GridDims {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }
}

fn axis_count(range: (f64, f64), size: f64) -> usize {
    ((range.1 - range.0) / size - 1e-9).ceil().max(1.0) as usize
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), BevError> {
        let axes = [
            ("x", self.x_range, self.voxel_size.0),
            ("y", self.y_range, self.voxel_size.1),
            ("z", self.z_range, self.voxel_size.2),
        ];
        for (name, (lo, hi), size) in axes {
            if !(lo.is_finite() && hi.is_finite() && size.is_finite()) {
                return Err(BevError::InvalidConfig(format!(
                    "{name} range or voxel size not finite"
                )));
            }
            if !(hi > lo) {
                return Err(BevError::InvalidConfig(format!(
                    "{name} range [{lo}, {hi}] is empty"
                )));
            }
            if !(size > 0.0) {
                return Err(BevError::InvalidConfig(format!(
                    "{name} voxel size {size} must be > 0"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> GridDims {
        GridDims {
            h: axis_count(self.x_range, self.voxel_size.0),
            w: axis_count(self.y_range, self.voxel_size.1),
            c: axis_count(self.z_range, self.voxel_size.2),
        }
    }

    /// Voxel `(i, j, k)` containing `p`, or `None` when `p` is outside the crop.
    pub fn voxel_of(&self, p: &Point3) -> Option<(usize, usize, usize)> {
        let d = self.dims();
        let i = bin(p.x, self.x_range, self.voxel_size.0, d.h)?;
        let j = bin(p.y, self.y_range, self.voxel_size.1, d.w)?;
        let k = bin(p.z, self.z_range, self.voxel_size.2, d.c)?;
        Some((i, j, k))
    }

    /// Center of cell `(i, j)` in the x-y plane.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_range.0 + (i as f64 + 0.5) * self.voxel_size.0,
            self.y_range.0 + (j as f64 + 0.5) * self.voxel_size.1,
        )
    }

    /// Center height of vertical bin `k`.
    pub fn bin_center_z(&self, k: usize) -> f64 {
        self.z_range.0 + (k as f64 + 0.5) * self.voxel_size.2
    }
}

fn bin(v: f64, range: (f64, f64), size: f64, n: usize) -> Option<usize> {
    if !(v >= range.0 && v < range.1) {
        return None;
    }
    let idx = ((v - range.0) / size).floor() as usize;
    (idx < n).then_some(idx)
}

/// Binary H x W x C occupancy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevOccupancy {
    config: GridConfig,
    dims: GridDims,
    data: Vec<u8>,
}

impl BevOccupancy {
    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[(i * self.dims.w + j) * self.dims.c + k]
    }

    /// The C-long vertical occupancy vector of cell `(i, j)`.
    pub fn column(&self, i: usize, j: usize) -> &[u8] {
        let start = (i * self.dims.w + j) * self.dims.c;
        &self.data[start..start + self.dims.c]
    }

    pub fn column_is_empty(&self, i: usize, j: usize) -> bool {
        self.column(i, j).iter().all(|&b| b == 0)
    }

    pub fn occupied_voxels(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }
}

/// The 0-1 scatter map between points and BEV cells. Each in-range point
/// belongs to exactly one cell; out-of-range points belong to none.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAssignment {
    dims: GridDims,
    point_to_cell: Vec<Option<usize>>,
    cell_to_points: Vec<Vec<usize>>,
}

impl CellAssignment {
    pub fn from_cells(dims: GridDims, point_to_cell: Vec<Option<usize>>) -> Self {
        let mut cell_to_points = vec![Vec::new(); dims.cells()];
        for (p, c) in point_to_cell.iter().enumerate() {
            if let Some(c) = c {
                cell_to_points[*c].push(p);
            }
        }
        Self {
            dims,
            point_to_cell,
            cell_to_points,
        }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn n_points(&self) -> usize {
        self.point_to_cell.len()
    }

    /// Flat cell index of point `p`, if in range.
    pub fn cell_of(&self, p: usize) -> Option<usize> {
        self.point_to_cell[p]
    }

    pub fn cell_ij(&self, cell: usize) -> (usize, usize) {
        (cell / self.dims.w, cell % self.dims.w)
    }

    pub fn point_to_cell(&self) -> &[Option<usize>] {
        &self.point_to_cell
    }

    pub fn points_in(&self, cell: usize) -> &[usize] {
        &self.cell_to_points[cell]
    }

    /// Flat indices of cells holding at least one point, ascending.
    pub fn nonempty_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.cell_to_points
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(c, _)| c)
    }

    pub fn in_range_count(&self) -> usize {
        self.point_to_cell.iter().filter(|c| c.is_some()).count()
    }

    /// Assignment restricted to the points `subset` (renumbered 0..subset.len()).
    pub fn restrict(&self, subset: &[usize]) -> CellAssignment {
        CellAssignment::from_cells(
            self.dims,
            subset.iter().map(|&p| self.point_to_cell[p]).collect(),
        )
    }
}

/// Quantizes `cloud` into the occupancy grid and builds the point/cell map.
pub fn voxelize(
    cloud: &PointCloud,
    config: &GridConfig,
) -> Result<(BevOccupancy, CellAssignment), BevError> {
    config.validate()?;
    let dims = config.dims();
    let mut data = vec![0u8; dims.cells() * dims.c];
    let mut point_to_cell = Vec::with_capacity(cloud.len());
    for p in cloud.points() {
        match config.voxel_of(p) {
            Some((i, j, k)) => {
                let cell = i * dims.w + j;
                data[cell * dims.c + k] = 1;
                point_to_cell.push(Some(cell));
            }
            None => point_to_cell.push(None),
        }
    }
    Ok((
        BevOccupancy {
            config: *config,
            dims,
            data,
        },
        CellAssignment::from_cells(dims, point_to_cell),
    ))
}

/// Per-cell horizontal displacement over `horizon` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    h: usize,
    w: usize,
    cells: Vec<Vector2<f64>>,
    horizon: f64,
}

impl MotionField {
    pub fn zeros(h: usize, w: usize, horizon: f64) -> Self {
        Self {
            h,
            w,
            cells: vec![Vector2::zeros(); h * w],
            horizon,
        }
    }

    pub fn from_cells(
        h: usize,
        w: usize,
        cells: Vec<Vector2<f64>>,
        horizon: f64,
    ) -> Result<Self, BevError> {
        if cells.len() != h * w {
            return Err(BevError::DimensionMismatch {
                what: "motion field",
                h,
                w,
                got_h: cells.len() / w.max(1),
                got_w: w,
            });
        }
        if !cells.iter().all(|c| c.x.is_finite() && c.y.is_finite()) || !horizon.is_finite() {
            return Err(BevError::NonFinite("motion field"));
        }
        Ok(Self {
            h,
            w,
            cells,
            horizon,
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn cells(&self) -> &[Vector2<f64>] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [Vector2<f64>] {
        &mut self.cells
    }

    pub fn get(&self, i: usize, j: usize) -> Vector2<f64> {
        self.cells[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Vector2<f64>) {
        self.cells[i * self.w + j] = v;
    }

    fn check_dims(&self, dims: GridDims) -> Result<(), BevError> {
        if self.h != dims.h || self.w != dims.w {
            return Err(BevError::DimensionMismatch {
                what: "motion field",
                h: dims.h,
                w: dims.w,
                got_h: self.h,
                got_w: self.w,
            });
        }
        Ok(())
    }
}

/// Per-cell (FG score, BG score).
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMap {
    h: usize,
    w: usize,
    cells: Vec<[f64; 2]>,
}

pub const FG: usize = 0;
pub const BG: usize = 1;

impl CategoryMap {
    pub fn from_cells(h: usize, w: usize, cells: Vec<[f64; 2]>) -> Result<Self, BevError> {
        if cells.len() != h * w {
            return Err(BevError::DimensionMismatch {
                what: "category map",
                h,
                w,
                got_h: cells.len() / w.max(1),
                got_w: w,
            });
        }
        if !cells.iter().flatten().all(|v| v.is_finite()) {
            return Err(BevError::NonFinite("category map"));
        }
        Ok(Self { h, w, cells })
    }

    pub fn uniform(h: usize, w: usize, scores: [f64; 2]) -> Self {
        Self {
            h,
            w,
            cells: vec![scores; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn cells(&self) -> &[[f64; 2]] {
        &self.cells
    }

    pub fn set(&mut self, cell: usize, scores: [f64; 2]) {
        self.cells[cell] = scores;
    }

    /// Softmax over each cell's two scores.
    pub fn normalized(&self) -> CategoryMap {
        CategoryMap {
            h: self.h,
            w: self.w,
            cells: self.cells.iter().map(|s| softmax2(*s)).collect(),
        }
    }

    /// FG when the FG score is strictly larger, BG otherwise.
    pub fn argmax(&self, cell: usize) -> Category {
        let s = self.cells[cell];
        if s[FG] > s[BG] {
            Category::Foreground
        } else {
            Category::Background
        }
    }

    pub(crate) fn check_dims(&self, h: usize, w: usize) -> Result<(), BevError> {
        if self.h != h || self.w != w {
            return Err(BevError::DimensionMismatch {
                what: "category map",
                h,
                w,
                got_h: self.h,
                got_w: self.w,
            });
        }
        Ok(())
    }
}

pub fn softmax2(s: [f64; 2]) -> [f64; 2] {
    let m = s[0].max(s[1]);
    let a = (s[0] - m).exp();
    let b = (s[1] - m).exp();
    [a / (a + b), b / (a + b)]
}

fn check_points(assign: &CellAssignment, n_points: usize) -> Result<(), BevError> {
    if assign.n_points() != n_points {
        return Err(BevError::PointCountMismatch {
            expected: assign.n_points(),
            got: n_points,
        });
    }
    Ok(())
}

/// Per-point motion `U [X; 0]`: each in-range point takes its cell's
/// horizontal displacement with zero vertical motion.
pub fn lift_motion_to_points(
    field: &MotionField,
    assign: &CellAssignment,
    n_points: usize,
) -> Result<Vec<Vector3<f64>>, BevError> {
    field.check_dims(assign.dims)?;
    check_points(assign, n_points)?;
    Ok(assign
        .point_to_cell
        .iter()
        .map(|c| match c {
            Some(c) => {
                let v = field.cells[*c];
                Vector3::new(v.x, v.y, 0.0)
            }
            None => Vector3::zeros(),
        })
        .collect())
}

/// Per-point category scores `U X_fb`; out-of-range points get zeros.
pub fn lift_categories_to_points(
    map: &CategoryMap,
    assign: &CellAssignment,
    n_points: usize,
) -> Result<Vec<[f64; 2]>, BevError> {
    map.check_dims(assign.dims.h, assign.dims.w)?;
    check_points(assign, n_points)?;
    Ok(assign
        .point_to_cell
        .iter()
        .map(|c| c.map_or([0.0; 2], |c| map.cells[c]))
        .collect())
}

/// Transposed lift: accumulates per-point horizontal gradients into their cells.
pub fn scatter_to_cells(
    assign: &CellAssignment,
    per_point: &[Vector2<f64>],
    out: &mut [Vector2<f64>],
) {
    debug_assert_eq!(per_point.len(), assign.n_points());
    for (g, c) in per_point.iter().zip(&assign.point_to_cell) {
        if let Some(c) = c {
            out[*c] += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> GridConfig {
        GridConfig {
            x_range: (-2.0, 2.0),
            y_range: (-1.0, 1.0),
            z_range: (-1.0, 1.0),
            voxel_size: (0.5, 0.5, 0.5),
        }
    }

    #[test]
    fn nuscenes_grid_dims() {
        let d = GridConfig::default().dims();
        assert_eq!((d.h, d.w, d.c), (256, 256, 13));
    }

    #[test]
    fn invalid_configs() {
        let mut c = small_config();
        c.voxel_size.1 = 0.0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.z_range = (1.0, 1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_cloud_voxelizes_to_nothing() {
        let (occ, asg) = voxelize(&PointCloud::empty(), &small_config()).unwrap();
        assert_eq!(occ.occupied_voxels(), 0);
        assert_eq!(asg.nonempty_cells().count(), 0);
        assert_eq!(asg.n_points(), 0);
    }

    #[test]
    fn single_center_point() {
        let cloud = PointCloud::from_xyz(&[[0.0, 0.0, 0.0]]).unwrap();
        let (occ, asg) = voxelize(&cloud, &small_config()).unwrap();
        assert_eq!(occ.occupied_voxels(), 1);
        // x = 0 sits on the lower edge of bin 4 along x (range -2..2 in 0.5 steps).
        assert_eq!(occ.get(4, 2, 2), 1);
        let cell = asg.cell_of(0).unwrap();
        assert_eq!(asg.cell_ij(cell), (4, 2));
        assert_eq!(asg.points_in(cell), &[0]);
    }

    #[test]
    fn upper_boundary_is_out_of_range() {
        let cfg = small_config();
        let cloud =
            PointCloud::from_xyz(&[[2.0, 0.0, 0.0], [-2.0, -1.0, -1.0], [1.999, 0.999, 0.999]])
                .unwrap();
        let (_, asg) = voxelize(&cloud, &cfg).unwrap();
        assert_eq!(asg.cell_of(0), None);
        assert_eq!(asg.cell_ij(asg.cell_of(1).unwrap()), (0, 0));
        assert_eq!(asg.cell_ij(asg.cell_of(2).unwrap()), (7, 3));
        assert_eq!(asg.in_range_count(), 2);
    }

    #[test]
    fn lift_examples() {
        let cfg = small_config();
        let d = cfg.dims();
        let cloud = PointCloud::from_xyz(&[
            [0.1, 0.1, 0.0],
            [0.2, 0.3, 0.4],
            [0.4, 0.0, -0.9],
            [5.0, 0.0, 0.0],
        ])
        .unwrap();
        let (_, asg) = voxelize(&cloud, &cfg).unwrap();
        let zero = MotionField::zeros(d.h, d.w, 0.5);
        assert!(lift_motion_to_points(&zero, &asg, 4)
            .unwrap()
            .iter()
            .all(|v| *v == Vector3::zeros()));

        let mut f = MotionField::zeros(d.h, d.w, 0.5);
        f.set(4, 2, Vector2::new(1.0, 2.0));
        let lifted = lift_motion_to_points(&f, &asg, 4).unwrap();
        for v in &lifted[..3] {
            assert_eq!(*v, Vector3::new(1.0, 2.0, 0.0));
        }
        assert_eq!(lifted[3], Vector3::zeros());

        assert!(matches!(
            lift_motion_to_points(&f, &asg, 3),
            Err(BevError::PointCountMismatch { .. })
        ));
        let wrong = MotionField::zeros(d.h + 1, d.w, 0.5);
        assert!(matches!(
            lift_motion_to_points(&wrong, &asg, 4),
            Err(BevError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn lift_categories_examples() {
        let cfg = small_config();
        let d = cfg.dims();
        let cloud =
            PointCloud::from_xyz(&[[0.1, 0.1, 0.0], [-1.9, 0.0, 0.0], [0.3, 0.2, 0.1]]).unwrap();
        let (_, asg) = voxelize(&cloud, &cfg).unwrap();
        let uniform = CategoryMap::uniform(d.h, d.w, [0.3, 0.7]);
        assert!(lift_categories_to_points(&uniform, &asg, 3)
            .unwrap()
            .iter()
            .all(|s| *s == [0.3, 0.7]));

        let mut m = CategoryMap::uniform(d.h, d.w, [0.0, 1.0]);
        m.set(4 * d.w + 2, [1.0, 0.0]);
        let lifted = lift_categories_to_points(&m, &asg, 3).unwrap();
        assert_eq!(lifted, vec![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m =
            CategoryMap::from_cells(1, 3, vec![[0.0, 0.0], [800.0, -3.0], [-2.5, 7.0]]).unwrap();
        for s in m.normalized().cells() {
            assert!((s[0] + s[1] - 1.0).abs() < 1e-9);
        }
        assert_eq!(m.argmax(0), Category::Background);
        assert_eq!(m.argmax(1), Category::Foreground);
    }

    fn random_instance(seed: u64) -> (GridConfig, PointCloud) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_config();
        let pts: Vec<[f64; 3]> = (0..60)
            .map(|_| {
                [
                    rng.random_range(-2.5..2.5),
                    rng.random_range(-1.2..1.2),
                    rng.random_range(-1.1..1.1),
                ]
            })
            .collect();
        (cfg, PointCloud::from_xyz(&pts).unwrap())
    }

    proptest! {
        #[test]
        fn scatter_gather_counts(seed in 0u64..1000) {
            let (cfg, cloud) = random_instance(seed);
            let (occ, asg) = voxelize(&cloud, &cfg).unwrap();
            let mut counts = vec![0usize; asg.dims().cells()];
            for c in asg.point_to_cell().iter().flatten() {
                counts[*c] += 1;
            }
            for (c, n) in counts.iter().enumerate() {
                prop_assert_eq!(asg.points_in(c).len(), *n);
                let (i, j) = asg.cell_ij(c);
                prop_assert_eq!(*n > 0, !occ.column_is_empty(i, j));
                for &p in asg.points_in(c) {
                    prop_assert_eq!(asg.cell_of(p), Some(c));
                }
            }
            // half-open intervals
            for (p, c) in cloud.points().iter().zip(asg.point_to_cell()) {
                if let Some(c) = c {
                    let (i, j) = asg.cell_ij(*c);
                    let lo_x = cfg.x_range.0 + i as f64 * cfg.voxel_size.0;
                    let lo_y = cfg.y_range.0 + j as f64 * cfg.voxel_size.1;
                    prop_assert!(p.x >= lo_x && p.x < lo_x + cfg.voxel_size.0);
                    prop_assert!(p.y >= lo_y && p.y < lo_y + cfg.voxel_size.1);
                }
            }
        }

        #[test]
        fn lift_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let (cfg, cloud) = random_instance(seed);
            let (_, asg) = voxelize(&cloud, &cfg).unwrap();
            let d = cfg.dims();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let mut rand_field = || {
                let cells = (0..d.cells())
                    .map(|_| Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                    .collect();
                MotionField::from_cells(d.h, d.w, cells, 0.5).unwrap()
            };
            let (f1, f2) = (rand_field(), rand_field());
            let combo = MotionField::from_cells(
                d.h,
                d.w,
                f1.cells().iter().zip(f2.cells()).map(|(x, y)| x * a + y * b).collect(),
                0.5,
            )
            .unwrap();
            let l1 = lift_motion_to_points(&f1, &asg, cloud.len()).unwrap();
            let l2 = lift_motion_to_points(&f2, &asg, cloud.len()).unwrap();
            let lc = lift_motion_to_points(&combo, &asg, cloud.len()).unwrap();
            for ((x, y), z) in l1.iter().zip(&l2).zip(&lc) {
                prop_assert!((x * a + y * b - z).norm() < 1e-12);
            }
        }
    }
}
