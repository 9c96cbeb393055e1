//! Per-cell FG/BG classifier: a linear model over handcrafted BEV column
//! features, trained with the class-weighted cross-entropy on weak labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::bev::{BevOccupancy, CategoryMap, CellAssignment, GridDims, BG, FG};
use crate::geometry::Category;
use crate::ground::Plane;
use crate::losses::{weak_cls_loss, LossError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegError {
    #[error(
        "training corpus needs at least one labeled FG and one labeled BG cell (fg={fg}, bg={bg})"
    )]
    DegenerateLabels { fg: usize, bg: usize },
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("expected {expected} cell labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Feature vectors of every cell of one grid. Empty cells carry zeros and are
/// flagged; they are never trained on and always predicted BG.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFeatures {
    dims: GridDims,
    n_features: usize,
    data: Vec<f64>,
    nonempty: Vec<bool>,
}

impl CellFeatures {
    pub fn feature_count(c: usize) -> usize {
        c + 5
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.data[cell * self.n_features..(cell + 1) * self.n_features]
    }

    pub fn is_nonempty(&self, cell: usize) -> bool {
        self.nonempty[cell]
    }

    pub fn nonempty_count(&self) -> usize {
        self.nonempty.iter().filter(|b| **b).count()
    }

    /// Builds features from raw per-cell rows; `None` marks an empty cell.
    pub fn from_rows(
        dims: GridDims,
        n_features: usize,
        rows: &[Option<Vec<f64>>],
    ) -> Result<Self, SegError> {
        if rows.len() != dims.cells() {
            return Err(SegError::LabelCount {
                expected: dims.cells(),
                got: rows.len(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * n_features);
        for row in rows {
            match row {
                Some(r) if r.len() != n_features => {
                    return Err(SegError::DimensionMismatch {
                        expected: n_features,
                        got: r.len(),
                    })
                }
                Some(r) => data.extend_from_slice(r),
                None => data.extend(std::iter::repeat_n(0.0, n_features)),
            }
        }
        Ok(Self {
            dims,
            n_features,
            data,
            nonempty: rows.iter().map(Option::is_some).collect(),
        })
    }

    /// Reorders cells: cell `k` of the result is cell `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> CellFeatures {
        let mut data = Vec::with_capacity(self.data.len());
        for &c in perm {
            data.extend_from_slice(self.cell(c));
        }
        CellFeatures {
            dims: self.dims,
            n_features: self.n_features,
            data,
            nonempty: perm.iter().map(|&c| self.nonempty[c]).collect(),
        }
    }
}

/// Layout per cell: occupied-voxel fraction, occupied height span, max and
/// mean occupied-bin height above the plane, the C-bin occupancy profile, bias.
pub fn featurize_cells(occ: &BevOccupancy, plane: &Plane) -> CellFeatures {
    let cfg = occ.config();
    let dims = occ.dims();
    let nf = CellFeatures::feature_count(dims.c);
    let dz = cfg.voxel_size.2;
    let mut data = vec![0.0; dims.cells() * nf];
    let mut nonempty = vec![false; dims.cells()];
    for i in 0..dims.h {
        for j in 0..dims.w {
            let cell = i * dims.w + j;
            let col = occ.column(i, j);
            let occupied: Vec<usize> = (0..dims.c).filter(|&k| col[k] != 0).collect();
            let f = &mut data[cell * nf..(cell + 1) * nf];
            f[nf - 1] = 1.0;
            let (Some(&kmin), Some(&kmax)) = (occupied.first(), occupied.last()) else {
                continue;
            };
            nonempty[cell] = true;
            let (cx, cy) = cfg.cell_center(i, j);
            let ground = plane.height_at(cx, cy);
            let heights: Vec<f64> = occupied
                .iter()
                .map(|&k| cfg.bin_center_z(k) - ground)
                .collect();
            f[0] = occupied.len() as f64 / dims.c as f64;
            f[1] = (kmax - kmin + 1) as f64 * dz;
            f[2] = heights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            f[3] = heights.iter().sum::<f64>() / heights.len() as f64;
            for &k in &occupied {
                f[4 + k] = 1.0;
            }
        }
    }
    CellFeatures {
        dims,
        n_features: nf,
        data,
        nonempty,
    }
}

/// Cell label from partial point labels: FG if any labeled point is FG, BG if
/// every labeled point is BG, unlabeled otherwise.
pub fn lift_labels_to_cells(
    assign: &CellAssignment,
    point_labels: &[Category],
) -> Result<Vec<Category>, SegError> {
    if point_labels.len() != assign.n_points() {
        return Err(SegError::LabelCount {
            expected: assign.n_points(),
            got: point_labels.len(),
        });
    }
    let mut out = vec![Category::Unlabeled; assign.dims().cells()];
    for (p, cell) in assign.point_to_cell().iter().enumerate() {
        let Some(cell) = *cell else { continue };
        match (point_labels[p], out[cell]) {
            (Category::Foreground, _) => out[cell] = Category::Foreground,
            (Category::Background, Category::Unlabeled) => out[cell] = Category::Background,
            _ => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub alpha_bg: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_bg: 0.005,
            epochs: 1000,
            lr: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgBgModel {
    /// `weights[f] = [fg, bg]` contribution of standardized feature `f`.
    pub weights: Vec<[f64; 2]>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
}

impl FgBgModel {
    pub fn zeros(n_features: usize) -> Self {
        Self {
            weights: vec![[0.0; 2]; n_features],
            mean: vec![0.0; n_features],
            scale: vec![1.0; n_features],
            epochs: 0,
            seed: 0,
            loss_curve: Vec::new(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    pub fn scores(&self, x: &[f64]) -> [f64; 2] {
        let mut s = [0.0; 2];
        for (f, w) in self.weights.iter().enumerate() {
            let z = (x[f] - self.mean[f]) / self.scale[f];
            s[FG] += w[FG] * z;
            s[BG] += w[BG] * z;
        }
        s
    }
}

/// Standardization stats over labeled cells; constant features keep mean 0
/// and scale 1 so the bias column passes through untouched.
fn standardization(rows: &[&[f64]], nf: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; nf];
    let mut scale = vec![1.0; nf];
    for f in 0..nf {
        let m = rows.iter().map(|r| r[f]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[f] - m).powi(2)).sum::<f64>() / n;
        if var > 1e-12 {
            mean[f] = m;
            scale[f] = var.sqrt();
        }
    }
    (mean, scale)
}

/// Full-batch gradient descent on the class-weighted cross-entropy over every
/// labeled cell of the corpus, in corpus order.
pub fn train_fgbg(
    corpus: &[(CellFeatures, Vec<Category>)],
    cfg: &TrainConfig,
) -> Result<FgBgModel, SegError> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(SegError::InvalidConfig(format!(
            "lr {} must be > 0",
            cfg.lr
        )));
    }
    if !(cfg.alpha_bg >= 0.0 && cfg.alpha_bg.is_finite()) {
        return Err(SegError::InvalidConfig(format!(
            "alpha_bg {} must be >= 0",
            cfg.alpha_bg
        )));
    }
    let nf = corpus.first().map_or(0, |(f, _)| f.n_features());
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut labels: Vec<Category> = Vec::new();
    for (feats, lab) in corpus {
        if feats.n_features() != nf {
            return Err(SegError::DimensionMismatch {
                expected: nf,
                got: feats.n_features(),
            });
        }
        if lab.len() != feats.dims().cells() {
            return Err(SegError::LabelCount {
                expected: feats.dims().cells(),
                got: lab.len(),
            });
        }
        for (cell, l) in lab.iter().enumerate() {
            if l.is_labeled() && feats.is_nonempty(cell) {
                rows.push(feats.cell(cell));
                labels.push(*l);
            }
        }
    }
    let fg = labels
        .iter()
        .filter(|l| **l == Category::Foreground)
        .count();
    let bg = labels.len() - fg;
    if fg == 0 || bg == 0 {
        return Err(SegError::DegenerateLabels { fg, bg });
    }

    let (mean, scale) = standardization(&rows, nf);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let weights = (0..nf)
        .map(|_| [init.sample(&mut rng), init.sample(&mut rng)])
        .collect();
    let mut model = FgBgModel {
        weights,
        mean,
        scale,
        epochs: cfg.epochs,
        seed: cfg.seed,
        loss_curve: Vec::with_capacity(cfg.epochs),
    };
    let z: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            (0..nf)
                .map(|f| (r[f] - model.mean[f]) / model.scale[f])
                .collect()
        })
        .collect();

    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    let mut m = vec![[0.0; 2]; nf];
    let mut v = vec![[0.0; 2]; nf];
    let mut t = 0;
    for _ in 0..cfg.epochs {
        let scores: Vec<[f64; 2]> = z
            .iter()
            .map(|x| {
                let mut s = [0.0; 2];
                for (xf, w) in x.iter().zip(&model.weights) {
                    s[FG] += w[FG] * xf;
                    s[BG] += w[BG] * xf;
                }
                s
            })
            .collect();
        let report = weak_cls_loss(&scores, &labels, cfg.alpha_bg)?;
        model.loss_curve.push(report.value);
        let mut grad = vec![[0.0; 2]; nf];
        for (x, g) in z.iter().zip(&report.grad) {
            for (f, xf) in x.iter().enumerate() {
                grad[f][FG] += g[FG] * xf;
                grad[f][BG] += g[BG] * xf;
            }
        }
        // Adam with decays (0.9, 0.999)
        t += 1;
        let (c1, c2) = (1.0 - B1.powi(t), 1.0 - B2.powi(t));
        for (k, (w, g)) in model.weights.iter_mut().zip(&grad).enumerate() {
            for c in [FG, BG] {
                m[k][c] = B1 * m[k][c] + (1.0 - B1) * g[c];
                v[k][c] = B2 * v[k][c] + (1.0 - B2) * g[c] * g[c];
                w[c] -= cfg.lr * (m[k][c] / c1) / ((v[k][c] / c2).sqrt() + 1e-8);
            }
        }
    }
    Ok(model)
}

/// Softmax scores per cell; empty cells are `[0, 1]` (certain BG).
pub fn predict_fgbg(model: &FgBgModel, feats: &CellFeatures) -> Result<CategoryMap, SegError> {
    if feats.n_features() != model.n_features() {
        return Err(SegError::DimensionMismatch {
            expected: model.n_features(),
            got: feats.n_features(),
        });
    }
    let dims = feats.dims();
    let mut map = CategoryMap::uniform(dims.h, dims.w, [0.0, 1.0]);
    for cell in 0..dims.cells() {
        if feats.is_nonempty(cell) {
            map.set(cell, crate::bev::softmax2(model.scores(feats.cell(cell))));
        }
    }
    Ok(map)
}
