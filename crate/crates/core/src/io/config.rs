//! `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; missing keys keep their defaults
//! and unknown keys are rejected. `scene.mover` and `scene.static` may repeat,
//! one box per line: `x y yaw length width height clearance vx vy`.
//! `scene.occlusion` is `none` or `start_deg width_deg drift_deg`. Booleans are
//! `true` / `false`. See [`RunConfig::serialize`] for the full key list.

use std::path::Path;
use std::str::FromStr;

use super::{format_f64, read_text, IoError};
use crate::bev::GridConfig;
use crate::eval::SpeedThresholds;
use crate::ground::RansacConfig;
use crate::losses::{PenaltyKind, SupervisionMode};
use crate::optimize::FitConfig;
use crate::segmentation::TrainConfig;
use crate::synth::{BoxSpec, Occlusion, ScenarioSpec};

/// Outlier injection applied by `gen` after scene generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierConfig {
    pub fraction: f64,
    pub magnitude: f64,
    pub seed: u64,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        Self {
            fraction: 0.0,
            magnitude: 2.0,
            seed: 0,
        }
    }
}

/// Sparse annotation drawn from dense labels (classifier training and NG mode).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakLabelConfig {
    /// Fraction of nonempty cells (training) or points (NG fitting) labeled.
    pub fraction: f64,
    pub seed: u64,
}

impl Default for WeakLabelConfig {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub ransac: RansacConfig,
    /// Also carries the loss configuration (`loss.*` keys).
    pub fit: FitConfig,
    /// Frame offset between the current frame and its past and future frames.
    pub stride: usize,
    pub train: TrainConfig,
    pub labels: WeakLabelConfig,
    pub scene: ScenarioSpec,
    pub outliers: OutlierConfig,
    pub eval: SpeedThresholds,
}

fn parse<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_list(v: &str, n: usize) -> Result<Vec<f64>, String> {
    let xs: Vec<f64> = v.split_whitespace().map(parse).collect::<Result<_, _>>()?;
    if xs.len() != n {
        return Err(format!("expected {n} numbers, got {}", xs.len()));
    }
    Ok(xs)
}

fn parse_box(v: &str) -> Result<BoxSpec, String> {
    let x = parse_list(v, 9)?;
    Ok(BoxSpec {
        center: (x[0], x[1]),
        yaw: x[2],
        length: x[3],
        width: x[4],
        height: x[5],
        clearance: x[6],
        velocity: (x[7], x[8]),
    })
}

fn fmt_box(b: &BoxSpec) -> String {
    [
        b.center.0,
        b.center.1,
        b.yaw,
        b.length,
        b.width,
        b.height,
        b.clearance,
        b.velocity.0,
        b.velocity.1,
    ]
    .iter()
    .map(|v| format_f64(*v))
    .collect::<Vec<_>>()
    .join(" ")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            ransac: RansacConfig::default(),
            fit: FitConfig::default(),
            stride: 1,
            train: TrainConfig::default(),
            labels: WeakLabelConfig::default(),
            scene: ScenarioSpec::default(),
            outliers: OutlierConfig::default(),
            eval: SpeedThresholds::default(),
        }
    }
}

impl RunConfig {
    /// Sets one key. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        let g = &mut self.grid;
        let r = &mut self.ransac;
        let f = &mut self.fit;
        let l = &mut f.loss;
        let s = &mut self.scene;
        match key {
            "grid.x_min" => g.x_range.0 = parse(v)?,
            "grid.x_max" => g.x_range.1 = parse(v)?,
            "grid.y_min" => g.y_range.0 = parse(v)?,
            "grid.y_max" => g.y_range.1 = parse(v)?,
            "grid.z_min" => g.z_range.0 = parse(v)?,
            "grid.z_max" => g.z_range.1 = parse(v)?,
            "grid.voxel_x" => g.voxel_size.0 = parse(v)?,
            "grid.voxel_y" => g.voxel_size.1 = parse(v)?,
            "grid.voxel_z" => g.voxel_size.2 = parse(v)?,

            "ransac.iterations" => r.iterations = parse(v)?,
            "ransac.d_thresh" => r.d_thresh = parse(v)?,
            "ransac.candidate_quantile" => r.candidate_height_quantile = parse(v)?,
            "ransac.max_tilt_deg" => r.max_tilt_deg = parse(v)?,
            "ransac.seed" => r.rng_seed = parse(v)?,
            "ransac.refit" => r.refit = parse_bool(v)?,

            "loss.theta_sq" => l.theta_sq = parse(v)?,
            "loss.penalty" => {
                l.penalty = PenaltyKind::from_name(v)
                    .ok_or_else(|| format!("expected l2, l1, wl or gm, got {v:?}"))?
            }
            "loss.beta1" => l.beta1 = parse(v)?,
            "loss.beta2" => l.beta2 = parse(v)?,
            "loss.phi_bg" => l.phi_bg = parse(v)?,
            "loss.phi_g" => l.phi_g = parse(v)?,
            "loss.alpha_bg" => l.alpha_bg = parse(v)?,
            "loss.smooth_radius" => l.smooth_radius = parse(v)?,
            "loss.smooth_k" => l.smooth_k = parse(v)?,
            "loss.omega" => l.omega = parse_bool(v)?,
            "loss.use_past" => l.use_past = parse_bool(v)?,
            "loss.use_confidence" => l.use_confidence = parse_bool(v)?,
            "loss.use_smoothness" => l.use_smoothness = parse_bool(v)?,

            "fit.mode" => {
                f.mode = SupervisionMode::from_name(v)
                    .ok_or_else(|| format!("expected fb, ng or self, got {v:?}"))?
            }
            "fit.steps" => f.steps = parse(v)?,
            "fit.step_size" => f.step_size = parse(v)?,
            "fit.b1" => f.b1 = parse(v)?,
            "fit.b2" => f.b2 = parse(v)?,
            "fit.eps" => f.eps = parse(v)?,
            "fit.coarse_levels" => f.coarse_levels = parse(v)?,
            "fit.level_gain" => f.level_gain = parse(v)?,
            "fit.final_step_fraction" => f.final_step_fraction = parse(v)?,
            "fit.seed" => f.seed = parse(v)?,
            "fit.stride" => self.stride = parse(v)?,

            "train.epochs" => self.train.epochs = parse(v)?,
            "train.lr" => self.train.lr = parse(v)?,
            "train.seed" => self.train.seed = parse(v)?,
            "labels.fraction" => self.labels.fraction = parse(v)?,
            "labels.seed" => self.labels.seed = parse(v)?,

            "scene.ground_height" => s.ground_height = parse(v)?,
            "scene.ground_extent" => s.ground_extent = parse(v)?,
            "scene.ground_density" => s.ground_density = parse(v)?,
            "scene.surface_density" => s.surface_density = parse(v)?,
            "scene.ego_vx" => s.ego_velocity.0 = parse(v)?,
            "scene.ego_vy" => s.ego_velocity.1 = parse(v)?,
            "scene.noise_sigma" => s.noise_sigma = parse(v)?,
            "scene.frame_count" => s.frame_count = parse(v)?,
            "scene.frame_dt" => s.frame_dt = parse(v)?,
            "scene.seed" => s.seed = parse(v)?,
            "scene.occlusion" => {
                s.occlusion = if v == "none" {
                    None
                } else {
                    let x = parse_list(v, 3)?;
                    Some(Occlusion {
                        start_deg: x[0],
                        width_deg: x[1],
                        drift_deg: x[2],
                    })
                }
            }
            "scene.mover" => s.movers.push(parse_box(v)?),
            "scene.static" => s.statics.push(parse_box(v)?),

            "outliers.fraction" => self.outliers.fraction = parse(v)?,
            "outliers.magnitude" => self.outliers.magnitude = parse(v)?,
            "outliers.seed" => self.outliers.seed = parse(v)?,

            "eval.static_max" => self.eval.static_max = parse(v)?,
            "eval.fast_min" => self.eval.fast_min = parse(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = &self.grid;
        let r = &self.ransac;
        let f = &self.fit;
        let l = &f.loss;
        let s = &self.scene;
        let n = |v: f64| format_f64(v);
        let mut out = vec![
            ("grid.x_min", n(g.x_range.0)),
            ("grid.x_max", n(g.x_range.1)),
            ("grid.y_min", n(g.y_range.0)),
            ("grid.y_max", n(g.y_range.1)),
            ("grid.z_min", n(g.z_range.0)),
            ("grid.z_max", n(g.z_range.1)),
            ("grid.voxel_x", n(g.voxel_size.0)),
            ("grid.voxel_y", n(g.voxel_size.1)),
            ("grid.voxel_z", n(g.voxel_size.2)),
            ("ransac.iterations", r.iterations.to_string()),
            ("ransac.d_thresh", n(r.d_thresh)),
            ("ransac.candidate_quantile", n(r.candidate_height_quantile)),
            ("ransac.max_tilt_deg", n(r.max_tilt_deg)),
            ("ransac.seed", r.rng_seed.to_string()),
            ("ransac.refit", r.refit.to_string()),
            ("loss.theta_sq", n(l.theta_sq)),
            ("loss.penalty", l.penalty.name().to_string()),
            ("loss.beta1", n(l.beta1)),
            ("loss.beta2", n(l.beta2)),
            ("loss.phi_bg", n(l.phi_bg)),
            ("loss.phi_g", n(l.phi_g)),
            ("loss.alpha_bg", n(l.alpha_bg)),
            ("loss.smooth_radius", n(l.smooth_radius)),
            ("loss.smooth_k", l.smooth_k.to_string()),
            ("loss.omega", l.omega.to_string()),
            ("loss.use_past", l.use_past.to_string()),
            ("loss.use_confidence", l.use_confidence.to_string()),
            ("loss.use_smoothness", l.use_smoothness.to_string()),
            ("fit.mode", f.mode.name().to_string()),
            ("fit.steps", f.steps.to_string()),
            ("fit.step_size", n(f.step_size)),
            ("fit.b1", n(f.b1)),
            ("fit.b2", n(f.b2)),
            ("fit.eps", n(f.eps)),
            ("fit.coarse_levels", f.coarse_levels.to_string()),
            ("fit.level_gain", n(f.level_gain)),
            ("fit.final_step_fraction", n(f.final_step_fraction)),
            ("fit.seed", f.seed.to_string()),
            ("fit.stride", self.stride.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.lr", n(self.train.lr)),
            ("train.seed", self.train.seed.to_string()),
            ("labels.fraction", n(self.labels.fraction)),
            ("labels.seed", self.labels.seed.to_string()),
            ("scene.ground_height", n(s.ground_height)),
            ("scene.ground_extent", n(s.ground_extent)),
            ("scene.ground_density", n(s.ground_density)),
            ("scene.surface_density", n(s.surface_density)),
            ("scene.ego_vx", n(s.ego_velocity.0)),
            ("scene.ego_vy", n(s.ego_velocity.1)),
            ("scene.noise_sigma", n(s.noise_sigma)),
            ("scene.frame_count", s.frame_count.to_string()),
            ("scene.frame_dt", n(s.frame_dt)),
            ("scene.seed", s.seed.to_string()),
            (
                "scene.occlusion",
                match s.occlusion {
                    None => "none".to_string(),
                    Some(o) => format!("{} {} {}", n(o.start_deg), n(o.width_deg), n(o.drift_deg)),
                },
            ),
        ];
        out.extend(s.movers.iter().map(|b| ("scene.mover", fmt_box(b))));
        out.extend(s.statics.iter().map(|b| ("scene.static", fmt_box(b))));
        out.extend([
            ("outliers.fraction", n(self.outliers.fraction)),
            ("outliers.magnitude", n(self.outliers.magnitude)),
            ("outliers.seed", self.outliers.seed.to_string()),
            ("eval.static_max", n(self.eval.static_max)),
            ("eval.fast_min", n(self.eval.fast_min)),
        ]);
        out
    }

    /// Canonical text form: every key, one per line, fixed order.
    pub fn serialize(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Classifier training settings; the class weight is `loss.alpha_bg`.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha_bg: self.fit.loss.alpha_bg,
            ..self.train
        }
    }

    pub fn validate(&self) -> Result<(), IoError> {
        let v = |section: &'static str, msg: String| IoError::Validation { section, msg };
        self.grid.validate().map_err(|e| v("grid", e.to_string()))?;
        self.ransac
            .validate()
            .map_err(|e| v("ransac", e.to_string()))?;
        self.fit
            .loss
            .validate()
            .map_err(|e| v("loss", e.to_string()))?;
        self.fit.validate().map_err(|e| v("fit", e.to_string()))?;
        if self.stride < 1 {
            return Err(v("fit", "stride must be >= 1".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(v("train", format!("lr {} must be > 0", self.train.lr)));
        }
        if !(0.0..=1.0).contains(&self.labels.fraction) {
            return Err(v(
                "labels",
                format!("fraction {} must be in [0, 1]", self.labels.fraction),
            ));
        }
        self.scene
            .validate()
            .map_err(|e| v("scene", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.outliers.fraction) {
            return Err(v(
                "outliers",
                format!("fraction {} must be in [0, 1]", self.outliers.fraction),
            ));
        }
        if !(self.outliers.magnitude >= 0.0 && self.outliers.magnitude.is_finite()) {
            return Err(v(
                "outliers",
                format!("magnitude {} must be >= 0", self.outliers.magnitude),
            ));
        }
        self.eval.validate().map_err(|e| v("eval", e.to_string()))?;
        Ok(())
    }

    /// Applies `key=value` overrides on top of the current values.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), IoError> {
        for (i, o) in overrides.iter().enumerate() {
            apply_line(self, o, i + 1, &mut Vec::new())?;
        }
        self.validate()
    }
}

const REPEATABLE: [&str; 2] = ["scene.mover", "scene.static"];

fn apply_line(
    cfg: &mut RunConfig,
    line: &str,
    line_no: usize,
    seen: &mut Vec<String>,
) -> Result<(), IoError> {
    let (k, v) = line.split_once('=').ok_or(IoError::Syntax {
        line: line_no,
        msg: format!("expected key = value, got {line:?}"),
    })?;
    let (k, v) = (k.trim(), v.trim());
    if !REPEATABLE.contains(&k) {
        if seen.iter().any(|s| s == k) {
            return Err(IoError::BadValue {
                line: line_no,
                key: k.into(),
                msg: "key given twice".into(),
            });
        }
        seen.push(k.to_string());
    }
    match cfg.set(k, v) {
        Ok(true) => Ok(()),
        Ok(false) => Err(IoError::UnknownKey {
            line: line_no,
            key: k.into(),
        }),
        Err(msg) => Err(IoError::BadValue {
            line: line_no,
            key: k.into(),
            msg,
        }),
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, IoError> {
    let mut cfg = RunConfig::default();
    let mut seen = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        apply_line(&mut cfg, t, i + 1, &mut seen)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, IoError> {
    parse_config_str(&read_text(path)?)
}
