//! Command-line pipeline: `gen`, `ground`, `segtrain`, `segpredict`, `fit`,
//! `eval`, `gradcheck`, `report`.
//!
//! A data directory holds `sequence.txt`, the observed clouds
//! `frame_NNN.bmlpc` and the outlier-free clouds `clean_NNN.bmlpc`. Every
//! command writes into its `--out` directory only, together with
//! `config.txt` (the canonical effective configuration) and `manifest.txt`.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error, 3 invalid
//! configuration.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bev::{voxelize, CategoryMap};
use crate::eval::{cell_truth, extrapolate_to_1s, motion_errors, seg_accuracy, SpeedGroup};
use crate::geometry::{
    extract_triple_at, Category, Frame, FrameSequence, PointCloud, SyncedTriple,
};
use crate::ground::{fit_ground_plane, segment_by_plane};
use crate::io::{self, IoError, Record, RunConfig};
use crate::losses::{
    build_neighborhoods, chamfer_l2, rccd, smoothness, static_loss, weak_cls_loss,
    weighted_robust_chamfer, MotionLoss, SupervisionMode,
};
use crate::optimize::{fit_motion_field, gradient_check, zero_background, Supervision};
use crate::segmentation::{
    featurize_cells, lift_labels_to_cells, predict_fgbg, train_fgbg, FgBgModel,
};
use crate::synth::{generate_scene, inject_outliers, sample_weak_labels};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "bevmotion",
    version,
    about = "BEV motion fields from weak or no supervision"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (key = value lines); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set fit.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fb,
    Ng,
    #[value(name = "self")]
    SelfSupervised,
}

impl From<ModeArg> for SupervisionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fb => SupervisionMode::Fb,
            ModeArg::Ng => SupervisionMode::Ng,
            ModeArg::SelfSupervised => SupervisionMode::SelfSupervised,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Chamfer,
    Wrc,
    Rccd,
    Smooth,
    Static,
    Cls,
    Composite,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sequence from the `scene.*` and `outliers.*` keys.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a ground plane per frame; writes `ground_NNN.mask` (1 = ground) and `planes.rec`.
    Ground {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the FG/BG cell classifier on sparse labels of each dataset's current frame.
    Segtrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict per-cell FG/BG scores for every frame; writes `categories_NNN.bcm`.
    Segpredict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a motion field for every sample (center frame) of a sequence.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Supervision mode; overrides `fit.mode`.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Classifier model from `segtrain`; required in fb mode.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output of `ground` to reuse instead of refitting planes (ng and self modes).
        #[arg(long)]
        ground: Option<PathBuf>,
        /// Samples fitted in parallel.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Score fitted fields (and category maps) against the clean ground truth.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        /// Output of `segpredict`; category maps written by `fit` are used otherwise.
        #[arg(long)]
        categories: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an analytic gradient against central finite differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        loss: LossArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of coordinates checked.
        #[arg(long, default_value_t = 60)]
        count: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Aggregate `eval` outputs (and optional `fit` traces) into a comparison table.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        eval: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        fit: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen { cfg, out } => cmd_gen(&load_config(&cfg)?, &out),
        Command::Ground { cfg, data, out } => cmd_ground(&load_config(&cfg)?, &data, &out),
        Command::Segtrain { cfg, data, out } => cmd_segtrain(&load_config(&cfg)?, &data, &out),
        Command::Segpredict {
            cfg,
            data,
            model,
            out,
        } => cmd_segpredict(&load_config(&cfg)?, &data, &model, &out),
        Command::Fit {
            cfg,
            data,
            out,
            mode,
            model,
            ground,
            workers,
        } => {
            let mut c = load_config(&cfg)?;
            if let Some(m) = mode {
                c.fit.mode = m.into();
            }
            if c.fit.mode == SupervisionMode::Fb && model.is_none() {
                return Err(CliError::Usage(
                    "fit --mode fb needs --model (output of segtrain)".into(),
                ));
            }
            if c.fit.mode == SupervisionMode::Fb && ground.is_some() {
                return Err(CliError::Usage(
                    "--ground applies to the ng and self modes".into(),
                ));
            }
            if workers == 0 {
                return Err(CliError::Usage("--workers must be at least 1".into()));
            }
            cmd_fit(
                &c,
                &data,
                &out,
                model.as_deref(),
                ground.as_deref(),
                workers,
            )
        }
        Command::Eval {
            cfg,
            data,
            fit,
            categories,
            out,
        } => cmd_eval(
            &load_config(&cfg)?,
            &data,
            &fit,
            categories.as_deref(),
            &out,
        ),
        Command::Gradcheck {
            cfg,
            loss,
            seed,
            count,
            step,
            tol,
        } => {
            if !(step > 0.0) || !(tol > 0.0) || count == 0 {
                return Err(CliError::Usage(
                    "--step and --tol must be > 0, --count >= 1".into(),
                ));
            }
            cmd_gradcheck(&load_config(&cfg)?, loss, seed, count, step, tol)
        }
        Command::Report { eval, fit, out } => cmd_report(&eval, &fit, &out),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => io::parse_config(p).map_err(|e| match e {
            IoError::Fs { .. } => runtime(e),
            e => CliError::Config(e.to_string()),
        })?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.set)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

// ------------------------------------------------------------------ files

fn frame_file(k: usize) -> String {
    format!("frame_{k:03}.bmlpc")
}

fn clean_file(k: usize) -> String {
    format!("clean_{k:03}.bmlpc")
}

fn indexed(prefix: &str, k: usize, ext: &str) -> String {
    format!("{prefix}_{k:03}.{ext}")
}

/// Index `k` of a file named `{prefix}_{k}.{ext}`.
fn index_of_name(name: &str, prefix: &str, ext: &str) -> Option<usize> {
    name.strip_prefix(prefix)?
        .strip_prefix('_')?
        .strip_suffix(ext)?
        .strip_suffix('.')?
        .parse()
        .ok()
}

fn create_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn file_sha(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `config.txt` and `manifest.txt`. Inputs and outputs are listed by
/// file name with their content hash, so runs in different directories on the
/// same data produce the same manifest.
fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    flags: &[(&str, String)],
    inputs: &[PathBuf],
    outputs: &[String],
) -> Result<(), CliError> {
    let text = cfg.serialize();
    std::fs::write(out.join("config.txt"), &text)
        .map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let mut recs = vec![Record::new("manifest")
        .with("command", command)
        .with("version", env!("CARGO_PKG_VERSION"))
        .with("config_sha256", sha256_hex(text.as_bytes()))
        .with("scene_seed", cfg.scene.seed)
        .with("fit_seed", cfg.fit.seed)
        .with("ransac_seed", cfg.ransac.rng_seed)
        .with("train_seed", cfg.train.seed)
        .with("labels_seed", cfg.labels.seed)];
    for (k, v) in flags {
        recs.push(Record::new("flag").with("name", k).with("value", v));
    }
    for (i, p) in inputs.iter().enumerate() {
        let name = p.file_name().map_or("-".into(), |n| {
            n.to_string_lossy().replace(char::is_whitespace, "_")
        });
        recs.push(
            Record::new("input")
                .with("index", i)
                .with("name", name)
                .with("sha256", file_sha(p)?),
        );
    }
    for name in outputs {
        recs.push(
            Record::new("output")
                .with("name", name)
                .with("sha256", file_sha(&out.join(name))?),
        );
    }
    io::write_records(&recs, &out.join("manifest.txt"))?;
    Ok(())
}

struct Dataset {
    seq: FrameSequence,
    clean: Vec<PointCloud>,
    files: Vec<PathBuf>,
}

impl Dataset {
    fn load(dir: &Path) -> Result<Self, CliError> {
        let seq_path = dir.join("sequence.txt");
        let (past, meta) = io::read_sequence(&seq_path)?;
        let mut files = vec![seq_path];
        let mut frames = Vec::with_capacity(meta.len());
        let mut clean = Vec::with_capacity(meta.len());
        for (k, (timestamp, pose)) in meta.into_iter().enumerate() {
            let fp = dir.join(frame_file(k));
            let cp = dir.join(clean_file(k));
            frames.push(Frame {
                timestamp,
                cloud: io::read_cloud(&fp)?,
                pose,
            });
            clean.push(io::read_cloud(&cp)?);
            files.push(fp);
            files.push(cp);
        }
        let seq = FrameSequence::new(frames, past).map_err(runtime)?;
        Ok(Self { seq, clean, files })
    }

    /// Center frames with both neighbors `stride` frames away.
    fn samples(&self, stride: usize) -> Result<Vec<usize>, CliError> {
        let n = self.seq.len();
        if n < 2 * stride + 1 {
            return Err(runtime(format!(
                "{n} frames hold no sample at stride {stride}"
            )));
        }
        Ok((stride..n - stride).collect())
    }
}

// ---------------------------------------------------------------- commands

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut seq = generate_scene(&cfg.scene).map_err(runtime)?;
    let o = cfg.outliers;
    if o.fraction > 0.0 {
        seq = inject_outliers(&seq, o.fraction, o.magnitude, o.seed).map_err(runtime)?;
    }
    create_out(out)?;
    let frames = seq.sequence.frames();
    let meta: Vec<_> = frames.iter().map(|f| (f.timestamp, f.pose)).collect();
    io::write_sequence(seq.sequence.past_count(), &meta, &out.join("sequence.txt"))?;
    let mut outputs = vec!["sequence.txt".to_string()];
    for (k, f) in frames.iter().enumerate() {
        io::write_cloud(&f.cloud, &out.join(frame_file(k)))?;
        io::write_cloud(&seq.clean[k], &out.join(clean_file(k)))?;
        outputs.push(frame_file(k));
        outputs.push(clean_file(k));
    }
    write_manifest(out, "gen", cfg, &[], &[], &outputs)?;
    eprintln!("gen: {} frames -> {}", frames.len(), out.display());
    Ok(())
}

fn cmd_ground(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let ds = Dataset::load(data)?;
    create_out(out)?;
    let mut recs = Vec::new();
    let mut outputs = Vec::new();
    for (k, f) in ds.seq.frames().iter().enumerate() {
        let plane = fit_ground_plane(&f.cloud, &cfg.ransac).map_err(runtime)?;
        let (ground, rest) = segment_by_plane(&f.cloud, &plane, cfg.ransac.d_thresh);
        let mut mask = vec![false; f.cloud.len()];
        for &i in &ground {
            mask[i] = true;
        }
        let name = indexed("ground", k, "mask");
        io::write_mask(&mask, &out.join(&name))?;
        outputs.push(name);
        let n = plane.normal();
        recs.push(
            Record::new("plane")
                .with("frame", k)
                .with_f64("nx", n.x)
                .with_f64("ny", n.y)
                .with_f64("nz", n.z)
                .with_f64("offset", plane.offset())
                .with_f64("tilt_deg", plane.tilt_deg())
                .with("ground", ground.len())
                .with("nonground", rest.len()),
        );
    }
    io::write_records(&recs, &out.join("planes.rec"))?;
    outputs.push("planes.rec".into());
    write_manifest(out, "ground", cfg, &[], &ds.files, &outputs)?;
    eprintln!("ground: {} frames -> {}", recs.len(), out.display());
    Ok(())
}

/// Cell features and FG/BG predictions of one cloud; points outside the grid
/// count as background.
fn predict_points(
    cfg: &RunConfig,
    model: &FgBgModel,
    cloud: &PointCloud,
) -> Result<(Vec<Category>, CategoryMap), CliError> {
    let plane = fit_ground_plane(cloud, &cfg.ransac).map_err(runtime)?;
    let (occ, assign) = voxelize(cloud, &cfg.grid).map_err(runtime)?;
    let map = predict_fgbg(model, &featurize_cells(&occ, &plane)).map_err(runtime)?;
    let cats = (0..cloud.len())
        .map(|p| {
            assign
                .cell_of(p)
                .map_or(Category::Background, |c| map.argmax(c))
        })
        .collect();
    Ok((cats, map))
}

fn cmd_segtrain(cfg: &RunConfig, data: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut corpus = Vec::new();
    let mut inputs = Vec::new();
    let (mut n_fg, mut n_bg) = (0usize, 0usize);
    for (d, dir) in data.iter().enumerate() {
        let ds = Dataset::load(dir)?;
        let cloud = &ds.seq.frames()[ds.seq.past_count()].cloud;
        let labels = cloud.labels().ok_or_else(|| {
            runtime(format!(
                "{}: current frame carries no labels",
                dir.display()
            ))
        })?;
        let plane = fit_ground_plane(cloud, &cfg.ransac).map_err(runtime)?;
        let (occ, assign) = voxelize(cloud, &cfg.grid).map_err(runtime)?;
        let feats = featurize_cells(&occ, &plane);
        let full = lift_labels_to_cells(&assign, labels).map_err(runtime)?;
        let nonempty: Vec<usize> = (0..full.len()).filter(|&c| feats.is_nonempty(c)).collect();
        let dense: Vec<Category> = nonempty.iter().map(|&c| full[c]).collect();
        let sparse = sample_weak_labels(
            &dense,
            cfg.labels.fraction,
            cfg.labels.seed.wrapping_add(d as u64),
        );
        let mut weak = vec![Category::Unlabeled; full.len()];
        for (&c, l) in nonempty.iter().zip(sparse) {
            weak[c] = l;
            n_fg += usize::from(l == Category::Foreground);
            n_bg += usize::from(l == Category::Background);
        }
        corpus.push((feats, weak));
        inputs.extend(ds.files);
    }
    let model = train_fgbg(&corpus, &cfg.train_config()).map_err(runtime)?;
    create_out(out)?;
    io::write_model(&model, &out.join("model.bmm"))?;
    let mut recs = vec![Record::new("train")
        .with("datasets", data.len())
        .with("labeled_fg", n_fg)
        .with("labeled_bg", n_bg)
        .with("epochs", model.epochs)
        .with_opt("final_loss", model.loss_curve.last().copied())];
    recs.extend(
        model
            .loss_curve
            .iter()
            .enumerate()
            .map(|(e, v)| Record::new("loss").with("epoch", e).with_f64("value", *v)),
    );
    io::write_records(&recs, &out.join("train.rec"))?;
    write_manifest(
        out,
        "segtrain",
        cfg,
        &[],
        &inputs,
        &["model.bmm".into(), "train.rec".into()],
    )?;
    eprintln!(
        "segtrain: {n_fg} FG / {n_bg} BG labeled cells -> {}",
        out.display()
    );
    Ok(())
}

fn cmd_segpredict(
    cfg: &RunConfig,
    data: &Path,
    model_path: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let ds = Dataset::load(data)?;
    let model = io::read_model(model_path)?;
    create_out(out)?;
    let mut outputs = Vec::new();
    for (k, f) in ds.seq.frames().iter().enumerate() {
        let (_, map) = predict_points(cfg, &model, &f.cloud)?;
        let name = indexed("categories", k, "bcm");
        io::write_category_map(&map, &out.join(&name))?;
        outputs.push(name);
    }
    let mut inputs = ds.files;
    inputs.push(model_path.to_path_buf());
    write_manifest(out, "segpredict", cfg, &[], &inputs, &outputs)?;
    eprintln!("segpredict: {} frames -> {}", outputs.len(), out.display());
    Ok(())
}

struct SampleFit {
    center: usize,
    field: crate::bev::MotionField,
    categories: Option<CategoryMap>,
    losses: Vec<f64>,
    best_step: usize,
    seconds: f64,
}

fn indices_where(mask: &[bool], want: bool) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, m)| **m == want)
        .map(|(i, _)| i)
        .collect()
}

fn supervision(
    cfg: &RunConfig,
    triple: &SyncedTriple,
    center: usize,
    model: Option<&FgBgModel>,
    masks: Option<&[Vec<bool>]>,
) -> Result<(Supervision, Option<CategoryMap>), CliError> {
    let s = cfg.stride;
    match cfg.fit.mode {
        SupervisionMode::Fb => {
            let model = model.expect("checked by the caller");
            let (past, _) = predict_points(cfg, model, &triple.past)?;
            let (current, map) = predict_points(cfg, model, &triple.current)?;
            let (future, _) = predict_points(cfg, model, &triple.future)?;
            Ok((
                Supervision::from_categories(&past, &current, &future),
                Some(map),
            ))
        }
        mode => {
            let mut sup = match masks {
                Some(m) => {
                    let (p, c, f) = (&m[center - s], &m[center], &m[center + s]);
                    if p.len() != triple.past.len()
                        || c.len() != triple.current.len()
                        || f.len() != triple.future.len()
                    {
                        return Err(runtime("ground masks do not match the frame clouds"));
                    }
                    Supervision {
                        past_dynamic: indices_where(p, false),
                        current_dynamic: indices_where(c, false),
                        future_dynamic: indices_where(f, false),
                        current_static: indices_where(c, true),
                        current_labels: None,
                    }
                }
                None => Supervision::from_ground(triple, &cfg.ransac).map_err(runtime)?,
            };
            if mode == SupervisionMode::Ng {
                let labels = triple
                    .current
                    .labels()
                    .ok_or_else(|| runtime("ng mode needs labeled frames"))?;
                let seed = cfg.labels.seed.wrapping_add(center as u64);
                sup = sup.with_labels(sample_weak_labels(labels, cfg.labels.fraction, seed));
            }
            Ok((sup, None))
        }
    }
}

fn cmd_fit(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    model_path: Option<&Path>,
    ground: Option<&Path>,
    workers: usize,
) -> Result<(), CliError> {
    let ds = Dataset::load(data)?;
    let centers = ds.samples(cfg.stride)?;
    let mut inputs = ds.files.clone();
    let model = match model_path {
        Some(p) => {
            inputs.push(p.to_path_buf());
            Some(io::read_model(p)?)
        }
        None => None,
    };
    let masks = match ground {
        Some(dir) => {
            let mut m = Vec::new();
            for k in 0..ds.seq.len() {
                let p = dir.join(indexed("ground", k, "mask"));
                m.push(io::read_mask(&p)?);
                inputs.push(p);
            }
            Some(m)
        }
        None => None,
    };

    let fit_one = |center: usize| -> Result<SampleFit, CliError> {
        let start = Instant::now();
        let triple = extract_triple_at(&ds.seq, center, cfg.stride).map_err(runtime)?;
        let (sup, map) = supervision(cfg, &triple, center, model.as_ref(), masks.as_deref())?;
        let fit = fit_motion_field(&triple, &sup, &cfg.grid, &cfg.fit)
            .map_err(|e| runtime(format!("sample {center}: {e}")))?;
        // only the fb classifier labels every cell; the ng auxiliary scores are
        // fitted on the labeled cells alone, so ng fields are not zeroed
        let categories = map;
        let field = match &categories {
            Some(c) => zero_background(&fit.field, c).map_err(runtime)?,
            None => fit.field,
        };
        Ok(SampleFit {
            center,
            field,
            categories,
            best_step: fit.trace.best_step,
            losses: fit.trace.losses,
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(runtime)?;
    let fits: Vec<SampleFit> = pool
        .install(|| centers.par_iter().map(|&c| fit_one(c)).collect::<Vec<_>>())
        .into_iter()
        .collect::<Result<_, _>>()?;

    create_out(out)?;
    let mut outputs = Vec::new();
    let mut recs = Vec::new();
    for f in &fits {
        let name = indexed("field", f.center, "bmf");
        io::write_field(&f.field, &out.join(&name))?;
        outputs.push(name);
        if let Some(c) = &f.categories {
            let name = indexed("categories", f.center, "bcm");
            io::write_category_map(c, &out.join(&name))?;
            outputs.push(name);
        }
        recs.push(
            Record::new("fit")
                .with("sample", f.center)
                .with("mode", cfg.fit.mode.name())
                .with("steps", f.losses.len())
                .with("best_step", f.best_step)
                .with_f64("best_loss", f.losses[f.best_step])
                .with("zeroed", f.categories.is_some()),
        );
        recs.extend(f.losses.iter().enumerate().map(|(s, v)| {
            Record::new("loss")
                .with("sample", f.center)
                .with("step", s)
                .with_f64("value", *v)
        }));
        eprintln!(
            "fit: sample {} best step {} in {:.2}s",
            f.center, f.best_step, f.seconds
        );
    }
    io::write_records(&recs, &out.join("fit.rec"))?;
    outputs.push("fit.rec".into());
    let flags = [
        ("mode", cfg.fit.mode.name().to_string()),
        ("ground", ground.is_some().to_string()),
    ];
    write_manifest(out, "fit", cfg, &flags, &inputs, &outputs)?;
    Ok(())
}

fn sorted_indexed(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<(usize, PathBuf)>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(runtime)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(k) = index_of_name(&name, prefix, ext) {
            out.push((k, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    fit_dir: &Path,
    categories: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let ds = Dataset::load(data)?;
    let fields = sorted_indexed(fit_dir, "field", "bmf")?;
    if fields.is_empty() {
        return Err(runtime(format!(
            "{}: no field_NNN.bmf files",
            fit_dir.display()
        )));
    }
    let cat_dir = categories.unwrap_or(fit_dir);
    let mut inputs = ds.files.clone();
    let mut recs = Vec::new();
    for (k, path) in fields {
        let clean = ds.clean.get(k).ok_or_else(|| {
            runtime(format!(
                "field for frame {k} but the sequence has {} frames",
                ds.clean.len()
            ))
        })?;
        let truth = cell_truth(clean, &cfg.grid).map_err(runtime)?;
        let field = io::read_field(&path)?;
        inputs.push(path);
        let pred = extrapolate_to_1s(&field).map_err(runtime)?;
        let m = motion_errors(&pred, &truth, &cfg.eval).map_err(runtime)?;
        for g in [SpeedGroup::Static, SpeedGroup::Slow, SpeedGroup::Fast] {
            let s = m.group(g);
            recs.push(
                Record::new("motion")
                    .with("sample", k)
                    .with("group", g.name())
                    .with("count", s.count)
                    .with_opt("mean", s.mean)
                    .with_opt("median", s.median),
            );
        }
        let cp = cat_dir.join(indexed("categories", k, "bcm"));
        if cp.exists() {
            let map = io::read_category_map(&cp)?;
            let s = seg_accuracy(&map, &truth).map_err(runtime)?;
            inputs.push(cp);
            recs.push(
                Record::new("seg")
                    .with("sample", k)
                    .with_opt("bg", s.bg)
                    .with_opt("fg", s.fg)
                    .with_opt("overall", s.overall)
                    .with("bg_cells", s.bg_cells)
                    .with("fg_cells", s.fg_cells),
            );
        }
    }
    create_out(out)?;
    io::write_records(&recs, &out.join("metrics.rec"))?;
    write_manifest(out, "eval", cfg, &[], &inputs, &["metrics.rec".into()])?;
    for r in &recs {
        println!("{r}");
    }
    Ok(())
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-0.8..0.8),
            ]
        })
        .collect();
    PointCloud::from_xyz(&pts).expect("finite")
}

fn motion3(x: &[f64]) -> Vec<Vector3<f64>> {
    x.chunks(2).map(|c| Vector3::new(c[0], c[1], 0.0)).collect()
}

fn shifted(c: &PointCloud, m: &[Vector3<f64>]) -> PointCloud {
    let pts: Vec<[f64; 3]> = c
        .points()
        .iter()
        .zip(m)
        .map(|(p, d)| [p.x + d.x, p.y + d.y, p.z])
        .collect();
    PointCloud::from_xyz(&pts).expect("finite")
}

fn flat2(g: &[nalgebra::Vector2<f64>]) -> Vec<f64> {
    g.iter().flat_map(|v| [v.x, v.y]).collect()
}

/// Smallest step used on the piecewise-linear losses, whose exactly-cancelling
/// subgradients leave only finite-difference roundoff against the 1e-8 floor.
const PIECEWISE_STEP: f64 = 1e-3;

/// Largest relative gradient error of `loss` on a random instance drawn from
/// `seed`, and the step actually used. Instances of the piecewise-linear losses
/// are redrawn until no kink lies within twice the step.
pub fn gradcheck_error(
    cfg: &RunConfig,
    loss: LossArg,
    seed: u64,
    count: usize,
    step: f64,
) -> Result<(f64, f64), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lc = cfg.fit.loss;
    let n = 30;
    let a = random_cloud(&mut rng, n);
    let piecewise = matches!(loss, LossArg::Smooth | LossArg::Static);
    let step = if piecewise {
        step.max(PIECEWISE_STEP)
    } else {
        step
    };
    let nb_a = build_neighborhoods(a.points(), lc.smooth_radius, lc.smooth_k);
    let x0 = loop {
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-0.6..0.6)).collect();
        let clear = match loss {
            LossArg::Static => x.iter().all(|v| v.abs() > 2.0 * step),
            LossArg::Smooth => nb_a.iter().enumerate().all(|(i, js)| {
                js.iter()
                    .all(|&j| (0..2).all(|d| (x[2 * i + d] - x[2 * j + d]).abs() > 2.0 * step))
            }),
            _ => true,
        };
        if clear {
            break x;
        }
    };
    let b = random_cloud(&mut rng, n + 5);
    let past = random_cloud(&mut rng, n + 3);
    let fail =
        |e: crate::losses::LossError| -> (f64, Vec<f64>) { panic!("loss evaluation failed: {e}") };
    let err = match loss {
        LossArg::Chamfer => gradient_check(
            |x| {
                chamfer_l2(&shifted(&a, &motion3(x)), &b)
                    .map_or_else(fail, |r| (r.value, flat2(&r.grad)))
            },
            &x0,
            step,
            count,
            seed,
        ),
        LossArg::Wrc => {
            let ws: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let wt: Vec<f64> = (0..n + 5).map(|_| rng.random_range(0.1..1.0)).collect();
            gradient_check(
                |x| {
                    weighted_robust_chamfer(&shifted(&a, &motion3(x)), &b, &ws, &wt, lc.penalty)
                        .map_or_else(fail, |r| (r.value, flat2(&r.grad)))
                },
                &x0,
                step,
                count,
                seed,
            )
        }
        LossArg::Rccd | LossArg::Composite => {
            let t = SyncedTriple::new(past, a.clone(), b, 0.5).map_err(runtime)?;
            if loss == LossArg::Rccd {
                gradient_check(
                    |x| rccd(&t, &motion3(x), &lc).map_or_else(fail, |r| (r.value, flat2(&r.grad))),
                    &x0,
                    step,
                    count,
                    seed,
                )
            } else {
                let nb = build_neighborhoods(t.current.points(), lc.smooth_radius, lc.smooth_k);
                let ml = MotionLoss::new(cfg.fit.mode, &t, &nb, &lc).map_err(runtime)?;
                let n_static = 10;
                let mut xs = x0.clone();
                xs.extend((0..2 * n_static).map(|_| rng.random_range(-0.6..0.6)));
                gradient_check(
                    |x| {
                        let (d, s) = x.split_at(2 * n);
                        ml.evaluate(&motion3(d), &motion3(s))
                            .map_or_else(fail, |r| {
                                let r = r.report();
                                (r.value, flat2(&r.grad))
                            })
                    },
                    &xs,
                    step,
                    count,
                    seed,
                )
            }
        }
        LossArg::Smooth => gradient_check(
            |x| smoothness(&a, &motion3(x), &nb_a).map_or_else(fail, |r| (r.value, flat2(&r.grad))),
            &x0,
            step,
            count,
            seed,
        ),
        LossArg::Static => gradient_check(
            |x| {
                let r = static_loss(&motion3(x));
                (r.value, flat2(&r.grad))
            },
            &x0,
            step,
            count,
            seed,
        ),
        LossArg::Cls => {
            let labels: Vec<Category> = (0..n)
                .map(|i| match i % 3 {
                    0 => Category::Foreground,
                    1 => Category::Background,
                    _ => Category::Unlabeled,
                })
                .collect();
            let s0: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
            gradient_check(
                |x| {
                    let scores: Vec<[f64; 2]> = x.chunks(2).map(|c| [c[0], c[1]]).collect();
                    weak_cls_loss(&scores, &labels, lc.alpha_bg)
                        .map_or_else(fail, |r| (r.value, flat2(&r.grad)))
                },
                &s0,
                step,
                count,
                seed,
            )
        }
    };
    Ok((err, step))
}

fn cmd_gradcheck(
    cfg: &RunConfig,
    loss: LossArg,
    seed: u64,
    count: usize,
    step: f64,
    tol: f64,
) -> Result<(), CliError> {
    let (err, step) = gradcheck_error(cfg, loss, seed, count, step)?;
    let name = loss
        .to_possible_value()
        .map_or("?".into(), |v| v.get_name().to_string());
    let pass = err < tol;
    println!(
        "{}",
        Record::new("gradcheck")
            .with("loss", &name)
            .with("seed", seed)
            .with("count", count)
            .with_f64("step", step)
            .with_f64("max_rel_err", err)
            .with_f64("tol", tol)
            .with("pass", pass)
    );
    if pass {
        Ok(())
    } else {
        Err(runtime(format!(
            "{name}: max relative error {err:e} >= {tol:e}"
        )))
    }
}

#[derive(Default)]
struct GroupAgg {
    count: usize,
    weighted: f64,
}

fn cmd_report(evals: &[PathBuf], fits: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let run_name = |p: &Path| -> String {
        p.file_name().map_or("run".into(), |n| {
            n.to_string_lossy().replace(char::is_whitespace, "_")
        })
    };
    let groups = [SpeedGroup::Static, SpeedGroup::Slow, SpeedGroup::Fast];
    let mut series = Vec::new();
    let mut table = format!("{:<24}", "run");
    for g in groups {
        table.push_str(&format!(
            " {:>12} {:>8}",
            format!("{}_mean", g.name()),
            "cells"
        ));
    }
    table.push_str(&format!(" {:>10}\n", "seg_acc"));
    let mut inputs = Vec::new();
    for dir in evals {
        let path = dir.join("metrics.rec");
        let recs = io::read_records(&path)?;
        inputs.push(path);
        let name = run_name(dir);
        let mut agg: [GroupAgg; 3] = Default::default();
        let (mut seg_right, mut seg_n) = (0.0, 0usize);
        for r in &recs {
            match r.kind.as_str() {
                "motion" => {
                    let g = groups
                        .iter()
                        .position(|g| Some(g.name()) == r.get("group"))
                        .ok_or_else(|| runtime(format!("{name}: unknown group")))?;
                    let count: usize = r.get("count").and_then(|c| c.parse().ok()).unwrap_or(0);
                    if let Some(m) = r.get_f64("mean")? {
                        agg[g].count += count;
                        agg[g].weighted += m * count as f64;
                    }
                }
                "seg" => {
                    let cells = ["bg_cells", "fg_cells"]
                        .iter()
                        .map(|k| r.get(k).and_then(|c| c.parse::<usize>().ok()).unwrap_or(0))
                        .sum::<usize>();
                    if let Some(o) = r.get_f64("overall")? {
                        seg_right += o * cells as f64;
                        seg_n += cells;
                    }
                }
                _ => {}
            }
        }
        table.push_str(&format!("{name:<24}"));
        for (g, a) in groups.iter().zip(&agg) {
            let mean = (a.count > 0).then(|| a.weighted / a.count as f64);
            table.push_str(&match mean {
                Some(m) => format!(" {m:>12.4} {:>8}", a.count),
                None => format!(" {:>12} {:>8}", "-", 0),
            });
            series.push(
                Record::new("bar")
                    .with("run", &name)
                    .with("group", g.name())
                    .with("cells", a.count)
                    .with_opt("mean", mean),
            );
        }
        let seg = (seg_n > 0).then(|| seg_right / seg_n as f64);
        table.push_str(&match seg {
            Some(s) => format!(" {s:>10.4}\n"),
            None => format!(" {:>10}\n", "-"),
        });
        if seg.is_some() {
            series.push(
                Record::new("seg")
                    .with("run", &name)
                    .with_opt("overall", seg),
            );
        }
    }
    for dir in fits {
        let path = dir.join("fit.rec");
        let recs = io::read_records(&path)?;
        inputs.push(path);
        let name = run_name(dir);
        for r in recs.iter().filter(|r| r.kind == "loss") {
            let mut c = Record::new("curve").with("run", &name);
            c.fields.extend(r.fields.iter().cloned());
            series.push(c);
        }
    }
    create_out(out)?;
    std::fs::write(out.join("table.txt"), &table)
        .map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    io::write_records(&series, &out.join("series.rec"))?;
    write_manifest(
        out,
        "report",
        &RunConfig::default(),
        &[],
        &inputs,
        &["table.txt".into(), "series.rec".into()],
    )?;
    print!("{table}");
    Ok(())
}
