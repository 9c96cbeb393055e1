use std::path::Path;
use std::process::Command;

use bevmotion::io::{read_records, Record};

const BIN: &str = env!("CARGO_BIN_EXE_bevmotion");

/// Small static scene on a 24 m grid: ground plus two parked boxes, moving ego.
const STATIC_SCENE: &str = "\
grid.x_min = -12
grid.x_max = 12
grid.y_min = -12
grid.y_max = 12
scene.ground_extent = 14
scene.ego_vx = 2
scene.static = -6 5 0 4 2 1.5 0 0 0
scene.static = 5 -6 0.4 3 3 2 0 0 0
fit.steps = 120
";

fn bevmotion(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn static_scene_pipeline_recovers_zero_motion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, STATIC_SCENE).unwrap();
    let (data, ground, fit, eval) = (
        dir.path().join("data"),
        dir.path().join("ground"),
        dir.path().join("fit"),
        dir.path().join("eval"),
    );
    let c = p(&cfg);
    assert_eq!(bevmotion(&["gen", "--config", c, "--out", p(&data)]).0, 0);
    let frame = std::fs::read(data.join("frame_001.bmlpc")).unwrap();
    assert_eq!(
        bevmotion(&[
            "ground",
            "--config",
            c,
            "--data",
            p(&data),
            "--out",
            p(&ground)
        ])
        .0,
        0
    );
    let (code, log) = bevmotion(&[
        "fit",
        "--config",
        c,
        "--mode",
        "self",
        "--data",
        p(&data),
        "--ground",
        p(&ground),
        "--out",
        p(&fit),
    ]);
    assert_eq!(code, 0, "{log}");
    assert_eq!(
        bevmotion(&[
            "eval",
            "--config",
            c,
            "--data",
            p(&data),
            "--fit",
            p(&fit),
            "--out",
            p(&eval)
        ])
        .0,
        0
    );

    // inputs untouched
    assert_eq!(std::fs::read(data.join("frame_001.bmlpc")).unwrap(), frame);

    let recs = read_records(&eval.join("metrics.rec")).unwrap();
    let stat: &Record = recs
        .iter()
        .find(|r| r.kind == "motion" && r.get("group") == Some("static"))
        .unwrap();
    let mean = stat.get_f64("mean").unwrap().unwrap();
    assert!(mean < 0.05, "static mean error {mean}");
    assert!(recs
        .iter()
        .filter(|r| r.kind == "motion" && r.get("group") != Some("static"))
        .all(|r| r.get("count") == Some("0")));

    let manifest = read_records(&fit.join("manifest.txt")).unwrap();
    assert_eq!(manifest[0].get("command"), Some("fit"));
    assert_eq!(manifest[0].get("config_sha256").map(str::len), Some(64));
    assert!(manifest
        .iter()
        .any(|r| r.kind == "output" && r.get("name") == Some("field_001.bmf")));

    let report = dir.path().join("report");
    let (code, table) = bevmotion(&[
        "report",
        "--eval",
        p(&eval),
        "--fit",
        p(&fit),
        "--out",
        p(&report),
    ]);
    assert_eq!(code, 0);
    assert!(table.contains("static_mean"));
    assert!(read_records(&report.join("series.rec"))
        .unwrap()
        .iter()
        .any(|r| r.kind == "curve"));
}

#[test]
fn gradcheck_rccd_exits_zero() {
    let (code, out) = bevmotion(&["gradcheck", "--loss", "rccd"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("pass=true"));
}

#[test]
fn gradcheck_failure_exits_one() {
    // a central difference over a 0.5 m step cannot match to 1e-12
    let (code, _) = bevmotion(&[
        "gradcheck",
        "--loss",
        "rccd",
        "--step",
        "0.5",
        "--tol",
        "1e-12",
    ]);
    assert_eq!(code, 1);
}

#[test]
fn fit_fb_without_model_is_a_usage_error() {
    let (code, out) = bevmotion(&["fit", "--mode", "fb", "--data", "d", "--out", "o"]);
    assert_eq!(code, 2);
    assert!(out.contains("--model"));
}

#[test]
fn invalid_config_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "loss.theta_sq = -1\n").unwrap();
    let (code, out) = bevmotion(&[
        "gen",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code, 3);
    assert!(out.contains("theta_sq"));
}

#[test]
fn help_lists_every_command() {
    let (code, out) = bevmotion(&["--help"]);
    assert_eq!(code, 0);
    for c in [
        "gen",
        "ground",
        "segtrain",
        "segpredict",
        "fit",
        "eval",
        "gradcheck",
        "report",
    ] {
        assert!(out.contains(c), "{c}");
    }
}
