use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecm_core::motion_curves::MotionCurveSet;

const TINY: &str = r#"
[data]
clip_count = 4
frames = 6
height = 32
width = 32

[codec]
base_channels = 4

[codec_train]
steps = 20
batch_frames = 4

[model]
height = 32
width = 32
base_channels = 8
time_dim = 16
groups = 4
sampling_steps = 4

[model.motion]
levels = 3
dim = 16

[model.conditioning]
patch = 8
encoder_channels = 2
dim = 16
cond_dim = 8

[train]
steps = 6
frames = 4
log_every = 1
"#;

fn ecm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecm")).args(args).env("ECM_DETERMINISTIC", "1").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ecm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default().to_string();
    assert!(line.starts_with("error kind="), "not a machine-readable error: {text}");
    line
}

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let this = Pipeline { _dir: dir, root };
        fs::write(this.p("run.toml"), TINY).unwrap();
        let cfg = this.p("run.toml");
        ok(&["make-data", "--config", s(&cfg), "--out", s(&this.p("data"))]);
        ok(&["train-codec", "--config", s(&cfg), "--data", s(&this.p("data")), "--out", s(&this.p("codec.ckpt"))]);
        ok(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&this.p("data")),
            "--codec",
            s(&this.p("codec.ckpt")),
            "--out",
            s(&this.p("den.ckpt")),
            "--log",
            s(&this.p("train.csv")),
        ]);
        this
    }

    fn first_clip(&self) -> PathBuf {
        let mut clips: Vec<_> = fs::read_dir(self.p("data"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "ecmv"))
            .collect();
        clips.sort();
        clips.remove(0)
    }

    fn generate(&self, curves: &Path, out: &Path, extra: &[&str]) -> Output {
        let (den, codec, clip) = (self.p("den.ckpt"), self.p("codec.ckpt"), self.first_clip());
        let mut args = vec!["generate", "--checkpoint", s(&den), "--codec", s(&codec), "--frame", s(&clip)];
        args.extend_from_slice(&["--curves", s(curves), "--out", s(out)]);
        args.extend_from_slice(extra);
        ecm(&args)
    }
}

#[test]
fn pipeline_runs_end_to_end_and_is_reproducible() {
    let pl = Pipeline::new();
    assert!(fs::read_to_string(pl.p("train.csv")).unwrap().lines().count() > 1);

    let curves = pl.p("curves.json");
    ok(&["extract-curves", "--clip", s(&pl.first_clip()), "--out", s(&curves)]);

    let (a, b) = (pl.p("gen_a.ecmv"), pl.p("gen_b.ecmv"));
    let png = pl.p("frames");
    let plot = pl.p("plot.png");
    let out = pl.generate(&curves, &a, &["--seed", "3", "--png-dir", s(&png), "--plot", s(&plot)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(pl.generate(&curves, &b, &["--seed", "3"]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "generation must be byte-identical");
    assert_eq!(fs::read_dir(&png).unwrap().count(), 6);
    assert!(image::open(&plot).is_ok());

    let other = pl.p("gen_c.ecmv");
    assert!(pl.generate(&curves, &other, &["--seed", "4"]).status.success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&other).unwrap());

    let report = pl.p("report");
    ok(&[
        "evaluate",
        "--generated",
        s(&a),
        "--targets",
        s(&pl.first_clip()),
        "--out-dir",
        s(&report),
        "--config",
        s(&pl.p("run.toml")),
        "--features",
        s(&pl.p("den.ckpt")),
    ]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("metrics.json")).unwrap()).unwrap();
    assert!(json["aggregates"]["ssim"].is_number());
    assert!(json["aggregates"]["frechet"].is_number());
    assert!(json["config"].as_str().unwrap().contains("[model]"));
    assert!(report.join("metrics.csv").exists());

    ok(&["plot", "--curves", s(&curves), "--generated", s(&a), "--out", s(&pl.p("p2.png"))]);

    // A config with a different model is rejected before sampling.
    fs::write(pl.p("other.toml"), TINY.replace("time_dim = 16", "time_dim = 32")).unwrap();
    let out = pl.generate(&curves, &pl.p("x.ecmv"), &["--config", s(&pl.p("other.toml"))]);
    assert_eq!(out.status.code(), Some(5));
    assert!(error_line(&out).contains("kind=mismatch"));
}

#[test]
fn edit_curves_identity_and_edits() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("run.toml"), TINY).unwrap();
    ok(&["make-data", "--config", s(&root.join("run.toml")), "--out", s(&root.join("data"))]);
    let clip = root.join("data").join("clip-00000.ecmv");
    let curves = root.join("c.json");
    ok(&["extract-curves", "--clip", s(&clip), "--out", s(&curves)]);
    let original = MotionCurveSet::read(&curves).unwrap();

    let same = root.join("same.json");
    ok(&["edit-curves", "--input", s(&curves), "--out", s(&same), "--scale", "0:1.0"]);
    assert_eq!(MotionCurveSet::read(&same).unwrap(), original);

    let wide = root.join("wide.json");
    ok(&["edit-curves", "--input", s(&curves), "--out", s(&wide), "--scale", "0:1.5"]);
    assert_ne!(MotionCurveSet::read(&wide).unwrap(), original);

    let swapped = root.join("swapped.json");
    ok(&["edit-curves", "--input", s(&curves), "--out", s(&swapped), "--replace", &format!("1:{}", s(&wide))]);
    assert_eq!(MotionCurveSet::read(&swapped).unwrap(), original, "category 1 is unchanged in the scaled file");

    let long = root.join("long.json");
    ok(&["edit-curves", "--input", s(&curves), "--out", s(&long), "--resample", "11"]);
    assert_eq!(MotionCurveSet::read(&long).unwrap().frames, 11);

    let out = ecm(&["edit-curves", "--input", s(&curves), "--out", s(&long), "--scale", "9:2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ecm(&["edit-curves", "--input", s(&curves), "--out", s(&long), "--scale", "0:2", "--resample", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn errors_are_one_line_with_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let out = ecm(&["make-data", "--config", s(&root.join("missing.toml")), "--out", s(&root.join("d"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out).contains("kind=io"));

    fs::write(root.join("bad.toml"), "[data]\nclip_count = 2\nbogus_key = 1\n").unwrap();
    let out = ecm(&["make-data", "--config", s(&root.join("bad.toml")), "--out", s(&root.join("d"))]);
    assert_eq!(out.status.code(), Some(4));
    let line = error_line(&out);
    assert!(line.contains("kind=config") && line.contains("bogus_key"), "{line}");

    fs::write(root.join("mixed.toml"), "[data]\nheight = 48\n").unwrap();
    let out = ecm(&["make-data", "--config", s(&root.join("mixed.toml")), "--out", s(&root.join("d"))]);
    assert_eq!(out.status.code(), Some(4));

    let out = Command::new(env!("CARGO_BIN_EXE_ecm"))
        .args(["make-data", "--config", s(&root.join("bad.toml")), "--out", s(&root.join("d"))])
        .env("ECM_DETERMINISTIC", "maybe")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));

    let out = ecm(&["make-data", "--config"]);
    assert_eq!(out.status.code(), Some(2), "argument errors come from the parser");
}

#[test]
fn codec_mismatch_is_rejected() {
    let pl = Pipeline::new();
    let other = TINY.replace("base_channels = 4", "base_channels = 6");
    fs::write(pl.p("other.toml"), other).unwrap();
    ok(&["train-codec", "--config", s(&pl.p("other.toml")), "--data", s(&pl.p("data")), "--out", s(&pl.p("codec2.ckpt"))]);
    let clip = pl.first_clip();
    let curves = pl.p("c.json");
    ok(&["extract-curves", "--clip", s(&clip), "--out", s(&curves)]);
    let out = ecm(&[
        "generate",
        "--checkpoint",
        s(&pl.p("den.ckpt")),
        "--codec",
        s(&pl.p("codec2.ckpt")),
        "--frame",
        s(&clip),
        "--curves",
        s(&curves),
        "--out",
        s(&pl.p("g.ecmv")),
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}
