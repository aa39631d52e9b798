use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowvid_core::manifest::KeyValues;
use flowvid_core::media::load_clip;

fn flowvid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowvid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = flowvid(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    flowvid(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_MODEL: &str = "width=16\ngroups=4\nd_txt=16\ntemb_dim=32\n";

/// A 12-frame clip and a briefly trained small model.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let (clip, model) = (root.join("clip"), root.join("model"));
    ok(&["synth", "--output", s(&clip), "--frames", "12", "--seed", "4"]);
    let cfg = root.join("small.txt");
    fs::write(&cfg, SMALL_MODEL).unwrap();
    ok(&["train", "--input", s(&clip), "--output", s(&model), "--steps", "10", "--config", s(&cfg)]);
    (clip, model)
}

#[test]
fn synth_writes_frames_flow_and_depth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scene");
    ok(&["synth", "--output", s(&out), "--scene", "panning", "--frames", "12"]);
    assert_eq!(load_clip(&out).unwrap().len(), 12);
    for i in 1..=12 {
        for f in [
            format!("gt/flow_fwd_{i:04}.flo"),
            format!("gt/flow_bwd_{i:04}.flo"),
            format!("gt/occ_bwd_{i:04}.pgm"),
            format!("depth/depth_{i:04}.fvt"),
        ] {
            assert!(out.join(&f).exists(), "{f}");
        }
    }
    let cfg = KeyValues::load(out.join("config.txt")).unwrap();
    assert_eq!(cfg.get("scene"), Some("panning"));
    let m = KeyValues::load(out.join("manifest.txt")).unwrap();
    assert_eq!(m.get("frames"), Some("12"));
}

#[test]
fn flow_reports_error_against_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("clip");
    ok(&["synth", "--output", s(&clip), "--frames", "4", "--scene", "panning"]);
    let out = dir.path().join("flow");
    ok(&["flow", "--input", s(&clip), "--output", s(&out)]);
    let m = KeyValues::load(out.join("manifest.txt")).unwrap();
    let epe: f64 = m.parse("epe_bwd_mean").unwrap();
    assert!(epe < 0.5, "{epe}");
    assert!(out.join("occ_fwd_0004.pgm").exists());
}

#[test]
fn warp_and_conditions_write_clips() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("clip");
    ok(&["synth", "--output", s(&clip), "--frames", "5"]);
    let (w, c) = (dir.path().join("warp"), dir.path().join("cond"));
    ok(&["warp", "--input", s(&clip), "--output", s(&w), "--editor", "colormap"]);
    ok(&["conditions", "--input", s(&clip), "--output", s(&c), "--control", "depth"]);
    assert_eq!(load_clip(&w).unwrap().len(), 5);
    assert_eq!(load_clip(&c).unwrap().len(), 5);
    // Without depth maps next to the clip, depth control is a data error.
    fs::remove_dir_all(clip.join("depth")).unwrap();
    assert_eq!(code(&["conditions", "--input", s(&clip), "--output", s(&c), "--control", "depth"]), 3);
}

#[test]
fn generate_invert_bench_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (clip, model) = fixture(dir.path());
    let gen = dir.path().join("gen");
    let plan = ["--interval", "2", "--batch-frames", "4", "--batches", "2", "--steps", "4"];
    let mut args = vec!["generate", "--input", s(&clip), "--model", s(&model), "--output", s(&gen)];
    args.extend(plan);
    ok(&args);
    let m = KeyValues::load(gen.join("manifest.txt")).unwrap();
    assert_eq!(m.get("key_indices"), Some("0,2,4,6,8,10,11"));
    assert_eq!(m.get("injected"), Some("true,true"));
    assert_eq!(load_clip(&gen).unwrap().len(), 13);
    assert_eq!(load_clip(gen.join("keys")).unwrap().len(), 7);

    // The written config reproduces the run.
    let again = dir.path().join("again");
    ok(&["generate", "--config", s(&gen.join("config.txt")), "--output", s(&again)]);
    assert_eq!(load_clip(&again).unwrap(), load_clip(&gen).unwrap());

    let inv = dir.path().join("inv");
    ok(&["invert", "--input", s(&clip), "--model", s(&model), "--output", s(&inv), "--interval", "2", "--batch-frames", "4", "--steps", "4"]);
    assert!(inv.join("latents/latent_0004.fvt").exists());
    assert!(inv.join("attention/index.txt").exists());

    let met = dir.path().join("met");
    ok(&["metrics", "--input", s(&gen), "--reference", s(&clip), "--output", s(&met)]);
    let m = KeyValues::load(met.join("metrics.txt")).unwrap();
    assert!(m.parse::<f64>("temporal_consistency").unwrap().is_finite());

    let bench = dir.path().join("bench");
    let mut args = vec!["bench", "--input", s(&clip), "--model", s(&model), "--output", s(&bench)];
    args.extend(plan);
    ok(&args);
    let csv = fs::read_to_string(bench.join("bench.csv")).unwrap();
    let rows: Vec<(String, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect();
    let names: Vec<&str> = rows.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(
        names,
        ["flow", "warping", "inversion", "keyframe_sampling", "interpolation", "total"]
    );
    let total = rows[5].1;
    let staged: f64 = rows[..5].iter().map(|(_, v)| v).sum();
    assert!((total - staged).abs() <= 0.1 * total, "stages {staged} of {total}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (clip, model) = fixture(dir.path());
    let out = dir.path().join("out");
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "sead=3\n").unwrap();
    assert_eq!(code(&["generate", "--config", s(&bad), "--output", s(&out)]), 2);
    assert_eq!(code(&["generate", "--no-such-flag"]), 2);
    assert_eq!(code(&["generate", "--input", s(&clip), "--model", s(&model), "--output", s(&out), "--editor", "sepia"]), 2);
    assert_eq!(code(&["generate", "--input", s(&clip), "--output", s(&out)]), 2);
    assert_eq!(code(&["generate", "--input", s(&dir.path().join("missing")), "--model", s(&model), "--output", s(&out)]), 3);

    // An edit image of the wrong size.
    let small = dir.path().join("small");
    ok(&["synth", "--output", s(&small), "--frames", "2", "--config", s(&write(dir.path(), "dims.txt", "frame_width=32\nframe_height=32\n"))]);
    let edit = format!("file:{}", small.join("frame_0001.ppm").display());
    let base = ["generate", "--input", s(&clip), "--model", s(&model), "--output", s(&out), "--interval", "2", "--batch-frames", "3", "--steps", "2"];
    let mut args = base.to_vec();
    args.extend(["--editor", &edit]);
    assert_eq!(code(&args), 3);

    // A learning rate that blows the weights up on the first update.
    let lr = write(dir.path(), "lr.txt", &format!("{SMALL_MODEL}learning_rate=1e300\n"));
    let m2 = dir.path().join("m2");
    assert_eq!(code(&["train", "--input", s(&clip), "--output", s(&m2), "--steps", "5", "--config", s(&lr)]), 4);
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}
