use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use contour_spt::checkpoint;
use contour_spt::data::{read_manifest, read_raster, synth_generate, write_pgm};
use contour_spt_cli::RunConfig;
use tempfile::TempDir;

const TINY: &str = "\
[synth]
identities = 6
images_per_camera = 3

[train]
stage_epochs = [1, 1, 1]
triplets_per_epoch = 8
batch_triplets = 4

[eval]
trials = 3
";

fn bin(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_contour-spt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    eprintln!("contour-spt {args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = bin(dir, args);
    assert!(out.status.success(), "{args:?} failed");
    out
}

/// A temporary directory holding `tiny.toml` plus `extra` and pointing `out`
/// at `run/`.
fn workspace(extra: &str) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), format!("out = \"run\"\n{extra}{TINY}")).unwrap();
    let run = dir.path().join("run");
    (dir, run)
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_every_image_and_repeats_bytes() {
    let (dir, run) = workspace("");
    ok(dir.path(), &["--config", "tiny.toml", "synth"]);
    ok(dir.path(), &["--config", "tiny.toml", "--out", "again", "synth"]);
    for cam in ["A", "B", "C"] {
        assert!(run.join("data").join(cam).is_dir());
    }
    let manifest = fs::read_to_string(run.join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 6 * 3 * 3);
    assert_eq!(files_under(&run.join("data")), files_under(&dir.path().join("again/data")));

    let cfg = RunConfig::load(&dir.path().join("tiny.toml")).unwrap();
    assert_eq!(read_manifest(&run.join("data/manifest.csv")).unwrap(), synth_generate(&cfg.synth).unwrap().meta);
    assert!(run.join("config.synth.toml").exists());

    ok(dir.path(), &["--config", "tiny.toml", "--out", "reseeded", "--seed", "5", "synth"]);
    assert_ne!(files_under(&run.join("data")), files_under(&dir.path().join("reseeded/data")));
}

#[test]
fn train_eval_transform_round_trip() {
    let (dir, run) = workspace("");
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "synth"]);
    ok(d, &["--config", "tiny.toml", "train"]);
    for k in 1..=3 {
        assert!(run.join(format!("checkpoints/stage{k}.sptn")).exists());
    }
    for k in 0..3 {
        assert!(run.join(format!("theta_epoch{k}.csv")).exists());
    }
    assert!(run.join("model.sptn.toml").exists());
    assert_eq!(fs::read_to_string(run.join("train_log.csv")).unwrap().lines().count(), 4);
    let split = fs::read_to_string(run.join("split.csv")).unwrap();
    assert_eq!(split.lines().filter(|l| l.ends_with(",train")).count(), 4);

    let stdout = String::from_utf8(ok(d, &["--config", "tiny.toml", "eval"]).stdout).unwrap();
    assert!(stdout.contains("AB rank-1") && stdout.contains("AC rank-1"));
    let first: Vec<Vec<u8>> = ["cmc_AB.csv", "cmc_AC.csv", "rank1.txt"]
        .iter()
        .map(|f| fs::read(run.join("eval").join(f)).unwrap())
        .collect();
    let rank1 = String::from_utf8(first[2].clone()).unwrap();
    assert!(rank1.starts_with("AB ") && rank1.contains("\nAC "));
    assert!(run.join("eval/cmc.svg").exists());
    ok(d, &["--config", "tiny.toml", "eval"]);
    for (f, before) in ["cmc_AB.csv", "cmc_AC.csv", "rank1.txt"].iter().zip(&first) {
        assert_eq!(&fs::read(run.join("eval").join(f)).unwrap(), before);
    }

    let image = run.join("data/A/id0000_v0_000.pgm");
    let image = image.to_str().unwrap();
    let stdout = ok(d, &["--config", "tiny.toml", "transform", "--image", image, "--checkpoint", "run/model.sptn"]).stdout;
    assert!(String::from_utf8(stdout).unwrap().contains("two-sided"));
    let v = read_raster(&run.join("transform/stream1.pgm")).unwrap();
    assert_eq!((v.height, v.width), (56, 56));
    assert_eq!(fs::read_to_string(run.join("transform/theta.csv")).unwrap().lines().count(), 57);
    for verb in ["synth", "train", "eval", "transform"] {
        let echo = RunConfig::load(&run.join(format!("config.{verb}.toml"))).unwrap();
        assert_eq!(echo.synth.identities, 6);
    }
}

#[test]
fn ablation_flags_shape_the_outputs() {
    let (dir, run) = workspace("");
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "synth"]);
    let manifest = run.join("data/manifest.csv");
    let manifest = manifest.to_str().unwrap();

    ok(d, &["--config", "tiny.toml", "--out", "nospt", "train", "--manifest", manifest, "--no-spt"]);
    let model = checkpoint::load(&d.join("nospt/model.sptn")).unwrap();
    assert!(!model.has_lambda());
    assert!(model.streams.iter().all(|s| s.spt.is_none()));
    assert!(!d.join("nospt/theta_epoch0.csv").exists());
    let image = run.join("data/A/id0000_v0_000.pgm");
    let out = bin(d, &["--out", "nospt", "transform", "--image", image.to_str().unwrap(), "--checkpoint", "nospt/model.sptn"]);
    assert_eq!(out.status.code(), Some(2));

    ok(d, &["--config", "tiny.toml", "--out", "fixed", "train", "--manifest", manifest, "--fixed-theta"]);
    let theta: Vec<String> = (0..3)
        .map(|k| fs::read_to_string(d.join(format!("fixed/theta_epoch{k}.csv"))).unwrap())
        .collect();
    assert_eq!(theta[0], theta[1]);
    assert_eq!(theta[1], theta[2]);
}

#[test]
fn gradcheck_scopes_and_mutation() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--scope", "spt", "--seeds", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.is_empty());
    assert!(text.lines().all(|l| l.starts_with("PASS ") && l.split_whitespace().nth(1) == Some("spt")));

    let out = bin(dir.path(), &["gradcheck", "--scope", "losses", "--seeds", "3", "--inject-sign-flip"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));
    assert_eq!(bin(dir.path(), &["gradcheck", "--scope", "everything"]).status.code(), Some(2));
}

#[test]
fn usage_and_input_errors_exit_nonzero() {
    let (dir, run) = workspace("");
    let d = dir.path();
    let out = bin(d, &["--config", "tiny.toml", "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing manifest"));

    ok(d, &["--config", "tiny.toml", "synth"]);
    let image = run.join("data/A/id0000_v0_000.pgm");
    let image = image.to_str().unwrap();
    for stream in ["0", "4"] {
        let out = bin(d, &["--config", "tiny.toml", "transform", "--image", image, "--stream", stream]);
        assert_eq!(out.status.code(), Some(2));
    }
    assert_eq!(bin(d, &["--config", "missing.toml", "synth"]).status.code(), Some(1));
    assert_eq!(bin(d, &["fly"]).status.code(), Some(2));

    fs::write(run.join(".lock"), "1\n").unwrap();
    let out = bin(d, &["--config", "tiny.toml", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
}

#[test]
fn checkpoint_version_mismatch_is_reported() {
    let (dir, run) = workspace("");
    let d = dir.path();
    ok(d, &["--config", "tiny.toml", "synth"]);
    ok(d, &["--config", "tiny.toml", "train"]);
    let path = run.join("model.sptn");
    let mut bytes = fs::read(&path).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    let out = bin(d, &["--config", "tiny.toml", "eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn uniform_transform_of_radial_image_has_constant_columns() {
    let (dir, run) = workspace("[network]\npolar_cols = 8\n");
    let side = 56;
    let centre = (side - 1) as f64 / 2.0;
    let spacing = 2.0 / 8.0 * centre;
    let levels = [40u8, 90, 160, 220];
    let mut bytes = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let rho = ((r as f64 - centre).powi(2) + (c as f64 - centre).powi(2)).sqrt();
            let j = (rho / spacing).round() as usize;
            let v = if j < levels.len() && (rho - j as f64 * spacing).abs() <= 1.6 {
                levels[j]
            } else if rho < 24.0 {
                ((r * 37 + c * 91) % 256) as u8
            } else {
                255
            };
            bytes.push(v);
        }
    }
    let image = dir.path().join("rings.pgm");
    write_pgm(&image, side, side, &bytes).unwrap();
    ok(dir.path(), &["--config", "tiny.toml", "transform", "--image", image.to_str().unwrap()]);
    let v = read_raster(&run.join("transform/stream1.pgm")).unwrap();
    assert_eq!((v.height, v.width), (56, 8));
    for j in 0..8 {
        let column: Vec<f64> = (0..56).map(|i| v.data[i * 8 + j]).collect();
        assert!(column.iter().all(|&x| x == column[0]), "column {j}: {column:?}");
    }
    let first = v.data[0];
    assert_eq!(first, 40.0);
    assert_eq!(v.data[7], 255.0);
}
