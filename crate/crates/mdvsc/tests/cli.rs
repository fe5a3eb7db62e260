use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdvsc::checkpoint;
use mdvsc::results::read_results;
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_mdvsc");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("MDVSC_OUTPUT_ROOT").output().expect("run mdvsc")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "mdvsc {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_data(dir: &Path, frames: usize) -> PathBuf {
    ok(&["make-toy-data", "--output", s(dir), "--clips", "4", "--frames", &frames.to_string(), "--size", "32", "--seed", "3"]);
    dir.join("train.txt")
}

fn write_config(path: &Path, manifest: &Path, output: &Path) {
    fs::write(
        path,
        format!(
            "[data]\nmanifest = {manifest:?}\n\n[model]\nchannel_dim = 8\ngop_size = 3\nresblock_depth = 1\n\n\
             [train]\nsteps = 3\nbatch_size = 2\ncrop = 32\nlr_init = 1e-3\ncbr_grid = [0.005, 0.01, 0.015]\n\
             eval_every = 2\ncheckpoint_every = 2\neval_cbr = 0.01\n\n[output]\ndir = {output:?}\n"
        ),
    )
    .unwrap();
}

/// Trains the tiny toy model and returns (data dir, checkpoint).
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let manifest = toy_data(&data, 5);
    let config = dir.join("run.toml");
    write_config(&config, &manifest, &dir.join("run"));
    ok(&["train", "--config", s(&config)]);
    (data, dir.join("run").join("checkpoint.safetensors"))
}

fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[model]\nchannel_dim = 8\n\n[output]\ndir = \"out\"\n").unwrap();
    let out = run(&["train", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.manifest"));
}

#[test]
fn malformed_config_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[data]\nmanifest = \"m.txt\"\n[train]\nsteps = \"many\"\n").unwrap();
    let out = run(&["train", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_flags_exit_with_usage_code() {
    assert_eq!(run(&["transmit", "--bogus"]).status.code(), Some(2));
}

#[test]
fn training_is_reloadable_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (data, first) = trained(dir.path());
    let model = checkpoint::load_model(&first, None).unwrap();
    assert_eq!(model.config().channel_dim, 8);
    assert!(dir.path().join("run").join("train_log.csv").exists());

    let config = dir.path().join("again.toml");
    write_config(&config, &data.join("train.txt"), &dir.path().join("again"));
    ok(&["train", "--config", s(&config)]);
    let second = dir.path().join("again").join("checkpoint.safetensors");
    assert_eq!(digest(&first), digest(&second));

    ok(&["train", "--config", s(&config), "--seed", "1", "--output", s(&dir.path().join("other"))]);
    assert_ne!(digest(&first), digest(&dir.path().join("other").join("checkpoint.safetensors")));
}

#[test]
fn transmit_writes_every_frame_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let clip = data.join("heldout");
    let send = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let stdout = ok(&[
            "transmit",
            "--checkpoint",
            s(&ckpt),
            "--clip",
            s(&clip),
            "--cbr",
            "0.01",
            "--snr",
            "5",
            "--seed",
            seed,
            "--output",
            s(&out),
        ]);
        (out, stdout)
    };
    let (a, stdout) = send("a", "7");
    let (b, _) = send("b", "7");
    let (c, _) = send("c", "8");
    assert!(stdout.contains("k_n = ["), "{stdout}");
    let pngs = |d: &Path| mdvsc::frames::frame_paths(d).unwrap();
    assert_eq!(pngs(&a).len(), 5);
    assert!(pngs(&a).iter().zip(pngs(&b)).all(|(x, y)| fs::read(x).unwrap() == fs::read(y).unwrap()));
    assert!(pngs(&a).iter().zip(pngs(&c)).any(|(x, y)| fs::read(x).unwrap() != fs::read(y).unwrap()));

    let rows = read_results(&a.join("report.csv")).unwrap();
    let source = 3 * 3 * 32 * 32;
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| (r.cbr - 0.01).abs() <= 1.0 / source as f64));

    let out = run(&[
        "transmit",
        "--checkpoint",
        s(&ckpt),
        "--clip",
        s(&clip),
        "--cbr",
        "0.0001",
        "--noiseless",
        "--output",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("minimum feasible CBR"));
}

#[test]
fn sweep_counts_sorts_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let single = dir.path().join("single");
    ok(&["make-toy-data", "--output", s(&single), "--clips", "2", "--frames", "3", "--size", "32"]);
    let manifest = single.join("train.txt");
    let out = dir.path().join("sweep");
    let args = [
        "sweep",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--cbr-grid",
        "0.005,0.01",
        "--snr-grid",
        "0,10",
        "--seeds",
        "0",
        "--output",
        s(&out),
    ];
    ok(&args);
    let results = out.join("results.csv");
    let rows = read_results(&results).unwrap();
    assert_eq!(rows.len(), 4);
    let keys: Vec<(f64, f64)> = rows.iter().map(|r| (r.cbr, r.snr_db)).collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(keys, sorted);
    for plot in ["psnr_vs_cbr.svg", "psnr_vs_snr.svg", "ms_ssim_db_vs_cbr.svg", "ms_ssim_db_vs_snr.svg"] {
        assert!(out.join(plot).exists(), "{plot}");
    }

    let before = fs::read(&results).unwrap();
    let stdout = ok(&args);
    assert!(stdout.contains("0 new rows"), "{stdout}");
    assert_eq!(fs::read(&results).unwrap(), before);

    let wider = dir.path().join("wider");
    ok(&[
        "sweep",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&data.join("train.txt")),
        "--cbr-grid",
        "0.01",
        "--snr-grid",
        "5",
        "--seeds",
        "0,1",
        "--output",
        s(&wider),
    ]);
    // three clips of two GOPs each, two seeds
    assert_eq!(read_results(&wider.join("results.csv")).unwrap().len(), 12);

    let bad = run(&["sweep", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--cbr-grid", "0.01,0.005", "--output", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn baselines_are_validated_and_overlaid() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    fs::write(&good, "label,cbr,snr_db,psnr_db,ms_ssim\nref,0.005,10,25.0,0.90\nref,0.01,10,27.5,0.93\nref,0.015,10,29.0,0.95\n").unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&["ingest-baseline", s(&good), "--output", s(&out)]);
    assert!(stdout.starts_with("3 baseline points"), "{stdout}");

    let missing = dir.path().join("missing.csv");
    fs::write(&missing, "label,cbr,snr_db,psnr_db\nref,0.005,10,25.0\n").unwrap();
    let err = run(&["ingest-baseline", s(&missing), "--output", s(&out)]);
    assert_ne!(err.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&err.stderr).contains("ms_ssim"));

    let negative = dir.path().join("negative.csv");
    fs::write(&negative, "label,cbr,snr_db,psnr_db,ms_ssim\nref,0.005,10,25.0,0.9\nref,0,10,25.0,0.9\n").unwrap();
    let err = run(&["ingest-baseline", s(&negative), "--output", s(&out)]);
    assert_ne!(err.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&err.stderr).contains("row 2"), "{}", String::from_utf8_lossy(&err.stderr));

    let results = out.join("results.csv");
    fs::write(
        &results,
        "clip_id,gop_index,cbr,snr_db,psnr_db,ms_ssim,ms_ssim_db,seed\nc,0,0.005,10,20.0,0.8,6.99,0\nc,0,0.01,10,22.0,0.85,8.24,0\n",
    )
    .unwrap();
    let stdout = ok(&["report", "--results", s(&results), "--output", s(&out)]);
    assert!(stdout.contains("plot:"));
    assert!(fs::read_to_string(out.join("psnr_vs_cbr.svg")).unwrap().contains("ref"));
}
