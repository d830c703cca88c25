//! End-to-end CLI checks driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gwcstereo")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("gwcstereo-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic_and_complete() {
    let d1 = tmpdir("gen1");
    let d2 = tmpdir("gen2");
    for d in [&d1, &d2] {
        let out = run(&[
            "gen-data",
            "--out",
            d.to_str().unwrap(),
            "--count",
            "5",
            "--height",
            "32",
            "--width",
            "48",
            "--dmax",
            "12",
            "--seed",
            "21",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let manifest = std::fs::read_to_string(d1.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    assert_eq!(read_tree(&d1), read_tree(&d2), "same flags give bitwise-identical files");
}

#[test]
fn gen_data_rejects_dmax_at_least_width() {
    let d = tmpdir("gen-bad");
    let out = run(&[
        "gen-data",
        "--out",
        d.to_str().unwrap(),
        "--count",
        "1",
        "--dmax",
        "32",
        "--width",
        "16",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "one-line machine-parsable error, got: {err}");
}

#[test]
fn unknown_flags_are_rejected() {
    let out = run(&["verify", "--bogus-flag"]);
    assert!(!out.status.success());
}

#[test]
fn train_eval_infer_chain() {
    let data = tmpdir("chain-data");
    let out = run(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--count",
        "8",
        "--height",
        "32",
        "--width",
        "64",
        "--dmax",
        "16",
        "--seed",
        "3",
    ]);
    assert!(out.status.success());

    let cfg_path = data.join("train.cfg");
    std::fs::write(
        &cfg_path,
        "d_max = 16\nmax_iters = 8\nlr = 0.001\nbatch_size = 2\nseed = 5\n\
         unary_channels = 16\ngwc_groups = 4\nconcat_channels = 2\nbase_3d_channels = 4\n\
         blocks = 1,1,1,1\nval_interval = 4\n",
    )
    .unwrap();
    let rundir = tmpdir("chain-run");
    let manifest = data.join("manifest.txt");
    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        rundir.to_str().unwrap(),
        "--variant",
        "gwc-cat",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(rundir.join("best.ckpt").exists());
    assert!(rundir.join("log.csv").exists());
    let log = std::fs::read_to_string(rundir.join("log.csv")).unwrap();
    assert!(log.starts_with("iteration,lr,train_loss,val_epe,val_d1"));

    let ckpt = rundir.join("best.ckpt");
    let out = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", manifest.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("epe,err1,err2,err3,err5,d1_all,valid_count"));

    // infer on a non-multiple-of-16 crop exercises the pad/crop path
    let pred_pfm = rundir.join("pred.pfm");
    let pred_png = rundir.join("pred.png");
    let out = run(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--left",
        data.join("left_00000.png").to_str().unwrap(),
        "--right",
        data.join("right_00000.png").to_str().unwrap(),
        "--out",
        pred_pfm.to_str().unwrap(),
        "--png16",
        pred_png.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pfm = gwcstereo::io::pfm::read_pfm(&pred_pfm).unwrap();
    assert_eq!((pfm.width, pfm.height), (64, 32));
    assert!(
        pfm.data.iter().all(|&v| (0.0..=15.0).contains(&v)),
        "disparities stay in [0, d_max - 1]"
    );
    assert!(pred_png.exists());
}

#[test]
fn missing_config_key_is_named() {
    let d = tmpdir("badcfg");
    let cfg = d.join("c.cfg");
    std::fs::write(&cfg, "d_max = 16\nlr = 0.001\nbatch_size = 2\nseed = 1\n").unwrap();
    std::fs::write(d.join("manifest.txt"), "").unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        d.join("manifest.txt").to_str().unwrap(),
        "--out",
        d.join("run").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("max_iters"), "error names the missing key: {err}");
}
