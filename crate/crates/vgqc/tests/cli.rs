//! End-to-end checks of the command-line interface: exit codes, file
//! outputs, and cross-run reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn vgqc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vgqc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_tiny(dir: &Path) {
    let out = vgqc(
        &[
            "gen-data",
            "--seed",
            "21",
            "--out",
            "data",
            "--n-train",
            "8",
            "--n-val",
            "4",
            "--n-test",
            "2",
            "--config",
            "{\"image_size\": 64}",
        ],
        dir,
    );
    assert_ok(&out);
}

fn train_tiny(dir: &Path, ckpt: &str, extra: &[&str]) {
    let mut args = vec![
        "train", "--data", "data", "--out", ckpt, "--epochs", "1", "--batch-size", "4",
        "--K", "2", "--seed", "3",
    ];
    if !extra.contains(&"--qcm-stages") {
        args.extend_from_slice(&["--qcm-stages", "4"]);
    }
    args.extend_from_slice(extra);
    assert_ok(&vgqc(&args, dir));
}

#[test]
fn full_pipeline_runs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_tiny(dir);
    assert!(dir.join("data/manifest.json").is_file());
    assert!(dir.join("data/images").is_dir());

    train_tiny(dir, "a.ckpt", &[]);
    train_tiny(dir, "b.ckpt", &[]);
    let ckpt_a = std::fs::read(dir.join("a.ckpt")).unwrap();
    let ckpt_b = std::fs::read(dir.join("b.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "same seed, same bytes");
    assert_eq!(
        std::fs::read(dir.join("a.ckpt.metrics.jsonl")).unwrap(),
        std::fs::read(dir.join("b.ckpt.metrics.jsonl")).unwrap()
    );

    let eval = vgqc(
        &["eval", "--ckpt", "a.ckpt", "--data", "data", "--split", "val"],
        dir,
    );
    assert_ok(&eval);
    let line = String::from_utf8(eval.stdout).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!(parsed["n"], 4);
    assert!(parsed["accuracy"].is_number());
    assert!(parsed["mean_iou"].is_number());
}

#[test]
fn analyze_commands_emit_csv_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_tiny(dir);
    train_tiny(dir, "m.ckpt", &[]);
    std::fs::write(dir.join("q.txt"), "red circle\nblue square\n").unwrap();

    assert_ok(&vgqc(
        &["analyze", "attention", "--ckpt", "m.ckpt", "--queries", "q.txt", "--out", "out"],
        dir,
    ));
    let csv = std::fs::read_to_string(dir.join("out/attention.csv")).unwrap();
    assert!(csv.starts_with("query,resolved,flagged,block"));
    assert_eq!(csv.lines().count(), 3);

    assert_ok(&vgqc(
        &["analyze", "kernels", "--ckpt", "m.ckpt", "--queries", "q.txt", "--out", "out"],
        dir,
    ));
    assert!(dir.join("out/kernel_distances.csv").is_file());

    assert_ok(&vgqc(
        &["analyze", "ref-kernel", "--ckpt", "m.ckpt", "--queries", "q.txt", "--out", "out"],
        dir,
    ));
    assert!(dir.join("out/ref_kernel.csv").is_file());

    assert_ok(&vgqc(
        &[
            "analyze", "featmap", "--ckpt", "m.ckpt", "--data", "data", "--queries", "q.txt",
            "--out", "out",
        ],
        dir,
    ));
    assert!(dir.join("out/featmap_q0.csv").is_file());
    assert!(dir.join("out/featmap_q1.csv").is_file());

    assert_ok(&vgqc(
        &["analyze", "reg-attn", "--ckpt", "m.ckpt", "--data", "data", "--out", "out"],
        dir,
    ));
    assert!(dir.join("out/reg_attn_q0_layer0.csv").is_file());

    assert_ok(&vgqc(
        &["analyze", "force-kernel", "--ckpt", "m.ckpt", "--data", "data", "--out", "out"],
        dir,
    ));
    let sweep = std::fs::read_to_string(dir.join("out/force_kernel.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), "mode,accuracy,mean_iou");
    assert_eq!(sweep.lines().count(), 4, "all + K=2 kernels");
}

#[test]
fn validation_failures_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_tiny(dir);

    // Unknown split.
    train_tiny(dir, "m.ckpt", &[]);
    let out = vgqc(
        &["eval", "--ckpt", "m.ckpt", "--data", "data", "--split", "dev"],
        dir,
    );
    assert_eq!(out.status.code(), Some(2));

    // Missing checkpoint.
    let out = vgqc(
        &["eval", "--ckpt", "nope.ckpt", "--data", "data", "--split", "val"],
        dir,
    );
    assert_eq!(out.status.code(), Some(2));

    // Corrupt checkpoint payload flips a byte past the header.
    let mut bytes = std::fs::read(dir.join("m.ckpt")).unwrap();
    let n = bytes.len();
    bytes[n - 64] ^= 0xff;
    std::fs::write(dir.join("bad.ckpt"), &bytes).unwrap();
    let out = vgqc(
        &["eval", "--ckpt", "bad.ckpt", "--data", "data", "--split", "val"],
        dir,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));

    // Bad scene config JSON.
    let out = vgqc(
        &[
            "gen-data", "--seed", "1", "--out", "d2", "--n-train", "1", "--n-val", "1",
            "--n-test", "1", "--config", "{\"image_size\": 0}",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(2));

    // Static baseline has nothing to analyze.
    train_tiny(dir, "static.ckpt", &["--qcm-stages", "none"]);
    std::fs::write(dir.join("q.txt"), "red circle\n").unwrap();
    let out = vgqc(
        &[
            "analyze", "attention", "--ckpt", "static.ckpt", "--queries", "q.txt", "--out",
            "out2",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dataset_regeneration_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_tiny(dir);
    let m1 = std::fs::read(dir.join("data/manifest.json")).unwrap();
    let img1 = std::fs::read(dir.join("data/images/000000.ppm")).unwrap();
    std::fs::remove_dir_all(dir.join("data")).unwrap();
    gen_tiny(dir);
    assert_eq!(m1, std::fs::read(dir.join("data/manifest.json")).unwrap());
    assert_eq!(
        img1,
        std::fs::read(dir.join("data/images/000000.ppm")).unwrap()
    );
}
