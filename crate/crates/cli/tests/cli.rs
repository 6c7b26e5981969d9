use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn dcd(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcd"))
        .args(args)
        .env("DCD_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], root: &Path) -> String {
    let out = dcd(args, root);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_data(root: &Path) -> PathBuf {
    let dir = root.join("data");
    ok(
        &[
            "gen-data",
            "--out",
            s(&dir),
            "--train-images",
            "48",
            "--val-images",
            "8",
            "--test-images",
            "8",
            "--captions-per-image",
            "2",
            "--image-dim",
            "8",
            "--text-dim",
            "8",
            "--latent-dim",
            "4",
            "--seed",
            "3",
        ],
        root,
    );
    dir
}

const TEACHER: [&str; 8] = [
    "--epochs",
    "2",
    "--batch-size",
    "32",
    "--hidden",
    "12",
    "--m-prime",
    "3",
];
const STUDENT: [&str; 10] = [
    "--epochs",
    "2",
    "--batch-size",
    "32",
    "--hidden",
    "8",
    "--m",
    "12",
    "--m-prime",
    "3",
];

fn tiny_teacher(root: &Path, data: &Path) -> PathBuf {
    let dir = root.join("teacher");
    let mut args = vec!["train-teacher", "--data", s(data), "--out", s(&dir)];
    args.extend(TEACHER);
    ok(&args, root);
    dir
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn step_losses(run: &Path) -> Vec<Value> {
    let record: Value =
        serde_json::from_str(&fs::read_to_string(run.join("record.json")).unwrap()).unwrap();
    record["step_losses"].as_array().unwrap().clone()
}

#[test]
fn gen_data_defaults_land_under_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["gen-data"], tmp.path());
    let manifest = fs::read_to_string(tmp.path().join("gen-data/manifest.txt")).unwrap();
    for line in [
        "captions_per_image=5",
        "image_dim=64",
        "text_dim=64",
        "latent_dim=16",
        "noise_sigma=0.25",
        "train_images=2000",
        "val_images=200",
        "test_images=200",
        "seed=0",
    ] {
        assert!(
            manifest.lines().any(|l| l == line),
            "{line} missing from\n{manifest}"
        );
    }
    assert!(stdout.contains("latent oracle"));
}

#[test]
fn gen_data_is_reproducible_and_validates_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(
            &[
                "gen-data",
                "--out",
                s(d),
                "--seed",
                "7",
                "--train-images",
                "20",
                "--val-images",
                "5",
                "--test-images",
                "5",
            ],
            tmp.path(),
        );
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let bad = tmp.path().join("bad");
    let out = dcd(
        &["gen-data", "--out", s(&bad), "--val-images", "0"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!bad.exists());
    assert!(fs::read_dir(tmp.path()).unwrap().all(|e| !e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .starts_with("bad")));
}

#[test]
fn pipeline_and_snapshot_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = tiny_data(root);
    let teacher = tiny_teacher(root, &data);
    assert!(teacher.join("spec.txt").exists());
    assert!(teacher.join("best/manifest.txt").exists());

    let run = root.join("student");
    let mut args = vec![
        "distill",
        "--data",
        s(&data),
        "--teacher",
        s(&teacher),
        "--out",
        s(&run),
        "--keep-epochs",
        "--alpha",
        "0.3",
    ];
    args.extend(STUDENT);
    ok(&args, root);
    let spec = fs::read_to_string(run.join("spec.txt")).unwrap();
    assert!(spec.lines().any(|l| l == "alpha=0.3"));
    assert!(spec.lines().any(|l| l == "command=distill"));
    assert_eq!(
        fs::read_to_string(run.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    // Replaying the snapshot alone reproduces the loss trace bit for bit.
    let replay = root.join("replay");
    ok(
        &[
            "distill",
            "--config",
            s(&run.join("spec.txt")),
            "--out",
            s(&replay),
        ],
        root,
    );
    assert_eq!(step_losses(&run), step_losses(&replay));
    assert!(!step_losses(&run).is_empty());

    let eval = ok(
        &[
            "evaluate",
            "--data",
            s(&data),
            "--checkpoint",
            s(&run),
            "--split",
            "val",
        ],
        root,
    );
    assert!(eval.contains("text_r1="));
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(root.join("evaluate/summary.json")).unwrap())
            .unwrap();
    assert!(summary["image_r10"].as_f64().unwrap() >= summary["image_r1"].as_f64().unwrap());

    let trace = ok(
        &["trace", "--data", s(&data), "--checkpoint", s(&run)],
        root,
    );
    assert_eq!(trace.lines().count(), 3, "{trace}");
}

#[test]
fn grid_commands_emit_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = tiny_data(root);
    let teacher = tiny_teacher(root, &data);

    let mut args = vec![
        "sweep-mm",
        "--data",
        s(&data),
        "--teacher",
        s(&teacher),
        "--grid",
        "8x3,12x3",
        "--jobs",
        "2",
    ];
    args.extend(STUDENT);
    let table = ok(&args, root);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("8\t3\t"));
    assert!(root.join("sweep-mm/m12_mp3/seed_0/record.json").exists());

    let mut args = vec![
        "ablate",
        "--data",
        s(&data),
        "--teacher",
        s(&teacher),
        "--seeds",
        "1",
    ];
    args.extend(STUDENT);
    let table = ok(&args, root);
    let rows: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(rows, ["vanilla", "ds_ka", "ds_ka+hw", "ds_ka+sw", "full"]);
    let spec = fs::read_to_string(root.join("ablate/spec.txt")).unwrap();
    assert!(spec.lines().any(|l| l == "seeds=1"));
}

#[test]
fn gradcheck_passes_and_names_a_corrupted_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let report = ok(&["gradcheck", "--instances", "3"], tmp.path());
    for name in [
        "nce",
        "itm",
        "itm_hard",
        "kl_distill",
        "mse_distill",
        "witm",
        "wds",
        "dcd_objective",
        "student_graph",
    ] {
        assert!(
            report.split_whitespace().any(|w| w == name),
            "{name} missing from\n{report}"
        );
    }
    let out = dcd(
        &["gradcheck", "--instances", "3", "--corrupt", "witm"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("witm"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = tiny_data(root);

    let out = dcd(
        &["train-teacher", "--data", s(&data), "--regime", "bogus"],
        root,
    );
    assert_eq!(out.status.code(), Some(2));
    let out = dcd(
        &["train-teacher", "--data", s(&data), "--m-prime", "99"],
        root,
    );
    assert_eq!(out.status.code(), Some(2));

    let broken = root.join("broken");
    fs::create_dir_all(&broken).unwrap();
    for e in fs::read_dir(&data).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, broken.join(p.file_name().unwrap())).unwrap();
    }
    let blob = fs::read_dir(&broken)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "f64"))
        .unwrap();
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 5]).unwrap();
    let out = dcd(&["train-teacher", "--data", s(&broken)], root);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let mut args = vec!["train-teacher", "--data", s(&data), "--lr", "1e7"];
    args.extend(TEACHER);
    let out = dcd(&args, root);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
