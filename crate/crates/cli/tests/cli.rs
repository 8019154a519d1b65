use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ar2_cli::exit;
use ar2_core::checkpoint::Checkpoint;
use ar2_core::data::{load_dataset, synthetic_shapes, write_cifar_binary, ShapeConfig};
use ar2_core::metrics::{EvalReport, TransferMatrix};
use ar2_core::{build_camnet, WidthConfig};

fn ar2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ar2")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ar2(args);
    assert!(
        out.status.success(),
        "ar2 {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ar2(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus an untrained tiny checkpoint.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = synthetic_shapes(40, 3, &ShapeConfig::default());
    let data_path = dir.join("data").join("train.bin");
    std::fs::create_dir_all(data_path.parent().unwrap()).unwrap();
    write_cifar_binary(&data, &data_path).unwrap();
    let model = build_camnet(data.input_shape(), data.classes(), WidthConfig::tiny(), 7).unwrap();
    let ckpt = dir.join("vanilla.ckpt");
    Checkpoint::new(model).save(&ckpt).unwrap();
    (data_path, ckpt)
}

#[test]
fn eval_against_itself_reports_ce_100_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let report = dir.path().join("eval.txt");
    let table = ok(&[
        "eval", "--model", s(&ckpt), "--baseline", s(&ckpt), "--data", s(&data), "--report", s(&report),
    ]);
    assert!(table.contains("mCE"), "{table}");
    let parsed = EvalReport::from_text(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.kinds.len(), 15);
    assert!(parsed.kinds.iter().all(|k| k.ce == Some(100.0)));
    assert_eq!(parsed.mce(), Some(100.0));
}

#[test]
fn repair_is_deterministic_and_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let cfg = dir.path().join("repair.cfg");
    std::fs::write(
        &cfg,
        "preset = cifar\niterations = 2\nrefine_steps = 2\nbatch_size = 8\ndata = data/train.bin\n",
    )
    .unwrap();
    let run = |out: &Path| {
        ok(&["repair", "--model", s(&ckpt), "--config", s(&cfg), "--corruption", "GN", "--out", s(out), "--quiet"]);
        Checkpoint::load(out).unwrap().file_hash()
    };
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    assert_eq!(run(&a), run(&b));

    let log = std::fs::read_to_string(a.with_extension("log")).unwrap();
    let steps: Vec<&str> = log.lines().filter(|l| l.starts_with("iteration=")).collect();
    assert_eq!(steps.len(), 2 * (2 + 1));
    assert!(log.contains("# corruption = GN"));

    // default output location, and the fine-tune-only ablation
    ok(&["repair", "--model", s(&ckpt), "--config", s(&cfg), "--corruption", "GN", "--no-refine", "--quiet"]);
    let ft = dir.path().join("repaired").join("GN.ft.ckpt");
    let ft_log = std::fs::read_to_string(ft.with_extension("log")).unwrap();
    assert!(ft_log.lines().filter(|l| l.starts_with("iteration=")).all(|l| l.contains("stage=finetune")));
    assert_ne!(Checkpoint::load(&ft).unwrap().file_hash(), Checkpoint::load(&a).unwrap().file_hash());
    assert!(data.exists());
}

#[test]
fn exit_codes_separate_failure_families() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let bad_cfg = dir.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "iteratoins = 3\n").unwrap();
    let zero_n = dir.path().join("zero.cfg");
    std::fs::write(&zero_n, "refine_steps = 0\n").unwrap();
    let out = dir.path().join("x.ckpt");

    let repair = |cfg: &Path| {
        code(&["repair", "--model", s(&ckpt), "--config", s(cfg), "--data", s(&data), "--out", s(&out)])
    };
    assert_eq!(repair(&bad_cfg), exit::CONFIG as i32);
    assert_eq!(repair(&zero_n), exit::CONFIG as i32);
    assert!(!out.exists());

    let missing = dir.path().join("nope.bin");
    assert_eq!(code(&["eval", "--model", s(&ckpt), "--data", s(&missing)]), exit::DATA as i32);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--model", s(&junk), "--data", s(&data)]), exit::CHECKPOINT as i32);
    assert_eq!(code(&["eval", "--model", s(&ckpt)]), exit::USAGE as i32);
    assert_eq!(
        code(&["transfer-matrix", "--baseline", s(&ckpt), "--model", &format!("GN={}", s(&ckpt)), "--data", s(&data), "--csv", s(&dir.path().join("t.csv"))]),
        exit::METRIC as i32
    );
}

#[test]
fn corrupt_writes_a_dataset_of_the_same_shape() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let out = dir.path().join("gn").join("test_batch.bin");
    ok(&["corrupt", "--in", s(&data), "--kind", "GN", "--severity", "5", "--seed", "3", "--out", s(&out)]);
    let (clean, noisy) = (load_dataset(&data).unwrap(), load_dataset(&out).unwrap());
    assert_eq!(clean.len(), noisy.len());
    assert_eq!(clean.labels(), noisy.labels());
    assert_ne!(clean.content_hash(), noisy.content_hash());
    let again = dir.path().join("again.bin");
    ok(&["corrupt", "--in", s(&data), "--kind", "gaussian_noise", "--severity", "5", "--seed", "3", "--out", s(&again)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn partial_transfer_matrix_and_cam_dump() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let models = dir.path().join("models");
    std::fs::create_dir_all(&models).unwrap();
    std::fs::copy(&ckpt, models.join("FG.ckpt")).unwrap();
    let (csv, png) = (dir.path().join("t.csv"), dir.path().join("t.png"));
    let stdout = ok(&[
        "transfer-matrix", "--models", s(&models), "--baseline", s(&ckpt), "--data", s(&data), "--partial",
        "--rows", "GN,FG", "--csv", s(&csv), "--png", s(&png),
    ]);
    assert!(stdout.contains("clean error max"), "{stdout}");
    let m = TransferMatrix::from_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(m.values, vec![vec![Some(0.0)], vec![Some(0.0)]]);
    assert_eq!(TransferMatrix::from_png(&std::fs::read(&png).unwrap()).unwrap(), m);

    let cams = dir.path().join("cams");
    ok(&["cam-dump", "--model", s(&ckpt), "--ref", s(&ckpt), "--data", s(&data), "--images", "0,3", "--out", s(&cams)]);
    let written: Vec<_> = std::fs::read_dir(&cams).unwrap().collect();
    assert_eq!(written.len(), 2);
}
