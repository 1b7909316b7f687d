use std::path::Path;
use std::process::{Command, Output};

fn fsuda(args: &[&str], data_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fsuda"));
    cmd.args(args).env_remove("FSUDA_DATA_ROOT").env("RUST_LOG", "warn");
    if let Some(root) = data_root {
        cmd.env("FSUDA_DATA_ROOT", root);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let o = fsuda(
        &[
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--size",
            "32",
            "--source",
            "4",
            "--target-train",
            "4",
            "--target-eval",
            "2",
            "--seed",
            "9",
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

const SMALL: &[&str] = &[
    "--override",
    "trainer.epochs=1",
    "--override",
    "trainer.batch_size=2",
    "--override",
    "sfa.stage=1",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    fsuda(&args, Some(data))
}

#[test]
fn train_writes_echo_log_and_checkpoints_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    assert!(data.join("config.json").is_file());

    let run = dir.path().join("run");
    let o = train(&data, &run, &["--rounds", "2", "--seed", "4", "--lambda4", "0.01"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["trainer.rounds"], 2);
    assert_eq!(echo["trainer.seed"], 4);
    assert_eq!(echo["loss.lambda4"], 0.01);
    assert!(run.join("checkpoints/round-2.safetensors").is_file());
    assert!(run.join("pseudo/round-2/meta.json").is_file());
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let again = dir.path().join("again");
    let o = fsuda(
        &[
            "train",
            "--config",
            run.join("config.json").to_str().unwrap(),
            "--out",
            again.to_str().unwrap(),
            "--data-root",
            data.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(again.join("metrics.jsonl")).unwrap(), log);
}

#[test]
fn checkpoint_commands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let run = dir.path().join("run");
    assert_eq!(code(&train(&data, &run, &["--preset", "rgb-sfa-sn"])), 0);
    let ckpt = run.join("checkpoints/round-1.safetensors");
    let ck = ckpt.to_str().unwrap();

    let ev = dir.path().join("ev");
    let o = fsuda(&["eval", "--ckpt", ck, "--out", ev.to_str().unwrap(), "--overlays"], Some(&data));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for key in ["PRE", "REC", "F1", "IoU", "MaxF"] {
        assert!(report[key].is_number(), "{key}");
    }
    assert_eq!(report["per_image"].as_array().unwrap().len(), 2);
    assert!(ev.join("overlays/target-eval-0000.png").is_file());
    assert!(ev.join("config.json").is_file());

    let ps = dir.path().join("ps");
    let o = fsuda(&["pseudo", "--ckpt", ck, "--alpha", "0.9", "--out", ps.to_str().unwrap()], Some(&data));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ps.join("round-2/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["alpha"], 0.9);
    assert_eq!(meta["producer_round"], 1);

    let pr = dir.path().join("pr");
    let o = fsuda(&["predict", "--ckpt", ck, "--out", pr.to_str().unwrap()], Some(&data));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(pr.join("prob/target-eval-0001.png").is_file());
    assert!(pr.join("mask/target-eval-0001.png").is_file());

    let vis = dir.path().join("vis");
    let o = fsuda(&["visualize", "--ckpt", ck, "--out", vis.to_str().unwrap(), "--limit", "1"], Some(&data));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(vis.join("target-eval-0000/foreground.png").is_file());
    assert!(vis.join("target-eval-0000/disc-rgb.png").is_file());
    // this preset has no cross guidance, so no attention maps
    assert!(!vis.join("target-eval-0000/attention-rgb.png").exists());
}

#[test]
fn resume_continues_from_a_round_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let run = dir.path().join("run");
    assert_eq!(code(&train(&data, &run, &[])), 0);
    let ck = run.join("checkpoints/round-1.safetensors");
    let o = train(&data, &run, &["--resume", ck.to_str().unwrap(), "--rounds", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(run.join("checkpoints/round-2.safetensors").is_file());
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(log.lines().any(|l| l.contains("\"round\":2")));
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    for args in [
        vec!["train", "--out", out, "--override", "no.such_key=1"],
        vec!["train", "--out", out, "--alpha", "0.3"],
        vec!["train", "--out", out, "--preset", "rgb-ccg"],
        vec!["train", "--out", out],
        vec!["train", "--out", out, "--data-root", "/definitely/missing"],
        vec!["eval", "--ckpt", "/definitely/missing.safetensors", "--out", out],
        vec!["train", "--no-such-flag"],
    ] {
        let o = fsuda(&args, None);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
}

#[test]
fn runtime_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let o = train(&data, &dir.path().join("div"), &["--override", "trainer.lr_seg=1e30"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("numeric error"));

    let file = dir.path().join("occupied");
    std::fs::write(&file, b"").unwrap();
    let o = train(&data, &file, &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn malformed_checkpoint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.safetensors");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = fsuda(
        &["eval", "--ckpt", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn data_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let run = dir.path().join("run");
    let o = train(&data, &run, &["--preset", "rgb-only"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = fsuda(&["train", "--out", run.to_str().unwrap()], None);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("FSUDA_DATA_ROOT"));
}
