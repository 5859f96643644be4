use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "data.num_train=8",
    "--set",
    "data.num_val=4",
    "--set",
    "data.image_size=32",
    "--set",
    "data.major_axis=[8.0, 12.0]",
    "--set",
    "data.minor_axis=[3.0, 5.0]",
    "--set",
    "train.epochs=2",
    "--set",
    "train.cls_warmup_epochs=1",
    "--set",
    "train.batch_size=4",
    "--set",
    "train.widths=[4, 8, 8, 8]",
];

fn plda(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plda"))
        .args(args)
        .env("PLDA_OUT_ROOT", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&plda(&with_tiny(&["gen-data", "--seed", "4", "--out", d.to_str().unwrap()]), tmp.path()));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        let (pa, pb) = (a.join(&n), b.join(&n));
        if pa.is_file() {
            assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap(), "{n:?} differs");
        }
    }
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&plda(&with_tiny(&["gen-data", "--seed", "9"]), tmp.path()));
    assert!(tmp.path().join("data-9").is_dir());
}

#[test]
fn dry_run_writes_only_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let args = with_tiny(&[
        "train",
        "--dry-run",
        "--preset",
        "uda",
        "--device",
        "accelerator",
        "--out",
        out.to_str().unwrap(),
    ]);
    ok(&plda(&args, tmp.path()));
    assert!(out.join("manifest.json").is_file());
    assert!(!out.join("checkpoint.json").exists());
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["device_requested"], "accelerator");
    assert_eq!(m["device_used"], "cpu");
    assert_eq!(m["config"]["train"]["use_cps_s"], false);
    assert_eq!(m["config"]["data"]["num_train"], 8);
}

#[test]
fn train_then_eval_then_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let figs = tmp.path().join("figs");
    ok(&plda(&with_tiny(&["gen-data", "--out", data.to_str().unwrap()]), tmp.path()));
    let train = with_tiny(&[
        "train",
        "--preset",
        "full",
        "--seed",
        "3",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    ok(&plda(&train, tmp.path()));
    for f in ["manifest.json", "metrics.jsonl", "checkpoint.json", "eval.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        let parts: f64 = ["cls", "uda", "cps_s", "cps_t"].iter().map(|k| r[k].as_f64().unwrap()).sum();
        assert!((parts - r["total"].as_f64().unwrap()).abs() < 1e-9);
    }

    // re-evaluating the checkpoint reproduces the training-time evaluation
    let ck = run.join("checkpoint.json");
    let eval_out = tmp.path().join("eval");
    let printed = ok(&plda(
        &[
            "eval-cam",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            eval_out.to_str().unwrap(),
        ],
        tmp.path(),
    ));
    let stored: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    let again: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval_out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(stored, again);
    let miou: f64 = printed.split_whitespace().next().unwrap().parse().unwrap();
    assert!((miou - stored["best"]["mean"].as_f64().unwrap()).abs() < 1e-6);

    let listed = ok(&plda(
        &["plot", "--run", run.to_str().unwrap(), "--baseline", run.to_str().unwrap(), "--out", figs.to_str().unwrap()],
        tmp.path(),
    ));
    for f in ["losses.png", "val_miou.png", "sweep.csv", "similarity.csv", "similarity.png"] {
        assert!(figs.join(f).is_file(), "{f}");
        assert!(listed.contains(f));
    }
}

#[test]
fn ablate_writes_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("abl");
    let args = with_tiny(&["ablate", "--presets", "baseline,uda", "--seeds", "0", "--out", out.to_str().unwrap()]);
    ok(&plda(&args, tmp.path()));
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(s.as_array().unwrap().len(), 2);
    assert!(out.join("ablation.csv").is_file());
}

#[test]
fn bad_input_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(plda(&["train", "--no-such-flag"], tmp.path()).status.code(), Some(2));
    assert_eq!(plda(&["train", "--dry-run", "--set", "train.alpah=0.5"], tmp.path()).status.code(), Some(1));
    assert_eq!(plda(&["train", "--dry-run", "--set", "train.alpha=1.5"], tmp.path()).status.code(), Some(1));
    assert_eq!(plda(&["ablate", "--presets", "nope"], tmp.path()).status.code(), Some(1));
}
