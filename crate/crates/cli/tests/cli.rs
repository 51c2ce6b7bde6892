use std::process::{Command, Output};

fn hexres(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hexres"))
        .args(args)
        .env_remove("CIFAR10_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_subcommands_and_flags() {
    let o = hexres(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in ["train", "eval", "verify-hexconv", "gradcheck", "count-params", "bench"] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
    let o = hexres(&["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    for flag in [
        "--data-dir",
        "--depth",
        "--shortcut",
        "--seed",
        "--epochs",
        "--batch-size",
        "--lr",
        "--out-dir",
        "--resume",
    ] {
        assert!(stdout(&o).contains(flag), "{flag}");
    }
}

#[test]
fn unknown_flags_exit_2() {
    let o = hexres(&["count-params", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(hexres(&["count-params", "--shortcut", "option_c"]).status.code(), Some(2));
    assert_eq!(hexres(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn count_params_per_shortcut() {
    let cases = [
        ("identity_pad", "269722"),
        ("projection_1x1", "272474"),
        ("hex_projection", "287834"),
    ];
    for (mode, want) in cases {
        let o = hexres(&["count-params", "--depth", "20", "--shortcut", mode]);
        assert_eq!(o.status.code(), Some(0));
        assert_eq!(stdout(&o).trim(), want, "{mode}");
        assert!(stderr(&o).contains(&format!("config shortcut: {mode}")));
    }
}

#[test]
fn count_params_rejects_bad_depth() {
    let o = hexres(&["count-params", "--depth", "21"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("6n+2"));
}

#[test]
fn verify_hexconv_passes() {
    let o = hexres(&["verify-hexconv", "--cases", "200", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("max abs deviation") && out.contains("PASS"), "{out}");
    assert_eq!(stdout(&hexres(&["verify-hexconv", "--cases", "50", "--seed", "7"])), stdout(&hexres(&["verify-hexconv", "--cases", "50", "--seed", "7"])));
}

#[test]
fn eval_missing_checkpoint_exits_1() {
    let o = hexres(&["eval", "--checkpoint", "missing.bin", "--synthetic"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.bin"));
}

#[test]
fn bench_single_repeat_has_no_variance_line() {
    let o = hexres(&["bench", "--repeats", "1", "--batch", "1", "--spatial", "8"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("ratio hex/square"));
    assert!(!out.contains("sd "));
    let o = hexres(&["bench", "--repeats", "3", "--batch", "1", "--spatial", "8"]);
    assert!(stdout(&o).contains("sd "));
}

#[test]
fn bench_rejects_zero_channels() {
    let o = hexres(&["bench", "--in-channels", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_without_data_source_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = hexres(&["train", "--epochs", "0", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--synthetic"));
}

#[test]
fn train_resume_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let common = [
        "--synthetic",
        "--depth",
        "8",
        "--batch-size",
        "16",
        "--train-limit",
        "32",
        "--val-limit",
        "16",
        "--seed",
        "3",
        "--out-dir",
        out,
    ];
    let mut args = vec!["--threads", "1", "train", "--epochs", "1"];
    args.extend(common);
    let o = hexres(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("config train:"));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let ckpt = dir.path().join("checkpoint.bin");
    let mut args = vec!["train", "--epochs", "2", "--resume", ckpt.to_str().unwrap()];
    args.extend(common);
    let o = hexres(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let epochs: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, [0, 1, 2]);

    let o = hexres(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--synthetic", "--split", "validation"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["images"], 5000);
    assert!(v["top1"].as_f64().unwrap() <= v["top5"].as_f64().unwrap());
}
