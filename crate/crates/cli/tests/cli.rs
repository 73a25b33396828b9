use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn jetvit(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jetvit"))
        .args(args)
        .env("JETVIT_OUT", out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A model small enough for the whole pipeline to run in seconds.
fn tiny_config(dir: &Path) -> String {
    let o = jetvit(&["config"], dir);
    assert!(o.status.success());
    let mut c: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    c["vit"]["image_size"] = serde_json::json!([16, 16]);
    c["vit"]["patch"] = 4.into();
    c["vit"]["depth"] = 3.into();
    c["vit"]["d_model"] = 16.into();
    c["vit"]["heads"] = 2.into();
    c["vit"]["window"] = 2.into();
    c["vit"]["squeeze_hidden"] = 8.into();
    c["task"]["image_size"] = serde_json::json!([16, 16]);
    c["task"]["patch"] = 4.into();
    for k in ["teacher", "distill1", "distill2"] {
        c[k]["steps"] = 6.into();
    }
    c["eval"]["train_images"] = 4.into();
    c["eval"]["val_images"] = 4.into();
    c["eval"]["probe"]["steps"] = 20.into();
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = jetvit(&["verify"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    assert!(text.contains("linear reordering f64"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(jetvit(&["verify", "--frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(jetvit(&["distill", "--stage", "3"], dir.path()).status.code(), Some(2));
    assert_eq!(jetvit(&["launch"], dir.path()).status.code(), Some(2));
}

#[test]
fn search_without_supernet_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let o = jetvit(&["search", "--stage", "1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("stage-1 supernet checkpoint") && err.contains("distill --stage 1"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path());
    let mut c: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    c["search1"]["beam_width"] = 8.into();
    fs::write(&path, c.to_string()).unwrap();
    let o = jetvit(&["--config", &path, "train-teacher"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("beam_width"), "{}", stderr(&o));
}

#[test]
fn f64_is_limited_to_verify() {
    let dir = tempfile::tempdir().unwrap();
    let o = jetvit(&["--precision", "f64", "train-teacher"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("teacher").exists());
}

#[test]
fn staged_commands_write_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    for cmd in [
        vec!["train-teacher"],
        vec!["distill", "--stage", "1"],
        vec!["search", "--stage", "1"],
        vec!["distill", "--stage", "2"],
        vec!["search", "--stage", "2"],
        vec!["heatmap"],
        vec!["bench", "--kinds", "linear,full", "--ns", "16,32,64", "--repeats", "5"],
        vec!["report"],
    ] {
        let mut args = vec!["--config", cfg.as_str()];
        args.extend(cmd.iter());
        let o = jetvit(&args, &out);
        assert!(o.status.success(), "{cmd:?}: {}", stderr(&o));
    }
    for f in [
        "teacher/manifest.json",
        "teacher_log.jsonl",
        "supernet_stage1/manifest.json",
        "supernet_stage2/manifest.json",
        "distill_stage1.jsonl",
        "distill_stage2.jsonl",
        "search_stage1.json",
        "search_stage2.json",
        "heatmap.csv",
        "bench.csv",
        "bench.json",
        "report.json",
        "comparison.csv",
        "samples",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    for f in ["search_stage1.json", "search_stage2.json", "report.json", "bench.json"] {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(f)).unwrap()).unwrap();
        assert_eq!(v["schema_version"], 1, "{f}");
    }
    assert!(fs::read_to_string(out.join("bench.csv")).unwrap().starts_with("kind,N,median_ms,min_ms,flops\n"));
    assert!(fs::read_to_string(out.join("heatmap.csv")).unwrap().starts_with("layer,score,delta\n"));

    let before = fs::read(out.join("report.json")).unwrap();
    let o = jetvit(&["--config", &cfg, "report"], &out);
    assert!(o.status.success());
    assert_eq!(fs::read(out.join("report.json")).unwrap(), before);
}

#[test]
fn demo_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = jetvit(&["--config", &cfg, "--seed", "7", "demo"], out);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["search_stage1.json", "search_stage2.json", "heatmap.csv", "report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn out_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let flag = dir.path().join("flag");
    let o = jetvit(&["--config", &cfg, "--out", flag.to_str().unwrap(), "train-teacher"], &dir.path().join("env"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(flag.join("teacher").exists());
    assert!(!dir.path().join("env").exists());
}
