use std::path::Path;
use std::process::{Command, Output};

use mde_cli::settings::{RunManifest, Settings};
use mde_cli::{diag, eval, infer, train, Cli};
use clap::Parser;

const EXE: &str = env!("CARGO_BIN_EXE_mde");

fn mde(args: &[&str]) -> Output {
    Command::new(EXE).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// 12-step RE run on 16x16 images with a small network.
fn tiny_run(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--task", "re", "--s", "0.25", "--steps", "12", "--seed", "5", "--n", "16", "--grid-every", "6",
        "--set", "width=16", "--set", "height=16", "--set", "base_width=4", "--set", "depth=2",
        "--set", "bottleneck=8", "--set", "batch_size=4", "--set", "feature_levels=2",
        "--set", "layer_weights=1,0.5", "--out",
    ];
    let out = s(dir);
    args.push(&out);
    args.extend_from_slice(extra);
    mde(&args)
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mde(&["--version"])), 0);
    assert_eq!(code(&mde(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&mde(&["train", "--set", "no_such_key=1", "--out", &s(dir.path())])), 1);
    assert_eq!(code(&mde(&["train", "--set", "lr_gen=abc", "--out", &s(dir.path())])), 1);
    let missing = dir.path().join("missing.mde");
    let o = mde(&["eval", "occlusions", "--checkpoint", &s(&missing), "--out", &s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.mde"));
}

#[test]
fn hide_and_seek_is_rejected_for_fixed_box_tasks() {
    let dir = tempfile::tempdir().unwrap();
    for task in ["ri", "i", "col"] {
        let o = mde(&["train", "--task", task, "--hns", "on", "--out", &s(dir.path())]);
        assert_eq!(code(&o), 1, "{task}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("hns"));
    }
}

#[test]
fn idx_data_requires_re() {
    let s_ = Cli::try_parse_from(["mde", "train", "--task", "rec", "--data", "idx:train-images"]).unwrap();
    let mde_cli::Command::Train(a) = s_.command else { panic!() };
    let err = train::resolve(&a.settings().unwrap()).unwrap_err();
    assert_eq!(mde_cli::exit_code(&err), 1);
}

#[test]
fn flags_override_config_and_manifest_comes_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(&cfg, "# base settings\nsteps = 999\nseed = 4\n").unwrap();
    let cli = Cli::try_parse_from(["mde", "train", "--config", &s(&cfg), "--steps", "7"]).unwrap();
    let mde_cli::Command::Train(a) = cli.command else { panic!() };
    let (c, resolved) = train::resolve(&a.settings().unwrap()).unwrap();
    assert_eq!((c.steps, c.seed), (7, 4));
    assert_eq!(resolved.str("data"), "synthetic:blobs");

    // A failing run still leaves its manifest behind.
    let out = dir.path().join("run");
    let o = mde(&["train", "--data", &s(&dir.path().join("nowhere.png")), "--out", &s(&out)]);
    assert_ne!(code(&o), 0);
    let m = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(m.contains("command = train") && m.contains("lr_gen = ") && m.contains("artifact.csv"));
}

#[test]
fn manifest_text_round_trips_through_settings() {
    let r = Settings::default().resolve(&[("a", "1"), ("b", "x")], &[]).unwrap();
    let text = RunManifest::new("demo", r).artifact("out", "o.csv".into()).to_text();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.txt");
    std::fs::write(&p, text).unwrap();
    let back = Settings::load(Some(&p)).unwrap();
    assert_eq!(back.pairs(), &[("a".to_string(), "1".to_string()), ("b".to_string(), "x".to_string())]);
}

#[test]
fn train_complete_resample_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = tiny_run(&run, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(run.join("train.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(run.join("grid_000006.png").exists() && run.join("grid_000012.png").exists());
    let ckpt = s(&run.join("checkpoint.mde"));

    // Same manifest, same CSV.
    let again = dir.path().join("again");
    let o = mde(&["train", "--config", &s(&run.join("manifest.txt")), "--out", &s(&again)]);
    assert_eq!(code(&o), 0);
    assert_eq!(csv, std::fs::read_to_string(again.join("train.csv")).unwrap());

    let out = dir.path().join("complete");
    let settings = |extra: &[&str]| {
        let mut args = vec!["mde", "complete", "--checkpoint", &ckpt, "--input", "synthetic:stripes", "--n", "2"];
        args.extend_from_slice(extra);
        let mde_cli::Command::Complete(a) = Cli::try_parse_from(args).unwrap().command else { panic!() };
        a.settings().unwrap()
    };
    let c = infer::complete(&settings(&["--samples", "5", "--out", &s(&out)])).unwrap();
    assert_eq!(c.outputs.len(), 2);
    assert!(c.outputs.iter().all(|v| v.len() == 5 && v.iter().all(|p| p.exists())));
    let lines = std::fs::read_to_string(&c.metrics_csv).unwrap().lines().count();
    assert_eq!(lines, 11);
    let c2 = infer::complete(&settings(&["--samples", "5", "--out", &s(&dir.path().join("c2"))])).unwrap();
    assert_eq!(c.metrics, c2.metrics, "completion is deterministic per seed");
    assert!(infer::complete(&settings(&["--samples", "0"])).is_err());

    let mde_cli::Command::Resample(a) = Cli::try_parse_from([
        "mde", "resample", "--checkpoint", &ckpt, "--input", "synthetic:blobs", "--out", &s(&dir.path().join("rs")),
    ])
    .unwrap()
    .command
    else {
        panic!()
    };
    let r = infer::resample(&a.settings().unwrap()).unwrap();
    assert_eq!(r.frames.len(), 11);
    assert!(r.frames[1..].iter().all(|f| f.data().iter().all(|&v| v > 0.0 && v < 1.0)));
    let o = mde(&["resample", "--checkpoint", &ckpt, "--input", "synthetic:blobs", "--steps", "0", "--out", &s(dir.path())]);
    assert_eq!(code(&o), 1);

    let mut es = Settings::default();
    es.set("protocol", "task-matrix");
    es.set("checkpoint", &ckpt);
    es.set("n", "8");
    es.set("out", &s(&dir.path().join("tm")));
    let e = eval::eval(&es).unwrap();
    assert_eq!(e.rows.len(), 6);
    assert!(e.csv.starts_with("train_task,test_task,psnr,ssim\n"));
    assert!(e.table.contains("rec") && e.table.contains("col2"));
    es.set("protocol", "occlusions");
    let e = eval::eval(&es).unwrap();
    assert_eq!(e.rows.len(), 6);
    assert!(e.table.contains("not reproducible"));
    es.set("protocol", "sideways");
    assert_eq!(mde_cli::exit_code(&eval::eval(&es).unwrap_err()), 1);
}

#[test]
fn resume_requires_identical_settings() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&tiny_run(&run, &["--set", "checkpoint_every=6"])), 0);
    let ckpt = s(&run.join("checkpoint_000006.mde"));
    let other = s(&dir.path().join("other"));
    let o = tiny_run(&dir.path().join("other"), &["--resume", &ckpt, "--set", "checkpoint_every=6", "--set", "lr_gen=0.5"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("different settings"));
    let o = tiny_run(&dir.path().join("other"), &["--resume", &ckpt, "--set", "checkpoint_every=6"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = std::fs::read_to_string(Path::new(&other).join("train.csv")).unwrap();
    let full = std::fs::read_to_string(run.join("train.csv")).unwrap();
    assert_eq!(rows.lines().collect::<Vec<_>>(), full.lines().skip(7).collect::<Vec<_>>());
}

#[test]
fn mask_stats_report_matches_definitions() {
    let dir = tempfile::tempdir().unwrap();
    let run = |task: &str, k: &str, ratio: &str| {
        let mut st = Settings::default();
        for (key, v) in [("task", task), ("col_visible", k), ("ratio", ratio), ("size", "32"), ("n", "400")] {
            st.set(key, v);
        }
        st.set("out", &s(dir.path()));
        diag::mask_stats(&st).unwrap()
    };
    let col = run("col", "1", "0.1");
    assert_eq!((col.dropped, col.corrupted), (0.0, 1.0));
    assert!((col.hidden - 2.0 / 3.0).abs() < 1e-12);
    let re = run("re", "1", "0.25");
    assert!((re.dropped - 0.75).abs() < 0.02);
    let ri = run("ri", "1", "0.25");
    assert_eq!(ri.dropped, ri.analytic_dropped);
    assert!(ri.report().contains("analytic"));
    let o = mde(&["mask-stats", "--n", "0", "--out", &s(dir.path())]);
    assert_eq!(code(&o), 1);
}

#[test]
fn grad_check_passes_and_reports_failures_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = mde(&["grad-check", "--out", &s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    // An impossible tolerance fails every check.
    let o = mde(&["grad-check", "--tolerance", "1e-300", "--out", &s(dir.path())]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL conv2d"));
}
