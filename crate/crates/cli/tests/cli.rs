use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn mgt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgt")).args(args).env_remove("MGT_WORKERS").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{"sampler": {"width": 4, "height": 4, "steps": 6, "seed": 5}}"#;

#[test]
fn run_writes_three_files() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "cfg.json", SMALL);
    let out = d.path().join("out");
    let o = mgt(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["grid.bin", "trace.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,t,masked_before,masked_after,nfe_cum,mean_entropy,mean_kl_prev\n"));
    assert_eq!(trace.lines().count(), 7);
}

#[test]
fn same_config_same_bytes_and_manifest_replays() {
    let d = TempDir::new().unwrap();
    let cfg = write(
        d.path(),
        "cfg.json",
        r#"{"sampler": {"steps": 8, "cfg_scale": 2.0, "differential": {"z": 50}}, "backend": {"kind": "transformer"}}"#,
    );
    let (a, b, c) = (d.path().join("a"), d.path().join("b"), d.path().join("c"));
    assert_eq!(code(&mgt(&["run", &cfg, "--out", a.to_str().unwrap()])), 0);
    assert_eq!(code(&mgt(&["run", &cfg, "--out", b.to_str().unwrap()])), 0);
    let manifest = a.join("manifest.json");
    assert_eq!(code(&mgt(&["run", manifest.to_str().unwrap(), "--out", c.to_str().unwrap()])), 0);
    for f in ["grid.bin", "trace.csv", "manifest.json"] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
        assert_eq!(x, fs::read(c.join(f)).unwrap(), "{f} after replay");
    }
}

#[test]
fn steps_above_tokens_is_exit_2_naming_fields() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "cfg.json", r#"{"sampler": {"width": 2, "height": 2, "steps": 5}}"#);
    let o = mgt(&["run", &cfg, "--out", d.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("sampler.steps") && e.contains("sampler.width") && e.contains("sampler.height"), "{e}");
    assert!(!d.path().join("o").exists());
}

#[test]
fn bad_field_reports_path() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "cfg.json", r#"{"sampler": {"schedule": {"kind": "pow_up", "rho": "x"}}}"#);
    let o = mgt(&["run", &cfg, "--out", d.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sampler.schedule"), "{}", stderr(&o));
    let o = mgt(&["run", d.path().join("missing.json").to_str().unwrap(), "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn tampered_manifest_is_exit_2() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "cfg.json", SMALL);
    let a = d.path().join("a");
    assert_eq!(code(&mgt(&["run", &cfg, "--out", a.to_str().unwrap()])), 0);
    let text = fs::read_to_string(a.join("manifest.json")).unwrap().replace("\"seed\": 5", "\"seed\": 6");
    let m = write(d.path(), "m.json", &text);
    assert_eq!(code(&mgt(&["run", &m, "--out", d.path().join("b").to_str().unwrap()])), 2);
}

#[test]
fn unwritable_output_is_exit_1() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "cfg.json", SMALL);
    let blocker = write(d.path(), "file", "");
    let o = mgt(&["run", &cfg, "--out", &format!("{blocker}/sub")]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn diff_ablation_cartesian_and_deterministic() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "cfg.json", SMALL);
    let run = |name: &str, workers: &str| {
        let out = d.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_mgt"))
            .args(["diff-ablation", "--config", &cfg, "--out", out.to_str().unwrap()])
            .env("MGT_WORKERS", workers)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(out.join("sweep.csv")).unwrap()
    };
    let a = run("a", "1");
    let b = run("b", "4");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 101);
}

#[test]
fn schedule_sweep_has_mean_loglik_column() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "cfg.json", SMALL);
    let out = d.path().join("s");
    let o = mgt(&["sweep-schedule", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "3", "--kind", "pow-up"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.split(',').any(|h| h == "mean_oracle_loglik"), "{header}");
    assert_eq!(text.lines().count(), 1 + 7 * 3);
}

#[test]
fn generic_sweep_empty_axis_is_exit_2() {
    let d = TempDir::new().unwrap();
    let spec = write(d.path(), "s.json", r#"{"axis": "sampler.seed", "values": []}"#);
    let o = mgt(&["sweep", &spec, "--out", d.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = mgt(&["sweep", &spec, "--out", "o", "--workers", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn other_subcommands_run() {
    let d = TempDir::new().unwrap();
    let out = |n: &str| d.path().join(n).to_str().unwrap().to_string();
    let small_tf = write(
        d.path(),
        "tf.json",
        r#"{"sampler": {"width": 4, "height": 4, "steps": 4}, "backend": {"kind": "transformer", "model": {"width": 4, "height": 4}}}"#,
    );
    let cases: Vec<Vec<String>> = vec![
        vec!["zigzag-ablation".into(), "--config".into(), small_tf.clone(), "--seeds".into(), "2".into(), "--cfg-scale".into(), "3".into(), "--out".into(), out("z")],
        vec!["noise-reg-ablation".into(), "--seeds".into(), "2".into(), "--out".into(), out("n")],
        vec!["solver-bench".into(), "--seeds".into(), "2".into(), "--out".into(), out("s")],
        vec!["tome-bench".into(), "--config".into(), small_tf.clone(), "--seeds".into(), "2".into(), "--rope".into(), "destination".into(), "--out".into(), out("t")],
        vec!["quantize".into(), "--eval-grids".into(), "2".into(), "--out".into(), out("q")],
        vec!["trace-export".into(), small_tf.clone(), "--seeds".into(), "3".into(), "--out".into(), out("e")],
    ];
    for args in cases {
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = mgt(&a);
        assert_eq!(code(&o), 0, "{:?}: {}", a, stderr(&o));
    }
    assert!(d.path().join("q/quant_report.csv").is_file());
    assert!(d.path().join("e/entropy.csv").is_file() && d.path().join("e/kl.csv").is_file());
    let tome = fs::read_to_string(d.path().join("t/sweep.csv")).unwrap();
    assert_eq!(tome.lines().count(), 1 + 4 * 2);
}
