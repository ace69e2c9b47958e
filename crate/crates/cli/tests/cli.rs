//! Black-box tests of the `fedmoe` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fedmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmoe"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn fedmoe")
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_smoke(out: &Path, extra: &[&str]) -> Output {
    let cfg = smoke_config();
    let mut args = vec!["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    fedmoe(&args)
}

#[test]
fn missing_config_names_the_path() {
    let o = fedmoe(&["run", "/definitely/not/here.toml"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("config file not found: /definitely/not/here.toml"));
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "rounds = 2\nroundz = 3\n[search]\nalpha = 0.5\n").unwrap();
    let o = fedmoe(&["run", path.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("roundz") && err.contains("search.alpha"), "{err}");
}

#[test]
fn run_writes_reports_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = run_smoke(a.path(), &["--rounds", "3"]);
    assert!(oa.status.success(), "{}", stderr(&oa));
    assert!(stdout(&oa).contains("rounds=3"));
    let ob = run_smoke(b.path(), &["--rounds", "3"]);
    assert!(ob.status.success());
    // The echoed config differs only in output_dir, so it is checked separately.
    for f in ["rounds.csv", "map.csv", "summary.csv", "similarity.csv", "profiles.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert!(x == y, "{f} differs between identical runs");
    }
    let echo = std::fs::read_to_string(a.path().join("config.resolved.toml")).unwrap();
    assert!(echo.contains("rounds = 3"));
}

#[test]
fn ablate_sets_the_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let o = fedmoe(&[
        "ablate",
        cfg.to_str().unwrap(),
        "--variant",
        "no_stage2",
        "--rounds",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("variant=NoStage2"));
    let bad = fedmoe(&["ablate", cfg.to_str().unwrap(), "--variant", "no_stage3"]);
    assert!(!bad.status.success());
}

#[test]
fn oracle_search_prints_a_mask_and_reports_deficits() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_smoke(dir.path(), &["--rounds", "1"]).status.success());
    let profiles = dir.path().join("profiles.csv");
    let cfg = smoke_config();
    let o = fedmoe(&[
        "oracle-search",
        profiles.to_str().unwrap(),
        "--client",
        "0",
        "--budget",
        "150000",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("layer,expert,retained\n"));
    assert_eq!(text.lines().filter(|l| l.ends_with(",true") || l.ends_with(",false")).count(), 16);
    assert!(text.contains("# exhaustive theta=") && text.contains("# heuristic  theta="));

    let tiny = fedmoe(&[
        "oracle-search",
        profiles.to_str().unwrap(),
        "--client",
        "0",
        "--budget",
        "1000",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(!tiny.status.success());
    assert!(stderr(&tiny).contains("deficit"), "{}", stderr(&tiny));
}

#[test]
fn cvi_combines_summaries() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_smoke(a.path(), &["--rounds", "2"]).status.success());
    assert!(run_smoke(b.path(), &["--rounds", "2", "--seed", "9"]).status.success());
    let sa = a.path().join("summary.csv");
    let sb = b.path().join("summary.csv");
    let o = fedmoe(&["cvi", sa.to_str().unwrap(), sb.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("task,cv\n"));
    let cvi: f64 = text.lines().last().unwrap().strip_prefix("cvi,").unwrap().parse().unwrap();
    assert!(cvi.is_finite() && cvi >= 0.0);

    let single = fedmoe(&["cvi", sa.to_str().unwrap()]);
    assert!(!single.status.success());
}
