use std::path::Path;
use std::process::{Command, Output};

fn cli(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ardm-dpo"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn smoke_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = cli(&run, &["--preset", "smoke", "all"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("Base") && table.contains("RAFT iter 2") && table.contains("DPO (beta=200"));
    for f in [
        "config.toml",
        "dpo/metrics.csv",
        "summary.json",
        "table.txt",
        "pretrain/base.ckpt",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }

    // The stored config is picked up when no preset is given.
    let again = cli(&run, &["all"]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert!(stderr(&again).contains("0 stage(s) ran"));

    let rep = cli(&run, &["report"]);
    assert!(rep.status.success());
    assert_eq!(String::from_utf8(rep.stdout).unwrap(), table);

    // A flag that changes the config is refused in a directory stamped by another.
    let clash = cli(&run, &["dpo", "--beta", "400"]);
    assert!(!clash.status.success());
    assert!(stderr(&clash).contains("hash"), "{}", stderr(&clash));
}

#[test]
fn zero_beta_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    for args in [
        &["--preset", "smoke", "dpo", "--beta", "0"][..],
        &["--preset", "smoke", "--set", "dpo.beta=0", "all"][..],
    ] {
        let o = cli(&run, args);
        assert!(!o.status.success());
        assert!(stderr(&o).contains("beta"), "{}", stderr(&o));
        assert!(!run.exists());
    }
}

#[test]
fn later_stage_names_the_missing_one() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = cli(&run, &["--preset", "smoke", "gen-prefs"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("pretrain"), "{}", stderr(&o));
}

#[test]
fn config_file_with_extends_and_reward_switch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, "extends = \"smoke\"\nname = \"mine\"\n[pretrain]\nsteps = 5\n").unwrap();
    let run = dir.path().join("run");
    let o = cli(&run, &["--config", path.to_str().unwrap(), "pretrain"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stored = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(stored.contains("name = \"mine\"") && stored.contains("steps = 5"));

    let other = dir.path().join("b");
    let o = cli(&other, &["--preset", "smoke", "gen-prefs", "--reward", "task-c"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("task-c"));
}

#[test]
fn unknown_preset_lists_the_known_ones() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["--preset", "huge", "pretrain"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("task-a"));
}
