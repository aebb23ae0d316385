use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[shift]
source_per_class = 25
target_per_class = 25

[network]
hidden = 12,12
bottleneck = 6
disc_hidden = 8

[pretrain]
iterations = 120
log_every = 40

[adapt]
iterations = 120
log_every = 40

[run]
seeds = 1,2
";

fn mjkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mjkd")).args(args).output().expect("spawn mjkd")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.ini");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn config_command_echoes_a_parseable_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let first = mjkd(&["config", "--config", &cfg]);
    assert!(first.status.success());
    let echoed = dir.path().join("echo.ini");
    fs::write(&echoed, stdout(&first)).unwrap();
    let second = mjkd(&["config", "--config", echoed.to_str().unwrap()]);
    assert_eq!(stdout(&first), stdout(&second));
    assert!(stdout(&first).contains("hidden = 12,12"));
}

#[test]
fn run_writes_summary_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("runs");
    let out = out.to_str().unwrap();
    let run = mjkd(&["run", "--config", &cfg, "--out", out]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout(&run).contains("mean_target_acc="));
    assert!(Path::new(out).join("seed-1").is_dir() && Path::new(out).join("seed-2").is_dir());

    let again = mjkd(&["run", "--config", &cfg, "--out", out]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(mjkd(&["run", "--config", &cfg, "--out", out, "--force", "--seed", "2"]).status.code(), Some(0));
}

#[test]
fn individual_stages_reproduce_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let full = dir.path().join("full");
    let staged = dir.path().join("staged");
    let (full, staged) = (full.to_str().unwrap(), staged.to_str().unwrap());
    assert!(mjkd(&["run", "--config", &cfg, "--out", full, "--seed", "2"]).status.success());
    for stage in ["generate", "pretrain", "select", "adapt", "evaluate", "theory-check"] {
        let o = mjkd(&[stage, "--config", &cfg, "--out", staged, "--seed", "2"]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |root: &str, name: &str| fs::read(Path::new(root).join("seed-2").join(name)).unwrap();
    for name in ["result.txt", "adapted.ckpt", "selection.txt", "embedding.csv"] {
        assert_eq!(read(full, name), read(staged, name), "{name}");
    }
    let theory = String::from_utf8(read(staged, "theory.txt")).unwrap();
    assert!(theory.contains("jsd=") && theory.contains("unreliable_cells="));
}

#[test]
fn sweep_accepts_fractional_proportions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("sweep");
    let o = mjkd(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "1", "--proportions", "1/2,1/20"]);
    assert_eq!(o.status.code(), Some(0));
    let rows: Vec<String> = stdout(&o).lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(rows, ["0.5", "0.05"]);
}

#[test]
fn config_and_training_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ini");
    fs::write(&bad, "[adapt]\nlabeled_batch = 7\n").unwrap();
    let o = mjkd(&["run", "--config", bad.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let bad_prop = mjkd(&["sweep", "--proportions", "0", "--out", dir.path().join("y").to_str().unwrap()]);
    assert_eq!(bad_prop.status.code(), Some(2));

    let diverging = dir.path().join("diverge.ini");
    fs::write(&diverging, SMALL.replace("[pretrain]\n", "[pretrain]\nbase_lr = 1000000\n")).unwrap();
    let o = mjkd(&["run", "--config", diverging.to_str().unwrap(), "--out", dir.path().join("z").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let missing = mjkd(&["pretrain", "--out", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3));
}
