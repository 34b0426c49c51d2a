//! End-to-end checks of the `sospkit` binary: exit codes, error messages
//! and byte-level reproducibility of the written outputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn sospkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sospkit"))
        .args(args)
        .env_remove("SOSPKIT_SEED")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = r#"
objective = "double-well"
dim = 4
n = 1000
s = 1.0
C = 0.01
start = "random"
start_radius = 1.0
[overrides]
log_factor = 1.0
"#;

#[test]
fn unknown_key_exits_with_config_error_naming_it() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}\nbogus_knob = 3\n"));
    let out = sospkit(&["run", "--config", &cfg, "--seeds", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus_knob"), "stderr: {err}");
}

#[test]
fn empty_seed_list_exits_with_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &format!("seeds = []\n{SMALL}"));
    let out = sospkit(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn run_rejects_escape_modes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &format!("mode = \"escape-test\"\n{SMALL}"));
    let out = sospkit(&["run", "--config", &cfg, "--seeds", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("escape-test"));
}

#[test]
fn unknown_preset_is_a_config_error() {
    let out = sospkit(&["run", "--preset", "fastest", "--seeds", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn defaults_round_trip_through_a_config_file() {
    let out = sospkit(&["defaults"]);
    assert!(out.status.success());
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &String::from_utf8(out.stdout).unwrap());
    let dir = tmp.path().join("out");
    let run = sospkit(&[
        "run",
        "--config",
        &cfg,
        "--seeds",
        "1",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(dir.join("results.csv").exists());
}

fn without_last_column(text: &str) -> String {
    text.lines()
        .map(|l| l.rsplit_once(',').map(|(a, _)| a).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

fn files_under(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reruns_are_identical_except_wall_time() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &format!("mode = \"sweep\"\n{SMALL}\n[sweep]\nn = [500, 1000]\n"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (dir, workers) in [(&a, "1"), (&b, "2")] {
        let out = sospkit(&[
            "sweep",
            "--config",
            &cfg,
            "--seeds",
            "3,4",
            "--workers",
            workers,
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    assert!(files.iter().any(|f| f.ends_with("oracle_trace.csv")));
    for f in &files {
        let (x, y) = (fs::read_to_string(a.join(f)).unwrap(), fs::read_to_string(b.join(f)).unwrap());
        match f.as_str() {
            // wall_time is the last column of the per-run table
            "results.csv" => assert_eq!(without_last_column(&x), without_last_column(&y)),
            "config.toml" => {
                let strip = |s: &str| {
                    s.lines()
                        .filter(|l| !l.starts_with("out") && !l.starts_with("workers"))
                        .collect::<Vec<_>>()
                        .join("\n")
                };
                assert_eq!(strip(&x), strip(&y));
            }
            _ => assert_eq!(x, y, "{f} differs"),
        }
    }
}
