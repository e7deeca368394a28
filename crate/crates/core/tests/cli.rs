use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[experiment]
seed = 3

[synthetic]
months = 48
factors = 3
stocks = 4

[periods]
tail = 2003-07..2003-12

[models]
matrix = none
d_model = 4

[model S]
family = sert
lnf = yes

[model E]
family = encoder-only
heads = 2

[training]
in_sample_len = 36
max_epochs = 4
pretrain_epochs = 4
stride = 3
";

fn sert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sert"))
        .args(args)
        .env_remove("SERT_OUT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_every_artifact_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = sert(&["run", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second = sert(&["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--jobs", "1"]);
    assert!(second.status.success());

    for d in ["data", "predictions", "models", "eval", "backtest", "histograms"] {
        assert!(a.join(d).is_dir(), "missing {d}/");
    }
    assert_eq!(files_under(&a.join("predictions")), files_under(&b.join("predictions")));
    assert_eq!(files_under(&a.join("eval")), files_under(&b.join("eval")));

    let m = manifest(&a);
    assert_eq!(m["complete"], true);
    assert_eq!(m["seed"], 3);
    assert_eq!(m["stages"].as_array().unwrap().len(), 5);
    let recorded = &m["stages"][1]["outputs"][0];
    let bytes = fs::read(a.join(recorded["path"].as_str().unwrap())).unwrap();
    assert_eq!(recorded["sha256"].as_str().unwrap().len(), 64);
    assert!(!bytes.is_empty());
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(sert(&["synth", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    assert!(sert(&["synth", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "4"]).status.success());
    assert_ne!(fs::read(a.join("data/returns.csv")).unwrap(), fs::read(b.join("data/returns.csv")).unwrap());
    assert_eq!(manifest(&b)["seed"], 4);
}

#[test]
fn out_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("seed = 3", "seed = 3\nout = from-config");
    let cfg = write_config(dir.path(), "tiny.cfg", &text);
    assert!(sert(&["synth", cfg.to_str().unwrap()]).status.success());
    assert!(dir.path().join("from-config/data/factors.csv").is_file());

    let env_out = dir.path().join("from-env");
    let status = Command::new(env!("CARGO_BIN_EXE_sert"))
        .args(["synth", cfg.to_str().unwrap()])
        .env("SERT_OUT", &env_out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(env_out.join("data/factors.csv").is_file());
}

#[test]
fn zero_models_fail_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("[model S]\nfamily = sert\nlnf = yes\n\n[model E]\nfamily = encoder-only\nheads = 2\n", "");
    let cfg = write_config(dir.path(), "none.cfg", &text);
    let out = dir.path().join("out");
    let r = sert(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("no models"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(!out.exists());
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "noseed.cfg", &TINY.replace("seed = 3\n", ""));
    let r = sert(&["train", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("seed"));
}

#[test]
fn failed_stage_is_flagged_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let out = dir.path().join("out");
    let r = sert(&["eval", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("run the train stage first"));
    let m = manifest(&out);
    assert_eq!(m["complete"], false);
    assert_eq!(m["stages"][0]["stage"], "eval");
    assert_eq!(m["stages"][0]["status"], "failed");
    assert!(m["error"].as_str().unwrap().contains("predictions"));
}

#[test]
fn file_inputs_are_hashed_and_caps_are_required_for_value_weighting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let synth = dir.path().join("synth");
    assert!(sert(&["synth", cfg.to_str().unwrap(), "--out", synth.to_str().unwrap()]).status.success());

    let files = "[experiment]\nseed = 3\n\n[data]\nfactors = synth/data/factors.csv\nreturns = synth/data/returns.csv\n";
    let body = TINY.split_once("[periods]").unwrap().1;
    let cfg = write_config(dir.path(), "files.cfg", &format!("{files}\n[periods]{body}\n[backtest]\nweightings = VW\n"));
    let out = dir.path().join("out");
    let r = sert(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("caps"));
    let m = manifest(&out);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
    let stages: Vec<(&str, &str)> = m["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| (s["stage"].as_str().unwrap(), s["status"].as_str().unwrap()))
        .collect();
    assert_eq!(stages, [("train", "ok"), ("eval", "ok"), ("backtest", "failed")]);
}

#[test]
fn selftest_prints_a_passing_table() {
    let r = sert(&["selftest"]);
    assert!(r.status.success());
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.lines().any(|l| l.starts_with("PASS gradient/matmul")));
    assert!(!text.lines().any(|l| l.starts_with("FAIL")));
}
