use std::path::Path;
use std::process::Command;

fn tapm(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_tapm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("TAPM_CACHE_DIR")
        .output()
        .unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn help_exits_zero() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(tapm(&["--help"], d.path()).0, 0);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let c = config(d.path(), "[attacks]\nepsilon = 0.1\n");
    let (code, err) = tapm(&["eval", "--config", &c], &d.path().join("run"));
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("epsilon"), "{err}");
}

#[test]
fn eval_before_gen_attacks_is_a_dependency_error() {
    let d = tempfile::tempdir().unwrap();
    let (code, err) = tapm(&["eval"], d.path());
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("gen-attacks") || err.contains("train-zoo"), "{err}");
}

#[test]
fn downstream_stages_name_their_dependency() {
    let d = tempfile::tempdir().unwrap();
    for stage in ["gen-attacks", "train-defense", "solve-game", "analyze"] {
        let (code, err) = tapm(&[stage], d.path());
        assert_eq!(code, 3, "{stage}: {err}");
        assert!(err.contains("needs"), "{err}");
    }
}

#[test]
fn unknown_ablation_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let (code, err) = tapm(&["ablate", "--kind", "drop-everything"], d.path());
    assert_eq!(code, 2, "{err}");
}

#[test]
fn zero_replicates_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let c = config(d.path(), "[ablation]\nreplicates = 0\n");
    let (code, _) = tapm(&["ablate", "--kind", "leave-one-group-out", "--config", &c], &d.path().join("run"));
    assert_eq!(code, 2);
}

#[test]
fn zero_jobs_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(tapm(&["eval", "--jobs", "0"], d.path()).0, 2);
}

#[test]
fn ledger_from_another_config_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let (code, _) = tapm(&["eval", "--seed", "1"], d.path());
    assert_eq!(code, 3);
    let (code, err) = tapm(&["eval", "--seed", "2"], d.path());
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("config"), "{err}");
}
