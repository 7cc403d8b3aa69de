use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmd")).args(args).output().expect("spawn tmd")
}

fn write_config(dir: &Path, steps: u64) -> String {
    let path = dir.join("cfg.json");
    let cfg = format!(
        r#"{{"env":{{"preset":"corridor"}},
            "tmd":{{"zeta":0.1,"gamma":0.9,"lr":1e-3,"batch_size":16,"reduction":"mean"}},
            "encoder":{{"hidden":[16]}},
            "policy":{{"hidden":[8]}},
            "train":{{"steps":{steps},"checkpoint_every":5}},
            "eval":{{"episodes":3}},
            "seeds":[0]}}"#
    );
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 10);
    let out = dir.path().join("run");
    let o = tmd(&["train", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,nce,l_i,l_t,total"));
    assert_eq!(lines.count(), 10);
    assert!(out.join("step-5.ckpt").exists());
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("final.ckpt.json")).unwrap()).unwrap();
    assert_eq!(side["step"], 10);
    assert_eq!(side["seed"], 0);

    let o = tmd(&["eval", out.join("final.ckpt").to_str().unwrap(), &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["tasks"].as_array().unwrap().len(), 2);
    let agg = report["aggregate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&agg));
}

#[test]
fn verify_exit_codes() {
    let o = tmd(&["verify", "divergence"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 failed"));
    let o = tmd(&["verify", "nonsense"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown suite"));
}

#[test]
fn oracle_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mdp = dir.path().join("mdp.json");
    fs::write(
        &mdp,
        r#"{"n_states":2,"n_actions":1,"gamma":0.9,"transition":[[[0.0,1.0]],[[1.0,0.0]]]}"#,
    )
    .unwrap();
    let o = tmd(&["oracle", mdp.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["d_star.csv", "d_beta.csv"] {
        assert!(dir.path().join(f).exists());
    }
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"n_states":1,"n_actions":1,"gamma":0.9,"transition":[[[0.5]]]}"#).unwrap();
    assert!(!tmd(&["oracle", bad.to_str().unwrap()]).status.success());
}

#[test]
fn gen_data_and_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 3);
    let data = dir.path().join("data.jsonl");
    let o = tmd(&["gen-data", &cfg, "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&data).unwrap().lines().count(), 100);

    let csv = dir.path().join("ablate.csv");
    let o = tmd(&["ablate", &cfg, "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("variant,mean_success,stderr,n_seeds\n"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"env":{"preset":"corridor"},"tmd":{"zeta":-1,"gamma":0.9},"train":{"steps":1}}"#).unwrap();
    let o = tmd(&["train", path.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert!(!o.status.success());
}
