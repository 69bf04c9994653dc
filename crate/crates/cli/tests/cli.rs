use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cmvae_core::data::FactorSpec;
use cmvae_core::train::{RunConfig, TrainState};

fn cmvae(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cmvae"));
    cmd.args(args).current_dir(dir).env_remove("CMVAE_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("cmvae runs")
}

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.spec = FactorSpec { items_per_modality: 60, ..FactorSpec::default() };
    cfg.data.test_items = 50;
    cfg.data.pairs_per_instance = 3;
    cfg.model.hidden = vec![8];
    cfg.optimizer.steps = 6;
    cfg.optimizer.batch_size = 12;
    cfg.eval_every = 3;
    cfg.eval.joint_samples = 50;
    cfg.eval.pmi_k = 4;
    cfg.eval.loglik_k = 4;
    cfg.objective.term1.k = 4;
    cfg.objective.term2.k = 4;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) {
    fs::write(dir.join(name), cfg.to_json().unwrap()).unwrap();
}

#[test]
fn train_writes_logs_metrics_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "c.json", &tiny());
    let out = cmvae(tmp.path(), &["train", "--config", "c.json", "--out", "run"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("run");
    for f in ["config.json", "train_log.csv", "metrics.csv", "final.ckpt", "checkpoints/step_000000.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# "));
    assert_eq!(metrics.lines().count(), 2 + 2);
    assert_eq!(TrainState::load(&run.join("final.ckpt")).unwrap().step, 6);

    // A second fresh run into the same directory is refused.
    let again = cmvae(tmp.path(), &["train", "--config", "c.json", "--out", "run"], &[]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn zero_steps_write_only_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.optimizer.steps = 0;
    write_config(tmp.path(), "c.json", &cfg);
    let out = cmvae(tmp.path(), &["train", "--config", "c.json", "--out", "run"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("run");
    assert!(run.join("checkpoints/step_000000.ckpt").exists());
    assert!(!run.join("metrics.csv").exists());
    assert_eq!(TrainState::load(&run.join("final.ckpt")).unwrap().step, 0);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(cmvae(dir, &["train", "--config", "missing.json"], &[]).status.code(), Some(2));

    fs::write(dir.join("bad.json"), r#"{"optimizer": {"learning_rate": -1.0}}"#).unwrap();
    assert_eq!(cmvae(dir, &["train", "--config", "bad.json"], &[]).status.code(), Some(2));

    fs::write(dir.join("garbled.json"), "{not json").unwrap();
    assert_eq!(cmvae(dir, &["eval", "--checkpoint", "x.ckpt", "--config", "garbled.json"], &[]).status.code(), Some(2));

    write_config(dir, "c.json", &tiny());
    let seeded = cmvae(dir, &["train", "--config", "c.json"], &[("CMVAE_SEED", "abc")]);
    assert_eq!(seeded.status.code(), Some(2));

    let gamma = cmvae(dir, &["sweep-gamma", "--config", "c.json", "--gammas", "0.5"], &[]);
    assert_eq!(gamma.status.code(), Some(2));

    fs::write(dir.join("pipe.json"), r#"{"pmi_k": 0}"#).unwrap();
    let prop = cmvae(dir, &["propagate", "--config", "c.json", "--pipeline", "pipe.json"], &[]);
    assert_eq!(prop.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three_and_names_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.optimizer.learning_rate = 1e300;
    cfg.optimizer.steps = 50;
    write_config(tmp.path(), "c.json", &cfg);
    let out = cmvae(tmp.path(), &["train", "--config", "c.json", "--out", "run"], &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("last good checkpoint"), "{err}");
}

#[test]
fn seed_override_changes_training_but_not_data() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "c.json", &tiny());
    for (run, seed) in [("a", "11"), ("b", "12")] {
        let out = cmvae(dir, &["train", "--config", "c.json", "--out", run], &[("CMVAE_SEED", seed)]);
        assert!(out.status.success());
    }
    let log = |r: &str| fs::read_to_string(dir.join(r).join("train_log.csv")).unwrap();
    assert_ne!(log("a"), log("b"));
    let cfg = |r: &str| RunConfig::load(&dir.join(r).join("config.json")).unwrap();
    assert_eq!((cfg("a").seed, cfg("b").seed), (11, 12));
    assert_eq!(cfg("a").data, cfg("b").data);
}

#[test]
fn eval_reproduces_the_final_training_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "c.json", &tiny());
    assert!(cmvae(dir, &["train", "--config", "c.json", "--out", "run"], &[]).status.success());
    let out = cmvae(dir, &["eval", "--checkpoint", "run/final.ckpt", "--config", "c.json"], &[]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    let evaluated: Vec<&str> = csv.lines().skip(2).collect();
    assert!(evaluated.iter().all(|l| l.starts_with("step_6,")));
    let joint = evaluated.iter().find(|l| l.contains(",joint_coh,")).unwrap();
    let trained = fs::read_to_string(dir.join("run/metrics.csv")).unwrap();
    let last = trained.lines().last().unwrap();
    let joint_value = joint.rsplit(',').next().unwrap();
    assert_eq!(last.split(',').nth(4).unwrap(), joint_value);
}

#[test]
fn full_share_propagation_reports_undefined_f1() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "c.json", &tiny());
    let out = cmvae(dir, &["propagate", "--config", "c.json", "--pretrain-percent", "100", "--out", "p"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("F1 undefined"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("p/report.json")).unwrap()).unwrap();
    assert!(report["threshold"].is_null());
    assert_eq!(report["n_mixed"], 0);
    let csv = fs::read_to_string(dir.join("p/metrics.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("before,")) && csv.lines().any(|l| l.starts_with("after,")));
}

#[test]
fn sweeps_emit_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir, "c.json", &tiny());
    let out = cmvae(dir, &["sweep-gamma", "--config", "c.json", "--gammas", "1,2", "--seeds", "1,2"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().count(), 2 + 4);
    assert!(csv.lines().nth(1).unwrap().ends_with("test_loglik"));

    let out = cmvae(dir, &["sweep-data", "--config", "c.json", "--percents", "50,100", "--variants", "baseline,cI"], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let metrics = cmvae_core::eval::Metrics::default().named().len();
    assert_eq!(csv.lines().count(), 2 + 2 * 2 * metrics);
    assert!(csv.lines().any(|l| l.starts_with("cI,50.000000,0,cross_coh_mean,")));
}

#[test]
fn oracle_check_passes_and_writes_json() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cmvae(tmp.path(), &["oracle-check", "--out", "oracle.json"], &[]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches(" ok").count(), 5, "{text}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("oracle.json")).unwrap()).unwrap();
    assert_eq!(report["sandwich"]["gaps"].as_array().unwrap().len(), 3);
}

#[test]
fn unknown_config_fields_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("typo.json"), r#"{"optimizer": {"learing_rate": 0.01}}"#).unwrap();
    let out = cmvae(tmp.path(), &["train", "--config", "typo.json"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learing_rate"));
}
