use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn gama(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gama"))
        .args(args)
        .current_dir(dir)
        .env_remove("GAMA_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMOKE: &str = "seeds = [0]\noutput_dir = \"out\"\n[dataset]\nkind = \"two_moons\"\n[train]\nepochs = 5\n";

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = gama(dir.path(), &["train", "--config", "nowhere.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.toml"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[train]\nepochz = 3\n").unwrap();
    let o = gama(dir.path(), &["train", "--config", "c.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gama(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(gama(dir.path(), &["eval"]).status.code(), Some(2));
}

#[test]
fn smoke_training_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("smoke.toml"), SMOKE).unwrap();
    let start = Instant::now();
    let o = gama(dir.path(), &["train", "--config", "smoke.toml"]);
    assert!(start.elapsed() < Duration::from_secs(10));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("out/seed_0");
    for f in ["checkpoint.txt", "report.json", "loss.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let first = std::fs::read(run.join("loss.csv")).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert_eq!(text.lines().next(), Some("step,cls,on,off,geom,total"));
    assert_eq!(text.lines().count(), 1 + 5 * 7);

    let report = json(&run.join("report.json"));
    for key in ["config", "dataset", "fit"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(report["fit"]["seed"], 0);
    assert_eq!(report["fit"]["target_label_reads"], 0);
    assert!(report["fit"]["wall_time_s"].as_f64().unwrap() > 0.0);
    assert_eq!(report["fit"]["epochs"].as_array().unwrap().len(), 5);

    let o = gama(dir.path(), &["train", "--config", "smoke.toml"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(run.join("loss.csv")).unwrap(), first);

    // flag overrides
    let o = gama(
        dir.path(),
        &["train", "--config", "smoke.toml", "--seed", "3", "--epochs", "1", "--output", "other"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let loss = std::fs::read_to_string(dir.path().join("other/seed_3/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 7);
}

#[test]
fn output_root_env_relocates_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("smoke.toml"), SMOKE).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gama"))
        .args(["train", "--config", "smoke.toml", "--epochs", "1"])
        .current_dir(dir.path())
        .env("GAMA_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(root.path().join("out/seed_0/checkpoint.txt").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn divergence_exits_3_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        "seeds = [0]\noutput_dir = \"out\"\n[train]\nepochs = 5\nlearning_rate = 1e308\n[train.optimizer]\nkind = \"sgd\"\n",
    )
    .unwrap();
    let o = gama(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    assert!(dir.path().join("out/seed_0/checkpoint.last_good.txt").exists());
}

#[test]
fn eval_reports_and_null_attack_matches_clean() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("smoke.toml"), SMOKE).unwrap();
    assert_eq!(gama(dir.path(), &["train", "--config", "smoke.toml"]).status.code(), Some(0));
    let o = gama(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "out/seed_0/checkpoint.txt",
            "--config",
            "smoke.toml",
            "--epsilon",
            "0",
            "--output",
            "eval.json",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = json(&dir.path().join("eval.json"));
    let m = &report["metrics"];
    assert_eq!(m["robust_accuracy"], m["target_accuracy"]);
    assert!(m["geoalign"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["per_class_accuracy"].as_array().unwrap().len(), 2);

    let o = gama(
        dir.path(),
        &["eval", "--checkpoint", "out/seed_0/checkpoint.txt", "--config", "smoke.toml"],
    );
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let m = &report["metrics"];
    assert!(m["robust_accuracy"].as_f64().unwrap() <= m["target_accuracy"].as_f64().unwrap());
}

#[test]
fn eval_rejects_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("smoke.toml"), SMOKE).unwrap();
    assert_eq!(gama(dir.path(), &["train", "--config", "smoke.toml", "--epochs", "1"]).status.code(), Some(0));
    let o = gama(dir.path(), &["gen-data", "--kind", "swiss-roll", "--out", "roll.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = gama(dir.path(), &["eval", "--checkpoint", "out/seed_0/checkpoint.txt", "--data", "roll.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("features"));
}

#[test]
fn gen_data_round_trips_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let o = gama(
        dir.path(),
        &["gen-data", "--kind", "two-moons", "--out", "d/moons.csv", "--seed", "4", "--rotation-deg", "45", "--shots", "2"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let side = json(&dir.path().join("d/moons.json"));
    assert_eq!(side["generator"], "two_moons");
    assert_eq!(side["seed"], 4);
    assert_eq!(side["params"]["rotation_deg"], 45.0);
    assert_eq!(side["splits"]["target_shots"], 4);
    let csv = std::fs::read_to_string(dir.path().join("d/moons.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("f0,f1,label,domain"));
    assert_eq!(csv.lines().count(), 1 + 1000);
}

#[test]
fn geoalign_on_embedding_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("a.csv"), "e0,e1\n0,0\n1,0\n0,1\n2,2\n").unwrap();
    let o = gama(p, &["geoalign", "--source", "a.csv", "--target", "a.csv", "--k", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 0.0);

    std::fs::write(p.join("s.csv"), "e0,e1\n1,1\n").unwrap();
    std::fs::write(p.join("t.csv"), "e0,e1\n4,5\n").unwrap();
    let o = gama(p, &["geoalign", "--source", "s.csv", "--target", "t.csv", "--k", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!((stdout(&o).trim().parse::<f64>().unwrap() - 5.0).abs() < 1e-12);

    std::fs::write(p.join("empty.csv"), "e0,e1\n").unwrap();
    let o = gama(p, &["geoalign", "--source", "empty.csv", "--target", "t.csv"]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(p.join("wide.csv"), "e0,e1,e2\n1,2,3\n").unwrap();
    let o = gama(p, &["geoalign", "--source", "wide.csv", "--target", "t.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn geoalign_from_checkpoint_and_data() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("smoke.toml"), SMOKE).unwrap();
    assert_eq!(gama(p, &["train", "--config", "smoke.toml", "--epochs", "1"]).status.code(), Some(0));
    assert_eq!(gama(p, &["gen-data", "--kind", "two-moons", "--out", "m.csv"]).status.code(), Some(0));
    let o = gama(
        p,
        &["geoalign", "--checkpoint", "out/seed_0/checkpoint.txt", "--data", "m.csv", "--dump", "emb"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).trim().parse::<f64>().unwrap() > 0.0);
    let o = gama(
        p,
        &["geoalign", "--source", "emb/source_embeddings.csv", "--target", "emb/source_embeddings.csv"],
    );
    assert_eq!(stdout(&o).trim(), "0");
}

#[test]
fn ablate_writes_tables_and_echoes_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("a.toml"),
        "seeds = [0, 1]\noutput_dir = \"abl\"\n[dataset]\nkind = \"two_moons\"\nn_per_domain = 80\n[train]\nepochs = 2\n",
    )
    .unwrap();
    let o = gama(p, &["ablate", "--config", "a.toml", "--drop", "off,geom"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("no_off") && out.contains("lambda_off=0") && out.contains("beta=0"), "{out}");
    assert!(out.contains("no_geom") && out.contains("lambda_geom=0"));
    assert!(out.contains("source_only"));

    let csv = std::fs::read_to_string(p.join("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("variant,seed,target_accuracy,robust_accuracy,geoalign"));
    assert_eq!(csv.lines().count(), 1 + 4 * (2 + 2));
    let report = json(&p.join("abl/ablation.json"));
    assert_eq!(report["seeds"], serde_json::json!([0, 1]));
    assert_eq!(report["dropped"], serde_json::json!(["off", "geom"]));
    let variants = report["variants"].as_array().unwrap();
    assert_eq!(variants[1]["name"], "no_off");
    assert_eq!(variants[1]["overrides"], serde_json::json!([["lambda_off", 0.0], ["beta", 0.0]]));
    assert!(p.join("abl/no_geom/seed_1/loss.csv").exists());

    let o = gama(p, &["ablate", "--config", "a.toml", "--drop", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        gama::experiment::ExperimentConfig::from_toml_str(&text)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
