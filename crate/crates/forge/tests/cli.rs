use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use lfads_forge::dataset_io::{read_dataset, read_manifest};

fn forge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfads-forge"))
        .current_dir(dir)
        .env_remove("LFADS_FORGE_THREADS")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = forge(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = forge(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

const TINY: [&str; 8] = ["--conditions", "4", "--trials-per-condition", "5", "--steps", "20", "--neurons", "5"];

fn tiny_generate(dir: &Path, out: &str, seed: &str) {
    let mut args = vec!["generate", "lorenz", "--seed", seed, "--out", out];
    args.extend(TINY);
    ok(dir, &args);
}

fn write_config(dir: &Path, name: &str, extra_model: &str, max_epochs: u64) {
    let cfg = format!(
        r#"{{
  "task": "lorenz",
  "dataset": "data",
  "output_dir": "run",
  "model": {{ "factors_dim": 3, "generator_dim": 16, "encoder_dim": 16, "input_encoder_dim": 8,
             "controller_dim": 8, "posterior_samples": 8, "input_posterior_samples": 8 {extra_model} }},
  "trainer": {{ "batch_size": 8, "max_epochs": {max_epochs} }}
}}"#
    );
    fs::write(dir.join(name), cfg).unwrap();
}

#[test]
fn generate_is_deterministic_and_guards_output() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_generate(d, "a", "3");
    tiny_generate(d, "b", "3");
    for f in ["manifest.json", "spikes.bin", "rates.bin", "latents.bin"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let err = fails(d, &["generate", "lorenz", "--out", "a"]);
    assert!(err.contains("--force"), "{err}");
    let mut args = vec!["generate", "lorenz", "--seed", "4", "--out", "a", "--force"];
    args.extend(TINY);
    ok(d, &args);
    assert_ne!(fs::read(d.join("a/spikes.bin")).unwrap(), fs::read(d.join("b/spikes.bin")).unwrap());
}

#[test]
fn generate_default_lorenz_has_1300_trials() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["generate", "lorenz", "--seed", "1", "--out", "lz"]);
    assert!(out.contains("1300 trials"), "{out}");
    let m = read_manifest(&tmp.path().join("lz")).unwrap();
    assert_eq!((m.n_trials, m.steps, m.neurons, m.latent_dim), (1300, 100, 30, 3));
}

#[test]
fn generate_pulsed_rnn_has_pulse_time_for_every_trial() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &["generate", "rnn", "--gamma", "2.5", "--pulsed", "--conditions", "6", "--steps", "30", "--out", "p"],
    );
    let ds = read_dataset(&tmp.path().join("p")).unwrap();
    assert_eq!(ds.n_trials(), 60);
    assert!((0..ds.n_trials()).all(|i| ds.pulse_time(i).is_some()));
    fails(tmp.path(), &["generate", "lorenz", "--pulsed", "--out", "q"]);
}

#[test]
fn smoke_train_eval_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let started = Instant::now();
    tiny_generate(d, "data", "1");
    write_config(d, "c.json", "", 1000);
    ok(d, &["train", "--config", "c.json"]);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "smoke run took {elapsed:.1} s");
    let run = d.join("run");
    for f in ["best.ckpt", "final.ckpt", "metrics.csv", "config.json", "run.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), lfads_forge::trainer::METRICS_HEADER);
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    for (k, r) in rows.iter().enumerate() {
        assert!(r.starts_with(&format!("{k},")), "{r}");
    }
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["data_dim"], 5);
    assert_eq!(resolved["model"]["steps"], 20);
    let info: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(info["code_hash"].as_str().unwrap().len(), 64);

    let stdout = ok(d, &["eval", "--checkpoint", "run/best.ckpt", "--dataset", "data", "--out", "ev", "--r2-latents", "--r2-rates", "--svg"]);
    assert!(stdout.contains("r2_latents"));
    let r2 = fs::read_to_string(d.join("ev/r2_latents.csv")).unwrap();
    assert_eq!(r2.lines().count(), 4);
    assert!(fs::read_to_string(d.join("ev/latent_1.svg")).unwrap().starts_with("<svg"));
    let summary = fs::read(d.join("ev/summary.json")).unwrap();
    ok(d, &["eval", "--checkpoint", "run/best.ckpt", "--dataset", "data", "--out", "ev2", "--r2-latents", "--r2-rates", "--threads", "3"]);
    assert_eq!(summary, fs::read(d.join("ev2/summary.json")).unwrap());
    assert_eq!(
        fs::read(d.join("ev/r2_rates.csv")).unwrap(),
        fs::read(d.join("ev2/r2_rates.csv")).unwrap()
    );

    let err = fails(d, &["eval", "--checkpoint", "run/best.ckpt", "--dataset", "data", "--out", "ev3", "--input-timing"]);
    assert!(err.contains("inferred inputs"), "{err}");
    fails(d, &["eval", "--checkpoint", "run/best.ckpt", "--dataset", "data", "--out", "ev3"]);

    ok(d, &["sample", "--checkpoint", "run/final.ckpt", "--trials", "3", "--out", "smp"]);
    let samples = fs::read_to_string(d.join("smp/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 3 * 20 * 5);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_generate(d, "data", "1");
    write_config(d, "c.json", r#", "inferred_input_dim": 1"#, 4);
    ok(d, &["train", "--config", "c.json", "--out", "full"]);
    ok(d, &["train", "--config", "c.json", "--out", "part", "--max-epochs", "2"]);
    ok(d, &["train", "--config", "c.json", "--out", "part", "--resume", "--threads", "2"]);
    assert_eq!(fs::read(d.join("full/final.ckpt")).unwrap(), fs::read(d.join("part/final.ckpt")).unwrap());
    assert_eq!(
        fs::read_to_string(d.join("full/metrics.csv")).unwrap(),
        fs::read_to_string(d.join("part/metrics.csv")).unwrap()
    );
}

#[test]
fn unknown_config_keys_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("a.json"), r#"{"model": {"generator_dims": 4}}"#).unwrap();
    let err = fails(d, &["train", "--config", "a.json"]);
    assert!(err.contains("generator_dims"), "{err}");
    fs::write(d.join("b.json"), r#"{"trainer": {"batchsize": 4}}"#).unwrap();
    let err = fails(d, &["train", "--config", "b.json"]);
    assert!(err.contains("batchsize"), "{err}");
}

#[test]
fn threads_env_var_must_be_numeric() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lfads-forge"))
        .current_dir(tmp.path())
        .env("LFADS_FORGE_THREADS", "many")
        .args(["generate", "lorenz", "--out", "x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("LFADS_FORGE_THREADS"));
}
