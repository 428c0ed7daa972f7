use std::path::Path;
use std::process::Command;

use semgen_core::cli::run_with_root;
use semgen_core::config::Config;

const TINY: &str = r#"{
  "corpus.num_clips": 12, "corpus.frames": 8, "corpus.frames_long": 16, "corpus.height": 8, "corpus.width": 8,
  "corpus.sprite_radius": 2.0, "corpus.orbit_radius": 2.0,
  "ae.hidden": 16, "ae.train.steps": 12, "ae.train.checkpoint_every": 4,
  "sem.d": 16, "sem.heads": 2, "sem.p_s": 4, "sem.train.steps": 80,
  "probe.net.d": 16, "probe.net.p_s": 4, "probe.net.train.steps": 80, "probe.net.train.batch_size": 4,
  "compressor.d_c": 4,
  "latent_gen.dit.width": 16, "latent_gen.dit.blocks": 1, "latent_gen.dit.heads": 2, "latent_gen.dit.t_freqs": 4,
  "latent_gen.train.steps": 6, "latent_gen.train.checkpoint_every": 2,
  "sem_gen.dit.width": 16, "sem_gen.dit.blocks": 1, "sem_gen.dit.heads": 2, "sem_gen.dit.t_freqs": 4,
  "sem_gen.train.steps": 6, "sem_gen.train.checkpoint_every": 2,
  "generate.sampler.num_steps": 4, "sample.count": 2,
  "harness.seeds": [0], "harness.eval_clips": 4, "harness.eval_loss_clips": 4, "harness.d_c_sweep": [16, 4]
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn run(root: &Path, args: &[&str]) -> i32 {
    let cfg = root.join("tiny.json");
    let mut argv: Vec<String> = vec!["semgen".into()];
    argv.extend(args.iter().map(|s| s.to_string()));
    argv.push("--config".into());
    argv.push(cfg.to_string_lossy().into());
    run_with_root(&argv, root)
}

fn ok(root: &Path, args: &[&str]) {
    assert_eq!(run(root, args), 0, "semgen {args:?} failed");
}

fn foundation(root: &Path) {
    ok(root, &["make-corpus"]);
    ok(root, &["train-ae"]);
    ok(root, &["pretrain-sem"]);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semgen"))
}

fn losses(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn help_lists_every_verb_and_key() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for verb in [
        "make-corpus",
        "train-ae",
        "pretrain-sem",
        "train-latent-gen",
        "train-sem-gen",
        "train-baseline",
        "sample",
        "sample-long",
        "eval-drift",
        "ablate-compression",
        "compare-spaces",
    ] {
        assert!(text.contains(verb), "help lacks {verb}");
    }
    for (k, v) in Config::default().flat() {
        assert!(text.contains(&format!("{k} = {v}")), "help lacks {k}");
    }
}

#[test]
fn make_corpus_is_deterministic_per_seed() {
    let d = setup();
    let r = d.path();
    ok(r, &["make-corpus", "--seed", "7", "--name", "a"]);
    ok(r, &["make-corpus", "--seed", "7", "--name", "b"]);
    ok(r, &["make-corpus", "--seed", "8", "--name", "c"]);
    let read = |n: &str| std::fs::read_to_string(r.join("runs").join(n).join("summary.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let snap = std::fs::read_to_string(r.join("runs/a/config.json")).unwrap();
    assert!(snap.contains("\"corpus.seed\": 7"));
}

#[test]
fn config_errors_exit_2_and_dependency_errors_exit_3() {
    let d = setup();
    let r = d.path();
    assert_eq!(run(r, &["make-corpus", "corpus.no_such_key=1"]), 2);
    assert_eq!(run(r, &["make-corpus", "corpus.num_clips=lots"]), 2);
    assert_eq!(run_with_root(&["semgen".into(), "frobnicate".into()], r), 2);
    let missing = vec!["semgen".to_string(), "make-corpus".into(), "--config".into(), "/nonexistent.json".into()];
    assert_eq!(run_with_root(&missing, r), 2);
    std::fs::write(r.join("bad.json"), "{ not json").unwrap();
    let bad = vec!["semgen".to_string(), "make-corpus".into(), "--config".into(), r.join("bad.json").to_string_lossy().into()];
    assert_eq!(run_with_root(&bad, r), 2);

    assert_eq!(run(r, &["sample"]), 3);
    assert_eq!(run(r, &["train-ae"]), 3);

    let out = bin().env("SEMGEN_ROOT", r).args(["sample", "--config"]).arg(r.join("tiny.json")).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().rfind(|l| l.starts_with("error[")).unwrap();
    assert!(line.starts_with("error[dependency]:"), "{line}");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let d = setup();
    let r = d.path();
    foundation(r);
    // Autoencoder: 12 straight vs 5 then 12.
    ok(r, &["train-ae", "--name", "ae_a"]);
    ok(r, &["train-ae", "--name", "ae_b", "ae.train.steps=5"]);
    ok(r, &["train-ae", "--name", "ae_b"]);
    assert_eq!(losses(&r.join("runs/ae_a/loss.csv")), losses(&r.join("runs/ae_b/loss.csv")));
    assert_eq!(
        std::fs::read(r.join("runs/ae_a/ckpt_final.bin")).unwrap(),
        std::fs::read(r.join("runs/ae_b/ckpt_final.bin")).unwrap()
    );
    // Stage one with its jointly trained compressor.
    ok(r, &["train-latent-gen", "--name", "lg_a"]);
    ok(r, &["train-latent-gen", "--name", "lg_b", "latent_gen.train.steps=3"]);
    ok(r, &["train-latent-gen", "--name", "lg_b"]);
    assert_eq!(losses(&r.join("runs/lg_a/loss.csv")), losses(&r.join("runs/lg_b/loss.csv")));
    for f in ["ckpt_final.bin", "ckpt_final_compressor.bin"] {
        assert_eq!(
            std::fs::read(r.join("runs/lg_a").join(f)).unwrap(),
            std::fs::read(r.join("runs/lg_b").join(f)).unwrap(),
            "{f}"
        );
    }
    // Stage two.
    ok(r, &["train-sem-gen", "--name", "sg_a", "deps.latent_gen=lg_a"]);
    ok(r, &["train-sem-gen", "--name", "sg_b", "deps.latent_gen=lg_a", "sem_gen.train.steps=2"]);
    ok(r, &["train-sem-gen", "--name", "sg_b", "deps.latent_gen=lg_a"]);
    assert_eq!(losses(&r.join("runs/sg_a/loss.csv")), losses(&r.join("runs/sg_b/loss.csv")));
}

#[test]
fn pipeline_sampling_is_deterministic_and_frozen_inputs_unchanged() {
    let d = setup();
    let r = d.path();
    foundation(r);
    let ae_hash = std::fs::read(r.join("runs/ae/ckpt_final.bin")).unwrap();
    let sem_hash = std::fs::read(r.join("runs/sem/ckpt_final.bin")).unwrap();
    ok(r, &["train-latent-gen"]);
    let comp = std::fs::read(r.join("runs/latent_gen/ckpt_final_compressor.bin")).unwrap();
    ok(r, &["train-sem-gen"]);
    assert_eq!(comp, std::fs::read(r.join("runs/latent_gen/ckpt_final_compressor.bin")).unwrap());
    assert_eq!(ae_hash, std::fs::read(r.join("runs/ae/ckpt_final.bin")).unwrap());
    assert_eq!(sem_hash, std::fs::read(r.join("runs/sem/ckpt_final.bin")).unwrap());

    ok(r, &["sample", "--seed", "3", "--name", "s1"]);
    ok(r, &["sample", "--seed", "3", "--name", "s2"]);
    ok(r, &["sample", "--seed", "4", "--name", "s3"]);
    let bytes = |n: &str| std::fs::read(r.join("runs").join(n).join("samples/sample_0.bin")).unwrap();
    assert_eq!(bytes("s1"), bytes("s2"));
    assert_ne!(bytes("s1"), bytes("s3"));
    assert!(r.join("runs/s1/samples/sample_0.png").exists());

    // A semantic generator cannot be trained on a baseline without a compressor.
    ok(r, &["train-baseline", "--stage", "ct"]);
    assert_eq!(run(r, &["train-sem-gen", "--name", "bad", "deps.latent_gen=baseline_ct"]), 2);
    // The ct baseline samples on its own.
    ok(r, &["sample", "--name", "ct_sample", "deps.latent_gen=baseline_ct"]);
}

#[test]
fn baselines_enforce_matched_budgets() {
    let d = setup();
    let r = d.path();
    foundation(r);
    ok(r, &["train-latent-gen"]);
    ok(r, &["train-baseline", "--stage", "vae2stage"]);
    let a = std::fs::read_to_string(r.join("runs/latent_gen/fairness.json")).unwrap();
    let b = std::fs::read_to_string(r.join("runs/baseline_vae2stage/fairness.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(run(r, &["train-baseline", "--stage", "ct", "--name", "short_ct", "latent_gen.train.steps=5"]), 2);
    assert_eq!(run(r, &["train-baseline", "--stage", "ct", "--name", "other_seed", "--seed", "9"]), 2);
    // ct-swin is a windowed long-mode baseline; the short full-attention config rejects it.
    assert_eq!(run(r, &["train-baseline", "--stage", "ct-swin"]), 2);
}

#[test]
fn long_mode_runs_and_harnesses_emit_reports() {
    let d = setup();
    let r = d.path();
    ok(r, &["make-corpus", "--long"]);
    ok(r, &["train-ae"]);
    ok(r, &["pretrain-sem"]);
    let long = [
        "long.latent_gen.dit.width=16",
        "long.latent_gen.dit.blocks=2",
        "long.latent_gen.dit.heads=2",
        "long.latent_gen.dit.t_freqs=4",
        "long.latent_gen.train.steps=3",
        "long.sem_gen.dit.width=16",
        "long.sem_gen.dit.blocks=1",
        "long.sem_gen.dit.heads=2",
        "long.sem_gen.dit.t_freqs=4",
        "long.sem_gen.train.steps=3",
        "harness.drift_clips=2",
    ];
    let with = |v: &[&str]| -> Vec<String> { v.iter().chain(long.iter()).map(|s| s.to_string()).collect() };
    for v in [
        vec!["train-latent-gen", "--long"],
        vec!["train-sem-gen", "--long"],
        vec!["train-baseline", "--stage", "ct-swin", "--long"],
        vec!["sample-long"],
        vec!["eval-drift"],
        vec!["compare-spaces"],
        vec!["ablate-compression"],
    ] {
        let args = with(&v);
        let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        ok(r, &refs);
    }
    let idx = std::fs::read_to_string(r.join("runs/sample_long/samples/index.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&idx).unwrap();
    assert_eq!(v["frames"], 16);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(r.join("runs/compare/report.json")).unwrap()).unwrap();
    let steps = report["steps"].as_array().unwrap().len();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2 * steps);
    for sys in report["systems"].as_array().unwrap() {
        let grid: Vec<_> = rows.iter().filter(|x| x["system"] == *sys).map(|x| x["step"].clone()).collect();
        assert_eq!(grid, report["steps"].as_array().unwrap().clone());
    }
    assert!(r.join("runs/compare/report.csv").exists());
    let ablation: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(r.join("runs/ablation/report.json")).unwrap()).unwrap();
    assert_eq!(ablation["rows"].as_array().unwrap().len(), 2);
    let drift: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(r.join("runs/drift/report.json")).unwrap()).unwrap();
    assert_eq!(drift["clips"], 2);
    assert!(std::fs::read_dir(r.join("runs/drift/samples")).unwrap().count() >= 2);
}
