use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn brainalign(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainalign"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

const CONFIG: &str = r#"{
  "seed": 3, "derive_seeds": true,
  "fir": {"lag": 0, "window": 1, "aggregation": "average"},
  "ridge": {"alpha_ridge": 10},
  "retrieval": {"set_size": 49, "num_sets": 5},
  "fugw": {"bcd_iters": 2, "sinkhorn_iters": 100},
  "synth": {"grid": {"width": 4, "height": 4, "spacing": 1.0}, "n_train": 120, "n_test": 60,
            "train_segments": 2, "test_segments": 1, "latent_dim": 4, "snr": 1.0},
  "setup": {"train_subjects": ["s1"], "test_subject": "s2",
            "alignment": {"functional": {"reference": "s1"}},
            "test_repetitions": {"average": 2}, "latent_type": "synthetic",
            "fir": {"lag": 0, "window": 1, "aggregation": "average"}}
}"#;

#[test]
fn report_embeds_config_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("o");
    let o = brainalign(&["--config", cfg.to_str().unwrap(), "run-setup"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["command"], "run-setup");
    assert_eq!(report["config"]["seed"], 3);
    assert_eq!(report["provenance"]["root_seed"], 3);
    let retrieval_seed = &report["config"]["retrieval"]["seed"];
    assert_eq!(&report["provenance"]["retrieval_seed"], retrieval_seed);
    assert_eq!(&report["result"]["report"]["seed"], retrieval_seed);
    assert!(report["config"]["synth"]["seed"].is_u64());
    assert_eq!(report["provenance"]["config_hash"].as_str().unwrap().len(), 64);
    assert!(out.join("per_set.csv").exists());

    // --seed re-derives component seeds
    let out2 = dir.path().join("o2");
    let o = brainalign(&["--config", cfg.to_str().unwrap(), "--seed", "4", "run-setup"], &out2);
    assert!(o.status.success());
    let other: Value = serde_json::from_slice(&std::fs::read(out2.join("report.json")).unwrap()).unwrap();
    assert_ne!(other["config"]["retrieval"]["seed"], *retrieval_seed);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    let missing = brainalign(&["--config", "/definitely/not/here.json", "simulate"], &out);
    assert_eq!(missing.status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"fugw": {"alpha": 2.0}}"#).unwrap();
    assert_eq!(brainalign(&["--config", bad.to_str().unwrap(), "simulate"], &out).status.code(), Some(2));

    // run-setup without a setup section
    assert_eq!(brainalign(&["run-setup"], &out).status.code(), Some(2));

    // an unpenalised fit with more features than rows is a numerical error
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        CONFIG
            .replace(r#""alpha_ridge": 10"#, r#""alpha_ridge": 0"#)
            .replace(r#""n_train": 120"#, r#""n_train": 40"#)
            .replace(r#""fir": {"lag": 0, "window": 1, "aggregation": "average"},"#, r#""fir": {"lag": 0, "window": 3, "aggregation": "stack"},"#),
    )
    .unwrap();
    let o = brainalign(&["--config", cfg.to_str().unwrap(), "decode", "fit", "--subjects", "s1"], &out);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_align_transport_decode_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let c = cfg.to_str().unwrap();
    let sim = dir.path().join("sim");
    assert!(brainalign(&["--config", c, "simulate"], &sim).status.success());
    let manifest = sim.join("dataset/manifest.json");
    let m = manifest.to_str().unwrap();

    let al = dir.path().join("al");
    let o = brainalign(&["--config", c, "align", "--manifest", m, "--subject", "s2", "--reference", "s1"], &al);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(al.join("report.json")).unwrap()).unwrap();
    assert!(report["result"]["quality"]["argmax_accuracy"].as_f64().unwrap() > 0.5);
    assert!(al.join("plan.fmat").exists() && al.join("plan.json").exists());

    let tr = dir.path().join("tr");
    let input = sim.join("dataset/s2/test-00-r0.fmat");
    let o = brainalign(
        &["transport", "--plan", al.join("plan.fmat").to_str().unwrap(), "--input", input.to_str().unwrap()],
        &tr,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tr.join("transported.fmat").exists());

    let fit = dir.path().join("fit");
    let o = brainalign(&["--config", c, "decode", "fit", "--manifest", m, "--subjects", "s1"], &fit);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pred = dir.path().join("pred");
    let x = sim.join("dataset/s1/test-00-r0.fmat");
    let o = brainalign(
        &["decode", "predict", "--model", fit.join("model").to_str().unwrap(), "--input", x.to_str().unwrap()],
        &pred,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let ev = dir.path().join("ev");
    let truths = sim.join("dataset/latents/synthetic/test-00-r0.fmat");
    let o = brainalign(
        &[
            "--config",
            c,
            "evaluate",
            "--predictions",
            pred.join("predictions.fmat").to_str().unwrap(),
            "--truths",
            truths.to_str().unwrap(),
        ],
        &ev,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert!(report["result"]["median_relative_rank"].as_f64().unwrap() < 50.0);

    let vis = dir.path().join("vis");
    let o = brainalign(
        &["export-visual", "--plan", al.join("plan.fmat").to_str().unwrap(), "--manifest", m, "--scale", "2"],
        &vis,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read(vis.join("colormap.ppm")).unwrap().starts_with(b"P6\n8 8\n255\n"));
}
