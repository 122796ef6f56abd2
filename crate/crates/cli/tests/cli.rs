mod common;

use std::fs;

use common::*;
use repsim_core::{load_archive, DominantReport};
use serde_json::Value;

fn read_json(path: &std::path::Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn version_and_help_exit_zero() {
    assert_eq!(code(&repsim(&["--version"])), 0);
    assert_eq!(code(&repsim(&["heatmap", "--version"])), 0);
    assert_eq!(code(&repsim(&["ablate", "--help"])), 0);
    assert_eq!(code(&repsim(&["no-such-command"])), 2);
}

#[test]
fn heatmap_writes_square_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.actv");
    let x = gaussian(64, 8, 1);
    write_archive(&a, &[("l1", x.clone()), ("l2", &x * 2.0), ("l3", gaussian(64, 5, 2))]);
    let out = dir.path().join("out");
    let o = repsim(&["heatmap", p(&a), "--kernel", "linear", "--batch", "16", "--epochs", "3", "--seed", "7", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let h = read_json(&out.join("heatmap.json"));
    assert_eq!(h["row_labels"].as_array().unwrap().len(), 3);
    assert_eq!(h["values"].as_array().unwrap().len(), 9);
    assert_eq!(h["seed"], 7);
    let pgm = fs::read(out.join("heatmap.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n3 3\n255\n"));
    let csv = fs::read_to_string(out.join("heatmap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let blocks = read_json(&out.join("blocks.json"));
    assert_eq!(blocks["blocks"][0]["start_label"], "l1");
}

#[test]
fn rbf_heatmap_records_bandwidth_and_falls_back_on_batch() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.actv");
    write_archive(&a, &[("l1", gaussian(50, 4, 1)), ("l2", gaussian(50, 4, 2))]);
    let out = dir.path().join("out");
    let o = repsim_env(
        &["heatmap", p(&a), "--kernel", "rbf", "--rbf-c", "0.5", "--epochs", "2", "--out", p(&out)],
        &[("RUST_LOG", "warn")],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("batch of 50"), "{}", stderr(&o));
    let h = read_json(&out.join("heatmap.json"));
    assert_eq!(h["kernel"]["kind"], "rbf");
    assert_eq!(h["kernel"]["rbf_c"], 0.5);
    assert_eq!(h["batch_size"], 50);
}

#[test]
fn mismatched_archives_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.actv");
    let b = dir.path().join("b.actv");
    write_archive(&a, &[("l1", gaussian(40, 4, 1))]);
    write_archive(&b, &[("l1", gaussian(30, 4, 1))]);
    let o = repsim(&["heatmap", p(&a), p(&b), "--batch", "10", "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn malformed_inputs_exit_three_without_panicking() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let junk = dir.path().join("junk.actv");
    fs::write(&junk, b"not an archive at all").unwrap();
    let good = dir.path().join("good.actv");
    write_archive(&good, &[("l1", gaussian(20, 3, 1))]);
    let bytes = fs::read(&good).unwrap();
    let truncated = dir.path().join("trunc.actv");
    fs::write(&truncated, &bytes[..bytes.len() - 7]).unwrap();
    let missing = dir.path().join("missing.actv");
    for f in [&junk, &truncated, &missing] {
        let o = repsim(&["heatmap", p(f), "--out", p(&out)]);
        assert_eq!(code(&o), 3, "{}", stderr(&o));
        assert!(!stderr(&o).contains("panicked"), "{}", stderr(&o));
        assert!(stderr(&o).contains(f.file_name().unwrap().to_str().unwrap()), "{}", stderr(&o));
    }
}

#[test]
fn argument_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.actv");
    write_archive(&a, &[("l1", gaussian(20, 3, 1))]);
    let out = dir.path().join("o");
    let cases: Vec<Vec<&str>> = vec![
        vec!["dominant", p(&a), "--out", p(&out)],
        vec!["dominant", p(&a), "--layer", "nope", "--out", p(&out)],
        vec!["dominant", p(&a), "--layer", "l1", "--ratio", "2", "--top-fraction", "0.1"],
        vec!["heatmap", p(&a), "--batch", "2", "--out", p(&out)],
        vec!["heatmap", p(&a), "--kernel", "rbf", "--rbf-c", "-1", "--out", p(&out)],
        vec!["heatmap", p(&a), "--kernel", "poly"],
        vec!["ablate", p(&a), "--layer", "l1", "--fraction", "0.9", "--out", p(&out)],
        vec!["ablate", p(&a), "--layer", "l1", "--fraction", "1.5", "--out", p(&out)],
    ];
    for args in cases {
        let o = repsim(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
    let o = repsim_env(&["heatmap", p(&a), "--batch", "4", "--out", p(&out)], &[("REPSIM_THREADS", "zero")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ratio_policy_on_uniform_data_selects_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.actv");
    write_archive(&a, &[("l1", gaussian(200, 6, 3))]);
    let out = dir.path().join("o");
    let o = repsim(&["dominant", p(&a), "--layer", "l1", "--ratio", "10", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&out.join("dominant_report.json"));
    let report: DominantReport = serde_json::from_value(v["report"].clone()).unwrap();
    assert_eq!(report.selected_count, 0);
    let hist = fs::read_to_string(out.join("projection_histogram.csv")).unwrap();
    let total: usize = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 200);
}

#[test]
fn ablation_of_a_control_archive_barely_moves_the_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.actv");
    let x = gaussian(400, 10, 4);
    write_archive(&a, &[("l1", x.clone()), ("l2", x.map(|v| v.max(0.0))), ("l3", gaussian(400, 10, 5))]);
    for fraction in ["0.01", "0.10"] {
        let out = dir.path().join(format!("o{fraction}"));
        let o = repsim(&["ablate", p(&a), "--layer", "l1", "--fraction", fraction, "--batch", "100", "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let diff = read_json(&out.join("block_diff.json"));
        assert!(diff["max_abs_cka_change"].as_f64().unwrap() < 0.1, "{diff}");
        assert!(out.join("heatmap_post.csv").exists() && out.join("dominant_post.json").exists());
    }
}

#[test]
fn probe_is_idempotent_and_needs_images() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("img.actv");
    write_images(&images, 6);
    let first = dir.path().join("p1");
    let o = repsim(&["probe", p(&images), "--index", "4", "--out", p(&first)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let probe = load_archive(first.join("probe.actv")).unwrap();
    let t = &probe.layers()[0];
    assert_eq!(t.shape(), &[1, 4, 5, 3]);
    let px = &t.data()[..3];
    assert!(t.data().chunks(3).all(|c| c == px));

    let second = dir.path().join("p2");
    let o = repsim(&["probe", p(&first.join("probe.actv")), "--index", "0", "--out", p(&second)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(first.join("probe.actv")).unwrap(), fs::read(second.join("probe.actv")).unwrap());

    let o = repsim(&["probe", p(&images), "--index", "6", "--out", p(&second)]);
    assert_eq!(code(&o), 2);
    let flat = dir.path().join("flat.actv");
    write_archive(&flat, &[("l1", gaussian(5, 3, 1))]);
    let o = repsim(&["probe", p(&flat), "--index", "0", "--out", p(&second)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_and_evolution_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path());
    for f in ["trace.jsonl", "config.json", "planted.json", "run.json", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("trace.jsonl")).unwrap().lines().count(), 4);
    let planted = read_json(&run.join("planted.json"));
    assert_eq!(planted["probe_planted_ids"].as_array().unwrap().len(), 10);

    let out = dir.path().join("evo");
    let o = repsim(&["evolution", p(&run), "--batch", "100", "--epochs", "2", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let count = |sub: &str| fs::read_dir(out.join(sub)).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "json").count();
    assert_eq!(count("within"), 3);
    assert_eq!(count("cross"), 2);
    assert_eq!(fs::read_to_string(out.join("overlap.csv")).unwrap().lines().count(), 3);

    // single checkpoint: no cross table
    let cfg = dir.path().join("one.json");
    fs::write(&cfg, r#"{"dataset": {"n_examples": 200, "n_probe": 100}, "net": {"depth": 3, "width": 8, "epochs": 1}, "checkpoint_epochs": []}"#).unwrap();
    let one = dir.path().join("one");
    assert_eq!(code(&repsim(&["train-toy", "--config", p(&cfg), "--out", p(&one)])), 0);
    let out1 = dir.path().join("evo1");
    let o = repsim(&["evolution", p(&one), "--batch", "50", "--epochs", "1", "--out", p(&out1)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out1.join("overlap.csv")).unwrap().lines().count(), 1);
    assert!(!out1.join("cross").exists());
}

#[test]
fn evolution_reports_bad_checkpoints_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path());
    let out = dir.path().join("evo");
    let ckpt = run.join("checkpoints/epoch_0002.actv");
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let o = repsim(&["evolution", p(&run), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("epoch_0002.actv"), "{}", stderr(&o));
    fs::remove_file(&ckpt).unwrap();
    let o = repsim(&["evolution", p(&run), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("epoch_0002.actv"), "{}", stderr(&o));
    let o = repsim(&["evolution", p(dir.path()), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn invalid_toy_configs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    for (name, text) in [
        ("bad.toml", "[net]\ndepth = 1\n"),
        ("typo.toml", "[net]\ndepht = 4\n"),
        ("syntax.json", "{\"net\": "),
        ("frac.toml", "[dataset]\nplanted_fraction = 0.7\n"),
    ] {
        let cfg = dir.path().join(name);
        fs::write(&cfg, text).unwrap();
        let o = repsim(&["train-toy", "--config", p(&cfg), "--out", p(&out)]);
        assert_eq!(code(&o), 2, "{name}: {}", stderr(&o));
    }
}

#[test]
fn manifests_follow_the_published_schema() {
    let schema_text = repsim(&["manifest-schema"]).stdout;
    let schema: Value = serde_json::from_slice(&schema_text).unwrap();
    let validator = jsonschema::JSONSchema::compile(&schema).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path());
    let ckpt = run.join("checkpoints/epoch_0003.actv");
    let images = dir.path().join("img.actv");
    write_images(&images, 3);
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("heatmap", vec!["heatmap".into(), p(&ckpt).into(), "--epochs".into(), "1".into()]),
        ("dominant", vec!["dominant".into(), p(&ckpt).into(), "--layer".into(), "h02".into()]),
        ("ablate", vec!["ablate".into(), p(&ckpt).into(), "--layer".into(), "h02".into(), "--fraction".into(), "0.1".into(), "--epochs".into(), "1".into()]),
        ("spectrum", vec!["spectrum".into(), p(&ckpt).into()]),
        ("kernel", vec!["kernel".into(), p(&ckpt).into(), "--layer".into(), "h01".into(), "--kernel".into(), "rbf".into()]),
        ("evolution", vec!["evolution".into(), p(&run).into(), "--epochs".into(), "1".into()]),
        ("probe", vec!["probe".into(), p(&images).into(), "--index".into(), "1".into()]),
    ];
    let mut manifests = vec![read_json(&run.join("manifest.json"))];
    for (name, mut args) in runs {
        let out = dir.path().join(format!("m-{name}"));
        args.extend(["--out".to_string(), p(&out).to_string()]);
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = repsim(&argv);
        assert_eq!(code(&o), 0, "{name}: {}", stderr(&o));
        manifests.push(read_json(&out.join("manifest.json")));
    }
    for m in &manifests {
        if let Err(errors) = validator.validate(m) {
            let msgs: Vec<String> = errors.map(|e| e.to_string()).collect();
            panic!("{}: {msgs:?}", m["command"]);
        }
        // every listed output exists and matches its digest
        let outputs = m["outputs"].as_array().unwrap();
        assert!(!outputs.is_empty());
    }
    let train = &manifests[0];
    assert_eq!(train["command"], "train-toy");
    assert!(train["seeds"]["net/init"].is_u64());
    let listed: Vec<&str> = train["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap()).collect();
    let on_disk = snapshot(&run);
    let mut expected: Vec<String> = on_disk.keys().map(|k| k.to_str().unwrap().to_string()).filter(|k| k != "manifest.json").collect();
    expected.sort();
    assert_eq!(listed, expected);
}
