use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use diffss_core::episodes::ManifestRecord;
use diffss_core::io;
use diffss_core::synth::{texture_samples, TextureConfig};
use serde_json::Value;

fn diffss(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_diffss"))
        .args(args)
        .current_dir(dir)
        .env_remove("DIFFSS_GENERATOR_URL")
        .env_remove("DIFFSS_HED_URL")
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let (code, stdout, stderr) = diffss(dir, args);
    assert_eq!(code, 0, "{args:?}\n{stderr}");
    stdout
}

/// Texture fixture trimmed to `n` samples per class.
fn fixture(dir: &Path, per_class: u32, classes: u32) -> PathBuf {
    let cfg = TextureConfig {
        classes,
        images_per_class: per_class,
        width: 24,
        height: 24,
        seed: 21,
        ..Default::default()
    };
    let samples = texture_samples(&cfg).unwrap();
    let data = dir.join("data");
    for s in &samples {
        io::save_rgb(&data.join(&s.record.image), &s.image).unwrap();
        io::save_mask(&data.join(&s.record.mask), &s.mask).unwrap();
    }
    let records: Vec<&ManifestRecord> = samples.iter().map(|s| &s.record).collect();
    io::write_jsonl(&data.join("manifest.jsonl"), &records).unwrap();
    data.join("manifest.jsonl")
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pngs(dir: &Path) -> usize {
    snapshot(dir).keys().filter(|p| p.extension().is_some_and(|e| e == "png")).count()
}

#[test]
fn conditions_preserve_counts_and_rerun_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = TextureConfig { images_per_class: 3, classes: 1, width: 20, height: 16, ..Default::default() };
    let samples = texture_samples(&cfg).unwrap();
    for s in &samples {
        io::save_rgb(&d.join(&s.record.image), &s.image).unwrap();
        io::save_mask(&d.join(&s.record.mask), &s.mask).unwrap();
    }
    let recs: Vec<&ManifestRecord> = samples.iter().map(|s| &s.record).collect();
    io::write_jsonl(&d.join("three.jsonl"), &recs).unwrap();

    ok(d, &["conditions", "--dataset", "three.jsonl", "--guidance", "scribble", "--out", "scribble"]);
    assert_eq!(pngs(&d.join("scribble")), 3);
    assert_eq!(fs::read_to_string(d.join("scribble/conditions.jsonl")).unwrap().lines().count(), 3);
    assert!(d.join("scribble/run.toml").exists());

    ok(d, &["conditions", "--dataset", "three.jsonl", "--guidance", "all", "--out", "all"]);
    assert_eq!(pngs(&d.join("all")), 9);
    let first = snapshot(&d.join("all"));
    fs::remove_dir_all(d.join("all")).unwrap();
    ok(d, &["conditions", "--dataset", "three.jsonl", "--guidance", "all", "--out", "all", "--workers", "3"]);
    let mut second = snapshot(&d.join("all"));
    let fp = second.remove(Path::new("run.toml")).unwrap();
    assert!(String::from_utf8(fp).unwrap().contains("workers = 3"));
    let mut first = first;
    first.remove(Path::new("run.toml"));
    assert_eq!(second, first);
}

#[test]
fn generate_counts_resume_and_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d, 1, 2);
    ok(d, &["conditions", "--dataset", "data/manifest.jsonl", "--guidance", "hed", "--out", "cond"]);
    let gen = ["generate", "--dataset", "data/manifest.jsonl", "--conditions", "cond", "--n-aux", "4", "--seed", "5", "--out", "store"];
    ok(d, &gen);
    assert_eq!(pngs(&d.join("store")), 8);
    let full = snapshot(&d.join("store"));

    // Interrupted run: sidecar lost its tail and one image is missing.
    let sidecar = d.join("store/provenance.jsonl");
    let text = fs::read_to_string(&sidecar).unwrap();
    let kept: Vec<&str> = text.lines().take(3).collect();
    fs::write(&sidecar, kept.join("\n") + "\n").unwrap();
    let victim = snapshot(&d.join("store")).into_keys().find(|p| p.ends_with("c2_000_k4.png")).unwrap();
    fs::remove_file(d.join("store").join(victim)).unwrap();
    let out = ok(d, &gen);
    assert!(out.contains("8 in store"), "{out}");
    assert_eq!(snapshot(&d.join("store")), full);
    assert_eq!(fs::read_to_string(&sidecar).unwrap().lines().count(), 8);

    let out = ok(d, &gen);
    assert!(out.starts_with("0 generated, 2 sources skipped"), "{out}");

    ok(d, &["generate", "--dataset", "data/manifest.jsonl", "--conditions", "cond", "--n-aux", "0", "--out", "empty"]);
    assert_eq!(pngs(&d.join("empty")), 0);
    assert_eq!(fs::read_to_string(d.join("empty/provenance.jsonl")).unwrap(), "");
}

#[test]
fn unreachable_backend_exits_3_and_keeps_store() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d, 1, 1);
    ok(d, &["conditions", "--dataset", "data/manifest.jsonl", "--guidance", "scribble", "--out", "cond"]);
    ok(d, &["generate", "--dataset", "data/manifest.jsonl", "--conditions", "cond", "--n-aux", "2", "--out", "store"]);
    let before = snapshot(&d.join("store"));
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}/");
    let (code, _, stderr) = diffss(d, &[
        "generate", "--conditions", "cond", "--n-aux", "3", "--backend-url", &url, "--out", "store",
    ]);
    assert_eq!(code, 3, "{stderr}");
    let after = snapshot(&d.join("store"));
    for (k, v) in &before {
        if k.extension().is_some_and(|e| e == "png") {
            assert_eq!(after.get(k), Some(v));
        }
    }
    assert_eq!(fs::read_to_string(d.join("store/provenance.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn evaluate_is_deterministic_and_validates_first() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d, 4, 2);
    ok(d, &["conditions", "--dataset", "data/manifest.jsonl", "--guidance", "segmap", "--out", "cond"]);
    ok(d, &["generate", "--dataset", "data/manifest.jsonl", "--conditions", "cond", "--n-aux", "2", "--out", "store"]);
    let eval = ["evaluate", "--dataset", "data/manifest.jsonl", "--store", "store", "--guidance", "segmap", "--n-aux", "2", "--episodes", "12", "--seed", "3", "--reference-shots", "3", "--out", "eval"];
    let stdout = ok(d, &eval);
    assert!(stdout.contains("gain (segmap): "), "{stdout}");
    let first = snapshot(&d.join("eval"));
    for f in ["baseline/report.json", "baseline/report.txt", "baseline/report.csv", "augmented-segmap/report.json", "reference/report.json", "gain.json", "run.toml", "failures.jsonl"] {
        assert!(first.contains_key(Path::new(f)), "{f}");
    }
    let gain: Value = serde_json::from_slice(&first[Path::new("gain.json")]).unwrap();
    let g = &gain[0];
    let delta = g["augmented_mean"].as_f64().unwrap() - g["base_mean"].as_f64().unwrap();
    assert_eq!(g["delta"].as_f64().unwrap(), delta);
    assert!(g["summary"].as_str().unwrap().starts_with(if delta >= 0.0 { '+' } else { '-' }));

    fs::remove_dir_all(d.join("eval")).unwrap();
    ok(d, &eval);
    assert_eq!(snapshot(&d.join("eval")), first);

    // The fingerprint alone reproduces the run.
    fs::write(d.join("again.toml"), &first[Path::new("run.toml")]).unwrap();
    fs::remove_dir_all(d.join("eval")).unwrap();
    ok(d, &["evaluate", "--config", "again.toml"]);
    assert_eq!(snapshot(&d.join("eval")), first);

    let (code, _, stderr) = diffss(d, &["evaluate", "--dataset", "missing.jsonl", "--episodes", "3", "--out", "never"]);
    assert_eq!(code, 2, "{stderr}");
    assert!(!d.join("never").exists());
}

#[test]
fn failing_model_trips_quality_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d, 3, 1);
    let (code, _, stderr) = diffss(d, &["evaluate", "--dataset", "data/manifest.jsonl", "--episodes", "5", "--model", "subprocess:false", "--out", "eval"]);
    assert_eq!(code, 4, "{stderr}");
    assert_eq!(fs::read_to_string(d.join("eval/failures.jsonl")).unwrap().lines().count(), 5);
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.toml"), "episodes = \"many\"\n").unwrap();
    assert_eq!(diffss(d, &["evaluate", "--config", "bad.toml"]).0, 2);
    assert_eq!(diffss(d, &["evaluate", "--config", "absent.toml"]).0, 2);
    fixture(d, 2, 1);
    let (code, _, _) = diffss(d, &["evaluate", "--dataset", "data/manifest.jsonl", "--dataset-kind", "pascal5i", "--fold", "7", "--out", "e"]);
    assert_eq!(code, 2);
}

#[test]
fn drift_and_proto_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d, 2, 2);
    ok(d, &["conditions", "--dataset", "data/manifest.jsonl", "--out", "cond"]);
    ok(d, &["generate", "--dataset", "data/manifest.jsonl", "--conditions", "cond", "--n-aux", "2", "--out", "store"]);
    ok(d, &["drift", "--dataset", "data/manifest.jsonl", "--store", "store", "--segmenter", "oracle", "--floor", "0.5", "--out", "drift"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("drift/drift.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert_eq!(r["mean_iou"].as_f64(), Some(1.0));
    }
    assert_eq!(fs::read_to_string(d.join("drift/kept.jsonl")).unwrap().lines().count(), 24);

    ok(d, &["drift", "--dataset", "data/manifest.jsonl", "--store", "store", "--guidance", "hed", "--out", "drift-ref"]);
    assert!(d.join("drift-ref/drift.txt").exists());

    ok(d, &["proto", "--dataset", "data/manifest.jsonl", "--store", "store", "--guidance", "scribble", "--out", "proto"]);
    let csv = fs::read_to_string(d.join("proto/embedding.csv")).unwrap();
    let summary: Value = serde_json::from_str(&fs::read_to_string(d.join("proto/consistency.json")).unwrap()).unwrap();
    assert_eq!(csv.lines().count() - 1, summary["prototypes"].as_u64().unwrap() as usize);
    assert_eq!(summary["prototypes"], 4 + 8);
    assert!(fs::read_to_string(d.join("proto/embedding.svg")).unwrap().starts_with("<svg"));

    let (code, _, _) = diffss(d, &["drift", "--dataset", "data/manifest.jsonl", "--store", "store", "--floor", "1.5", "--out", "x"]);
    assert_eq!(code, 2);
}

#[test]
fn minicoco_from_synthetic_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--layout", "coco", "--images-per-class", "50", "--seed", "2", "--out", "coco"]);
    ok(d, &["minicoco", "--train", "coco/train.jsonl", "--val", "coco/val.jsonl", "--ratio", "0.2", "--seed", "4", "--out", "mini"]);
    let meta: Value = serde_json::from_str(&fs::read_to_string(d.join("mini/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["reference_train_images"], 8200);
    assert_eq!(meta["reference_val_images"], 4953);
    let train = fs::read_to_string(d.join("mini/train.jsonl")).unwrap();
    assert_eq!(train.lines().count() as u64, meta["train_images"].as_u64().unwrap());
    let first = snapshot(&d.join("mini"));
    ok(d, &["minicoco", "--train", "coco/train.jsonl", "--val", "coco/val.jsonl", "--ratio", "0.2", "--seed", "4", "--out", "mini"]);
    assert_eq!(snapshot(&d.join("mini")), first);
}
