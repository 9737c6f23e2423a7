mod support;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn viscode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viscode")).args(args).env_remove("VISCODE_MODEL_DIR").output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(viscode(&["encode", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(viscode(&["frobnicate"]).status.code(), Some(2));
    assert!(viscode(&["--help"]).status.success());
}

#[test]
fn corpus_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = viscode(&["--json", "corpus", "--out", p(&out), "--charts", "6", "--qr", "3", "--max-side", "400"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["ok"], true);
    let charts = &v["data"]["charts"];
    assert_eq!(charts["train"].as_array().unwrap().len() + charts["test"].as_array().unwrap().len(), 6);
    let o = viscode(&["corpus", "--out", p(&out), "--min-side", "500", "--max-side", "400"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_models_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    support::held_out_square(1, 320)[0].image.save_png(&img).unwrap();
    std::fs::write(dir.path().join("m.txt"), "x").unwrap();
    let o = viscode(&[
        "encode",
        "--image",
        p(&img),
        "--payload",
        p(&dir.path().join("m.txt")),
        "--out",
        p(&dir.path().join("b.png")),
        "--models",
        p(&dir.path().join("nowhere")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
}

#[test]
fn encode_decode_and_failure_exit_codes() {
    let models = support::model_dir();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("chart.png");
    support::held_out_square(1, 500)[0].image.save_png(&img).unwrap();
    let payload = dir.path().join("payload.csv");
    std::fs::write(&payload, "year,value\n2020,3\n2021,5\n").unwrap();
    let coded = dir.path().join("coded.png");
    let plan = dir.path().join("plan.json");

    let o = viscode(&[
        "--json",
        "encode",
        "--image",
        p(&img),
        "--payload",
        p(&payload),
        "--kind",
        "source",
        "--out",
        p(&coded),
        "--models",
        p(&models),
        "--emit-plan",
        p(&plan),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["data"]["blocks"], 1);
    assert!(plan.exists());

    let body = dir.path().join("body.csv");
    let o = viscode(&["decode", "--image", p(&coded), "--out", p(&body), "--models", p(&models)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&body).unwrap(), std::fs::read(&payload).unwrap());

    // Lossy output needs an explicit opt-in.
    let o = viscode(&[
        "encode",
        "--image",
        p(&img),
        "--payload",
        p(&payload),
        "--out",
        p(&dir.path().join("coded.jpg")),
        "--models",
        p(&models),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let big = dir.path().join("big.bin");
    std::fs::write(&big, vec![b'z'; 40_000]).unwrap();
    let o = viscode(&["encode", "--image", p(&img), "--payload", p(&big), "--out", p(&coded), "--models", p(&models)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("capacity"));

    let o = viscode(&["decode", "--image", p(&img), "--models", p(&models)]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
