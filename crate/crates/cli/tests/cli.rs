use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn d2p(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2p"))
        .args(args)
        .env("D2P_THREADS", "1")
        .output()
        .expect("spawn d2p")
}

fn ok(args: &[&str]) -> String {
    let out = d2p(args);
    assert!(
        out.status.success(),
        "d2p {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn inspect_reports_schema_and_modules() {
    let model = fixtures().join("toy-gpt2");
    let text = ok(&["inspect", "--model", s(&model), "--json"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["schema"], "d2p/1");
    assert_eq!(v["modules"].as_array().unwrap().len(), 2 * v["config"]["n_layers"].as_u64().unwrap() as usize);
    assert!(ok(&["inspect", "--model", s(&model)]).contains("parameters:"));
}

#[test]
fn zero_sparsity_without_recovery_leaves_weights_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixtures().join("toy-llama");
    let out = dir.path().join("p0");
    ok(&["prune", "--model", s(&model), "--out", s(&out), "--sparsity", "0", "--metric", "l2", "--no-recovery"]);
    assert_eq!(
        std::fs::read(out.join("tensors.bin")).unwrap(),
        std::fs::read(model.join("tensors.bin")).unwrap()
    );
}

#[test]
fn random_pruning_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixtures().join("toy-gpt2");
    let corpus = fixtures().join("toy-corpus.d2ptok");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let text = ok(&[
            "prune", "--model", s(&model), "--out", s(&out), "--sparsity", "0.3", "--metric", "random",
            "--seed", "7", "--corpus", s(&corpus), "--seq-len", "32", "--recovery-samples", "16", "--json",
        ]);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["schema"], "d2p/1");
        assert!((v["achieved_sparsity"].as_f64().unwrap() - 0.3).abs() <= 0.005);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["plan.json", "tensors.bin", "tensors.json", "config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn calibrate_then_prune_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixtures().join("toy-gpt2");
    let corpus = fixtures().join("toy-corpus.d2ptok");
    let calib = dir.path().join("calib");
    ok(&["calibrate", "--model", s(&model), "--corpus", s(&corpus), "--samples", "8", "--seq-len", "32", "--out", s(&calib)]);
    assert!(calib.join("calib.json").exists());

    let report = dir.path().join("div.json");
    ok(&["divergence", "--model", s(&model), "--calib", s(&calib), "--out", s(&report)]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["schema"], "d2p/1");

    let out = dir.path().join("pruned");
    ok(&[
        "prune", "--model", s(&model), "--out", s(&out), "--sparsity", "0.25", "--calib", s(&calib),
        "--corpus", s(&corpus), "--recovery-samples", "16",
    ]);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["metric"], "second_moment");

    let text = ok(&["eval", "--model", s(&out), "--corpus", s(&corpus), "--seq-len", "64", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let ppl = v["perplexity"].as_f64().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixtures().join("toy-gpt2");
    let out = dir.path().join("x");
    let cases: Vec<Vec<&str>> = vec![
        vec!["prune", "--model", s(&model), "--out", s(&out), "--sparsity", "0.1", "--metric", "l1", "--no-recovery"],
        vec!["prune", "--model", s(&model), "--out", s(&out), "--sparsity", "0.3", "--metric", "magic"],
        vec!["prune", "--model", s(&model), "--out", s(&out), "--sparsity", "0.3"],
        vec!["inspect", "--model", "/definitely/not/here"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let o = d2p(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(d2p(&["--help"]).status.code(), Some(0));
}
