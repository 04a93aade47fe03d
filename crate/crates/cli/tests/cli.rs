use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sentinel_core::baselines::{load_embeddings, load_mixture};
use sentinel_core::ids::read_scores_csv;
use sentinel_core::synth;
use sentinel_core::trace_ingest::write_trace_file;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trace-sentinel"))
        .args(args)
        .output()
        .expect("spawn trace-sentinel")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut traces = synth::templated_corpus(40, &mut rng);
    traces.push(synth::reentrancy_trace(40));
    let path = dir.join("traces.jsonl");
    write_trace_file(&path, &traces).unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["rank", "--scores", "x.csv", "--alpha", "1", "--topk", "2"]).status.code(), Some(1));
    assert_eq!(run(&["vocab", "-o", "v.tsv"]).status.code(), Some(1));
}

#[test]
fn help_and_version_exit_zero() {
    let out = ok(&["--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck"));
    ok(&["--version"]);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = run(&["vocab", "--traces", s(&missing), "-o", s(&dir.path().join("v.tsv"))]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{not json}\n").unwrap();
    let out = run(&["vocab", "--traces", s(&bad), "-o", s(&dir.path().join("v.tsv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let traces = corpus(dir.path());
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let out = run(&["--config", s(&cfg), "vocab", "--traces", s(&traces), "-o", s(&dir.path().join("v.tsv"))]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traces = corpus(d);
    let vocab = d.join("vocab.tsv");
    let model = d.join("model.bin");
    let scores = d.join("scores.csv");
    let cfg = d.join("cfg.toml");
    fs::write(&cfg, "[model]\nd_model = 16\nd_ff = 32\n\n[train]\nclip_norm = 0.5\n").unwrap();

    ok(&["vocab", "--traces", s(&traces), "-o", s(&vocab)]);
    assert!(fs::read_to_string(&vocab).unwrap().lines().count() > 8);
    ok(&[
        "--config", s(&cfg), "train", "--traces", s(&traces), "--vocab", s(&vocab), "--preset", "tiny", "--steps",
        "8", "--batch-packs", "2", "--loss-csv", s(&d.join("loss.csv")), "-o", s(&model),
    ]);
    assert_eq!(fs::read_to_string(d.join("loss.csv")).unwrap().lines().count(), 9);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("model.bin.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["outputs"][0]["sha256"].as_str().unwrap().len(), 64);

    ok(&["score", "--traces", s(&traces), "--model", s(&model), "--vocab", s(&vocab), "-o", s(&scores)]);
    let scored = read_scores_csv(fs::File::open(&scores).unwrap()).unwrap();
    assert_eq!(scored.len(), 41);
    assert!(scored.iter().all(|t| t.log_likelihood < 0.0 && t.token_count > 0));

    let out = ok(&["rank", "--scores", s(&scores), "--alpha", "5"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "contract,rank,tx_hash,log_likelihood,token_count,alert");
    assert_eq!(lines.clone().count(), 41);
    // ceil(5% of the vault's history) alerts
    let vault = scored.iter().filter(|t| t.contract == synth::VAULT).count();
    let alerts = lines.filter(|l| l.ends_with(",true")).count();
    assert_eq!(alerts, (vault as f64 * 0.05).ceil() as usize);

    let out = ok(&["eval", "--scores", s(&scores), "--topk", "1,5", "--format", "json"]);
    let table: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(table["thresholds"], serde_json::json!(["top-1", "top-5"]));

    let length = d.join("length.csv");
    ok(&["baseline", "length", "--traces", s(&traces), "-o", s(&length)]);
    assert_eq!(read_scores_csv(fs::File::open(&length).unwrap()).unwrap().len(), 41);

    let emb = d.join("emb.bin");
    ok(&["baseline", "doc2vec", "--traces", s(&traces), "--dim", "8", "--epochs", "3", "-o", s(&emb)]);
    let (ids, matrix) = load_embeddings(&emb).unwrap();
    assert_eq!(ids.len(), 41);
    assert_eq!(matrix.dim(), (41, 8));

    let gmm = d.join("gmm.csv");
    let mix = d.join("mix.json");
    ok(&[
        "baseline", "gmm", "--embeddings", s(&emb), "--traces", s(&traces), "--components", "1,2,3", "--mixture-out",
        s(&mix), "-o", s(&gmm),
    ]);
    assert!((1..=3).contains(&load_mixture(&mix).unwrap().components()));
    assert_eq!(read_scores_csv(fs::File::open(&gmm).unwrap()).unwrap().len(), 41);
}

#[test]
fn bench_reports_throughput() {
    let out = ok(&["bench", "--synthetic", "20", "--repeat", "1"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("tx/s"));
}

#[test]
fn config_sections_and_abi_registry() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traces = corpus(d);
    let cfg = d.join("cfg.toml");
    fs::write(
        &cfg,
        "rpc = \"http://localhost:8545\"\n\n[model]\nd_model = 16\nn_layers = 1\n\n[train]\nlr = 3e-4\nbatch_packs = 4\n\
         warmup_steps = 2\nplateau_patience = 100\n\n[doc2vec]\ndim = 8\nmode = \"dm\"\nsampler = \"hierarchical\"\n\n\
         [em]\nsoft = true\n",
    )
    .unwrap();
    let abi = d.join("abi.json");
    fs::write(
        &abi,
        r#"{"functions": {"0xa9059cbb": {"inputs": ["address", "uint256"], "outputs": ["bool"]}},
            "events": {"0xddf252ad1be2c89b69c2b068fc378daa952ba7f163c4a11628f55a4df523b3ef": ["uint"]}}"#,
    )
    .unwrap();
    let vocab = d.join("vocab.tsv");
    let model = d.join("model.bin");
    ok(&["--config", s(&cfg), "vocab", "--traces", s(&traces), "--abi", s(&abi), "-o", s(&vocab)]);
    assert!(fs::read_to_string(&vocab).unwrap().lines().any(|l| l.starts_with("bool\t")));
    ok(&[
        "--config", s(&cfg), "train", "--traces", s(&traces), "--abi", s(&abi), "--vocab", s(&vocab), "--preset",
        "tiny", "--steps", "3", "-o", s(&model),
    ]);
    let (params, _) = sentinel_core::model::load_checkpoint(&model).unwrap();
    assert_eq!((params.config.d_model, params.config.n_layers), (16, 1));
    let emb = d.join("emb.bin");
    ok(&["--config", s(&cfg), "baseline", "doc2vec", "--traces", s(&traces), "--epochs", "2", "-o", s(&emb)]);
    assert_eq!(load_embeddings(&emb).unwrap().1.ncols(), 8);
}
