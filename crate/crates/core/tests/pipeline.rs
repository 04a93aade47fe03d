use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sentinel_core::ids::{percentage_alarms, rank, score_contract_history, ScoreOptions};
use sentinel_core::model::{load_checkpoint, save_checkpoint};
use sentinel_core::tokenizer::{count_corpus, encode_trace, TokenizeOptions};
use sentinel_core::trace_ingest::{parse_trace_file, write_trace_file};
use sentinel_core::train::train;
use sentinel_core::{synth, Cutoff, EncodedTrace, ModelConfig, TrainConfig};

#[test]
fn jsonl_round_trip_train_and_rank() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut traces = synth::templated_corpus(30, &mut rng);
    traces.push(synth::reentrancy_trace(30));
    let path = dir.path().join("t.jsonl");
    write_trace_file(&path, &traces).unwrap();
    let traces = {
        let back = parse_trace_file(&path).unwrap();
        assert_eq!(back, traces);
        back
    };

    let opts = TokenizeOptions::default();
    let vocab = count_corpus(&traces, None, &opts).unwrap().build(1000).unwrap();
    let enc: Vec<EncodedTrace> = traces.iter().map(|t| encode_trace(t, &vocab, None, &opts).unwrap()).collect();
    let cfg = TrainConfig {
        max_steps: 20,
        batch_packs: 2,
        lr: 3e-3,
        warmup_steps: 2,
        ..TrainConfig::default()
    };
    let out = train(&enc, ModelConfig::tiny(vocab.len()), &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(out.history.len(), 20);
    assert!(out.history.last().unwrap().loss < out.history[0].loss);

    let ckpt = dir.path().join("m.bin");
    save_checkpoint(&ckpt, &out.params, None).unwrap();
    let (params, _) = load_checkpoint(&ckpt).unwrap();
    let scores =
        score_contract_history(&params, &vocab, None, synth::VAULT, &traces, &ScoreOptions::default()).unwrap();
    assert_eq!(scores.len(), 31);
    let report = rank(synth::VAULT, scores);
    assert!(report.entries.windows(2).all(|w| w[0].log_likelihood <= w[1].log_likelihood));
    assert_eq!(percentage_alarms(&report, 10.0, Cutoff::Ceil).unwrap().len(), 4);
    assert_eq!(percentage_alarms(&report, 10.0, Cutoff::Floor).unwrap().len(), 3);
}
