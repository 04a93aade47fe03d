use sentinel_core::ids::{score_contract_history, ScoreOptions};
use sentinel_core::{synth, ModelConfig};
use trace_sentinel_bench::fixture;

#[test]
fn fixture_scores_every_trace() {
    let f = fixture(12, ModelConfig::tiny, 3).unwrap();
    assert_eq!(f.traces.len(), 12);
    assert_eq!(f.params.config.vocab_size, f.vocab.len());
    let scores =
        score_contract_history(&f.params, &f.vocab, None, synth::VAULT, &f.traces, &ScoreOptions::default()).unwrap();
    assert!(scores.iter().all(|s| s.log_likelihood.is_finite() && s.log_likelihood < 0.0));
}

#[test]
fn fixture_is_seeded() {
    let a = fixture(5, ModelConfig::tiny, 9).unwrap();
    let b = fixture(5, ModelConfig::tiny, 9).unwrap();
    assert_eq!(a.traces, b.traces);
    assert_eq!(a.params, b.params);
}
