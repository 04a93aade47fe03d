//! Shared fixtures for the throughput benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sentinel_core::tokenizer::{count_corpus, TokenizeOptions};
use sentinel_core::{synth, ModelConfig, ModelParams, RawTrace, Result, Vocabulary};

pub struct Fixture {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub traces: Vec<RawTrace>,
}

/// `n` templated traces with a freshly initialized model of the given shape.
pub fn fixture(n: usize, config: impl FnOnce(usize) -> ModelConfig, seed: u64) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traces = synth::templated_corpus(n, &mut rng);
    let vocab = count_corpus(&traces, None, &TokenizeOptions::default())?.build(100_000)?;
    let params = ModelParams::init(config(vocab.len()), &mut rng)?;
    Ok(Fixture { params, vocab, traces })
}
