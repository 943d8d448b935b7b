//! Shared fixtures for the benchmarks.

use m2spe::citegraph::{generate_corpus, CorpusGraph, CorpusSpec};
use m2spe::encoder::{EncoderConfig, EncoderParams};

/// Default-sized corpus, encoder config and initialized parameters.
pub fn desk_setup() -> (CorpusGraph, EncoderConfig, EncoderParams) {
    let graph = generate_corpus(&CorpusSpec::default(), 0).expect("default corpus spec is valid");
    let config = EncoderConfig::default();
    let params = EncoderParams::init(&config, 1).expect("default encoder config is valid");
    (graph, config, params)
}

/// Tokens of paper `id`, cut to the encoder's maximum length.
pub fn tokens<'a>(graph: &'a CorpusGraph, config: &EncoderConfig, id: usize) -> &'a [usize] {
    let t = &graph.paper(id).tokens;
    &t[..t.len().min(config.max_seq_len)]
}
