#![allow(dead_code)]

use advner::config::ExperimentConfig;
use advner::data::{build_vocab, make_batches, Batch, Domain, TokenSequence, Vocab};
use advner::model::ModelConfig;

pub fn sentence(words: &str, tags: Option<&str>, domain: Domain) -> TokenSequence {
    let toks: Vec<String> = words.split(' ').map(str::to_string).collect();
    let tags = tags.map(|t| t.split(' ').map(str::to_string).collect());
    TokenSequence::new(toks, tags, domain)
}

/// A handful of labelled source sentences and unlabelled target sentences
/// with ids assigned.
pub fn toy() -> (Vec<TokenSequence>, Vec<TokenSequence>, Vocab) {
    let mut src = vec![
        sentence("Jean habite Paris", Some("B-PER O B-LOC"), Domain::Source),
        sentence("Marie aime Lyon", Some("B-PER O B-LOC"), Domain::Source),
        sentence("le Crédit Agricole paie", Some("O B-ORG I-ORG O"), Domain::Source),
        sentence("il pleut", Some("O O"), Domain::Source),
        sentence("Paul visite Nantes demain", Some("B-PER O B-LOC O"), Domain::Source),
    ];
    let mut tgt = vec![
        sentence("le navire quitte Brest", None, Domain::Target),
        sentence("Anne écrit", None, Domain::Target),
        sentence("la gazette de Lyon paraît demain", None, Domain::Target),
    ];
    let vocab = build_vocab(src.iter().chain(&tgt), 1).unwrap();
    for s in src.iter_mut().chain(tgt.iter_mut()) {
        vocab.assign_ids(s).unwrap();
    }
    (src, tgt, vocab)
}

pub fn tiny_model(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        n_tags: vocab.n_tags(),
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        max_len: 16,
        ..Default::default()
    }
}

pub fn one_batch(seqs: &[TokenSequence], vocab: &Vocab) -> Batch {
    make_batches(seqs, vocab, seqs.len(), 0, false).unwrap().remove(0)
}

/// Overrides for a synthetic run that finishes in a few seconds.
pub fn quick_overrides() -> Vec<String> {
    [
        "train.epochs=2",
        "train.batch_size=16",
        "synth.source.n_sentences=120",
        "synth.target.n_sentences=120",
        "synth.dev_sentences=40",
        "synth.test_sentences=40",
        "model.d_model=16",
        "model.n_heads=2",
        "model.d_ff=32",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn quick_config(extra: &[&str]) -> ExperimentConfig {
    let mut o = quick_overrides();
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::load(None, &o).unwrap()
}
