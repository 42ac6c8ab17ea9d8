//! Synthetic paired NER corpora with a controllable domain gap.
//!
//! Sentences are sequences of context words with gazetteer entities dropped
//! in. Entity gazetteers are shared by every domain. Context words come from
//! a shared pool or from a domain-private pool; `domain_gap` is the
//! probability of the private pool. All words are pronounceable pseudo-words
//! built from a bijective syllable code, so distinct pools never collide.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Binomial;
use serde::{Deserialize, Serialize};

use crate::data::write_conll;
use crate::error::{Error, Result};

const CONTEXT_SYLLABLES: [&str; 16] = [
    "ba", "de", "ri", "lo", "mu", "ne", "ta", "vi", "so", "ka", "pe", "gu", "fo", "zi", "ja", "hu",
];
const ENTITY_SYLLABLES: [&str; 16] = [
    "Ar", "bel", "Cor", "dan", "Em", "fir", "Gal", "hor", "Il", "jon", "Kar", "lem", "Mor", "nis", "Ol", "pra",
];
/// Words per syllable code space (four base-16 syllables).
const CODE_SPACE: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub seed: u64,
    pub n_sentences: usize,
    /// Inclusive bounds on sentence length in tokens.
    pub min_len: usize,
    pub max_len: usize,
    pub entity_types: Vec<String>,
    /// Expected fraction of tokens inside entities.
    pub entity_density: f64,
    pub shared_pool_size: usize,
    pub private_pool_size: usize,
    /// Which private context pool this domain draws from.
    pub private_pool: usize,
    /// When nonempty, each sentence picks one of these private pools
    /// uniformly instead of `private_pool`.
    pub mixture: Vec<usize>,
    /// Surface forms per entity type.
    pub gazetteer_size: usize,
    /// Longest entity surface form, in tokens.
    pub max_entity_len: usize,
    pub domain_gap: f64,
    pub noise_rate: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            seed: 0,
            n_sentences: 2000,
            min_len: 6,
            max_len: 14,
            entity_types: vec!["PER".into(), "LOC".into(), "ORG".into()],
            entity_density: 0.2,
            shared_pool_size: 100,
            private_pool_size: 200,
            private_pool: 0,
            mixture: Vec::new(),
            gazetteer_size: 60,
            max_entity_len: 2,
            domain_gap: 0.0,
            noise_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Same,
    #[default]
    Different,
    Mixed,
}

impl PairMode {
    pub fn name(self) -> &'static str {
        match self {
            PairMode::Same => "same",
            PairMode::Different => "different",
            PairMode::Mixed => "mixed",
        }
    }
}

/// One labelled sentence: tokens and IOB2 tags.
pub type Sentence = (Vec<String>, Vec<String>);

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sentences == 0 {
            return Err(Error::Config("synth.n_sentences must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "synth sentence length range {}..={} is empty",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.entity_density) {
            return Err(Error::Config(format!(
                "synth.entity_density must lie in [0, 1), got {}",
                self.entity_density
            )));
        }
        if !(0.0..=1.0).contains(&self.domain_gap) {
            return Err(Error::Config(format!("synth.domain_gap must lie in [0, 1], got {}", self.domain_gap)));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("synth.noise_rate must lie in [0, 1), got {}", self.noise_rate)));
        }
        if self.shared_pool_size == 0 || self.private_pool_size == 0 {
            return Err(Error::Config("synth context pools must be nonempty".into()));
        }
        if self.entity_density > 0.0 && (self.entity_types.is_empty() || self.gazetteer_size == 0) {
            return Err(Error::Config("synth gazetteers must be nonempty when entity_density > 0".into()));
        }
        if self.max_entity_len == 0 {
            return Err(Error::Config("synth.max_entity_len must be positive".into()));
        }
        if self.entity_density > 0.0 && self.gazetteer_size < self.max_entity_len {
            return Err(Error::Config(
                "synth.gazetteer_size must cover every entity length up to max_entity_len".into(),
            ));
        }
        let pools = self.mixture.iter().chain(std::iter::once(&self.private_pool));
        let needed = self.shared_pool_size as u64
            + (pools.max().copied().unwrap_or(0) as u64 + 1) * self.private_pool_size as u64;
        if needed > CODE_SPACE {
            return Err(Error::Config("synth pools exceed the pseudo-word space".into()));
        }
        let forms = self.entity_types.len() as u64 * self.gazetteer_size as u64 * self.max_entity_len as u64;
        if forms > CODE_SPACE {
            return Err(Error::Config("synth gazetteers exceed the pseudo-word space".into()));
        }
        Ok(())
    }
}

/// Pseudo-word number `index`. Distinct indices below 2^16 give distinct
/// words.
fn pseudo_word(index: u64, syllables: &[&str; 16]) -> String {
    // Odd multiplier: a bijection on the code space that scatters neighbours.
    let code = index.wrapping_mul(40503) % CODE_SPACE;
    (0..4).map(|k| syllables[((code >> (4 * k)) & 15) as usize]).collect()
}

fn context_word(spec: &DomainSpec, pool: Option<usize>, i: usize) -> String {
    let index = match pool {
        None => i as u64,
        Some(p) => (spec.shared_pool_size + p * spec.private_pool_size + i) as u64,
    };
    pseudo_word(index, &CONTEXT_SYLLABLES)
}

/// Surface form `j` of entity type number `t`. Lengths cycle through
/// 1..=max_entity_len.
fn entity_form(spec: &DomainSpec, t: usize, j: usize) -> Vec<String> {
    let len = 1 + j % spec.max_entity_len;
    let base = (t * spec.gazetteer_size + j) * spec.max_entity_len;
    (0..len)
        .map(|k| pseudo_word((base + k) as u64, &ENTITY_SYLLABLES))
        .collect()
}

fn perturb(word: &str, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    let pos = rng.random_range(0..chars.len());
    let old = chars[pos];
    let mut c = old;
    while c == old {
        c = rng.random_range(b'a'..=b'z') as char;
    }
    chars[pos] = c;
    chars.into_iter().collect()
}

/// Generates `spec.n_sentences` labelled sentences.
pub fn generate_sentences(spec: &DomainSpec) -> Result<Vec<Sentence>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.entity_density;
    // Forms of each length 1..=max_entity_len, by length.
    let by_len: Vec<Vec<usize>> = (1..=spec.max_entity_len)
        .map(|l| (l - 1..spec.gazetteer_size).step_by(spec.max_entity_len).collect())
        .collect();

    let mut out = Vec::with_capacity(spec.n_sentences);
    for _ in 0..spec.n_sentences {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let private = if spec.mixture.is_empty() {
            spec.private_pool
        } else {
            spec.mixture[rng.random_range(0..spec.mixture.len())]
        };
        // Entity tokens ~ Binomial(len, density), cut into entities and
        // shuffled among the context tokens.
        let inside = Binomial::new(len as u64, d).map_err(|e| Error::Config(e.to_string()))?;
        let mut remaining = rng.sample(inside) as usize;
        let mut units: Vec<usize> = vec![0; len - remaining];
        while remaining > 0 {
            let l = rng.random_range(1..=spec.max_entity_len.min(remaining));
            units.push(l);
            remaining -= l;
        }
        units.shuffle(&mut rng);

        let mut tokens = Vec::with_capacity(len);
        let mut tags = Vec::with_capacity(len);
        for unit in units {
            if unit == 0 {
                let word = if rng.random_bool(spec.domain_gap) {
                    context_word(spec, Some(private), rng.random_range(0..spec.private_pool_size))
                } else {
                    context_word(spec, None, rng.random_range(0..spec.shared_pool_size))
                };
                let word = if spec.noise_rate > 0.0 && rng.random_bool(spec.noise_rate) {
                    perturb(&word, &mut rng)
                } else {
                    word
                };
                tokens.push(word);
                tags.push("O".to_string());
            } else {
                let t = rng.random_range(0..spec.entity_types.len());
                let forms = &by_len[unit - 1];
                let form = entity_form(spec, t, forms[rng.random_range(0..forms.len())]);
                let kind = &spec.entity_types[t];
                for (k, w) in form.into_iter().enumerate() {
                    tokens.push(w);
                    tags.push(format!("{}-{kind}", if k == 0 { "B" } else { "I" }));
                }
            }
        }
        out.push((tokens, tags));
    }
    Ok(out)
}

/// Renders sentences as CoNLL text.
pub fn to_conll(sentences: &[Sentence]) -> String {
    write_conll(sentences.iter().map(|(t, g)| (t.as_slice(), g.as_slice())))
}

/// Labelled CoNLL corpus for `spec`.
pub fn generate(spec: &DomainSpec) -> Result<String> {
    Ok(to_conll(&generate_sentences(spec)?))
}

/// Rewrites `target` so its context pools stand in the requested relation
/// to `source`.
pub fn pair_target(source: &DomainSpec, target: &DomainSpec, mode: PairMode) -> DomainSpec {
    let mut t = target.clone();
    t.shared_pool_size = source.shared_pool_size;
    t.private_pool_size = source.private_pool_size;
    match mode {
        PairMode::Same => {
            t.private_pool = source.private_pool;
            t.domain_gap = source.domain_gap;
            t.mixture.clear();
        }
        PairMode::Different => {
            if t.private_pool == source.private_pool {
                t.private_pool = source.private_pool + 1;
            }
            t.mixture.clear();
        }
        PairMode::Mixed => {
            let a = source.private_pool;
            t.mixture = vec![a, a + 1, a + 2];
            t.private_pool = a + 1;
        }
    }
    t
}

/// Source and target corpora for one of the three pairing conditions.
pub fn generate_pair(source: &DomainSpec, target: &DomainSpec, mode: PairMode) -> Result<(String, String)> {
    if source.entity_types.iter().collect::<BTreeSet<_>>() != target.entity_types.iter().collect::<BTreeSet<_>>() {
        return Err(Error::Config("source and target specs use different entity types".into()));
    }
    let t = pair_target(source, target, mode);
    Ok((generate(source)?, generate(&t)?))
}

/// Distinct tokens tagged `O`.
pub fn context_vocab(sentences: &[Sentence]) -> BTreeSet<String> {
    sentences
        .iter()
        .flat_map(|(t, g)| t.iter().zip(g).filter(|(_, g)| *g == "O").map(|(t, _)| t.clone()))
        .collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub mean_len: f64,
    pub entity_density: f64,
    pub entities: BTreeMap<String, usize>,
}

pub fn corpus_stats(sentences: &[Sentence]) -> CorpusStats {
    let tokens: usize = sentences.iter().map(|(t, _)| t.len()).sum();
    let inside = sentences
        .iter()
        .flat_map(|(_, g)| g)
        .filter(|g| *g != "O")
        .count();
    let mut entities = BTreeMap::new();
    for (_, g) in sentences {
        for tag in g {
            if let Some(kind) = tag.strip_prefix("B-") {
                *entities.entry(kind.to_string()).or_default() += 1;
            }
        }
    }
    CorpusStats {
        sentences: sentences.len(),
        mean_len: tokens as f64 / sentences.len().max(1) as f64,
        entity_density: inside as f64 / tokens.max(1) as f64,
        entities,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{is_valid_iob, parse_conll, to_iob, ConllOptions, Domain, TagScheme};

    fn spec(seed: u64, n: usize) -> DomainSpec {
        DomainSpec {
            seed,
            n_sentences: n,
            ..Default::default()
        }
    }

    #[test]
    fn pseudo_words_are_distinct() {
        let words: BTreeSet<String> = (0..CODE_SPACE).map(|i| pseudo_word(i, &CONTEXT_SYLLABLES)).collect();
        assert_eq!(words.len(), CODE_SPACE as usize);
    }

    #[test]
    fn deterministic() {
        let s = spec(3, 200);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        assert_ne!(generate(&s).unwrap(), generate(&spec(4, 200)).unwrap());
    }

    #[test]
    fn zero_density_gives_only_o() {
        let s = DomainSpec {
            entity_density: 0.0,
            ..spec(1, 100)
        };
        let sents = generate_sentences(&s).unwrap();
        assert!(sents.iter().all(|(_, g)| g.iter().all(|t| t == "O")));
    }

    #[test]
    fn empty_pools_rejected() {
        for s in [
            DomainSpec {
                shared_pool_size: 0,
                ..spec(0, 10)
            },
            DomainSpec {
                private_pool_size: 0,
                ..spec(0, 10)
            },
            DomainSpec {
                gazetteer_size: 0,
                ..spec(0, 10)
            },
            DomainSpec {
                entity_types: vec![],
                ..spec(0, 10)
            },
        ] {
            assert!(matches!(generate(&s), Err(Error::Config(_))));
        }
    }

    #[test]
    fn output_parses_and_is_iob2() {
        let text = generate(&spec(5, 300)).unwrap();
        let opts = ConllOptions {
            max_len: 1000,
            ..Default::default()
        };
        let seqs = parse_conll(text.as_bytes(), &opts, Domain::Source).unwrap();
        assert_eq!(seqs.len(), 300);
        for s in &seqs {
            let tags = s.tags.as_ref().unwrap();
            assert!(is_valid_iob(tags));
            assert_eq!(&to_iob(tags, TagScheme::Iob2).unwrap(), tags);
        }
    }

    #[test]
    fn statistics_match_spec() {
        for (density, min, max) in [(0.2, 6, 14), (0.35, 4, 20), (0.1, 10, 10)] {
            let s = DomainSpec {
                entity_density: density,
                min_len: min,
                max_len: max,
                max_entity_len: 3,
                ..spec(11, 2000)
            };
            let st = corpus_stats(&generate_sentences(&s).unwrap());
            let mean = (min + max) as f64 / 2.0;
            assert!((st.mean_len - mean).abs() / mean < 0.05, "{st:?}");
            assert!((st.entity_density - density).abs() / density < 0.05, "{density}: {st:?}");
        }
    }

    #[test]
    fn full_gap_private_pools_share_no_context() {
        let a = DomainSpec {
            domain_gap: 1.0,
            ..spec(1, 500)
        };
        let b = DomainSpec {
            private_pool: 1,
            ..a.clone()
        };
        let va = context_vocab(&generate_sentences(&a).unwrap());
        let vb = context_vocab(&generate_sentences(&b).unwrap());
        assert!(va.intersection(&vb).next().is_none());
    }

    #[test]
    fn zero_gap_uses_shared_pool_only() {
        let a = spec(2, 500);
        let b = DomainSpec {
            private_pool: 3,
            seed: 9,
            ..a.clone()
        };
        let shared: BTreeSet<String> = (0..a.shared_pool_size).map(|i| context_word(&a, None, i)).collect();
        for s in [a, b] {
            assert!(context_vocab(&generate_sentences(&s).unwrap()).is_subset(&shared));
        }
    }

    #[test]
    fn pair_modes_order_overlap() {
        let src = DomainSpec {
            domain_gap: 0.9,
            ..spec(1, 2000)
        };
        let tgt = DomainSpec {
            domain_gap: 0.9,
            ..spec(2, 2000)
        };
        let overlap = |mode| {
            let t = pair_target(&src, &tgt, mode);
            jaccard(
                &context_vocab(&generate_sentences(&src).unwrap()),
                &context_vocab(&generate_sentences(&t).unwrap()),
            )
        };
        let same = overlap(PairMode::Same);
        let diff = overlap(PairMode::Different);
        let mixed = overlap(PairMode::Mixed);
        assert!(same > 0.8, "{same}");
        assert!(diff < 0.3, "{diff}");
        assert!(diff < mixed && mixed < same, "{diff} {mixed} {same}");
    }

    #[test]
    fn noise_touches_context_only() {
        let clean = spec(6, 300);
        let noisy = DomainSpec {
            noise_rate: 0.5,
            ..clean.clone()
        };
        let a = generate_sentences(&clean).unwrap();
        let b = generate_sentences(&noisy).unwrap();
        let entities = |s: &[Sentence]| -> BTreeSet<String> {
            s.iter()
                .flat_map(|(t, g)| t.iter().zip(g).filter(|(_, g)| *g != "O").map(|(t, _)| t.clone()))
                .collect()
        };
        let mut all_forms = BTreeSet::new();
        for t in 0..clean.entity_types.len() {
            for j in 0..clean.gazetteer_size {
                all_forms.extend(entity_form(&clean, t, j));
            }
        }
        assert!(entities(&b).is_subset(&all_forms));
        assert!(context_vocab(&b).len() > context_vocab(&a).len());
    }

    #[test]
    fn mismatched_entity_types_rejected() {
        let a = spec(1, 10);
        let b = DomainSpec {
            entity_types: vec!["PER".into()],
            ..spec(2, 10)
        };
        assert!(generate_pair(&a, &b, PairMode::Same).is_err());
    }
}
