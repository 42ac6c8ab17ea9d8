//! Corpus ingestion: CoNLL parsing, tag-scheme normalisation, vocabulary and
//! batching.

mod batch;
mod conll;
mod iob;
mod vocab;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, Batch};
pub use conll::{
    parse_conll, parse_conll_file, read_to_string, read_unlabeled, read_unlabeled_file, write_conll, ConllOptions,
    Overflow, TextFormat,
};
pub use iob::{is_valid_iob, to_iob, TagScheme};
pub use vocab::{build_vocab, Vocab, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

use crate::error::Result;

/// Which side of the adaptation a sequence comes from. Domain class ids are
/// 0 for source and 1 for target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn class(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub tags: Option<Vec<String>>,
    pub tag_ids: Option<Vec<usize>>,
    pub domain: Domain,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>, tags: Option<Vec<String>>, domain: Domain) -> Self {
        debug_assert!(tags.as_ref().is_none_or(|t| t.len() == tokens.len()));
        TokenSequence {
            tokens,
            token_ids: Vec::new(),
            tags,
            tag_ids: None,
            domain,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Rewrites the tags of every labelled sequence into IOB2.
pub fn normalize_tags(sequences: &mut [TokenSequence], scheme: TagScheme) -> Result<()> {
    for (i, seq) in sequences.iter_mut().enumerate() {
        if let Some(tags) = seq.tags.as_mut() {
            *tags = to_iob(tags, scheme).map_err(|e| crate::Error::Data(format!("sentence {i}: {e}")))?;
        }
    }
    Ok(())
}

/// Reads a labelled corpus and normalises its tags to IOB2.
pub fn load_labelled(
    path: impl AsRef<std::path::Path>,
    opts: &ConllOptions,
    scheme: TagScheme,
) -> Result<Vec<TokenSequence>> {
    let mut seqs = parse_conll_file(path, opts, Domain::Source)?;
    normalize_tags(&mut seqs, scheme)?;
    Ok(seqs)
}

/// Reads an unlabelled target corpus and maps it through `vocab` (unseen
/// tokens become UNK).
pub fn load_unlabeled(
    path: impl AsRef<std::path::Path>,
    vocab: &Vocab,
    format: TextFormat,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    let mut seqs = read_unlabeled_file(path, format, max_len)?;
    for s in &mut seqs {
        vocab.assign_ids(s)?;
    }
    Ok(seqs)
}
