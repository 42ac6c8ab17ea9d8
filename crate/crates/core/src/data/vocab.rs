use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TokenSequence;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Closed token vocabulary plus the IOB tagset.
///
/// Ids 0 and 1 are reserved for padding and unknown tokens and are never
/// produced by a lookup of real text (a literal `"<pad>"` in a corpus gets
/// an ordinary id). The tagset starts with `O`, followed by `B-T`, `I-T` for
/// every entity type in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    tags: Vec<String>,
    token_index: HashMap<String, usize>,
    tag_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    tags: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Vocab::from_parts(f.tokens, f.tags)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            tokens: v.tokens,
            tags: v.tags,
        }
    }
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, tags: Vec<String>) -> Self {
        let token_index = tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let tag_index = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab {
            tokens,
            tags,
            token_index,
            tag_index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.token_index.get(token).copied().unwrap_or(UNK)
    }

    pub fn tag(&self, id: usize) -> Option<&str> {
        self.tags.get(id).map(String::as_str)
    }

    pub fn tag_id(&self, tag: &str) -> Result<usize> {
        self.tag_index
            .get(tag)
            .copied()
            .ok_or_else(|| Error::Data(format!("tag {tag:?} is not in the tagset {:?}", self.tags)))
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.token_id(t.as_ref())).collect()
    }

    pub fn encode_tags<S: AsRef<str>>(&self, tags: &[S]) -> Result<Vec<usize>> {
        tags.iter().map(|t| self.tag_id(t.as_ref())).collect()
    }

    /// Fills `token_ids` (and `tag_ids` when tags are present).
    pub fn assign_ids(&self, seq: &mut TokenSequence) -> Result<()> {
        seq.token_ids = self.encode_tokens(&seq.tokens);
        seq.tag_ids = seq.tags.as_ref().map(|t| self.encode_tags(t)).transpose()?;
        Ok(())
    }

    /// SHA-256 over the token list and the tagset, in id order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.update([0xffu8]);
        for t in &self.tags {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Builds a vocabulary from `sequences`. Tokens seen fewer than `min_freq`
/// times are left out (they map to UNK). Ordering is frequency descending,
/// then lexicographic, so identical corpora give identical ids.
pub fn build_vocab<'a, I>(sequences: I, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a TokenSequence>,
{
    if min_freq < 1 {
        return Err(Error::Config(format!("min_freq must be at least 1, got {min_freq}")));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut types: BTreeSet<String> = BTreeSet::new();
    for seq in sequences {
        for t in &seq.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        for tag in seq.tags.iter().flatten() {
            if let Some((_, ty)) = tag.split_once('-') {
                types.insert(ty.to_string());
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let tokens = [PAD_TOKEN, UNK_TOKEN]
        .into_iter()
        .chain(kept.into_iter().map(|(t, _)| t))
        .map(str::to_string)
        .collect();
    let mut tags = vec!["O".to_string()];
    for ty in types {
        tags.push(format!("B-{ty}"));
        tags.push(format!("I-{ty}"));
    }
    Ok(Vocab::from_parts(tokens, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;

    fn seq(tokens: &[&str], tags: Option<&[&str]>) -> TokenSequence {
        TokenSequence::new(
            tokens.iter().map(|s| s.to_string()).collect(),
            tags.map(|t| t.iter().map(|s| s.to_string()).collect()),
            Domain::Source,
        )
    }

    #[test]
    fn min_freq_drops_rare_tokens() {
        let corpus = vec![seq(&["a", "a", "b", "a"], None)];
        let v = build_vocab(&corpus, 2).unwrap();
        assert_eq!(v.token_id("a"), 2);
        assert_eq!(v.token_id("b"), UNK);
        assert_eq!(v.len(), 3);
        assert!(build_vocab(&corpus, 0).is_err());
    }

    #[test]
    fn ordering_is_deterministic() {
        let corpus = vec![seq(&["z", "y", "y", "x", "z"], None)];
        let a = build_vocab(&corpus, 1).unwrap();
        let b = build_vocab(&corpus, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        // y and z tie on frequency: lexicographic order breaks the tie.
        assert_eq!((a.token_id("y"), a.token_id("z"), a.token_id("x")), (2, 3, 4));
    }

    #[test]
    fn tagset_has_o_first() {
        let corpus = vec![seq(&["a", "b", "c"], Some(&["B-PER", "I-PER", "O"]))];
        let v = build_vocab(&corpus, 1).unwrap();
        assert_eq!(v.tags(), ["O", "B-PER", "I-PER"]);
        assert_eq!(v.tag_id("O").unwrap(), 0);
        assert!(v.tag_id("B-LOC").is_err());
    }

    #[test]
    fn pad_literal_never_maps_to_pad() {
        let corpus = vec![seq(&["<pad>", "<unk>"], None)];
        let v = build_vocab(&corpus, 1).unwrap();
        assert!(v.token_id("<pad>") >= 2);
        assert!(v.token_id("<unk>") >= 2);
    }

    #[test]
    fn json_round_trip() {
        let corpus = vec![seq(&["a", "b"], Some(&["B-LOC", "O"]))];
        let v = build_vocab(&corpus, 1).unwrap();
        let back: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(v, back);
    }
}
