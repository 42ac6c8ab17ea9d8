use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, PAD};
use super::{Domain, TokenSequence};
use crate::error::{Error, Result};

/// A padded, masked block of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[rows × seq_len]` token ids, PAD-filled.
    pub tokens: Vec<usize>,
    /// `[rows × seq_len]`, true exactly at real positions.
    pub mask: Vec<bool>,
    /// `[rows × seq_len]` tag ids (0 at padding), present when every row is labelled.
    pub tags: Option<Vec<usize>>,
    pub domains: Vec<Domain>,
    /// Positions of the rows in the corpus the batch was cut from.
    pub indices: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.domains.len()
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.mask[r * self.seq_len..(r + 1) * self.seq_len]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    /// Token ids of row `r` with padding removed.
    pub fn row_tokens(&self, r: usize) -> &[usize] {
        &self.tokens[r * self.seq_len..r * self.seq_len + self.row_len(r)]
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Pads `sequences` into one batch.
    pub fn from_sequences(sequences: &[(usize, &TokenSequence)], vocab: &Vocab) -> Result<Batch> {
        if sequences.is_empty() {
            return Err(Error::Contract("cannot build an empty batch".into()));
        }
        let seq_len = sequences.iter().map(|(_, s)| s.len()).max().unwrap_or(0);
        if seq_len == 0 {
            return Err(Error::Data("batch contains only empty sequences".into()));
        }
        let rows = sequences.len();
        let labelled = sequences.iter().all(|(_, s)| s.tags.is_some());
        let mut tokens = vec![PAD; rows * seq_len];
        let mut mask = vec![false; rows * seq_len];
        let mut tags = labelled.then(|| vec![0usize; rows * seq_len]);
        for (r, (idx, seq)) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Data(format!("sequence {idx} is empty")));
            }
            let base = r * seq_len;
            for (p, id) in vocab.encode_tokens(&seq.tokens).into_iter().enumerate() {
                tokens[base + p] = id;
                mask[base + p] = true;
            }
            if let (Some(out), Some(seq_tags)) = (tags.as_mut(), seq.tags.as_ref()) {
                let ids = vocab
                    .encode_tags(seq_tags)
                    .map_err(|e| Error::Data(format!("sequence {idx}: {e}")))?;
                out[base..base + ids.len()].copy_from_slice(&ids);
            }
        }
        Ok(Batch {
            tokens,
            mask,
            tags,
            domains: sequences.iter().map(|(_, s)| s.domain).collect(),
            indices: sequences.iter().map(|(i, _)| *i).collect(),
            seq_len,
        })
    }
}

/// Cuts `sequences` into batches of `batch_size` (the last may be smaller).
/// Every sequence lands in exactly one batch; with `shuffle`, the order is a
/// permutation determined by `seed`.
pub fn make_batches(
    sequences: &[TokenSequence],
    vocab: &Vocab,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<(usize, &TokenSequence)> = chunk.iter().map(|&i| (i, &sequences[i])).collect();
            Batch::from_sequences(&rows, vocab)
        })
        .collect()
}
