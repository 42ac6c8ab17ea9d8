//! Entity-level precision, recall and F1, plus discriminator accuracy.
//!
//! Spans are extracted with the conlleval chunking rules, so ill-formed
//! predictions (an `I-X` with no open `X` entity) are repaired rather than
//! rejected: the orphan starts a new entity.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub kind: String,
    /// Inclusive.
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TypeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub per_type: BTreeMap<String, TypeScores>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl TypeScores {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        TypeScores {
            precision,
            recall,
            f1: harmonic(precision, recall),
            tp,
            fp,
            fn_,
        }
    }
}

fn split(tag: &str) -> (&str, &str) {
    match tag.split_once('-') {
        Some((p, t)) => (p, t),
        None if tag == "O" => ("O", ""),
        None => ("I", tag),
    }
}

/// Spans of `tags` under the conlleval chunking rules.
pub fn extract_entities<S: AsRef<str>>(tags: &[S]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    let mut prev = ("O", "");
    for (i, tag) in tags.iter().enumerate() {
        let (p, t) = split(tag.as_ref());
        let ends = match (prev.0, p) {
            ("O", _) => false,
            (_, "B") | (_, "O") => true,
            _ => prev.1 != t,
        };
        if ends {
            if let Some((start, kind)) = open.take() {
                spans.push(EntitySpan {
                    kind: kind.to_string(),
                    start,
                    end: i,
                });
            }
        }
        let starts = match p {
            "O" => false,
            "B" => true,
            _ => prev.0 == "O" || prev.1 != t,
        };
        if starts {
            open = Some((i, t));
        }
        prev = (p, t);
    }
    if let Some((start, kind)) = open {
        spans.push(EntitySpan {
            kind: kind.to_string(),
            start,
            end: tags.len(),
        });
    }
    spans
}

/// Exact-match span scoring, micro-averaged, with a per-type breakdown.
pub fn prf1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<Metrics> {
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!(
            "prediction has {} sentences, gold has {}",
            pred.len(),
            gold.len()
        )));
    }
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Contract(format!(
                "sentence {i}: prediction has {} tags, gold has {}",
                p.len(),
                g.len()
            )));
        }
        let ps: HashSet<EntitySpan> = extract_entities(p).into_iter().collect();
        let gs: HashSet<EntitySpan> = extract_entities(g).into_iter().collect();
        for s in &ps {
            let c = counts.entry(s.kind.clone()).or_default();
            if gs.contains(s) {
                c.0 += 1;
            } else {
                c.1 += 1;
            }
        }
        for s in gs.difference(&ps) {
            counts.entry(s.kind.clone()).or_default().2 += 1;
        }
    }
    let (tp, fp, fn_) = counts
        .values()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let overall = TypeScores::from_counts(tp, fp, fn_);
    Ok(Metrics {
        precision: overall.precision,
        recall: overall.recall,
        f1: overall.f1,
        tp,
        fp,
        fn_,
        per_type: counts
            .into_iter()
            .map(|(k, (tp, fp, fn_))| (k, TypeScores::from_counts(tp, fp, fn_)))
            .collect(),
    })
}

/// Fraction of rows whose argmax matches the gold domain. Ties go to class 0
/// (source).
pub fn domain_accuracy(logits: &[[f32; 2]], gold: &[Domain]) -> Result<f64> {
    if logits.is_empty() || logits.len() != gold.len() {
        return Err(Error::Contract(format!(
            "domain accuracy needs matching nonempty inputs, got {} rows and {} labels",
            logits.len(),
            gold.len()
        )));
    }
    let correct = logits
        .iter()
        .zip(gold)
        .filter(|(row, d)| usize::from(row[1] > row[0]) == d.class())
        .count();
    Ok(correct as f64 / logits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(kind: &str, start: usize, end: usize) -> EntitySpan {
        EntitySpan {
            kind: kind.into(),
            start,
            end,
        }
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(
            extract_entities(&["B-PER", "I-PER", "O", "B-LOC"]),
            vec![span("PER", 0, 2), span("LOC", 3, 4)]
        );
        assert!(extract_entities(&["O", "O", "O"]).is_empty());
        assert_eq!(extract_entities(&["I-ORG", "I-ORG"]), vec![span("ORG", 0, 2)]);
    }

    fn tags(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn prf1_examples() {
        let gold = vec![tags("B-PER I-PER O B-LOC")];
        let m = prf1(&gold, &gold).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        let pred = vec![tags("B-PER I-PER B-ORG O")];
        let m = prf1(&pred, &gold).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 1));
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        assert_eq!(m.per_type["LOC"].recall, 0.0);
        assert_eq!(m.per_type["ORG"].precision, 0.0);

        let pred = vec![tags("O O O O")];
        let m = prf1(&pred, &gold).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn prf1_length_mismatch_names_sentence() {
        let gold = vec![tags("O"), tags("B-PER O")];
        let pred = vec![tags("O"), tags("B-PER")];
        match prf1(&pred, &gold) {
            Err(Error::Contract(msg)) => assert!(msg.contains("sentence 1")),
            other => panic!("{other:?}"),
        }
        assert!(prf1(&pred[..1], &gold).is_err());
    }

    #[test]
    fn domain_accuracy_conventions() {
        let gold = [Domain::Source, Domain::Target];
        assert_eq!(domain_accuracy(&[[1.0, 0.0], [0.0, 1.0]], &gold).unwrap(), 1.0);
        assert_eq!(domain_accuracy(&[[0.3, 0.3], [0.3, 0.3]], &gold).unwrap(), 0.5);
        assert!(domain_accuracy(&[], &[]).is_err());
    }
}
