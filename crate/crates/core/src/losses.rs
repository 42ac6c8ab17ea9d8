//! NER loss, domain (adversarial) loss and their weighted total.
//!
//! Both negative log-likelihood terms are batch means rather than sums, so
//! the adversarial weight `alpha` means the same thing at any batch size.
//! The domain term's path into the feature extractor is already reversed by
//! the gradient-reversal node, so a single backward pass on the total trains
//! the NER head and extractor on the NER term, the discriminator to separate
//! domains, and the extractor to confuse the discriminator.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};

/// Default weight of the adversarial term.
pub const DEFAULT_ALPHA: f64 = 2.0;

/// Per-step loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ner: f64,
    pub l_adv: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub n_source_tokens: usize,
    pub n_source_seqs: usize,
    pub n_target_seqs: usize,
    /// Sequences, source and target, the discriminator classified
    /// correctly in this step's forward pass.
    pub n_domain_correct: usize,
}

impl LossBreakdown {
    /// `|l_total − (l_ner + alpha·l_adv)|`.
    pub fn composition_residual(&self) -> f64 {
        (self.l_total - (self.l_ner + self.alpha * self.l_adv)).abs()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must be a finite non-negative number, got {alpha}")))
    }
}

/// Mean over real positions of `−log softmax(logits)[gold]`.
/// `logits` is `[B × L × n_tags]`; `tags` and `mask` are `[B × L]`.
pub fn ner_loss<T: Real>(tape: &mut Tape<T>, logits: Var, tags: &[usize], mask: &[bool]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 3 || tags.len() != s[0] * s[1] || mask.len() != tags.len() {
        return Err(Error::Dimension {
            op: "ner_loss",
            lhs: s,
            rhs: vec![tags.len(), mask.len()],
        });
    }
    let n_tags = s[2];
    if let Some(pos) = (0..tags.len()).find(|&i| mask[i] && tags[i] >= n_tags) {
        return Err(Error::Data(format!(
            "tag id {} at row {}, position {} exceeds {n_tags} tags",
            tags[pos],
            pos / s[1],
            pos % s[1]
        )));
    }
    let targets: Vec<Option<usize>> = tags.iter().zip(mask).map(|(&t, &m)| m.then_some(t)).collect();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Contract("ner_loss over a batch with no real tokens".into()));
    }
    let flat = tape.reshape(logits, &[s[0] * s[1], n_tags])?;
    tape.nll(flat, &targets, count as f64)
}

/// Mean domain NLL over the source rows (gold class 0) and target rows
/// (gold class 1), averaged over `b_s + b_t` rows. Without target rows only
/// the source term is used.
pub fn domain_loss<T: Real>(tape: &mut Tape<T>, source_logits: Var, target_logits: Option<Var>) -> Result<Var> {
    let rows = |tape: &Tape<T>, v: Var| -> Result<usize> {
        match tape.shape(v) {
            [r, 2] => Ok(*r),
            other => Err(Error::Dimension {
                op: "domain_loss",
                lhs: other.to_vec(),
                rhs: vec![2],
            }),
        }
    };
    let bs = rows(tape, source_logits)?;
    let bt = target_logits.map(|t| rows(tape, t)).transpose()?.unwrap_or(0);
    let denom = (bs + bt) as f64;
    let src = tape.nll(source_logits, &vec![Some(0); bs], denom)?;
    match target_logits {
        Some(t) => {
            let tgt = tape.nll(t, &vec![Some(1); bt], denom)?;
            tape.add(src, tgt)
        }
        None => Ok(src),
    }
}

/// `l_ner + alpha·l_adv` on the tape.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, l_ner: Var, l_adv: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let weighted = tape.scale(l_adv, T::from_f64(alpha))?;
    tape.add(l_ner, weighted)
}

/// `l_ner + alpha·l_adv` on plain numbers.
pub fn compose_total(l_ner: f64, l_adv: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(l_ner + alpha * l_adv)
}
