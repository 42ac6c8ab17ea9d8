//! Tag-scheme normalisation to IOB.
//!
//! The canonical output is the IOB2 variant: every entity starts with `B-`,
//! `I-X` only ever follows `B-X` or `I-X`, and `O` marks everything else.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TagScheme {
    /// `I-` starts entities; `B-` only separates adjacent same-type entities.
    Iob1,
    /// Every entity begins with `B-`.
    #[default]
    Iob2,
    /// `B-`/`I-`/`L-`/`U-` (also accepts the IOBES spellings `E-`/`S-`).
    Bilou,
    /// Bare entity types per token (`PER`, `LOC`, `O`); runs of one type form one entity.
    TokenClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Prefix {
    Begin,
    Inside,
    Last,
    Unit,
}

fn valid_type(t: &str) -> bool {
    !t.is_empty() && !t.chars().any(char::is_whitespace)
}

/// Splits `P-TYPE` into its prefix letter and type. `None` for `O`.
fn split_tag(tag: &str, scheme: TagScheme, index: usize) -> Result<Option<(Prefix, &str)>> {
    if tag == "O" {
        return Ok(None);
    }
    let malformed = |why: &str| Error::Data(format!("malformed tag {tag:?} at index {index}: {why}"));
    if scheme == TagScheme::TokenClass {
        if !valid_type(tag) {
            return Err(malformed("invalid entity type"));
        }
        return Ok(Some((Prefix::Inside, tag)));
    }
    let (prefix, ty) = tag.split_once('-').ok_or_else(|| malformed("missing prefix"))?;
    if !valid_type(ty) {
        return Err(malformed("invalid entity type"));
    }
    let prefix = match (prefix, scheme) {
        ("B", _) => Prefix::Begin,
        ("I", _) => Prefix::Inside,
        ("L" | "E", TagScheme::Bilou) => Prefix::Last,
        ("U" | "S", TagScheme::Bilou) => Prefix::Unit,
        _ => return Err(malformed("unknown prefix")),
    };
    Ok(Some((prefix, ty)))
}

/// Converts `tags` written in `scheme` to IOB2.
pub fn to_iob<S: AsRef<str>>(tags: &[S], scheme: TagScheme) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(tags.len());
    let mut open: Option<String> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let Some((prefix, ty)) = split_tag(tag, scheme, i)? else {
            out.push("O".to_string());
            open = None;
            continue;
        };
        let continues = open.as_deref() == Some(ty);
        let begin = matches!(prefix, Prefix::Begin | Prefix::Unit) || !continues;
        out.push(format!("{}-{ty}", if begin { "B" } else { "I" }));
        open = match prefix {
            Prefix::Last | Prefix::Unit => None,
            _ => Some(ty.to_string()),
        };
    }
    Ok(out)
}

/// True when `tags` satisfy the IOB2 grammar.
pub fn is_valid_iob<S: AsRef<str>>(tags: &[S]) -> bool {
    let mut open: Option<&str> = None;
    for tag in tags {
        let tag = tag.as_ref();
        if tag == "O" {
            open = None;
            continue;
        }
        match tag.split_once('-') {
            Some(("B", ty)) if valid_type(ty) => open = Some(ty),
            Some(("I", ty)) if valid_type(ty) && open == Some(ty) => {}
            _ => return false,
        }
    }
    true
}
