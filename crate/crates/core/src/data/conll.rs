//! Column-format corpora and plain-text unlabelled corpora.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Domain, TokenSequence};
use crate::error::{Error, Result};

/// What to do with sentences longer than `max_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Overflow {
    #[default]
    Truncate,
    Split,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConllOptions {
    /// Read the last column as the tag.
    pub labelled: bool,
    pub max_len: usize,
    pub overflow: Overflow,
}

impl Default for ConllOptions {
    fn default() -> Self {
        ConllOptions {
            labelled: true,
            max_len: 128,
            overflow: Overflow::Truncate,
        }
    }
}

/// Format of an unlabelled target corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextFormat {
    /// One whitespace-tokenised sentence per line.
    #[default]
    Plain,
    /// Column format; tags, if any, are dropped.
    Conll,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Applies the overflow policy to one finished sentence. `line` is the line
/// the sentence ended on, for messages.
fn finish(
    out: &mut Vec<TokenSequence>,
    tokens: Vec<String>,
    tags: Option<Vec<String>>,
    domain: Domain,
    opts: &ConllOptions,
    line: usize,
) -> Result<()> {
    if tokens.is_empty() {
        return Ok(());
    }
    let max = opts.max_len.max(1);
    if tokens.len() <= max {
        out.push(TokenSequence::new(tokens, tags, domain));
        return Ok(());
    }
    match opts.overflow {
        Overflow::Reject => Err(Error::Parse {
            line,
            msg: format!("sentence of {} tokens exceeds max_len {max}", tokens.len()),
        }),
        Overflow::Truncate => {
            warn!("sentence ending at line {line} truncated from {} to {max} tokens", tokens.len());
            let mut tokens = tokens;
            let mut tags = tags;
            tokens.truncate(max);
            if let Some(t) = tags.as_mut() {
                t.truncate(max);
            }
            out.push(TokenSequence::new(tokens, tags, domain));
            Ok(())
        }
        Overflow::Split => {
            let n = tokens.len();
            for start in (0..n).step_by(max) {
                let end = (start + max).min(n);
                let part_tags = tags.as_ref().map(|t| t[start..end].to_vec());
                out.push(TokenSequence::new(tokens[start..end].to_vec(), part_tags, domain));
            }
            Ok(())
        }
    }
}

/// Parses column-format text: one token per line, whitespace-separated
/// columns with the tag last, blank line between sentences. `-DOCSTART-`
/// lines are skipped. LF and CRLF line endings are both accepted.
pub fn parse_conll<R: BufRead>(reader: R, opts: &ConllOptions, domain: Domain) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut last_line = 0;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        last_line = lineno;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            let labels = opts.labelled.then(|| std::mem::take(&mut tags));
            finish(&mut out, std::mem::take(&mut tokens), labels, domain, opts, lineno)?;
            tags.clear();
            continue;
        }
        if cols[0] == "-DOCSTART-" {
            continue;
        }
        if opts.labelled {
            if cols.len() < 2 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected at least two columns (token and tag), found {:?}", line),
                });
            }
            tags.push(cols[cols.len() - 1].to_string());
        }
        tokens.push(cols[0].to_string());
    }
    let labels = opts.labelled.then_some(tags);
    finish(&mut out, tokens, labels, domain, opts, last_line)?;
    Ok(out)
}

pub fn parse_conll_file(path: impl AsRef<Path>, opts: &ConllOptions, domain: Domain) -> Result<Vec<TokenSequence>> {
    let path = path.as_ref();
    parse_conll(open(path)?, opts, domain).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

/// Reads an unlabelled corpus. Sequences are tagged as target domain and
/// carry no tags; empty lines are skipped.
pub fn read_unlabeled<R: BufRead>(reader: R, format: TextFormat, max_len: usize) -> Result<Vec<TokenSequence>> {
    let opts = ConllOptions {
        labelled: false,
        max_len,
        overflow: Overflow::Truncate,
    };
    match format {
        TextFormat::Conll => parse_conll(reader, &opts, Domain::Target),
        TextFormat::Plain => {
            let mut out = Vec::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
                finish(&mut out, tokens, None, Domain::Target, &opts, i + 1)?;
            }
            Ok(out)
        }
    }
}

pub fn read_unlabeled_file(path: impl AsRef<Path>, format: TextFormat, max_len: usize) -> Result<Vec<TokenSequence>> {
    read_unlabeled(open(path.as_ref())?, format, max_len)
}

/// Reads a whole file as UTF-8.
pub fn read_to_string(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut s = String::new();
    open(path)?.read_to_string(&mut s).map_err(|e| Error::io(path, e))?;
    Ok(s)
}

/// Renders `token<TAB>tag` lines with a blank line after every sentence.
pub fn write_conll<'a, I>(sentences: I) -> String
where
    I: IntoIterator<Item = (&'a [String], &'a [String])>,
{
    let mut out = String::new();
    for (tokens, tags) in sentences {
        for (tok, tag) in tokens.iter().zip(tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<TokenSequence>> {
        parse_conll(s.as_bytes(), &ConllOptions::default(), Domain::Source)
    }

    #[test]
    fn reads_one_sentence() {
        let seqs = parse("Jean B-PER\nParis B-LOC\n\n").unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].tokens, vec!["Jean", "Paris"]);
        assert_eq!(seqs[0].tags.as_deref().unwrap(), ["B-PER", "B-LOC"]);
    }

    #[test]
    fn empty_input_and_trailing_blank_lines() {
        assert!(parse("").unwrap().is_empty());
        let seqs = parse("a O\n\n\n\nb O\r\nc B-LOC\r\n\r\n\r\n").unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[1].tokens, vec!["b", "c"]);
        assert_eq!(seqs[1].tags.as_deref().unwrap(), ["O", "B-LOC"]);
    }

    #[test]
    fn missing_tag_column_reports_line() {
        match parse("token") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match parse("a O\n\nb O\nc\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn middle_columns_ignored_and_docstart_skipped() {
        let seqs = parse("-DOCSTART- -X- O\n\nLe DET O\nchat NOUN O\n").unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].tokens, vec!["Le", "chat"]);
    }

    #[test]
    fn overflow_policies() {
        let text = "a O\nb O\nc B-PER\nd I-PER\ne O\n";
        let mut opts = ConllOptions {
            max_len: 2,
            ..Default::default()
        };
        let t = parse_conll(text.as_bytes(), &opts, Domain::Source).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].tokens, vec!["a", "b"]);

        opts.overflow = Overflow::Split;
        let s = parse_conll(text.as_bytes(), &opts, Domain::Source).unwrap();
        assert_eq!(s.iter().map(|q| q.len()).collect::<Vec<_>>(), vec![2, 2, 1]);

        opts.overflow = Overflow::Reject;
        assert!(matches!(
            parse_conll(text.as_bytes(), &opts, Domain::Source),
            Err(Error::Parse { line: 5, .. })
        ));
    }

    #[test]
    fn unlabelled_plain_and_conll() {
        let seqs = read_unlabeled("le chat dort\n\n  \nil pleut\n".as_bytes(), TextFormat::Plain, 128).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].tokens, vec!["le", "chat", "dort"]);
        assert!(seqs.iter().all(|s| s.tags.is_none() && s.domain == Domain::Target));

        let seqs = read_unlabeled("Jean B-PER\nParis B-LOC\n\n".as_bytes(), TextFormat::Conll, 128).unwrap();
        assert_eq!(seqs[0].tokens, vec!["Jean", "Paris"]);
        assert!(seqs[0].tags.is_none());
    }

    #[test]
    fn written_output_parses_back() {
        let tokens = vec!["Jean".to_string(), "dort".to_string()];
        let tags = vec!["B-PER".to_string(), "O".to_string()];
        let text = write_conll([(tokens.as_slice(), tags.as_slice())]);
        let seqs = parse(&text).unwrap();
        assert_eq!(seqs[0].tokens, tokens);
        assert_eq!(seqs[0].tags.as_ref().unwrap(), &tags);
    }
}
