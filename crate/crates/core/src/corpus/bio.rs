use super::{CorpusError, Result};

/// An argument segment with inclusive token bounds.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RoleSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl RoleSpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        RoleSpan {
            start,
            end,
            label: label.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BioDecode {
    pub spans: Vec<RoleSpan>,
    /// Number of bare `I-X` tags that were read as `B-X`.
    pub repairs: usize,
}

pub(crate) enum Bio<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

pub(crate) fn parse_tag(tag: &str) -> Option<Bio<'_>> {
    if tag == "O" {
        return Some(Bio::Outside);
    }
    match tag.split_once('-') {
        Some(("B", label)) if !label.is_empty() => Some(Bio::Begin(label)),
        Some(("I", label)) if !label.is_empty() => Some(Bio::Inside(label)),
        _ => None,
    }
}

/// `Ok(())` when the sequence is well-formed, otherwise the first bad index.
pub fn is_valid_bio<S: AsRef<str>>(tags: &[S]) -> std::result::Result<(), usize> {
    let mut open: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        match parse_tag(tag.as_ref()) {
            None => return Err(i),
            Some(Bio::Outside) => open = None,
            Some(Bio::Begin(l)) => open = Some(l),
            Some(Bio::Inside(l)) => {
                if open != Some(l) {
                    return Err(i);
                }
            }
        }
    }
    Ok(())
}

pub fn spans_to_bio(spans: &[RoleSpan], len: usize) -> Result<Vec<String>> {
    let mut tags = vec!["O".to_string(); len];
    let mut taken = vec![false; len];
    for s in spans {
        if s.start > s.end || s.end >= len {
            return Err(CorpusError::Encoding(format!(
                "span ({}, {}, {}) outside a {len}-token sentence",
                s.start, s.end, s.label
            )));
        }
        for t in s.start..=s.end {
            if taken[t] {
                return Err(CorpusError::Encoding(format!(
                    "span ({}, {}, {}) overlaps another span at token {t}",
                    s.start, s.end, s.label
                )));
            }
            taken[t] = true;
            tags[t] = if t == s.start {
                format!("B-{}", s.label)
            } else {
                format!("I-{}", s.label)
            };
        }
    }
    Ok(tags)
}

/// Reads spans off a tag sequence, sorted by start. Unknown tag shapes are
/// treated as `O`; a bare `I-X` opens a new span and counts as a repair.
pub fn bio_to_spans<S: AsRef<str>>(tags: &[S]) -> BioDecode {
    let mut out = BioDecode::default();
    let mut open: Option<RoleSpan> = None;
    for (i, tag) in tags.iter().enumerate() {
        match parse_tag(tag.as_ref()) {
            Some(Bio::Inside(l)) if open.as_ref().is_some_and(|s| s.label == l) => {
                if let Some(s) = open.as_mut() {
                    s.end = i;
                }
            }
            Some(Bio::Inside(l)) => {
                out.spans.extend(open.take());
                out.repairs += 1;
                open = Some(RoleSpan::new(i, i, l));
            }
            Some(Bio::Begin(l)) => {
                out.spans.extend(open.take());
                open = Some(RoleSpan::new(i, i, l));
            }
            Some(Bio::Outside) | None => out.spans.extend(open.take()),
        }
    }
    out.spans.extend(open);
    out
}
