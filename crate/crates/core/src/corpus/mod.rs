//! Annotated sentences, label spaces and the column-format reader/writer.

mod bio;
mod conll;
mod labels;
pub mod synth;

use std::collections::BTreeMap;

use thiserror::Error;

pub use bio::{bio_to_spans, is_valid_bio, spans_to_bio, BioDecode, RoleSpan};
pub use conll::{parse_conll, read_conll, write_conll, write_conll_file};
pub use labels::{
    build_joint_pos_pred_space, build_role_space, estimate_transitions, joint_tag, start_allowed,
    transition_allowed, LabelSpace, TransitionTable, PREDICATE_SUFFIX,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot encode spans: {0}")]
    Encoding(String),
    #[error("cannot estimate transitions: {0}")]
    Estimation(String),
    #[error("invalid sentence: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One sentence with POS tags, an unlabeled dependency tree and role frames.
///
/// The root token points at itself. `frames` maps a predicate index to the
/// BIO role tags of every token for that predicate.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
    pub heads: Vec<usize>,
    pub predicates: Vec<bool>,
    pub frames: BTreeMap<usize, Vec<String>>,
}

impl AnnotatedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn predicate_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.predicates[i]).collect()
    }

    /// Checks the structural invariants. Trees are not required to be
    /// well-formed here, since predicted heads need not be; see [`Self::is_tree`].
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(CorpusError::Invalid("empty sentence".into()));
        }
        if self.pos.len() != n || self.heads.len() != n || self.predicates.len() != n {
            return Err(CorpusError::Invalid(format!(
                "parallel sequences differ in length: tokens {n}, pos {}, heads {}, predicates {}",
                self.pos.len(),
                self.heads.len(),
                self.predicates.len()
            )));
        }
        if let Some((t, h)) = self.heads.iter().enumerate().find(|(_, &h)| h >= n) {
            return Err(CorpusError::Invalid(format!(
                "head {h} of token {t} outside [0, {n})"
            )));
        }
        for (&p, tags) in &self.frames {
            if p >= n || !self.predicates[p] {
                return Err(CorpusError::Invalid(format!(
                    "frame for non-predicate token {p}"
                )));
            }
            if tags.len() != n {
                return Err(CorpusError::Invalid(format!(
                    "frame {p} has {} tags for {n} tokens",
                    tags.len()
                )));
            }
            if let Err(i) = is_valid_bio(tags) {
                return Err(CorpusError::Invalid(format!(
                    "frame {p}: ill-formed BIO tag {:?} at token {i}",
                    tags[i]
                )));
            }
        }
        Ok(())
    }

    /// Exactly one self-looped root and every token reaches it.
    pub fn is_tree(&self) -> bool {
        let n = self.len();
        if self.heads.iter().enumerate().filter(|(i, &h)| *i == h).count() != 1 {
            return false;
        }
        (0..n).all(|start| {
            let mut cur = start;
            for _ in 0..n {
                if self.heads[cur] == cur {
                    return true;
                }
                cur = self.heads[cur];
            }
            false
        })
    }

    /// True when no two arcs cross. Assumes [`Self::is_tree`].
    pub fn is_projective(&self) -> bool {
        let arcs: Vec<(usize, usize)> = self
            .heads
            .iter()
            .enumerate()
            .filter(|(d, &h)| *d != h)
            .map(|(d, &h)| (d.min(h), d.max(h)))
            .collect();
        arcs.iter().all(|&(a, b)| {
            arcs.iter()
                .all(|&(c, d)| !((a < c && c < b && b < d) || (c < a && a < d && d < b)))
        })
    }
}
