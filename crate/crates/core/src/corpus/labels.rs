use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::bio::{parse_tag, Bio};
use super::{AnnotatedSentence, CorpusError, Result};

pub const PREDICATE_SUFFIX: &str = ":predicate";

/// Dense bijection between label strings and `0..len`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelSpace {
    fn from(labels: Vec<String>) -> Self {
        LabelSpace::new(labels)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(space: LabelSpace) -> Self {
        space.labels
    }
}

impl LabelSpace {
    /// Keeps the first occurrence of each label, in order.
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut space = LabelSpace::default();
        for l in labels {
            space.insert(l.into());
        }
        space
    }

    fn insert(&mut self, label: String) -> usize {
        if let Some(&i) = self.index.get(&label) {
            return i;
        }
        let i = self.labels.len();
        self.index.insert(label.clone(), i);
        self.labels.push(label);
        i
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// The joint POS/predicate tag of token `t`.
pub fn joint_tag(sentence: &AnnotatedSentence, t: usize) -> String {
    if sentence.predicates[t] {
        format!("{}{PREDICATE_SUFFIX}", sentence.pos[t])
    } else {
        sentence.pos[t].clone()
    }
}

/// Every POS tag, plus `TAG:predicate` for tags seen on a predicate; sorted.
pub fn build_joint_pos_pred_space(corpus: &[AnnotatedSentence]) -> LabelSpace {
    let mut tags = BTreeSet::new();
    for s in corpus {
        for t in 0..s.len() {
            tags.insert(s.pos[t].clone());
            if s.predicates[t] {
                tags.insert(joint_tag(s, t));
            }
        }
    }
    LabelSpace::new(tags)
}

/// BIO role tags seen in any frame. `O` is always index 0, the rest sorted.
pub fn build_role_space(corpus: &[AnnotatedSentence]) -> LabelSpace {
    let mut tags = BTreeSet::new();
    for s in corpus {
        for frame in s.frames.values() {
            tags.extend(frame.iter().filter(|t| *t != "O").cloned());
        }
    }
    LabelSpace::new(std::iter::once("O".to_string()).chain(tags))
}

/// `to` may follow `from` unless `to` is `I-Y` and `from` is neither `B-Y` nor `I-Y`.
pub fn transition_allowed(from: &str, to: &str) -> bool {
    match parse_tag(to) {
        Some(Bio::Inside(y)) => matches!(
            parse_tag(from),
            Some(Bio::Begin(x)) | Some(Bio::Inside(x)) if x == y
        ),
        _ => true,
    }
}

pub fn start_allowed(to: &str) -> bool {
    !matches!(parse_tag(to), Some(Bio::Inside(_)))
}

/// Log-probabilities for BIO tag bigrams plus sequence boundaries.
///
/// `matrix[i * n + j]` scores moving from tag `i` to tag `j`; structurally
/// invalid moves hold negative infinity.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTable {
    pub n: usize,
    pub matrix: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl TransitionTable {
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.matrix[from * self.n + to]
    }

    /// Uniform over structurally valid moves, for tests and cold starts.
    pub fn uniform(space: &LabelSpace) -> Self {
        Self::from_counts(space, &vec![0.0; space.len() * space.len()], &vec![0.0; space.len()], &vec![0.0; space.len()])
    }

    fn from_counts(space: &LabelSpace, bigrams: &[f64], starts: &[f64], ends: &[f64]) -> Self {
        let n = space.len();
        let mut matrix = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            let valid: Vec<usize> = (0..n)
                .filter(|&j| transition_allowed(space.label(i), space.label(j)))
                .collect();
            let total: f64 =
                valid.iter().map(|&j| bigrams[i * n + j]).sum::<f64>() + valid.len() as f64;
            for &j in &valid {
                matrix[i * n + j] = ((bigrams[i * n + j] + 1.0) / total).ln();
            }
        }
        let starters: Vec<usize> = (0..n).filter(|&j| start_allowed(space.label(j))).collect();
        let total: f64 = starters.iter().map(|&j| starts[j]).sum::<f64>() + starters.len() as f64;
        let mut start = vec![f64::NEG_INFINITY; n];
        for &j in &starters {
            start[j] = ((starts[j] + 1.0) / total).ln();
        }
        let total: f64 = ends.iter().sum::<f64>() + n as f64;
        let end = ends.iter().map(|c| ((c + 1.0) / total).ln()).collect();
        TransitionTable {
            n,
            matrix,
            start,
            end,
        }
    }
}

/// Add-one smoothed bigram relative frequencies over the frames of `corpus`.
pub fn estimate_transitions(
    corpus: &[AnnotatedSentence],
    space: &LabelSpace,
) -> Result<TransitionTable> {
    let n = space.len();
    let mut bigrams = vec![0.0; n * n];
    let mut starts = vec![0.0; n];
    let mut ends = vec![0.0; n];
    let mut frames = 0usize;
    for s in corpus {
        for (p, tags) in &s.frames {
            let ids = tags
                .iter()
                .map(|t| {
                    space.get(t).ok_or_else(|| {
                        CorpusError::Estimation(format!("tag {t:?} of frame {p} not in role space"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (Some(&first), Some(&last)) = (ids.first(), ids.last()) else {
                continue;
            };
            frames += 1;
            starts[first] += 1.0;
            ends[last] += 1.0;
            for w in ids.windows(2) {
                bigrams[w[0] * n + w[1]] += 1.0;
            }
        }
    }
    if frames == 0 {
        return Err(CorpusError::Estimation("corpus has no frames".into()));
    }
    Ok(TransitionTable::from_counts(space, &bigrams, &starts, &ends))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn sentence(pos: &[&str], preds: &[bool], frames: &[(usize, &[&str])]) -> AnnotatedSentence {
        let n = pos.len();
        AnnotatedSentence {
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            pos: pos.iter().map(|s| s.to_string()).collect(),
            heads: vec![0; n],
            predicates: preds.to_vec(),
            frames: frames
                .iter()
                .map(|(p, t)| (*p, t.iter().map(|s| s.to_string()).collect()))
                .collect::<BTreeMap<_, _>>(),
        }
    }

    #[test]
    fn joint_space_examples() {
        let s = sentence(&["DT", "NN", "VBD"], &[false, false, true], &[]);
        let space = build_joint_pos_pred_space(&[s]);
        assert_eq!(space.labels(), ["DT", "NN", "VBD", "VBD:predicate"]);

        let s = sentence(&["DT", "NN", "NN"], &[false; 3], &[]);
        assert_eq!(build_joint_pos_pred_space(&[s]).labels(), ["DT", "NN"]);
    }

    #[test]
    fn role_space_puts_outside_first() {
        let s = sentence(&["NN", "VBD"], &[false, true], &[(1, &["B-A1", "O"])]);
        let space = build_role_space(&[s]);
        assert_eq!(space.labels(), ["O", "B-A1"]);
    }

    #[test]
    fn single_sequence_transitions() {
        let s = sentence(&["NN", "NN"], &[true, false], &[(0, &["B-A0", "I-A0"])]);
        let space = LabelSpace::new(["O", "B-A0", "I-A0"]);
        let table = estimate_transitions(&[s], &space).unwrap();
        // B-A0 may go to O, B-A0, I-A0; counts 0,0,1 plus one each
        assert!((table.get(1, 0) - (0.25f64).ln()).abs() < 1e-15);
        assert!((table.get(1, 1) - (0.25f64).ln()).abs() < 1e-15);
        assert!((table.get(1, 2) - (0.5f64).ln()).abs() < 1e-15);
        // O -> I-A0 never
        assert_eq!(table.get(0, 2), f64::NEG_INFINITY);
        assert_eq!(table.start[2], f64::NEG_INFINITY);
        // starts: O and B-A0 valid, B-A0 seen once -> 1/3, 2/3
        assert!((table.start[1] - (2.0f64 / 3.0).ln()).abs() < 1e-15);
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| table.get(i, j).exp()).sum();
            assert!((row - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn estimation_needs_frames() {
        let s = sentence(&["NN"], &[false], &[]);
        let space = LabelSpace::new(["O"]);
        assert!(matches!(
            estimate_transitions(&[s], &space),
            Err(CorpusError::Estimation(_))
        ));
    }

    #[test]
    fn structural_rules() {
        assert!(transition_allowed("B-A0", "I-A0"));
        assert!(transition_allowed("I-A0", "I-A0"));
        assert!(!transition_allowed("B-A1", "I-A0"));
        assert!(!transition_allowed("O", "I-A0"));
        assert!(transition_allowed("O", "B-A0"));
        assert!(!start_allowed("I-A0"));
        assert!(start_allowed("O"));
    }

    #[test]
    fn label_space_serde_round_trip() {
        let space = LabelSpace::new(["O", "B-A0", "I-A0"]);
        let json = serde_json::to_string(&space).unwrap();
        assert_eq!(json, r#"["O","B-A0","I-A0"]"#);
        let back: LabelSpace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, space);
        assert_eq!(back.get("I-A0"), Some(2));
    }
}
