//! Span, predicate and attachment metrics over aligned gold and predicted
//! corpora.
//!
//! Credit is exact: a predicted argument counts only when its predicate,
//! both boundaries and its label all match a gold argument. Spans labelled
//! `V` mark the predicate itself and are not scored.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::path::Path;

use thiserror::Error;

use crate::corpus::{bio_to_spans, AnnotatedSentence};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("bucket edges must be strictly ascending: {0:?}")]
    Edges(Vec<usize>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Default sentence-length bucket edges; the last bucket is open-ended.
pub const DEFAULT_EDGES: [usize; 5] = [0, 10, 20, 30, 40];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        *self = *self + o;
    }
}

impl Counts {
    /// Precision is 0 without predictions, recall 0 without gold items.
    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn check_alignment(gold: &[AnnotatedSentence], pred: &[AnnotatedSentence]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(EvalError::Alignment(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.tokens != p.tokens {
            return Err(EvalError::Alignment(format!(
                "sentence {i}: predicted tokens differ from gold"
            )));
        }
        if p.heads.len() != g.len() || p.predicates.len() != g.len() {
            return Err(EvalError::Alignment(format!(
                "sentence {i}: predicted columns do not cover {} tokens",
                g.len()
            )));
        }
    }
    Ok(())
}

/// `(predicate, start, end, label)` for every scored argument.
fn arguments(s: &AnnotatedSentence) -> Vec<(usize, usize, usize, String)> {
    let mut out: Vec<_> = s
        .frames
        .iter()
        .flat_map(|(&p, tags)| {
            bio_to_spans(tags)
                .spans
                .into_iter()
                .filter(|sp| sp.label != "V")
                .map(move |sp| (p, sp.start, sp.end, sp.label))
        })
        .collect();
    out.sort();
    out
}

fn sentence_srl(gold: &AnnotatedSentence, pred: &AnnotatedSentence) -> Counts {
    let g = arguments(gold);
    let p = arguments(pred);
    let tp = p.iter().filter(|a| g.binary_search(a).is_ok()).count();
    Counts {
        tp,
        fp: p.len() - tp,
        fn_: g.len() - tp,
    }
}

fn sentence_predicates(gold: &AnnotatedSentence, pred: &AnnotatedSentence) -> Counts {
    let mut c = Counts::default();
    for (&g, &p) in gold.predicates.iter().zip(&pred.predicates) {
        match (g, p) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

pub fn srl_counts(gold: &[AnnotatedSentence], pred: &[AnnotatedSentence]) -> Result<Counts> {
    check_alignment(gold, pred)?;
    Ok(gold
        .iter()
        .zip(pred)
        .fold(Counts::default(), |acc, (g, p)| acc + sentence_srl(g, p)))
}

pub fn srl_prf(gold: &[AnnotatedSentence], pred: &[AnnotatedSentence]) -> Result<Prf> {
    Ok(srl_counts(gold, pred)?.prf())
}

pub fn predicate_counts(gold: &[AnnotatedSentence], pred: &[AnnotatedSentence]) -> Result<Counts> {
    check_alignment(gold, pred)?;
    Ok(gold
        .iter()
        .zip(pred)
        .fold(Counts::default(), |acc, (g, p)| acc + sentence_predicates(g, p)))
}

pub fn predicate_prf(gold: &[AnnotatedSentence], pred: &[AnnotatedSentence]) -> Result<Prf> {
    Ok(predicate_counts(gold, pred)?.prf())
}

/// Fraction of tokens whose predicted head matches, punctuation included.
/// An empty corpus scores 0.
pub fn uas(gold: &[AnnotatedSentence], pred: &[AnnotatedSentence]) -> Result<f64> {
    check_alignment(gold, pred)?;
    let (mut correct, mut total) = (0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        correct += g.heads.iter().zip(&p.heads).filter(|(a, b)| a == b).count();
        total += g.len();
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    /// Inclusive lower length bound.
    pub lo: usize,
    /// Exclusive upper bound; `None` is unbounded.
    pub hi: Option<usize>,
    pub counts: Counts,
    pub prf: Prf,
    /// Number of sentences in the bucket; zero flags an empty bucket.
    pub support: usize,
}

impl Bucket {
    pub fn is_empty(&self) -> bool {
        self.support == 0
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) => format!("{}-{}", self.lo, hi),
            None => format!("{}+", self.lo),
        }
    }
}

/// SRL counts restricted to sentences with `edges[i] <= len < edges[i+1]`,
/// the last bucket unbounded. Sentences shorter than `edges[0]` are skipped.
pub fn bucket_by_length(
    gold: &[AnnotatedSentence],
    pred: &[AnnotatedSentence],
    edges: &[usize],
) -> Result<Vec<Bucket>> {
    check_alignment(gold, pred)?;
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Edges(edges.to_vec()));
    }
    let mut buckets: Vec<Bucket> = edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| Bucket {
            lo,
            hi: edges.get(i + 1).copied(),
            counts: Counts::default(),
            prf: Prf::default(),
            support: 0,
        })
        .collect();
    for (g, p) in gold.iter().zip(pred) {
        let n = g.len();
        if let Some(b) = buckets
            .iter_mut()
            .find(|b| n >= b.lo && b.hi.is_none_or(|hi| n < hi))
        {
            b.counts += sentence_srl(g, p);
            b.support += 1;
        }
    }
    for b in &mut buckets {
        b.prf = b.counts.prf();
    }
    Ok(buckets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub srl: Prf,
    pub srl_counts: Counts,
    pub predicate: Prf,
    pub predicate_counts: Counts,
    pub uas: f64,
    pub buckets: Vec<Bucket>,
}

pub fn evaluate(gold: &[AnnotatedSentence], pred: &[AnnotatedSentence]) -> Result<MetricsReport> {
    let srl_counts = srl_counts(gold, pred)?;
    let predicate_counts = predicate_counts(gold, pred)?;
    Ok(MetricsReport {
        srl: srl_counts.prf(),
        srl_counts,
        predicate: predicate_counts.prf(),
        predicate_counts,
        uas: uas(gold, pred)?,
        buckets: bucket_by_length(gold, pred, &DEFAULT_EDGES)?,
    })
}

pub const METRICS_HEADER: &str = "metric,scope,precision,recall,f1,tp,fp,fn,support";

/// One row per metric and bucket; `uas` fills only the f1 column.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::new();
    writeln!(out, "{METRICS_HEADER}").unwrap();
    let mut row = |metric: &str, scope: &str, prf: &Prf, c: &Counts, support: String| {
        writeln!(
            out,
            "{metric},{scope},{:.6},{:.6},{:.6},{},{},{},{support}",
            prf.precision, prf.recall, prf.f1, c.tp, c.fp, c.fn_
        )
        .unwrap();
    };
    row("srl", "all", &report.srl, &report.srl_counts, String::new());
    row(
        "predicate",
        "all",
        &report.predicate,
        &report.predicate_counts,
        String::new(),
    );
    for b in &report.buckets {
        row("srl", &b.label(), &b.prf, &b.counts, b.support.to_string());
    }
    writeln!(out, "uas,all,,,{:.6},,,,", report.uas).unwrap();
    out
}

pub fn export_metrics(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, metrics_csv(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;

    fn sent(n: usize, frames: &[(usize, &[&str])]) -> AnnotatedSentence {
        let mut predicates = vec![false; n];
        for (p, _) in frames {
            predicates[*p] = true;
        }
        AnnotatedSentence {
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            pos: vec!["NN".into(); n],
            heads: vec![0; n],
            predicates,
            frames: frames
                .iter()
                .map(|(p, t)| (*p, t.iter().map(|s| s.to_string()).collect()))
                .collect::<BTreeMap<_, _>>(),
        }
    }

    fn two_sentences() -> Vec<AnnotatedSentence> {
        vec![
            sent(4, &[(1, &["B-A0", "O", "B-A1", "I-A1"])]),
            sent(3, &[(0, &["O", "B-A1", "B-AM-TMP"]), (2, &["B-A0", "O", "O"])]),
        ]
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gold = two_sentences();
        let r = srl_prf(&gold, &gold).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let p = predicate_prf(&gold, &gold).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));

        let empty: Vec<_> = gold.iter().map(|s| sent(s.len(), &[])).collect();
        let r = srl_prf(&gold, &empty).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_tally_with_a_wrong_predicate() {
        let gold = two_sentences();
        // sentence 0: A0 right, A1 boundary wrong
        // sentence 1: predicate 0 kept (A1 right, TMP mislabelled), predicate 2
        // missed, spurious predicate 1 with one argument
        let pred = vec![
            sent(4, &[(1, &["B-A0", "O", "B-A1", "O"])]),
            sent(3, &[(0, &["O", "B-A1", "B-AM-LOC"]), (1, &["B-A0", "O", "O"])]),
        ];
        let c = srl_counts(&gold, &pred).unwrap();
        assert_eq!(c, Counts { tp: 2, fp: 3, fn_: 3 });
        let r = c.prf();
        assert!((r.precision - 0.4).abs() < 1e-15);
        assert!((r.recall - 0.4).abs() < 1e-15);
        assert_eq!(
            predicate_counts(&gold, &pred).unwrap(),
            Counts { tp: 2, fp: 1, fn_: 1 }
        );
    }

    #[test]
    fn verb_spans_are_not_scored() {
        let gold = vec![sent(3, &[(1, &["B-A0", "B-V", "O"])])];
        let pred = vec![sent(3, &[(1, &["B-A0", "O", "O"])])];
        let r = srl_prf(&gold, &pred).unwrap();
        assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn predicting_every_token() {
        let gold = two_sentences();
        let all: Vec<_> = gold
            .iter()
            .map(|s| {
                let mut t = sent(s.len(), &[]);
                t.predicates = vec![true; s.len()];
                t
            })
            .collect();
        let p = predicate_prf(&gold, &all).unwrap();
        assert_eq!(p.recall, 1.0);
        assert!((p.precision - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn uas_examples() {
        let mut gold = two_sentences();
        gold[0].heads = vec![1, 1, 1, 2];
        gold[1].heads = vec![0, 0, 1];
        assert_eq!(uas(&gold, &gold).unwrap(), 1.0);
        let mut wrong = gold.clone();
        wrong[0].heads = vec![0, 0, 0, 0];
        wrong[1].heads = vec![1, 2, 0];
        assert_eq!(uas(&gold, &wrong).unwrap(), 0.0);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let gold = two_sentences();
        assert!(matches!(
            srl_prf(&gold, &gold[..1]),
            Err(EvalError::Alignment(_))
        ));
        let mut other = gold.clone();
        other[1].tokens[0] = "x".into();
        assert!(matches!(uas(&gold, &other), Err(EvalError::Alignment(_))));
    }

    #[test]
    fn buckets() {
        let gold = two_sentences();
        let pred = vec![gold[0].clone(), sent(3, &[])];
        let one = bucket_by_length(&gold, &pred, &[0]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].counts, srl_counts(&gold, &pred).unwrap());
        assert_eq!(one[0].prf, srl_prf(&gold, &pred).unwrap());

        let b = bucket_by_length(&gold, &pred, &[0, 4, 10]).unwrap();
        assert_eq!(b[0].support, 1);
        assert_eq!(b[1].support, 1);
        assert!(b[2].is_empty());
        assert_eq!(b[2].prf.f1, 0.0);
        assert_eq!(b[2].label(), "10+");
        assert!(bucket_by_length(&gold, &pred, &[0, 0]).is_err());
    }

    #[test]
    fn csv_layout() {
        let gold = two_sentences();
        let report = evaluate(&gold, &gold).unwrap();
        let csv = metrics_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "srl,all,1.000000,1.000000,1.000000,5,0,0,");
        assert_eq!(lines.len(), 3 + DEFAULT_EDGES.len() + 1);
        assert_eq!(*lines.last().unwrap(), "uas,all,,,1.000000,,,,");
        assert!(lines.iter().all(|l| l.split(',').count() == 9));
        assert_eq!(csv, metrics_csv(&report));
    }

    fn arb_frame(n: usize) -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(0usize..4, n).prop_map(|xs| {
            let mut tags = Vec::with_capacity(xs.len());
            for (i, x) in xs.into_iter().enumerate() {
                let tag = match x {
                    0 => "O".to_string(),
                    1 => "B-A0".to_string(),
                    2 => "B-A1".to_string(),
                    _ => match tags.get(i.wrapping_sub(1)).map(String::as_str) {
                        Some("B-A0") | Some("I-A0") => "I-A0".to_string(),
                        Some("B-A1") | Some("I-A1") => "I-A1".to_string(),
                        _ => "O".to_string(),
                    },
                };
                tags.push(tag);
            }
            tags
        })
    }

    fn arb_sentence() -> impl Strategy<Value = (AnnotatedSentence, AnnotatedSentence)> {
        (1usize..45).prop_flat_map(|n| {
            let side = || prop::collection::btree_map(0..n, arb_frame(n), 0..3);
            (side(), side()).prop_map(move |(g, p)| {
                let mk = |frames: BTreeMap<usize, Vec<String>>| {
                    let mut s = sent(n, &[]);
                    for &k in frames.keys() {
                        s.predicates[k] = true;
                    }
                    s.frames = frames;
                    s
                };
                (mk(g), mk(p))
            })
        })
    }

    proptest! {
        #[test]
        fn bucket_counts_add_up(pairs in prop::collection::vec(arb_sentence(), 1..12)) {
            let (gold, pred): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let total = bucket_by_length(&gold, &pred, &DEFAULT_EDGES)
                .unwrap()
                .iter()
                .fold(Counts::default(), |acc, b| acc + b.counts);
            prop_assert_eq!(total, srl_counts(&gold, &pred).unwrap());
        }

        #[test]
        fn swapping_sides_swaps_precision_and_recall(
            pairs in prop::collection::vec(arb_sentence(), 1..8)
        ) {
            let (gold, pred): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let a = srl_prf(&gold, &pred).unwrap();
            let b = srl_prf(&pred, &gold).unwrap();
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
        }

        #[test]
        fn metrics_ignore_sentence_order(
            pairs in prop::collection::vec(arb_sentence(), 1..8),
            rot in 0usize..8,
        ) {
            let (gold, pred): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let r = rot % gold.len();
            let mut g2 = gold.clone();
            let mut p2 = pred.clone();
            g2.rotate_left(r);
            p2.rotate_left(r);
            prop_assert_eq!(evaluate(&gold, &pred).unwrap(), evaluate(&g2, &p2).unwrap());
        }
    }
}
