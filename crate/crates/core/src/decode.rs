//! Constrained decoding of per-token role scores into a BIO tag sequence.

use thiserror::Error;

use crate::corpus::TransitionTable;
use crate::numerics::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("decode problem is malformed: {0}")]
    Malformed(String),
    #[error("no structurally valid tag sequence")]
    NoPath,
    #[error("brute force over {0} sequences exceeds the oracle limit")]
    TooLarge(f64),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

/// Largest search space the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: f64 = 1e6;

/// `emissions[t, l]` is the log-probability of tag `l` at token `t`.
#[derive(Clone, Copy, Debug)]
pub struct DecodeProblem<'a> {
    pub emissions: &'a Tensor,
    pub transitions: &'a TransitionTable,
}

impl DecodeProblem<'_> {
    fn check(&self) -> Result<(usize, usize)> {
        let shape = self.emissions.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(DecodeError::Malformed(format!(
                "emissions must be a non-empty [T, L] matrix, got {shape:?}"
            )));
        }
        if shape[1] != self.transitions.n {
            return Err(DecodeError::Malformed(format!(
                "{} emission columns but {} transition tags",
                shape[1], self.transitions.n
            )));
        }
        if !self.emissions.is_finite() {
            return Err(DecodeError::Malformed("non-finite emission".into()));
        }
        Ok((shape[0], shape[1]))
    }

    /// Start, emissions, transitions and end summed left to right.
    pub fn score(&self, tags: &[usize]) -> f64 {
        let tr = self.transitions;
        let mut s = tr.start[tags[0]] + self.emissions.get(0, tags[0]);
        for t in 1..tags.len() {
            s += tr.get(tags[t - 1], tags[t]) + self.emissions.get(t, tags[t]);
        }
        s + tr.end[tags[tags.len() - 1]]
    }
}

/// Lowest index among the maxima of `f` over `0..n`, skipping `-inf`.
fn best(n: usize, f: impl Fn(usize) -> f64) -> Option<(usize, f64)> {
    let mut out: Option<(usize, f64)> = None;
    for k in 0..n {
        let v = f(k);
        if v == f64::NEG_INFINITY {
            continue;
        }
        if out.is_none_or(|(_, b)| v > b) {
            out = Some((k, v));
        }
    }
    out
}

/// Highest-scoring tag sequence; among equal scores the lexicographically
/// smallest one wins.
///
/// Runs the dynamic program right to left so that a greedy left-to-right
/// pass over best completions picks the smallest tag at each position.
pub fn viterbi_decode(problem: &DecodeProblem<'_>) -> Result<Vec<usize>> {
    let (t_len, n) = problem.check()?;
    let tr = problem.transitions;
    let em = problem.emissions;
    // beta[t][j]: best score of tokens t+1.. given tag j at t, end included
    let mut beta = vec![vec![f64::NEG_INFINITY; n]; t_len];
    beta[t_len - 1].clone_from(&tr.end);
    for t in (0..t_len - 1).rev() {
        for j in 0..n {
            if let Some((_, v)) = best(n, |k| tr.get(j, k) + em.get(t + 1, k) + beta[t + 1][k]) {
                beta[t][j] = v;
            }
        }
    }
    let (first, _) =
        best(n, |k| tr.start[k] + em.get(0, k) + beta[0][k]).ok_or(DecodeError::NoPath)?;
    let mut tags = vec![first];
    for t in 1..t_len {
        let prev = tags[t - 1];
        let (k, _) =
            best(n, |k| tr.get(prev, k) + em.get(t, k) + beta[t][k]).ok_or(DecodeError::NoPath)?;
        tags.push(k);
    }
    Ok(tags)
}

/// Exhaustive search with the same scoring and tie rule as [`viterbi_decode`].
pub fn brute_force_decode(problem: &DecodeProblem<'_>) -> Result<Vec<usize>> {
    let (t_len, n) = problem.check()?;
    let size = (n as f64).powi(t_len as i32);
    if size > BRUTE_FORCE_LIMIT {
        return Err(DecodeError::TooLarge(size));
    }
    let mut tags = vec![0usize; t_len];
    let mut winner: Option<(Vec<usize>, f64)> = None;
    loop {
        let s = problem.score(&tags);
        if s != f64::NEG_INFINITY && winner.as_ref().is_none_or(|(_, b)| s > *b) {
            winner = Some((tags.clone(), s));
        }
        // odometer increment, last position fastest: lexicographic order
        let mut pos = t_len;
        loop {
            if pos == 0 {
                return winner.map(|(w, _)| w).ok_or(DecodeError::NoPath);
            }
            pos -= 1;
            tags[pos] += 1;
            if tags[pos] < n {
                break;
            }
            tags[pos] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::{transition_allowed, start_allowed, LabelSpace};
    use crate::numerics::log_softmax_rows;

    fn space(n: usize) -> LabelSpace {
        let all = ["O", "B-A0", "I-A0", "B-A1", "I-A1"];
        LabelSpace::new(all[..n].iter().copied())
    }

    /// Random valid table: log-normalized positive weights on allowed moves.
    fn random_table(rng: &mut ChaCha8Rng, sp: &LabelSpace) -> TransitionTable {
        let n = sp.len();
        let mut table = TransitionTable::uniform(sp);
        for i in 0..n {
            for j in 0..n {
                if table.matrix[i * n + j].is_finite() {
                    table.matrix[i * n + j] = rng.random_range(-3.0..0.0);
                }
            }
            if table.start[i].is_finite() {
                table.start[i] = rng.random_range(-3.0..0.0);
            }
            table.end[i] = rng.random_range(-3.0..0.0);
        }
        table
    }

    fn random_emissions(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Tensor {
        let raw = Tensor::new(
            vec![t, n],
            (0..t * n).map(|_| rng.random_range(-4.0..4.0)).collect(),
        )
        .unwrap();
        log_softmax_rows(&raw)
    }

    fn is_valid(sp: &LabelSpace, tags: &[usize]) -> bool {
        start_allowed(sp.label(tags[0]))
            && tags
                .windows(2)
                .all(|w| transition_allowed(sp.label(w[0]), sp.label(w[1])))
    }

    #[test]
    fn single_token_never_starts_inside() {
        let sp = space(3);
        let tr = TransitionTable::uniform(&sp);
        let em = log_softmax_rows(&Tensor::from_rows(&[[0.0, 1.0, 5.0]]).unwrap());
        let p = DecodeProblem {
            emissions: &em,
            transitions: &tr,
        };
        assert_eq!(viterbi_decode(&p).unwrap(), [1]);
        assert_eq!(brute_force_decode(&p).unwrap(), [1]);
    }

    #[test]
    fn uniform_problem_decodes_to_outside() {
        let sp = space(5);
        let mut tr = TransitionTable::uniform(&sp);
        tr.matrix.iter_mut().filter(|v| v.is_finite()).for_each(|v| *v = 0.0);
        tr.start.iter_mut().filter(|v| v.is_finite()).for_each(|v| *v = 0.0);
        tr.end.iter_mut().for_each(|v| *v = 0.0);
        let em = Tensor::zeros(&[4, 5]);
        let p = DecodeProblem {
            emissions: &em,
            transitions: &tr,
        };
        assert_eq!(viterbi_decode(&p).unwrap(), [0, 0, 0, 0]);
        assert_eq!(brute_force_decode(&p).unwrap(), [0, 0, 0, 0]);
    }

    #[test]
    fn malformed_problems_are_rejected() {
        let sp = space(3);
        let tr = TransitionTable::uniform(&sp);
        let em = Tensor::zeros(&[2, 4]);
        let p = DecodeProblem {
            emissions: &em,
            transitions: &tr,
        };
        assert!(matches!(viterbi_decode(&p), Err(DecodeError::Malformed(_))));
        let big = Tensor::zeros(&[13, 3]);
        let p = DecodeProblem {
            emissions: &big,
            transitions: &tr,
        };
        assert!(matches!(brute_force_decode(&p), Err(DecodeError::TooLarge(_))));
        assert_eq!(viterbi_decode(&p).unwrap().len(), 13);
    }

    #[test]
    fn viterbi_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..=5);
            let t = rng.random_range(1..=6);
            let sp = space(n);
            let tr = random_table(&mut rng, &sp);
            let em = random_emissions(&mut rng, t, n);
            let p = DecodeProblem {
                emissions: &em,
                transitions: &tr,
            };
            let v = viterbi_decode(&p).unwrap();
            assert_eq!(v, brute_force_decode(&p).unwrap());
            assert!(is_valid(&sp, &v));
        }
    }

    #[test]
    fn decoded_sequence_beats_random_valid_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sp = space(5);
        let tr = random_table(&mut rng, &sp);
        let em = random_emissions(&mut rng, 6, 5);
        let p = DecodeProblem {
            emissions: &em,
            transitions: &tr,
        };
        let best = p.score(&brute_force_decode(&p).unwrap());
        let mut checked = 0;
        while checked < 100 {
            let seq: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
            if is_valid(&sp, &seq) {
                assert!(best >= p.score(&seq));
                checked += 1;
            }
        }
    }

    #[test]
    fn emission_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sp = space(5);
        for _ in 0..50 {
            let tr = random_table(&mut rng, &sp);
            let em = random_emissions(&mut rng, 8, 5);
            let mut shifted = em.clone();
            for t in 0..8 {
                let c = rng.random_range(-10.0..10.0);
                for l in 0..5 {
                    shifted.data_mut()[t * 5 + l] += c;
                }
            }
            let a = viterbi_decode(&DecodeProblem {
                emissions: &em,
                transitions: &tr,
            })
            .unwrap();
            let b = viterbi_decode(&DecodeProblem {
                emissions: &shifted,
                transitions: &tr,
            })
            .unwrap();
            assert_eq!(a, b);
        }
    }
}
