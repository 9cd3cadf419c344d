//! Task heads: the joint POS/predicate classifier, the bilinear role scorer
//! and the summed multi-task loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSpace, PREDICATE_SUFFIX};
use crate::nn::{glorot, Linear};
use crate::numerics::{argmax, ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Mean over rows of `-log softmax(logits)[t, gold[t]]`.
pub fn token_nll(tape: &mut Tape, logits: Var, gold: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.pick(logp, gold)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct PosPredHead {
    pub linear: Linear,
    pub labels: usize,
}

impl PosPredHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d_model: usize,
        labels: usize,
    ) -> Result<Self> {
        Ok(PosPredHead {
            linear: Linear::new(store, rng, "pos_pred", d_model, labels)?,
            labels,
        })
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        self.linear.forward(tape, store, input)
    }
}

/// Token indices whose best joint label carries the predicate suffix.
pub fn predicted_predicates(logits: &Tensor, space: &LabelSpace) -> Vec<usize> {
    (0..logits.rows())
        .filter(|&t| space.label(argmax(logits.row(t))).ends_with(PREDICATE_SUFFIX))
        .collect()
}

/// Best joint label per token, split into POS tag and predicate flag.
pub fn decode_pos_pred(logits: &Tensor, space: &LabelSpace) -> (Vec<String>, Vec<bool>) {
    (0..logits.rows())
        .map(|t| {
            let label = space.label(argmax(logits.row(t)));
            match label.strip_suffix(PREDICATE_SUFFIX) {
                Some(tag) => (tag.to_string(), true),
                None => (label.to_string(), false),
            }
        })
        .unzip()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredicateMode {
    /// Frames are built for the gold predicates.
    GoldTrain,
    /// Frames are built for the classifier's predicates.
    PredictedTest,
}

pub fn select_predicates(
    mode: PredicateMode,
    logits: &Tensor,
    space: &LabelSpace,
    gold: &[bool],
) -> Vec<usize> {
    match mode {
        PredicateMode::GoldTrain => (0..gold.len()).filter(|&t| gold[t]).collect(),
        PredicateMode::PredictedTest => predicted_predicates(logits, space),
    }
}

/// `s_ft[l] = Σ_ij p_f[i] · U[i, l, j] · r_t[j]` with `p` and `r` the
/// predicate and role projections of the final layer.
#[derive(Clone, Copy, Debug)]
pub struct SrlScorer {
    pub predicate: Linear,
    pub role: Linear,
    /// `U` flattened to `[d_r, L·d_r]`; entry `(i, l·d_r + j)` is `U[i, l, j]`.
    pub bilinear: ParamId,
    pub d_r: usize,
    pub labels: usize,
}

impl SrlScorer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d_model: usize,
        d_r: usize,
        labels: usize,
    ) -> Result<Self> {
        let predicate = Linear::new(store, rng, "srl.predicate", d_model, d_r)?;
        let role = Linear::new(store, rng, "srl.role", d_model, d_r)?;
        let bilinear = store.add("srl.bilinear", glorot(rng, d_r, labels * d_r))?;
        Ok(SrlScorer {
            predicate,
            role,
            bilinear,
            d_r,
            labels,
        })
    }

    /// One `[T × L]` score matrix per predicate, in the given order.
    pub fn scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        predicates: &[usize],
    ) -> Result<Vec<Var>> {
        if predicates.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.predicate.forward(tape, store, input)?;
        let r = self.role.forward(tape, store, input)?;
        let rows: Vec<Option<usize>> = predicates.iter().map(|&f| Some(f)).collect();
        let pf = tape.gather_rows(p, &rows)?;
        let u = tape.param(store, self.bilinear);
        let pu = tape.matmul(pf, u)?;
        let mut out = Vec::with_capacity(predicates.len());
        for k in 0..predicates.len() {
            let row = tape.gather_rows(pu, &[Some(k)])?;
            let slice = tape.reshape(row, &[self.labels, self.d_r])?;
            out.push(tape.matmul_bt(r, slice)?);
        }
        Ok(out)
    }
}

/// Mean over frames of the per-frame token-averaged role NLL; zero when
/// there are no frames.
pub fn srl_loss(tape: &mut Tape, scores: &[Var], gold: &[Vec<usize>]) -> Result<Var> {
    if scores.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut total = None;
    for (&s, g) in scores.iter().zip(gold) {
        let l = token_nll(tape, s, g)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, 1.0 / scores.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub srl: f64,
    pub parse: f64,
    pub pos_pred: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            srl: 1.0,
            parse: 1.0,
            pos_pred: 1.0,
        }
    }
}

/// Scalar loss components as logged; `total` is their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub srl: f64,
    pub parse: f64,
    pub pos_pred: f64,
    pub total: f64,
}

/// Adds the three component losses on one tape. A missing parse term (the
/// syntax-agnostic model) contributes exactly zero.
pub fn total_loss(
    tape: &mut Tape,
    srl: Var,
    parse: Option<Var>,
    pos_pred: Var,
    weights: &LossWeights,
) -> Result<(Var, LossBundle)> {
    let parse = match parse {
        Some(p) => p,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let ws = tape.scale(srl, weights.srl);
    let wp = tape.scale(parse, weights.parse);
    let wq = tape.scale(pos_pred, weights.pos_pred);
    let sum = tape.add(ws, wp)?;
    let total = tape.add(sum, wq)?;
    let bundle = LossBundle {
        srl: tape.value(srl).item(),
        parse: tape.value(parse).item(),
        pos_pred: tape.value(pos_pred).item(),
        total: tape.value(total).item(),
    };
    Ok((total, bundle))
}
