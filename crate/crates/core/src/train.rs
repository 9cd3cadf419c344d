//! Training loop, corpus-level prediction and synthetic data generation.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{OptimizerKind, RunConfig};
use crate::corpus::synth::{gen_synthetic, SynthParams};
use crate::corpus::{write_conll_file, AnnotatedSentence};
use crate::embed::{synthetic_contextual_layers, synthetic_static_table, ContextualLayers, StaticTable};
use crate::encoder::ParseSource;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::heads::LossBundle;
use crate::model::{EmbeddingKind, Model, Vocabularies};
use crate::numerics::{ParamStore, Tape, Tensor};

/// Contextual layers for sentence `index`, when the corpus has them.
fn context_for<'a>(ctx: Option<&'a ContextualLayers>, index: usize) -> Result<Option<&'a Tensor>> {
    ctx.map(|c| c.get(&index.to_string())).transpose().map_err(Error::from)
}

/// Plain or Adam updates over every parameter of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    rate: f64,
    clip: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, rate: f64, clip: f64, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Optimizer {
            kind,
            rate,
            clip,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    /// Applies the accumulated gradients, rescaled to norm `clip` when they
    /// exceed it, and zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        let norm = store
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (k, p) in store.iter_mut().enumerate() {
            let grads = p.grad.data().to_vec();
            let values = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in values.iter_mut().zip(&grads) {
                        *v -= self.rate * g * scale;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, s) = (&mut self.first[k], &mut self.second[k]);
                    for i in 0..values.len() {
                        let g = grads[i] * scale;
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                        s[i] = BETA2 * s[i] + (1.0 - BETA2) * g * g;
                        values[i] -= self.rate * (m[i] / c1) / ((s[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        store.zero_grads();
    }
}

/// Everything a training run reads.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<AnnotatedSentence>,
    pub dev: Vec<AnnotatedSentence>,
    pub table: Option<StaticTable>,
    pub train_context: Option<ContextualLayers>,
    pub dev_context: Option<ContextualLayers>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Component losses averaged over the epoch's sentences.
    pub loss: LossBundle,
    pub dev: MetricsReport,
}

pub const LOG_HEADER: &str =
    "epoch,srl_loss,parse_loss,pos_pred_loss,total_loss,dev_srl_p,dev_srl_r,dev_srl_f1,dev_predicate_f1,dev_uas";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        let d = &self.dev;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            l.srl,
            l.parse,
            l.pos_pred,
            l.total,
            d.srl.precision,
            d.srl.recall,
            d.srl.f1,
            d.predicate.f1,
            d.uas
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in log {
        writeln!(out, "{}", e.csv_row()).unwrap();
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev F1 (earliest on ties).
    pub best: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Called after every epoch with the log row, the current model and
/// whether it is the new best; `Break` ends training after that epoch.
pub type EpochHook<'a> = dyn FnMut(&EpochLog, &Model, bool) -> Result<ControlFlow<()>> + 'a;

/// Deterministic single-threaded training: one sentence per update,
/// shuffled each epoch from the configured seed.
pub fn train(config: &RunConfig, data: &TrainData, hook: &mut EpochHook<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if config.model.embedding == EmbeddingKind::Contextual
        && (data.train_context.is_none() || data.dev_context.is_none())
    {
        return Err(Error::Config(
            "contextual input needs context_train and context_dev".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = Vocabularies::from_corpus(&data.train)?;
    let table = match config.model.embedding {
        EmbeddingKind::Static => data.table.clone(),
        EmbeddingKind::Contextual => None,
    };
    let mut model = Model::new(config.model.clone(), vocab, table, &mut rng)?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, config.clip, &model.store);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBundle::default();
        for &i in &order {
            let sentence = &data.train[i];
            let ctx = context_for(data.train_context.as_ref(), i)?;
            let mut tape = Tape::new();
            let (loss, bundle) = model.net.loss(&mut tape, &model.store, sentence, ctx)?;
            if !bundle.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, step {}",
                    model.step
                )));
            }
            tape.backward(loss, &mut model.store)?;
            opt.step(&mut model.store);
            model.step += 1;
            sum.srl += bundle.srl;
            sum.parse += bundle.parse;
            sum.pos_pred += bundle.pos_pred;
            sum.total += bundle.total;
        }
        if model.store.iter().any(|p| !p.value.is_finite()) {
            return Err(Error::Divergence(format!("non-finite parameter after epoch {epoch}")));
        }
        let n = data.train.len() as f64;
        let loss = LossBundle {
            srl: sum.srl / n,
            parse: sum.parse / n,
            pos_pred: sum.pos_pred / n,
            total: sum.total / n,
        };
        let preds = predict_corpus(
            &model,
            &data.dev,
            data.dev_context.as_ref(),
            &ParseSource::SelfPredicted,
        )?;
        let dev = evaluate(&data.dev, &preds)?;
        let entry = EpochLog { epoch, loss, dev };
        let improved = best.as_ref().is_none_or(|(f, _, _)| entry.dev.srl.f1 > *f);
        if improved {
            best = Some((entry.dev.srl.f1, epoch, model.clone()));
        }
        let flow = hook(&entry, &model, improved)?;
        log.push(entry);
        if flow.is_break() {
            break;
        }
    }
    let (_, best_epoch, best) = match best {
        Some(b) => b,
        None => (0.0, 0, model),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
    })
}

/// Checks that every POS tag and role label of `corpus` is known to `model`.
pub fn check_compatible(model: &Model, corpus: &[AnnotatedSentence]) -> Result<()> {
    let v = &model.net.vocab;
    for (i, s) in corpus.iter().enumerate() {
        for tag in s.frames.values().flatten() {
            if v.roles.get(tag).is_none() {
                return Err(Error::Compatibility(format!(
                    "sentence {i}: role {tag:?} is not in the checkpoint's role space"
                )));
            }
        }
        for t in 0..s.len() {
            let tag = crate::corpus::joint_tag(s, t);
            if v.joint.get(&tag).is_none() {
                return Err(Error::Compatibility(format!(
                    "sentence {i}: tag {tag:?} is not in the checkpoint's joint label space"
                )));
            }
        }
    }
    Ok(())
}

/// Predicts every sentence. Parameters are read-only; the source only
/// changes what the syntax head passes downstream.
pub fn predict_corpus(
    model: &Model,
    corpus: &[AnnotatedSentence],
    context: Option<&ContextualLayers>,
    source: &ParseSource,
) -> Result<Vec<AnnotatedSentence>> {
    if let ParseSource::External(heads) = source {
        if heads.len() != corpus.len() {
            return Err(Error::Alignment(format!(
                "external parses cover {} sentences but the corpus has {}",
                heads.len(),
                corpus.len()
            )));
        }
    }
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let parse = model.net.parse_use(source, i, s)?;
            model.predict(s, context_for(context, i)?, parse)
        })
        .collect()
}

/// One sentence per line, whitespace-separated 0-based head indices.
pub fn parse_heads(text: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_whitespace()
                .map(|h| {
                    h.parse().map_err(|_| {
                        Error::Alignment(format!("parse file line {}: bad head {h:?}", n + 1))
                    })
                })
                .collect()
        })
        .collect()
}

pub fn write_heads(corpus: &[AnnotatedSentence]) -> String {
    let mut out = String::new();
    for s in corpus {
        let line: Vec<String> = s.heads.iter().map(|h| h.to_string()).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub test_ood: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SynthSizes {
    fn default() -> Self {
        SynthSizes {
            train: 2000,
            dev: 500,
            test: 500,
            test_ood: 500,
            dim: 64,
            seed: 1,
        }
    }
}

/// Split files written by [`gen_synth`], relative to its output directory.
pub const SPLITS: [&str; 4] = ["train", "dev", "test", "test-ood"];

/// The four splits with their generator seeds offset so they never share
/// a random stream.
pub fn synth_splits(sizes: &SynthSizes) -> Result<Vec<Vec<AnnotatedSentence>>> {
    let inside = SynthParams::in_domain();
    let shifted = SynthParams::shifted();
    let s = sizes.seed.wrapping_mul(4);
    Ok(vec![
        gen_synthetic(sizes.train, s, &inside)?,
        gen_synthetic(sizes.dev, s + 1, &inside)?,
        gen_synthetic(sizes.test, s + 2, &inside)?,
        gen_synthetic(sizes.test_ood, s + 3, &shifted)?,
    ])
}

/// Writes `{split}.conll`, `{split}.ctxl`, `{split}.heads` and
/// `embeddings.txt` into `dir`.
pub fn gen_synth(dir: impl AsRef<Path>, sizes: &SynthSizes) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let table = synthetic_static_table(sizes.dim, sizes.seed)?;
    table.write(dir.join("embeddings.txt"))?;
    for (name, corpus) in SPLITS.iter().zip(synth_splits(sizes)?) {
        write_conll_file(dir.join(format!("{name}.conll")), &corpus)?;
        synthetic_contextual_layers(&corpus, &table)?.write(dir.join(format!("{name}.ctxl")))?;
        std::fs::write(dir.join(format!("{name}.heads")), write_heads(&corpus))?;
    }
    Ok(())
}
