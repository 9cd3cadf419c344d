//! The full tagger: input path, encoder, joint POS/predicate classifier and
//! role scorer, with training loss and constrained prediction.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_joint_pos_pred_space, build_role_space, estimate_transitions, joint_tag,
    AnnotatedSentence, LabelSpace, TransitionTable,
};
use crate::decode::{viterbi_decode, DecodeProblem};
use crate::embed::{positional_encoding, ScalarMix, StaticEmbedder, StaticTable};
use crate::encoder::{
    extract_parse, parse_loss, Encoder, EncoderConfig, EncoderOutput, ParseSource, ParseUse,
};
use crate::error::{Error, Result};
use crate::heads::{
    decode_pos_pred, srl_loss, token_nll, total_loss, LossBundle, LossWeights, PosPredHead,
    SrlScorer,
};
use crate::numerics::{log_softmax_rows, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Syntax head supervised and fed the gold parse during training.
    Lisa,
    /// Same shapes, no parse supervision and no injection.
    Sa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Static,
    Contextual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embedding: EmbeddingKind,
    pub encoder: EncoderConfig,
    pub d_r: usize,
    /// Convolution layers on the static path.
    pub conv_layers: usize,
    /// Layer count expected from contextual inputs.
    pub context_layers: usize,
    pub positional: bool,
    /// Feed the argmax of the syntax head downstream instead of its soft
    /// distribution when predicting with the model's own parse.
    pub harden_parse: bool,
    pub loss_weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Lisa,
            embedding: EmbeddingKind::Static,
            encoder: EncoderConfig::default(),
            d_r: 32,
            conv_layers: 2,
            context_layers: 3,
            positional: true,
            harden_parse: false,
            loss_weights: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.d_r == 0 {
            return Err(Error::Config("role projection size must be positive".into()));
        }
        if self.embedding == EmbeddingKind::Contextual && self.context_layers == 0 {
            return Err(Error::Config("contextual input needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Label spaces, vocabulary and transitions fixed at training time.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabularies {
    pub joint: LabelSpace,
    pub roles: LabelSpace,
    pub words: Vec<String>,
    pub transitions: TransitionTable,
}

impl Vocabularies {
    pub fn from_corpus(train: &[AnnotatedSentence]) -> Result<Self> {
        let words: BTreeSet<&String> = train.iter().flat_map(|s| &s.tokens).collect();
        let roles = build_role_space(train);
        let transitions = estimate_transitions(train, &roles)?;
        Ok(Vocabularies {
            joint: build_joint_pos_pred_space(train),
            roles,
            words: words.into_iter().cloned().collect(),
            transitions,
        })
    }
}

#[derive(Clone, Debug)]
pub enum InputPath {
    Static {
        embedder: StaticEmbedder,
        table: StaticTable,
    },
    Contextual {
        mix: ScalarMix,
    },
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub vocab: Vocabularies,
    pub input: InputPath,
    pub encoder: Encoder,
    pub pos_head: PosPredHead,
    pub srl: SrlScorer,
}

/// Tape handles for one sentence's forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub input: Var,
    pub encoder: EncoderOutput,
    pub pos_logits: Var,
}

impl Network {
    /// Registers every parameter in `store` in a fixed order; the same
    /// config and vocabularies always produce the same names and shapes.
    pub fn new(
        config: ModelConfig,
        vocab: Vocabularies,
        table: Option<StaticTable>,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.d_model;
        let input = match config.embedding {
            EmbeddingKind::Static => {
                let table = table.ok_or_else(|| {
                    Error::Config("static input needs a pretrained embedding table".into())
                })?;
                let embedder =
                    StaticEmbedder::new(store, &vocab.words, &table, d, config.conv_layers)?;
                InputPath::Static { embedder, table }
            }
            EmbeddingKind::Contextual => InputPath::Contextual {
                mix: ScalarMix::new(store, config.context_layers)?,
            },
        };
        let encoder = Encoder::new(store, rng, config.encoder.clone())?;
        let pos_head = PosPredHead::new(store, rng, d, vocab.joint.len())?;
        let srl = SrlScorer::new(store, rng, d, config.d_r, vocab.roles.len())?;
        Ok(Network {
            config,
            vocab,
            input,
            encoder,
            pos_head,
            srl,
        })
    }

    pub fn table(&self) -> Option<&StaticTable> {
        match &self.input {
            InputPath::Static { table, .. } => Some(table),
            InputPath::Contextual { .. } => None,
        }
    }

    /// Encoder input for one sentence; `context` is its `[L, T, d]` layer
    /// stack on the contextual path.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentence: &AnnotatedSentence,
        context: Option<&crate::numerics::Tensor>,
    ) -> Result<Var> {
        let d = self.config.encoder.d_model;
        let x = match &self.input {
            InputPath::Static { embedder, table } => embedder.embed(tape, store, table, sentence)?,
            InputPath::Contextual { mix } => {
                let layers = context.ok_or_else(|| {
                    Error::Alignment("contextual input requires precomputed layers".into())
                })?;
                if layers.shape().get(1) != Some(&sentence.len())
                    || layers.shape().get(2) != Some(&d)
                {
                    return Err(Error::Alignment(format!(
                        "contextual layers {:?} do not fit a {}-token sentence at dimension {d}",
                        layers.shape(),
                        sentence.len()
                    )));
                }
                mix.mix(tape, store, layers)?
            }
        };
        if !self.config.positional {
            return Ok(x);
        }
        let pe = tape.constant(positional_encoding(sentence.len(), d)?);
        Ok(tape.add(x, pe)?)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentence: &AnnotatedSentence,
        context: Option<&crate::numerics::Tensor>,
        parse: ParseUse<'_>,
    ) -> Result<Forward> {
        let input = self.embed(tape, store, sentence, context)?;
        let encoder = self.encoder.encode(tape, store, input, parse)?;
        let pos_in = encoder.layer(self.config.encoder.pos_layer);
        let pos_logits = self.pos_head.logits(tape, store, pos_in)?;
        Ok(Forward {
            input,
            encoder,
            pos_logits,
        })
    }

    /// Training objective on gold predicates. LISA injects the gold parse
    /// downstream and supervises the syntax head; SA does neither.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentence: &AnnotatedSentence,
        context: Option<&crate::numerics::Tensor>,
    ) -> Result<(Var, LossBundle)> {
        let parse = match self.config.variant {
            Variant::Lisa => ParseUse::Inject(&sentence.heads),
            Variant::Sa => ParseUse::Predicted,
        };
        let fwd = self.forward(tape, store, sentence, context, parse)?;

        let pos_gold = (0..sentence.len())
            .map(|t| {
                let tag = joint_tag(sentence, t);
                self.vocab.joint.get(&tag).ok_or_else(|| {
                    Error::Compatibility(format!("tag {tag:?} is not in the joint label space"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pos = token_nll(tape, fwd.pos_logits, &pos_gold)?;

        let predicates: Vec<usize> = sentence.frames.keys().copied().collect();
        let role_gold = sentence
            .frames
            .values()
            .map(|tags| {
                tags.iter()
                    .map(|t| {
                        self.vocab.roles.get(t).ok_or_else(|| {
                            Error::Compatibility(format!("role {t:?} is not in the role space"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = self.srl.scores(tape, store, fwd.encoder.last(), &predicates)?;
        let srl = srl_loss(tape, &scores, &role_gold)?;

        let parse = match self.config.variant {
            Variant::Lisa => Some(parse_loss(tape, fwd.encoder.parse_logits, &sentence.heads)?),
            Variant::Sa => None,
        };
        Ok(total_loss(tape, srl, parse, pos, &self.config.loss_weights)?)
    }

    /// How the syntax head is treated for sentence `index` of a corpus.
    pub fn parse_use<'a>(
        &self,
        source: &'a ParseSource,
        index: usize,
        sentence: &'a AnnotatedSentence,
    ) -> Result<ParseUse<'a>> {
        match (self.config.variant, source) {
            (_, ParseSource::SelfPredicted) if self.config.harden_parse => Ok(ParseUse::Hardened),
            (_, ParseSource::SelfPredicted) => Ok(ParseUse::Predicted),
            (Variant::Sa, _) => Err(Error::Config(
                "the syntax-agnostic model has no parse head to overwrite".into(),
            )),
            (Variant::Lisa, ParseSource::Gold) => Ok(ParseUse::Inject(&sentence.heads)),
            (Variant::Lisa, ParseSource::External(all)) => {
                let heads = all.get(index).ok_or_else(|| {
                    Error::Alignment(format!(
                        "external parses cover {} sentences, sentence {index} has none",
                        all.len()
                    ))
                })?;
                if heads.len() != sentence.len() {
                    return Err(Error::Alignment(format!(
                        "external parse for sentence {index} has {} heads for {} tokens",
                        heads.len(),
                        sentence.len()
                    )));
                }
                Ok(ParseUse::Inject(heads))
            }
        }
    }

    /// Predicted POS tags, parse, predicates and Viterbi-decoded frames.
    pub fn predict(
        &self,
        store: &ParamStore,
        sentence: &AnnotatedSentence,
        context: Option<&crate::numerics::Tensor>,
        parse: ParseUse<'_>,
    ) -> Result<AnnotatedSentence> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, store, sentence, context, parse)?;
        let (pos, predicates) = decode_pos_pred(tape.value(fwd.pos_logits), &self.vocab.joint);
        let heads = extract_parse(&fwd.encoder.consumed_parse);
        let chosen: Vec<usize> = (0..sentence.len()).filter(|&t| predicates[t]).collect();
        let scores = self.srl.scores(&mut tape, store, fwd.encoder.last(), &chosen)?;
        let mut frames = std::collections::BTreeMap::new();
        for (&p, s) in chosen.iter().zip(scores) {
            let emissions = log_softmax_rows(tape.value(s));
            let tags = viterbi_decode(&DecodeProblem {
                emissions: &emissions,
                transitions: &self.vocab.transitions,
            })?;
            frames.insert(
                p,
                tags.into_iter()
                    .map(|k| self.vocab.roles.label(k).to_string())
                    .collect(),
            );
        }
        Ok(AnnotatedSentence {
            tokens: sentence.tokens.clone(),
            pos,
            heads,
            predicates,
            frames,
        })
    }
}

/// A network together with its parameter values and optimizer step count.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
    pub step: u64,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        vocab: Vocabularies,
        table: Option<StaticTable>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::new(config, vocab, table, &mut store, rng)?;
        Ok(Model {
            net,
            store,
            step: 0,
        })
    }

    pub fn predict(
        &self,
        sentence: &AnnotatedSentence,
        context: Option<&crate::numerics::Tensor>,
        parse: ParseUse<'_>,
    ) -> Result<AnnotatedSentence> {
        self.net.predict(&self.store, sentence, context, parse)
    }
}
