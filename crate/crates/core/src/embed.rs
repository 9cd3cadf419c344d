//! Token input vectors: frozen pretrained table plus learned residual and a
//! width-3 convolution stack, or a learned scalar mix over frozen
//! precomputed contextual layers. Both add sinusoidal positions.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::synth::{vocabulary, WordClass};
use crate::corpus::AnnotatedSentence;
use crate::nn::Conv3;
use crate::numerics::{NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("no contextual layers for sentence {0:?}")]
    MissingSentence(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

/// Frozen pretrained word vectors. Words outside the table map to `unk`,
/// the mean of all vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticTable {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
    unk: Vec<f64>,
}

impl StaticTable {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if dim == 0 || entries.is_empty() {
            return Err(EmbedError::Config("embedding table must be non-empty".into()));
        }
        let mut words = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (w, v) in entries {
            if v.len() != dim {
                return Err(EmbedError::Format(format!(
                    "vector for {w:?} has {} values, expected {dim}",
                    v.len()
                )));
            }
            if index.insert(w.clone(), words.len()).is_some() {
                return Err(EmbedError::Format(format!("duplicate word {w:?}")));
            }
            words.push(w);
            vectors.extend(v);
        }
        let n = words.len() as f64;
        let unk = (0..dim)
            .map(|k| (0..words.len()).map(|i| vectors[i * dim + k]).sum::<f64>() / n)
            .collect();
        Ok(StaticTable {
            dim,
            words,
            index,
            vectors,
            unk,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn vector(&self, word: &str) -> &[f64] {
        match self.index.get(word) {
            Some(&i) => &self.vectors[i * self.dim..(i + 1) * self.dim],
            None => &self.unk,
        }
    }

    pub fn unk(&self) -> &[f64] {
        &self.unk
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), &self.vectors[i * self.dim..(i + 1) * self.dim]))
    }

    /// `T × dim` matrix of (frozen) pretrained vectors for `tokens`.
    pub fn lookup(&self, tokens: &[String]) -> Tensor {
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for t in tokens {
            data.extend_from_slice(self.vector(t));
        }
        Tensor::new(vec![tokens.len(), self.dim], data).expect("lookup shape")
    }

    /// Text format: one word followed by its values per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| EmbedError::Format(format!("line {}: {e}", i + 1)))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(EmbedError::Format(format!(
                        "line {}: {} values, expected {d}",
                        i + 1,
                        values.len()
                    )))
                }
                _ => {}
            }
            entries.push((word.to_string(), values));
        }
        StaticTable::new(dim.unwrap_or(0), entries)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        StaticTable::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (w, v) in self.entries() {
            out.push_str(w);
            for x in v {
                out.push(' ');
                out.push_str(&format!("{x:?}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Pretrained-style vectors for the synthetic vocabulary: one centroid per
/// word class, an offset along a shared axis for the noun attachment
/// property, and per-word noise.
pub fn synthetic_static_table(dim: usize, seed: u64) -> Result<StaticTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        // sum of uniforms is close enough to normal for this purpose
        (0..dim)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>() * 0.866)
            .collect()
    };
    let mut centroids: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let axis = gauss(&mut rng);
    let vocab = vocabulary();
    let key = |c: &WordClass| -> String {
        match c {
            WordClass::Noun { .. } => "NN".into(),
            WordClass::Preposition(p) => format!("IN-{}", p.role()),
            other => other.pos().into(),
        }
    };
    for (_, class) in &vocab {
        let k = key(class);
        if !centroids.contains_key(&k) {
            let c = gauss(&mut rng);
            centroids.insert(k, c);
        }
    }
    let mut entries = Vec::with_capacity(vocab.len());
    for (word, class) in vocab {
        let noise = gauss(&mut rng);
        let centroid = &centroids[&key(&class)];
        let sign = match class {
            WordClass::Noun { attaches: true } => 0.6,
            WordClass::Noun { attaches: false } => -0.6,
            _ => 0.0,
        };
        let v = (0..dim)
            .map(|k| 0.7 * centroid[k] + sign * axis[k] + 0.35 * noise[k])
            .collect();
        entries.push((word, v));
    }
    StaticTable::new(dim, entries)
}

/// Frozen per-sentence layer outputs, each `[layers, T, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualLayers {
    layers: usize,
    dim: usize,
    sentences: BTreeMap<String, Tensor>,
}

const CTXL_MAGIC: &[u8; 4] = b"CTXL";
const CTXL_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl ContextualLayers {
    pub fn new(layers: usize, dim: usize) -> Result<Self> {
        if layers == 0 || dim == 0 {
            return Err(EmbedError::Config(
                "contextual layers need at least one layer and dimension".into(),
            ));
        }
        Ok(ContextualLayers {
            layers,
            dim,
            sentences: BTreeMap::new(),
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, tensor: Tensor) -> Result<()> {
        match tensor.shape() {
            [l, _, d] if *l == self.layers && *d == self.dim => {}
            other => {
                return Err(EmbedError::Config(format!(
                    "layer tensor {other:?} does not match [{}, T, {}]",
                    self.layers, self.dim
                )))
            }
        }
        self.sentences.insert(id.into(), tensor);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.sentences
            .get(id)
            .ok_or_else(|| EmbedError::MissingSentence(id.to_string()))
    }

    /// Binary layout, little-endian: `CTXL`, version, layer count, dim, then
    /// per sentence an id (u32 length + UTF-8), T, and `layers·T·dim` f32s.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CTXL_MAGIC)?;
        for v in [CTXL_VERSION, self.layers as u32, self.dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for (id, t) in &self.sentences {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            w.write_all(&(t.shape()[1] as u32).to_le_bytes())?;
            for &x in t.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CTXL_MAGIC {
            return Err(EmbedError::Format("missing CTXL magic".into()));
        }
        let version = read_u32(r)?;
        if version != CTXL_VERSION {
            return Err(EmbedError::Format(format!("unsupported CTXL version {version}")));
        }
        let layers = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let mut out = ContextualLayers::new(layers, dim)?;
        while !r.fill_buf()?.is_empty() {
            let n = read_u32(r)? as usize;
            let mut id = vec![0u8; n];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id)
                .map_err(|_| EmbedError::Format("sentence id is not UTF-8".into()))?;
            let t = read_u32(r)? as usize;
            if t == 0 {
                return Err(EmbedError::Format(format!("sentence {id:?} has no tokens")));
            }
            let mut buf = vec![0u8; layers * t * dim * 4];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            out.insert(id, Tensor::new(vec![layers, t, dim], data)?)?;
        }
        Ok(out)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        ContextualLayers::read_from(&mut BufReader::new(f))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Stand-in for a pretrained contextual encoder over a corpus: layer 0 is
/// the word vector, layer 1 mixes in the neighbours, layer 2 adds the
/// sentence mean. Sentence ids are corpus positions.
pub fn synthetic_contextual_layers(
    corpus: &[AnnotatedSentence],
    table: &StaticTable,
) -> Result<ContextualLayers> {
    let dim = table.dim();
    let mut out = ContextualLayers::new(3, dim)?;
    for (i, s) in corpus.iter().enumerate() {
        let t = s.len();
        let base = table.lookup(&s.tokens);
        let mut data = vec![0.0; 3 * t * dim];
        let mean: Vec<f64> = (0..dim)
            .map(|k| (0..t).map(|r| base.get(r, k)).sum::<f64>() / t as f64)
            .collect();
        for r in 0..t {
            for k in 0..dim {
                let own = base.get(r, k);
                let prev = if r > 0 { base.get(r - 1, k) } else { 0.0 };
                let next = if r + 1 < t { base.get(r + 1, k) } else { 0.0 };
                data[r * dim + k] = own;
                data[(t + r) * dim + k] = 0.6 * own + 0.2 * (prev + next);
                data[(2 * t + r) * dim + k] = 0.5 * own + 0.25 * (prev + next) + 0.25 * mean[k];
            }
        }
        out.insert(i.to_string(), Tensor::new(vec![3, t, dim], data)?)?;
    }
    Ok(out)
}

/// Sinusoidal positions: `sin(pos / 10000^(2i/d))` at even columns and the
/// matching cosine at odd ones.
pub fn positional_encoding(len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(EmbedError::Config(format!(
            "positional encoding needs an even model dimension, got {d_model}"
        )));
    }
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![len, d_model], data)?)
}

/// Training-vocabulary residual rows and the convolution stack.
#[derive(Clone, Debug)]
pub struct StaticEmbedder {
    pub residual: ParamId,
    vocab: HashMap<String, usize>,
    pub convs: Vec<Conv3>,
}

impl StaticEmbedder {
    /// Residual rows start at zero, so initial inputs equal the pretrained vectors.
    pub fn new(
        store: &mut ParamStore,
        train_vocab: &[String],
        table: &StaticTable,
        d_model: usize,
        conv_layers: usize,
    ) -> Result<Self> {
        if table.dim() != d_model {
            return Err(EmbedError::Config(format!(
                "embedding dimension {} does not match model dimension {d_model}",
                table.dim()
            )));
        }
        let residual = store.add(
            "embed.residual",
            Tensor::zeros(&[train_vocab.len().max(1), d_model]),
        )?;
        let vocab = train_vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let convs = (0..conv_layers)
            .map(|k| Conv3::new(store, &format!("embed.conv{k}"), d_model))
            .collect::<std::result::Result<_, _>>()?;
        Ok(StaticEmbedder {
            residual,
            vocab,
            convs,
        })
    }

    pub fn vocab_index(&self, word: &str) -> Option<usize> {
        self.vocab.get(word).copied()
    }

    /// `pretrained + residual` per token, before the convolutions.
    pub fn lookup(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        table: &StaticTable,
        tokens: &[String],
    ) -> Result<Var> {
        let pre = tape.constant(table.lookup(tokens));
        let rows: Vec<Option<usize>> = tokens.iter().map(|w| self.vocab_index(w)).collect();
        let res = tape.param_rows(store, self.residual, &rows)?;
        Ok(tape.add(pre, res)?)
    }

    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        table: &StaticTable,
        sentence: &AnnotatedSentence,
    ) -> Result<Var> {
        let mut x = self.lookup(tape, store, table, &sentence.tokens)?;
        for conv in &self.convs {
            x = conv.forward(tape, store, x)?;
        }
        Ok(x)
    }
}

/// Learned softmax-normalized layer weights and a global scale.
#[derive(Clone, Copy, Debug)]
pub struct ScalarMix {
    pub weights: ParamId,
    pub gamma: ParamId,
    pub layers: usize,
}

impl ScalarMix {
    pub fn new(store: &mut ParamStore, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(EmbedError::Config("scalar mix needs at least one layer".into()));
        }
        Ok(ScalarMix {
            weights: store.add("embed.mix.weights", Tensor::zeros(&[1, layers]))?,
            gamma: store.add("embed.mix.gamma", Tensor::scalar(1.0))?,
            layers,
        })
    }

    pub fn coefficients(&self, store: &ParamStore) -> Vec<f64> {
        crate::numerics::softmax_rows(store.value(self.weights)).into_data()
    }

    /// `gamma · Σ_l softmax(w)_l · h_l` for one sentence's `[L, T, d]` layers.
    pub fn mix(&self, tape: &mut Tape, store: &ParamStore, layers: &Tensor) -> Result<Var> {
        let [l, t, d] = layers.shape() else {
            return Err(EmbedError::Config(format!(
                "contextual layers must be [L, T, d], got {:?}",
                layers.shape()
            )));
        };
        let (l, t, d) = (*l, *t, *d);
        if l != self.layers {
            return Err(EmbedError::Config(format!(
                "{l} contextual layers but the mix has {}",
                self.layers
            )));
        }
        let w = tape.param(store, self.weights);
        let coef = tape.softmax_rows(w);
        let h = tape.constant(layers.reshape(&[l, t * d])?);
        let mixed = tape.matmul(coef, h)?;
        let mixed = tape.reshape(mixed, &[t, d])?;
        let gamma = tape.param(store, self.gamma);
        Ok(tape.mul_scalar(mixed, gamma)?)
    }
}
