//! Self-contained binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LISA" | version u32 | metadata length u64 | metadata JSON
//! tensor count u32
//! per tensor: name length u32 | name bytes | rank u32 | extents u64 × rank | values f64 × n
//! ```
//!
//! Besides every named parameter the tensor list carries the frozen
//! pretrained vectors and the transition table, so prediction needs nothing
//! but the checkpoint (and contextual layers on that path).

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{LabelSpace, TransitionTable};
use crate::embed::StaticTable;
use crate::error::{Error, Result};
use crate::model::{Model, Network, Vocabularies};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"LISA";
pub const VERSION: u32 = 1;

const TRANSITIONS: &str = "transitions.matrix";
const TRANSITIONS_START: &str = "transitions.start";
const TRANSITIONS_END: &str = "transitions.end";
const PRETRAINED: &str = "pretrained.vectors";

#[derive(Serialize, Deserialize)]
struct Metadata {
    run: RunConfig,
    step: u64,
    joint_labels: LabelSpace,
    role_labels: LabelSpace,
    words: Vec<String>,
    pretrained_words: Vec<String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| bad(format!("truncated file: {e}")))?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let len = read_u32(r)? as usize;
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)
        .map_err(|e| bad(format!("truncated file: {e}")))?;
    let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
    let rank = read_u32(r)? as usize;
    let shape = (0..rank)
        .map(|_| read_u64(r).map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| read_array::<8>(r).map(f64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
    Ok((name, t))
}

fn vector(t: &TransitionTable, which: &[f64]) -> Tensor {
    Tensor::new(vec![t.n], which.to_vec()).expect("transition vector shape")
}

pub fn write_checkpoint(w: &mut impl Write, model: &Model, run: &RunConfig) -> Result<()> {
    let vocab = &model.net.vocab;
    let table = model.net.table();
    let meta = Metadata {
        run: RunConfig {
            model: model.net.config.clone(),
            ..run.clone()
        },
        step: model.step,
        joint_labels: vocab.joint.clone(),
        role_labels: vocab.roles.clone(),
        words: vocab.words.clone(),
        pretrained_words: table
            .map(|t| t.entries().map(|(w, _)| w.to_string()).collect())
            .unwrap_or_default(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| bad(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;

    let tr = &vocab.transitions;
    let mut extra = vec![
        (
            TRANSITIONS.to_string(),
            Tensor::new(vec![tr.n, tr.n], tr.matrix.clone())?,
        ),
        (TRANSITIONS_START.to_string(), vector(tr, &tr.start)),
        (TRANSITIONS_END.to_string(), vector(tr, &tr.end)),
    ];
    if let Some(t) = table {
        let data: Vec<f64> = t.entries().flat_map(|(_, v)| v.iter().copied()).collect();
        extra.push((PRETRAINED.to_string(), Tensor::new(vec![t.len(), t.dim()], data)?));
    }
    w.write_all(&((model.store.len() + extra.len()) as u32).to_le_bytes())?;
    for p in model.store.iter() {
        write_tensor(w, &p.name, &p.value)?;
    }
    for (name, t) in &extra {
        write_tensor(w, name, t)?;
    }
    Ok(())
}

/// Rebuilds the network from the stored config and vocabularies, then
/// overwrites every parameter with its stored value.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(Model, RunConfig)> {
    if &read_array::<4>(r)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = read_u64(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|e| bad(format!("truncated metadata: {e}")))?;
    let meta: Metadata = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;

    let count = read_u32(r)? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = read_tensor(r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    };

    let m = take(TRANSITIONS)?;
    let n = meta.role_labels.len();
    if m.shape() != [n, n] {
        return Err(bad("transition table does not match the role space"));
    }
    let transitions = TransitionTable {
        n,
        matrix: m.into_data(),
        start: take(TRANSITIONS_START)?.into_data(),
        end: take(TRANSITIONS_END)?.into_data(),
    };
    let table = if meta.pretrained_words.is_empty() {
        None
    } else {
        let v = take(PRETRAINED)?;
        if v.rows() != meta.pretrained_words.len() {
            return Err(bad("pretrained vectors do not match the word list"));
        }
        let entries = meta
            .pretrained_words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), v.row(i).to_vec()))
            .collect();
        Some(StaticTable::new(v.cols(), entries)?)
    };
    let vocab = Vocabularies {
        joint: meta.joint_labels,
        roles: meta.role_labels,
        words: meta.words,
        transitions,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = Network::new(meta.run.model.clone(), vocab, table, &mut store, &mut rng)?;
    for p in store.iter_mut() {
        let t = take(&p.name)?;
        if t.shape() != p.value.shape() {
            return Err(bad(format!(
                "parameter {} has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    if let Some(name) = tensors.keys().min() {
        return Err(bad(format!("unexpected tensor {name}")));
    }
    Ok((
        Model {
            net,
            store,
            step: meta.step,
        },
        meta.run,
    ))
}

pub fn save(path: impl AsRef<Path>, model: &Model, run: &RunConfig) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, run)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, RunConfig)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
