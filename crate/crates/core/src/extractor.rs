//! Toy contextual encoder standing in for a BERT backbone.
//!
//! The encoder owns the character embedding table `E` (which doubles as
//! the node features of the similarity graphs and as the fallback
//! classifier rows) and produces one contextual vector per input
//! character: embedding plus a sinusoidal position signal, followed by
//! post-norm transformer blocks (multi-head self-attention and a GELU
//! feed-forward, each wrapped in a residual connection and layer norm).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::real::Real;

/// Reserved tokens live in the Unicode private use area so that corrupted
/// text stays a plain character sequence.
pub const PAD: char = '\u{E000}';
pub const UNK: char = '\u{E001}';
pub const MASK: char = '\u{E002}';
pub const RESERVED: [char; 3] = [PAD, UNK, MASK];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;

const INIT_RANGE: f64 = 0.1;
const LN_EPS: f64 = 1e-5;
const FF_MULT: usize = 4;

/// Character vocabulary with the reserved tokens at ids 0, 1, 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    /// Prepends the reserved tokens and drops duplicates, keeping first
    /// occurrences.
    pub fn with_reserved(chars: impl IntoIterator<Item = char>) -> Self {
        let mut v = Vocab {
            chars: Vec::new(),
            index: HashMap::new(),
        };
        for c in RESERVED.into_iter().chain(chars) {
            if !v.index.contains_key(&c) {
                v.index.insert(c, v.chars.len());
                v.chars.push(c);
            }
        }
        v
    }

    /// Uses `chars` verbatim. They must be unique and start with PAD, UNK,
    /// MASK in that order.
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        if chars.len() < 3 || chars[..3] != RESERVED {
            return Err(Error::Config("vocabulary must start with PAD, UNK, MASK".into()));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {c:?}")));
            }
        }
        Ok(Vocab { chars, index })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn lookup(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Unknown characters map to UNK.
    pub fn id(&self, c: char) -> usize {
        self.lookup(c).unwrap_or(UNK_ID)
    }

    pub fn char_at(&self, id: usize) -> char {
        self.chars[id]
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }
}

/// Shape of the toy encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub vocab: Vocab,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ExtractorConfig {
    /// Desk-scale defaults: D=32, two layers, four heads, max_len 64.
    pub fn new(vocab: Vocab) -> Self {
        Self {
            vocab,
            dim: 32,
            n_layers: 2,
            n_heads: 4,
            max_len: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if self.n_heads == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if self.vocab.len() < 3 || self.vocab.chars()[..3] != RESERVED {
            return Err(Error::Config("vocabulary lacks reserved tokens".into()));
        }
        Ok(())
    }

    pub fn ff_dim(&self) -> usize {
        self.dim * FF_MULT
    }
}

/// Contextual vectors for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence<T> {
    pub vectors: Matrix<T>,
    pub token_ids: Vec<usize>,
}

struct LayerIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2: (ParamId, ParamId),
}

/// Name under which the embedding table is stored.
pub const EMBEDDING: &str = "embedding";

/// `true` for tensors owned by the extractor.
pub fn is_extractor_param(name: &str) -> bool {
    !name.starts_with("gcn.")
}

/// Registers freshly initialised extractor tensors in `store`.
pub fn init_params<T: Real, R: Rng>(cfg: &ExtractorConfig, rng: &mut R, store: &mut ParamStore<T>) {
    let (m, d, f) = (cfg.vocab.len(), cfg.dim, cfg.ff_dim());
    let mut uniform = |rows: usize, cols: usize| -> Matrix<T> {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| T::lit(rng.gen_range(-INIT_RANGE..=INIT_RANGE)))
                .collect(),
        )
    };
    let mut emb = uniform(m, d);
    emb.row_mut(PAD_ID).iter_mut().for_each(|x| *x = T::zero());
    store.insert(EMBEDDING, emb);
    store.insert("emb_ln.gain", Matrix::filled(1, d, T::one()));
    store.insert("emb_ln.bias", Matrix::zeros(1, d));
    for l in 0..cfg.n_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("layer{l}.attn.{w}"), uniform(d, d));
        }
        store.insert(format!("layer{l}.ln1.gain"), Matrix::filled(1, d, T::one()));
        store.insert(format!("layer{l}.ln1.bias"), Matrix::zeros(1, d));
        store.insert(format!("layer{l}.ff.w1"), uniform(d, f));
        store.insert(format!("layer{l}.ff.b1"), Matrix::zeros(1, f));
        store.insert(format!("layer{l}.ff.w2"), uniform(f, d));
        store.insert(format!("layer{l}.ff.b2"), Matrix::zeros(1, d));
        store.insert(format!("layer{l}.ln2.gain"), Matrix::filled(1, d, T::one()));
        store.insert(format!("layer{l}.ln2.bias"), Matrix::zeros(1, d));
    }
}

/// Fixed sinusoidal position signal, scaled to the embedding init range.
pub fn position_signal<T: Real>(len: usize, dim: usize) -> Matrix<T> {
    let mut p = Matrix::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            p[(pos, i)] = T::lit(INIT_RANGE * v);
        }
    }
    p
}

/// The encoder graph, resolved against a parameter store.
#[derive(Debug, Clone)]
pub struct Extractor {
    config: ExtractorConfig,
}

impl Extractor {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    /// Maps characters to ids, enforcing `max_len`.
    pub fn token_ids(&self, tokens: &[char]) -> Result<Vec<usize>> {
        if tokens.len() > self.config.max_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        Ok(tokens.iter().map(|&c| self.config.vocab.id(c)).collect())
    }

    fn layer_ids<T: Real>(&self, store: &ParamStore<T>, l: usize) -> LayerIds {
        let id = |s: &str| {
            store
                .id(&format!("layer{l}.{s}"))
                .unwrap_or_else(|| panic!("missing layer{l}.{s}"))
        };
        LayerIds {
            wq: id("attn.wq"),
            wk: id("attn.wk"),
            wv: id("attn.wv"),
            wo: id("attn.wo"),
            ln1: (id("ln1.gain"), id("ln1.bias")),
            w1: id("ff.w1"),
            b1: id("ff.b1"),
            w2: id("ff.w2"),
            b2: id("ff.b2"),
            ln2: (id("ln2.gain"), id("ln2.bias")),
        }
    }

    /// Records the encoder on `tape`; returns the n×D output.
    pub fn encode_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        vars: &Bindings,
        ids: &[usize],
    ) -> Var {
        let d = self.config.dim;
        let n = ids.len();
        let emb = vars.var(store.id(EMBEDDING).expect("embedding"));
        let gathered = tape.gather(emb, Arc::new(ids.to_vec()));
        let pos = tape.leaf(position_signal(n, d));
        let x = tape.add(gathered, pos);
        let mut x = self.norm(tape, store, vars, x, "emb_ln.gain", "emb_ln.bias");
        if n == 0 {
            return x;
        }
        let heads = self.config.n_heads;
        let dh = d / heads;
        let inv_sqrt = T::lit(1.0 / (dh as f64).sqrt());
        for l in 0..self.config.n_layers {
            let ids = self.layer_ids(store, l);
            let q = tape.matmul(x, vars.var(ids.wq));
            let k = tape.matmul(x, vars.var(ids.wk));
            let v = tape.matmul(x, vars.var(ids.wv));
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (s, e) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, s, e);
                let kh = tape.slice_cols(k, s, e);
                let vh = tape.slice_cols(v, s, e);
                let scores = tape.matmul_t(qh, kh);
                let scores = tape.scale(scores, inv_sqrt);
                let probs = tape.row_softmax(scores);
                outs.push(tape.matmul(probs, vh));
            }
            let cat = if heads == 1 { outs[0] } else { tape.hconcat(outs) };
            let attn = tape.matmul(cat, vars.var(ids.wo));
            let res = tape.add(x, attn);
            x = self.norm_ids(tape, vars, res, ids.ln1);

            let hmid = tape.matmul(x, vars.var(ids.w1));
            let hmid = tape.add_row(hmid, vars.var(ids.b1));
            let hmid = tape.gelu(hmid);
            let ff = tape.matmul(hmid, vars.var(ids.w2));
            let ff = tape.add_row(ff, vars.var(ids.b2));
            let res = tape.add(x, ff);
            x = self.norm_ids(tape, vars, res, ids.ln2);
        }
        x
    }

    fn norm<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        vars: &Bindings,
        x: Var,
        gain: &str,
        bias: &str,
    ) -> Var {
        let ids = (store.id(gain).expect("gain"), store.id(bias).expect("bias"));
        self.norm_ids(tape, vars, x, ids)
    }

    fn norm_ids<T: Real>(&self, tape: &mut Tape<T>, vars: &Bindings, x: Var, (g, b): (ParamId, ParamId)) -> Var {
        let y = tape.layer_norm(x, T::lit(LN_EPS));
        let y = tape.mul_row(y, vars.var(g));
        tape.add_row(y, vars.var(b))
    }

    /// Forward pass with frozen parameters.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, tokens: &[char]) -> Result<EncodedSequence<T>> {
        let ids = self.token_ids(tokens)?;
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, is_extractor_param);
        let out = self.encode_on_tape(&mut tape, store, &vars, &ids);
        let vectors = tape.value(out).clone();
        if !vectors.is_finite() {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(EncodedSequence {
            vectors,
            token_ids: ids,
        })
    }
}

/// Rows of the embedding table for each confusion-set node. Characters
/// missing from the vocabulary take the UNK row; the second value counts
/// them.
pub fn node_vocab_ids(vocab: &Vocab, node_chars: &[char]) -> (Vec<usize>, usize) {
    let mut unresolved = 0;
    let ids = node_chars
        .iter()
        .map(|&c| {
            vocab.lookup(c).unwrap_or_else(|| {
                unresolved += 1;
                UNK_ID
            })
        })
        .collect();
    (ids, unresolved)
}

/// Copies the embedding rows selected by `node_ids`.
pub fn gather_rows<T: Real>(table: &Matrix<T>, node_ids: &[usize]) -> Matrix<T> {
    let mut out = Matrix::zeros(node_ids.len(), table.cols());
    for (i, &id) in node_ids.iter().enumerate() {
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    out
}

/// Writes pre-encoded vectors: `n: u32, d: u32` then row-major `f32`, all
/// little-endian.
pub fn write_encoded<W: Write, T: Real>(mut w: W, vectors: &Matrix<T>) -> Result<()> {
    w.write_all(&(vectors.rows() as u32).to_le_bytes())?;
    w.write_all(&(vectors.cols() as u32).to_le_bytes())?;
    for &x in vectors.as_slice() {
        w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_encoded<R: Read>(mut r: R) -> Result<Matrix<f32>> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let d = u32::from_le_bytes(word) as usize;
    let mut bytes = vec![0u8; n * d * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Matrix::from_vec(n, d, data))
}
