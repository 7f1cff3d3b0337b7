//! Binary checkpoints.
//!
//! Layout (all integers little-endian `u32`, strings length-prefixed UTF-8):
//!
//! ```text
//! magic    b"SPGCNCKP"
//! version  u32 = 1
//! dtype    string ("f32" | "f64")
//! config   string, key=value lines
//! confusion string, canonical confusion-set TSV
//! count    u32
//! count × { name string, rank u32, dims u32 × rank, data f64 × prod(dims) }
//! ```
//!
//! Tensor values are widened to `f64`, so saving and reloading at the same
//! precision is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::confusion::ConfusionSet;
use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, Vocab};
use crate::gcn::{CombineMode, GcnConfig};
use crate::matrix::Matrix;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"SPGCNCKP";
pub const VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}

fn config_text(cfg: &ModelConfig) -> String {
    let ex = &cfg.extractor;
    let vocab: Vec<String> = ex.vocab.chars().iter().map(|c| format!("{:x}", *c as u32)).collect();
    let mut s = format!(
        "vocab={}\ndim={}\nn_layers={}\nn_heads={}\nmax_len={}\nseed={}\n",
        vocab.join(" "),
        ex.dim,
        ex.n_layers,
        ex.n_heads,
        ex.max_len,
        ex.seed
    );
    match &cfg.head {
        None => s.push_str("head=none\n"),
        Some(h) => s.push_str(&format!("head={}\ndepth={}\nbeta={:?}\n", h.mode, h.depth, h.beta)),
    }
    s
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let kv: std::collections::HashMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("config lacks `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("config `{k}` is not an integer")))
    };
    let vocab = get("vocab")?
        .split_whitespace()
        .map(|h| {
            u32::from_str_radix(h, 16)
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| Error::Checkpoint(format!("bad vocabulary codepoint `{h}`")))
        })
        .collect::<Result<Vec<char>>>()?;
    let extractor = ExtractorConfig {
        vocab: Vocab::from_chars(vocab)?,
        dim: num("dim")?,
        n_layers: num("n_layers")?,
        n_heads: num("n_heads")?,
        max_len: num("max_len")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("config `seed` is not an integer".into()))?,
    };
    let head = match get("head")? {
        "none" => None,
        mode => Some(GcnConfig {
            mode: mode.parse::<CombineMode>()?,
            depth: num("depth")?,
            beta: get("beta")?
                .parse()
                .map_err(|_| Error::Checkpoint("config `beta` is not a number".into()))?,
        }),
    };
    Ok(ModelConfig { extractor, head })
}

pub fn save<T: Real, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_str(&mut w, T::NAME)?;
    write_str(&mut w, &config_text(model.config()))?;
    write_str(&mut w, &model.confusion().to_tsv())?;
    write_u32(&mut w, model.params().len() as u32)?;
    for (name, t) in model.params().iter() {
        write_str(&mut w, name)?;
        write_u32(&mut w, 2)?;
        write_u32(&mut w, t.rows() as u32)?;
        write_u32(&mut w, t.cols() as u32)?;
        for &x in t.as_slice() {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Raw {
    dtype: String,
    config: ModelConfig,
    confusion: ConfusionSet,
    tensors: Vec<(String, usize, usize, Vec<f64>)>,
}

fn read_raw<R: Read>(mut r: R) -> Result<Raw> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = read_str(&mut r)?;
    let config = parse_config(&read_str(&mut r)?)?;
    let confusion = ConfusionSet::parse(&read_str(&mut r)?)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let rank = read_u32(&mut r)? as usize;
        let dims: Vec<usize> = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::Checkpoint(format!("{name}: rank {rank} not supported"))),
        };
        let mut bytes = vec![0u8; rows * cols * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, rows, cols, data));
    }
    Ok(Raw {
        dtype,
        config,
        confusion,
        tensors,
    })
}

fn build<T: Real>(raw: Raw) -> Result<Model<T>> {
    let mut store = ParamStore::new();
    for (name, rows, cols, data) in raw.tensors {
        store.insert(
            name,
            Matrix::from_vec(rows, cols, data.into_iter().map(T::lit).collect()),
        );
    }
    Model::from_parts(raw.config, raw.confusion, store)
}

/// Loads at precision `T`; the stored precision must match.
pub fn load<T: Real, R: Read>(r: R) -> Result<Model<T>> {
    let raw = read_raw(r)?;
    if raw.dtype != T::NAME {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {}, requested {}",
            raw.dtype,
            T::NAME
        )));
    }
    build(raw)
}

/// A model at whichever precision the checkpoint was written with.
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

pub fn load_any<R: Read>(r: R) -> Result<AnyModel> {
    let raw = read_raw(r)?;
    match raw.dtype.as_str() {
        "f32" => Ok(AnyModel::F32(build(raw)?)),
        "f64" => Ok(AnyModel::F64(build(raw)?)),
        other => Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    }
}

pub fn save_file<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    save(model, std::io::BufWriter::new(f))
}

pub fn load_any_file(path: impl AsRef<Path>) -> Result<AnyModel> {
    let f = std::fs::File::open(path)?;
    load_any(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model<T: Real>(head: Option<GcnConfig>) -> Model<T> {
        let cs = ConfusionSet::parse("天\t1\t夫\n天\t2\t添\n").unwrap();
        let mut ex = ExtractorConfig::new(Vocab::with_reserved("天夫添和\t".chars()));
        ex.dim = 4;
        ex.n_heads = 2;
        ex.n_layers = 1;
        ex.seed = 99;
        Model::new(ModelConfig { extractor: ex, head }, cs).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for head in [
            None,
            Some(GcnConfig::default()),
            Some(GcnConfig {
                mode: CombineMode::Sum,
                depth: 1,
                beta: 0.1,
            }),
        ] {
            let m = model::<f32>(head);
            let mut buf = Vec::new();
            save(&m, &mut buf).unwrap();
            let back: Model<f32> = load(&buf[..]).unwrap();
            assert_eq!(back.params(), m.params());
            assert_eq!(back.config(), m.config());
            assert_eq!(back.confusion(), m.confusion());
            let mut again = Vec::new();
            save(&back, &mut again).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn precision_mismatch_and_corruption_are_errors() {
        let m = model::<f64>(Some(GcnConfig::default()));
        let mut buf = Vec::new();
        save(&m, &mut buf).unwrap();
        assert!(load::<f32, _>(&buf[..]).is_err());
        assert!(matches!(load_any(&buf[..]).unwrap(), AnyModel::F64(_)));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(load::<f64, _>(&bad[..]).is_err());
        assert!(load::<f64, _>(&buf[..buf.len() - 3]).is_err());
    }
}
