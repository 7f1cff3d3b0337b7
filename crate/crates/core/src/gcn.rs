//! Graph convolution stack over the pronunciation and shape graphs, the
//! per-character combination of the two graphs, the accumulated layer
//! output, and the hybrid classifier built from it.
//!
//! Each layer computes `F_k = Â_k · H · W_k` for both graphs (no
//! activation), combines them into `C`, and then accumulates
//! `H_next = C + H_0 + H_1 + ... + H_l`. The final `H_L` supplies the
//! classifier rows for every vocabulary character that is in the confusion
//! set; every other row falls back to the extractor embedding.
//!
//! Two implementations live here: plain matrix functions (used for traces
//! and property tests) and a tape version for training. They are tested
//! against each other.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::matrix::{dot, Csr, Matrix};
use crate::params::{Bindings, ParamStore};
use crate::real::Real;

/// How the two convolved graph outputs are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    Attention,
    Mean,
    Sum,
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombineMode::Attention => "attention",
            CombineMode::Mean => "mean",
            CombineMode::Sum => "sum",
        })
    }
}

impl FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(CombineMode::Attention),
            "mean" => Ok(CombineMode::Mean),
            "sum" => Ok(CombineMode::Sum),
            other => Err(Error::Config(format!("unknown combine mode `{other}`"))),
        }
    }
}

/// Hyper-parameters of the head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcnConfig {
    pub depth: usize,
    pub beta: f64,
    pub mode: CombineMode,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            beta: 3.0,
            mode: CombineMode::Attention,
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

pub fn pron_weight_name(layer: usize) -> String {
    format!("gcn.{layer}.pron")
}

pub fn shape_weight_name(layer: usize) -> String {
    format!("gcn.{layer}.shape")
}

pub const ATTENTION_NAME: &str = "gcn.attention";

/// Weights of the head, detached from any store.
#[derive(Debug, Clone, PartialEq)]
pub struct SpellGcnParams<T> {
    pub pron: Vec<Matrix<T>>,
    pub shape: Vec<Matrix<T>>,
    /// Shared across layers; present iff the mode is attention.
    pub attention: Option<Vec<T>>,
    pub beta: T,
    pub mode: CombineMode,
}

impl<T: Real> SpellGcnParams<T> {
    /// Identity plus uniform(-0.01, 0.01) noise for the layer weights,
    /// uniform(-0.1, 0.1) for the attention vector.
    pub fn init<R: Rng>(cfg: &GcnConfig, dim: usize, rng: &mut R) -> Self {
        let mut near_identity = || {
            let mut m = Matrix::<T>::identity(dim);
            for x in m.as_mut_slice() {
                *x += T::lit(rng.gen_range(-0.01..0.01));
            }
            m
        };
        let mut pron = Vec::with_capacity(cfg.depth);
        let mut shape = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            pron.push(near_identity());
            shape.push(near_identity());
        }
        let attention =
            (cfg.mode == CombineMode::Attention).then(|| (0..dim).map(|_| T::lit(rng.gen_range(-0.1..0.1))).collect());
        Self {
            pron,
            shape,
            attention,
            beta: T::lit(cfg.beta),
            mode: cfg.mode,
        }
    }

    pub fn depth(&self) -> usize {
        self.pron.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pron.is_empty() || self.pron.len() != self.shape.len() {
            return Err(Error::Config(
                "need the same positive number of layers per graph".into(),
            ));
        }
        if !(self.beta > T::zero()) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if self.attention.is_some() != (self.mode == CombineMode::Attention) {
            return Err(Error::Config("attention vector present iff mode is attention".into()));
        }
        Ok(())
    }

    pub fn write_to(&self, store: &mut ParamStore<T>) {
        for (l, (p, s)) in self.pron.iter().zip(&self.shape).enumerate() {
            store.insert(pron_weight_name(l), p.clone());
            store.insert(shape_weight_name(l), s.clone());
        }
        if let Some(a) = &self.attention {
            store.insert(ATTENTION_NAME, Matrix::from_vec(1, a.len(), a.clone()));
        }
    }

    pub fn read_from(store: &ParamStore<T>, cfg: &GcnConfig) -> Result<Self> {
        let get = |name: &str| {
            store
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let mut pron = Vec::new();
        let mut shape = Vec::new();
        for l in 0..cfg.depth {
            pron.push(get(&pron_weight_name(l))?);
            shape.push(get(&shape_weight_name(l))?);
        }
        let attention = match cfg.mode {
            CombineMode::Attention => Some(get(ATTENTION_NAME)?.into_vec()),
            _ => None,
        };
        Ok(Self {
            pron,
            shape,
            attention,
            beta: T::lit(cfg.beta),
            mode: cfg.mode,
        })
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnTrace<T> {
    /// `H_0 ..= H_L`.
    pub h: Vec<Matrix<T>>,
    /// `C_0 .. C_{L-1}`.
    pub c: Vec<Matrix<T>>,
    /// Per-layer N×2 graph weights (pronunciation, shape); empty unless
    /// the mode is attention.
    pub alpha: Vec<Matrix<T>>,
}

impl<T: Real> GcnTrace<T> {
    pub fn output(&self) -> &Matrix<T> {
        self.h.last().expect("trace has at least H0")
    }

    /// Recomputes every accumulation in canonical order and compares
    /// bit-for-bit.
    pub fn accumulation_holds(&self) -> bool {
        self.c
            .iter()
            .enumerate()
            .all(|(l, c)| accumulate(c, &self.h[..=l]) == self.h[l + 1])
    }
}

/// `C + H_0 + ... + H_l`, summed left to right.
pub fn accumulate<T: Real>(c: &Matrix<T>, previous: &[Matrix<T>]) -> Matrix<T> {
    let mut acc = c.clone();
    for h in previous {
        acc.add_assign(h);
    }
    acc
}

/// `Â · H · W`, no activation.
pub fn graph_conv<T: Real>(norm_adj: &Csr<T>, h: &Matrix<T>, w: &Matrix<T>) -> Result<Matrix<T>> {
    if norm_adj.cols() != h.rows() || norm_adj.rows() != norm_adj.cols() {
        return Err(shape_err(
            "graph_conv",
            format!(
                "adjacency {}x{} vs features {:?}",
                norm_adj.rows(),
                norm_adj.cols(),
                h.shape()
            ),
        ));
    }
    if h.cols() != w.rows() || w.rows() != w.cols() {
        return Err(shape_err(
            "graph_conv",
            format!("features {:?} vs weight {:?}", h.shape(), w.shape()),
        ));
    }
    Ok(norm_adj.matmul_dense(h).matmul(w))
}

/// Softmax over the two graphs of `(w_a · F_k[i]) / β`, then the weighted
/// sum of rows. Returns `(C, alpha)` with alpha columns (pron, shape).
pub fn attentive_combine<T: Real>(
    f_pron: &Matrix<T>,
    f_shape: &Matrix<T>,
    w_a: &[T],
    beta: T,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if f_pron.shape() != f_shape.shape() || w_a.len() != f_pron.cols() {
        return Err(shape_err(
            "attentive_combine",
            format!("{:?}, {:?}, w_a {}", f_pron.shape(), f_shape.shape(), w_a.len()),
        ));
    }
    if !(beta > T::zero()) {
        return Err(Error::Config("beta must be positive".into()));
    }
    if !f_pron.is_finite() || !f_shape.is_finite() || !w_a.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("attentive_combine input".into()));
    }
    let n = f_pron.rows();
    let mut c = Matrix::zeros(n, f_pron.cols());
    let mut alpha = Matrix::zeros(n, 2);
    for i in 0..n {
        let mut s = [dot(w_a, f_pron.row(i)) / beta, dot(w_a, f_shape.row(i)) / beta];
        softmax_in_place(&mut s);
        alpha[(i, 0)] = s[0];
        alpha[(i, 1)] = s[1];
        for (o, (&p, &q)) in c.row_mut(i).iter_mut().zip(f_pron.row(i).iter().zip(f_shape.row(i))) {
            *o = s[0] * p + s[1] * q;
        }
    }
    Ok((c, alpha))
}

/// Parameter-free alternatives to attention.
pub fn pooled_combine<T: Real>(f_pron: &Matrix<T>, f_shape: &Matrix<T>, mode: CombineMode) -> Result<Matrix<T>> {
    let sum = f_pron.try_add(f_shape)?;
    match mode {
        CombineMode::Sum => Ok(sum),
        CombineMode::Mean => Ok(sum.scale(T::lit(0.5))),
        CombineMode::Attention => Err(Error::Config("pooled_combine takes mean or sum".into())),
    }
}

/// Runs the full stack from the initial node features.
pub fn forward<T: Real>(
    params: &SpellGcnParams<T>,
    norm_adj_pron: &Csr<T>,
    norm_adj_shape: &Csr<T>,
    h0: &Matrix<T>,
) -> Result<GcnTrace<T>> {
    params.validate()?;
    let mut trace = GcnTrace {
        h: vec![h0.clone()],
        c: Vec::with_capacity(params.depth()),
        alpha: Vec::new(),
    };
    for l in 0..params.depth() {
        let h = &trace.h[l];
        let fp = graph_conv(norm_adj_pron, h, &params.pron[l])?;
        let fs = graph_conv(norm_adj_shape, h, &params.shape[l])?;
        let c = match (&params.attention, params.mode) {
            (Some(w_a), CombineMode::Attention) => {
                let (c, alpha) = attentive_combine(&fp, &fs, w_a, params.beta)?;
                trace.alpha.push(alpha);
                c
            }
            (_, mode) => pooled_combine(&fp, &fs, mode)?,
        };
        let next = accumulate(&c, &trace.h);
        trace.c.push(c);
        trace.h.push(next);
    }
    Ok(trace)
}

/// Row `i` is `H_L[u_i]` when vocabulary entry `i` is a confusion-set
/// node, else `E[i]`.
pub fn assemble_classifier<T: Real>(
    h_l: &Matrix<T>,
    embedding: &Matrix<T>,
    index_map: &[Option<usize>],
) -> Result<Matrix<T>> {
    if index_map.len() != embedding.rows() || (h_l.rows() > 0 && h_l.cols() != embedding.cols()) {
        return Err(shape_err(
            "assemble_classifier",
            format!(
                "H_L {:?}, E {:?}, map {}",
                h_l.shape(),
                embedding.shape(),
                index_map.len()
            ),
        ));
    }
    let mut w = embedding.clone();
    for (i, u) in index_map.iter().enumerate() {
        if let Some(u) = *u {
            if u >= h_l.rows() {
                return Err(shape_err("assemble_classifier", format!("node {u} out of range")));
            }
            w.row_mut(i).copy_from_slice(h_l.row(u));
        }
    }
    Ok(w)
}

/// `softmax(W v)` with max subtraction.
pub fn predict_distribution<T: Real>(w: &Matrix<T>, v: &[T]) -> Vec<T> {
    assert_eq!(w.cols(), v.len(), "classifier width");
    let mut logits: Vec<T> = (0..w.rows()).map(|i| dot(w.row(i), v)).collect();
    softmax_in_place(&mut logits);
    logits
}

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllLoss<T> {
    pub loss: T,
    /// Positions whose target probability fell below the floor.
    pub clamped: usize,
}

/// Mean negative log-likelihood of `targets` under `distributions`.
pub fn nll_loss<T: Real>(distributions: &[Vec<T>], targets: &[usize]) -> Result<NllLoss<T>> {
    if distributions.len() != targets.len() {
        return Err(shape_err(
            "nll_loss",
            format!("{} rows vs {} targets", distributions.len(), targets.len()),
        ));
    }
    if distributions.is_empty() {
        return Ok(NllLoss {
            loss: T::zero(),
            clamped: 0,
        });
    }
    let floor = T::lit(PROB_FLOOR);
    let mut clamped = 0;
    let mut total = T::zero();
    for (p, &t) in distributions.iter().zip(targets) {
        let prob = *p
            .get(t)
            .ok_or_else(|| shape_err("nll_loss", format!("target {t} outside 0..{}", p.len())))?;
        let prob = if prob < floor {
            clamped += 1;
            floor
        } else {
            prob
        };
        total -= prob.ln();
    }
    if clamped > 0 {
        log::warn!("nll_loss: {clamped} target probabilities clamped to {PROB_FLOOR}");
    }
    Ok(NllLoss {
        loss: total / T::lit(distributions.len() as f64),
        clamped,
    })
}

/// Tape-side handles for the head.
#[derive(Debug, Clone)]
pub struct HeadGraph<T> {
    pub pron: Arc<Csr<T>>,
    pub shape: Arc<Csr<T>>,
}

/// Records the head on `tape`; returns the `H_L` variable.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    vars: &Bindings,
    cfg: &GcnConfig,
    graphs: &HeadGraph<T>,
    h0: Var,
) -> Var {
    let id = |name: &str| vars.var(store.id(name).unwrap_or_else(|| panic!("missing {name}")));
    let attention = (cfg.mode == CombineMode::Attention).then(|| id(ATTENTION_NAME));
    let inv_beta = T::one() / T::lit(cfg.beta);
    let mut hs = vec![h0];
    for l in 0..cfg.depth {
        let h = hs[l];
        let ah = tape.sparse_left(graphs.pron.clone(), h);
        let fp = tape.matmul(ah, id(&pron_weight_name(l)));
        let ah = tape.sparse_left(graphs.shape.clone(), h);
        let fs = tape.matmul(ah, id(&shape_weight_name(l)));
        let c = match cfg.mode {
            CombineMode::Attention => {
                let w_a = attention.unwrap();
                let sp = tape.matmul_t(fp, w_a);
                let ss = tape.matmul_t(fs, w_a);
                let scores = tape.hconcat(vec![sp, ss]);
                let scores = tape.scale(scores, inv_beta);
                let alpha = tape.row_softmax(scores);
                let ap = tape.slice_cols(alpha, 0, 1);
                let as_ = tape.slice_cols(alpha, 1, 2);
                let wp = tape.mul_col(fp, ap);
                let ws = tape.mul_col(fs, as_);
                tape.add(wp, ws)
            }
            CombineMode::Sum => tape.add(fp, fs),
            CombineMode::Mean => {
                let s = tape.add(fp, fs);
                tape.scale(s, T::lit(0.5))
            }
        };
        let mut acc = c;
        for &prev in &hs {
            acc = tape.add(acc, prev);
        }
        hs.push(acc);
    }
    *hs.last().unwrap()
}
