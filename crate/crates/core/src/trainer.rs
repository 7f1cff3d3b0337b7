//! Training loop and finite-difference gradient verification.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{EvalReport, Sample};
use crate::extractor::{EMBEDDING, PAD_ID};
use crate::model::Model;
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::par::{map_indexed, Execution};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 32,
            epochs: 6,
            weight_decay: 0.01,
            seed: 0,
            grad_clip: None,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Token-weighted mean NLL over the epoch.
    pub mean_loss: f64,
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |e| e.mean_loss)
    }

    pub fn last_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
    }
}

/// LayerNorm gains and biases are excluded from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".gain") || name.ends_with(".bias"))
}

/// Optimises `model` in place. Shuffling uses only `cfg.seed`.
pub fn train<T: Real>(
    model: &mut Model<T>,
    corpus: &[Sample],
    dev: Option<&[Sample]>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let max_len = model.config().extractor.max_len;
    for s in corpus {
        if s.len() > max_len {
            return Err(Error::Length {
                len: s.len(),
                max: max_len,
            });
        }
    }
    let started = Instant::now();
    let shapes: Vec<(usize, usize)> = model.params().tensors().iter().map(|t| t.shape()).collect();
    let decay_mask = model.params().names().iter().map(|n| decays(n)).collect();
    let mut opt = AdamW::<T>::new(
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &shapes,
        decay_mask,
    );
    let embedding = model.params().id(EMBEDDING).expect("embedding");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut tokens) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let mut bg = model.batch_loss_and_grads(&batch, cfg.execution)?;
            total += bg.loss.as_f64() * bg.tokens as f64;
            tokens += bg.tokens;
            // PAD embedding stays frozen at zero
            bg.grads[embedding.0]
                .row_mut(PAD_ID)
                .iter_mut()
                .for_each(|g| *g = T::zero());
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut bg.grads, c);
            }
            opt.step(model.params_mut().tensors_mut(), &bg.grads);
        }
        let mean_loss = if tokens > 0 { total / tokens as f64 } else { 0.0 };
        let eval = match dev {
            Some(d) if !d.is_empty() => Some(model.evaluate(d, cfg.execution)?.0),
            _ => None,
        };
        log::info!(
            "epoch {epoch}/{}: loss {mean_loss:.5}{}",
            cfg.epochs,
            eval.map(|e| format!(", dev sentence C-F {:.4}", e.sentence_level.correction.f1))
                .unwrap_or_default()
        );
        records.push(EpochRecord { epoch, mean_loss, eval });
    }
    Ok(TrainReport {
        epochs: records,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Minimum coordinates checked per tensor (all of them if fewer exist).
pub const GRAD_CHECK_COORDS: usize = 24;
/// Magnitude below which gradient differences are judged absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorCheck> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the analytic gradient of the mean NLL on `sample` against
/// central differences on a deterministic subsample of every tensor.
pub fn grad_check(model: &Model<f64>, sample: &Sample, eps: f64, exec: Execution) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::Config("eps must be positive".into()));
    }
    let batch = std::slice::from_ref(sample);
    let analytic = model.batch_loss_and_grads(batch, Execution::Sequential)?;
    let names = model.params().names().to_vec();
    let mut jobs = Vec::new();
    for (k, (name, g)) in names.iter().zip(&analytic.grads).enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of {name}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let coords: Vec<usize> = if g.len() <= GRAD_CHECK_COORDS {
            (0..g.len()).collect()
        } else {
            let mut c = index::sample(&mut rng, g.len(), GRAD_CHECK_COORDS).into_vec();
            c.sort_unstable();
            c
        };
        jobs.extend(coords.into_iter().map(|c| (k, c)));
    }
    let numeric: Vec<Result<f64>> = map_indexed(exec, &jobs, |_, &(k, c)| {
        let eval_at = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            m.params_mut().tensors_mut()[k].as_mut_slice()[c] += delta;
            m.batch_loss(batch, Execution::Sequential)
        };
        Ok((eval_at(eps)? - eval_at(-eps)?) / (2.0 * eps))
    });
    let mut tensors: Vec<TensorCheck> = names
        .iter()
        .map(|n| TensorCheck {
            name: n.clone(),
            coords: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            max_abs_grad: 0.0,
        })
        .collect();
    for (&(k, c), fd) in jobs.iter().zip(numeric) {
        let fd = fd?;
        let a = analytic.grads[k].as_slice()[c];
        let t = &mut tensors[k];
        t.coords += 1;
        t.max_rel_error = t.max_rel_error.max(relative_error(a, fd));
        t.max_abs_error = t.max_abs_error.max((a - fd).abs());
        t.max_abs_grad = t.max_abs_grad.max(a.abs());
    }
    Ok(GradCheckReport { tensors })
}
