//! Extractor plus optional similarity-graph head, trained end to end.
//!
//! Batch gradients are computed in two stages. The head runs once per
//! batch on its own tape and yields the classifier matrix `W`. Every
//! sample then runs the encoder on a private tape with `W` as a leaf, which
//! lets samples fan out across threads. Per-sample gradients are summed in
//! input order and the summed `dL/dW` is pushed back through the head tape.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::confusion::{build_graphs, vocab_index_map, ConfusionSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate_triples, EvalReport, Sample, Triple};
use crate::extractor::{
    gather_rows, init_params, is_extractor_param, node_vocab_ids, EncodedSequence, Extractor, ExtractorConfig, Vocab,
    EMBEDDING, PAD_ID,
};
use crate::gcn::{self, assemble_classifier, GcnConfig, GcnTrace, HeadGraph, SpellGcnParams};
use crate::matrix::{dot, Matrix};
use crate::par::{map_indexed, Execution};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    /// `None` gives the plain tied-embedding classifier.
    pub head: Option<GcnConfig>,
}

#[derive(Clone)]
pub struct Model<T: Real> {
    config: ModelConfig,
    extractor: Extractor,
    confusion: ConfusionSet,
    graphs: HeadGraph<T>,
    node_vocab: Arc<Vec<usize>>,
    unresolved_nodes: usize,
    index_map: Arc<Vec<Option<usize>>>,
    params: ParamStore<T>,
    embedding: ParamId,
}

/// Loss and gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchGrads<T> {
    /// Mean negative log-likelihood over the unmasked positions.
    pub loss: T,
    pub tokens: usize,
    /// Aligned with the parameter store.
    pub grads: Vec<Matrix<T>>,
}

struct SampleOutcome<T> {
    nll: T,
    tokens: usize,
    param_grads: Vec<(ParamId, Matrix<T>)>,
    classifier_grad: Option<Matrix<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, confusion: ConfusionSet) -> Result<Self> {
        let extractor = Extractor::new(config.extractor.clone())?;
        if let Some(h) = &config.head {
            h.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.extractor.seed);
        let mut params = ParamStore::new();
        init_params(&config.extractor, &mut rng, &mut params);
        if let Some(h) = &config.head {
            SpellGcnParams::<T>::init(h, config.extractor.dim, &mut rng).write_to(&mut params);
        }
        let (pron, shape) = build_graphs(&confusion);
        let (node_vocab, unresolved_nodes) = node_vocab_ids(extractor.vocab(), confusion.chars());
        if unresolved_nodes > 0 {
            log::warn!("{unresolved_nodes} confusion-set characters missing from the vocabulary use the UNK row");
        }
        let index_map = vocab_index_map(&confusion, extractor.vocab().chars());
        let embedding = params.id(EMBEDDING).expect("embedding registered");
        Ok(Self {
            config,
            extractor,
            graphs: HeadGraph {
                pron: Arc::new(pron.normalized().cast()),
                shape: Arc::new(shape.normalized().cast()),
            },
            confusion,
            node_vocab: Arc::new(node_vocab),
            unresolved_nodes,
            index_map: Arc::new(index_map),
            params,
            embedding,
        })
    }

    /// Rebuilds a model and overwrites its tensors with `params`. Names and
    /// shapes must match what `config` produces.
    pub fn from_parts(config: ModelConfig, confusion: ConfusionSet, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, confusion)?;
        if params.names() != model.params.names() {
            return Err(Error::Checkpoint(
                "parameter names do not match the configuration".into(),
            ));
        }
        for (name, (have, want)) in params
            .names()
            .iter()
            .zip(params.tensors().iter().zip(model.params.tensors()))
        {
            if have.shape() != want.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        self.extractor.vocab()
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn confusion(&self) -> &ConfusionSet {
        &self.confusion
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn has_head(&self) -> bool {
        self.config.head.is_some()
    }

    /// Vocabulary position to confusion-set node.
    pub fn index_map(&self) -> &[Option<usize>] {
        &self.index_map
    }

    /// Confusion-set characters that had to use the UNK row.
    pub fn unresolved_nodes(&self) -> usize {
        self.unresolved_nodes
    }

    pub fn embedding_table(&self) -> &Matrix<T> {
        self.params.by_id(self.embedding)
    }

    /// Row `j` is the embedding of the character with node id `j`.
    pub fn initial_node_features(&self) -> Matrix<T> {
        gather_rows(self.embedding_table(), &self.node_vocab)
    }

    pub fn gcn_params(&self) -> Option<Result<SpellGcnParams<T>>> {
        self.config
            .head
            .as_ref()
            .map(|h| SpellGcnParams::read_from(&self.params, h))
    }

    pub fn gcn_trace(&self) -> Option<Result<GcnTrace<T>>> {
        let params = self.gcn_params()?;
        Some(
            params.and_then(|p| gcn::forward(&p, &self.graphs.pron, &self.graphs.shape, &self.initial_node_features())),
        )
    }

    /// The M×D output projection.
    pub fn classifier(&self) -> Result<Matrix<T>> {
        match self.gcn_trace() {
            None => Ok(self.embedding_table().clone()),
            Some(trace) => assemble_classifier(trace?.output(), self.embedding_table(), &self.index_map),
        }
    }

    pub fn encode(&self, tokens: &[char]) -> Result<EncodedSequence<T>> {
        self.extractor.encode(&self.params, tokens)
    }

    pub fn predictor(&self) -> Result<Predictor<'_, T>> {
        Ok(Predictor {
            model: self,
            classifier: self.classifier()?,
        })
    }

    fn head_on_tape(&self, tape: &mut Tape<T>, vars: &Bindings) -> Var {
        let emb = vars.var(self.embedding);
        match &self.config.head {
            None => emb,
            Some(cfg) => {
                let h0 = tape.gather(emb, self.node_vocab.clone());
                let h_l = gcn::forward_on_tape(tape, &self.params, vars, cfg, &self.graphs, h0);
                tape.select_rows(h_l, emb, self.index_map.clone())
            }
        }
    }

    fn sample_outcome(&self, classifier: &Matrix<T>, sample: &Sample, want_grads: bool) -> Result<SampleOutcome<T>> {
        let ids = self.extractor.token_ids(&sample.source)?;
        let targets: Vec<usize> = sample.target.iter().map(|&c| self.vocab().id(c)).collect();
        let mask: Vec<bool> = ids.iter().map(|&i| i != PAD_ID).collect();
        let tokens = mask.iter().filter(|&&m| m).count();

        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, is_extractor_param);
        let w = tape.leaf(classifier.clone());
        let v = self.extractor.encode_on_tape(&mut tape, &self.params, &vars, &ids);
        let logits = tape.matmul_t(v, w);
        let ce = tape.cross_entropy_sum(logits, Arc::new(targets), Arc::new(mask));
        let nll = tape.value(ce)[(0, 0)];
        if !nll.is_finite() {
            return Err(Error::NonFinite(format!("loss of sample `{}`", sample.id)));
        }
        if !want_grads {
            return Ok(SampleOutcome {
                nll,
                tokens,
                param_grads: Vec::new(),
                classifier_grad: None,
            });
        }
        let mut grads = tape.backward(ce);
        let param_grads = vars
            .iter()
            .filter_map(|(id, var)| grads.take(var).map(|g| (id, g)))
            .collect();
        Ok(SampleOutcome {
            nll,
            tokens,
            param_grads,
            classifier_grad: grads.take(w),
        })
    }

    /// Mean NLL over the unmasked positions of `batch` (forward only).
    pub fn batch_loss(&self, batch: &[Sample], exec: Execution) -> Result<T> {
        let classifier = self.classifier_via_tape().0;
        let outcomes = map_indexed(exec, batch, |_, s| self.sample_outcome(&classifier, s, false));
        let (mut total, mut tokens) = (T::zero(), 0usize);
        for o in outcomes {
            let o = o?;
            total += o.nll;
            tokens += o.tokens;
        }
        Ok(mean(total, tokens))
    }

    fn classifier_via_tape(&self) -> (Matrix<T>, Tape<T>, Bindings, Var) {
        let mut tape = Tape::new();
        let vars = self
            .params
            .bind(&mut tape, |n| n == EMBEDDING || !is_extractor_param(n));
        let w = self.head_on_tape(&mut tape, &vars);
        (tape.value(w).clone(), tape, vars, w)
    }

    /// Loss and full gradient for `batch`.
    pub fn batch_loss_and_grads(&self, batch: &[Sample], exec: Execution) -> Result<BatchGrads<T>> {
        let (classifier, head_tape, head_vars, w) = self.classifier_via_tape();
        let outcomes = map_indexed(exec, batch, |_, s| self.sample_outcome(&classifier, s, true));

        let mut grads = self.params.zeros_like();
        let mut d_classifier = Matrix::zeros(classifier.rows(), classifier.cols());
        let (mut total, mut tokens) = (T::zero(), 0usize);
        for o in outcomes {
            let o = o?;
            total += o.nll;
            tokens += o.tokens;
            for (id, g) in o.param_grads {
                grads[id.0].add_assign(&g);
            }
            if let Some(g) = o.classifier_grad {
                d_classifier.add_assign(&g);
            }
        }
        let head_grads = head_tape.backward_from(w, d_classifier);
        for (id, var) in head_vars.iter() {
            if let Some(g) = head_grads.get(var) {
                grads[id.0].add_assign(g);
            }
        }
        let scale = if tokens > 0 {
            T::one() / T::lit(tokens as f64)
        } else {
            T::zero()
        };
        for (name, g) in self.params.names().iter().zip(grads.iter_mut()) {
            for x in g.as_mut_slice() {
                *x *= scale;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(BatchGrads {
            loss: mean(total, tokens),
            tokens,
            grads,
        })
    }

    /// Corrects every sample and scores the predictions.
    pub fn evaluate(&self, samples: &[Sample], exec: Execution) -> Result<(EvalReport, Vec<Vec<char>>)> {
        let predictor = self.predictor()?;
        let predictions: Vec<Vec<char>> = map_indexed(exec, samples, |_, s| predictor.correct(&s.source))
            .into_iter()
            .collect::<Result<_>>()?;
        let triples: Vec<Triple> = samples
            .iter()
            .zip(&predictions)
            .map(|(s, p)| Triple {
                source: s.source.clone(),
                target: s.target.clone(),
                prediction: p.clone(),
            })
            .collect();
        Ok((evaluate_triples(&triples)?, predictions))
    }
}

fn mean<T: Real>(total: T, n: usize) -> T {
    if n == 0 {
        T::zero()
    } else {
        total / T::lit(n as f64)
    }
}

/// Frozen classifier plus encoder, ready for inference.
pub struct Predictor<'a, T: Real> {
    model: &'a Model<T>,
    classifier: Matrix<T>,
}

impl<'a, T: Real> Predictor<'a, T> {
    pub fn classifier(&self) -> &Matrix<T> {
        &self.classifier
    }

    /// n×M logits for the given contextual vectors.
    pub fn logits(&self, vectors: &Matrix<T>) -> Matrix<T> {
        vectors.matmul_t(&self.classifier)
    }

    pub fn distributions(&self, source: &[char]) -> Result<Vec<Vec<T>>> {
        let enc = self.model.encode(source)?;
        Ok((0..enc.vectors.rows())
            .map(|i| gcn::predict_distribution(&self.classifier, enc.vectors.row(i)))
            .collect())
    }

    pub fn correct(&self, source: &[char]) -> Result<Vec<char>> {
        let enc = self.model.encode(source)?;
        Ok(decode(self.model.vocab(), source, &self.logits(&enc.vectors)))
    }

    /// Corrects from externally computed vectors (one row per character).
    pub fn correct_with_vectors(&self, source: &[char], vectors: &Matrix<T>) -> Result<Vec<char>> {
        if vectors.rows() != source.len() || vectors.cols() != self.classifier.cols() {
            return Err(crate::error::shape_err(
                "correct_with_vectors",
                format!("{} chars, vectors {:?}", source.len(), vectors.shape()),
            ));
        }
        Ok(decode(self.model.vocab(), source, &self.logits(vectors)))
    }

    /// Distribution of the classifier for one vector.
    pub fn distribution(&self, v: &[T]) -> Vec<T> {
        gcn::predict_distribution(&self.classifier, v)
    }

    pub fn score(&self, v: &[T], id: usize) -> T {
        dot(self.classifier.row(id), v)
    }
}

/// First index of the maximum; ties go to the lowest id.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Per-position argmax. Characters outside the vocabulary, and positions
/// whose argmax is a reserved token, keep the source character.
pub fn decode<T: Real>(vocab: &Vocab, source: &[char], logits: &Matrix<T>) -> Vec<char> {
    source
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if vocab.lookup(c).is_none() {
                return c;
            }
            let best = argmax(logits.row(i));
            if Vocab::is_reserved(best) {
                c
            } else {
                vocab.char_at(best)
            }
        })
        .collect()
}
