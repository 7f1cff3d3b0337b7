//! Synthetic spelling-check task for desk-scale experiments.
//!
//! Confusable characters come in groups of three. Clean sentences are
//! sequences of `(context, member)` pairs where the context character
//! decides which member of a randomly chosen group is correct, so the right
//! answer at a corrupted position is recoverable from its left neighbour.
//! Training and test pairs are produced by confusion-only corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::confusion::{ConfusionEntry, ConfusionSet};
use crate::corruption::{make_csc_pairs, MaskPolicy};
use crate::error::{Error, Result};
use crate::eval::Sample;
use crate::extractor::Vocab;
use crate::par::Execution;

const GROUP: usize = 3;
const CONFUSABLE_BASE: u32 = 0x4E00;
const CONTEXT_BASE: u32 = 0x6000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Must be a multiple of 3.
    pub confusable_chars: usize,
    pub context_chars: usize,
    pub min_pairs: usize,
    pub max_pairs: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub policy: MaskPolicy,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            confusable_chars: 60,
            context_chars: 12,
            min_pairs: 4,
            max_pairs: 8,
            n_train: 2000,
            n_test: 400,
            policy: MaskPolicy {
                probs: [0.0, 0.0, 0.0, 1.0, 0.0],
                selection_rate: 0.15,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub confusion: ConfusionSet,
    pub vocab: Vocab,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn confusable(i: usize) -> char {
    char::from_u32(CONFUSABLE_BASE + i as u32).unwrap()
}

fn context(i: usize) -> char {
    char::from_u32(CONTEXT_BASE + i as u32).unwrap()
}

/// Groups `{a, b, c}`: a–b shape-similar, a–c and b–c sound-similar,
/// every pair listed in both directions.
pub fn synthetic_confusion_set(n_chars: usize) -> Result<ConfusionSet> {
    if n_chars == 0 || !n_chars.is_multiple_of(GROUP) {
        return Err(Error::Config(format!(
            "confusable character count {n_chars} is not a positive multiple of 3"
        )));
    }
    let mut entries = Vec::new();
    for g in 0..n_chars / GROUP {
        let [a, b, c] = [0, 1, 2].map(|k| confusable(g * GROUP + k));
        for (x, cat, y) in [(a, 1, b), (a, 2, c), (b, 3, c)] {
            entries.push(ConfusionEntry {
                ch: x,
                category: cat,
                candidate: y,
            });
            entries.push(ConfusionEntry {
                ch: y,
                category: cat,
                candidate: x,
            });
        }
    }
    ConfusionSet::from_entries(entries)
}

/// Clean sentences under the context rule.
pub fn clean_sentences(spec: &SyntheticSpec, n: usize, rng: &mut impl Rng) -> Vec<Vec<char>> {
    let groups = spec.confusable_chars / GROUP;
    (0..n)
        .map(|_| {
            let pairs = rng.gen_range(spec.min_pairs..=spec.max_pairs);
            let mut s = Vec::with_capacity(2 * pairs);
            for _ in 0..pairs {
                let k = rng.gen_range(0..spec.context_chars);
                let g = rng.gen_range(0..groups);
                s.push(context(k));
                s.push(confusable(g * GROUP + k % GROUP));
            }
            s
        })
        .collect()
}

pub fn build_task(spec: &SyntheticSpec, seed: u64, exec: Execution) -> Result<SyntheticTask> {
    if spec.min_pairs == 0 || spec.min_pairs > spec.max_pairs || spec.context_chars == 0 {
        return Err(Error::Config("invalid synthetic sentence shape".into()));
    }
    let confusion = synthetic_confusion_set(spec.confusable_chars)?;
    let vocab = Vocab::with_reserved(
        (0..spec.confusable_chars)
            .map(confusable)
            .chain((0..spec.context_chars).map(context)),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean_train = clean_sentences(spec, spec.n_train, &mut rng);
    let clean_test = clean_sentences(spec, spec.n_test, &mut rng);
    let train = make_csc_pairs(&clean_train, spec.policy, &confusion, seed, exec)?;
    let mut test = make_csc_pairs(&clean_test, spec.policy, &confusion, seed ^ 0x5EED, exec)?;
    for (i, s) in test.iter_mut().enumerate() {
        s.id = format!("test-{i}");
    }
    Ok(SyntheticTask {
        confusion,
        vocab,
        train,
        test,
    })
}
