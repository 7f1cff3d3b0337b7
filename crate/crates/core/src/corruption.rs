//! Confusion-aware token corruption.
//!
//! Each position is selected independently with `selection_rate`. A
//! selected position then takes one of five actions:
//!
//! 1. replace with the MASK token,
//! 2. replace with a uniformly random vocabulary character,
//! 3. keep the original,
//! 4. replace with a uniformly random candidate from the character's own
//!    confusion list (falling back to action 5 when the list is empty),
//! 5. replace with a uniformly random character from the whole
//!    confusion-set universe.
//!
//! Generation is a pure function of `(inputs, seed)`. Corpus helpers give
//! sentence `i` its own ChaCha stream `i` under the shared seed, so the
//! result does not depend on how sentences are spread across threads.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::confusion::ConfusionSet;
use crate::error::{Error, Result};
use crate::eval::Sample;
use crate::extractor::MASK;
use crate::par::{map_indexed, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Mask,
    RandomVocab,
    Unchanged,
    ConfusionSimilar,
    ConfusionRandom,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Mask,
        Action::RandomVocab,
        Action::Unchanged,
        Action::ConfusionSimilar,
        Action::ConfusionRandom,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Mask => "mask",
            Action::RandomVocab => "random",
            Action::Unchanged => "unchanged",
            Action::ConfusionSimilar => "confusion-similar",
            Action::ConfusionRandom => "confusion-random",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    /// Probabilities in [`Action::ALL`] order.
    pub probs: [f64; 5],
    pub selection_rate: f64,
}

impl Default for MaskPolicy {
    /// 80% mask, 6.6% random, 6.7% unchanged, 6.7% confusion-similar at the
    /// usual 15% selection rate.
    fn default() -> Self {
        Self {
            probs: [0.8, 0.066, 0.067, 0.067, 0.0],
            selection_rate: 0.15,
        }
    }
}

impl MaskPolicy {
    pub fn new(probs: [f64; 5], selection_rate: f64) -> Result<Self> {
        let p = Self { probs, selection_rate };
        p.validate()?;
        Ok(p)
    }

    /// Parses `"p1,p2,p3,p4,p5"`.
    pub fn parse(spec: &str, selection_rate: f64) -> Result<Self> {
        let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(Error::Config(format!(
                "policy needs 5 comma-separated values, got {}",
                parts.len()
            )));
        }
        let mut probs = [0.0; 5];
        for (p, s) in probs.iter_mut().zip(parts) {
            *p = s
                .parse()
                .map_err(|_| Error::Config(format!("bad policy value `{s}`")))?;
        }
        Self::new(probs, selection_rate)
    }

    fn validate_probs(&self) -> Result<()> {
        if self.probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Config("policy probabilities must be non-negative".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("policy probabilities sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_probs()?;
        if !(self.selection_rate > 0.0 && self.selection_rate <= 1.0) {
            return Err(Error::Config(format!(
                "selection rate {} outside (0, 1]",
                self.selection_rate
            )));
        }
        Ok(())
    }

    pub fn prob(&self, a: Action) -> f64 {
        self.probs[a.index()]
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Action {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for a in Action::ALL {
            acc += self.probs[a.index()];
            if u < acc {
                return a;
            }
        }
        // rounding left a sliver above the cumulative sum
        *Action::ALL
            .iter()
            .rev()
            .find(|a| self.probs[a.index()] > 0.0)
            .unwrap_or(&Action::Unchanged)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionRecord {
    pub original: Vec<char>,
    pub corrupted: Vec<char>,
    pub positions: Vec<usize>,
    /// Action actually applied at each selected position.
    pub actions: Vec<Action>,
    /// Confusion-similar draws that fell back to the global universe.
    pub fallbacks: usize,
}

/// Applies a [`MaskPolicy`] against a confusion set and a vocabulary.
#[derive(Debug, Clone)]
pub struct Corrupter<'a> {
    policy: MaskPolicy,
    confusion: &'a ConfusionSet,
    vocab: Vec<char>,
}

impl<'a> Corrupter<'a> {
    /// `vocab` is the pool for random-vocabulary replacements.
    pub fn new(policy: MaskPolicy, confusion: &'a ConfusionSet, vocab: Vec<char>) -> Result<Self> {
        policy.validate()?;
        Self::checked(policy, confusion, vocab)
    }

    /// Like [`Corrupter::new`] but also accepts a selection rate of 0.
    pub fn new_relaxed(policy: MaskPolicy, confusion: &'a ConfusionSet, vocab: Vec<char>) -> Result<Self> {
        policy.validate_probs()?;
        if !(0.0..=1.0).contains(&policy.selection_rate) {
            return Err(Error::Config("selection rate outside [0, 1]".into()));
        }
        Self::checked(policy, confusion, vocab)
    }

    fn checked(policy: MaskPolicy, confusion: &'a ConfusionSet, vocab: Vec<char>) -> Result<Self> {
        let needs_confusion = policy.prob(Action::ConfusionSimilar) + policy.prob(Action::ConfusionRandom) > 0.0;
        if needs_confusion && confusion.n_nodes() == 0 {
            return Err(Error::Config(
                "confusion-set actions requested but the confusion set is empty".into(),
            ));
        }
        if policy.prob(Action::RandomVocab) > 0.0 && vocab.is_empty() {
            return Err(Error::Config(
                "random-vocabulary action requested with an empty vocabulary".into(),
            ));
        }
        Ok(Self {
            policy,
            confusion,
            vocab,
        })
    }

    pub fn policy(&self) -> &MaskPolicy {
        &self.policy
    }

    /// Corrupts one non-empty sequence.
    pub fn corrupt(&self, tokens: &[char], seed: u64) -> Result<CorruptionRecord> {
        if tokens.is_empty() {
            return Err(Error::Data("cannot corrupt an empty sequence".into()));
        }
        Ok(self.corrupt_with(tokens, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    fn corrupt_with<R: Rng>(&self, tokens: &[char], rng: &mut R) -> CorruptionRecord {
        let mut rec = CorruptionRecord {
            original: tokens.to_vec(),
            corrupted: tokens.to_vec(),
            positions: Vec::new(),
            actions: Vec::new(),
            fallbacks: 0,
        };
        let universe = self.confusion.chars();
        for (i, &c) in tokens.iter().enumerate() {
            if !rng.gen_bool(self.policy.selection_rate) {
                continue;
            }
            let mut action = self.policy.draw(rng);
            if action == Action::ConfusionSimilar && self.confusion.candidates(c).is_empty() {
                action = Action::ConfusionRandom;
                rec.fallbacks += 1;
            }
            rec.corrupted[i] = match action {
                Action::Mask => MASK,
                Action::RandomVocab => self.vocab[rng.gen_range(0..self.vocab.len())],
                Action::Unchanged => c,
                Action::ConfusionSimilar => {
                    let cands = self.confusion.candidates(c);
                    cands[rng.gen_range(0..cands.len())]
                }
                Action::ConfusionRandom => universe[rng.gen_range(0..universe.len())],
            };
            rec.positions.push(i);
            rec.actions.push(action);
        }
        rec
    }

    /// Corrupts every sentence; sentence `i` draws from stream `i`.
    /// Empty sentences pass through untouched.
    pub fn corrupt_corpus(&self, sentences: &[Vec<char>], seed: u64, exec: Execution) -> Vec<CorruptionRecord> {
        map_indexed(exec, sentences, |i, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            self.corrupt_with(s, &mut rng)
        })
    }
}

/// Per-action counts over a set of records.
pub fn action_counts(records: &[CorruptionRecord]) -> [usize; 5] {
    let mut counts = [0; 5];
    for r in records {
        for a in &r.actions {
            counts[a.index()] += 1;
        }
    }
    counts
}

/// Synthetic CSC pairs: source is the corrupted sentence, target the
/// clean one. Only the unchanged and confusion actions are allowed, so
/// every pair stays same-length real text.
pub fn make_csc_pairs(
    clean: &[Vec<char>],
    policy: MaskPolicy,
    confusion: &ConfusionSet,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Sample>> {
    if policy.prob(Action::Mask) != 0.0 || policy.prob(Action::RandomVocab) != 0.0 {
        return Err(Error::Config(
            "CSC pairs need a policy without mask or random-vocabulary actions".into(),
        ));
    }
    let corrupter = Corrupter::new(policy, confusion, Vec::new())?;
    corrupter
        .corrupt_corpus(clean, seed, exec)
        .into_iter()
        .enumerate()
        .map(|(i, r)| Sample::from_chars(format!("syn-{i}"), r.corrupted, r.original))
        .collect()
}
