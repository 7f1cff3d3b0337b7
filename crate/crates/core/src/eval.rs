//! Corpus ingestion and the detection/correction metric suite.
//!
//! Conventions (shared by [`char_metrics`], [`sentence_metrics`] and the
//! independent [`crate::oracle`]):
//!
//! * error positions `G = {i : y_i != x_i}`, flagged positions
//!   `S = {i : ŷ_i != x_i}`;
//! * character level: detection hits `|S ∩ G|`, correction hits the subset
//!   of those where `ŷ_i = y_i`; precision over `|S|`, recall over `|G|`;
//! * sentence level: a sentence is detected when its flagged set equals its
//!   error set (and it has errors), corrected when the whole prediction
//!   equals the target (and it has errors); precision over flagged
//!   sentences, recall over erroneous ones; FPR is the share of clean
//!   sentences that got flagged;
//! * any rate with an empty denominator is 0, and so is F when P + R = 0.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Aligned source/target pair. Lengths are equal by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub source: Vec<char>,
    pub target: Vec<char>,
}

impl Sample {
    pub fn new(id: impl Into<String>, source: &str, target: &str) -> Result<Self> {
        Self::from_chars(id, source.chars().collect(), target.chars().collect())
    }

    pub fn from_chars(id: impl Into<String>, source: Vec<char>, target: Vec<char>) -> Result<Self> {
        let id = id.into();
        if source.len() != target.len() {
            return Err(Error::Data(format!(
                "sample `{id}`: source has {} characters, target {}",
                source.len(),
                target.len()
            )));
        }
        Ok(Self { id, source, target })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Parses `id <TAB> source <TAB> target` lines. Blank lines are skipped.
pub fn parse_parallel_corpus(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected `id<TAB>source<TAB>target`, got {} fields", fields.len()),
            });
        }
        out.push(Sample::new(fields[0], fields[1], fields[2])?);
    }
    Ok(out)
}

pub fn load_parallel_corpus(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    parse_parallel_corpus(&std::fs::read_to_string(path)?)
}

pub fn write_parallel_corpus(samples: &[Sample]) -> String {
    let mut s = String::new();
    for x in samples {
        let src: String = x.source.iter().collect();
        let tgt: String = x.target.iter().collect();
        let _ = writeln!(s, "{}\t{src}\t{tgt}", x.id);
    }
    s
}

/// `(source, target, prediction)` for one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub source: Vec<char>,
    pub target: Vec<char>,
    pub prediction: Vec<char>,
}

impl Triple {
    pub fn new(source: &str, target: &str, prediction: &str) -> Self {
        Self {
            source: source.chars().collect(),
            target: target.chars().collect(),
            prediction: prediction.chars().collect(),
        }
    }

    fn check(&self, k: usize) -> Result<()> {
        if self.source.len() != self.target.len() || self.source.len() != self.prediction.len() {
            return Err(Error::Data(format!(
                "sentence {k}: lengths {}/{}/{} differ",
                self.source.len(),
                self.target.len(),
                self.prediction.len()
            )));
        }
        Ok(())
    }
}

/// Precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(hits: usize, predicted: usize, gold: usize) -> Self {
        let precision = ratio(hits, predicted);
        let recall = ratio(hits, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Raw character-level counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CharCounts {
    pub flagged: usize,
    pub gold: usize,
    pub detected: usize,
    pub corrected: usize,
}

/// Raw sentence-level counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SentenceCounts {
    pub sentences: usize,
    pub flagged: usize,
    pub with_errors: usize,
    pub detected: usize,
    pub corrected: usize,
    pub clean: usize,
    pub clean_flagged: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LevelScores {
    pub detection: Prf,
    pub correction: Prf,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalReport {
    pub char_level: LevelScores,
    pub sentence_level: LevelScores,
    pub fpr: f64,
    pub char_counts: CharCounts,
    pub sentence_counts: SentenceCounts,
}

impl EvalReport {
    pub fn from_counts(c: CharCounts, s: SentenceCounts) -> Self {
        Self {
            char_level: LevelScores {
                detection: Prf::from_counts(c.detected, c.flagged, c.gold),
                correction: Prf::from_counts(c.corrected, c.flagged, c.gold),
            },
            sentence_level: LevelScores {
                detection: Prf::from_counts(s.detected, s.flagged, s.with_errors),
                correction: Prf::from_counts(s.corrected, s.flagged, s.with_errors),
            },
            fpr: ratio(s.clean_flagged, s.clean),
            char_counts: c,
            sentence_counts: s,
        }
    }

    /// Flat `key=value` lines, stable key order.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (level, sc) in [("char", &self.char_level), ("sent", &self.sentence_level)] {
            for (task, p) in [("det", &sc.detection), ("cor", &sc.correction)] {
                let _ = writeln!(s, "{level}.{task}.precision={}", p.precision);
                let _ = writeln!(s, "{level}.{task}.recall={}", p.recall);
                let _ = writeln!(s, "{level}.{task}.f1={}", p.f1);
            }
        }
        let _ = writeln!(s, "fpr={}", self.fpr);
        let c = &self.char_counts;
        let _ = writeln!(s, "count.char.flagged={}", c.flagged);
        let _ = writeln!(s, "count.char.gold={}", c.gold);
        let _ = writeln!(s, "count.char.detected={}", c.detected);
        let _ = writeln!(s, "count.char.corrected={}", c.corrected);
        let t = &self.sentence_counts;
        let _ = writeln!(s, "count.sent.total={}", t.sentences);
        let _ = writeln!(s, "count.sent.flagged={}", t.flagged);
        let _ = writeln!(s, "count.sent.with_errors={}", t.with_errors);
        let _ = writeln!(s, "count.sent.detected={}", t.detected);
        let _ = writeln!(s, "count.sent.corrected={}", t.corrected);
        let _ = writeln!(s, "count.sent.clean={}", t.clean);
        let _ = writeln!(s, "count.sent.clean_flagged={}", t.clean_flagged);
        s
    }

    /// Human-readable table.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("level\tD-P\tD-R\tD-F\tC-P\tC-R\tC-F\n");
        for (name, sc) in [("char", &self.char_level), ("sentence", &self.sentence_level)] {
            let _ = writeln!(
                s,
                "{name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                sc.detection.precision,
                sc.detection.recall,
                sc.detection.f1,
                sc.correction.precision,
                sc.correction.recall,
                sc.correction.f1
            );
        }
        let _ = writeln!(s, "FPR\t{:.4}", self.fpr);
        s
    }
}

pub fn char_counts(triples: &[Triple]) -> Result<CharCounts> {
    let mut c = CharCounts::default();
    for (k, t) in triples.iter().enumerate() {
        t.check(k)?;
        for ((&x, &y), &p) in t.source.iter().zip(&t.target).zip(&t.prediction) {
            let is_error = x != y;
            let is_flagged = p != x;
            c.gold += is_error as usize;
            c.flagged += is_flagged as usize;
            if is_error && is_flagged {
                c.detected += 1;
                c.corrected += (p == y) as usize;
            }
        }
    }
    Ok(c)
}

pub fn sentence_counts(triples: &[Triple]) -> Result<SentenceCounts> {
    let mut c = SentenceCounts::default();
    for (k, t) in triples.iter().enumerate() {
        t.check(k)?;
        let errors: Vec<usize> = diff_positions(&t.source, &t.target);
        let flags: Vec<usize> = diff_positions(&t.source, &t.prediction);
        let has_error = !errors.is_empty();
        let flagged = !flags.is_empty();
        c.sentences += 1;
        c.flagged += flagged as usize;
        if has_error {
            c.with_errors += 1;
            c.detected += (errors == flags) as usize;
            c.corrected += (t.prediction == t.target) as usize;
        } else {
            c.clean += 1;
            c.clean_flagged += flagged as usize;
        }
    }
    Ok(c)
}

fn diff_positions(a: &[char], b: &[char]) -> Vec<usize> {
    a.iter()
        .zip(b)
        .enumerate()
        .filter_map(|(i, (x, y))| (x != y).then_some(i))
        .collect()
}

/// Character-level detection and correction scores.
pub fn char_metrics(triples: &[Triple]) -> Result<(LevelScores, CharCounts)> {
    let c = char_counts(triples)?;
    Ok((
        LevelScores {
            detection: Prf::from_counts(c.detected, c.flagged, c.gold),
            correction: Prf::from_counts(c.corrected, c.flagged, c.gold),
        },
        c,
    ))
}

/// Sentence-level scores plus the false positive rate.
pub fn sentence_metrics(triples: &[Triple]) -> Result<(LevelScores, f64, SentenceCounts)> {
    let c = sentence_counts(triples)?;
    Ok((
        LevelScores {
            detection: Prf::from_counts(c.detected, c.flagged, c.with_errors),
            correction: Prf::from_counts(c.corrected, c.flagged, c.with_errors),
        },
        ratio(c.clean_flagged, c.clean),
        c,
    ))
}

/// Full report from both levels.
pub fn evaluate_triples(triples: &[Triple]) -> Result<EvalReport> {
    Ok(EvalReport::from_counts(
        char_counts(triples)?,
        sentence_counts(triples)?,
    ))
}
