//! Brute-force metric oracle.
//!
//! Recomputes every count by literal enumeration over positions and
//! sentences, with its own rate arithmetic. It deliberately shares no code
//! with [`crate::eval`] beyond the report struct, so that agreement between
//! the two is evidence rather than tautology.

use crate::eval::{CharCounts, EvalReport, LevelScores, Prf, SentenceCounts, Triple};

/// Panics on misaligned triples; intended for small test corpora.
pub fn oracle_metrics(triples: &[Triple]) -> EvalReport {
    let mut cc = CharCounts::default();
    let mut sc = SentenceCounts::default();
    for t in triples {
        let n = t.source.len();
        assert!(t.target.len() == n && t.prediction.len() == n, "misaligned triple");

        let mut any_error = false;
        let mut any_flag = false;
        let mut flags_match_errors = true;
        let mut all_equal_target = true;
        for i in 0..n {
            let err = t.target[i] != t.source[i];
            let flag = t.prediction[i] != t.source[i];
            if err {
                cc.gold += 1;
                any_error = true;
            }
            if flag {
                cc.flagged += 1;
                any_flag = true;
            }
            if err && flag {
                cc.detected += 1;
                if t.prediction[i] == t.target[i] {
                    cc.corrected += 1;
                }
            }
            if err != flag {
                flags_match_errors = false;
            }
            if t.prediction[i] != t.target[i] {
                all_equal_target = false;
            }
        }

        sc.sentences += 1;
        if any_flag {
            sc.flagged += 1;
        }
        if any_error {
            sc.with_errors += 1;
            if any_flag && flags_match_errors {
                sc.detected += 1;
            }
            if all_equal_target {
                sc.corrected += 1;
            }
        } else {
            sc.clean += 1;
            if any_flag {
                sc.clean_flagged += 1;
            }
        }
    }

    let div = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
    let prf = |hits: usize, pred: usize, gold: usize| {
        let p = div(hits, pred);
        let r = div(hits, gold);
        Prf {
            precision: p,
            recall: r,
            f1: if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) },
        }
    };
    EvalReport {
        char_level: LevelScores {
            detection: prf(cc.detected, cc.flagged, cc.gold),
            correction: prf(cc.corrected, cc.flagged, cc.gold),
        },
        sentence_level: LevelScores {
            detection: prf(sc.detected, sc.flagged, sc.with_errors),
            correction: prf(sc.corrected, sc.flagged, sc.with_errors),
        },
        fpr: div(sc.clean_flagged, sc.clean),
        char_counts: cc,
        sentence_counts: sc,
    }
}
