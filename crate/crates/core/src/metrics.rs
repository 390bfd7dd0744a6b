//! Edit distances and the scores built on them: unit edit distance (UED) on
//! deduplicated tokens, word error rate, and the per-utterance UED/WER change
//! grouping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenseq::{TokenForm, TokenSequence};

/// Unit-cost insert/delete/substitute distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance normalized by `max(1, |reference|)`.
pub fn ued(reference: &TokenSequence, hypothesis: &TokenSequence) -> Result<f64> {
    for seq in [reference, hypothesis] {
        if seq.form() != TokenForm::Deduplicated {
            return Err(Error::WrongForm {
                expected: TokenForm::Deduplicated,
                got: seq.form(),
            });
        }
    }
    Ok(ued_ids(reference.ids(), hypothesis.ids()))
}

pub fn ued_ids(reference: &[usize], hypothesis: &[usize]) -> f64 {
    levenshtein(reference, hypothesis) as f64 / reference.len().max(1) as f64
}

/// Word error rate in percent with the same `max(1, |ref|)` clamp.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> f64 {
    100.0 * levenshtein(reference, hypothesis) as f64 / reference.len().max(1) as f64
}

/// Running totals for corpus-level WER.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditTotals {
    pub edits: usize,
    pub ref_words: usize,
}

impl EditTotals {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) {
        self.edits += levenshtein(reference, hypothesis);
        self.ref_words += reference.len();
    }

    /// Total edits over total reference words, in percent.
    pub fn corpus_wer(&self) -> f64 {
        100.0 * self.edits as f64 / self.ref_words.max(1) as f64
    }
}

pub fn corpus_wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    let mut totals = EditTotals::default();
    for (r, h) in pairs {
        totals.add(r, h);
    }
    totals.corpus_wer()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub utt_id: String,
    pub ued_noisy: f64,
    pub ued_enh: f64,
    pub wer_noisy: f64,
    pub wer_enh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChangeGroup {
    BothImproved,
    UedImprovedWerUnchanged,
    UedImprovedWerDegraded,
    Others,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub both_improved: usize,
    pub ued_improved_wer_unchanged: usize,
    pub ued_improved_wer_degraded: usize,
    pub others: usize,
}

impl GroupCounts {
    pub fn total(&self) -> usize {
        self.both_improved
            + self.ued_improved_wer_unchanged
            + self.ued_improved_wer_degraded
            + self.others
    }
}

/// "Improved" is a strict decrease; WER is "unchanged" within `wer_tol`.
/// A UED that is unchanged or worse always lands in `Others`.
pub fn classify(score: &UtteranceScore, wer_tol: f64) -> ChangeGroup {
    let d_ued = score.ued_enh - score.ued_noisy;
    let d_wer = score.wer_enh - score.wer_noisy;
    if d_ued >= 0.0 {
        ChangeGroup::Others
    } else if d_wer < -wer_tol {
        ChangeGroup::BothImproved
    } else if d_wer <= wer_tol {
        ChangeGroup::UedImprovedWerUnchanged
    } else {
        ChangeGroup::UedImprovedWerDegraded
    }
}

pub const DEFAULT_WER_TOL: f64 = 1e-9;

pub fn group_utterances(scores: &[UtteranceScore], wer_tol: f64) -> GroupCounts {
    let mut counts = GroupCounts::default();
    for s in scores {
        match classify(s, wer_tol) {
            ChangeGroup::BothImproved => counts.both_improved += 1,
            ChangeGroup::UedImprovedWerUnchanged => counts.ued_improved_wer_unchanged += 1,
            ChangeGroup::UedImprovedWerDegraded => counts.ued_improved_wer_degraded += 1,
            ChangeGroup::Others => counts.others += 1,
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenseq::Origin;
    use proptest::prelude::*;

    /// Textbook recursive definition.
    fn lev_rec(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                if x == y {
                    lev_rec(ra, rb)
                } else {
                    1 + lev_rec(ra, rb).min(lev_rec(ra, b)).min(lev_rec(a, rb))
                }
            }
        }
    }

    fn dd(ids: Vec<usize>) -> TokenSequence {
        TokenSequence::new(ids, 16, TokenForm::Deduplicated, Origin::Clean).unwrap()
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein(b"abc", b"abc"), 0);
        assert_eq!(levenshtein::<u8>(b"", b"abcd"), 4);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(lev_rec(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn ued_examples() {
        assert_eq!(ued(&dd(vec![1, 2, 3]), &dd(vec![1, 2, 3])).unwrap(), 0.0);
        assert_eq!(ued(&dd(vec![1, 2, 3]), &dd(vec![1, 3])).unwrap(), 1.0 / 3.0);
        assert_eq!(ued(&dd(vec![]), &dd(vec![4, 5])).unwrap(), 2.0);
        let dup = TokenSequence::new(vec![1, 1], 16, TokenForm::Duplicated, Origin::Noisy).unwrap();
        assert!(matches!(
            ued(&dd(vec![1]), &dup),
            Err(Error::WrongForm { .. })
        ));
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&[1, 2], &[1, 2]), 0.0);
        assert_eq!(wer::<u32>(&[1, 2], &[]), 100.0);
        assert_eq!(wer(&[1, 2], &[1, 3, 2]), 50.0);
    }

    #[test]
    fn corpus_wer_pools_edits() {
        let pairs = vec![(vec![1, 2, 3, 4], vec![1, 2, 3, 4]), (vec![5], vec![6])];
        assert_eq!(corpus_wer(&pairs), 20.0);
        let per_utt = mean(&pairs.iter().map(|(r, h)| wer(r, h)).collect::<Vec<_>>());
        assert_eq!(per_utt, 50.0);
    }

    fn score(d_ued: f64, d_wer: f64) -> UtteranceScore {
        UtteranceScore {
            utt_id: "u".into(),
            ued_noisy: 0.5,
            ued_enh: 0.5 + d_ued,
            wer_noisy: 50.0,
            wer_enh: 50.0 + d_wer,
        }
    }

    #[test]
    fn grouping_examples() {
        let all_better: Vec<_> = (0..7).map(|_| score(-0.1, -10.0)).collect();
        let g = group_utterances(&all_better, DEFAULT_WER_TOL);
        assert_eq!(g.both_improved, 7);
        assert_eq!(g.total(), 7);
        assert_eq!(
            classify(&score(-0.1, 0.0), DEFAULT_WER_TOL),
            ChangeGroup::UedImprovedWerUnchanged
        );
        assert_eq!(
            classify(&score(-0.1, 25.0), DEFAULT_WER_TOL),
            ChangeGroup::UedImprovedWerDegraded
        );
        assert_eq!(
            classify(&score(0.0, -25.0), DEFAULT_WER_TOL),
            ChangeGroup::Others
        );
        assert_eq!(
            classify(&score(0.2, 0.0), DEFAULT_WER_TOL),
            ChangeGroup::Others
        );
    }

    fn seq() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..5, 0..=8)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn matches_recursive_definition(a in seq(), b in seq()) {
            prop_assert_eq!(levenshtein(&a, &b), lev_rec(&a, &b));
        }

        #[test]
        fn is_a_metric(a in seq(), b in seq(), c in seq()) {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }

        #[test]
        fn groups_partition(scores in prop::collection::vec((0.0f64..2.0, 0.0f64..2.0, 0u8..4, 0u8..4), 0..50)) {
            let scores: Vec<_> = scores.into_iter().map(|(a, b, c, d)| UtteranceScore {
                utt_id: String::new(),
                ued_noisy: a,
                ued_enh: b,
                wer_noisy: 25.0 * c as f64,
                wer_enh: 25.0 * d as f64,
            }).collect();
            prop_assert_eq!(group_utterances(&scores, DEFAULT_WER_TOL).total(), scores.len());
        }
    }
}
