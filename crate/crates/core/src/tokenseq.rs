//! Token sequences, run-length deduplication, BPE subword modeling and
//! sequence-length statistics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenForm {
    Duplicated,
    Deduplicated,
    Bpe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Clean,
    Noisy,
    Enhanced,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    vocab_size: usize,
    form: TokenForm,
    origin: Origin,
}

impl TokenSequence {
    pub fn new(
        ids: Vec<usize>,
        vocab_size: usize,
        form: TokenForm,
        origin: Origin,
    ) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: vocab_size,
            });
        }
        if form == TokenForm::Deduplicated && ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Parse(
                "deduplicated sequence has adjacent repeated ids".into(),
            ));
        }
        Ok(Self {
            ids,
            vocab_size,
            form,
            origin,
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.ids
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn form(&self) -> TokenForm {
        self.form
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    fn expect_form(&self, expected: TokenForm) -> Result<()> {
        if self.form == expected {
            Ok(())
        } else {
            Err(Error::WrongForm {
                expected,
                got: self.form,
            })
        }
    }
}

/// Collapses runs of equal ids.
pub fn dedup_ids(ids: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(ids.len());
    for &id in ids {
        if out.last() != Some(&id) {
            out.push(id);
        }
    }
    out
}

pub fn dedup(seq: &TokenSequence) -> TokenSequence {
    TokenSequence {
        ids: dedup_ids(&seq.ids),
        vocab_size: seq.vocab_size,
        form: TokenForm::Deduplicated,
        origin: seq.origin,
    }
}

// ---------------------------------------------------------------------------
// BPE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    base_vocab: usize,
    target_vocab: usize,
    merges: Vec<Merge>,
}

/// Pairs seen fewer times than this are never merged.
pub const MIN_PAIR_COUNT: usize = 2;

fn apply_merge(ids: &[usize], merge: &Merge) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == merge.left && ids[i + 1] == merge.right {
            out.push(merge.id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Greedy pair merging: at each step the most frequent adjacent pair wins,
/// ties going to the lexicographically smallest `(left, right)`.
pub fn bpe_train(corpus: &[TokenSequence], target_vocab: usize) -> Result<BpeModel> {
    let first = corpus.first().ok_or(Error::EmptyCorpus)?;
    let base_vocab = first.vocab_size;
    for seq in corpus {
        seq.expect_form(TokenForm::Deduplicated)?;
        if seq.vocab_size != base_vocab {
            return Err(Error::DimensionMismatch {
                expected: base_vocab,
                got: seq.vocab_size,
            });
        }
    }
    if target_vocab < base_vocab {
        return Err(Error::Config(format!(
            "target vocabulary {target_vocab} is smaller than base vocabulary {base_vocab}"
        )));
    }
    let mut working: Vec<Vec<usize>> = corpus.iter().map(|s| s.ids.clone()).collect();
    let mut merges = Vec::new();
    while base_vocab + merges.len() < target_vocab {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for seq in &working {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= MIN_PAIR_COUNT)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)));
        let Some(((left, right), _)) = best else {
            break;
        };
        let merge = Merge {
            left,
            right,
            id: base_vocab + merges.len(),
        };
        for seq in &mut working {
            *seq = apply_merge(seq, &merge);
        }
        merges.push(merge);
    }
    Ok(BpeModel {
        base_vocab,
        target_vocab,
        merges,
    })
}

impl BpeModel {
    pub fn new(base_vocab: usize, target_vocab: usize, merges: Vec<Merge>) -> Result<Self> {
        if target_vocab < base_vocab || merges.len() > target_vocab - base_vocab {
            return Err(Error::Parse(format!(
                "{} merges do not fit between base {base_vocab} and target {target_vocab}",
                merges.len()
            )));
        }
        for (i, m) in merges.iter().enumerate() {
            let id = base_vocab + i;
            if m.id != id {
                return Err(Error::Parse(format!(
                    "merge {i} has id {}, expected {id}",
                    m.id
                )));
            }
            if m.left >= id || m.right >= id {
                return Err(Error::Parse(format!(
                    "merge {i} references undefined unit ({}, {})",
                    m.left, m.right
                )));
            }
        }
        Ok(Self {
            base_vocab,
            target_vocab,
            merges,
        })
    }

    pub fn base_vocab(&self) -> usize {
        self.base_vocab
    }

    pub fn target_vocab(&self) -> usize {
        self.target_vocab
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Number of defined units: base ids plus one per merge.
    pub fn vocab_size(&self) -> usize {
        self.base_vocab + self.merges.len()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "version 1 base {} target {}\n",
            self.base_vocab, self.target_vocab
        );
        for m in &self.merges {
            let _ = writeln!(out, "{} {} {}", m.left, m.right, m.id);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Parse("empty BPE model file".into()))?
            .split_whitespace()
            .collect();
        let (base, target) = match header.as_slice() {
            ["version", "1", "base", b, "target", t] => (parse_usize(b)?, parse_usize(t)?),
            _ => return Err(Error::Parse(format!("bad BPE header {header:?}"))),
        };
        let mut merges = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<usize> = line
                .split_whitespace()
                .map(parse_usize)
                .collect::<Result<_>>()?;
            match fields.as_slice() {
                &[left, right, id] => merges.push(Merge { left, right, id }),
                _ => return Err(Error::Parse(format!("bad merge line {line:?}"))),
            }
        }
        Self::new(base, target, merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    fn expand_into(&self, id: usize, out: &mut Vec<usize>) -> Result<()> {
        if id < self.base_vocab {
            out.push(id);
            return Ok(());
        }
        let merge = self
            .merges
            .get(id - self.base_vocab)
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.vocab_size(),
            })?;
        self.expand_into(merge.left, out)?;
        self.expand_into(merge.right, out)
    }
}

/// Applies every merge in model order, each exhaustively left to right.
pub fn bpe_encode(seq: &TokenSequence, model: &BpeModel) -> Result<TokenSequence> {
    seq.expect_form(TokenForm::Deduplicated)?;
    if let Some(&id) = seq.ids.iter().find(|&&id| id >= model.base_vocab) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: model.base_vocab,
        });
    }
    let mut ids = seq.ids.clone();
    for merge in &model.merges {
        if ids.len() < 2 {
            break;
        }
        ids = apply_merge(&ids, merge);
    }
    Ok(TokenSequence {
        ids,
        vocab_size: model.vocab_size(),
        form: TokenForm::Bpe,
        origin: seq.origin,
    })
}

pub fn bpe_decode(seq: &TokenSequence, model: &BpeModel) -> Result<TokenSequence> {
    seq.expect_form(TokenForm::Bpe)?;
    let mut ids = Vec::with_capacity(seq.ids.len() * 2);
    for &id in &seq.ids {
        model.expand_into(id, &mut ids)?;
    }
    TokenSequence::new(ids, model.base_vocab, TokenForm::Deduplicated, seq.origin)
}

// ---------------------------------------------------------------------------
// Length statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub frames: usize,
    pub dedup_len: usize,
    pub bpe_len: usize,
    /// `1 - dedup/frames`
    pub dedup_reduction: f64,
    /// `1 - bpe/dedup`
    pub bpe_reduction: f64,
    /// `1 - bpe/frames`
    pub total_reduction: f64,
}

fn reduction(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        1.0 - after as f64 / before as f64
    }
}

pub fn length_stats(frames: usize, dedup_len: usize, bpe_len: usize) -> CompressionReport {
    CompressionReport {
        frames,
        dedup_len,
        bpe_len,
        dedup_reduction: reduction(frames, dedup_len),
        bpe_reduction: reduction(dedup_len, bpe_len),
        total_reduction: reduction(frames, bpe_len),
    }
}

impl CompressionReport {
    /// Corpus-level report from summed lengths, i.e. the length-weighted mean
    /// of the per-utterance ratios.
    pub fn aggregate(reports: &[CompressionReport]) -> CompressionReport {
        let frames = reports.iter().map(|r| r.frames).sum();
        let dedup = reports.iter().map(|r| r.dedup_len).sum();
        let bpe = reports.iter().map(|r| r.bpe_len).sum();
        length_stats(frames, dedup, bpe)
    }
}

// ---------------------------------------------------------------------------
// Token files: one utterance per line, `utt_id<TAB>space-separated ids`.
// ---------------------------------------------------------------------------

fn parse_usize(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Parse(format!("expected a non-negative integer, got {s:?}")))
}

pub fn format_token_lines(entries: &[(String, Vec<usize>)]) -> String {
    let mut out = String::new();
    for (utt, ids) in entries {
        out.push_str(utt);
        out.push('\t');
        for (i, id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{id}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_token_lines(text: &str) -> Result<Vec<(String, Vec<usize>)>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let (utt, ids) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("token line without tab: {line:?}")))?;
            let ids = ids
                .split_whitespace()
                .map(parse_usize)
                .collect::<Result<Vec<_>>>()?;
            Ok((utt.to_string(), ids))
        })
        .collect()
}

pub fn write_token_file(path: impl AsRef<Path>, entries: &[(String, Vec<usize>)]) -> Result<()> {
    std::fs::write(path, format_token_lines(entries))?;
    Ok(())
}

pub fn read_token_file(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<usize>)>> {
    parse_token_lines(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dedup_seq(ids: Vec<usize>, vocab: usize) -> TokenSequence {
        TokenSequence::new(ids, vocab, TokenForm::Deduplicated, Origin::Clean).unwrap()
    }

    #[test]
    fn dedup_collapses_runs() {
        let s = TokenSequence::new(
            vec![5, 5, 3, 3, 3, 7],
            8,
            TokenForm::Duplicated,
            Origin::Noisy,
        )
        .unwrap();
        let d = dedup(&s);
        assert_eq!(d.ids(), &[5, 3, 7]);
        assert_eq!(d.form(), TokenForm::Deduplicated);
        assert_eq!(d.origin(), Origin::Noisy);
        assert!(dedup_ids(&[]).is_empty());
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let model = bpe_train(&[dedup_seq(vec![1, 2, 1, 2, 3], 64)], 65).unwrap();
        assert_eq!(
            model.merges(),
            &[Merge {
                left: 1,
                right: 2,
                id: 64
            }]
        );
    }

    #[test]
    fn ties_go_to_smallest_pair() {
        // (1,2) and (3,4) both occur twice; (1,2) wins.
        let model = bpe_train(&[dedup_seq(vec![3, 4, 1, 2, 3, 4, 1, 2], 8)], 9).unwrap();
        assert_eq!((model.merges()[0].left, model.merges()[0].right), (1, 2));
    }

    #[test]
    fn singletons_are_not_merged() {
        let model = bpe_train(&[dedup_seq(vec![1, 2, 3, 4], 8)], 16).unwrap();
        assert!(model.merges().is_empty());
    }

    #[test]
    fn target_equal_base_is_identity() {
        let corpus = [dedup_seq(vec![1, 2, 1, 2, 3], 8)];
        let model = bpe_train(&corpus, 8).unwrap();
        assert!(model.merges().is_empty());
        assert_eq!(
            bpe_encode(&corpus[0], &model).unwrap().ids(),
            corpus[0].ids()
        );
    }

    #[test]
    fn encode_and_decode_by_hand() {
        let model = BpeModel::new(
            64,
            65,
            vec![Merge {
                left: 1,
                right: 2,
                id: 64,
            }],
        )
        .unwrap();
        let enc = bpe_encode(&dedup_seq(vec![1, 2, 3, 1, 2], 64), &model).unwrap();
        assert_eq!(enc.ids(), &[64, 3, 64]);
        let dec = bpe_decode(&enc, &model).unwrap();
        assert_eq!(dec.ids(), &[1, 2, 3, 1, 2]);

        let plain = bpe_encode(&dedup_seq(vec![3, 4, 5], 64), &model).unwrap();
        assert_eq!(plain.ids(), &[3, 4, 5]);
        assert_eq!(bpe_decode(&plain, &model).unwrap().ids(), &[3, 4, 5]);

        let empty = TokenSequence::new(vec![], 65, TokenForm::Bpe, Origin::Clean).unwrap();
        assert!(bpe_decode(&empty, &model).unwrap().is_empty());
    }

    #[test]
    fn encode_rejects_out_of_base_ids_and_decode_unknown_ids() {
        let model = BpeModel::new(
            4,
            5,
            vec![Merge {
                left: 1,
                right: 2,
                id: 4,
            }],
        )
        .unwrap();
        let bad = dedup_seq(vec![1, 4], 8);
        assert!(matches!(
            bpe_encode(&bad, &model),
            Err(Error::TokenOutOfRange { id: 4, .. })
        ));
        let unknown = TokenSequence::new(vec![7], 8, TokenForm::Bpe, Origin::Clean).unwrap();
        assert!(matches!(
            bpe_decode(&unknown, &model),
            Err(Error::TokenOutOfRange { id: 7, .. })
        ));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(bpe_train(&[], 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn model_text_format() {
        let model = BpeModel::new(
            4,
            6,
            vec![
                Merge {
                    left: 1,
                    right: 2,
                    id: 4,
                },
                Merge {
                    left: 4,
                    right: 3,
                    id: 5,
                },
            ],
        )
        .unwrap();
        let text = model.to_text();
        assert_eq!(text, "version 1 base 4 target 6\n1 2 4\n4 3 5\n");
        assert_eq!(BpeModel::from_text(&text).unwrap(), model);
        assert!(BpeModel::from_text("version 1 base 4 target 6\n1 5 4\n").is_err());
    }

    #[test]
    fn length_stats_examples() {
        let r = length_stats(100, 50, 31);
        assert!((r.total_reduction - 0.69).abs() < 1e-12);
        assert!((r.dedup_reduction - 0.5).abs() < 1e-12);
        assert!((r.bpe_reduction - 0.38).abs() < 1e-12);
        let same = length_stats(40, 40, 40);
        assert_eq!(same.total_reduction, 0.0);
        let zero = length_stats(0, 0, 0);
        assert_eq!(
            (
                zero.dedup_reduction,
                zero.bpe_reduction,
                zero.total_reduction
            ),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn aggregate_is_length_weighted_mean() {
        let raw = [(100, 50, 31), (10, 9, 9), (300, 120, 60)];
        let reports: Vec<_> = raw.iter().map(|&(f, d, b)| length_stats(f, d, b)).collect();
        let agg = CompressionReport::aggregate(&reports);
        let frames: f64 = raw.iter().map(|r| r.0 as f64).sum();
        let weighted: f64 = reports
            .iter()
            .map(|r| r.total_reduction * r.frames as f64)
            .sum::<f64>()
            / frames;
        assert!((agg.total_reduction - weighted).abs() < 1e-12);
        let dedup_total: f64 = raw.iter().map(|r| r.1 as f64).sum();
        let weighted_bpe: f64 = reports
            .iter()
            .map(|r| r.bpe_reduction * r.dedup_len as f64)
            .sum::<f64>()
            / dedup_total;
        assert!((agg.bpe_reduction - weighted_bpe).abs() < 1e-12);
    }

    #[test]
    fn token_file_lines() {
        let entries = vec![
            ("u1".to_string(), vec![1, 2, 3]),
            ("u2".to_string(), vec![]),
        ];
        let text = format_token_lines(&entries);
        assert_eq!(text, "u1\t1 2 3\nu2\t\n");
        assert_eq!(parse_token_lines(&text).unwrap(), entries);
        assert!(parse_token_lines("u1 1 2").is_err());
    }

    fn random_dedup() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..12, 0..40).prop_map(|v| dedup_ids(&v))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn dedup_is_idempotent_and_shrinks(v in prop::collection::vec(0usize..6, 0..60)) {
            let once = dedup_ids(&v);
            prop_assert!(once.len() <= v.len());
            prop_assert_eq!(dedup_ids(&once), once);
        }

        #[test]
        fn bpe_roundtrip(corpus in prop::collection::vec(random_dedup(), 1..6), probe in random_dedup(), extra in 0usize..20) {
            let corpus: Vec<_> = corpus.into_iter().map(|v| dedup_seq(v, 12)).collect();
            let model = bpe_train(&corpus, 12 + extra).unwrap();
            prop_assert!(model.merges().len() <= extra);
            let seq = dedup_seq(probe, 12);
            let enc = bpe_encode(&seq, &model).unwrap();
            prop_assert!(enc.len() <= seq.len());
            let dec = bpe_decode(&enc, &model).unwrap();
            prop_assert_eq!(dec.ids(), seq.ids());
            // Reproducible merge order.
            prop_assert_eq!(bpe_train(&corpus, 12 + extra).unwrap(), model);
        }
    }
}
