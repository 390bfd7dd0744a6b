//! On-disk corpus layout: per-split JSONL manifests, WAV files, token files.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tokenhance::signal::{Fbank, NoiseKind, Waveform};
use tokenhance::tokenseq::{read_token_file, Origin, TokenForm, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

/// Clean or noisy side of an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Clean,
    Noisy,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Noisy => "noisy",
        }
    }

    pub fn origin(self) -> Origin {
        match self {
            Condition::Clean => Origin::Clean,
            Condition::Noisy => Origin::Noisy,
        }
    }
}

/// One line of a split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UttRecord {
    pub utt_id: String,
    /// Space-separated word ids.
    pub transcript: String,
    pub clean_path: String,
    pub noisy_path: String,
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

impl UttRecord {
    pub fn words(&self) -> Result<Vec<usize>> {
        self.transcript
            .split_whitespace()
            .map(|w| {
                w.parse()
                    .with_context(|| format!("{}: bad word id '{w}'", self.utt_id))
            })
            .collect()
    }

    pub fn wav_path(&self, cond: Condition) -> &str {
        match cond {
            Condition::Clean => &self.clean_path,
            Condition::Noisy => &self.noisy_path,
        }
    }
}

/// SplitMix64 finalizer; decorrelates per-utterance seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn utterance_seed(global: u64, split: Split, index: usize) -> u64 {
    mix_seed(mix_seed(global ^ (split.code() << 56)) ^ index as u64)
}

pub fn utterance_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

pub fn manifest_rel(split: Split) -> String {
    format!("corpus/{}.jsonl", split.name())
}

pub fn read_records(dir: &Path, split: Split) -> Result<Vec<UttRecord>> {
    let path = dir.join(manifest_rel(split));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
        .collect()
}

pub fn load_waves(dir: &Path, records: &[UttRecord], cond: Condition) -> Result<Vec<Waveform>> {
    records
        .par_iter()
        .map(|r| {
            let path = dir.join(r.wav_path(cond));
            Waveform::read_wav(&path).with_context(|| format!("reading {}", path.display()))
        })
        .collect()
}

pub fn compute_fbanks(fbank: &Fbank, waves: &[Waveform]) -> Result<Vec<Array2<f64>>> {
    waves
        .par_iter()
        .map(|w| Ok(fbank.compute(w)?.frames))
        .collect()
}

pub fn token_rel(split: Split, cond: Condition, form: TokenForm) -> String {
    let suffix = match form {
        TokenForm::Duplicated => "dup",
        TokenForm::Deduplicated => "dedup",
        TokenForm::Bpe => "bpe",
    };
    let dir = if form == TokenForm::Bpe {
        "bpe"
    } else {
        "tokens"
    };
    format!("{dir}/{}.{}.{suffix}.txt", split.name(), cond.name())
}

/// Reads a token file and checks it lines up with the split manifest.
pub fn read_tokens(
    dir: &Path,
    rel: &str,
    records: &[UttRecord],
    vocab: usize,
    form: TokenForm,
    origin: Origin,
) -> Result<Vec<TokenSequence>> {
    let entries = read_token_file(dir.join(rel)).with_context(|| format!("reading {rel}"))?;
    if entries.len() != records.len() {
        bail!(
            "{rel} has {} utterances, manifest has {}",
            entries.len(),
            records.len()
        );
    }
    entries
        .into_iter()
        .zip(records)
        .map(|((id, ids), r)| {
            if id != r.utt_id {
                bail!("{rel}: expected {} but found {id}", r.utt_id);
            }
            TokenSequence::new(ids, vocab, form, origin).with_context(|| format!("{rel}: {id}"))
        })
        .collect()
}

pub fn token_entries(records: &[UttRecord], seqs: &[TokenSequence]) -> Vec<(String, Vec<usize>)> {
    records
        .iter()
        .zip(seqs)
        .map(|(r, s)| (r.utt_id.clone(), s.ids().to_vec()))
        .collect()
}
