//! Experiment configuration: one TOML file drives every stage.
//!
//! Every section has defaults, so a config file only needs the keys it
//! changes. Training seeds are offsets added to the global `seed`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tokenhance::enhance::{EnhancerConfig, ModelKind, TrainConfig};
use tokenhance::signal::{FbankConfig, NoiseKind, SynthTiming};
use tokenhance::tokenizer::KMeansConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub fbank: FbankConfig,
    pub tokenizer: TokenizerConfig,
    pub bpe: BpeConfig,
    pub w2w: W2wConfig,
    #[serde(default = "ModelSection::t2t")]
    pub t2t: ModelSection,
    #[serde(default = "ModelSection::v2t_mlp")]
    pub v2t_mlp: ModelSection,
    #[serde(default = "ModelSection::v2t_tcn")]
    pub v2t_tcn: ModelSection,
    #[serde(default = "ModelSection::w2t")]
    pub w2t: ModelSection,
    #[serde(default = "ModelSection::asr_backend")]
    pub asr_backend: ModelSection,
    pub depth_sweep: DepthSweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 20250,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            fbank: FbankConfig::default(),
            tokenizer: TokenizerConfig::default(),
            bpe: BpeConfig::default(),
            w2w: W2wConfig::default(),
            t2t: ModelSection::t2t(),
            v2t_mlp: ModelSection::v2t_mlp(),
            v2t_tcn: ModelSection::v2t_tcn(),
            w2t: ModelSection::w2t(),
            asr_backend: ModelSection::asr_backend(),
            depth_sweep: DepthSweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_words: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Inclusive range of words per utterance.
    pub min_words: usize,
    pub max_words: usize,
    /// SNR drawn uniformly from `[snr_db_min, snr_db_max]`.
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub noise_kinds: Vec<NoiseKind>,
    pub timing: SynthTiming,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_words: 20,
            n_train: 500,
            n_dev: 50,
            n_test: 100,
            min_words: 2,
            max_words: 5,
            snr_db_min: 0.0,
            snr_db_max: 10.0,
            noise_kinds: vec![NoiseKind::White, NoiseKind::Pink],
            timing: SynthTiming::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub k: usize,
    /// Upper bound on clean training frames fed to k-means (seeded subsample).
    pub max_train_frames: usize,
    pub kmeans: KMeansConfig,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            k: 64,
            max_train_frames: 20_000,
            kmeans: KMeansConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpeConfig {
    pub target_vocab: usize,
}

impl Default for BpeConfig {
    fn default() -> Self {
        Self { target_vocab: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct W2wConfig {
    /// Leading analysis frames used as the noise estimate.
    pub noise_profile_frames: usize,
}

impl Default for W2wConfig {
    fn default() -> Self {
        Self {
            noise_profile_frames: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub model: EnhancerConfig,
    pub train: TrainConfig,
}

impl ModelSection {
    fn for_kind(kind: ModelKind) -> Self {
        Self {
            model: EnhancerConfig::default_for(kind),
            train: TrainConfig::default_for(kind),
        }
    }

    pub fn t2t() -> Self {
        Self::for_kind(ModelKind::T2t)
    }

    pub fn v2t_mlp() -> Self {
        Self::for_kind(ModelKind::V2tMlp)
    }

    pub fn v2t_tcn() -> Self {
        Self::for_kind(ModelKind::V2tTcn)
    }

    pub fn w2t() -> Self {
        Self::for_kind(ModelKind::W2t)
    }

    pub fn asr_backend() -> Self {
        Self::for_kind(ModelKind::AsrBackend)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthSweepConfig {
    pub depths: Vec<usize>,
    /// Epochs per sweep model; defaults to the W2T training epochs.
    pub epochs: Option<usize>,
}

impl Default for DepthSweepConfig {
    fn default() -> Self {
        Self {
            depths: vec![1, 2, 4],
            epochs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg = Self::from_toml_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config whose tables override the defaults key by key, so a
    /// partial `[t2t.train]` keeps the T2T-specific model and training defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(Self::default())?;
        merge_tables(&mut merged, overrides);
        Ok(merged.try_into()?)
    }

    pub fn section(&self, kind: ModelKind) -> &ModelSection {
        match kind {
            ModelKind::T2t => &self.t2t,
            ModelKind::V2tMlp => &self.v2t_mlp,
            ModelKind::V2tTcn => &self.v2t_tcn,
            ModelKind::W2t => &self.w2t,
            ModelKind::AsrBackend => &self.asr_backend,
        }
    }

    /// Training config with the seed offset resolved against the global seed.
    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        let mut train = self.section(kind).train.clone();
        train.seed = self.seed.wrapping_add(train.seed);
        train
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.n_words == 0 || c.n_train == 0 || c.n_test == 0 {
            bail!("corpus needs words and non-empty train and test splits");
        }
        if c.min_words == 0 || c.min_words > c.max_words {
            bail!(
                "invalid words-per-utterance range {}..={}",
                c.min_words,
                c.max_words
            );
        }
        if c.snr_db_min.is_nan() || c.snr_db_max.is_nan() || c.snr_db_min > c.snr_db_max {
            bail!("invalid SNR range [{}, {}]", c.snr_db_min, c.snr_db_max);
        }
        if c.noise_kinds.is_empty() {
            bail!("at least one noise kind is required");
        }
        if c.timing.sample_rate != self.fbank.sample_rate {
            bail!(
                "corpus sample rate {} differs from fbank sample rate {}",
                c.timing.sample_rate,
                self.fbank.sample_rate
            );
        }
        if self.tokenizer.k == 0 || self.tokenizer.max_train_frames < self.tokenizer.k {
            bail!("tokenizer needs k >= 1 and max_train_frames >= k");
        }
        if self.bpe.target_vocab < self.tokenizer.k {
            bail!("bpe target_vocab must be at least k");
        }
        for kind in ModelKind::ENHANCERS
            .into_iter()
            .chain([ModelKind::AsrBackend])
        {
            let s = self.section(kind);
            if s.model.kind != kind {
                bail!("section for {kind} declares kind {}", s.model.kind);
            }
            s.model.validate()?;
            s.train.validate()?;
        }
        if self.depth_sweep.depths.contains(&0) {
            bail!("depth sweep depths must be at least 1");
        }
        Ok(())
    }
}

fn merge_tables(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(inner)), toml::Value::Table(over)) => {
                merge_tables(inner, over)
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}
