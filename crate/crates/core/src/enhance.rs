//! Token enhancers and the CTC token-ASR backend: architectures, training
//! pairs, the CTC trainer, enhancement, and the encoder-depth sweep.
//!
//! Four enhancer families differ only in what they read:
//! - `T2t`: duplicated noisy tokens through an embedding,
//! - `V2tMlp` / `V2tTcn`: a trainable weighted sum of {FBANK, delta, delta-delta},
//! - `W2t`: raw noisy FBANK frames through a trainable conv encoder with a
//!   single linear head, the encoder frozen for the first training steps.
//!
//! All of them emit CTC logits over the base token vocabulary plus blank.
//! The backend has the T2T shape but reads BPE units and emits word ids.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctc::{ctc_greedy_decode, ctc_loss, is_feasible, min_frames};
use crate::error::{Error, Result};
use crate::metrics::{ued_ids, EditTotals};
use crate::nnet::{adam_step, AdamConfig, NetInput, Network, NetworkBuilder, Parameter};
use crate::signal::deltas;
use crate::tokenseq::{bpe_encode, dedup_ids, BpeModel, Origin, TokenForm, TokenSequence};

/// Delta regression half-window used for the V2T layer stack.
pub const DELTA_WINDOW: usize = 2;
pub const CONV_WIDTH: usize = 3;
/// Dilations inside one T2T / backend conv block.
pub const T2T_DILATIONS: [usize; 3] = [1, 2, 4];
/// Dilations inside one V2T-TCN block.
pub const TCN_DILATIONS: [usize; 4] = [1, 2, 4, 8];
pub const CONV_BLOCKS: usize = 2;
/// More than this fraction of infeasible pairs is treated as misconfiguration.
pub const MAX_INFEASIBLE_FRACTION: f64 = 0.10;
/// Name prefix of the W2T encoder parameters (everything but the head).
pub const ENCODER_PREFIX: &str = "enc.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    T2t,
    V2tMlp,
    V2tTcn,
    W2t,
    AsrBackend,
}

impl ModelKind {
    pub const ENHANCERS: [ModelKind; 4] = [
        ModelKind::T2t,
        ModelKind::V2tMlp,
        ModelKind::V2tTcn,
        ModelKind::W2t,
    ];

    pub fn input_kind(self) -> InputKind {
        match self {
            ModelKind::T2t | ModelKind::AsrBackend => InputKind::Tokens,
            ModelKind::V2tMlp | ModelKind::V2tTcn => InputKind::Stack,
            ModelKind::W2t => InputKind::Frames,
        }
    }

    /// Slug used in file names and on the command line.
    pub fn slug(self) -> &'static str {
        match self {
            ModelKind::T2t => "t2t",
            ModelKind::V2tMlp => "v2t-mlp",
            ModelKind::V2tTcn => "v2t-tcn",
            ModelKind::W2t => "w2t",
            ModelKind::AsrBackend => "asr-backend",
        }
    }

    /// Label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::T2t => "T2T",
            ModelKind::V2tMlp => "V2T_MLP",
            ModelKind::V2tTcn => "V2T_TCN",
            ModelKind::W2t => "W2T",
            ModelKind::AsrBackend => "ASR_BACKEND",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ModelKind::T2t,
            ModelKind::V2tMlp,
            ModelKind::V2tTcn,
            ModelKind::W2t,
            ModelKind::AsrBackend,
        ]
        .into_iter()
        .find(|k| k.slug() == s)
        .ok_or_else(|| Error::Config(format!("unknown model kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Tokens,
    Stack,
    Frames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancerConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    /// Token embedding width (token-input kinds only).
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Number of residual conv layers in the W2T encoder.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Steps during which the W2T encoder is frozen; `None` means the first
    /// 10% of all training steps.
    #[serde(default)]
    pub freeze_frontend_steps: Option<usize>,
}

fn default_embed_dim() -> usize {
    64
}

fn default_depth() -> usize {
    4
}

impl EnhancerConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        let hidden_dim = match kind {
            ModelKind::V2tMlp => 128,
            _ => 64,
        };
        Self {
            kind,
            hidden_dim,
            embed_dim: default_embed_dim(),
            depth: default_depth(),
            freeze_frontend_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config(format!(
                "{}: hidden_dim must be positive",
                self.kind
            )));
        }
        if self.kind.input_kind() == InputKind::Tokens && self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "{}: embed_dim must be positive",
                self.kind
            )));
        }
        if self.kind == ModelKind::W2t && self.depth == 0 {
            return Err(Error::Config(
                "w2t: depth must be at least 1 (the head needs an encoder)".into(),
            ));
        }
        Ok(())
    }

    /// Resolved freeze length for a run of `total_steps`.
    pub fn freeze_steps(&self, total_steps: usize) -> usize {
        if self.kind != ModelKind::W2t {
            return 0;
        }
        self.freeze_frontend_steps.unwrap_or(total_steps / 10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Linear warmup over this fraction of all steps, then constant.
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
}

fn default_warmup() -> f64 {
    0.05
}

impl TrainConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        let lr = match kind {
            ModelKind::T2t => 5e-3,
            ModelKind::V2tMlp => 1e-3,
            ModelKind::V2tTcn => 1e-3,
            ModelKind::W2t => 1e-3,
            ModelKind::AsrBackend => 3e-3,
        };
        Self {
            epochs: 30,
            batch_size: 16,
            lr,
            seed: 0,
            warmup_fraction: default_warmup(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = (self.warmup_fraction * total_steps as f64).ceil() as usize;
        if warmup == 0 || step >= warmup {
            self.lr
        } else {
            self.lr * step as f64 / warmup as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Inputs and normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum EnhancerInput {
    Tokens(Vec<usize>),
    Stack(Vec<Array2<f64>>),
    Frames(Array2<f64>),
}

impl EnhancerInput {
    pub fn kind(&self) -> InputKind {
        match self {
            EnhancerInput::Tokens(_) => InputKind::Tokens,
            EnhancerInput::Stack(_) => InputKind::Stack,
            EnhancerInput::Frames(_) => InputKind::Frames,
        }
    }

    pub fn num_frames(&self) -> usize {
        match self {
            EnhancerInput::Tokens(ids) => ids.len(),
            EnhancerInput::Stack(layers) => layers.first().map_or(0, |l| l.nrows()),
            EnhancerInput::Frames(x) => x.nrows(),
        }
    }

    fn as_net_input(&self) -> NetInput<'_> {
        match self {
            EnhancerInput::Tokens(ids) => NetInput::Tokens(ids),
            EnhancerInput::Stack(layers) => NetInput::Stack(layers),
            EnhancerInput::Frames(x) => NetInput::Frames(x.view()),
        }
    }

    fn hash_into(&self, hasher: &mut Sha256) {
        match self {
            EnhancerInput::Tokens(ids) => ids
                .iter()
                .for_each(|&i| hasher.update((i as u64).to_le_bytes())),
            EnhancerInput::Stack(layers) => layers
                .iter()
                .flat_map(|l| l.iter())
                .for_each(|v| hasher.update(v.to_bits().to_le_bytes())),
            EnhancerInput::Frames(x) => x
                .iter()
                .for_each(|v| hasher.update(v.to_bits().to_le_bytes())),
        }
    }
}

/// `[FBANK, delta, delta-delta]`, the layer stack read by the V2T models.
pub fn feature_stack(fbank: &Array2<f64>) -> Vec<Array2<f64>> {
    let d1 = deltas(fbank.view(), DELTA_WINDOW);
    let d2 = deltas(d1.view(), DELTA_WINDOW);
    vec![fbank.clone(), d1, d2]
}

/// Builds the input a model of `kind` reads from one utterance.
pub fn model_input(kind: ModelKind, fbank: &Array2<f64>, tokens: &TokenSequence) -> EnhancerInput {
    match kind.input_kind() {
        InputKind::Tokens => EnhancerInput::Tokens(tokens.ids().to_vec()),
        InputKind::Stack => EnhancerInput::Stack(feature_stack(fbank)),
        InputKind::Frames => EnhancerInput::Frames(fbank.clone()),
    }
}

/// Per-layer, per-dimension standardization fitted on training inputs.
/// Part of the model but never trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

const STD_FLOOR: f64 = 1e-6;

impl Normalizer {
    pub fn fit<'a>(layers_per_utt: impl Iterator<Item = &'a [Array2<f64>]>) -> Result<Self> {
        let mut sum: Vec<Array1<f64>> = Vec::new();
        let mut sq: Vec<Array1<f64>> = Vec::new();
        let mut count = 0usize;
        for layers in layers_per_utt {
            if sum.is_empty() {
                sum = layers.iter().map(|l| Array1::zeros(l.ncols())).collect();
                sq = sum.clone();
            }
            if layers.len() != sum.len() {
                return Err(Error::Shape(
                    "inconsistent layer count across utterances".into(),
                ));
            }
            for (i, l) in layers.iter().enumerate() {
                if l.ncols() != sum[i].len() {
                    return Err(Error::DimensionMismatch {
                        expected: sum[i].len(),
                        got: l.ncols(),
                    });
                }
                sum[i] += &l.sum_axis(ndarray::Axis(0));
                sq[i] += &l.mapv(|v| v * v).sum_axis(ndarray::Axis(0));
            }
            count += layers.first().map_or(0, |l| l.nrows());
        }
        if count == 0 {
            return Err(Error::EmptyCorpus);
        }
        let n = count as f64;
        let mean: Vec<Vec<f64>> = sum
            .iter()
            .map(|s| s.iter().map(|v| v / n).collect())
            .collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                q.iter()
                    .zip(m)
                    .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
                    .collect()
            })
            .collect();
        Ok(Self { mean, std })
    }

    fn apply_layer(&self, i: usize, x: &Array2<f64>) -> Result<Array2<f64>> {
        let (mean, std) = (&self.mean[i], &self.std[i]);
        if x.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: x.ncols(),
            });
        }
        let mut out = x.clone();
        for mut row in out.outer_iter_mut() {
            for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn apply(&self, input: &EnhancerInput) -> Result<EnhancerInput> {
        match input {
            EnhancerInput::Tokens(_) => Ok(input.clone()),
            EnhancerInput::Frames(x) => {
                self.check_layers(1)?;
                Ok(EnhancerInput::Frames(self.apply_layer(0, x)?))
            }
            EnhancerInput::Stack(layers) => {
                self.check_layers(layers.len())?;
                let out = layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| self.apply_layer(i, l))
                    .collect::<Result<_>>()?;
                Ok(EnhancerInput::Stack(out))
            }
        }
    }

    fn check_layers(&self, n: usize) -> Result<()> {
        if self.mean.len() != n {
            return Err(Error::Shape(format!(
                "normalizer has {} layers, input {n}",
                self.mean.len()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerModel {
    pub config: EnhancerConfig,
    /// Token vocabulary (token kinds) or feature dimension (frame kinds).
    pub input_dim: usize,
    /// Output labels excluding blank; logits have `output_vocab + 1` columns.
    pub output_vocab: usize,
    pub network: Network,
    pub normalizer: Option<Normalizer>,
}

/// Number of V2T stack layers (FBANK, delta, delta-delta).
pub const STACK_LAYERS: usize = 3;

/// Builds any of the five architectures with seeded initialization.
pub fn build_model(
    config: &EnhancerConfig,
    input_dim: usize,
    output_vocab: usize,
    seed: u64,
) -> Result<EnhancerModel> {
    config.validate()?;
    if input_dim == 0 || output_vocab == 0 {
        return Err(Error::Config("model dimensions must be positive".into()));
    }
    let h = config.hidden_dim;
    let head = output_vocab + 1;
    let b = NetworkBuilder::new(seed);
    let network = match config.kind {
        ModelKind::T2t | ModelKind::AsrBackend => {
            let mut b = b.embedding("embed", input_dim, config.embed_dim).linear(
                "proj",
                config.embed_dim,
                h,
            );
            for block in 0..CONV_BLOCKS {
                for d in T2T_DILATIONS {
                    b = b.residual_conv(&format!("block{block}.dil{d}"), CONV_WIDTH, h, d);
                }
            }
            b.linear("head", h, head).build()
        }
        ModelKind::V2tMlp => b
            .weighted_sum("mix", STACK_LAYERS)
            .linear("fc1", input_dim, h)
            .leaky_relu()
            .linear("fc2", h, h)
            .leaky_relu()
            .linear("head", h, head)
            .build(),
        ModelKind::V2tTcn => {
            let mut b = b
                .weighted_sum("mix", STACK_LAYERS)
                .linear("proj", input_dim, h);
            for block in 0..CONV_BLOCKS {
                for d in TCN_DILATIONS {
                    b = b.residual_conv(&format!("block{block}.dil{d}"), CONV_WIDTH, h, d);
                }
            }
            b.linear("head", h, head).build()
        }
        ModelKind::W2t => {
            let mut b = b.linear(&format!("{ENCODER_PREFIX}proj"), input_dim, h);
            for layer in 0..config.depth {
                let d = TCN_DILATIONS[layer % TCN_DILATIONS.len()];
                b = b.residual_conv(&format!("{ENCODER_PREFIX}conv{layer}"), CONV_WIDTH, h, d);
            }
            b.linear("head", h, head).build()
        }
    };
    Ok(EnhancerModel {
        config: config.clone(),
        input_dim,
        output_vocab,
        network,
        normalizer: None,
    })
}

/// Enhancer over a base vocabulary of `vocab_size` tokens; frame kinds read
/// `feature_dim`-dimensional frames.
pub fn build_enhancer(
    config: &EnhancerConfig,
    vocab_size: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<EnhancerModel> {
    if config.kind == ModelKind::AsrBackend {
        return Err(Error::Config(
            "the ASR backend is built by train_token_asr".into(),
        ));
    }
    let input_dim = match config.kind.input_kind() {
        InputKind::Tokens => vocab_size,
        _ => feature_dim,
    };
    build_model(config, input_dim, vocab_size, seed)
}

impl EnhancerModel {
    pub fn num_parameters(&self) -> usize {
        self.network.num_parameters()
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Softmax weights over the V2T stack layers.
    pub fn layer_weights(&self) -> Option<Vec<f64>> {
        self.network
            .params
            .iter()
            .find(|p| p.name.ends_with("mix_logits"))
            .map(|p| {
                crate::nnet::softmax(p.value.view().into_dimensionality().expect("rank 1")).to_vec()
            })
    }

    fn check_input(&self, input: &EnhancerInput) -> Result<()> {
        let expected = self.kind().input_kind();
        if input.kind() != expected {
            return Err(Error::Config(format!(
                "{} expects {expected:?} input, got {:?}",
                self.kind(),
                input.kind()
            )));
        }
        Ok(())
    }

    /// Normalizes frame inputs; token inputs pass through.
    pub fn prepare(&self, input: &EnhancerInput) -> Result<EnhancerInput> {
        self.check_input(input)?;
        match (&self.normalizer, input.kind()) {
            (_, InputKind::Tokens) => Ok(input.clone()),
            (Some(norm), _) => norm.apply(input),
            (None, _) => Err(Error::Config(
                "model has no fitted feature normalizer".into(),
            )),
        }
    }

    /// CTC logits (`T x (output_vocab + 1)`) for an unprepared input.
    pub fn logits(&self, input: &EnhancerInput) -> Result<Array2<f64>> {
        let prepared = self.prepare(input)?;
        self.network.forward(prepared.as_net_input())
    }

    /// CTC loss and per-parameter gradients for a prepared input, evaluated
    /// with an explicit parameter set.
    pub fn loss_with(
        &self,
        params: &[Parameter],
        prepared: &EnhancerInput,
        labels: &[usize],
    ) -> Result<(f64, Vec<ArrayD<f64>>)> {
        let (logits, tape) = self
            .network
            .forward_with(params, prepared.as_net_input(), true)?;
        let ctc = ctc_loss(logits.view(), labels)?;
        let grads = self.network.backward_with(params, tape, ctc.grad)?;
        Ok((ctc.loss, grads))
    }

    /// LeakyReLU branch pattern for a prepared input (see [`crate::nnet::grad_check_piecewise`]).
    pub fn kink_pattern(
        &self,
        params: &[Parameter],
        prepared: &EnhancerInput,
    ) -> Result<Vec<bool>> {
        self.network.kink_pattern(params, prepared.as_net_input())
    }

    fn fit_normalizer(&mut self, pairs: &[TrainingPair]) -> Result<()> {
        if self.kind().input_kind() == InputKind::Tokens || self.normalizer.is_some() {
            return Ok(());
        }
        let layers: Vec<&[Array2<f64>]> = pairs
            .iter()
            .map(|p| match &p.input {
                EnhancerInput::Stack(l) => l.as_slice(),
                EnhancerInput::Frames(x) => std::slice::from_ref(x),
                EnhancerInput::Tokens(_) => &[],
            })
            .collect();
        self.normalizer = Some(Normalizer::fit(layers.into_iter())?);
        Ok(())
    }

    fn set_encoder_frozen(&mut self, frozen: bool) {
        for p in self.network.params.iter_mut() {
            if p.name.starts_with(ENCODER_PREFIX) {
                p.frozen = frozen;
            }
        }
    }
}

/// Labels in the CTC convention: base id `i` becomes `i + 1`, blank is 0.
pub fn to_ctc_labels(ids: &[usize]) -> Vec<usize> {
    ids.iter().map(|&i| i + 1).collect()
}

/// Greedy CTC readout mapped back to base ids (blank removed, shifted down).
pub fn greedy_ids(logits: &Array2<f64>) -> Vec<usize> {
    ctc_greedy_decode(logits.view())
        .into_iter()
        .map(|l| l - 1)
        .collect()
}

// ---------------------------------------------------------------------------
// Training pairs
// ---------------------------------------------------------------------------

/// Precomputed per-utterance material the pair builder draws from.
#[derive(Debug, Clone)]
pub struct UtteranceData {
    pub utt_id: String,
    /// Noisy FBANK frames (`T x D`).
    pub noisy_fbank: Array2<f64>,
    /// Duplicated tokens of the noisy FBANK.
    pub noisy_tokens: TokenSequence,
    /// Duplicated tokens of the clean FBANK.
    pub clean_tokens: TokenSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub utt_id: String,
    pub input: EnhancerInput,
    /// Target over the output vocabulary, no blank.
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<TrainingPair>,
    pub dropped: usize,
}

/// Keeps CTC-feasible pairs; errors when more than 10% are infeasible.
pub fn filter_feasible(candidates: Vec<TrainingPair>) -> Result<PairSet> {
    let total = candidates.len();
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let pairs: Vec<TrainingPair> = candidates
        .into_iter()
        .filter(|p| is_feasible(p.input.num_frames(), &to_ctc_labels(&p.target)))
        .collect();
    let dropped = total - pairs.len();
    if dropped > 0 {
        log::info!("dropped {dropped} of {total} CTC-infeasible training pairs");
    }
    if dropped as f64 > MAX_INFEASIBLE_FRACTION * total as f64 {
        return Err(Error::TooManyInfeasible { dropped, total });
    }
    Ok(PairSet { pairs, dropped })
}

/// Pairs for an enhancer of `kind`: input from the noisy side, target
/// `dedup(clean tokens)`.
pub fn make_training_pairs(kind: ModelKind, utterances: &[UtteranceData]) -> Result<PairSet> {
    if kind == ModelKind::AsrBackend {
        return Err(Error::Config(
            "backend pairs come from BPE units and transcripts".into(),
        ));
    }
    let candidates = utterances
        .iter()
        .map(|u| {
            if u.clean_tokens.form() != TokenForm::Duplicated
                || u.noisy_tokens.form() != TokenForm::Duplicated
            {
                return Err(Error::WrongForm {
                    expected: TokenForm::Duplicated,
                    got: if u.clean_tokens.form() != TokenForm::Duplicated {
                        u.clean_tokens.form()
                    } else {
                        u.noisy_tokens.form()
                    },
                });
            }
            Ok(TrainingPair {
                utt_id: u.utt_id.clone(),
                input: model_input(kind, &u.noisy_fbank, &u.noisy_tokens),
                target: dedup_ids(u.clean_tokens.ids()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    filter_feasible(candidates)
}

/// Content hash of a pair list (inputs and targets, in order).
pub fn pairs_hash(pairs: &[TrainingPair]) -> String {
    let mut hasher = Sha256::new();
    for p in pairs {
        hasher.update(p.utt_id.as_bytes());
        hasher.update([0]);
        p.input.hash_into(&mut hasher);
        p.target
            .iter()
            .for_each(|&t| hasher.update((t as u64).to_le_bytes()));
    }
    hex_digest(hasher)
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEnhancer {
    pub model: EnhancerModel,
    pub train_config: TrainConfig,
    /// Epoch-mean CTC loss, one entry per epoch.
    pub loss_history: Vec<f64>,
    pub step_count: usize,
    pub data_hash: String,
}

/// Mean-per-utterance CTC loss and gradient over one batch. Per-utterance
/// work runs in parallel; the reduction is in batch order.
fn batch_gradient(
    model: &EnhancerModel,
    batch: &[(&EnhancerInput, &[usize])],
) -> Result<(f64, Vec<ArrayD<f64>>)> {
    let results: Vec<Result<(f64, Vec<ArrayD<f64>>)>> = batch
        .par_iter()
        .map(|(input, labels)| model.loss_with(&model.network.params, input, labels))
        .collect();
    let mut total = 0.0;
    let mut grads = model.network.zero_grads();
    for r in results {
        let (loss, g) = r?;
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += &gi;
        }
    }
    let n = batch.len() as f64;
    grads.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grads))
}

/// Trains with Adam on mean-per-utterance CTC loss. `on_epoch` runs after
/// every epoch (logging, checkpointing) and may abort training.
pub fn train_enhancer<F>(
    mut model: EnhancerModel,
    pairs: &[TrainingPair],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainedEnhancer>
where
    F: FnMut(&EpochReport, &TrainState) -> Result<()>,
{
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    model.fit_normalizer(pairs)?;
    let prepared: Vec<(EnhancerInput, Vec<usize>)> = pairs
        .iter()
        .map(|p| {
            let labels = to_ctc_labels(&p.target);
            if let Some(&bad) = p.target.iter().find(|&&t| t >= model.output_vocab) {
                return Err(Error::TokenOutOfRange {
                    id: bad,
                    vocab: model.output_vocab,
                });
            }
            if !is_feasible(p.input.num_frames(), &labels) {
                return Err(Error::InfeasibleTarget {
                    target_len: labels.len(),
                    needed: min_frames(&labels),
                    frames: p.input.num_frames(),
                });
            }
            Ok((model.prepare(&p.input)?, labels))
        })
        .collect::<Result<_>>()?;

    let steps_per_epoch = prepared.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let freeze_steps = model.config.freeze_steps(total_steps);
    let adam = AdamConfig::default();
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            model.set_encoder_frozen(step < freeze_steps);
            let batch: Vec<(&EnhancerInput, &[usize])> = chunk
                .iter()
                .map(|&i| (&prepared[i].0, prepared[i].1.as_slice()))
                .collect();
            let (loss, grads) = batch_gradient(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "{} loss became {loss} at epoch {epoch}, step {step}",
                    model.kind()
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            for (p, g) in model.network.params.iter_mut().zip(grads) {
                p.grad = g;
            }
            step += 1;
            adam_step(
                &mut model.network.params,
                config.lr_at(step, total_steps),
                adam,
                step as u64,
            );
        }
        model.set_encoder_frozen(false);
        let report = EpochReport {
            epoch,
            mean_loss: epoch_loss / prepared.len() as f64,
            wall_s: started.elapsed().as_secs_f64(),
        };
        loss_history.push(report.mean_loss);
        on_epoch(
            &report,
            &TrainState {
                model: &model,
                step_count: step,
                seed: config.seed,
                epoch,
            },
        )?;
    }
    Ok(TrainedEnhancer {
        model,
        train_config: config.clone(),
        loss_history,
        step_count: step,
        data_hash: pairs_hash(pairs),
    })
}

/// Snapshot handed to the per-epoch callback.
pub struct TrainState<'a> {
    pub model: &'a EnhancerModel,
    pub step_count: usize,
    pub seed: u64,
    pub epoch: usize,
}

impl TrainState<'_> {
    pub fn checkpoint(&self, loss_history: &[f64]) -> Checkpoint {
        Checkpoint::new(
            self.model,
            self.step_count,
            self.seed,
            self.epoch + 1,
            loss_history,
        )
    }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Greedy-decoded enhanced tokens over the base vocabulary, deduplicated.
pub fn enhance_tokens(model: &EnhancerModel, input: &EnhancerInput) -> Result<TokenSequence> {
    let logits = model.logits(input)?;
    // `a blank a` decodes to `a a`; the deduplicated form merges it.
    let ids = dedup_ids(&greedy_ids(&logits));
    TokenSequence::new(
        ids,
        model.output_vocab,
        TokenForm::Deduplicated,
        Origin::Enhanced,
    )
}

// ---------------------------------------------------------------------------
// Token ASR backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BackendPair {
    pub utt_id: String,
    /// BPE units.
    pub tokens: TokenSequence,
    /// Word ids.
    pub words: Vec<usize>,
}

pub fn train_token_asr<F>(
    pairs: &[BackendPair],
    n_words: usize,
    config: &EnhancerConfig,
    train_config: &TrainConfig,
    on_epoch: F,
) -> Result<TrainedEnhancer>
where
    F: FnMut(&EpochReport, &TrainState) -> Result<()>,
{
    if config.kind != ModelKind::AsrBackend {
        return Err(Error::Config(format!(
            "backend config has kind {}",
            config.kind
        )));
    }
    let first = pairs.first().ok_or(Error::EmptyCorpus)?;
    let vocab = first.tokens.vocab_size();
    let candidates = pairs
        .iter()
        .map(|p| {
            if p.tokens.form() != TokenForm::Bpe || p.tokens.vocab_size() != vocab {
                return Err(Error::WrongForm {
                    expected: TokenForm::Bpe,
                    got: p.tokens.form(),
                });
            }
            Ok(TrainingPair {
                utt_id: p.utt_id.clone(),
                input: EnhancerInput::Tokens(p.tokens.ids().to_vec()),
                target: p.words.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = filter_feasible(candidates)?;
    let model = build_model(config, vocab, n_words, train_config.seed)?;
    train_enhancer(model, &set.pairs, train_config, on_epoch)
}

/// Greedy word-id transcript of a BPE token sequence.
pub fn decode_token_asr(model: &EnhancerModel, tokens: &TokenSequence) -> Result<Vec<usize>> {
    if model.kind() != ModelKind::AsrBackend {
        return Err(Error::Config(format!(
            "{} is not a token-ASR backend",
            model.kind()
        )));
    }
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    if tokens.vocab_size() != model.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim,
            got: tokens.vocab_size(),
        });
    }
    let logits = model.logits(&EnhancerInput::Tokens(tokens.ids().to_vec()))?;
    Ok(greedy_ids(&logits))
}

/// BPE-encodes deduplicated tokens and transcribes them with the backend.
pub fn transcribe(
    backend: &EnhancerModel,
    bpe: &BpeModel,
    dedup_tokens: &TokenSequence,
) -> Result<Vec<usize>> {
    decode_token_asr(backend, &bpe_encode(dedup_tokens, bpe)?)
}

// ---------------------------------------------------------------------------
// Depth sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EvalUtterance {
    pub utt_id: String,
    pub input: EnhancerInput,
    /// Deduplicated clean tokens.
    pub reference: Vec<usize>,
    pub words: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub num_parameters: usize,
    pub mean_ued: f64,
    /// Corpus WER in percent; `None` without a backend.
    pub wer: Option<f64>,
    pub eval_hash: String,
}

/// Per-utterance enhanced tokens for an evaluation set, in input order.
pub fn enhance_all(model: &EnhancerModel, eval: &[EvalUtterance]) -> Result<Vec<TokenSequence>> {
    eval.par_iter()
        .map(|u| enhance_tokens(model, &u.input))
        .collect()
}

pub fn eval_hash(eval: &[EvalUtterance]) -> String {
    let mut hasher = Sha256::new();
    for u in eval {
        hasher.update(u.utt_id.as_bytes());
        hasher.update([0]);
        u.input.hash_into(&mut hasher);
        u.reference
            .iter()
            .for_each(|&t| hasher.update((t as u64).to_le_bytes()));
    }
    hex_digest(hasher)
}

/// Trains one W2T model per depth on identical data and seeds and scores
/// each on the same evaluation set.
#[allow(clippy::too_many_arguments)]
pub fn depth_sweep(
    depths: &[usize],
    base: &EnhancerConfig,
    vocab_size: usize,
    feature_dim: usize,
    train_pairs: &[TrainingPair],
    eval: &[EvalUtterance],
    train_config: &TrainConfig,
    backend: Option<(&EnhancerModel, &BpeModel)>,
) -> Result<Vec<DepthRow>> {
    if depths.is_empty() {
        return Err(Error::Config("depth sweep needs at least one depth".into()));
    }
    let hash = eval_hash(eval);
    depths
        .iter()
        .map(|&depth| {
            let config = EnhancerConfig {
                kind: ModelKind::W2t,
                depth,
                ..base.clone()
            };
            let model = build_enhancer(&config, vocab_size, feature_dim, train_config.seed)?;
            let trained = train_enhancer(model, train_pairs, train_config, |_, _| Ok(()))?;
            let enhanced = enhance_all(&trained.model, eval)?;
            let ueds: Vec<f64> = eval
                .iter()
                .zip(&enhanced)
                .map(|(u, e)| ued_ids(&u.reference, e.ids()))
                .collect();
            let wer = match backend {
                Some((asr, bpe)) => {
                    let mut totals = EditTotals::default();
                    for (u, e) in eval.iter().zip(&enhanced) {
                        totals.add(&u.words, &transcribe(asr, bpe, e)?);
                    }
                    Some(totals.corpus_wer())
                }
                None => None,
            };
            Ok(DepthRow {
                depth,
                num_parameters: trained.model.num_parameters(),
                mean_ued: crate::metrics::mean(&ueds),
                wer,
                eval_hash: hash.clone(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub config: EnhancerConfig,
    pub input_dim: usize,
    pub output_vocab: usize,
    pub num_parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Epochs completed; the next epoch shuffles with `seed + epoch`.
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub normalizer: Option<Normalizer>,
    pub params: Vec<TensorRecord>,
    pub optimizer: AdamConfig,
    pub rng_state: RngState,
    pub step_count: usize,
    pub loss_history: Vec<f64>,
}

fn flat(a: &ArrayD<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

impl Checkpoint {
    pub fn new(
        model: &EnhancerModel,
        step_count: usize,
        seed: u64,
        epochs_done: usize,
        loss_history: &[f64],
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            architecture: Architecture {
                config: model.config.clone(),
                input_dim: model.input_dim,
                output_vocab: model.output_vocab,
                num_parameters: model.num_parameters(),
            },
            normalizer: model.normalizer.clone(),
            params: model
                .network
                .params
                .iter()
                .map(|p| TensorRecord {
                    name: p.name.clone(),
                    shape: p.shape().to_vec(),
                    data: flat(&p.value),
                    adam_m: flat(&p.adam_m),
                    adam_v: flat(&p.adam_v),
                })
                .collect(),
            optimizer: AdamConfig::default(),
            rng_state: RngState {
                seed,
                epoch: epochs_done,
            },
            step_count,
            loss_history: loss_history.to_vec(),
        }
    }

    pub fn from_trained(trained: &TrainedEnhancer) -> Self {
        Self::new(
            &trained.model,
            trained.step_count,
            trained.train_config.seed,
            trained.loss_history.len(),
            &trained.loss_history,
        )
    }

    /// Rebuilds the model and loads every named tensor, checking shapes.
    pub fn to_model(&self) -> Result<EnhancerModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let arch = &self.architecture;
        let mut model = build_model(&arch.config, arch.input_dim, arch.output_vocab, 0)?;
        if model.network.params.len() != self.params.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} tensors, architecture needs {}",
                self.params.len(),
                model.network.params.len()
            )));
        }
        for (p, rec) in model.network.params.iter_mut().zip(&self.params) {
            if p.name != rec.name || p.shape() != rec.shape.as_slice() {
                return Err(Error::Parse(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    rec.name,
                    rec.shape,
                    p.name,
                    p.shape()
                )));
            }
            let load = |data: &[f64]| {
                ArrayD::from_shape_vec(IxDyn(&rec.shape), data.to_vec())
                    .map_err(|e| Error::Parse(e.to_string()))
            };
            p.value = load(&rec.data)?;
            p.adam_m = load(&rec.adam_m)?;
            p.adam_v = load(&rec.adam_v)?;
        }
        model.normalizer = self.normalizer.clone();
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
