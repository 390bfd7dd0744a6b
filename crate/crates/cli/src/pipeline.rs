//! Stage orchestration. Each stage reads its inputs from the run directory,
//! writes outputs through an [`OutputSet`], and is recorded in the run
//! manifest. Upstream records are verified (fingerprint and content hashes)
//! before a stage runs; an up-to-date stage is skipped.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde_json::json;
use tokenhance::enhance::{
    build_enhancer, depth_sweep, enhance_all, make_training_pairs, model_input, train_enhancer,
    train_token_asr, transcribe, BackendPair, Checkpoint, EnhancerConfig, EnhancerModel,
    EpochReport, EvalUtterance, ModelKind, TrainState, UtteranceData,
};
use tokenhance::metrics::{
    corpus_wer, group_utterances, mean, ued_ids, wer, UtteranceScore, DEFAULT_WER_TOL,
};
use tokenhance::signal::{
    generate_noise, mix_at_snr, si_snr, spectral_enhance, synth_utterance, Fbank, SynthLexicon,
    Waveform,
};
use tokenhance::tokenizer::{kmeans_train, Codebook};
use tokenhance::tokenseq::{
    bpe_encode, bpe_train, dedup, format_token_lines, length_stats, BpeModel, CompressionReport,
    Origin, TokenForm, TokenSequence,
};

use crate::config::ExperimentConfig;
use crate::corpus::{
    compute_fbanks, load_waves, manifest_rel, read_records, read_tokens, token_entries, token_rel,
    uniform, utterance_rng, utterance_seed, Condition, Split, UttRecord,
};
use crate::manifest::{
    changed_outputs, now_unix_s, sha256_bytes, OutputSet, RunManifest, StageError, StageRecord,
};
use crate::report::{
    render_depth, render_groups, render_report, EvalSummary, GroupRow, SystemSummary, DEPTH_FILE,
    GROUPS_FILE, REPORT_FILE, SUMMARY_FILE,
};

pub const LEXICON_FILE: &str = "corpus/lexicon.json";
pub const CODEBOOK_FILE: &str = "tokens/codebook.json";
pub const BPE_FILE: &str = "bpe/bpe_model.txt";
pub const COMPRESSION_FILE: &str = "bpe/compression.json";
/// Extra noise samples beyond the utterance so the mixing crop has an offset to choose.
const NOISE_MARGIN: usize = 1600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Synth,
    Tokenize,
    Bpe,
    Train(ModelKind),
    Eval,
    Report,
}

pub const ALL_MODELS: [ModelKind; 5] = [
    ModelKind::T2t,
    ModelKind::V2tMlp,
    ModelKind::V2tTcn,
    ModelKind::W2t,
    ModelKind::AsrBackend,
];

impl Stage {
    pub fn name(self) -> String {
        match self {
            Stage::Synth => "synth".into(),
            Stage::Tokenize => "tokenize".into(),
            Stage::Bpe => "bpe".into(),
            Stage::Train(kind) => format!("train:{kind}"),
            Stage::Eval => "eval".into(),
            Stage::Report => "report".into(),
        }
    }

    /// Command line that (re)produces this stage.
    pub fn command(self) -> String {
        match self {
            Stage::Train(kind) => format!("train {kind}"),
            other => other.name(),
        }
    }

    pub fn upstream(self) -> Vec<Stage> {
        match self {
            Stage::Synth => vec![],
            Stage::Tokenize => vec![Stage::Synth],
            Stage::Bpe => vec![Stage::Tokenize],
            Stage::Train(ModelKind::AsrBackend) => vec![Stage::Synth, Stage::Bpe],
            Stage::Train(_) => vec![Stage::Synth, Stage::Tokenize],
            Stage::Eval => {
                let mut up = vec![Stage::Synth, Stage::Tokenize, Stage::Bpe];
                up.extend(ALL_MODELS.map(Stage::Train));
                up
            }
            Stage::Report => vec![Stage::Eval],
        }
    }

    /// Config slice that determines this stage's outputs.
    fn params(self, cfg: &ExperimentConfig) -> serde_json::Value {
        match self {
            Stage::Synth => json!({ "seed": cfg.seed, "corpus": cfg.corpus }),
            Stage::Tokenize => {
                json!({ "seed": cfg.seed, "fbank": cfg.fbank, "tokenizer": cfg.tokenizer })
            }
            Stage::Bpe => json!({ "bpe": cfg.bpe }),
            Stage::Train(kind) => {
                json!({ "section": cfg.section(kind), "train": cfg.train_config(kind) })
            }
            Stage::Eval => json!({
                "w2w": cfg.w2w,
                "depth_sweep": cfg.depth_sweep,
                "w2t": cfg.section(ModelKind::W2t),
                "train": cfg.train_config(ModelKind::W2t),
            }),
            Stage::Report => json!({}),
        }
    }
}

/// Name, enhanced test streams, enhanced clean-input streams, per-utterance SI-SNR.
type SystemOutput = (
    String,
    Vec<TokenSequence>,
    Option<Vec<TokenSequence>>,
    Option<Vec<f64>>,
);

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    manifest: RunManifest,
    verified: HashSet<String>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.out_dir.clone();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let manifest = RunManifest::load_or_default(&dir)?;
        Ok(Self {
            cfg,
            dir,
            manifest,
            verified: HashSet::new(),
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn fingerprint(&self, stage: Stage) -> Result<String> {
        let upstream: Vec<_> = stage
            .upstream()
            .into_iter()
            .map(|up| {
                let rec = self.record(up)?;
                Ok(json!({ "stage": up.name(), "fingerprint": rec.fingerprint, "outputs": rec.outputs }))
            })
            .collect::<Result<_>>()?;
        let doc = json!({ "stage": stage.name(), "params": stage.params(&self.cfg), "upstream": upstream });
        Ok(sha256_bytes(serde_json::to_string(&doc)?.as_bytes()))
    }

    fn record(&self, stage: Stage) -> Result<&StageRecord> {
        self.manifest.stages.get(&stage.name()).ok_or_else(|| {
            StageError::Missing {
                stage: stage.name(),
                command: stage.command(),
            }
            .into()
        })
    }

    /// Checks that `stage` and everything it depends on is present, current,
    /// and unmodified on disk.
    pub fn verify(&mut self, stage: Stage) -> Result<()> {
        if self.verified.contains(&stage.name()) {
            return Ok(());
        }
        for up in stage.upstream() {
            self.verify(up)?;
        }
        let rec = self.record(stage)?;
        if rec.fingerprint != self.fingerprint(stage)? {
            return Err(StageError::Outdated {
                stage: stage.name(),
                command: stage.command(),
            }
            .into());
        }
        if let Some(path) = changed_outputs(&self.dir, rec).into_iter().next() {
            return Err(StageError::Stale {
                stage: stage.name(),
                command: stage.command(),
                path,
            }
            .into());
        }
        self.verified.insert(stage.name());
        Ok(())
    }

    /// Runs `stage` unless it is already up to date. Returns whether it ran.
    pub fn run(&mut self, stage: Stage) -> Result<bool> {
        for up in stage.upstream() {
            self.verify(up)?;
        }
        let fingerprint = self.fingerprint(stage)?;
        if let Some(rec) = self.manifest.stages.get(&stage.name()) {
            if rec.fingerprint == fingerprint && changed_outputs(&self.dir, rec).is_empty() {
                info!("{}: up to date", stage.name());
                self.verified.insert(stage.name());
                return Ok(false);
            }
        }
        self.manifest.stages.remove(&stage.name());
        self.verified.remove(&stage.name());
        self.manifest.save(&self.dir)?;

        info!("{}: running", stage.name());
        let mut outputs = OutputSet::new(&self.dir);
        match stage {
            Stage::Synth => self.synth(&mut outputs)?,
            Stage::Tokenize => self.tokenize(&mut outputs)?,
            Stage::Bpe => self.bpe(&mut outputs)?,
            Stage::Train(kind) => self.train(kind, &mut outputs)?,
            Stage::Eval => self.eval(&mut outputs)?,
            Stage::Report => self.report(&mut outputs)?,
        }
        let record = StageRecord {
            fingerprint,
            outputs: outputs.hash_all()?,
            completed_unix_s: now_unix_s(),
        };
        self.manifest.stages.insert(stage.name(), record);
        self.manifest.save(&self.dir)?;
        self.verified.insert(stage.name());
        Ok(true)
    }

    /// Every stage in dependency order.
    pub fn run_all(&mut self) -> Result<()> {
        for stage in [Stage::Synth, Stage::Tokenize, Stage::Bpe] {
            self.run(stage)?;
        }
        for kind in ALL_MODELS {
            self.run(Stage::Train(kind))?;
        }
        self.run(Stage::Eval)?;
        self.run(Stage::Report)?;
        Ok(())
    }

    fn splits(&self) -> Vec<Split> {
        Split::ALL
            .into_iter()
            .filter(|&s| self.split_size(s) > 0)
            .collect()
    }

    fn split_size(&self, split: Split) -> usize {
        let c = &self.cfg.corpus;
        match split {
            Split::Train => c.n_train,
            Split::Dev => c.n_dev,
            Split::Test => c.n_test,
        }
    }

    fn fbank(&self) -> Result<Fbank> {
        Ok(Fbank::new(self.cfg.fbank.clone())?)
    }

    fn codebook(&self) -> Result<Codebook> {
        Ok(Codebook::load(self.dir.join(CODEBOOK_FILE))?)
    }

    fn bpe_model(&self) -> Result<BpeModel> {
        Ok(BpeModel::load(self.dir.join(BPE_FILE))?)
    }

    fn tokens(
        &self,
        split: Split,
        cond: Condition,
        form: TokenForm,
        records: &[UttRecord],
    ) -> Result<Vec<TokenSequence>> {
        let vocab = match form {
            TokenForm::Bpe => self.bpe_model()?.vocab_size(),
            _ => self.cfg.tokenizer.k,
        };
        read_tokens(
            &self.dir,
            &token_rel(split, cond, form),
            records,
            vocab,
            form,
            cond.origin(),
        )
    }

    // -----------------------------------------------------------------------
    // synth
    // -----------------------------------------------------------------------

    fn synth(&self, out: &mut OutputSet) -> Result<()> {
        let c = &self.cfg.corpus;
        let lexicon = SynthLexicon::generate(c.n_words, self.cfg.seed, c.timing.clone())?;
        out.write(LEXICON_FILE, serde_json::to_string_pretty(&lexicon)?)?;
        for split in self.splits() {
            let n = self.split_size(split);
            let rels: Vec<(String, String)> = (0..n)
                .map(|i| {
                    let id = utt_id(split, i);
                    (
                        format!("corpus/wav/{}/{id}_clean.wav", split.name()),
                        format!("corpus/wav/{}/{id}_noisy.wav", split.name()),
                    )
                })
                .collect();
            for (clean, noisy) in &rels {
                out.path(clean)?;
                out.path(noisy)?;
            }
            let root = out.root().to_path_buf();
            let records: Vec<UttRecord> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let seed = utterance_seed(self.cfg.seed, split, i);
                    let mut rng = utterance_rng(seed);
                    let n_words = rng.gen_range(c.min_words..=c.max_words);
                    let words: Vec<usize> =
                        (0..n_words).map(|_| rng.gen_range(0..c.n_words)).collect();
                    let kind = c.noise_kinds[rng.gen_range(0..c.noise_kinds.len())];
                    let snr_db = uniform(&mut rng, c.snr_db_min, c.snr_db_max);
                    let (synth_seed, noise_seed, mix_seed) = (rng.gen(), rng.gen(), rng.gen());
                    let (clean, _) = synth_utterance(&words, &lexicon, synth_seed)?;
                    let noise = generate_noise(
                        kind,
                        clean.len() + NOISE_MARGIN,
                        clean.sample_rate,
                        noise_seed,
                    )?;
                    let noisy = mix_at_snr(&clean, &noise, snr_db, mix_seed)?;
                    let (clean_rel, noisy_rel) = &rels[i];
                    clean.write_wav(root.join(clean_rel))?;
                    noisy.write_wav(root.join(noisy_rel))?;
                    Ok(UttRecord {
                        utt_id: utt_id(split, i),
                        transcript: words
                            .iter()
                            .map(|w| w.to_string())
                            .collect::<Vec<_>>()
                            .join(" "),
                        clean_path: clean_rel.clone(),
                        noisy_path: noisy_rel.clone(),
                        snr_db,
                        noise_kind: kind,
                        seed,
                    })
                })
                .collect::<Result<_>>()?;
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            out.write(&manifest_rel(split), text)?;
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // tokenize
    // -----------------------------------------------------------------------

    fn tokenize(&self, out: &mut OutputSet) -> Result<()> {
        let fbank = self.fbank()?;
        let train_records = read_records(&self.dir, Split::Train)?;
        let clean_train = compute_fbanks(
            &fbank,
            &load_waves(&self.dir, &train_records, Condition::Clean)?,
        )?;
        let frames = stack_frames(&clean_train, self.cfg.fbank.n_mels);
        let subset = subsample_rows(&frames, self.cfg.tokenizer.max_train_frames, self.cfg.seed);
        let codebook = kmeans_train(
            subset.view(),
            self.cfg.tokenizer.k,
            self.cfg.seed,
            self.cfg.tokenizer.kmeans,
        )?;
        info!(
            "k-means: {} iterations, inertia {:.3}",
            codebook.train_meta.iterations_run, codebook.train_meta.final_inertia
        );
        // Tokenize with exactly what the file stores.
        let codebook = codebook.quantized();
        out.write(CODEBOOK_FILE, codebook.to_json()?)?;

        for split in self.splits() {
            let records = read_records(&self.dir, split)?;
            for cond in [Condition::Clean, Condition::Noisy] {
                let feats = if split == Split::Train && cond == Condition::Clean {
                    clean_train.clone()
                } else {
                    compute_fbanks(&fbank, &load_waves(&self.dir, &records, cond)?)?
                };
                let dup = tokenize_all(&codebook, &feats, cond.origin())?;
                let dd: Vec<TokenSequence> = dup.iter().map(dedup).collect();
                out.write(
                    &token_rel(split, cond, TokenForm::Duplicated),
                    format_token_lines(&token_entries(&records, &dup)),
                )?;
                out.write(
                    &token_rel(split, cond, TokenForm::Deduplicated),
                    format_token_lines(&token_entries(&records, &dd)),
                )?;
            }
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // bpe
    // -----------------------------------------------------------------------

    fn bpe(&self, out: &mut OutputSet) -> Result<()> {
        let train_records = read_records(&self.dir, Split::Train)?;
        let corpus = self.tokens(
            Split::Train,
            Condition::Clean,
            TokenForm::Deduplicated,
            &train_records,
        )?;
        let model = bpe_train(&corpus, self.cfg.bpe.target_vocab)?;
        info!("bpe: {} merges", model.merges().len());
        out.write(BPE_FILE, model.to_text())?;

        let mut compression = BTreeMap::new();
        for split in self.splits() {
            let records = read_records(&self.dir, split)?;
            for cond in [Condition::Clean, Condition::Noisy] {
                let dup = self.tokens(split, cond, TokenForm::Duplicated, &records)?;
                let dd = self.tokens(split, cond, TokenForm::Deduplicated, &records)?;
                let encoded = dd
                    .iter()
                    .map(|s| bpe_encode(s, &model))
                    .collect::<tokenhance::Result<Vec<_>>>()?;
                out.write(
                    &token_rel(split, cond, TokenForm::Bpe),
                    format_token_lines(&token_entries(&records, &encoded)),
                )?;
                let stats: Vec<CompressionReport> = dup
                    .iter()
                    .zip(&dd)
                    .zip(&encoded)
                    .map(|((a, b), c)| length_stats(a.len(), b.len(), c.len()))
                    .collect();
                compression.insert(
                    format!("{}.{}", split.name(), cond.name()),
                    CompressionReport::aggregate(&stats),
                );
            }
        }
        out.write(
            COMPRESSION_FILE,
            serde_json::to_string_pretty(&compression)?,
        )?;
        Ok(())
    }

    // -----------------------------------------------------------------------
    // train
    // -----------------------------------------------------------------------

    /// Noisy features and both token streams for one split.
    pub fn utterance_data(&self, split: Split) -> Result<(Vec<UttRecord>, Vec<UtteranceData>)> {
        let records = read_records(&self.dir, split)?;
        let fbank = self.fbank()?;
        let noisy_fbank =
            compute_fbanks(&fbank, &load_waves(&self.dir, &records, Condition::Noisy)?)?;
        let noisy = self.tokens(split, Condition::Noisy, TokenForm::Duplicated, &records)?;
        let clean = self.tokens(split, Condition::Clean, TokenForm::Duplicated, &records)?;
        let data = records
            .iter()
            .zip(noisy_fbank)
            .zip(noisy.into_iter().zip(clean))
            .map(|((r, f), (n, c))| UtteranceData {
                utt_id: r.utt_id.clone(),
                noisy_fbank: f,
                noisy_tokens: n,
                clean_tokens: c,
            })
            .collect();
        Ok((records, data))
    }

    fn train(&self, kind: ModelKind, out: &mut OutputSet) -> Result<()> {
        let section = self.cfg.section(kind);
        let train_cfg = self.cfg.train_config(kind);
        let slug = kind.slug();
        let log_path = out.path(&format!("models/{slug}.log.jsonl"))?;
        let ckpt_path = out.path(&format!("models/{slug}.ckpt.json"))?;
        let mut log = fs::File::create(&log_path)?;
        let mut history = Vec::new();
        let callback = |report: &EpochReport, state: &TrainState| -> tokenhance::Result<()> {
            history.push(report.mean_loss);
            writeln!(log, "{}", serde_json::to_string(report)?)?;
            info!(
                "{slug} epoch {}: loss {:.4} ({:.1} s)",
                report.epoch, report.mean_loss, report.wall_s
            );
            state.checkpoint(&history).save(&ckpt_path)
        };

        let (trained, n_pairs, dropped) = if kind == ModelKind::AsrBackend {
            let records = read_records(&self.dir, Split::Train)?;
            let tokens = self.tokens(Split::Train, Condition::Clean, TokenForm::Bpe, &records)?;
            let pairs = records
                .iter()
                .zip(tokens)
                .map(|(r, t)| {
                    Ok(BackendPair {
                        utt_id: r.utt_id.clone(),
                        tokens: t,
                        words: r.words()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let trained = train_token_asr(
                &pairs,
                self.cfg.corpus.n_words,
                &section.model,
                &train_cfg,
                callback,
            )?;
            let n = pairs.len();
            (trained, n, 0)
        } else {
            let (_, data) = self.utterance_data(Split::Train)?;
            let set = make_training_pairs(kind, &data)?;
            let model = build_enhancer(
                &section.model,
                self.cfg.tokenizer.k,
                self.cfg.fbank.n_mels,
                train_cfg.seed,
            )?;
            info!(
                "{slug}: {} parameters, {} pairs",
                model.num_parameters(),
                set.pairs.len()
            );
            let trained = train_enhancer(model, &set.pairs, &train_cfg, callback)?;
            (trained, set.pairs.len(), set.dropped)
        };
        // Also covers epochs = 0, where the callback never runs.
        Checkpoint::from_trained(&trained).save(&ckpt_path)?;
        let meta = json!({
            "kind": kind,
            "num_parameters": trained.model.num_parameters(),
            "n_pairs": n_pairs,
            "dropped_pairs": dropped,
            "data_hash": trained.data_hash,
            "loss_history": trained.loss_history,
            "layer_weights": trained.model.layer_weights(),
        });
        out.write(
            &format!("models/{slug}.meta.json"),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }

    pub fn load_model(&self, kind: ModelKind) -> Result<EnhancerModel> {
        let path = self.dir.join(format!("models/{}.ckpt.json", kind.slug()));
        Ok(Checkpoint::load(&path)
            .with_context(|| format!("loading {}", path.display()))?
            .to_model()?)
    }

    // -----------------------------------------------------------------------
    // eval
    // -----------------------------------------------------------------------

    fn eval(&self, out: &mut OutputSet) -> Result<()> {
        let ctx = EvalContext {
            fbank: self.fbank()?,
            codebook: self.codebook()?,
            bpe: self.bpe_model()?,
            backend: self.load_model(ModelKind::AsrBackend)?,
            enhancers: ModelKind::ENHANCERS
                .into_iter()
                .map(|k| Ok((k, self.load_model(k)?)))
                .collect::<Result<_>>()?,
            noise_profile_frames: self.cfg.w2w.noise_profile_frames,
        };

        let mut per_split: BTreeMap<Split, SplitEval> = BTreeMap::new();
        for split in [Split::Dev, Split::Test] {
            if self.split_size(split) == 0 {
                continue;
            }
            let data = self.evaluate_split(&ctx, split, split == Split::Test)?;
            for sys in &data.systems {
                let rel = format!("eval/{}.{}", split.name(), sys.name.to_lowercase());
                out.write(
                    &format!("{rel}.enh.txt"),
                    format_token_lines(&token_entries(&data.records, &sys.tokens)),
                )?;
                if sys.name != NOISY {
                    let mut text = String::new();
                    for s in &sys.scores {
                        text.push_str(&serde_json::to_string(s)?);
                        text.push('\n');
                    }
                    out.write(&format!("{rel}.scores.jsonl"), text)?;
                }
            }
            per_split.insert(split, data);
        }

        let test = &per_split[&Split::Test];
        let dev = per_split.get(&Split::Dev);
        let systems = test
            .systems
            .iter()
            .map(|sys| {
                let on_dev = dev.and_then(|d| d.systems.iter().find(|s| s.name == sys.name));
                SystemSummary {
                    system: sys.name.clone(),
                    wer_dev: on_dev.map(|s| s.corpus_wer),
                    wer_test: sys.corpus_wer,
                    wer_clean: sys.clean_wer.expect("clean condition evaluated on test"),
                    ued_dev: on_dev.map(|s| s.mean_ued),
                    ued_test: sys.mean_ued,
                    si_snr_dev: on_dev.and_then(|s| s.mean_si_snr),
                    si_snr_test: sys.mean_si_snr,
                }
            })
            .collect();
        let groups = test
            .systems
            .iter()
            .filter(|s| s.name != NOISY && s.name != CLEAN)
            .map(|s| GroupRow {
                system: s.name.clone(),
                counts: group_utterances(&s.scores, DEFAULT_WER_TOL),
            })
            .collect();

        let depth = self.run_depth_sweep(&ctx, test)?;
        let compression: BTreeMap<String, CompressionReport> =
            serde_json::from_str(&fs::read_to_string(self.dir.join(COMPRESSION_FILE))?)?;
        let summary = EvalSummary {
            n_dev: dev.map_or(0, |d| d.records.len()),
            n_test: test.records.len(),
            systems,
            groups,
            depth,
            compression,
        };
        out.write(SUMMARY_FILE, serde_json::to_string_pretty(&summary)?)?;
        write_tables(out, &summary)
    }

    fn evaluate_split(
        &self,
        ctx: &EvalContext,
        split: Split,
        with_clean: bool,
    ) -> Result<SplitEval> {
        let records = read_records(&self.dir, split)?;
        let words: Vec<Vec<usize>> = records
            .iter()
            .map(UttRecord::words)
            .collect::<Result<_>>()?;
        let clean_waves = load_waves(&self.dir, &records, Condition::Clean)?;
        let noisy_waves = load_waves(&self.dir, &records, Condition::Noisy)?;
        let clean_fbank = compute_fbanks(&ctx.fbank, &clean_waves)?;
        let noisy_fbank = compute_fbanks(&ctx.fbank, &noisy_waves)?;
        let clean_dup = self.tokens(split, Condition::Clean, TokenForm::Duplicated, &records)?;
        let noisy_dup = self.tokens(split, Condition::Noisy, TokenForm::Duplicated, &records)?;
        let reference: Vec<TokenSequence> =
            self.tokens(split, Condition::Clean, TokenForm::Deduplicated, &records)?;
        let noisy_dd: Vec<TokenSequence> =
            self.tokens(split, Condition::Noisy, TokenForm::Deduplicated, &records)?;

        let mut outputs: Vec<SystemOutput> = Vec::new();
        let noisy_si_snr = pairwise_si_snr(&clean_waves, &noisy_waves)?;
        outputs.push((
            CLEAN.into(),
            reference.clone(),
            with_clean.then(|| reference.clone()),
            None,
        ));
        outputs.push((
            NOISY.into(),
            noisy_dd,
            with_clean.then(|| reference.clone()),
            Some(noisy_si_snr),
        ));

        let w2w_noisy = w2w_waves(&noisy_waves, ctx.noise_profile_frames)?;
        let w2w_tokens = ctx.tokens_of(&w2w_noisy)?;
        let w2w_clean = if with_clean {
            Some(ctx.tokens_of(&w2w_waves(&clean_waves, ctx.noise_profile_frames)?)?)
        } else {
            None
        };
        outputs.push((
            W2W.into(),
            w2w_tokens,
            w2w_clean,
            Some(pairwise_si_snr(&clean_waves, &w2w_noisy)?),
        ));

        for (kind, model) in &ctx.enhancers {
            let enhance =
                |fbanks: &[Array2<f64>], dups: &[TokenSequence]| -> Result<Vec<TokenSequence>> {
                    let eval: Vec<EvalUtterance> = records
                        .iter()
                        .zip(fbanks.iter().zip(dups))
                        .map(|(r, (f, d))| EvalUtterance {
                            utt_id: r.utt_id.clone(),
                            input: model_input(*kind, f, d),
                            reference: Vec::new(),
                            words: Vec::new(),
                        })
                        .collect();
                    Ok(enhance_all(model, &eval)?)
                };
            let noisy_out = enhance(&noisy_fbank, &noisy_dup)?;
            let clean_out = if with_clean {
                Some(enhance(&clean_fbank, &clean_dup)?)
            } else {
                None
            };
            outputs.push((kind.label().to_string(), noisy_out, clean_out, None));
        }

        let noisy_hyps = ctx.transcribe_all(&outputs[1].1)?;
        let noisy_ueds: Vec<f64> = reference
            .iter()
            .zip(&outputs[1].1)
            .map(|(r, h)| ued_ids(r.ids(), h.ids()))
            .collect();
        let systems = outputs
            .into_iter()
            .map(|(name, tokens, clean_tokens, si)| {
                let hyps = ctx.transcribe_all(&tokens)?;
                let ueds: Vec<f64> = reference
                    .iter()
                    .zip(&tokens)
                    .map(|(r, h)| ued_ids(r.ids(), h.ids()))
                    .collect();
                let scores = records
                    .iter()
                    .enumerate()
                    .map(|(i, r)| UtteranceScore {
                        utt_id: r.utt_id.clone(),
                        ued_noisy: noisy_ueds[i],
                        ued_enh: ueds[i],
                        wer_noisy: wer(&words[i], &noisy_hyps[i]),
                        wer_enh: wer(&words[i], &hyps[i]),
                    })
                    .collect();
                let clean_wer = match &clean_tokens {
                    Some(t) => Some(corpus_wer_of(&words, &ctx.transcribe_all(t)?)),
                    None => None,
                };
                Ok(SystemEval {
                    corpus_wer: corpus_wer_of(&words, &hyps),
                    mean_ued: mean(&ueds),
                    mean_si_snr: si.as_deref().map(mean),
                    clean_wer,
                    name,
                    tokens,
                    scores,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SplitEval {
            records,
            words,
            noisy_fbank,
            reference,
            systems,
        })
    }

    fn run_depth_sweep(
        &self,
        ctx: &EvalContext,
        test: &SplitEval,
    ) -> Result<Vec<tokenhance::enhance::DepthRow>> {
        let (_, data) = self.utterance_data(Split::Train)?;
        let set = make_training_pairs(ModelKind::W2t, &data)?;
        let mut train_cfg = self.cfg.train_config(ModelKind::W2t);
        if let Some(epochs) = self.cfg.depth_sweep.epochs {
            train_cfg.epochs = epochs;
        }
        let eval: Vec<EvalUtterance> = test
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| EvalUtterance {
                utt_id: r.utt_id.clone(),
                input: tokenhance::enhance::EnhancerInput::Frames(test.noisy_fbank[i].clone()),
                reference: test.reference[i].ids().to_vec(),
                words: test.words[i].clone(),
            })
            .collect();
        let base: EnhancerConfig = self.cfg.w2t.model.clone();
        Ok(depth_sweep(
            &self.cfg.depth_sweep.depths,
            &base,
            self.cfg.tokenizer.k,
            self.cfg.fbank.n_mels,
            &set.pairs,
            &eval,
            &train_cfg,
            Some((&ctx.backend, &ctx.bpe)),
        )?)
    }

    // -----------------------------------------------------------------------
    // report
    // -----------------------------------------------------------------------

    fn report(&self, out: &mut OutputSet) -> Result<()> {
        let summary = self.summary()?;
        write_tables(out, &summary)
    }

    pub fn summary(&self) -> Result<EvalSummary> {
        let path = self.dir.join(SUMMARY_FILE);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const CLEAN: &str = "clean";
pub const NOISY: &str = "noisy";
pub const W2W: &str = "W2W";

fn utt_id(split: Split, i: usize) -> String {
    format!("{}_{i:04}", split.name())
}

fn write_tables(out: &mut OutputSet, summary: &EvalSummary) -> Result<()> {
    out.write(REPORT_FILE, render_report(summary))?;
    out.write(GROUPS_FILE, render_groups(summary))?;
    out.write(DEPTH_FILE, render_depth(summary))?;
    Ok(())
}

struct EvalContext {
    fbank: Fbank,
    codebook: Codebook,
    bpe: BpeModel,
    backend: EnhancerModel,
    enhancers: Vec<(ModelKind, EnhancerModel)>,
    noise_profile_frames: usize,
}

impl EvalContext {
    /// Deduplicated tokens of waveforms through the fixed tokenizer.
    fn tokens_of(&self, waves: &[Waveform]) -> Result<Vec<TokenSequence>> {
        let feats = compute_fbanks(&self.fbank, waves)?;
        Ok(tokenize_all(&self.codebook, &feats, Origin::Enhanced)?
            .iter()
            .map(dedup)
            .collect())
    }

    fn transcribe_all(&self, tokens: &[TokenSequence]) -> Result<Vec<Vec<usize>>> {
        tokens
            .par_iter()
            .map(|t| Ok(transcribe(&self.backend, &self.bpe, t)?))
            .collect()
    }
}

struct SystemEval {
    name: String,
    tokens: Vec<TokenSequence>,
    scores: Vec<UtteranceScore>,
    corpus_wer: f64,
    mean_ued: f64,
    mean_si_snr: Option<f64>,
    clean_wer: Option<f64>,
}

struct SplitEval {
    records: Vec<UttRecord>,
    words: Vec<Vec<usize>>,
    noisy_fbank: Vec<Array2<f64>>,
    reference: Vec<TokenSequence>,
    systems: Vec<SystemEval>,
}

fn corpus_wer_of(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> f64 {
    let pairs: Vec<(Vec<usize>, Vec<usize>)> =
        refs.iter().cloned().zip(hyps.iter().cloned()).collect();
    corpus_wer(&pairs)
}

fn w2w_waves(waves: &[Waveform], noise_profile_frames: usize) -> Result<Vec<Waveform>> {
    waves
        .par_iter()
        .map(|w| Ok(spectral_enhance(w, noise_profile_frames)?))
        .collect()
}

fn pairwise_si_snr(reference: &[Waveform], estimate: &[Waveform]) -> Result<Vec<f64>> {
    reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| Ok(si_snr(r, e)?))
        .collect()
}

pub fn tokenize_all(
    codebook: &Codebook,
    feats: &[Array2<f64>],
    origin: Origin,
) -> Result<Vec<TokenSequence>> {
    feats
        .par_iter()
        .map(|f| {
            let ids = codebook.assign_frames(f.view())?;
            Ok(TokenSequence::new(
                ids,
                codebook.k(),
                TokenForm::Duplicated,
                origin,
            )?)
        })
        .collect()
}

fn stack_frames(feats: &[Array2<f64>], dim: usize) -> Array2<f64> {
    let total: usize = feats.iter().map(|f| f.nrows()).sum();
    let mut out = Array2::zeros((total, dim));
    let mut row = 0;
    for f in feats {
        out.slice_mut(ndarray::s![row..row + f.nrows(), ..])
            .assign(f);
        row += f.nrows();
    }
    out
}

/// Seeded subset of at most `max_rows` rows, kept in original order.
fn subsample_rows(frames: &Array2<f64>, max_rows: usize, seed: u64) -> Array2<f64> {
    if frames.nrows() <= max_rows {
        return frames.clone();
    }
    let mut rng = utterance_rng(seed);
    let mut idx = sample(&mut rng, frames.nrows(), max_rows).into_vec();
    idx.sort_unstable();
    frames.select(ndarray::Axis(0), &idx)
}

/// Loads the experiment config from `path` or falls back to defaults.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}
