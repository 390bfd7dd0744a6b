//! Synthetic speech corpus, noise mixing, log-mel filterbank features, a
//! Wiener-filter waveform enhancer and SI-SNR.
//!
//! The synthetic "language" is a small lexicon of words made of phones, where
//! each phone is a two-partial harmonic complex. Every utterance is a pure
//! function of `(transcript, lexicon, seed)`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.energy() / self.samples.len() as f64
        }
    }

    pub fn rms(&self) -> f64 {
        self.mean_power().sqrt()
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Writes 16-bit PCM mono. Samples outside `[-1, 1)` are clipped.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &x in &self.samples {
            let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(q)?;
        }
        writer.finalize()?;
        Ok(())
    }

    pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 {
            return Err(Error::Parse(format!(
                "expected 16-bit mono WAV, got {} channels at {} bits",
                spec.channels, spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Waveform::new(samples, spec.sample_rate)
    }
}

/// Frames x dims real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Array2<f64>,
    pub frame_shift_s: f64,
    pub meta: String,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

// ---------------------------------------------------------------------------
// Synthetic lexicon and utterances
// ---------------------------------------------------------------------------

/// One phone: a sum of sinusoidal partials held for the phone's duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneSpectrum {
    /// `(frequency_hz, amplitude)` pairs.
    pub partials: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthTiming {
    pub sample_rate: u32,
    pub phone_duration_s: f64,
    /// Relative duration jitter, e.g. 0.1 for +-10%.
    pub duration_jitter: f64,
    /// Relative per-phone-instance frequency jitter.
    pub freq_jitter: f64,
    /// Per-phone-instance gain jitter in dB (symmetric).
    pub gain_jitter_db: f64,
    pub lead_silence_s: f64,
    pub trail_silence_s: f64,
    /// Raised-cosine onset/offset ramp applied inside each phone.
    pub ramp_s: f64,
}

impl Default for SynthTiming {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            phone_duration_s: 0.06,
            duration_jitter: 0.1,
            freq_jitter: 0.02,
            gain_jitter_db: 3.0,
            lead_silence_s: 0.2,
            trail_silence_s: 0.1,
            ramp_s: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLexicon {
    /// `phones_per_word[w]` is the phone-id sequence of word `w`.
    pub phones_per_word: Vec<Vec<usize>>,
    pub phone_spectra: Vec<PhoneSpectrum>,
    pub timing: SynthTiming,
}

/// First-partial and second-partial frequency grids; every combination is a phone.
const F1_GRID: [f64; 4] = [300.0, 450.0, 650.0, 900.0];
const F2_GRID: [f64; 4] = [1300.0, 1800.0, 2400.0, 3200.0];
const PARTIAL_AMPLITUDE: f64 = 0.15;

impl SynthLexicon {
    /// Builds a lexicon of `n_words` distinct words with 3..=6 phones each.
    /// Adjacent phones inside a word always differ.
    pub fn generate(n_words: usize, seed: u64, timing: SynthTiming) -> Result<Self> {
        if n_words == 0 {
            return Err(Error::Config("lexicon needs at least one word".into()));
        }
        let mut phone_spectra = Vec::new();
        for (i, &f1) in F1_GRID.iter().enumerate() {
            for (j, &f2) in F2_GRID.iter().enumerate() {
                let a2 = if (i + j) % 2 == 0 { 0.5 } else { 0.8 };
                phone_spectra.push(PhoneSpectrum {
                    partials: vec![(f1, PARTIAL_AMPLITUDE), (f2, a2 * PARTIAL_AMPLITUDE)],
                });
            }
        }
        let n_phones = phone_spectra.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words: Vec<Vec<usize>> = Vec::with_capacity(n_words);
        while words.len() < n_words {
            let len = rng.gen_range(3..=6);
            let mut word = Vec::with_capacity(len);
            while word.len() < len {
                let p = rng.gen_range(0..n_phones);
                if word.last() != Some(&p) {
                    word.push(p);
                }
            }
            if !words.contains(&word) {
                words.push(word);
            }
        }
        let lexicon = Self {
            phones_per_word: words,
            phone_spectra,
            timing,
        };
        lexicon.validate()?;
        Ok(lexicon)
    }

    pub fn num_words(&self) -> usize {
        self.phones_per_word.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.timing.sample_rate as f64 / 2.0;
        for (w, phones) in self.phones_per_word.iter().enumerate() {
            if phones.is_empty() {
                return Err(Error::Config(format!("word {w} has no phones")));
            }
            if let Some(&p) = phones.iter().find(|&&p| p >= self.phone_spectra.len()) {
                return Err(Error::Config(format!("word {w} uses undefined phone {p}")));
            }
        }
        for spec in &self.phone_spectra {
            let max_f = spec.partials.iter().map(|p| p.0).fold(0.0, f64::max);
            if max_f * (1.0 + self.timing.freq_jitter) >= nyquist {
                return Err(Error::Config(format!(
                    "partial at {max_f} Hz can exceed Nyquist"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentLabel {
    Silence,
    /// `word` indexes into the transcript, not the lexicon.
    Phone {
        phone: usize,
        word: usize,
    },
}

/// Half-open sample range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: SegmentLabel,
    pub start: usize,
    pub end: usize,
}

fn raised_cosine_ramp(i: usize, len: usize, ramp: usize) -> f64 {
    if ramp == 0 {
        return 1.0;
    }
    let edge = i.min(len - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * (edge as f64 + 0.5) / ramp as f64).cos()
    }
}

/// Renders `transcript` to audio. The alignment tiles the output exactly.
pub fn synth_utterance(
    transcript: &[usize],
    lexicon: &SynthLexicon,
    seed: u64,
) -> Result<(Waveform, Vec<Segment>)> {
    if transcript.is_empty() {
        return Err(Error::EmptyTranscript);
    }
    if let Some(&w) = transcript.iter().find(|&&w| w >= lexicon.num_words()) {
        return Err(Error::UnknownWord(w));
    }
    let timing = &lexicon.timing;
    let sr = timing.sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut segments = Vec::new();

    let push_silence = |samples: &mut Vec<f64>, segments: &mut Vec<Segment>, secs: f64| {
        let n = (secs * sr).round() as usize;
        if n > 0 {
            let start = samples.len();
            samples.resize(start + n, 0.0);
            segments.push(Segment {
                label: SegmentLabel::Silence,
                start,
                end: start + n,
            });
        }
    };

    push_silence(&mut samples, &mut segments, timing.lead_silence_s);
    let ramp = (timing.ramp_s * sr).round() as usize;
    for (word_pos, &word) in transcript.iter().enumerate() {
        for &phone in &lexicon.phones_per_word[word] {
            let jitter = if timing.duration_jitter > 0.0 {
                rng.gen_range(-timing.duration_jitter..=timing.duration_jitter)
            } else {
                0.0
            };
            let len = ((timing.phone_duration_s * (1.0 + jitter)) * sr)
                .round()
                .max(1.0) as usize;
            let freq_scale = 1.0
                + if timing.freq_jitter > 0.0 {
                    rng.gen_range(-timing.freq_jitter..=timing.freq_jitter)
                } else {
                    0.0
                };
            let gain_db = if timing.gain_jitter_db > 0.0 {
                rng.gen_range(-timing.gain_jitter_db..=timing.gain_jitter_db)
            } else {
                0.0
            };
            let gain = 10f64.powf(gain_db / 20.0);
            let partials: Vec<(f64, f64, f64)> = lexicon.phone_spectra[phone]
                .partials
                .iter()
                .map(|&(f, a)| (f * freq_scale, a * gain, rng.gen_range(0.0..2.0 * PI)))
                .collect();
            let ramp = ramp.min(len / 2);
            let start = samples.len();
            samples.extend((0..len).map(|i| {
                let t = i as f64 / sr;
                let tone: f64 = partials
                    .iter()
                    .map(|&(f, a, phase)| a * (2.0 * PI * f * t + phase).sin())
                    .sum();
                tone * raised_cosine_ramp(i, len, ramp)
            }));
            segments.push(Segment {
                label: SegmentLabel::Phone {
                    phone,
                    word: word_pos,
                },
                start,
                end: start + len,
            });
        }
    }
    push_silence(&mut samples, &mut segments, timing.trail_silence_s);
    Ok((Waveform::new(samples, timing.sample_rate)?, segments))
}

// ---------------------------------------------------------------------------
// Noise and mixing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseKind::White => f.write_str("white"),
            NoiseKind::Pink => f.write_str("pink"),
        }
    }
}

/// Unit-RMS noise of the requested colour.
pub fn generate_noise(
    kind: NoiseKind,
    len: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut white = || -> f64 { rng.sample(StandardNormal) };
    let mut samples: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| white()).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's refined pinking filter, run past its transient first.
            let mut b = [0.0f64; 7];
            let warmup = 2048;
            let mut out = Vec::with_capacity(len);
            for i in 0..warmup + len {
                let w = white();
                b[0] = 0.99886 * b[0] + w * 0.0555179;
                b[1] = 0.99332 * b[1] + w * 0.0750759;
                b[2] = 0.96900 * b[2] + w * 0.1538520;
                b[3] = 0.86650 * b[3] + w * 0.3104856;
                b[4] = 0.55000 * b[4] + w * 0.5329522;
                b[5] = -0.7616 * b[5] - w * 0.0168980;
                let pink = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + w * 0.5362;
                b[6] = w * 0.115926;
                if i >= warmup {
                    out.push(pink);
                }
            }
            out
        }
    };
    let rms = (samples.iter().map(|x| x * x).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        samples.iter_mut().for_each(|x| *x /= rms);
    }
    Waveform::new(samples, sample_rate)
}

/// Gain that puts `noise` at `snr_db` below `clean` in mean power.
pub fn snr_gain(clean_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (clean_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Adds a random-offset crop of `noise` to `clean`, scaled so the power ratio
/// of clean to scaled noise equals `snr_db`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::SampleRateMismatch(
            clean.sample_rate,
            noise.sample_rate,
        ));
    }
    if noise.len() < clean.len() {
        return Err(Error::NoiseTooShort {
            noise: noise.len(),
            clean: clean.len(),
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::NonFinite("snr_db"));
    }
    let p_clean = clean.mean_power();
    if p_clean == 0.0 {
        return Err(Error::ZeroEnergy("clean"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen_range(0..=noise.len() - clean.len());
    let crop = &noise.samples[offset..offset + clean.len()];
    let p_noise = crop.iter().map(|x| x * x).sum::<f64>() / crop.len() as f64;
    if p_noise == 0.0 {
        return Err(Error::ZeroEnergy("noise"));
    }
    let g = snr_gain(p_clean, p_noise, snr_db);
    let samples = clean
        .samples
        .iter()
        .zip(crop)
        .map(|(c, n)| c + g * n)
        .collect();
    Waveform::new(samples, clean.sample_rate)
}

// ---------------------------------------------------------------------------
// Log-mel filterbank
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbankConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win_s: f64,
    pub hop_s: f64,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_mels: 40,
            win_s: 0.025,
            hop_s: 0.010,
            log_floor: 1e-10,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, FFT plan and triangular mel filters.
pub struct Fbank {
    config: FbankConfig,
    win: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    /// `(n_fft / 2 + 1) x n_mels`
    filters: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fbank")
            .field("config", &self.config)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl Fbank {
    pub fn new(config: FbankConfig) -> Result<Self> {
        if !(config.hop_s > 0.0 && config.win_s >= config.hop_s) {
            return Err(Error::Config(format!(
                "fbank needs win_s >= hop_s > 0, got win {} hop {}",
                config.win_s, config.hop_s
            )));
        }
        if config.n_mels == 0 || config.log_floor <= 0.0 {
            return Err(Error::Config(
                "fbank needs n_mels > 0 and a positive floor".into(),
            ));
        }
        let sr = config.sample_rate as f64;
        let win = (config.win_s * sr).round() as usize;
        let hop = ((config.hop_s * sr).round() as usize).max(1);
        let n_fft = win.next_power_of_two();
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos())
            .collect();
        let n_bins = n_fft / 2 + 1;
        let mel_max = hz_to_mel(sr / 2.0);
        let edges: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (config.n_mels + 1) as f64))
            .collect();
        let mut filters = Array2::zeros((n_bins, config.n_mels));
        for bin in 0..n_bins {
            let f = bin as f64 * sr / n_fft as f64;
            for m in 0..config.n_mels {
                let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let w = ((f - lo) / (center - lo)).min((hi - f) / (hi - center));
                if w > 0.0 {
                    filters[[bin, m]] = w;
                }
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            config,
            win,
            hop,
            n_fft,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.config
    }

    /// Center frequency of each mel filter in Hz.
    pub fn center_frequencies(&self) -> Vec<f64> {
        let mel_max = hz_to_mel(self.config.sample_rate as f64 / 2.0);
        (1..=self.config.n_mels)
            .map(|i| mel_to_hz(mel_max * i as f64 / (self.config.n_mels + 1) as f64))
            .collect()
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.win {
            0
        } else {
            1 + (num_samples - self.win) / self.hop
        }
    }

    pub fn compute(&self, wave: &Waveform) -> Result<FeatureSequence> {
        if wave.sample_rate != self.config.sample_rate {
            return Err(Error::SampleRateMismatch(
                wave.sample_rate,
                self.config.sample_rate,
            ));
        }
        let n_frames = self.num_frames(wave.len());
        let n_bins = self.n_fft / 2 + 1;
        let mut frames = Array2::zeros((n_frames, self.config.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; n_bins];
        for t in 0..n_frames {
            let start = t * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < self.win {
                    Complex::new(wave.samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..self.config.n_mels {
                let energy: f64 = self
                    .filters
                    .column(m)
                    .iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum();
                frames[[t, m]] = (energy + self.config.log_floor).ln();
            }
        }
        Ok(FeatureSequence {
            frames,
            frame_shift_s: self.hop as f64 / self.config.sample_rate as f64,
            meta: format!("fbank{}", self.config.n_mels),
        })
    }
}

/// Log-mel filterbank with the default floor at the waveform's own rate.
pub fn fbank(wave: &Waveform, n_mels: usize, win_s: f64, hop_s: f64) -> Result<FeatureSequence> {
    Fbank::new(FbankConfig {
        sample_rate: wave.sample_rate,
        n_mels,
        win_s,
        hop_s,
        ..FbankConfig::default()
    })?
    .compute(wave)
}

/// Regression deltas over +-`window` frames with edge replication.
pub fn deltas(frames: ArrayView2<f64>, window: usize) -> Array2<f64> {
    let (t_len, dim) = frames.dim();
    let mut out = Array2::zeros((t_len, dim));
    if t_len == 0 || window == 0 {
        return out;
    }
    let denom: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    for t in 0..t_len {
        let mut row = out.row_mut(t);
        for n in 1..=window {
            let ahead = (t + n).min(t_len - 1);
            let behind = t.saturating_sub(n);
            let scale = n as f64 / denom;
            row.zip_mut_with(&frames.row(ahead), |o, &a| *o += scale * a);
            row.zip_mut_with(&frames.row(behind), |o, &b| *o -= scale * b);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Waveform enhancement
// ---------------------------------------------------------------------------

pub const WIENER_FFT: usize = 512;
pub const WIENER_HOP: usize = WIENER_FFT / 2;
pub const WIENER_GAIN_FLOOR: f64 = 0.05;

/// STFT-domain Wiener filter with the noise PSD taken from the first
/// `noise_profile_frames` analysis frames.
///
/// Analysis and synthesis both use a square-root periodic Hann window at 50%
/// overlap, which makes the STFT a tight frame: with every gain in `[0, 1]`
/// the output never carries more energy than the input.
pub fn spectral_enhance(noisy: &Waveform, noise_profile_frames: usize) -> Result<Waveform> {
    let n = WIENER_FFT;
    let hop = WIENER_HOP;
    let len = noisy.len();
    // Frame m covers original samples [(m - 1) * hop, (m + 1) * hop).
    let n_frames = (len + hop).div_ceil(hop);
    let available = n_frames.saturating_sub(2);
    if noise_profile_frames == 0 || available < noise_profile_frames {
        return Err(Error::Config(format!(
            "{len} samples cover {available} full frames, need {noise_profile_frames} for the noise profile"
        )));
    }
    let padded_len = (n_frames + 1) * hop;
    let mut padded = vec![0.0; padded_len];
    padded[hop..hop + len].copy_from_slice(&noisy.samples);

    let window: Vec<f64> = (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt())
        .collect();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let spectra: Vec<Vec<Complex<f64>>> = (0..n_frames)
        .map(|m| {
            let mut buf: Vec<Complex<f64>> = (0..n)
                .map(|i| Complex::new(padded[m * hop + i] * window[i], 0.0))
                .collect();
            fwd.process(&mut buf);
            buf
        })
        .collect();

    let mut noise_psd = vec![0.0; n];
    for spec in &spectra[1..=noise_profile_frames] {
        for (acc, c) in noise_psd.iter_mut().zip(spec) {
            *acc += c.norm_sqr();
        }
    }
    noise_psd
        .iter_mut()
        .for_each(|p| *p /= noise_profile_frames as f64);

    let mut out = vec![0.0; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for (m, spec) in spectra.iter().enumerate() {
        for ((slot, c), &pn) in buf.iter_mut().zip(spec).zip(&noise_psd) {
            *slot = c * wiener_gain(c.norm_sqr(), pn);
        }
        inv.process(&mut buf);
        for i in 0..n {
            out[m * hop + i] += buf[i].re * window[i] / n as f64;
        }
    }
    Waveform::new(out[hop..hop + len].to_vec(), noisy.sample_rate)
}

/// Power-subtraction Wiener gain `(P - Pn) / P`, floored and capped to `[floor, 1]`.
fn wiener_gain(power: f64, noise_power: f64) -> f64 {
    if noise_power == 0.0 {
        return 1.0;
    }
    if power <= 0.0 {
        return WIENER_GAIN_FLOOR;
    }
    (1.0 - noise_power / power).clamp(WIENER_GAIN_FLOOR, 1.0)
}

// ---------------------------------------------------------------------------
// SI-SNR
// ---------------------------------------------------------------------------

pub const SI_SNR_EPS: f64 = 1e-8;

/// Scale-invariant SNR in dB after removing the mean of both signals.
pub fn si_snr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    si_snr_slices(&reference.samples, &estimate.samples)
}

pub fn si_snr_slices(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::LengthMismatch(reference.len(), estimate.len()));
    }
    let n = reference.len().max(1) as f64;
    let mean_r = reference.iter().sum::<f64>() / n;
    let mean_e = estimate.iter().sum::<f64>() / n;
    let r: Vec<f64> = reference.iter().map(|x| x - mean_r).collect();
    let e: Vec<f64> = estimate.iter().map(|x| x - mean_e).collect();
    let ref_energy: f64 = r.iter().map(|x| x * x).sum();
    if ref_energy == 0.0 {
        return Err(Error::ZeroEnergy("reference"));
    }
    let dot: f64 = r.iter().zip(&e).map(|(a, b)| a * b).sum();
    let scale = dot / ref_energy;
    let mut target_energy = 0.0;
    let mut residual_energy = 0.0;
    for (a, b) in r.iter().zip(&e) {
        let target = scale * a;
        target_energy += target * target;
        residual_energy += (b - target) * (b - target);
    }
    Ok(10.0 * (target_energy / (residual_energy + SI_SNR_EPS) + SI_SNR_EPS).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> SynthLexicon {
        SynthLexicon::generate(20, 11, SynthTiming::default()).unwrap()
    }

    fn tone(freq: f64, secs: f64, amp: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn waveform_rejects_bad_input() {
        assert!(Waveform::new(vec![0.0, f64::NAN], SAMPLE_RATE).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let lex = lexicon();
        let a = synth_utterance(&[3, 1, 4], &lex, 9).unwrap();
        let b = synth_utterance(&[3, 1, 4], &lex, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_utterance(&[3, 1, 4], &lex, 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn fixed_duration_single_phone() {
        let timing = SynthTiming {
            duration_jitter: 0.0,
            lead_silence_s: 0.0,
            trail_silence_s: 0.0,
            ..SynthTiming::default()
        };
        let lex = SynthLexicon {
            phones_per_word: vec![vec![5]],
            ..SynthLexicon::generate(1, 0, timing).unwrap()
        };
        let (wave, segs) = synth_utterance(&[0], &lex, 1).unwrap();
        assert_eq!(wave.len(), (0.06 * SAMPLE_RATE as f64).round() as usize);
        assert_eq!(segs.len(), 1);
    }

    #[test]
    fn alignment_tiles_the_waveform() {
        let lex = lexicon();
        let transcript = [2, 7, 19];
        let (wave, segs) = synth_utterance(&transcript, &lex, 4).unwrap();
        let n_phones: usize = transcript
            .iter()
            .map(|&w| lex.phones_per_word[w].len())
            .sum();
        let phone_segs: Vec<_> = segs
            .iter()
            .filter(|s| matches!(s.label, SegmentLabel::Phone { .. }))
            .collect();
        assert_eq!(phone_segs.len(), n_phones);
        assert_eq!(segs[0].start, 0);
        assert_eq!(segs.last().unwrap().end, wave.len());
        for pair in segs.windows(2) {
            assert_eq!(pair[0].end, pair[1].start);
            assert!(pair[0].start < pair[0].end);
        }
        let order: Vec<usize> = phone_segs
            .iter()
            .map(|s| match s.label {
                SegmentLabel::Phone { phone, .. } => phone,
                SegmentLabel::Silence => unreachable!(),
            })
            .collect();
        let expected: Vec<usize> = transcript
            .iter()
            .flat_map(|&w| lex.phones_per_word[w].clone())
            .collect();
        assert_eq!(order, expected);
    }

    #[test]
    fn synthesis_errors() {
        let lex = lexicon();
        assert!(matches!(
            synth_utterance(&[], &lex, 0),
            Err(Error::EmptyTranscript)
        ));
        assert!(matches!(
            synth_utterance(&[1, 20], &lex, 0),
            Err(Error::UnknownWord(20))
        ));
    }

    #[test]
    fn lexicon_words_are_distinct_and_valid() {
        let lex = lexicon();
        for (i, w) in lex.phones_per_word.iter().enumerate() {
            assert!((3..=6).contains(&w.len()));
            assert!(w.windows(2).all(|p| p[0] != p[1]));
            assert!(!lex.phones_per_word[..i].contains(w));
        }
    }

    #[test]
    fn noise_is_unit_rms() {
        for kind in [NoiseKind::White, NoiseKind::Pink] {
            let n = generate_noise(kind, 16000, SAMPLE_RATE, 3).unwrap();
            assert!((n.rms() - 1.0).abs() < 1e-12);
            assert_eq!(n, generate_noise(kind, 16000, SAMPLE_RATE, 3).unwrap());
        }
    }

    fn scaled_noise_power(clean: &Waveform, mix: &Waveform) -> f64 {
        clean
            .samples
            .iter()
            .zip(&mix.samples)
            .map(|(c, m)| (m - c) * (m - c))
            .sum::<f64>()
            / clean.len() as f64
    }

    #[test]
    fn mixing_hits_requested_snr() {
        let clean = synth_utterance(&[0, 1], &lexicon(), 2).unwrap().0;
        let noise = generate_noise(NoiseKind::Pink, clean.len() + 500, SAMPLE_RATE, 5).unwrap();
        for snr in [-10.0, -3.5, 0.0, 7.0, 30.0] {
            let mix = mix_at_snr(&clean, &noise, snr, 8).unwrap();
            let measured = clean.mean_power() / scaled_noise_power(&clean, &mix);
            let target = 10f64.powf(snr / 10.0);
            assert!(
                (measured / target - 1.0).abs() < 1e-9,
                "{snr}: {measured} vs {target}"
            );
        }
    }

    #[test]
    fn high_snr_mix_is_nearly_clean() {
        let clean = synth_utterance(&[4], &lexicon(), 2).unwrap().0;
        let noise = generate_noise(NoiseKind::White, clean.len(), SAMPLE_RATE, 1).unwrap();
        let mix = mix_at_snr(&clean, &noise, 60.0, 0).unwrap();
        // g = rms(clean) * 1e-3 for unit-rms noise; peaks of Gaussian noise stay well under 10 sigma.
        let max_diff = clean
            .samples
            .iter()
            .zip(&mix.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-2 * clean.rms());
    }

    #[test]
    fn ten_db_mixture_scores_near_ten_db() {
        let lex = lexicon();
        for seed in 0..20 {
            let clean = synth_utterance(&[seed as usize % 20, 3], &lex, seed)
                .unwrap()
                .0;
            let noise =
                generate_noise(NoiseKind::White, clean.len(), SAMPLE_RATE, seed + 100).unwrap();
            let mix = mix_at_snr(&clean, &noise, 10.0, seed).unwrap();
            let s = si_snr(&clean, &mix).unwrap();
            assert!((8.0..=12.0).contains(&s), "seed {seed}: {s}");
        }
    }

    #[test]
    fn mixing_errors() {
        let clean = tone(440.0, 0.1, 0.5);
        let zero = Waveform::new(vec![0.0; clean.len()], SAMPLE_RATE).unwrap();
        let noise = generate_noise(NoiseKind::White, clean.len(), SAMPLE_RATE, 0).unwrap();
        assert!(matches!(
            mix_at_snr(&zero, &noise, 0.0, 0),
            Err(Error::ZeroEnergy(_))
        ));
        assert!(matches!(
            mix_at_snr(&clean, &zero, 0.0, 0),
            Err(Error::ZeroEnergy(_))
        ));
        let short = Waveform::new(vec![1.0; 10], SAMPLE_RATE).unwrap();
        assert!(matches!(
            mix_at_snr(&clean, &short, 0.0, 0),
            Err(Error::NoiseTooShort { .. })
        ));
        let other_rate = Waveform::new(noise.samples.clone(), 8000).unwrap();
        assert!(matches!(
            mix_at_snr(&clean, &other_rate, 0.0, 0),
            Err(Error::SampleRateMismatch(..))
        ));
    }

    #[test]
    fn fbank_frame_count_and_floor() {
        let silent = Waveform::new(vec![0.0; 16000], SAMPLE_RATE).unwrap();
        let feats = fbank(&silent, 40, 0.025, 0.010).unwrap();
        assert_eq!(feats.num_frames(), 1 + (16000 - 400) / 160);
        assert_eq!(feats.num_frames(), 98);
        assert_eq!(feats.dim(), 40);
        let floor = 1e-10f64.ln();
        assert!(feats.frames.iter().all(|&v| v == floor));

        let short = Waveform::new(vec![0.1; 399], SAMPLE_RATE).unwrap();
        assert_eq!(fbank(&short, 40, 0.025, 0.010).unwrap().num_frames(), 0);
        assert!(fbank(&silent, 40, 0.005, 0.010).is_err());
    }

    #[test]
    fn fbank_tone_peaks_at_its_mel_bin() {
        let fb = Fbank::new(FbankConfig::default()).unwrap();
        let centers = fb.center_frequencies();
        for (b, &f) in centers.iter().enumerate() {
            let feats = fb.compute(&tone(f, 0.2, 0.3)).unwrap();
            for row in feats.frames.outer_iter() {
                let argmax = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0;
                assert_eq!(argmax, b, "tone {f} Hz");
            }
        }
    }

    #[test]
    fn fbank_is_finite_on_extreme_input() {
        let mut samples = vec![0.0; 1200];
        samples[600] = 1.0;
        samples[601] = -1.0;
        let feats = fbank(
            &Waveform::new(samples, SAMPLE_RATE).unwrap(),
            40,
            0.025,
            0.010,
        )
        .unwrap();
        assert!(feats.frames.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deltas_of_a_ramp_are_constant() {
        let frames = Array2::from_shape_fn((10, 2), |(t, d)| (t * (d + 1)) as f64);
        let d = deltas(frames.view(), 2);
        for t in 2..8 {
            assert!((d[[t, 0]] - 1.0).abs() < 1e-12);
            assert!((d[[t, 1]] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wav_roundtrip_within_quantization() {
        let wave = synth_utterance(&[1, 2], &lexicon(), 0).unwrap().0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        wave.write_wav(&path).unwrap();
        let back = Waveform::read_wav(&path).unwrap();
        assert_eq!(back.len(), wave.len());
        assert_eq!(back.sample_rate, SAMPLE_RATE);
        for (a, b) in wave.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn spectral_enhance_basics() {
        let zero = Waveform::new(vec![0.0; 8000], SAMPLE_RATE).unwrap();
        let out = spectral_enhance(&zero, 4).unwrap();
        assert_eq!(out.len(), zero.len());
        assert!(out.samples.iter().all(|&x| x == 0.0));

        let short = Waveform::new(vec![0.1; 600], SAMPLE_RATE).unwrap();
        assert!(spectral_enhance(&short, 4).is_err());
        assert!(spectral_enhance(&zero, 0).is_err());
    }

    #[test]
    fn spectral_enhance_keeps_clean_speech() {
        let (clean, _) = synth_utterance(&[5, 9, 13], &lexicon(), 1).unwrap();
        let out = spectral_enhance(&clean, 8).unwrap();
        assert_eq!(out.len(), clean.len());
        assert!(out.energy() >= 0.9 * clean.energy());
        assert!(out.energy() <= clean.energy() * (1.0 + 1e-9));
    }

    #[test]
    fn spectral_enhance_improves_zero_db_mixtures() {
        let lex = lexicon();
        let mut wins = 0;
        for seed in 0..50u64 {
            let transcript = [seed as usize % 20, (seed as usize * 7 + 3) % 20];
            let clean = synth_utterance(&transcript, &lex, seed).unwrap().0;
            let noise =
                generate_noise(NoiseKind::White, clean.len(), SAMPLE_RATE, seed + 1000).unwrap();
            let noisy = mix_at_snr(&clean, &noise, 0.0, seed).unwrap();
            let enhanced = spectral_enhance(&noisy, 8).unwrap();
            let once = enhanced.energy();
            let twice = spectral_enhance(&enhanced, 8).unwrap().energy();
            assert!(twice <= once * (1.0 + 1e-6));
            if si_snr(&clean, &enhanced).unwrap() > si_snr(&clean, &noisy).unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 45, "{wins} of 50");
    }

    #[test]
    fn si_snr_properties() {
        let r = synth_utterance(&[0, 5], &lexicon(), 3).unwrap().0;
        let noise = generate_noise(NoiseKind::Pink, r.len(), SAMPLE_RATE, 3).unwrap();
        let est = mix_at_snr(&r, &noise, 5.0, 1).unwrap();
        assert!(si_snr(&r, &r.scaled(2.0)).unwrap() >= 60.0);
        let base = si_snr(&r, &est).unwrap();
        assert!((si_snr(&r, &est.scaled(3.0)).unwrap() - base).abs() < 1e-6);
        assert!((si_snr(&r, &est.scaled(-0.5)).unwrap() - base).abs() < 1e-6);
        assert_eq!(
            si_snr(&r, &r.scaled(-1.0)).unwrap(),
            si_snr(&r, &r).unwrap()
        );

        let zero = Waveform::new(vec![0.0; r.len()], SAMPLE_RATE).unwrap();
        assert!(matches!(si_snr(&zero, &r), Err(Error::ZeroEnergy(_))));
        assert!(matches!(
            si_snr_slices(&[1.0, 2.0], &[1.0]),
            Err(Error::LengthMismatch(2, 1))
        ));
        assert!(si_snr(&r, &zero).unwrap().is_finite());
    }
}
