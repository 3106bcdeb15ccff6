//! Configuration types, presets, and the structural fingerprint.
//!
//! Configs are flat TOML with nested sections. Unknown keys are rejected so
//! typos fail loudly instead of silently using defaults.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Block family used by encoders/decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockFamily {
    /// Self-attention + feed-forward blocks with sinusoidal positions.
    Transformer,
    /// Stacked 1-D convolution blocks.
    Conv,
}

fn default_true() -> bool {
    true
}

/// Structure of the analyzer and its multi-stage multi-codebook quantizer.
/// This is the single source of structural truth for the representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzerConfig {
    /// Stage count S.
    pub stages: usize,
    /// Per-stage down-sample rates, applied cumulatively bottom-up.
    pub downsample: Vec<usize>,
    /// Quantizer heads H per stage.
    pub heads: usize,
    /// Codes per codebook M (shared by all stages and heads).
    pub codebook_size: usize,
    /// Width of the pre-quantization projection (the quantized vector dim).
    pub vq_dim: usize,
    /// Input/output feature width (mel bands).
    pub feature_dim: usize,
    pub model_dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub block_family: BlockFamily,
    pub attn_heads: usize,
    /// Commitment-loss weight.
    pub alpha: f64,
    /// Stage-prediction loss weight.
    pub beta: f64,
    /// Triplet weight inside the stage-prediction loss.
    pub gamma: f64,
    /// Triplet margin.
    pub margin: f64,
    pub ema_decay: f64,
    pub smoothing_eps: f64,
    /// Right-pad inputs (repeating the last frame) to a multiple of the
    /// total down-sample factor. When false, indivisible lengths are errors.
    #[serde(default = "default_true")]
    pub pad_inputs: bool,
}

impl AnalyzerConfig {
    /// Desk-scale defaults; structural fields follow the 1-stage single-head
    /// baseline until a preset overrides them.
    pub fn desk_default() -> Self {
        AnalyzerConfig {
            stages: 1,
            downsample: vec![1],
            heads: 1,
            codebook_size: 512,
            vq_dim: 64,
            feature_dim: 80,
            model_dim: 64,
            enc_blocks: 2,
            dec_blocks: 2,
            block_family: BlockFamily::Transformer,
            attn_heads: 4,
            alpha: 1.0,
            beta: 0.1,
            gamma: 1.0,
            margin: 0.1,
            ema_decay: 0.99,
            smoothing_eps: 1e-5,
            pad_inputs: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("stages must be >= 1"));
        }
        if self.downsample.len() != self.stages {
            return Err(Error::config(format!(
                "downsample has {} entries but stages = {}",
                self.downsample.len(),
                self.stages
            )));
        }
        if self.downsample.iter().any(|d| *d < 1) {
            return Err(Error::config("every down-sample rate must be >= 1"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads must be >= 1"));
        }
        if !self.vq_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "vq_dim {} not divisible by heads {}",
                self.vq_dim, self.heads
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::config("codebook_size must be >= 2"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::config("loss weights must be >= 0"));
        }
        if self.margin <= 0.0 {
            return Err(Error::config("margin must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must be in [0, 1]"));
        }
        if self.smoothing_eps < 0.0 {
            return Err(Error::config("smoothing_eps must be >= 0"));
        }
        if self.block_family == BlockFamily::Transformer && !self.model_dim.is_multiple_of(self.attn_heads) {
            return Err(Error::config(format!(
                "model_dim {} not divisible by attn_heads {}",
                self.model_dim, self.attn_heads
            )));
        }
        Ok(())
    }

    /// Cumulative down-sample factor at each stage: `r_j = d_1 * ... * d_j`.
    pub fn cumulative_rates(&self) -> Vec<usize> {
        let mut rates = Vec::with_capacity(self.stages);
        let mut acc = 1;
        for d in &self.downsample {
            acc *= d;
            rates.push(acc);
        }
        rates
    }

    /// Product of all down-sample rates.
    pub fn total_rate(&self) -> usize {
        self.downsample.iter().product()
    }

    /// Smallest multiple of the total rate that holds `len` frames.
    pub fn padded_len(&self, len: usize) -> usize {
        let r = self.total_rate();
        len.div_ceil(r) * r
    }

    /// Stage lengths for a (padded) input of `len` frames.
    pub fn stage_lens(&self, len: usize) -> Result<Vec<usize>> {
        let rates = self.cumulative_rates();
        if len == 0 || !len.is_multiple_of(self.total_rate()) {
            return Err(Error::input(format!(
                "sequence length {len} not divisible by total down-sample factor {}",
                self.total_rate()
            )));
        }
        Ok(rates.iter().map(|r| len / r).collect())
    }

    /// Number of stage-`j` frames that contain at least one real (unpadded)
    /// input frame; everything beyond is masked out of the losses.
    pub fn stage_valid_lens(&self, orig_len: usize) -> Vec<usize> {
        self.cumulative_rates()
            .iter()
            .map(|r| orig_len.div_ceil(*r))
            .collect()
    }

    /// Per-head code dimension `vq_dim / heads`.
    pub fn head_dim(&self) -> usize {
        self.vq_dim / self.heads
    }

    /// Hash over the fields that determine representation compatibility.
    /// Checkpoints and serialized representations embed this value.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(b"msmc-structure-v1");
        for v in [
            self.stages as u64,
            self.heads as u64,
            self.codebook_size as u64,
            self.vq_dim as u64,
            self.feature_dim as u64,
        ] {
            hasher.update(v.to_le_bytes());
        }
        for d in &self.downsample {
            hasher.update((*d as u64).to_le_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Acoustic-model structure: text encoder, duration head, per-stage decoders.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    /// Text-encoder block count.
    pub enc_blocks: usize,
    /// Block count in each stage decoder.
    pub dec_blocks: usize,
    pub block_family: BlockFamily,
    pub attn_heads: usize,
    /// Triplet weight in the predictor loss.
    pub gamma: f64,
    pub margin: f64,
    /// Weight of the duration-predictor loss.
    pub duration_weight: f64,
}

impl PredictorConfig {
    pub fn desk_default() -> Self {
        PredictorConfig {
            vocab_size: 12,
            model_dim: 64,
            enc_blocks: 2,
            dec_blocks: 2,
            block_family: BlockFamily::Transformer,
            attn_heads: 4,
            gamma: 1.0,
            margin: 0.1,
            duration_weight: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be >= 1"));
        }
        if self.block_family == BlockFamily::Transformer && !self.model_dim.is_multiple_of(self.attn_heads) {
            return Err(Error::config(format!(
                "model_dim {} not divisible by attn_heads {}",
                self.model_dim, self.attn_heads
            )));
        }
        if self.margin <= 0.0 {
            return Err(Error::config("margin must be > 0"));
        }
        if self.gamma < 0.0 || self.duration_weight < 0.0 {
            return Err(Error::config("loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// Short-time mel analysis parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelParams {
    pub sample_rate: u32,
    pub n_mels: usize,
    /// Seconds between frame starts.
    pub frame_shift: f64,
    /// Analysis window length in seconds.
    pub window_length: f64,
    pub fft_size: usize,
    /// Energies are clamped to this floor before the natural log.
    pub log_floor: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        MelParams {
            sample_rate: 16_000,
            n_mels: 80,
            frame_shift: 0.0125,
            window_length: 0.05,
            fft_size: 1024,
            log_floor: 1e-5,
        }
    }
}

impl MelParams {
    pub fn shift_samples(&self) -> usize {
        (self.frame_shift * self.sample_rate as f64).round() as usize
    }

    pub fn window_samples(&self) -> usize {
        (self.window_length * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_shift > self.window_length {
            return Err(Error::config("frame_shift must be <= window_length"));
        }
        if self.fft_size < self.window_samples() {
            return Err(Error::config(format!(
                "fft_size {} smaller than window ({} samples)",
                self.fft_size,
                self.window_samples()
            )));
        }
        if self.n_mels == 0 || self.shift_samples() == 0 {
            return Err(Error::config("n_mels and frame_shift must be positive"));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::config("log_floor must be > 0"));
        }
        Ok(())
    }
}

/// Optimizer and loop budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub analyzer_iters: usize,
    pub predictor_iters: usize,
    /// Learning rate at iteration 0.
    pub lr_start: f64,
    /// Learning rate reached at the final iteration.
    pub lr_end: f64,
    /// Iterations of flat learning rate before the exponential decay begins.
    pub lr_decay_start: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl TrainingConfig {
    pub fn desk_default() -> Self {
        TrainingConfig {
            seed: 1234,
            batch_size: 8,
            analyzer_iters: 2_000,
            predictor_iters: 3_000,
            lr_start: 2e-4,
            lr_end: 1e-6,
            lr_decay_start: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 500,
            log_every: 25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.lr_start <= 0.0 || self.lr_end <= 0.0 || self.lr_end > self.lr_start {
            return Err(Error::config("need lr_start >= lr_end > 0"));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::config("checkpoint_every/log_every must be >= 1"));
        }
        Ok(())
    }

    /// Flat at `lr_start` until `lr_decay_start`, then exponential decay
    /// hitting `lr_end` at `total_iters`.
    pub fn learning_rate(&self, iter: usize, total_iters: usize) -> f64 {
        if iter <= self.lr_decay_start || total_iters <= self.lr_decay_start {
            return self.lr_start;
        }
        let span = (total_iters - self.lr_decay_start) as f64;
        let t = (iter - self.lr_decay_start) as f64 / span;
        let t = t.min(1.0);
        (self.lr_start.ln() + t * (self.lr_end.ln() - self.lr_start.ln())).exp()
    }
}

/// Synthetic paired corpus: token sequences with integer durations, and
/// feature frames that are a smooth deterministic function of token identity
/// (per-token spectral envelope) plus slow random harmonics and low noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub n_sequences: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Amplitude of the slow harmonic component.
    pub harmonic_amp: f64,
    /// Standard deviation of the per-frame noise.
    pub noise_amp: f64,
}

impl SyntheticCorpusSpec {
    pub fn desk_default() -> Self {
        SyntheticCorpusSpec {
            n_sequences: 8,
            min_tokens: 4,
            max_tokens: 8,
            min_duration: 2,
            max_duration: 6,
            feature_dim: 80,
            vocab_size: 12,
            seed: 7,
            harmonic_amp: 0.04,
            noise_amp: 0.005,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be >= 1"));
        }
        if self.n_sequences == 0 || self.min_tokens == 0 {
            return Err(Error::config("corpus must contain at least one token"));
        }
        if self.min_tokens > self.max_tokens || self.min_duration > self.max_duration {
            return Err(Error::config("length ranges must be non-empty"));
        }
        if self.min_duration == 0 {
            return Err(Error::config("durations must be >= 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be >= 1"));
        }
        Ok(())
    }
}

/// Where training data comes from: exactly one of the fields must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticCorpusSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_dir: Option<PathBuf>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.corpus_dir) {
            (Some(spec), None) => spec.validate(),
            (None, Some(_)) => Ok(()),
            _ => Err(Error::config(
                "data must set exactly one of `synthetic` or `corpus_dir`",
            )),
        }
    }
}

/// Everything one experiment needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset name this config was derived from, if any (informational).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub analyzer: AnalyzerConfig,
    pub predictor: PredictorConfig,
    pub mel: MelParams,
    pub training: TrainingConfig,
    pub data: DataConfig,
}

/// Built-in experiment presets.
///
/// V1/V2/V3 are the representation ablations (1-stage 1-head, 1-stage
/// 4-head, 2-stage 4-head with rates [1, 4]); M1/M2/M3 are acoustic-model
/// block variants on top of the V3 representation (both the text encoder
/// and the stage decoders shrink). `Reference` keeps full-scale budgets and
/// is not exercised by tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    V1,
    V2,
    V3,
    M1,
    M2,
    M3,
    Reference,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "V1" => Ok(Preset::V1),
            "V2" => Ok(Preset::V2),
            "V3" => Ok(Preset::V3),
            "M1" => Ok(Preset::M1),
            "M2" => Ok(Preset::M2),
            "M3" => Ok(Preset::M3),
            "REFERENCE" => Ok(Preset::Reference),
            other => Err(Error::config(format!("unknown preset {other:?}"))),
        }
    }
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::V1,
        Preset::V2,
        Preset::V3,
        Preset::M1,
        Preset::M2,
        Preset::M3,
        Preset::Reference,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::V1 => "V1",
            Preset::V2 => "V2",
            Preset::V3 => "V3",
            Preset::M1 => "M1",
            Preset::M2 => "M2",
            Preset::M3 => "M3",
            Preset::Reference => "reference",
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale base config (V1 representation) used by all presets.
    fn desk_base() -> Self {
        ExperimentConfig {
            preset: None,
            analyzer: AnalyzerConfig::desk_default(),
            predictor: PredictorConfig::desk_default(),
            mel: MelParams::default(),
            training: TrainingConfig::desk_default(),
            data: DataConfig {
                synthetic: Some(SyntheticCorpusSpec::desk_default()),
                corpus_dir: None,
            },
        }
    }

    pub fn preset(p: Preset) -> Self {
        let mut cfg = Self::desk_base();
        cfg.preset = Some(p.name().to_string());
        match p {
            Preset::V1 => {}
            Preset::V2 => {
                cfg.analyzer.heads = 4;
            }
            Preset::V3 | Preset::M1 | Preset::M2 | Preset::M3 => {
                cfg.analyzer.stages = 2;
                cfg.analyzer.downsample = vec![1, 4];
                cfg.analyzer.heads = 4;
            }
            Preset::Reference => {}
        }
        match p {
            Preset::M1 => {
                cfg.predictor.block_family = BlockFamily::Transformer;
                cfg.predictor.enc_blocks = 4;
                cfg.predictor.dec_blocks = 4;
                cfg.predictor.model_dim = 64;
            }
            Preset::M2 => {
                cfg.predictor.block_family = BlockFamily::Transformer;
                cfg.predictor.enc_blocks = 3;
                cfg.predictor.dec_blocks = 3;
                cfg.predictor.model_dim = 32;
            }
            Preset::M3 => {
                cfg.predictor.block_family = BlockFamily::Conv;
                cfg.predictor.enc_blocks = 4;
                cfg.predictor.dec_blocks = 4;
                cfg.predictor.model_dim = 32;
            }
            Preset::Reference => {
                // Full-scale budgets: 2-stage 4-head representation, wide
                // models, long schedules. Kept for documentation; far beyond
                // desk runtimes.
                cfg.analyzer.stages = 2;
                cfg.analyzer.downsample = vec![1, 4];
                cfg.analyzer.heads = 4;
                cfg.analyzer.model_dim = 256;
                cfg.analyzer.vq_dim = 256;
                cfg.analyzer.enc_blocks = 4;
                cfg.analyzer.dec_blocks = 4;
                cfg.predictor.model_dim = 600;
                cfg.predictor.attn_heads = 4;
                cfg.predictor.enc_blocks = 6;
                cfg.predictor.dec_blocks = 6;
                cfg.training.analyzer_iters = 200_000;
                cfg.training.predictor_iters = 100_000;
                cfg.training.lr_decay_start = 20_000;
                cfg.training.batch_size = 64;
            }
            _ => {}
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.analyzer.validate()?;
        self.predictor.validate()?;
        self.mel.validate()?;
        self.training.validate()?;
        self.data.validate()?;
        if let Some(spec) = &self.data.synthetic {
            if spec.feature_dim != self.analyzer.feature_dim {
                return Err(Error::config(format!(
                    "corpus feature_dim {} != analyzer feature_dim {}",
                    spec.feature_dim, self.analyzer.feature_dim
                )));
            }
            if spec.vocab_size > self.predictor.vocab_size {
                return Err(Error::config(format!(
                    "corpus vocab {} exceeds predictor vocab {}",
                    spec.vocab_size, self.predictor.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize: {e}")))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_encode_the_ablation_structures() {
        let v1 = ExperimentConfig::preset(Preset::V1);
        assert_eq!(
            (v1.analyzer.stages, v1.analyzer.heads, v1.analyzer.codebook_size),
            (1, 1, 512)
        );
        assert_eq!(v1.analyzer.downsample, vec![1]);

        let v2 = ExperimentConfig::preset(Preset::V2);
        assert_eq!((v2.analyzer.stages, v2.analyzer.heads), (1, 4));
        assert_eq!(v2.analyzer.downsample, vec![1]);

        let v3 = ExperimentConfig::preset(Preset::V3);
        assert_eq!((v3.analyzer.stages, v3.analyzer.heads), (2, 4));
        assert_eq!(v3.analyzer.downsample, vec![1, 4]);
        assert_eq!(v3.analyzer.codebook_size, 512);

        let m3 = ExperimentConfig::preset(Preset::M3);
        assert_eq!(m3.predictor.block_family, BlockFamily::Conv);
        assert_eq!(m3.predictor.enc_blocks, 4);
        for p in Preset::ALL {
            ExperimentConfig::preset(p).validate().unwrap();
        }
    }

    #[test]
    fn toml_round_trip_is_identity() {
        let cfg = ExperimentConfig::preset(Preset::V3);
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        let text2 = back.to_toml_string().unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = ExperimentConfig::preset(Preset::V1);
        let mut text = cfg.to_toml_string().unwrap();
        text.push_str("\n[analyzer2]\nfoo = 1\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let bad = text.replace("stages = 1", "stages = 1\nstagez = 2");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn stage_length_arithmetic() {
        let mut cfg = AnalyzerConfig::desk_default();
        cfg.stages = 2;
        cfg.downsample = vec![1, 4];
        assert_eq!(cfg.stage_lens(16).unwrap(), vec![16, 4]);
        assert_eq!(cfg.padded_len(10), 12);
        assert_eq!(cfg.stage_valid_lens(10), vec![10, 3]);
        assert!(cfg.stage_lens(10).is_err());
    }

    #[test]
    fn fingerprint_tracks_structure_only() {
        let a = AnalyzerConfig::desk_default();
        let mut b = a.clone();
        b.alpha = 0.5; // loss weight does not change representation shape
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.heads = 2;
        b.vq_dim = 64;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn lr_schedule_starts_flat_and_reaches_end() {
        let t = TrainingConfig::desk_default();
        assert_eq!(t.learning_rate(0, 2000), 2e-4);
        assert_eq!(t.learning_rate(200, 2000), 2e-4);
        let end = t.learning_rate(2000, 2000);
        assert!((end - 1e-6).abs() / 1e-6 < 1e-9);
        let mid = t.learning_rate(1100, 2000);
        assert!(mid < 2e-4 && mid > 1e-6);
    }
}
