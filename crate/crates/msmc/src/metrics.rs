//! Representation quality measurement: mel-domain spectral distortion on
//! reconstructions, codebook usage statistics, and the combined
//! compactness/completeness report.

use crate::analyzer::{Analyzer, FeatureSequence, Msmcr, QuantMode};
use crate::error::{Error, Result};
use crate::vq::{compression_ratio, CompressionReport};
use ndarray::s;
use serde::{Deserialize, Serialize};

/// Cepstral-distance-style scaling constant `(10 / ln 10) * sqrt(2)`.
pub const MEL_DISTORTION_SCALE: f64 = 6.141_851_463_713_754;

/// Mean per-frame Euclidean distance between two log-mel sequences, scaled
/// to dB. Zero iff equal; lower is better.
pub fn mel_distortion(x: &FeatureSequence, y: &FeatureSequence) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::contract(format!(
            "distortion shapes differ: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::input("empty sequences"));
    }
    let mut acc = 0.0;
    for (xr, yr) in x.rows().into_iter().zip(y.rows()) {
        let mut sq = 0.0;
        for (a, b) in xr.iter().zip(yr.iter()) {
            let d = a - b;
            sq += d * d;
        }
        acc += sq.sqrt();
    }
    Ok(MEL_DISTORTION_SCALE * acc / x.nrows() as f64)
}

/// Usage health of one codebook.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    /// `exp(entropy)` of the empirical index distribution; 1 = collapse,
    /// M = uniform usage.
    pub perplexity: f64,
    /// Share of codes never used.
    pub dead_fraction: f64,
}

/// Perplexity and dead-code share of an index stream over `m` codes.
pub fn codebook_usage(indices: &[usize], m: usize) -> Result<UsageStats> {
    if indices.is_empty() {
        return Err(Error::input("empty index stream"));
    }
    if indices.iter().any(|i| *i >= m) {
        return Err(Error::contract(format!("index out of range 0..{m}")));
    }
    let mut counts = vec![0usize; m];
    for i in indices {
        counts[*i] += 1;
    }
    let total = indices.len() as f64;
    let mut entropy = 0.0;
    let mut dead = 0usize;
    for c in &counts {
        if *c == 0 {
            dead += 1;
            continue;
        }
        let p = *c as f64 / total;
        entropy -= p * p.ln();
    }
    Ok(UsageStats {
        perplexity: entropy.exp(),
        dead_fraction: dead as f64 / m as f64,
    })
}

/// Fraction of index positions two representations agree on. Stages are
/// compared pairwise; length mismatches count as disagreement against the
/// longer stage.
pub fn index_agreement(a: &Msmcr, b: &Msmcr) -> Result<f64> {
    if a.stages.len() != b.stages.len() {
        return Err(Error::contract("stage count mismatch"));
    }
    let mut matches = 0usize;
    let mut total = 0usize;
    for (sa, sb) in a.stages.iter().zip(&b.stages) {
        if sa.indices.ncols() != sb.indices.ncols() {
            return Err(Error::contract("head count mismatch"));
        }
        let heads = sa.indices.ncols();
        let overlap = sa.indices.nrows().min(sb.indices.nrows());
        let longest = sa.indices.nrows().max(sb.indices.nrows());
        total += longest * heads;
        for t in 0..overlap {
            for k in 0..heads {
                if sa.indices[[t, k]] == sb.indices[[t, k]] {
                    matches += 1;
                }
            }
        }
    }
    Ok(matches as f64 / total as f64)
}

/// Compactness and completeness of one trained analyzer on an eval set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepresentationReport {
    pub preset: Option<String>,
    pub compression: CompressionReport,
    pub mel_distortion_db: f64,
    /// Per stage, per head.
    pub codebook_usage: Vec<Vec<UsageStats>>,
    pub eval_sequences: usize,
}

impl RepresentationReport {
    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let name = self.preset.as_deref().unwrap_or("-");
        out.push_str(&format!(
            "representation {name}: compression ratio {:.2} (rounded {}), {:.4} bits/frame\n",
            self.compression.ratio, self.compression.rounded, self.compression.bits_per_frame
        ));
        out.push_str(&format!(
            "mel distortion: {:.4} dB over {} sequences\n",
            self.mel_distortion_db, self.eval_sequences
        ));
        out.push_str("stage head perplexity dead_fraction\n");
        for (j, stage) in self.codebook_usage.iter().enumerate() {
            for (k, usage) in stage.iter().enumerate() {
                out.push_str(&format!(
                    "{:>5} {:>4} {:>10.2} {:>13.3}\n",
                    j + 1,
                    k + 1,
                    usage.perplexity,
                    usage.dead_fraction
                ));
            }
        }
        out
    }
}

/// Runs analyze/reconstruct over the eval set and aggregates the report.
/// `bypass` swaps in the quantization-free forward for paired comparisons.
#[allow(clippy::needless_range_loop)] // heads index parallel stream buckets
pub fn representation_report(
    analyzer: &Analyzer,
    eval_set: &[FeatureSequence],
    preset: Option<String>,
    source_bits: u32,
    bypass: bool,
) -> Result<RepresentationReport> {
    if eval_set.is_empty() {
        return Err(Error::input("empty eval set"));
    }
    let cfg = analyzer.config();
    let mode = if bypass {
        QuantMode::Bypass
    } else {
        QuantMode::Learned
    };
    let mut distortion = 0.0;
    let mut streams: Vec<Vec<Vec<usize>>> =
        vec![vec![Vec::new(); cfg.heads]; cfg.stages];
    for x in eval_set {
        let fwd = analyzer.forward(x, mode)?;
        let recon = fwd.reconstruction.slice(s![..fwd.orig_len, ..]).to_owned();
        let orig = fwd.input_padded.slice(s![..fwd.orig_len, ..]).to_owned();
        distortion += mel_distortion(&orig, &recon)?;
        for (j, stage) in fwd.stages.iter().enumerate() {
            let valid = stage.mask.iter().filter(|m| **m > 0.0).count();
            for k in 0..cfg.heads {
                streams[j][k].extend(stage.quant.indices.column(k).iter().take(valid));
            }
        }
    }
    let codebook_usage = streams
        .iter()
        .map(|stage| {
            stage
                .iter()
                .map(|s| codebook_usage(s, cfg.codebook_size))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RepresentationReport {
        preset,
        compression: compression_ratio(cfg, cfg.feature_dim, source_bits)?,
        mel_distortion_db: distortion / eval_set.len() as f64,
        codebook_usage,
        eval_sequences: eval_set.len(),
    })
}
