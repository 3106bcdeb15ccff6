//! Synthetic paired corpora: token sequences with integer durations and
//! feature sequences that are a learnable function of the text.
//!
//! Each token owns a fixed random spectral envelope; a sequence's frames are
//! that envelope plus a few slow sequence-level harmonics and low-amplitude
//! noise. Everything is a deterministic function of the spec seed.

use crate::analyzer::FeatureSequence;
use crate::config::SyntheticCorpusSpec;
use crate::error::{Error, Result};
use crate::ioutil::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

const ITEM_MAGIC: &[u8] = b"MSMCITEM";
const ITEM_VERSION: u16 = 1;

/// One paired training item: text tokens, per-token frame counts, and the
/// feature sequence they align to (`sum(durations) == features.nrows()`).
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
    pub features: FeatureSequence,
}

impl CorpusItem {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() != self.durations.len() {
            return Err(Error::format("token/duration length mismatch"));
        }
        let total: usize = self.durations.iter().sum();
        if total != self.features.nrows() {
            return Err(Error::format(format!(
                "durations sum to {total} but features have {} frames",
                self.features.nrows()
            )));
        }
        Ok(())
    }
}

/// A corpus plus the vocabulary/feature dims its items conform to.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
    pub vocab_size: usize,
    pub feature_dim: usize,
}

impl Corpus {
    pub fn feature_views(&self) -> Vec<FeatureSequence> {
        self.items.iter().map(|i| i.features.clone()).collect()
    }

    /// Writes one binary file per item plus a JSON manifest.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::json!({
            "format": "msmc-corpus",
            "version": 1,
            "n_items": self.items.len(),
            "vocab_size": self.vocab_size,
            "feature_dim": self.feature_dim,
        });
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest json"),
        )?;
        for (i, item) in self.items.iter().enumerate() {
            let path = dir.join(format!("item_{i:04}.msmcitem"));
            let mut w = BufWriter::new(fs::File::create(path)?);
            w.write_all(ITEM_MAGIC)?;
            write_u16(&mut w, ITEM_VERSION)?;
            write_u32(&mut w, item.tokens.len() as u32)?;
            for t in &item.tokens {
                write_u32(&mut w, *t as u32)?;
            }
            for d in &item.durations {
                write_u32(&mut w, *d as u32)?;
            }
            write_array2(&mut w, &item.features)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Corpus> {
        let manifest_path = dir.join("manifest.json");
        let manifest: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(&manifest_path)
                .map_err(|_| Error::format(format!("missing {}", manifest_path.display())))?,
        )
        .map_err(|e| Error::format(format!("bad manifest: {e}")))?;
        let n_items = manifest["n_items"]
            .as_u64()
            .ok_or_else(|| Error::format("manifest missing n_items"))? as usize;
        let vocab_size = manifest["vocab_size"]
            .as_u64()
            .ok_or_else(|| Error::format("manifest missing vocab_size"))? as usize;
        let feature_dim = manifest["feature_dim"]
            .as_u64()
            .ok_or_else(|| Error::format("manifest missing feature_dim"))? as usize;
        let mut items = Vec::with_capacity(n_items);
        for i in 0..n_items {
            let path = dir.join(format!("item_{i:04}.msmcitem"));
            let mut r = BufReader::new(
                fs::File::open(&path)
                    .map_err(|_| Error::format(format!("missing {}", path.display())))?,
            );
            expect_magic(&mut r, ITEM_MAGIC)?;
            let version = read_u16(&mut r)?;
            if version != ITEM_VERSION {
                return Err(Error::format(format!("unsupported item version {version}")));
            }
            let n_tokens = read_u32(&mut r)? as usize;
            let tokens: Vec<usize> = (0..n_tokens)
                .map(|_| read_u32(&mut r).map(|v| v as usize))
                .collect::<Result<_>>()?;
            let durations: Vec<usize> = (0..n_tokens)
                .map(|_| read_u32(&mut r).map(|v| v as usize))
                .collect::<Result<_>>()?;
            let features = read_array2(&mut r)?;
            let item = CorpusItem {
                tokens,
                durations,
                features,
            };
            item.validate()?;
            if item.features.ncols() != feature_dim {
                return Err(Error::format("item feature_dim differs from manifest"));
            }
            if item.tokens.iter().any(|t| *t >= vocab_size) {
                return Err(Error::format("item token exceeds manifest vocabulary"));
            }
            items.push(item);
        }
        Ok(Corpus {
            items,
            vocab_size,
            feature_dim,
        })
    }
}

/// Per-token spectral envelopes, a deterministic function of the seed only.
fn token_envelopes(spec: &SyntheticCorpusSpec) -> Array2<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(crate::vq::mix_seed(spec.seed, 0xe47e));
    Array2::from_shape_fn((spec.vocab_size, spec.feature_dim), |_| {
        rng.gen_range(-1.0..1.0)
    })
}

/// Generates the deterministic paired corpus described by `spec`.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let envelopes = token_envelopes(spec);
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut items = Vec::with_capacity(spec.n_sequences);
    for _ in 0..spec.n_sequences {
        let n_tokens = rng.gen_range(spec.min_tokens..=spec.max_tokens);
        let tokens: Vec<usize> = (0..n_tokens)
            .map(|_| rng.gen_range(0..spec.vocab_size))
            .collect();
        let durations: Vec<usize> = (0..n_tokens)
            .map(|_| rng.gen_range(spec.min_duration..=spec.max_duration))
            .collect();
        let len: usize = durations.iter().sum();

        // three slow sequence-level harmonics with per-dim phase gradients
        let harmonics: Vec<(f64, f64, f64, f64)> = (1..=3)
            .map(|h| {
                let period = rng.gen_range(16.0..48.0);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let dim_phase = rng.gen_range(0.0..0.3);
                (spec.harmonic_amp / h as f64, period, phase, dim_phase)
            })
            .collect();

        let mut features = Array2::zeros((len, spec.feature_dim));
        let mut frame = 0;
        for (tok, dur) in tokens.iter().zip(&durations) {
            for _ in 0..*dur {
                for d in 0..spec.feature_dim {
                    let mut v = envelopes[[*tok, d]];
                    for (amp, period, phase, dim_phase) in &harmonics {
                        v += amp
                            * (std::f64::consts::TAU * frame as f64 / period
                                + phase
                                + d as f64 * dim_phase)
                                .sin();
                    }
                    v += rng.gen_range(-spec.noise_amp..=spec.noise_amp);
                    features[[frame, d]] = v;
                }
                frame += 1;
            }
        }
        let item = CorpusItem {
            tokens,
            durations,
            features,
        };
        item.validate()
            .expect("generator violated its own invariant");
        items.push(item);
    }
    Ok(Corpus {
        items,
        vocab_size: spec.vocab_size,
        feature_dim: spec.feature_dim,
    })
}
