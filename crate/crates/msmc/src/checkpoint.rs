//! Versioned binary checkpoints for the analyzer and the predictor.
//!
//! Layout (all integers little-endian; strings and arrays length-prefixed):
//!
//! ```text
//! magic       8 bytes   "MSMCCKPT"
//! version     u16       currently 1
//! kind        u16       1 = analyzer, 2 = predictor
//! experiment  string    full experiment config as JSON
//! iteration   u64
//! rng         32 bytes seed, u64 word_pos_lo, u64 word_pos_hi, u64 stream
//! params      u32 count, then per entry: name string, f64 array2
//! adam        u16 flag; if 1: u64 t, f64 beta1/beta2/eps,
//!             u32 count, per entry: name string, m array2, v array2
//! codebooks   u16 stages; per stage: u16 heads; per head:
//!             f64 decay, f64 smoothing_eps, codes array2,
//!             ema_count array1, ema_sum array2
//! pred extra  (kind 2 only) u16 flag; if 1: 32-byte analyzer file hash
//! ```
//!
//! Identical state serializes to identical bytes: every map is written in
//! sorted name order.

use crate::analyzer::Analyzer;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::ioutil::*;
use crate::nn::ParamStore;
use crate::predictor::Predictor;
use crate::train::Adam;
use crate::vq::{Codebook, MultiHeadCodebook};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8] = b"MSMCCKPT";
const VERSION: u16 = 1;
const KIND_ANALYZER: u16 = 1;
const KIND_PREDICTOR: u16 = 2;

/// Serializable RNG position (seed + stream position).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

fn write_rng(w: &mut impl Write, rng: &RngState) -> Result<()> {
    w.write_all(&rng.seed)?;
    write_u64(w, rng.word_pos as u64)?;
    write_u64(w, (rng.word_pos >> 64) as u64)?;
    write_u64(w, rng.stream)?;
    Ok(())
}

fn read_rng(r: &mut impl Read) -> Result<RngState> {
    let seed: [u8; 32] = read_exact(r, 32)?.try_into().unwrap();
    let lo = read_u64(r)? as u128;
    let hi = read_u64(r)? as u128;
    let stream = read_u64(r)?;
    Ok(RngState {
        seed,
        word_pos: lo | (hi << 64),
        stream,
    })
}

fn write_params(w: &mut impl Write, params: &ParamStore) -> Result<()> {
    write_u32(w, params.len() as u32)?;
    for (name, value) in params.iter() {
        write_string(w, name)?;
        write_array2(w, value)?;
    }
    Ok(())
}

fn read_params(r: &mut impl Read) -> Result<ParamStore> {
    let count = read_u32(r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = read_string(r)?;
        let value = read_array2(r)?;
        store.insert_raw(&name, value);
    }
    Ok(store)
}

fn write_adam(w: &mut impl Write, adam: Option<&Adam>) -> Result<()> {
    match adam {
        None => write_u16(w, 0),
        Some(opt) => {
            write_u16(w, 1)?;
            write_u64(w, opt.step_count())?;
            let (b1, b2, eps) = opt.hyperparams();
            write_f64(w, b1)?;
            write_f64(w, b2)?;
            write_f64(w, eps)?;
            let (m, v) = opt.state();
            write_u32(w, m.len() as u32)?;
            for (name, mv) in m {
                write_string(w, name)?;
                write_array2(w, mv)?;
                write_array2(w, &v[name])?;
            }
            Ok(())
        }
    }
}

fn read_adam(r: &mut impl Read) -> Result<Option<Adam>> {
    if read_u16(r)? == 0 {
        return Ok(None);
    }
    let t = read_u64(r)?;
    let b1 = read_f64(r)?;
    let b2 = read_f64(r)?;
    let eps = read_f64(r)?;
    let count = read_u32(r)? as usize;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for _ in 0..count {
        let name = read_string(r)?;
        m.insert(name.clone(), read_array2(r)?);
        v.insert(name, read_array2(r)?);
    }
    Ok(Some(Adam::restore(b1, b2, eps, t, m, v)))
}

fn write_codebooks(w: &mut impl Write, codebooks: &[MultiHeadCodebook]) -> Result<()> {
    write_u16(w, codebooks.len() as u16)?;
    for mcb in codebooks {
        write_u16(w, mcb.n_heads() as u16)?;
        for bank in mcb.heads() {
            write_f64(w, bank.decay())?;
            write_f64(w, bank.smoothing_eps())?;
            write_array2(w, bank.codes())?;
            write_array1(w, bank.ema_count())?;
            write_array2(w, bank.ema_sum())?;
        }
    }
    Ok(())
}

fn read_codebooks(r: &mut impl Read) -> Result<Vec<MultiHeadCodebook>> {
    let stages = read_u16(r)? as usize;
    let mut out = Vec::with_capacity(stages);
    for _ in 0..stages {
        let heads = read_u16(r)? as usize;
        let mut banks = Vec::with_capacity(heads);
        for _ in 0..heads {
            let decay = read_f64(r)?;
            let eps = read_f64(r)?;
            let codes = read_array2(r)?;
            let count = read_array1(r)?;
            let sum = read_array2(r)?;
            banks.push(Codebook::from_state(codes, count, sum, decay, eps)?);
        }
        out.push(MultiHeadCodebook::new(banks)?);
    }
    Ok(out)
}

fn write_config(w: &mut impl Write, experiment: &ExperimentConfig) -> Result<()> {
    let json = serde_json::to_string(experiment)
        .map_err(|e| Error::format(format!("config serialize: {e}")))?;
    write_string(w, &json)
}

fn read_config(r: &mut impl Read) -> Result<ExperimentConfig> {
    let json = read_string(r)?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&json).map_err(|e| Error::format(format!("config parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A loaded analyzer checkpoint.
pub struct AnalyzerCheckpoint {
    pub experiment: ExperimentConfig,
    pub analyzer: Analyzer,
    pub adam: Option<Adam>,
    pub rng: RngState,
}

pub fn save_analyzer(
    path: &Path,
    experiment: &ExperimentConfig,
    analyzer: &Analyzer,
    adam: Option<&Adam>,
    rng: &RngState,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u16(&mut buf, VERSION)?;
    write_u16(&mut buf, KIND_ANALYZER)?;
    write_config(&mut buf, experiment)?;
    write_u64(&mut buf, analyzer.iteration())?;
    write_rng(&mut buf, rng)?;
    write_params(&mut buf, analyzer.params())?;
    write_adam(&mut buf, adam)?;
    write_codebooks(&mut buf, analyzer.codebooks())?;
    atomic_write(path, &buf)
}

pub fn load_analyzer(path: &Path) -> Result<AnalyzerCheckpoint> {
    let bytes = fs::read(path)?;
    let mut r: &[u8] = &bytes;
    expect_magic(&mut r, MAGIC)?;
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let kind = read_u16(&mut r)?;
    if kind != KIND_ANALYZER {
        return Err(Error::format("not an analyzer checkpoint"));
    }
    let experiment = read_config(&mut r)?;
    let iteration = read_u64(&mut r)?;
    let rng = read_rng(&mut r)?;
    let params = read_params(&mut r)?;
    let adam = read_adam(&mut r)?;
    let codebooks = read_codebooks(&mut r)?;
    let analyzer = Analyzer::from_state(experiment.analyzer.clone(), params, codebooks, iteration)?;
    Ok(AnalyzerCheckpoint {
        experiment,
        analyzer,
        adam,
        rng,
    })
}

/// A loaded predictor checkpoint.
pub struct PredictorCheckpoint {
    pub experiment: ExperimentConfig,
    pub predictor: Predictor,
    pub adam: Option<Adam>,
    pub rng: RngState,
}

pub fn save_predictor(
    path: &Path,
    experiment: &ExperimentConfig,
    predictor: &Predictor,
    adam: Option<&Adam>,
    rng: &RngState,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u16(&mut buf, VERSION)?;
    write_u16(&mut buf, KIND_PREDICTOR)?;
    write_config(&mut buf, experiment)?;
    write_u64(&mut buf, predictor.iteration())?;
    write_rng(&mut buf, rng)?;
    write_params(&mut buf, predictor.params())?;
    write_adam(&mut buf, adam)?;
    write_codebooks(&mut buf, predictor.codebooks())?;
    match predictor.analyzer_ckpt_hash() {
        None => write_u16(&mut buf, 0)?,
        Some(hash) => {
            write_u16(&mut buf, 1)?;
            buf.extend_from_slice(&hash);
        }
    }
    atomic_write(path, &buf)
}

pub fn load_predictor(path: &Path) -> Result<PredictorCheckpoint> {
    let bytes = fs::read(path)?;
    let mut r: &[u8] = &bytes;
    expect_magic(&mut r, MAGIC)?;
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let kind = read_u16(&mut r)?;
    if kind != KIND_PREDICTOR {
        return Err(Error::format("not a predictor checkpoint"));
    }
    let experiment = read_config(&mut r)?;
    let iteration = read_u64(&mut r)?;
    let rng = read_rng(&mut r)?;
    let params = read_params(&mut r)?;
    let adam = read_adam(&mut r)?;
    let codebooks = read_codebooks(&mut r)?;
    let hash = if read_u16(&mut r)? == 1 {
        Some(read_exact(&mut r, 32)?.try_into().unwrap())
    } else {
        None
    };
    let predictor = Predictor::from_state(
        experiment.predictor.clone(),
        experiment.analyzer.clone(),
        codebooks,
        params,
        hash,
        iteration,
    )?;
    Ok(PredictorCheckpoint {
        experiment,
        predictor,
        adam,
        rng,
    })
}

/// SHA-256 of a file's bytes; used to pin a predictor to the analyzer
/// checkpoint it was trained against.
pub fn file_sha256(path: &Path) -> Result<[u8; 32]> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().into())
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, Preset};
    use crate::train::Adam;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn tiny_experiment() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(Preset::V3);
        cfg.analyzer.model_dim = 16;
        cfg.analyzer.vq_dim = 8;
        cfg.analyzer.codebook_size = 8;
        cfg.analyzer.feature_dim = 6;
        cfg.analyzer.enc_blocks = 1;
        cfg.analyzer.dec_blocks = 1;
        cfg.analyzer.attn_heads = 2;
        cfg.predictor.model_dim = 16;
        cfg.predictor.enc_blocks = 1;
        cfg.predictor.dec_blocks = 1;
        cfg.predictor.attn_heads = 2;
        cfg.predictor.vocab_size = 6;
        if let Some(spec) = cfg.data.synthetic.as_mut() {
            spec.feature_dim = 6;
            spec.vocab_size = 6;
        }
        cfg
    }

    #[test]
    fn analyzer_checkpoint_round_trip_is_bit_exact() {
        let experiment = tiny_experiment();
        let mut analyzer = Analyzer::new(experiment.analyzer.clone(), 3).unwrap();
        let mut opt = Adam::from_config(&experiment.training);
        let mut rng = ChaCha20Rng::seed_from_u64(experiment.training.seed);
        let batch = vec![Array2::from_shape_fn((8, 6), |_| rng.gen_range(-1.0..1.0))];
        for _ in 0..3 {
            analyzer.train_step(&batch, &mut opt, 1e-3).unwrap();
        }
        let state = RngState::capture(&rng);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("analyzer.ckpt");
        save_analyzer(&path, &experiment, &analyzer, Some(&opt), &state).unwrap();
        let first = fs::read(&path).unwrap();

        let loaded = load_analyzer(&path).unwrap();
        assert_eq!(loaded.analyzer.params(), analyzer.params());
        assert_eq!(loaded.analyzer.codebooks(), analyzer.codebooks());
        assert_eq!(loaded.analyzer.iteration(), analyzer.iteration());
        assert_eq!(loaded.rng, state);
        let mut restored = loaded.rng.restore();
        assert_eq!(restored.gen::<u64>(), rng.gen::<u64>());

        // identical state writes identical bytes
        let path2 = dir.path().join("analyzer2.ckpt");
        save_analyzer(&path2, &loaded.experiment, &loaded.analyzer, loaded.adam.as_ref(), &state)
            .unwrap();
        assert_eq!(first, fs::read(&path2).unwrap());
    }

    #[test]
    fn predictor_checkpoint_round_trip_keeps_hash_and_codebooks() {
        let experiment = tiny_experiment();
        let analyzer = Analyzer::new(experiment.analyzer.clone(), 3).unwrap();
        let mut predictor =
            Predictor::new(experiment.predictor.clone(), &analyzer, 5).unwrap();
        predictor.set_analyzer_ckpt_hash([7u8; 32]);
        let rng = ChaCha20Rng::seed_from_u64(1);
        let state = RngState::capture(&rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictor.ckpt");
        save_predictor(&path, &experiment, &predictor, None, &state).unwrap();
        let loaded = load_predictor(&path).unwrap();
        assert_eq!(loaded.predictor.params(), predictor.params());
        assert_eq!(loaded.predictor.codebooks(), predictor.codebooks());
        assert_eq!(loaded.predictor.analyzer_ckpt_hash(), Some([7u8; 32]));
        assert_eq!(
            loaded.predictor.analyzer_fingerprint(),
            predictor.analyzer_fingerprint()
        );

        // kind confusion is rejected
        assert!(load_analyzer(&path).is_err());
    }
}
