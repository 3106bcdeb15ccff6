//! Analysis-synthesis plumbing: mel extraction, representation files,
//! vocoder-input assembly, and the pluggable waveform-decoder seam.

pub mod file;
pub mod mel;

pub use file::{header_bytes, msmcr_pack, msmcr_unpack, payload_bits};
pub use mel::{mel_extract, mel_filterbank, GriffinLimStub, WaveformDecoder};

use crate::analyzer::{upsample_repeat, FeatureSequence, Msmcr};
use crate::config::MelParams;
use crate::error::{Error, Result};
use ndarray::{s, Array2};
use std::collections::BTreeMap;

/// Up-samples every stage to stage-1 resolution by frame repetition and
/// concatenates along the feature axis in stage order, producing the
/// `L_1 x (S * N)` input a waveform decoder would consume.
pub fn assemble_vocoder_input(msmcr: &Msmcr, downsample: &[usize]) -> Result<Array2<f64>> {
    msmcr.validate_chain(downsample)?;
    let l1 = msmcr.stage1_len();
    let width: usize = msmcr.stages.iter().map(|s| s.vectors.ncols()).sum();
    let mut out = Array2::zeros((l1, width));
    let mut offset = 0;
    let mut rate = 1;
    for (j, stage) in msmcr.stages.iter().enumerate() {
        if j > 0 {
            rate *= downsample[j];
        }
        let up = if rate == 1 {
            stage.vectors.clone()
        } else {
            upsample_repeat(&stage.vectors, rate)
        };
        let cols = up.ncols();
        out.slice_mut(s![.., offset..offset + cols]).assign(&up);
        offset += cols;
    }
    Ok(out)
}

/// Waveform decoders keyed by name. The stub registered by
/// [`DecoderRegistry::with_default_stub`] is the only in-tree decoder;
/// real vocoders plug in behind the same trait.
#[derive(Default)]
pub struct DecoderRegistry {
    decoders: BTreeMap<String, Box<dyn WaveformDecoder>>,
}

impl DecoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_default_stub() -> Self {
        let mut reg = Self::new();
        reg.register(Box::new(GriffinLimStub::default()));
        reg
    }

    pub fn register(&mut self, decoder: Box<dyn WaveformDecoder>) {
        self.decoders.insert(decoder.name().to_string(), decoder);
    }

    pub fn get(&self, name: &str) -> Result<&dyn WaveformDecoder> {
        self.decoders
            .get(name)
            .map(|d| d.as_ref())
            .ok_or_else(|| Error::config(format!("no waveform decoder registered as {name:?}")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.decoders.keys().map(|s| s.as_str()).collect()
    }
}

/// Runs a registered decoder on assembled features.
pub fn decode_waveform(
    features: &FeatureSequence,
    params: &MelParams,
    registry: &DecoderRegistry,
    decoder_name: &str,
) -> Result<Vec<f64>> {
    registry.get(decoder_name)?.decode(features, params)
}

const FEAT_MAGIC: &[u8] = b"MSMCFEAT";

/// Writes a feature sequence as a small versioned binary file.
pub fn write_features(path: &std::path::Path, features: &FeatureSequence) -> Result<()> {
    use crate::ioutil::{write_array2, write_u16};
    let mut buf = Vec::new();
    buf.extend_from_slice(FEAT_MAGIC);
    write_u16(&mut buf, 1)?;
    write_array2(&mut buf, features)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_features(path: &std::path::Path) -> Result<FeatureSequence> {
    use crate::ioutil::{expect_magic, read_array2, read_u16};
    let bytes = std::fs::read(path)?;
    let mut r: &[u8] = &bytes;
    expect_magic(&mut r, FEAT_MAGIC)?;
    let version = read_u16(&mut r)?;
    if version != 1 {
        return Err(Error::format(format!("unsupported feature file version {version}")));
    }
    read_array2(&mut r)
}

/// Writes samples (clamped to [-1, 1]) as 16-bit PCM mono WAV.
pub fn write_wav(path: &std::path::Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let n = samples.len() as u32;
    let data_bytes = n * 2;
    let mut buf = Vec::with_capacity(44 + data_bytes as usize);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    buf.extend_from_slice(b"WAVEfmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&sample_rate.to_le_bytes());
    buf.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes());
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_bytes.to_le_bytes());
    for s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32_767.0).round() as i16;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}
