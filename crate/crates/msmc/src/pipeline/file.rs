//! On-disk representation files: a fixed header plus one continuous
//! little-endian bitstream of code indices at `ceil(log2 M)` bits each.
//!
//! Byte-exact layout (all integers little-endian):
//!
//! ```text
//! magic        8  bytes  "MSMCRIDX"
//! version      u16       currently 1
//! stages       u16       S
//! heads        u16       H
//! m            u32 x S   codes per codebook, per stage
//! d            u32 x S   down-sample rates, per stage
//! frames       u64       source frame count L (stage j holds L / (d_1..d_j))
//! fingerprint  u64       structural config fingerprint
//! payload      ceil(B/8) bytes, B = sum_j L_j * H * ceil(log2 M_j)
//! ```
//!
//! The payload is packed stage by stage (ascending), head by head, frame by
//! frame; each index contributes its bits least-significant first, and bit
//! `p` of the stream lands in byte `p / 8` at position `p % 8`. The final
//! byte is zero-padded.

use crate::analyzer::{Msmcr, MsmcrStage};
use crate::config::AnalyzerConfig;
use crate::error::{Error, Result};
use crate::ioutil::*;
use crate::vq::{index_bits, MultiHeadCodebook};
use ndarray::Array2;
use std::io::Read;

const MAGIC: &[u8] = b"MSMCRIDX";
const VERSION: u16 = 1;

struct BitWriter {
    bytes: Vec<u8>,
    bit_pos: usize,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            bit_pos: 0,
        }
    }

    fn push(&mut self, value: u64, bits: u32) {
        for b in 0..bits {
            let byte = self.bit_pos / 8;
            if byte == self.bytes.len() {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                self.bytes[byte] |= 1 << (self.bit_pos % 8);
            }
            self.bit_pos += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit_pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, bit_pos: 0 }
    }

    fn pull(&mut self, bits: u32) -> Result<u64> {
        let mut value = 0u64;
        for b in 0..bits {
            let byte = self.bit_pos / 8;
            if byte >= self.bytes.len() {
                return Err(Error::format("truncated payload"));
            }
            if (self.bytes[byte] >> (self.bit_pos % 8)) & 1 == 1 {
                value |= 1 << b;
            }
            self.bit_pos += 1;
        }
        Ok(value)
    }
}

/// Payload size in bits for a given structure and source frame count.
pub fn payload_bits(cfg: &AnalyzerConfig, frames: usize) -> usize {
    let bits = index_bits(cfg.codebook_size) as usize;
    cfg.cumulative_rates()
        .iter()
        .map(|r| (frames / r) * cfg.heads * bits)
        .sum()
}

/// Serializes a representation. The source frame count is recovered from
/// stage 1 (`L = L_1 * d_1`); every stage length must agree with the chain.
pub fn msmcr_pack(msmcr: &Msmcr, cfg: &AnalyzerConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    if msmcr.fingerprint != cfg.fingerprint() {
        return Err(Error::Mismatch(format!(
            "representation fingerprint {:#x} != config {:#x}",
            msmcr.fingerprint,
            cfg.fingerprint()
        )));
    }
    msmcr.validate_chain(&cfg.downsample)?;
    if msmcr.stages.iter().any(|s| s.indices.nrows() == 0) {
        return Err(Error::contract("cannot pack an empty stage"));
    }
    let frames = msmcr.stages[0].indices.nrows() * cfg.downsample[0];
    let lens = cfg.stage_lens(frames)?;
    for (stage, len) in msmcr.stages.iter().zip(&lens) {
        if stage.indices.nrows() != *len || stage.indices.ncols() != cfg.heads {
            return Err(Error::contract("stage shape does not match config"));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u16(&mut out, VERSION)?;
    write_u16(&mut out, cfg.stages as u16)?;
    write_u16(&mut out, cfg.heads as u16)?;
    for _ in 0..cfg.stages {
        write_u32(&mut out, cfg.codebook_size as u32)?;
    }
    for d in &cfg.downsample {
        write_u32(&mut out, *d as u32)?;
    }
    write_u64(&mut out, frames as u64)?;
    write_u64(&mut out, msmcr.fingerprint)?;

    let bits = index_bits(cfg.codebook_size);
    let mut writer = BitWriter::new();
    for stage in &msmcr.stages {
        for k in 0..cfg.heads {
            for t in 0..stage.indices.nrows() {
                let idx = stage.indices[[t, k]];
                if idx >= cfg.codebook_size {
                    return Err(Error::contract(format!(
                        "index {idx} out of range for M = {}",
                        cfg.codebook_size
                    )));
                }
                writer.push(idx as u64, bits);
            }
        }
    }
    debug_assert_eq!(writer.bit_pos, payload_bits(cfg, frames));
    out.extend_from_slice(&writer.bytes);
    Ok(out)
}

/// Parses and validates a representation file, rematerializing vectors from
/// the codebooks.
pub fn msmcr_unpack(
    bytes: &[u8],
    cfg: &AnalyzerConfig,
    codebooks: &[MultiHeadCodebook],
) -> Result<Msmcr> {
    cfg.validate()?;
    if codebooks.len() != cfg.stages {
        return Err(Error::contract("stage/codebook count mismatch"));
    }
    let mut r = bytes;
    expect_magic(&mut r, MAGIC)?;
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported file version {version}")));
    }
    let stages = read_u16(&mut r)? as usize;
    let heads = read_u16(&mut r)? as usize;
    let m: Vec<u32> = (0..stages).map(|_| read_u32(&mut r)).collect::<Result<_>>()?;
    let d: Vec<u32> = (0..stages).map(|_| read_u32(&mut r)).collect::<Result<_>>()?;
    let frames = read_u64(&mut r)? as usize;
    let fingerprint = read_u64(&mut r)?;
    if fingerprint != cfg.fingerprint() {
        return Err(Error::Mismatch(format!(
            "file fingerprint {fingerprint:#x} != config {:#x}",
            cfg.fingerprint()
        )));
    }
    if stages != cfg.stages
        || heads != cfg.heads
        || m.iter().any(|mv| *mv as usize != cfg.codebook_size)
        || d.iter().zip(&cfg.downsample).any(|(dv, c)| *dv as usize != *c)
    {
        return Err(Error::format("header structure disagrees with config"));
    }
    let lens = cfg.stage_lens(frames)?;
    let expected_bytes = payload_bits(cfg, frames).div_ceil(8);
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() < expected_bytes {
        return Err(Error::format("truncated payload"));
    }
    if payload.len() > expected_bytes {
        return Err(Error::format("trailing bytes after payload"));
    }

    let bits = index_bits(cfg.codebook_size);
    let mut reader = BitReader::new(&payload);
    let mut out_stages = Vec::with_capacity(stages);
    for (sidx, len) in lens.iter().enumerate() {
        let mut indices = Array2::zeros((*len, heads));
        for k in 0..heads {
            for t in 0..*len {
                let idx = reader.pull(bits)? as usize;
                if idx >= cfg.codebook_size {
                    return Err(Error::format(format!(
                        "decoded index {idx} out of range for M = {}",
                        cfg.codebook_size
                    )));
                }
                indices[[t, k]] = idx;
            }
        }
        let vectors = codebooks[sidx].lookup(&indices)?;
        out_stages.push(MsmcrStage { indices, vectors });
    }
    Ok(Msmcr {
        stages: out_stages,
        fingerprint,
    })
}

/// Header size in bytes for a given stage count.
pub fn header_bytes(stages: usize) -> usize {
    8 + 2 + 2 + 2 + 4 * stages + 4 * stages + 8 + 8
}
