//! Per-chunk block compression.
//!
//! Three codecs, selected by the id stored in each chunk header:
//!
//! | id | name       | shape                                   |
//! |----|------------|-----------------------------------------|
//! | 0  | none       | identity, stored bytes == raw bytes     |
//! | 1  | blosc-like | byte shuffle + fast LZ block compressor |
//! | 2  | bzip2-like | slower, higher-ratio block compressor   |
//!
//! Codec 1 prefixes its stored block with one byte holding the shuffle
//! element size (1 means the shuffle was skipped), so decompression needs no
//! side channel beyond the codec id and the expected raw length. Codec 0 is
//! a true identity: no framing, no prefix.
//!
//! Compression never fails; incompressible input may expand. Decompression
//! fails with `DecodeError` on truncated or damaged input, including the
//! case where the output length disagrees with the chunk header's raw_len.


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CODEC_NONE: u16 = 0;
pub const CODEC_BLOSC_LIKE: u16 = 1;
pub const CODEC_BZIP2_LIKE: u16 = 2;

/// Codec selection plus tuning, as carried in the engine config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodecConfig {
    pub codec_id: u16,
    /// 0..=9. Codec 2 maps this onto its compressor's levels (floored at 1,
    /// since a stored-block level would void the ratio contract); codec 1
    /// treats it as a hint.
    pub level: u8,
    /// Byte shuffle before codec 1. Transposing element bytes groups the
    /// slowly-varying high bytes of numeric data, which is where most of the
    /// ratio on simulation output comes from.
    pub shuffle: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            codec_id: CODEC_NONE,
            level: 5,
            shuffle: true,
        }
    }
}

impl CodecConfig {
    pub fn named(name: &str) -> Option<u16> {
        match name {
            "none" => Some(CODEC_NONE),
            "blosc-like" => Some(CODEC_BLOSC_LIKE),
            "bzip2-like" => Some(CODEC_BZIP2_LIKE),
            _ => None,
        }
    }

    pub fn name(codec_id: u16) -> &'static str {
        match codec_id {
            CODEC_NONE => "none",
            CODEC_BLOSC_LIKE => "blosc-like",
            CODEC_BZIP2_LIKE => "bzip2-like",
            _ => "unknown",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codec_id > CODEC_BZIP2_LIKE {
            return Err(Error::UnknownCodec(self.codec_id));
        }
        if self.level > 9 {
            return Err(Error::InvalidConfig(format!(
                "compression level {} out of range 0..=9",
                self.level
            )));
        }
        Ok(())
    }
}

/// Byte-transpose `raw` so byte b of every element is contiguous.
fn shuffle_bytes(raw: &[u8], elem: usize) -> Vec<u8> {
    let n = raw.len() / elem;
    let mut out = vec![0u8; raw.len()];
    for b in 0..elem {
        for i in 0..n {
            out[b * n + i] = raw[i * elem + b];
        }
    }
    out
}

fn unshuffle_bytes(shuffled: &[u8], elem: usize) -> Vec<u8> {
    let n = shuffled.len() / elem;
    let mut out = vec![0u8; shuffled.len()];
    for b in 0..elem {
        for i in 0..n {
            out[i * elem + b] = shuffled[b * n + i];
        }
    }
    out
}

/// Compress one chunk payload. `element_size` drives the shuffle and must
/// divide `raw.len()` when shuffling is requested; otherwise the shuffle is
/// skipped (recorded in the block prefix, so round-trips stay exact).
pub fn compress_block(cfg: CodecConfig, element_size: usize, raw: &[u8]) -> Result<Vec<u8>> {
    cfg.validate()?;
    match cfg.codec_id {
        CODEC_NONE => Ok(raw.to_vec()),
        CODEC_BLOSC_LIKE => {
            let elem = if cfg.shuffle
                && element_size > 1
                && element_size <= u8::MAX as usize
                && !raw.is_empty()
                && raw.len() % element_size == 0
            {
                element_size
            } else {
                1
            };
            let body = if elem > 1 {
                lz4_flex::compress(&shuffle_bytes(raw, elem))
            } else {
                lz4_flex::compress(raw)
            };
            let mut out = Vec::with_capacity(body.len() + 1);
            out.push(elem as u8);
            out.extend_from_slice(&body);
            Ok(out)
        }
        CODEC_BZIP2_LIKE => {
            // Zlib wrapper rather than raw deflate: the adler32 trailer
            // catches truncated blocks the bit stream alone would accept.
            Ok(miniz_oxide::deflate::compress_to_vec_zlib(
                raw,
                cfg.level.max(1),
            ))
        }
        other => Err(Error::UnknownCodec(other)),
    }
}

/// Invert `compress_block`. `raw_len` comes from the chunk header and is
/// both the allocation size and an integrity check.
pub fn decompress_block(codec_id: u16, stored: &[u8], raw_len: usize) -> Result<Vec<u8>> {
    match codec_id {
        CODEC_NONE => {
            if stored.len() != raw_len {
                return Err(Error::DecodeError(format!(
                    "identity codec length mismatch: stored {} raw {}",
                    stored.len(),
                    raw_len
                )));
            }
            Ok(stored.to_vec())
        }
        CODEC_BLOSC_LIKE => {
            let (&elem, body) = stored
                .split_first()
                .ok_or_else(|| Error::DecodeError("empty blosc-like block".into()))?;
            let shuffled = lz4_flex::decompress(body, raw_len)
                .map_err(|e| Error::DecodeError(format!("lz4: {e}")))?;
            if shuffled.len() != raw_len {
                return Err(Error::DecodeError(format!(
                    "blosc-like length mismatch: got {} expected {}",
                    shuffled.len(),
                    raw_len
                )));
            }
            let elem = elem as usize;
            if elem > 1 {
                if raw_len % elem != 0 {
                    return Err(Error::DecodeError(format!(
                        "shuffle element size {elem} does not divide raw length {raw_len}"
                    )));
                }
                Ok(unshuffle_bytes(&shuffled, elem))
            } else {
                Ok(shuffled)
            }
        }
        CODEC_BZIP2_LIKE => {
            let out = miniz_oxide::inflate::decompress_to_vec_zlib_with_limit(stored, raw_len)
                .map_err(|e| Error::DecodeError(format!("deflate: {:?}", e.status)))?;
            if out.len() != raw_len {
                return Err(Error::DecodeError(format!(
                    "bzip2-like length mismatch: got {} expected {}",
                    out.len(),
                    raw_len
                )));
            }
            Ok(out)
        }
        other => Err(Error::UnknownCodec(other)),
    }
}
