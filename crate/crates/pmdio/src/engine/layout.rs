//! On-disk layout of a series directory.
//!
//! A series named `out` is the directory `out.bp4/` holding:
//!
//! * `data.<k>`         log of framed chunks for subfile k (aggregated mode)
//! * `data.<it>.<rank>` per-step, per-rank chunk logs (file-per-process mode)
//! * `md.0`             length-prefixed metadata records
//! * `md.idx`           fixed 64-byte step records, the commit log
//! * `profiling.json`   per-rank cost timers, written at close
//!
//! Everything is little-endian. Data and metadata files are append-only;
//! the append of a step record to `md.idx` is the commit point. Readers
//! walk `md.idx` first and then parse only the `md.0` byte ranges named by
//! fully-present step records, so torn tails are unreachable.
//!
//! ## Chunk frames
//!
//! Each chunk in a data file is a header followed by the stored payload:
//!
//! ```text
//! magic "PMDC" | version u16 | codec_id u16 | variable_id u32 | step u64
//! rank_dims u32 | offset u64 x d | extent u64 x d
//! raw_len u64 | stored_len u64 | checksum u32 (CRC-32 of stored payload)
//! zero padding to an 8-byte boundary
//! ```
//!
//! The stored payload is also zero-padded to 8 bytes so the next header
//! stays aligned. Every byte of a frame is verifiable: magic and version
//! are constants, the remaining header fields are cross-checked against the
//! metadata summary, the payload is covered by the checksum, and padding
//! must read back as zero.
//!
//! ## Step index records
//!
//! `md.idx` is a sequence of 64-byte records:
//!
//! ```text
//! step u64 | md_offset u64 | md_length u64 | wall_clock_ns u64
//! flags u64 (bit0 valid, bit1 supersedes an earlier record for this step)
//! reserved 24 zero bytes
//! ```
//!
//! `step` holds the iteration index. Re-committing iteration 0 (the
//! checkpoint slot) appends a fresh record with the supersede bit set;
//! readers resolve the latest record per step.
//!
//! ## md.0 records
//!
//! `[len u32][kind u8][body][crc u32]` where `len` covers kind through crc.
//! Kinds: 0 series header, 1 variable name-table entry, 2 variable index
//! entry, 3 attribute. Name-table entries are re-emitted in every step
//! batch that references them, so each committed byte range is
//! self-contained.

use crate::codecs;
use crate::error::{Error, Result};

pub const CHUNK_MAGIC: [u8; 4] = *b"PMDC";
pub const SERIES_MAGIC: [u8; 4] = *b"PMDM";
pub const FORMAT_VERSION: u16 = 1;
pub const STEP_RECORD_LEN: usize = 64;

pub const FLAG_VALID: u64 = 1 << 0;
pub const FLAG_SUPERSEDES: u64 = 1 << 1;

pub fn align8(n: u64) -> u64 {
    (n + 7) & !7
}

/// Element types a record component may hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Datatype {
    F32,
    F64,
    U64,
    I64,
}

impl Datatype {
    pub fn element_size(self) -> usize {
        match self {
            Datatype::F32 => 4,
            Datatype::F64 | Datatype::U64 | Datatype::I64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Datatype::F32 => 0,
            Datatype::F64 => 1,
            Datatype::U64 => 2,
            Datatype::I64 => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Datatype::F32,
            1 => Datatype::F64,
            2 => Datatype::U64,
            3 => Datatype::I64,
            other => return Err(Error::CorruptIndex(format!("unknown datatype tag {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Datatype::F32 => "float32",
            Datatype::F64 => "float64",
            Datatype::U64 => "uint64",
            Datatype::I64 => "int64",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Mesh,
    ParticleSpecies,
}

impl RecordKind {
    pub fn tag(self) -> u8 {
        match self {
            RecordKind::Mesh => 0,
            RecordKind::ParticleSpecies => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => RecordKind::Mesh,
            1 => RecordKind::ParticleSpecies,
            other => return Err(Error::CorruptIndex(format!("unknown record kind {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            RecordKind::Mesh => "mesh",
            RecordKind::ParticleSpecies => "particle_species",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum EngineMode {
    #[default]
    Aggregated,
    FilePerProcess,
}

impl EngineMode {
    pub fn tag(self) -> u8 {
        match self {
            EngineMode::Aggregated => 0,
            EngineMode::FilePerProcess => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => EngineMode::Aggregated,
            1 => EngineMode::FilePerProcess,
            other => return Err(Error::CorruptIndex(format!("unknown engine mode {other}"))),
        })
    }
}

/// Identifies one data file within the series directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataFileId {
    /// `data.<subfile>` in aggregated mode.
    Subfile(u32),
    /// `data.<iteration>.<rank>` in file-per-process mode.
    PerStep { iteration: u64, rank: u32 },
}

impl DataFileId {
    pub fn file_name(&self) -> String {
        match self {
            DataFileId::Subfile(k) => format!("data.{k}"),
            DataFileId::PerStep { iteration, rank } => format!("data.{iteration}.{rank}"),
        }
    }
}

/// Frame header preceding every stored chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkHeader {
    pub codec_id: u16,
    pub variable_id: u32,
    pub step: u64,
    pub offset: Vec<u64>,
    pub extent: Vec<u64>,
    pub raw_len: u64,
    pub stored_len: u64,
    pub checksum: u32,
}

impl ChunkHeader {
    pub fn dims(&self) -> usize {
        self.extent.len()
    }

    /// Header length on disk for `d` dimensions.
    pub fn encoded_len(d: usize) -> u64 {
        align8(44 + 16 * d as u64)
    }

    /// Full frame length: header plus padded payload.
    pub fn frame_len(&self) -> u64 {
        Self::encoded_len(self.dims()) + align8(self.stored_len)
    }

    pub fn encode(&self) -> Vec<u8> {
        let d = self.dims();
        debug_assert_eq!(self.offset.len(), d);
        let mut out = Vec::with_capacity(Self::encoded_len(d) as usize);
        out.extend_from_slice(&CHUNK_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.codec_id.to_le_bytes());
        out.extend_from_slice(&self.variable_id.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for v in &self.offset {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.extent {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.raw_len.to_le_bytes());
        out.extend_from_slice(&self.stored_len.to_le_bytes());
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out.resize(Self::encoded_len(d) as usize, 0);
        out
    }

    /// Decode a header from `buf`, which must hold at least the fixed
    /// prefix; `corrupt` labels errors with the frame's location.
    pub fn decode(buf: &[u8], corrupt: impl Fn(String) -> Error) -> Result<ChunkHeader> {
        let mut r = Cursor::new(buf, corrupt);
        let magic = r.bytes(4)?;
        if magic != CHUNK_MAGIC {
            return Err(r.fail(format!("bad chunk magic {magic:02x?}")));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(r.fail(format!("unsupported chunk version {version}")));
        }
        let codec_id = r.u16()?;
        let variable_id = r.u32()?;
        let step = r.u64()?;
        let d = r.u32()? as usize;
        if d == 0 || d > 3 {
            return Err(r.fail(format!("chunk rank {d} out of range 1..=3")));
        }
        let mut offset = Vec::with_capacity(d);
        for _ in 0..d {
            offset.push(r.u64()?);
        }
        let mut extent = Vec::with_capacity(d);
        for _ in 0..d {
            extent.push(r.u64()?);
        }
        let raw_len = r.u64()?;
        let stored_len = r.u64()?;
        let checksum = r.u32()?;
        let pad = r.bytes((Self::encoded_len(d) - (44 + 16 * d as u64)) as usize)?;
        if pad.iter().any(|&b| b != 0) {
            return Err(r.fail("nonzero header padding".into()));
        }
        Ok(ChunkHeader {
            codec_id,
            variable_id,
            step,
            offset,
            extent,
            raw_len,
            stored_len,
            checksum,
        })
    }
}

pub fn checksum_payload(stored: &[u8]) -> u32 {
    crc32fast::hash(stored)
}

/// One committed step in `md.idx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepIndexRecord {
    pub step: u64,
    pub md_offset: u64,
    pub md_length: u64,
    pub wall_clock_ns: u64,
    pub flags: u64,
}

impl StepIndexRecord {
    pub fn encode(&self) -> [u8; STEP_RECORD_LEN] {
        let mut out = [0u8; STEP_RECORD_LEN];
        out[0..8].copy_from_slice(&self.step.to_le_bytes());
        out[8..16].copy_from_slice(&self.md_offset.to_le_bytes());
        out[16..24].copy_from_slice(&self.md_length.to_le_bytes());
        out[24..32].copy_from_slice(&self.wall_clock_ns.to_le_bytes());
        out[32..40].copy_from_slice(&self.flags.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8; STEP_RECORD_LEN]) -> Result<StepIndexRecord> {
        let rec = StepIndexRecord {
            step: u64::from_le_bytes(buf[0..8].try_into().unwrap()),
            md_offset: u64::from_le_bytes(buf[8..16].try_into().unwrap()),
            md_length: u64::from_le_bytes(buf[16..24].try_into().unwrap()),
            wall_clock_ns: u64::from_le_bytes(buf[24..32].try_into().unwrap()),
            flags: u64::from_le_bytes(buf[32..40].try_into().unwrap()),
        };
        if buf[40..].iter().any(|&b| b != 0) {
            return Err(Error::CorruptIndex(
                "nonzero reserved bytes in step record".into(),
            ));
        }
        if rec.flags & FLAG_VALID == 0 {
            return Err(Error::CorruptIndex("step record missing valid flag".into()));
        }
        if rec.flags & !(FLAG_VALID | FLAG_SUPERSEDES) != 0 {
            return Err(Error::CorruptIndex(format!(
                "unknown step record flags {:#x}",
                rec.flags
            )));
        }
        Ok(rec)
    }
}

/// Series-wide header, the first record of `md.0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeriesHeader {
    pub mode: EngineMode,
    pub num_aggregators: u32,
    pub n_ranks: u32,
}

/// Maps a dense variable id to its names; re-emitted per step batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameEntry {
    pub variable_id: u32,
    pub record_kind: RecordKind,
    pub record_name: String,
    pub component_name: String,
}

/// Location and summary of one stored chunk, as recorded in md.0.
///
/// The summary duplicates the on-disk header so readers can cross-verify
/// every field of a frame without trusting the frame itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkLocation {
    pub file: DataFileId,
    pub file_offset: u64,
    pub offset: Vec<u64>,
    pub extent: Vec<u64>,
    pub raw_len: u64,
    pub stored_len: u64,
    pub codec_id: u16,
}

/// Index entry for one (variable, step) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableIndexEntry {
    pub variable_id: u32,
    pub step: u64,
    pub datatype: Datatype,
    pub global_extent: Vec<u64>,
    pub chunks: Vec<ChunkLocation>,
}

/// Attachment point of an attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AttrTarget {
    Series,
    Iteration,
    Record(String),
    Component(String, String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    U64(u64),
    I64(i64),
    F32(f32),
    F64(f64),
    Str(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeRecord {
    pub target: AttrTarget,
    /// Iteration the attribute belongs to; ignored for series targets.
    pub iteration: u64,
    pub key: String,
    pub value: AttrValue,
}

/// Any md.0 record.
#[derive(Debug, Clone, PartialEq)]
pub enum MetaRecord {
    Header(SeriesHeader),
    Name(NameEntry),
    Entry(VariableIndexEntry),
    Attribute(AttributeRecord),
}

const KIND_HEADER: u8 = 0;
const KIND_NAME: u8 = 1;
const KIND_ENTRY: u8 = 2;
const KIND_ATTR: u8 = 3;

pub fn encode_meta_record(rec: &MetaRecord) -> Vec<u8> {
    let mut body = Vec::new();
    match rec {
        MetaRecord::Header(h) => {
            body.push(KIND_HEADER);
            body.extend_from_slice(&SERIES_MAGIC);
            body.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
            body.push(h.mode.tag());
            body.extend_from_slice(&h.num_aggregators.to_le_bytes());
            body.extend_from_slice(&h.n_ranks.to_le_bytes());
        }
        MetaRecord::Name(n) => {
            body.push(KIND_NAME);
            body.extend_from_slice(&n.variable_id.to_le_bytes());
            body.push(n.record_kind.tag());
            put_str(&mut body, &n.record_name);
            put_str(&mut body, &n.component_name);
        }
        MetaRecord::Entry(e) => {
            body.push(KIND_ENTRY);
            body.extend_from_slice(&e.variable_id.to_le_bytes());
            body.extend_from_slice(&e.step.to_le_bytes());
            body.push(e.datatype.tag());
            body.push(e.global_extent.len() as u8);
            for v in &e.global_extent {
                body.extend_from_slice(&v.to_le_bytes());
            }
            body.extend_from_slice(&(e.chunks.len() as u32).to_le_bytes());
            for c in &e.chunks {
                match c.file {
                    DataFileId::Subfile(k) => {
                        body.push(0);
                        body.extend_from_slice(&k.to_le_bytes());
                    }
                    DataFileId::PerStep { iteration, rank } => {
                        body.push(1);
                        body.extend_from_slice(&rank.to_le_bytes());
                        body.extend_from_slice(&iteration.to_le_bytes());
                    }
                }
                body.extend_from_slice(&c.file_offset.to_le_bytes());
                for v in &c.offset {
                    body.extend_from_slice(&v.to_le_bytes());
                }
                for v in &c.extent {
                    body.extend_from_slice(&v.to_le_bytes());
                }
                body.extend_from_slice(&c.raw_len.to_le_bytes());
                body.extend_from_slice(&c.stored_len.to_le_bytes());
                body.extend_from_slice(&c.codec_id.to_le_bytes());
            }
        }
        MetaRecord::Attribute(a) => {
            body.push(KIND_ATTR);
            let (tag, rec_name, comp_name): (u8, &str, &str) = match &a.target {
                AttrTarget::Series => (0, "", ""),
                AttrTarget::Iteration => (1, "", ""),
                AttrTarget::Record(r) => (2, r, ""),
                AttrTarget::Component(r, c) => (3, r, c),
            };
            body.push(tag);
            body.extend_from_slice(&a.iteration.to_le_bytes());
            put_str(&mut body, rec_name);
            put_str(&mut body, comp_name);
            put_str(&mut body, &a.key);
            match &a.value {
                AttrValue::U64(v) => {
                    body.push(0);
                    body.extend_from_slice(&v.to_le_bytes());
                }
                AttrValue::I64(v) => {
                    body.push(1);
                    body.extend_from_slice(&v.to_le_bytes());
                }
                AttrValue::F32(v) => {
                    body.push(2);
                    body.extend_from_slice(&v.to_bits().to_le_bytes());
                }
                AttrValue::F64(v) => {
                    body.push(3);
                    body.extend_from_slice(&v.to_bits().to_le_bytes());
                }
                AttrValue::Str(s) => {
                    body.push(4);
                    body.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    body.extend_from_slice(s.as_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&body);
    let total = body.len() as u32 + 4;
    let mut out = Vec::with_capacity(4 + total as usize);
    out.extend_from_slice(&total.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    debug_assert!(s.len() <= u16::MAX as usize);
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Decode every record in `buf`, which must be a whole committed byte range.
pub fn decode_meta_records(buf: &[u8]) -> Result<Vec<MetaRecord>> {
    let corrupt = |m: String| Error::CorruptIndex(m);
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos < buf.len() {
        if buf.len() - pos < 4 {
            return Err(corrupt("truncated md.0 record length".into()));
        }
        let total = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if total < 5 || buf.len() - pos < total {
            return Err(corrupt(format!("md.0 record overruns range (len {total})")));
        }
        let body = &buf[pos..pos + total - 4];
        let crc = u32::from_le_bytes(buf[pos + total - 4..pos + total].try_into().unwrap());
        if crc32fast::hash(body) != crc {
            return Err(corrupt("md.0 record checksum mismatch".into()));
        }
        pos += total;
        out.push(decode_meta_body(body)?);
    }
    Ok(out)
}

fn decode_meta_body(body: &[u8]) -> Result<MetaRecord> {
    let corrupt = |m: String| Error::CorruptIndex(m);
    let mut r = Cursor::new(body, corrupt);
    let kind = r.u8()?;
    match kind {
        KIND_HEADER => {
            let magic = r.bytes(4)?;
            if magic != SERIES_MAGIC {
                return Err(r.fail(format!("bad series magic {magic:02x?}")));
            }
            let version = r.u16()?;
            if version != FORMAT_VERSION {
                return Err(r.fail(format!("unsupported series version {version}")));
            }
            let mode = EngineMode::from_tag(r.u8()?)?;
            let num_aggregators = r.u32()?;
            let n_ranks = r.u32()?;
            Ok(MetaRecord::Header(SeriesHeader {
                mode,
                num_aggregators,
                n_ranks,
            }))
        }
        KIND_NAME => {
            let variable_id = r.u32()?;
            let record_kind = RecordKind::from_tag(r.u8()?)?;
            let record_name = r.string()?;
            let component_name = r.string()?;
            Ok(MetaRecord::Name(NameEntry {
                variable_id,
                record_kind,
                record_name,
                component_name,
            }))
        }
        KIND_ENTRY => {
            let variable_id = r.u32()?;
            let step = r.u64()?;
            let datatype = Datatype::from_tag(r.u8()?)?;
            let d = r.u8()? as usize;
            if d == 0 || d > 3 {
                return Err(r.fail(format!("entry rank {d} out of range 1..=3")));
            }
            let mut global_extent = Vec::with_capacity(d);
            for _ in 0..d {
                global_extent.push(r.u64()?);
            }
            let n_chunks = r.u32()? as usize;
            let mut chunks = Vec::with_capacity(n_chunks);
            for _ in 0..n_chunks {
                let file = match r.u8()? {
                    0 => DataFileId::Subfile(r.u32()?),
                    1 => {
                        let rank = r.u32()?;
                        let iteration = r.u64()?;
                        DataFileId::PerStep { iteration, rank }
                    }
                    other => return Err(r.fail(format!("unknown data file tag {other}"))),
                };
                let file_offset = r.u64()?;
                let mut offset = Vec::with_capacity(d);
                for _ in 0..d {
                    offset.push(r.u64()?);
                }
                let mut extent = Vec::with_capacity(d);
                for _ in 0..d {
                    extent.push(r.u64()?);
                }
                let raw_len = r.u64()?;
                let stored_len = r.u64()?;
                let codec_id = r.u16()?;
                chunks.push(ChunkLocation {
                    file,
                    file_offset,
                    offset,
                    extent,
                    raw_len,
                    stored_len,
                    codec_id,
                });
            }
            Ok(MetaRecord::Entry(VariableIndexEntry {
                variable_id,
                step,
                datatype,
                global_extent,
                chunks,
            }))
        }
        KIND_ATTR => {
            let tag = r.u8()?;
            let iteration = r.u64()?;
            let rec_name = r.string()?;
            let comp_name = r.string()?;
            let key = r.string()?;
            let target = match tag {
                0 => AttrTarget::Series,
                1 => AttrTarget::Iteration,
                2 => AttrTarget::Record(rec_name),
                3 => AttrTarget::Component(rec_name, comp_name),
                other => return Err(r.fail(format!("unknown attribute target {other}"))),
            };
            let value = match r.u8()? {
                0 => AttrValue::U64(r.u64()?),
                1 => AttrValue::I64(r.u64()? as i64),
                2 => AttrValue::F32(f32::from_bits(r.u32()?)),
                3 => AttrValue::F64(f64::from_bits(r.u64()?)),
                4 => {
                    let len = r.u32()? as usize;
                    let bytes = r.bytes(len)?;
                    AttrValue::Str(
                        String::from_utf8(bytes.to_vec())
                            .map_err(|_| Error::CorruptIndex("attribute not utf-8".into()))?,
                    )
                }
                other => return Err(r.fail(format!("unknown attribute value tag {other}"))),
            };
            Ok(MetaRecord::Attribute(AttributeRecord {
                target,
                iteration,
                key,
                value,
            }))
        }
        other => Err(corrupt(format!("unknown md.0 record kind {other}"))),
    }
}

/// Validate a chunk frame against its metadata summary.
///
/// `frame` must hold the complete frame (header, payload, padding). Returns
/// the stored payload slice on success.
pub fn verify_frame<'a>(
    frame: &'a [u8],
    summary: &ChunkLocation,
    expect_step: u64,
    expect_variable: u32,
    corrupt: &impl Fn(String) -> Error,
) -> Result<&'a [u8]> {
    let d = summary.extent.len();
    let header_len = ChunkHeader::encoded_len(d) as usize;
    if frame.len() < header_len {
        return Err(corrupt("frame shorter than header".into()));
    }
    let header = ChunkHeader::decode(&frame[..header_len], |m| corrupt(m))?;
    if header.codec_id != summary.codec_id
        || header.variable_id != expect_variable
        || header.step != expect_step
        || header.offset != summary.offset
        || header.extent != summary.extent
        || header.raw_len != summary.raw_len
        || header.stored_len != summary.stored_len
    {
        return Err(corrupt("frame header disagrees with index summary".into()));
    }
    let stored_end = header_len + summary.stored_len as usize;
    let padded_end = header_len + align8(summary.stored_len) as usize;
    if frame.len() < padded_end {
        return Err(corrupt("frame shorter than padded payload".into()));
    }
    let stored = &frame[header_len..stored_end];
    if checksum_payload(stored) != header.checksum {
        return Err(corrupt("payload checksum mismatch".into()));
    }
    if frame[stored_end..padded_end].iter().any(|&b| b != 0) {
        return Err(corrupt("nonzero payload padding".into()));
    }
    Ok(stored)
}

/// Decode and verify a frame's payload back to raw bytes.
pub fn decode_frame_payload(
    stored: &[u8],
    summary: &ChunkLocation,
    corrupt: &impl Fn(String) -> Error,
) -> Result<Vec<u8>> {
    let raw = codecs::decompress_block(summary.codec_id, stored, summary.raw_len as usize)?;
    if raw.len() as u64 != summary.raw_len {
        return Err(corrupt("decoded length disagrees with raw_len".into()));
    }
    Ok(raw)
}

struct Cursor<'a, F: Fn(String) -> Error> {
    buf: &'a [u8],
    pos: usize,
    corrupt: F,
}

impl<'a, F: Fn(String) -> Error> Cursor<'a, F> {
    fn new(buf: &'a [u8], corrupt: F) -> Self {
        Cursor { buf, pos: 0, corrupt }
    }

    fn fail(&self, m: String) -> Error {
        (self.corrupt)(m)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail("record truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.bytes(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail("string not utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corrupt(m: String) -> Error {
        Error::CorruptIndex(m)
    }

    #[test]
    fn header_len_rank1_is_64() {
        assert_eq!(ChunkHeader::encoded_len(1), 64);
        assert_eq!(ChunkHeader::encoded_len(2), 80);
        assert_eq!(ChunkHeader::encoded_len(3), 96);
    }

    fn sample_header() -> ChunkHeader {
        ChunkHeader {
            codec_id: 1,
            variable_id: 7,
            step: 42,
            offset: vec![128],
            extent: vec![32],
            raw_len: 256,
            stored_len: 100,
            checksum: 0xdeadbeef,
        }
    }

    #[test]
    fn chunk_header_round_trip() {
        let h = sample_header();
        let enc = h.encode();
        assert_eq!(enc.len() as u64, ChunkHeader::encoded_len(1));
        let back = ChunkHeader::decode(&enc, corrupt).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn chunk_header_rank3_round_trip() {
        let h = ChunkHeader {
            codec_id: 0,
            variable_id: 0,
            step: 0,
            offset: vec![0, 16, 2],
            extent: vec![8, 8, 4],
            raw_len: 8 * 8 * 4 * 8,
            stored_len: 8 * 8 * 4 * 8,
            checksum: 1,
        };
        let enc = h.encode();
        assert_eq!(enc.len() as u64, ChunkHeader::encoded_len(3));
        assert_eq!(ChunkHeader::decode(&enc, corrupt).unwrap(), h);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut enc = sample_header().encode();
        enc[0] ^= 0xff;
        assert!(ChunkHeader::decode(&enc, corrupt).is_err());
    }

    #[test]
    fn nonzero_padding_rejected() {
        let mut enc = sample_header().encode();
        let n = enc.len();
        enc[n - 1] = 1;
        assert!(ChunkHeader::decode(&enc, corrupt).is_err());
    }

    #[test]
    fn step_record_round_trip() {
        let rec = StepIndexRecord {
            step: 0,
            md_offset: 4096,
            md_length: 512,
            wall_clock_ns: 123_456_789,
            flags: FLAG_VALID | FLAG_SUPERSEDES,
        };
        let enc = rec.encode();
        assert_eq!(enc.len(), 64);
        assert_eq!(StepIndexRecord::decode(&enc).unwrap(), rec);
    }

    #[test]
    fn step_record_flag_validation() {
        let mut enc = StepIndexRecord {
            step: 1,
            md_offset: 0,
            md_length: 0,
            wall_clock_ns: 0,
            flags: FLAG_VALID,
        }
        .encode();
        enc[32] = 0;
        assert!(StepIndexRecord::decode(&enc).is_err());
        enc[32] = FLAG_VALID as u8;
        enc[63] = 9;
        assert!(StepIndexRecord::decode(&enc).is_err());
    }

    fn sample_records() -> Vec<MetaRecord> {
        vec![
            MetaRecord::Header(SeriesHeader {
                mode: EngineMode::Aggregated,
                num_aggregators: 2,
                n_ranks: 4,
            }),
            MetaRecord::Name(NameEntry {
                variable_id: 0,
                record_kind: RecordKind::Mesh,
                record_name: "density/e".into(),
                component_name: "value".into(),
            }),
            MetaRecord::Entry(VariableIndexEntry {
                variable_id: 0,
                step: 3,
                datatype: Datatype::F64,
                global_extent: vec![1000],
                chunks: vec![
                    ChunkLocation {
                        file: DataFileId::Subfile(0),
                        file_offset: 64,
                        offset: vec![0],
                        extent: vec![500],
                        raw_len: 4000,
                        stored_len: 123,
                        codec_id: 1,
                    },
                    ChunkLocation {
                        file: DataFileId::PerStep { iteration: 3, rank: 1 },
                        file_offset: 0,
                        offset: vec![500],
                        extent: vec![500],
                        raw_len: 4000,
                        stored_len: 4000,
                        codec_id: 0,
                    },
                ],
            }),
            MetaRecord::Attribute(AttributeRecord {
                target: AttrTarget::Iteration,
                iteration: 0,
                key: "step".into(),
                value: AttrValue::U64(100),
            }),
            MetaRecord::Attribute(AttributeRecord {
                target: AttrTarget::Component("density/e".into(), "value".into()),
                iteration: 3,
                key: "unit".into(),
                value: AttrValue::Str("1/m^3".into()),
            }),
        ]
    }

    #[test]
    fn meta_records_round_trip() {
        let records = sample_records();
        let mut buf = Vec::new();
        for r in &records {
            buf.extend_from_slice(&encode_meta_record(r));
        }
        let back = decode_meta_records(&buf).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn meta_record_crc_catches_flips() {
        let records = sample_records();
        let mut buf = Vec::new();
        for r in &records {
            buf.extend_from_slice(&encode_meta_record(r));
        }
        for pos in [5usize, buf.len() / 2, buf.len() - 1] {
            let mut bad = buf.clone();
            bad[pos] ^= 0x10;
            assert!(decode_meta_records(&bad).is_err(), "flip at {pos} undetected");
        }
    }

    #[test]
    fn truncated_meta_range_is_an_error() {
        let buf = encode_meta_record(&sample_records()[0]);
        assert!(decode_meta_records(&buf[..buf.len() - 1]).is_err());
        assert!(decode_meta_records(&buf[..3]).is_err());
    }

    #[test]
    fn frame_verification_accepts_good_and_rejects_any_flip() {
        let payload = b"0123456789abcdefXYZ".to_vec();
        let summary = ChunkLocation {
            file: DataFileId::Subfile(0),
            file_offset: 0,
            offset: vec![4],
            extent: vec![19],
            raw_len: 19,
            stored_len: payload.len() as u64,
            codec_id: 0,
        };
        let header = ChunkHeader {
            codec_id: 0,
            variable_id: 3,
            step: 9,
            offset: summary.offset.clone(),
            extent: summary.extent.clone(),
            raw_len: 19,
            stored_len: payload.len() as u64,
            checksum: checksum_payload(&payload),
        };
        let mut frame = header.encode();
        frame.extend_from_slice(&payload);
        frame.resize(frame.len() + (align8(payload.len() as u64) as usize - payload.len()), 0);

        let stored = verify_frame(&frame, &summary, 9, 3, &corrupt).unwrap();
        assert_eq!(stored, payload);

        for pos in 0..frame.len() {
            let mut bad = frame.clone();
            bad[pos] ^= 0x01;
            assert!(
                verify_frame(&bad, &summary, 9, 3, &corrupt).is_err(),
                "single-byte flip at {pos} undetected"
            );
        }
    }
}
