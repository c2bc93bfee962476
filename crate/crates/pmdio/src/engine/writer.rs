//! Collective write path.
//!
//! Chunks a rank stores are deferred until flush. A flush compresses the
//! rank's chunks locally, exchanges the framed results, and lets each
//! aggregator append its block's frames to its subfile in rank order; the
//! placements travel back to rank 0 which appends one metadata batch to
//! md.0. Closing the iteration appends the 64-byte step record to md.idx,
//! which is the commit point: a crash anywhere before that append leaves
//! the step invisible but every earlier step intact. The engine never
//! overwrites file content, so iteration re-commits (checkpoint slots)
//! supersede by appending.
//!
//! Accounting: data-file operations are recorded in the per-rank
//! [`MonitorLog`]; commit traffic to md.0/md.idx is engine-internal and
//! accumulates in the profiling timers (`meta_us`, plus an append counter
//! used by tests). With the identity codec the aggregator stages each raw
//! payload into a contiguous frame, one counted memcpy per chunk; with
//! compression the encoder's private output buffer is written directly and
//! no staging copy exists.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::codecs;
use crate::comm::RankGroup;
use crate::config::EngineConfig;
use crate::engine::layout::{
    align8, checksum_payload, encode_meta_record, verify_frame, AttributeRecord, ChunkHeader,
    ChunkLocation, DataFileId, Datatype, EngineMode, MetaRecord, NameEntry, SeriesHeader,
    StepIndexRecord, VariableIndexEntry, FLAG_SUPERSEDES, FLAG_VALID,
};
use crate::engine::{plan_aggregation, reader, AggregatorMap};
use crate::error::{Error, Result};
use crate::monitor::{self, MonitorLog, Op, ProfTimers};

/// One deferred chunk, payload already in little-endian bytes.
#[derive(Debug, Clone)]
pub struct ChunkRequest {
    pub variable_id: u32,
    pub offset: Vec<u64>,
    pub extent: Vec<u64>,
    pub raw: Vec<u8>,
    /// CRC of `raw`, computed at staging when the codec stores payloads
    /// verbatim. Covers the chunk's whole residency in engine memory and
    /// keeps the flush path I/O-bound.
    pub checksum: Option<u32>,
}

/// Shape of one dataset for the step being flushed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepDataset {
    pub variable_id: u32,
    pub datatype: Datatype,
    pub global_extent: Vec<u64>,
}

/// Global totals for one flush, summed over the group.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlushStats {
    pub chunk_count: u64,
    pub bytes_raw: u64,
    pub bytes_stored: u64,
    pub seconds: f64,
}

/// What an append-mode open learned from disk.
#[derive(Debug, Clone)]
pub struct OpenInfo {
    pub header: SeriesHeader,
    pub committed_steps: Vec<u64>,
    pub variables: Vec<NameEntry>,
}

/// Compressed, framed chunk as exchanged between ranks.
#[derive(Debug)]
struct FramedChunk {
    variable_id: u32,
    offset: Vec<u64>,
    extent: Vec<u64>,
    raw_len: u64,
    stored: Vec<u8>,
    checksum: u32,
    codec_id: u16,
}

/// Outcome of the local append phase, exchanged toward rank 0.
#[derive(Debug)]
enum AppendOutcome {
    Placements(Vec<(u32, ChunkLocation)>),
    Failed(String),
}

struct DataFileHandle {
    id: DataFileId,
    file: File,
    len: u64,
}

pub struct BpWriter {
    dir: PathBuf,
    group: RankGroup,
    cfg: EngineConfig,
    map: AggregatorMap,
    mode: EngineMode,
    header: SeriesHeader,
    /// Persistent subfile handle (aggregated mode, aggregator ranks only).
    subfile: Option<DataFileHandle>,
    /// Rank 0 only: metadata handles and append cursors.
    md0: Option<File>,
    md0_len: u64,
    mdidx: Option<File>,
    committed: HashSet<u64>,
    /// md.0 byte range accumulated for the step in progress (rank 0).
    step_md_range: Option<(u64, u64)>,
    step_first_flush: bool,
    pub log: MonitorLog,
    compress_ns: u64,
    md_ns: u64,
    md_appends: u64,
    /// Distinct subfiles the current step appended to, for the economy law.
    step_touched: HashSet<DataFileId>,
    closed: bool,
}

fn series_dir(path: &Path) -> PathBuf {
    if path.extension().map_or(false, |e| e == "bp4") {
        path.to_path_buf()
    } else {
        let mut s = path.as_os_str().to_os_string();
        s.push(".bp4");
        PathBuf::from(s)
    }
}

impl BpWriter {
    /// Create a fresh series. Collective; all ranks must pass identical
    /// arguments.
    pub fn create(path: &Path, group: &RankGroup, cfg: EngineConfig) -> Result<BpWriter> {
        cfg.validate()?;
        let dir = series_dir(path);
        agree(group, &dir, 0, &cfg)?;

        let num_agg = cfg.effective_aggregators(group.size() as u32);
        let map = plan_aggregation(group.size() as u32, num_agg)?;
        let header = SeriesHeader {
            mode: cfg.mode,
            num_aggregators: num_agg,
            n_ranks: group.size() as u32,
        };

        // Rank 0 lays down the directory skeleton; everyone else waits.
        let created: Arc<Vec<Arc<std::result::Result<(), String>>>> = group.all_gather(
            if group.rank() == 0 {
                create_skeleton(&dir, &header, cfg.profiling, cfg.overwrite).map_err(|e| e.to_string())
            } else {
                Ok(())
            },
        )?;
        if let Err(msg) = created[0].as_ref() {
            return Err(decode_peer_error(msg, &dir));
        }

        let mut w = BpWriter {
            dir: dir.clone(),
            group: group.clone(),
            cfg,
            map,
            mode: header.mode,
            header,
            subfile: None,
            md0: None,
            md0_len: 0,
            mdidx: None,
            committed: HashSet::new(),
            step_md_range: None,
            step_first_flush: true,
            log: MonitorLog::new(group.rank()),
            compress_ns: 0,
            md_ns: 0,
            md_appends: 0,
            step_touched: HashSet::new(),
            closed: false,
        };
        if group.rank() == 0 {
            w.open_md_handles()?;
        }
        Ok(w)
    }

    /// Open an existing series for appending further iterations.
    ///
    /// The engine mode and subfile count come from the on-disk header (a
    /// different aggregator count would scramble the existing layout); the
    /// subfile count is clamped to the group size if the group shrank.
    pub fn open_append(path: &Path, group: &RankGroup, cfg: EngineConfig) -> Result<(BpWriter, OpenInfo)> {
        cfg.validate()?;
        let dir = series_dir(path);
        agree(group, &dir, 1, &cfg)?;
        if !dir.is_dir() {
            return Err(Error::NoSeries(dir));
        }

        let inv = reader::load_inventory(&dir)?;
        let committed_steps: Vec<u64> = inv.steps.iter().map(|s| s.step).collect();
        let mut variables: Vec<NameEntry> = inv.variables.values().cloned().collect();
        variables.sort_by_key(|n| n.variable_id);
        let info = OpenInfo {
            header: inv.header,
            committed_steps: committed_steps.clone(),
            variables,
        };

        let num_agg = inv.header.num_aggregators.min(group.size() as u32).max(1);
        let map = plan_aggregation(group.size() as u32, num_agg)?;
        let mut w = BpWriter {
            dir,
            group: group.clone(),
            cfg,
            map,
            mode: inv.header.mode,
            header: inv.header,
            subfile: None,
            md0: None,
            md0_len: 0,
            mdidx: None,
            committed: committed_steps.into_iter().collect(),
            step_md_range: None,
            step_first_flush: true,
            log: MonitorLog::new(group.rank()),
            compress_ns: 0,
            md_ns: 0,
            md_appends: 0,
            step_touched: HashSet::new(),
            closed: false,
        };
        if group.rank() == 0 {
            w.open_md_handles()?;
        }
        Ok((w, info))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn mode(&self) -> EngineMode {
        self.mode
    }

    pub fn header(&self) -> &SeriesHeader {
        &self.header
    }

    /// True when payloads are stored verbatim, so staging may precompute
    /// frame checksums.
    pub fn identity_codec(&self) -> bool {
        self.cfg.codec.codec_id == codecs::CODEC_NONE
    }

    pub fn num_subfiles(&self) -> u32 {
        self.map.num_subfiles()
    }

    pub fn is_committed(&self, step: u64) -> bool {
        self.committed.contains(&step)
    }

    /// md.0/md.idx appends so far (rank 0 counts; other ranks see 0).
    pub fn md_append_count(&self) -> u64 {
        self.md_appends
    }

    /// Distinct subfiles the current step has appended to on this rank.
    pub fn step_handle_touches(&self) -> u64 {
        self.step_touched.len() as u64
    }

    pub fn begin_step(&mut self) {
        self.step_first_flush = true;
        self.step_md_range = None;
        self.step_touched.clear();
    }

    fn open_md_handles(&mut self) -> Result<()> {
        let md0_path = self.dir.join("md.0");
        let md0 = OpenOptions::new()
            .append(true)
            .open(&md0_path)
            .map_err(|e| Error::io(format!("open {}", md0_path.display()), e))?;
        self.md0_len = md0
            .metadata()
            .map_err(|e| Error::io("stat md.0", e))?
            .len();
        let idx_path = self.dir.join("md.idx");
        let mdidx = OpenOptions::new()
            .append(true)
            .open(&idx_path)
            .map_err(|e| Error::io(format!("open {}", idx_path.display()), e))?;
        self.md0 = Some(md0);
        self.mdidx = Some(mdidx);
        Ok(())
    }

    /// Flush deferred chunks for `step`. Collective.
    ///
    /// `datasets` lists every dataset defined in the step (sent on each
    /// flush; definition entries are emitted once, on the step's first
    /// batch, plus for any variable that gained chunks later). `names`
    /// covers all variable ids appearing in `datasets`. Attributes are
    /// taken from rank 0.
    pub fn flush_step(
        &mut self,
        step: u64,
        names: &[NameEntry],
        datasets: &[StepDataset],
        attributes: Vec<AttributeRecord>,
        chunks: Vec<ChunkRequest>,
    ) -> Result<FlushStats> {
        if self.closed {
            return Err(Error::NotWritable);
        }
        let t0 = Instant::now();

        // Compress locally. Empty chunks were filtered by the caller.
        let mut framed = Vec::with_capacity(chunks.len());
        let mut bytes_raw = 0u64;
        for c in chunks {
            debug_assert!(!c.raw.is_empty());
            bytes_raw += c.raw.len() as u64;
            framed.push(self.frame_chunk(c, datasets)?);
        }
        let my_stored: u64 = framed.iter().map(|f| f.stored.len() as u64).sum();
        let my_count = framed.len() as u64;

        // Exchange bundles and let each writer append its share.
        let bundles = self.group.all_gather(framed)?;
        let outcome = match self.append_phase(step, &bundles) {
            Ok(p) => AppendOutcome::Placements(p),
            Err(e) => AppendOutcome::Failed(e.to_string()),
        };
        let outcomes = self.group.all_gather(outcome)?;

        let mut placements: Vec<(u32, ChunkLocation)> = Vec::new();
        for (rank, o) in outcomes.iter().enumerate() {
            match o.as_ref() {
                AppendOutcome::Placements(p) => placements.extend(p.iter().cloned()),
                AppendOutcome::Failed(msg) => {
                    return Err(if rank == self.group.rank() {
                        Error::io(msg.clone(), std::io::Error::other("append failed"))
                    } else {
                        Error::GroupFault {
                            rank,
                            reason: msg.clone(),
                        }
                    });
                }
            }
        }

        // Rank 0 appends the step's metadata batch.
        let md_result: std::result::Result<(), String> = if self.group.rank() == 0 {
            self.write_md_batch(step, names, datasets, attributes, placements)
                .map_err(|e| e.to_string())
        } else {
            Ok(())
        };
        let md_results = self.group.all_gather(md_result)?;
        if let Err(msg) = md_results[0].as_ref() {
            return Err(if self.group.rank() == 0 {
                Error::io(msg.clone(), std::io::Error::other("metadata append failed"))
            } else {
                Error::GroupFault {
                    rank: 0,
                    reason: msg.clone(),
                }
            });
        }
        self.step_first_flush = false;

        // Global stats.
        let totals = self
            .group
            .all_gather((my_count, bytes_raw, my_stored))?;
        let mut stats = FlushStats {
            seconds: t0.elapsed().as_secs_f64(),
            ..FlushStats::default()
        };
        for t in totals.iter() {
            stats.chunk_count += t.0;
            stats.bytes_raw += t.1;
            stats.bytes_stored += t.2;
        }
        Ok(stats)
    }

    fn frame_chunk(&mut self, c: ChunkRequest, datasets: &[StepDataset]) -> Result<FramedChunk> {
        let dtype = datasets
            .iter()
            .find(|d| d.variable_id == c.variable_id)
            .map(|d| d.datatype)
            .ok_or_else(|| Error::NotDefined(format!("variable {}", c.variable_id)))?;
        let raw_len = c.raw.len() as u64;
        let staged_crc = c.checksum;
        let (stored, codec_id) = if self.cfg.codec.codec_id == codecs::CODEC_NONE {
            (c.raw, codecs::CODEC_NONE)
        } else {
            let t0 = Instant::now();
            let stored = codecs::compress_block(self.cfg.codec, dtype.element_size(), &c.raw)?;
            self.compress_ns += t0.elapsed().as_nanos() as u64;
            (stored, self.cfg.codec.codec_id)
        };
        let checksum = if codec_id == codecs::CODEC_NONE {
            staged_crc.unwrap_or_else(|| checksum_payload(&stored))
        } else {
            checksum_payload(&stored)
        };
        Ok(FramedChunk {
            variable_id: c.variable_id,
            offset: c.offset,
            extent: c.extent,
            raw_len,
            stored,
            checksum,
            codec_id,
        })
    }

    /// Append every frame this rank is responsible for, in rank order.
    fn append_phase(
        &mut self,
        step: u64,
        bundles: &Arc<Vec<Arc<Vec<FramedChunk>>>>,
    ) -> Result<Vec<(u32, ChunkLocation)>> {
        let rank = self.group.rank() as u32;
        let mut placements = Vec::new();
        match self.mode {
            EngineMode::Aggregated => {
                let k = self.map.subfile_of(rank);
                if self.map.aggregator_of(k) != rank {
                    return Ok(placements);
                }
                let id = DataFileId::Subfile(k);
                for r in self.map.block_ranks(k) {
                    for frame in bundles[r as usize].iter() {
                        self.ensure_subfile(id)?;
                        self.step_touched.insert(id);
                        let loc = self.append_frame(step, frame)?;
                        placements.push((frame.variable_id, loc));
                    }
                }
            }
            EngineMode::FilePerProcess => {
                // Every rank writes its own fresh per-step file.
                let frames = &bundles[rank as usize];
                if !frames.is_empty() {
                    let id = DataFileId::PerStep {
                        iteration: step,
                        rank,
                    };
                    self.ensure_subfile(id)?;
                    self.step_touched.insert(id);
                    for frame in frames.iter() {
                        let loc = self.append_frame(step, frame)?;
                        placements.push((frame.variable_id, loc));
                    }
                    self.close_subfile()?;
                }
            }
        }
        Ok(placements)
    }

    fn ensure_subfile(&mut self, id: DataFileId) -> Result<()> {
        if self.subfile.as_ref().map(|h| h.id) == Some(id) {
            return Ok(());
        }
        self.close_subfile()?;
        let path = self.dir.join(id.file_name());
        let file = self.log.record_io(
            Op::Open,
            0,
            || OpenOptions::new().create(true).append(true).open(&path),
            &format!("open {}", path.display()),
        )?;
        let len = file
            .metadata()
            .map_err(|e| Error::io(format!("stat {}", path.display()), e))?
            .len();
        self.subfile = Some(DataFileHandle { id, file, len });
        Ok(())
    }

    fn close_subfile(&mut self) -> Result<()> {
        if let Some(h) = self.subfile.take() {
            if self.cfg.fsync_on_close {
                self.log
                    .record_io(Op::Fsync, 0, || h.file.sync_all(), "fsync data file")?;
            }
            self.log.record(Op::Close, 0, move || drop(h.file));
        }
        Ok(())
    }

    fn append_frame(&mut self, step: u64, frame: &FramedChunk) -> Result<ChunkLocation> {
        let header = ChunkHeader {
            codec_id: frame.codec_id,
            variable_id: frame.variable_id,
            step,
            offset: frame.offset.clone(),
            extent: frame.extent.clone(),
            raw_len: frame.raw_len,
            stored_len: frame.stored.len() as u64,
            checksum: frame.checksum,
        };
        let header_bytes = header.encode();
        let frame_len = header.frame_len();
        let pad = (align8(frame.stored.len() as u64) - frame.stored.len() as u64) as usize;

        let handle = self.subfile.as_mut().expect("subfile handle");
        let file_offset = handle.len;

        if frame.codec_id == codecs::CODEC_NONE {
            // Identity path: stage header and payload into one frame buffer.
            // The payload copy is the accounted staging memcpy.
            let mut buf = Vec::with_capacity(frame_len as usize);
            buf.extend_from_slice(&header_bytes);
            self.log.record(Op::Memcpy, 0, || {
                buf.extend_from_slice(&frame.stored);
            });
            buf.resize(frame_len as usize, 0);
            let file = &mut handle.file;
            self.log.record_io(
                Op::Append,
                frame_len,
                || file.write_all(&buf),
                "append chunk frame",
            )?;
        } else {
            // Compressed path: the encoder output is a private buffer, so
            // write header and payload back to back without restaging.
            let file = &mut handle.file;
            let stored = &frame.stored;
            self.log.record_io(
                Op::Append,
                frame_len,
                || {
                    file.write_all(&header_bytes)?;
                    file.write_all(stored)?;
                    if pad > 0 {
                        file.write_all(&[0u8; 8][..pad])?;
                    }
                    Ok(())
                },
                "append chunk frame",
            )?;
        }
        handle.len += frame_len;

        let loc = ChunkLocation {
            file: handle.id,
            file_offset,
            offset: frame.offset.clone(),
            extent: frame.extent.clone(),
            raw_len: frame.raw_len,
            stored_len: frame.stored.len() as u64,
            codec_id: frame.codec_id,
        };

        if self.cfg.verify_writes {
            self.verify_written_frame(step, frame.variable_id, &loc)?;
        }
        Ok(loc)
    }

    /// Read the frame just written back and re-verify every byte.
    fn verify_written_frame(&mut self, step: u64, variable_id: u32, loc: &ChunkLocation) -> Result<()> {
        let handle = self.subfile.as_mut().expect("subfile handle");
        let frame_len = ChunkHeader::encoded_len(loc.extent.len()) + align8(loc.stored_len);
        let mut buf = vec![0u8; frame_len as usize];
        let file = &mut handle.file;
        let off = loc.file_offset;
        self.log.record_io(
            Op::Seek,
            0,
            || file.seek(SeekFrom::Start(off)).map(|_| ()),
            "seek for readback",
        )?;
        self.log.record_io(
            Op::Read,
            frame_len,
            || file.read_exact(&mut buf),
            "readback",
        )?;
        // Appends continue at the end regardless of the seek (append mode),
        // but restore the cursor anyway for clarity.
        file.seek(SeekFrom::End(0))
            .map_err(|e| Error::io("seek to end", e))?;
        let subfile = loc.file.file_name();
        verify_frame(&buf, loc, step, variable_id, &|_| Error::CorruptWrite {
            subfile: subfile.clone(),
            offset: off,
        })
        .map(|_| ())
    }

    fn write_md_batch(
        &mut self,
        step: u64,
        names: &[NameEntry],
        datasets: &[StepDataset],
        attributes: Vec<AttributeRecord>,
        placements: Vec<(u32, ChunkLocation)>,
    ) -> Result<()> {
        let t0 = Instant::now();
        let mut chunks_by_var: std::collections::HashMap<u32, Vec<ChunkLocation>> =
            std::collections::HashMap::new();
        for (var, loc) in placements {
            chunks_by_var.entry(var).or_default().push(loc);
        }

        let mut batch = Vec::new();
        let mut referenced: Vec<u32> = Vec::new();
        let mut entries: Vec<VariableIndexEntry> = Vec::new();
        for d in datasets {
            let chunks = chunks_by_var.remove(&d.variable_id).unwrap_or_default();
            if !self.step_first_flush && chunks.is_empty() {
                continue;
            }
            referenced.push(d.variable_id);
            entries.push(VariableIndexEntry {
                variable_id: d.variable_id,
                step,
                datatype: d.datatype,
                global_extent: d.global_extent.clone(),
                chunks,
            });
        }
        if !chunks_by_var.is_empty() {
            return Err(Error::NotDefined(format!(
                "chunks for undefined variables {:?}",
                chunks_by_var.keys().collect::<Vec<_>>()
            )));
        }
        entries.sort_by_key(|e| e.variable_id);
        referenced.sort_unstable();

        // Names first, so the committed range is self-contained.
        for n in names {
            if referenced.binary_search(&n.variable_id).is_ok() {
                batch.extend_from_slice(&encode_meta_record(&MetaRecord::Name(n.clone())));
            }
        }
        for e in entries {
            batch.extend_from_slice(&encode_meta_record(&MetaRecord::Entry(e)));
        }
        for a in attributes {
            batch.extend_from_slice(&encode_meta_record(&MetaRecord::Attribute(a)));
        }

        if !batch.is_empty() {
            let md0 = self.md0.as_mut().expect("md.0 handle on rank 0");
            md0.write_all(&batch)
                .map_err(|e| Error::io("append md.0 batch", e))?;
            let start = self.md0_len;
            self.md0_len += batch.len() as u64;
            self.md_appends += 1;
            self.step_md_range = Some(match self.step_md_range {
                None => (start, self.md0_len),
                Some((s, _)) => (s, self.md0_len),
            });
        }
        self.md_ns += t0.elapsed().as_nanos() as u64;
        Ok(())
    }

    /// Commit `step`: rank 0 appends the step record; everyone leaves
    /// together. `commit_step` for an already-committed step supersedes it.
    pub fn commit_step(&mut self, step: u64) -> Result<()> {
        if self.closed {
            return Err(Error::NotWritable);
        }
        let commit: std::result::Result<(), String> = if self.group.rank() == 0 {
            self.append_step_record(step).map_err(|e| e.to_string())
        } else {
            Ok(())
        };
        let results = self.group.all_gather(commit)?;
        if let Err(msg) = results[0].as_ref() {
            return Err(if self.group.rank() == 0 {
                Error::io(msg.clone(), std::io::Error::other("commit failed"))
            } else {
                Error::GroupFault {
                    rank: 0,
                    reason: msg.clone(),
                }
            });
        }
        self.committed.insert(step);
        self.step_md_range = None;
        self.step_first_flush = true;
        Ok(())
    }

    fn append_step_record(&mut self, step: u64) -> Result<()> {
        let t0 = Instant::now();
        let (md_offset, md_length) = match self.step_md_range {
            Some((s, e)) => (s, e - s),
            None => (self.md0_len, 0),
        };
        let supersede = self.committed.contains(&step);
        let rec = StepIndexRecord {
            step,
            md_offset,
            md_length,
            wall_clock_ns: monitor::now_ns(),
            flags: FLAG_VALID | if supersede { FLAG_SUPERSEDES } else { 0 },
        };
        let mdidx = self.mdidx.as_mut().expect("md.idx handle on rank 0");
        mdidx
            .write_all(&rec.encode())
            .map_err(|e| Error::io("append md.idx record", e))?;
        self.md_appends += 1;
        self.md_ns += t0.elapsed().as_nanos() as u64;
        Ok(())
    }

    /// Snapshot of this rank's profiling timers.
    pub fn prof_timers(&self) -> ProfTimers {
        ProfTimers {
            rank: self.group.rank(),
            bytes_written: self.log.bytes(Op::Append),
            meta_us: self.log.seconds(crate::monitor::Category::Metadata) * 1e6
                + self.md_ns as f64 * 1e-3,
            write_us: self.log.seconds_op(Op::Append) * 1e6,
            memcpy_us: self.log.seconds_op(Op::Memcpy) * 1e6,
            compress_us: self.compress_ns as f64 * 1e-3,
        }
    }

    /// Close the series. Collective; idempotent. Gathers every rank's
    /// profiling timers and finalizes profiling.json on rank 0.
    pub fn close(&mut self) -> Result<()> {
        if self.closed {
            // Double close must agree group-wide too.
            self.group.barrier()?;
            return Ok(());
        }
        self.close_subfile()?;
        let timers = self.group.all_gather(self.prof_timers())?;
        if self.group.rank() == 0 && self.cfg.profiling {
            let t0 = Instant::now();
            let all: Vec<ProfTimers> = timers.iter().map(|t| **t).collect();
            monitor::write_profile_json(&self.dir.join("profiling.json"), &all)?;
            self.md_ns += t0.elapsed().as_nanos() as u64;
        }
        self.md0 = None;
        self.mdidx = None;
        self.closed = true;
        self.group.barrier()?;
        Ok(())
    }
}

fn create_skeleton(dir: &Path, header: &SeriesHeader, profiling: bool, overwrite: bool) -> Result<()> {
    if dir.exists() {
        if !overwrite {
            return Err(Error::AlreadyExists(dir.to_path_buf()));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(format!("remove {}", dir.display()), e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("mkdir {}", dir.display()), e))?;
    let mut md0 = File::create(dir.join("md.0")).map_err(|e| Error::io("create md.0", e))?;
    md0.write_all(&encode_meta_record(&MetaRecord::Header(*header)))
        .map_err(|e| Error::io("write series header", e))?;
    File::create(dir.join("md.idx")).map_err(|e| Error::io("create md.idx", e))?;
    if profiling {
        File::create(dir.join("profiling.json")).map_err(|e| Error::io("create profiling.json", e))?;
    }
    Ok(())
}

/// All members must open the same series the same way.
fn agree(group: &RankGroup, dir: &Path, mode_tag: u8, cfg: &EngineConfig) -> Result<()> {
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};
    let mut h = DefaultHasher::new();
    dir.hash(&mut h);
    mode_tag.hash(&mut h);
    cfg.hash(&mut h);
    let mine = h.finish();
    let all = group.all_gather(mine)?;
    if all.iter().any(|v| **v != mine) {
        return Err(Error::CollectiveMismatch(
            "open_series arguments differ between ranks".into(),
        ));
    }
    Ok(())
}

fn decode_peer_error(msg: &str, dir: &Path) -> Error {
    if msg.contains("already exists") {
        Error::AlreadyExists(dir.to_path_buf())
    } else {
        Error::io(format!("create series {}", dir.display()), std::io::Error::other(msg.to_string()))
    }
}

/// Data + auxiliary file census law for a finished aggregated series.
pub fn expected_file_count(num_aggregators: u32, profiling: bool) -> u64 {
    crate::engine::count_output_files(num_aggregators, profiling)
}
