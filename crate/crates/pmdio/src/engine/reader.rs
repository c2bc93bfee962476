//! Read path.
//!
//! Opening a series parses `md.idx` and the committed byte ranges of
//! `md.0`; nothing else is trusted. Only step records fully present in
//! `md.idx` are visible, the latest record for a step wins, and a partial
//! 64-byte tail (a crash mid-append) is ignored. Chunk payloads are
//! verified against their index summaries field by field, including the
//! payload checksum, before any byte reaches the caller.
//!
//! Readers are rank-local; any process may open a series regardless of
//! how many ranks wrote it.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use crate::engine::layout::{
    align8, decode_frame_payload, decode_meta_records, verify_frame, AttributeRecord, ChunkHeader,
    ChunkLocation, DataFileId, Datatype, MetaRecord, NameEntry, SeriesHeader, StepIndexRecord,
    VariableIndexEntry, STEP_RECORD_LEN,
};
use crate::error::{Error, Result};
use crate::monitor::{MonitorLog, Op};

/// One visible (committed) step.
#[derive(Debug, Clone)]
pub struct StepInfo {
    pub step: u64,
    /// Position of the winning record in md.idx, i.e. commit order.
    pub ordinal: u64,
    /// How many md.idx records exist for this step (>1 means superseded).
    pub versions: u32,
    pub wall_clock_ns: u64,
    pub entries: Vec<VariableIndexEntry>,
    pub attributes: Vec<AttributeRecord>,
}

impl StepInfo {
    pub fn entry(&self, variable_id: u32) -> Option<&VariableIndexEntry> {
        self.entries.iter().find(|e| e.variable_id == variable_id)
    }
}

#[derive(Debug, Clone)]
pub struct FileInfo {
    pub name: String,
    pub bytes: u64,
}

/// Everything the committed metadata says about a series.
#[derive(Debug, Clone)]
pub struct SeriesInventory {
    pub header: SeriesHeader,
    /// Committed steps, sorted by step number.
    pub steps: Vec<StepInfo>,
    pub variables: HashMap<u32, NameEntry>,
    /// Census of every file in the series directory, sorted by name.
    pub files: Vec<FileInfo>,
}

impl SeriesInventory {
    pub fn step(&self, step: u64) -> Option<&StepInfo> {
        self.steps.iter().find(|s| s.step == step)
    }

    pub fn variable_by_names(&self, record: &str, component: &str) -> Option<&NameEntry> {
        self.variables
            .values()
            .find(|n| n.record_name == record && n.component_name == component)
    }

    pub fn file_count(&self) -> u64 {
        self.files.len() as u64
    }
}

/// Parse md.idx: whole 64-byte records only, latest record per step wins.
fn resolve_index(raw: &[u8]) -> Result<Vec<(StepIndexRecord, u64, u32)>> {
    let n = raw.len() / STEP_RECORD_LEN;
    let mut winners: HashMap<u64, (StepIndexRecord, u64, u32)> = HashMap::new();
    for i in 0..n {
        let at = i * STEP_RECORD_LEN;
        let rec = StepIndexRecord::decode(raw[at..at + STEP_RECORD_LEN].try_into().unwrap())
            .map_err(|e| Error::CorruptIndex(format!("md.idx record {i}: {e}")))?;
        winners
            .entry(rec.step)
            .and_modify(|w| {
                w.0 = rec;
                w.1 = i as u64;
                w.2 += 1;
            })
            .or_insert((rec, i as u64, 1));
    }
    let mut out: Vec<_> = winners.into_values().collect();
    out.sort_by_key(|w| w.0.step);
    Ok(out)
}

/// Load and cross-check the committed state of a series directory.
pub fn load_inventory(dir: &Path) -> Result<SeriesInventory> {
    if !dir.is_dir() {
        return Err(Error::NoSeries(dir.to_path_buf()));
    }
    let md0_path = dir.join("md.0");
    let md0 = std::fs::read(&md0_path)
        .map_err(|e| Error::io(format!("read {}", md0_path.display()), e))?;
    let idx_path = dir.join("md.idx");
    let idx = std::fs::read(&idx_path)
        .map_err(|e| Error::io(format!("read {}", idx_path.display()), e))?;

    let header = parse_header(&md0)?;
    let winners = resolve_index(&idx)?;

    let mut steps = Vec::with_capacity(winners.len());
    let mut variables: HashMap<u32, NameEntry> = HashMap::new();
    for (rec, ordinal, versions) in winners {
        let end = rec
            .md_offset
            .checked_add(rec.md_length)
            .ok_or_else(|| Error::CorruptIndex("md range overflow".into()))?;
        if end > md0.len() as u64 {
            return Err(Error::CorruptIndex(format!(
                "step {} metadata range {}..{} exceeds md.0 length {}",
                rec.step,
                rec.md_offset,
                end,
                md0.len()
            )));
        }
        let range = &md0[rec.md_offset as usize..end as usize];
        let records = decode_meta_records(range)?;

        let mut entries: Vec<VariableIndexEntry> = Vec::new();
        let mut attributes = Vec::new();
        for r in records {
            match r {
                MetaRecord::Header(_) => {
                    return Err(Error::CorruptIndex(format!(
                        "series header inside step {} batch",
                        rec.step
                    )));
                }
                MetaRecord::Name(n) => {
                    if let Some(prev) = variables.get(&n.variable_id) {
                        if *prev != n {
                            return Err(Error::CorruptIndex(format!(
                                "variable {} renamed between steps",
                                n.variable_id
                            )));
                        }
                    } else {
                        variables.insert(n.variable_id, n);
                    }
                }
                MetaRecord::Entry(e) => {
                    if e.step != rec.step {
                        return Err(Error::CorruptIndex(format!(
                            "entry for step {} inside step {} batch",
                            e.step, rec.step
                        )));
                    }
                    match entries.iter_mut().find(|x| x.variable_id == e.variable_id) {
                        Some(prev) => {
                            if prev.datatype != e.datatype || prev.global_extent != e.global_extent
                            {
                                return Err(Error::CorruptIndex(format!(
                                    "variable {} redefined within step {}",
                                    e.variable_id, rec.step
                                )));
                            }
                            prev.chunks.extend(e.chunks);
                        }
                        None => entries.push(e),
                    }
                }
                MetaRecord::Attribute(a) => attributes.push(a),
            }
        }
        for e in &entries {
            if variables.get(&e.variable_id).is_none() {
                return Err(Error::CorruptIndex(format!(
                    "step {} references unnamed variable {}",
                    rec.step, e.variable_id
                )));
            }
        }
        steps.push(StepInfo {
            step: rec.step,
            ordinal,
            versions,
            wall_clock_ns: rec.wall_clock_ns,
            entries,
            attributes,
        });
    }

    let mut files = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(format!("scan {}", dir.display()), e))?;
    for ent in rd {
        let ent = ent.map_err(|e| Error::io("scan series dir", e))?;
        let meta = ent.metadata().map_err(|e| Error::io("stat series file", e))?;
        files.push(FileInfo {
            name: ent.file_name().to_string_lossy().into_owned(),
            bytes: meta.len(),
        });
    }
    files.sort_by(|a, b| a.name.cmp(&b.name));

    Ok(SeriesInventory {
        header,
        steps,
        variables,
        files,
    })
}

fn parse_header(md0: &[u8]) -> Result<SeriesHeader> {
    if md0.len() < 4 {
        return Err(Error::CorruptIndex("md.0 shorter than a record prefix".into()));
    }
    let len = u32::from_le_bytes(md0[..4].try_into().unwrap()) as usize;
    let total = 4 + len;
    if md0.len() < total {
        return Err(Error::CorruptIndex("md.0 header record truncated".into()));
    }
    let records = decode_meta_records(&md0[..total])?;
    match records.as_slice() {
        [MetaRecord::Header(h)] => Ok(*h),
        _ => Err(Error::CorruptIndex("md.0 does not start with a series header".into())),
    }
}

/// Result of a component read.
#[derive(Debug, Clone)]
pub struct ReadResult {
    pub datatype: Datatype,
    /// Extent of the returned box (the selection, or the global extent).
    pub extent: Vec<u64>,
    /// Little-endian bytes, row-major; unwritten regions are zero.
    pub bytes: Vec<u8>,
}

pub struct BpReader {
    dir: PathBuf,
    inventory: SeriesInventory,
    handles: HashMap<DataFileId, File>,
    pub log: MonitorLog,
}

impl BpReader {
    pub fn open(path: &Path) -> Result<BpReader> {
        let dir = if path.extension().map_or(false, |e| e == "bp4") {
            path.to_path_buf()
        } else {
            let mut s = path.as_os_str().to_os_string();
            s.push(".bp4");
            PathBuf::from(s)
        };
        let inventory = load_inventory(&dir)?;
        Ok(BpReader {
            dir,
            inventory,
            handles: HashMap::new(),
            log: MonitorLog::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn inventory(&self) -> &SeriesInventory {
        &self.inventory
    }

    pub fn iterations(&self) -> Vec<u64> {
        self.inventory.steps.iter().map(|s| s.step).collect()
    }

    /// Read one component, whole or a box selection of it.
    pub fn read_component(
        &mut self,
        iteration: u64,
        record: &str,
        component: &str,
        selection: Option<(&[u64], &[u64])>,
    ) -> Result<ReadResult> {
        let name = self
            .inventory
            .variable_by_names(record, component)
            .ok_or_else(|| Error::NotDefined(format!("{record}/{component}")))?
            .clone();
        let step = self
            .inventory
            .step(iteration)
            .ok_or_else(|| Error::NotDefined(format!("iteration {iteration}")))?;
        let entry = step.entry(name.variable_id).ok_or_else(|| {
            Error::NotDefined(format!("{record}/{component} in iteration {iteration}"))
        })?;

        let global = entry.global_extent.clone();
        let (sel_off, sel_ext): (Vec<u64>, Vec<u64>) = match selection {
            Some((o, e)) => (o.to_vec(), e.to_vec()),
            None => (vec![0; global.len()], global.clone()),
        };
        if sel_off.len() != global.len() || sel_ext.len() != global.len() {
            return Err(Error::InvalidExtent(format!(
                "selection rank {} vs dataset rank {}",
                sel_ext.len(),
                global.len()
            )));
        }
        for i in 0..global.len() {
            let end = sel_off[i]
                .checked_add(sel_ext[i])
                .ok_or_else(|| Error::OutOfBounds("selection overflow".into()))?;
            if end > global[i] {
                return Err(Error::OutOfBounds(format!(
                    "selection {}+{} exceeds extent {} in dim {}",
                    sel_off[i], sel_ext[i], global[i], i
                )));
            }
        }

        let elem = entry.datatype.element_size();
        let sel_elems: u64 = sel_ext.iter().product();
        let mut out = vec![0u8; sel_elems as usize * elem];

        let chunks = entry.chunks.clone();
        let datatype = entry.datatype;
        let step_no = iteration;
        for loc in &chunks {
            if boxes_disjoint(&sel_off, &sel_ext, &loc.offset, &loc.extent) {
                continue;
            }
            let raw = self.fetch_chunk(step_no, name.variable_id, loc)?;
            copy_box(
                &mut out,
                &sel_off,
                &sel_ext,
                &raw,
                &loc.offset,
                &loc.extent,
                elem,
            );
        }
        Ok(ReadResult {
            datatype,
            extent: sel_ext,
            bytes: out,
        })
    }

    /// Fetch, verify, and decode one chunk's raw payload.
    fn fetch_chunk(&mut self, step: u64, variable_id: u32, loc: &ChunkLocation) -> Result<Vec<u8>> {
        let frame_len = ChunkHeader::encoded_len(loc.extent.len()) + align8(loc.stored_len);
        let subfile = loc.file.file_name();
        if !self.handles.contains_key(&loc.file) {
            let path = self.dir.join(&subfile);
            let f = self.log.record_io(
                Op::Open,
                0,
                || File::open(&path),
                &format!("open {}", path.display()),
            )?;
            self.handles.insert(loc.file, f);
        }
        let file = self.handles.get_mut(&loc.file).expect("cached handle");
        let off = loc.file_offset;
        self.log.record_io(
            Op::Seek,
            0,
            || file.seek(SeekFrom::Start(off)).map(|_| ()),
            "seek to chunk",
        )?;
        let mut frame = vec![0u8; frame_len as usize];
        self.log.record_io(
            Op::Read,
            frame_len,
            || file.read_exact(&mut frame),
            "read chunk frame",
        )?;
        let corrupt = |reason: String| Error::CorruptChunk {
            subfile: subfile.clone(),
            offset: off,
            reason,
        };
        let stored = verify_frame(&frame, loc, step, variable_id, &corrupt)?;
        decode_frame_payload(stored, loc, &corrupt)
    }
}

fn boxes_disjoint(a_off: &[u64], a_ext: &[u64], b_off: &[u64], b_ext: &[u64]) -> bool {
    for i in 0..a_off.len() {
        if a_off[i] + a_ext[i] <= b_off[i] || b_off[i] + b_ext[i] <= a_off[i] {
            return true;
        }
    }
    false
}

/// Copy the intersection of `src` (box `b`) into `dst` (box `a`), both
/// row-major with the last dimension contiguous. Ranks 1..=3.
fn copy_box(
    dst: &mut [u8],
    a_off: &[u64],
    a_ext: &[u64],
    src: &[u8],
    b_off: &[u64],
    b_ext: &[u64],
    elem: usize,
) {
    // Promote to rank 3 by prepending unit dimensions.
    let d = a_ext.len();
    let pad = 3 - d;
    let mut ao = [0u64; 3];
    let mut ae = [1u64; 3];
    let mut bo = [0u64; 3];
    let mut be = [1u64; 3];
    for i in 0..d {
        ao[pad + i] = a_off[i];
        ae[pad + i] = a_ext[i];
        bo[pad + i] = b_off[i];
        be[pad + i] = b_ext[i];
    }
    let mut lo = [0u64; 3];
    let mut hi = [0u64; 3];
    for i in 0..3 {
        lo[i] = ao[i].max(bo[i]);
        hi[i] = (ao[i] + ae[i]).min(bo[i] + be[i]);
        if lo[i] >= hi[i] {
            return;
        }
    }
    let run = (hi[2] - lo[2]) as usize * elem;
    for i0 in lo[0]..hi[0] {
        for i1 in lo[1]..hi[1] {
            let s = (((i0 - bo[0]) * be[1] + (i1 - bo[1])) * be[2] + (lo[2] - bo[2])) as usize
                * elem;
            let t = (((i0 - ao[0]) * ae[1] + (i1 - ao[1])) * ae[2] + (lo[2] - ao[2])) as usize
                * elem;
            dst[t..t + run].copy_from_slice(&src[s..s + run]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_copy_matches_scalar_loop_in_2d() {
        // Chunk [2..5) x [1..4) into selection [0..6) x [0..5), 1-byte elems.
        let b_off = [2u64, 1];
        let b_ext = [3u64, 3];
        let src: Vec<u8> = (0..9).map(|v| v + 10).collect();
        let a_off = [0u64, 0];
        let a_ext = [6u64, 5];
        let mut dst = vec![0u8; 30];
        copy_box(&mut dst, &a_off, &a_ext, &src, &b_off, &b_ext, 1);

        let mut expect = vec![0u8; 30];
        for r in 0..3u64 {
            for c in 0..3u64 {
                let g = ((r + 2) * 5 + (c + 1)) as usize;
                expect[g] = (r * 3 + c) as u8 + 10;
            }
        }
        assert_eq!(dst, expect);
    }

    #[test]
    fn box_copy_partial_overlap_3d() {
        let b_off = [1u64, 1, 1];
        let b_ext = [2u64, 2, 2];
        let src: Vec<u8> = (1..=8).collect();
        // Selection covers only the upper corner of the chunk.
        let a_off = [2u64, 2, 2];
        let a_ext = [2u64, 2, 2];
        let mut dst = vec![0u8; 8];
        copy_box(&mut dst, &a_off, &a_ext, &src, &b_off, &b_ext, 1);
        // Only chunk cell (1,1,1) lands in the selection, at its origin.
        assert_eq!(dst[0], 8);
        assert!(dst[1..].iter().all(|&b| b == 0));
    }

    #[test]
    fn disjoint_boxes_detected_per_axis() {
        assert!(boxes_disjoint(&[0], &[4], &[4], &[2]));
        assert!(!boxes_disjoint(&[0], &[5], &[4], &[2]));
        assert!(boxes_disjoint(&[0, 0], &[4, 4], &[0, 4], &[4, 1]));
    }

    #[test]
    fn index_resolution_latest_wins() {
        let mk = |step: u64, off: u64| StepIndexRecord {
            step,
            md_offset: off,
            md_length: 10,
            wall_clock_ns: 0,
            flags: crate::engine::layout::FLAG_VALID,
        };
        let mut raw = Vec::new();
        raw.extend_from_slice(&mk(0, 100).encode());
        raw.extend_from_slice(&mk(1, 200).encode());
        raw.extend_from_slice(&mk(0, 300).encode());
        // Torn tail: half a record.
        raw.extend_from_slice(&[0u8; 32]);

        let winners = resolve_index(&raw).unwrap();
        assert_eq!(winners.len(), 2);
        assert_eq!(winners[0].0.step, 0);
        assert_eq!(winners[0].0.md_offset, 300);
        assert_eq!(winners[0].1, 2);
        assert_eq!(winners[0].2, 2);
        assert_eq!(winners[1].0.step, 1);
        assert_eq!(winners[1].2, 1);
    }

    #[test]
    fn zero_length_index_has_no_steps() {
        assert!(resolve_index(&[]).unwrap().is_empty());
        // A lone partial record is invisible, not an error.
        assert!(resolve_index(&[0u8; 63]).unwrap().is_empty());
    }
}
