//! Synthetic parallel I/O benchmark in the IOR mold.
//!
//! Each task owns one contiguous block of a shared u64 dataset and writes it
//! in transfer-sized chunks, then reads a block back and verifies the
//! pattern; `reorder_readback` shifts every task onto its right neighbor's
//! block so nobody re-reads bytes it produced itself. Block contents come
//! from a counter-mixed pattern, so verification needs no reference copy.
//!
//! Throughput is reported twice, from two unrelated code paths: the harness
//! brackets the flush calls with its own clock and divides payload bytes by
//! the global window (earliest start to latest end over all tasks), while
//! the monitor route merges the per-rank op traces and uses the write-op
//! span. The pair is a consistency check on the accounting; they disagree
//! when something outside the data path (say `fsync_on_close` in
//! file-per-process mode) eats wall time the op trace attributes elsewhere.
//!
//! Sizing note: buffers are staged and checksummed before the bracket
//! opens, so the window adds only the collective exchange and the metadata
//! batch around the appends. Those cost single-digit milliseconds
//! regardless of size; with blocks large enough that a repetition's window
//! runs a few hundred milliseconds the two routes land well inside 1% of
//! each other, with tiny blocks the fixed costs dominate and the wall
//! figure sags. Oversubscribing tasks over cores widens the gap too, since
//! thread wakeups at the phase edges land in the wall window but not in
//! the op span.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::comm::{spawn_group, RankGroup};
use crate::config::{AggSetting, EngineConfig};
use crate::engine::layout::EngineMode;
use crate::error::{Error, Result};
use crate::model::Series;
use crate::monitor::{self, merge_logs, MonitorLog};

const RECORD: &str = "bench";
const COMPONENT: &str = "pattern";
const WORD: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// Every task writes its own data file per repetition (IOR -F).
    FilePerProcess,
    /// Tasks share subfiles through aggregators; one file with the default
    /// single aggregator.
    Shared,
}

impl std::fmt::Display for BenchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchMode::FilePerProcess => "file_per_process",
            BenchMode::Shared => "shared",
        })
    }
}

/// One benchmark configuration.
///
/// `num_aggregators` only matters in shared mode; 1 reproduces IOR's single
/// shared file, larger values fan the tasks out over that many subfiles.
#[derive(Debug, Clone, Serialize)]
pub struct BenchSpec {
    pub tasks: u32,
    pub mode: BenchMode,
    pub block_bytes: u64,
    pub transfer_bytes: u64,
    pub reorder_readback: bool,
    pub fsync_on_close: bool,
    pub repetitions: u32,
    pub num_aggregators: u32,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            tasks: 4,
            mode: BenchMode::Shared,
            block_bytes: 16 << 20,
            transfer_bytes: 1 << 20,
            reorder_readback: false,
            fsync_on_close: false,
            repetitions: 1,
            num_aggregators: 1,
            seed: 0x1005,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::InvalidConfig("bench needs at least one task".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("bench needs at least one repetition".into()));
        }
        if self.num_aggregators == 0 {
            return Err(Error::InvalidConfig("num_aggregators must be >= 1".into()));
        }
        if self.transfer_bytes == 0 || self.transfer_bytes % WORD != 0 {
            return Err(Error::InvalidConfig(format!(
                "transfer size {} is not a positive multiple of {} bytes",
                self.transfer_bytes, WORD
            )));
        }
        if self.block_bytes == 0 || self.block_bytes % self.transfer_bytes != 0 {
            return Err(Error::InvalidConfig(format!(
                "block size {} is not a positive multiple of the transfer size {}",
                self.block_bytes, self.transfer_bytes
            )));
        }
        Ok(())
    }

    /// Payload bytes one repetition moves in each direction.
    pub fn bytes_per_rep(&self) -> u64 {
        self.tasks as u64 * self.block_bytes
    }

    fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            mode: match self.mode {
                BenchMode::FilePerProcess => EngineMode::FilePerProcess,
                BenchMode::Shared => EngineMode::Aggregated,
            },
            num_aggregators: AggSetting::Count(self.num_aggregators),
            overwrite: true,
            fsync_on_close: self.fsync_on_close,
            ..EngineConfig::default()
        }
    }
}

/// Deterministic content of word `index` in repetition `rep`.
pub fn pattern_word(seed: u64, rep: u32, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add((rep as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Timings and byte counts for one repetition.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RepStats {
    pub rep: u32,
    /// Global write window in seconds (earliest bracket start to latest
    /// bracket end) and payload throughput over it.
    pub write_seconds: f64,
    pub write_gibs: f64,
    /// Append-span throughput from the merged op traces. Counts framed
    /// bytes, so it sits a hair above the payload figure even at equal
    /// spans.
    pub write_gibs_monitor: f64,
    pub read_seconds: f64,
    pub read_gibs: f64,
    pub read_gibs_monitor: f64,
    /// Framed bytes the op traces saw appended during this repetition.
    pub frame_bytes: u64,
    pub words_verified: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub spec: BenchSpec,
    pub series: PathBuf,
    /// data.* files in the finished series.
    pub data_files: u64,
    pub total_files: u64,
    pub payload_bytes: u64,
    pub frame_bytes: u64,
    /// Best repetition, IOR style.
    pub write_gibs: f64,
    pub read_gibs: f64,
    pub reps: Vec<RepStats>,
}

/// What each rank contributes to the per-repetition exchange. Read-phase
/// failures ride along as a message instead of an early return, so the
/// collectives stay matched and every rank fails together.
struct RepProbe {
    write_t0: u64,
    write_t1: u64,
    read_t0: u64,
    read_t1: u64,
    write_log: MonitorLog,
    read_log: MonitorLog,
    words_verified: u64,
    /// Message of a local read failure, for the peers' GroupFault.
    error: Option<String>,
}

/// Run the benchmark, writing the series at `out`.
pub fn run_bench(spec: &BenchSpec, out: &Path) -> Result<BenchResult> {
    spec.validate()?;
    check_free_space(spec, out)?;

    let spec_arc = spec.clone();
    let out_path = out.to_path_buf();
    let per_rank: Vec<Result<Option<Vec<RepStats>>>> =
        spawn_group(spec.tasks as usize, move |group| {
            bench_rank(&spec_arc, &out_path, group)
        })?;

    // Prefer the originating rank's error over the GroupFault echoes the
    // other ranks report for it.
    let mut reps = None;
    let mut first_err: Option<Error> = None;
    for r in per_rank {
        match r {
            Ok(Some(v)) => reps = Some(v),
            Ok(None) => {}
            Err(e) => {
                let take = match &first_err {
                    None => true,
                    Some(Error::GroupFault { .. }) => !matches!(e, Error::GroupFault { .. }),
                    Some(_) => false,
                };
                if take {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let reps = reps.expect("rank 0 stats");

    let (data_files, total_files) = census(out)?;
    let payload_bytes = spec.bytes_per_rep() * spec.repetitions as u64;
    let frame_bytes = reps.iter().map(|r| r.frame_bytes).sum();
    let best = |f: fn(&RepStats) -> f64| reps.iter().map(f).fold(0.0, f64::max);
    Ok(BenchResult {
        spec: spec.clone(),
        series: crate::model::series_path(out),
        data_files,
        total_files,
        payload_bytes,
        frame_bytes,
        write_gibs: best(|r| r.write_gibs),
        read_gibs: best(|r| r.read_gibs),
        reps,
    })
}

fn bench_rank(spec: &BenchSpec, out: &Path, group: RankGroup) -> Result<Option<Vec<RepStats>>> {
    let rank = group.rank() as u64;
    let tasks = spec.tasks as u64;
    let words_per_block = spec.block_bytes / WORD;
    let words_per_transfer = spec.transfer_bytes / WORD;
    let transfers = words_per_block / words_per_transfer;
    let total_words = tasks * words_per_block;

    let mut series = Series::create(out, &group, spec.engine_config())?;
    let mut stats = Vec::with_capacity(spec.repetitions as usize);

    for rep in 0..spec.repetitions {
        let iteration = rep as u64 + 1;
        series.begin_iteration(iteration)?;
        series.define_mesh::<u64>(RECORD, COMPONENT, &[total_words])?;

        // Stage every transfer before the clock starts; the bracket then
        // covers I/O, not buffer synthesis.
        let block_start = rank * words_per_block;
        for t in 0..transfers {
            let off = block_start + t * words_per_transfer;
            let buf: Vec<u64> = (0..words_per_transfer)
                .map(|i| pattern_word(spec.seed, rep, off + i))
                .collect();
            series.store_chunk(RECORD, COMPONENT, &[off], &[words_per_transfer], &buf)?;
        }

        let log_mark = series.monitor_log().records.len();
        group.barrier()?;
        let write_t0 = monitor::now_ns();
        series.flush()?;
        let write_t1 = monitor::now_ns();
        series.close_iteration()?;
        let write_log = MonitorLog {
            rank: group.rank(),
            records: series.monitor_log().records[log_mark..].to_vec(),
        };

        // Read phase: a private read-only open per rank, with the block
        // shifted one task to the right under reorder so page-cache reuse
        // of freshly written data is off the table.
        let src = if spec.reorder_readback {
            (rank + 1) % tasks
        } else {
            rank
        };
        let read_off = src * words_per_block;
        group.barrier()?;
        let read = read_block(spec, out, iteration, rep, read_off, words_per_block);
        let (probe, my_err) = match read {
            Ok((read_t0, read_t1, read_log)) => (
                RepProbe {
                    write_t0,
                    write_t1,
                    read_t0,
                    read_t1,
                    write_log,
                    read_log,
                    words_verified: words_per_block,
                    error: None,
                },
                None,
            ),
            Err(e) => (
                RepProbe {
                    write_t0,
                    write_t1,
                    read_t0: 0,
                    read_t1: 0,
                    write_log,
                    read_log: MonitorLog::new(group.rank()),
                    words_verified: 0,
                    error: Some(e.to_string()),
                },
                Some(e),
            ),
        };
        let probes = group.all_gather(probe)?;
        if let Some(e) = my_err {
            return Err(e);
        }
        for (r, p) in probes.iter().enumerate() {
            if let Some(msg) = &p.error {
                return Err(Error::GroupFault {
                    rank: r,
                    reason: msg.clone(),
                });
            }
        }
        if group.rank() == 0 {
            stats.push(reduce_rep(rep, spec.bytes_per_rep(), &probes));
        }
    }

    series.close()?;
    Ok(if group.rank() == 0 { Some(stats) } else { None })
}

/// Open, read, and verify one block. Returns the bracket timestamps and the
/// data-op trace of the read.
fn read_block(
    spec: &BenchSpec,
    out: &Path,
    iteration: u64,
    rep: u32,
    read_off: u64,
    words_per_block: u64,
) -> Result<(u64, u64, MonitorLog)> {
    let mut rdr = Series::open_read(out)?;
    let read_t0 = monitor::now_ns();
    let (_, _, bytes) = rdr.read_component_bytes(
        iteration,
        RECORD,
        COMPONENT,
        Some((&[read_off], &[words_per_block])),
    )?;
    let read_t1 = monitor::now_ns();

    let bad = bytes
        .chunks_exact(WORD as usize)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .enumerate()
        .filter(|(i, w)| *w != pattern_word(spec.seed, rep, read_off + *i as u64))
        .count();
    if bad > 0 {
        return Err(Error::VerifyFailed(format!(
            "rep {rep}: {bad} of {words_per_block} words at offset {read_off} differ from the pattern"
        )));
    }
    Ok((read_t0, read_t1, rdr.monitor_log().clone()))
}

fn reduce_rep(
    rep: u32,
    payload_bytes: u64,
    probes: &[std::sync::Arc<RepProbe>],
) -> RepStats {
    let gib = (1u64 << 30) as f64;
    let window = |lo: fn(&RepProbe) -> u64, hi: fn(&RepProbe) -> u64| {
        let start = probes.iter().map(|p| lo(p)).min().unwrap_or(0);
        let end = probes.iter().map(|p| hi(p)).max().unwrap_or(0);
        (end.saturating_sub(start)) as f64 * 1e-9
    };
    let write_seconds = window(|p| p.write_t0, |p| p.write_t1);
    let read_seconds = window(|p| p.read_t0, |p| p.read_t1);
    let rate = |secs: f64| if secs > 0.0 { payload_bytes as f64 / secs / gib } else { 0.0 };

    let write_logs: Vec<MonitorLog> = probes.iter().map(|p| p.write_log.clone()).collect();
    let read_logs: Vec<MonitorLog> = probes.iter().map(|p| p.read_log.clone()).collect();
    let wreport = merge_logs(&write_logs);
    let rreport = merge_logs(&read_logs);

    RepStats {
        rep,
        write_seconds,
        write_gibs: rate(write_seconds),
        write_gibs_monitor: wreport.write_gibs,
        read_seconds,
        read_gibs: rate(read_seconds),
        read_gibs_monitor: rreport.read_gibs,
        frame_bytes: wreport.total_bytes_written,
        words_verified: probes.iter().map(|p| p.words_verified).sum(),
    }
}

/// Count data and total files in a finished series directory.
fn census(out: &Path) -> Result<(u64, u64)> {
    let dir = crate::model::series_path(out);
    let mut data = 0u64;
    let mut total = 0u64;
    let entries = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(format!("read dir {}", dir.display()), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io("read dir entry", e))?;
        total += 1;
        if entry.file_name().to_string_lossy().starts_with("data.") {
            data += 1;
        }
    }
    Ok((data, total))
}

/// Refuse to start a run the filesystem cannot hold.
fn check_free_space(spec: &BenchSpec, out: &Path) -> Result<()> {
    let payload = spec.bytes_per_rep() * spec.repetitions as u64;
    let frames = (payload / spec.transfer_bytes) * 64;
    let needed = payload + frames + (1 << 20);
    let probe = existing_ancestor(out);
    let free = free_bytes(&probe)?;
    if free < needed {
        return Err(Error::io(
            format!(
                "insufficient space for benchmark in {}: need {} bytes, {} available",
                probe.display(),
                needed,
                free
            ),
            std::io::Error::from(std::io::ErrorKind::StorageFull),
        ));
    }
    Ok(())
}

fn existing_ancestor(path: &Path) -> PathBuf {
    let mut p = path;
    loop {
        if p.exists() {
            return p.to_path_buf();
        }
        match p.parent() {
            Some(parent) if !parent.as_os_str().is_empty() => p = parent,
            _ => return PathBuf::from("."),
        }
    }
}

fn free_bytes(path: &Path) -> Result<u64> {
    use std::os::unix::ffi::OsStrExt;
    let c = std::ffi::CString::new(path.as_os_str().as_bytes())
        .map_err(|_| Error::InvalidConfig("path contains a NUL byte".into()))?;
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    let rc = unsafe { libc::statvfs(c.as_ptr(), &mut st) };
    if rc != 0 {
        return Err(Error::io(
            format!("statvfs {}", path.display()),
            std::io::Error::last_os_error(),
        ));
    }
    Ok(st.f_bavail as u64 * st.f_frsize as u64)
}

pub const SWEEP_CSV_HEADER: &str = "num_aggregators,tasks,block_bytes,transfer_bytes,repetitions,\
data_files,payload_bytes,frame_bytes,write_gibs,write_gibs_monitor,read_gibs,read_gibs_monitor";

/// One CSV row for a finished run at a given aggregator count.
pub fn sweep_csv_row(result: &BenchResult) -> String {
    let wm = result
        .reps
        .iter()
        .map(|r| r.write_gibs_monitor)
        .fold(0.0, f64::max);
    let rm = result
        .reps
        .iter()
        .map(|r| r.read_gibs_monitor)
        .fold(0.0, f64::max);
    format!(
        "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
        result.spec.num_aggregators,
        result.spec.tasks,
        result.spec.block_bytes,
        result.spec.transfer_bytes,
        result.spec.repetitions,
        result.data_files,
        result.payload_bytes,
        result.frame_bytes,
        result.write_gibs,
        wm,
        result.read_gibs,
        rm
    )
}

/// Run the same shared-mode workload once per aggregator count and render
/// the results as CSV, one row per count. The byte columns are invariant
/// across rows: the chunks, frames, and payload do not depend on how many
/// subfiles they fan out over.
pub fn run_sweep(base: &BenchSpec, counts: &[u32], out_dir: &Path) -> Result<(String, Vec<BenchResult>)> {
    if counts.is_empty() {
        return Err(Error::InvalidConfig("aggregator sweep needs at least one count".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("mkdir {}", out_dir.display()), e))?;
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    let mut results = Vec::with_capacity(counts.len());
    for &m in counts {
        let spec = BenchSpec {
            mode: BenchMode::Shared,
            num_aggregators: m,
            ..base.clone()
        };
        let out = out_dir.join(format!("sweep_m{m}"));
        let result = run_bench(&spec, &out)?;
        csv.push_str(&sweep_csv_row(&result));
        csv.push('\n');
        results.push(result);
    }
    Ok((csv, results))
}
