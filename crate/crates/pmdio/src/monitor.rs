//! I/O cost accounting.
//!
//! Every file operation the engine or bench harness performs is wrapped in a
//! [`MonitorLog::record`] call, producing a flat per-rank trace of
//! [`OpRecord`]s on one process-wide monotonic clock. Traces merge into an
//! [`AggregateReport`] carrying per-rank totals, a global wall-clock span,
//! aggregate write throughput, and a power-of-two access-size histogram.
//!
//! Only data-plane operations appear in the trace. Commit traffic to the
//! metadata files is engine-internal and lands in the per-rank profiling
//! timers instead (see [`ProfTimers`]), which keeps two laws exact: the
//! number of append records equals the number of non-empty chunks written,
//! and the sum of append bytes equals the growth of the data subfiles.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest histogram bin: accesses below 64 B land in bin 0.
const HIST_MIN_SHIFT: u32 = 6;
/// 64 B .. 1 GiB inclusive, one bin per power of two, plus an overflow bin.
pub const HIST_BINS: usize = (30 - 6 + 1) + 2;

fn clock_origin() -> &'static Instant {
    static ORIGIN: OnceLock<Instant> = OnceLock::new();
    ORIGIN.get_or_init(Instant::now)
}

/// Nanoseconds since the process-wide clock origin.
pub fn now_ns() -> u64 {
    clock_origin().elapsed().as_nanos() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Read,
    Write,
    Metadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Open,
    Close,
    Seek,
    Append,
    Read,
    Stat,
    Fsync,
    Memcpy,
}

impl Op {
    /// Fixed, total op -> category mapping.
    pub fn category(self) -> Category {
        match self {
            Op::Open | Op::Close | Op::Seek | Op::Stat | Op::Fsync => Category::Metadata,
            Op::Append | Op::Memcpy => Category::Write,
            Op::Read => Category::Read,
        }
    }
}

/// One timed operation. `bytes` is nonzero only for append and read.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OpRecord {
    pub rank: usize,
    pub category: Category,
    pub op: Op,
    pub bytes: u64,
    pub t_start_ns: u64,
    pub t_end_ns: u64,
}

/// Per-rank trace. Records are appended in call order; `record` must not be
/// nested, so the trace is flat and non-overlapping.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct MonitorLog {
    pub rank: usize,
    pub records: Vec<OpRecord>,
}

impl MonitorLog {
    pub fn new(rank: usize) -> Self {
        MonitorLog {
            rank,
            records: Vec::new(),
        }
    }

    /// Time `f` and append one record for it.
    pub fn record<T>(&mut self, op: Op, bytes: u64, f: impl FnOnce() -> T) -> T {
        let t_start_ns = now_ns();
        let out = f();
        let t_end_ns = now_ns();
        self.records.push(OpRecord {
            rank: self.rank,
            category: op.category(),
            op,
            bytes,
            t_start_ns,
            t_end_ns,
        });
        out
    }

    /// Fallible variant; the operation is recorded whether or not it failed.
    pub fn record_io<T>(
        &mut self,
        op: Op,
        bytes: u64,
        f: impl FnOnce() -> std::io::Result<T>,
        context: &str,
    ) -> Result<T> {
        self.record(op, bytes, f)
            .map_err(|e| Error::io(context, e))
    }

    pub fn count(&self, category: Category) -> usize {
        self.records.iter().filter(|r| r.category == category).count()
    }

    pub fn count_op(&self, op: Op) -> usize {
        self.records.iter().filter(|r| r.op == op).count()
    }

    pub fn bytes(&self, op: Op) -> u64 {
        self.records
            .iter()
            .filter(|r| r.op == op)
            .map(|r| r.bytes)
            .sum()
    }

    pub fn seconds(&self, category: Category) -> f64 {
        self.records
            .iter()
            .filter(|r| r.category == category)
            .map(|r| (r.t_end_ns - r.t_start_ns) as f64 * 1e-9)
            .sum()
    }

    pub fn seconds_op(&self, op: Op) -> f64 {
        self.records
            .iter()
            .filter(|r| r.op == op)
            .map(|r| (r.t_end_ns - r.t_start_ns) as f64 * 1e-9)
            .sum()
    }
}

/// Totals for one rank inside an [`AggregateReport`].
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RankTotals {
    pub rank: usize,
    pub ops_read: u64,
    pub ops_write: u64,
    pub ops_meta: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub read_s: f64,
    pub write_s: f64,
    pub meta_s: f64,
}

/// Merged view of many rank traces.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AggregateReport {
    pub per_rank: Vec<RankTotals>,
    /// Earliest op start and latest op end over all ranks, any category.
    pub span_start_ns: Option<u64>,
    pub span_end_ns: Option<u64>,
    /// Sum of append bytes over all ranks.
    pub total_bytes_written: u64,
    pub total_bytes_read: u64,
    /// total_bytes_written / (latest write end - earliest write start).
    pub write_gibs: f64,
    pub read_gibs: f64,
    /// Access-size histogram over append and read ops. Bin i holds sizes in
    /// [2^(5+i), 2^(6+i)) with bin 0 catching everything below 64 B and the
    /// last bin everything above 1 GiB.
    pub access_hist: [u64; HIST_BINS],
    // Raw spans are kept so merging stays order-independent; they are an
    // implementation detail and stay out of the serialized form.
    #[serde(skip)]
    write_span: Option<(u64, u64)>,
    #[serde(skip)]
    read_span: Option<(u64, u64)>,
}

pub fn hist_bin(bytes: u64) -> usize {
    if bytes < (1 << HIST_MIN_SHIFT) {
        return 0;
    }
    let log2 = 63 - bytes.leading_zeros();
    let bin = (log2 - HIST_MIN_SHIFT + 1) as usize;
    bin.min(HIST_BINS - 1)
}

pub fn hist_bin_label(bin: usize) -> String {
    fn human(b: u64) -> String {
        if b >= 1 << 30 {
            format!("{}GiB", b >> 30)
        } else if b >= 1 << 20 {
            format!("{}MiB", b >> 20)
        } else if b >= 1 << 10 {
            format!("{}KiB", b >> 10)
        } else {
            format!("{b}B")
        }
    }
    if bin == 0 {
        "<64B".to_string()
    } else if bin == HIST_BINS - 1 {
        ">1GiB".to_string()
    } else {
        let lo = 1u64 << (HIST_MIN_SHIFT + bin as u32 - 1);
        format!("{}-{}", human(lo), human(lo << 1))
    }
}

/// Merge per-rank traces into one report. Associative and commutative over
/// inputs; merging in any order yields the same report.
pub fn merge_logs(logs: &[MonitorLog]) -> AggregateReport {
    let mut report = AggregateReport::default();
    for log in logs {
        report.absorb(log);
    }
    report
}

impl AggregateReport {
    fn absorb(&mut self, log: &MonitorLog) {
        let mut totals = RankTotals {
            rank: log.rank,
            ..RankTotals::default()
        };
        let mut write_span: Option<(u64, u64)> = None;
        let mut read_span: Option<(u64, u64)> = None;
        for r in &log.records {
            let dur = (r.t_end_ns - r.t_start_ns) as f64 * 1e-9;
            match r.category {
                Category::Read => {
                    totals.ops_read += 1;
                    totals.bytes_read += r.bytes;
                    totals.read_s += dur;
                }
                Category::Write => {
                    totals.ops_write += 1;
                    totals.bytes_written += r.bytes;
                    totals.write_s += dur;
                }
                Category::Metadata => {
                    totals.ops_meta += 1;
                    totals.meta_s += dur;
                }
            }
            if matches!(r.op, Op::Append | Op::Read) {
                self.access_hist[hist_bin(r.bytes)] += 1;
            }
            match r.category {
                Category::Write => write_span = widen(write_span, r),
                Category::Read => read_span = widen(read_span, r),
                Category::Metadata => {}
            }
            self.span_start_ns = Some(self.span_start_ns.map_or(r.t_start_ns, |s| s.min(r.t_start_ns)));
            self.span_end_ns = Some(self.span_end_ns.map_or(r.t_end_ns, |s| s.max(r.t_end_ns)));
        }
        self.total_bytes_written += totals.bytes_written;
        self.total_bytes_read += totals.bytes_read;
        self.per_rank.push(totals);
        self.per_rank.sort_by_key(|t| t.rank);

        // Spans and throughput have to be recomputed from scratch on every
        // absorb so that merging stays order-independent.
        self.write_span = merge_span(self.write_span, write_span);
        self.read_span = merge_span(self.read_span, read_span);
        self.write_gibs = throughput(self.total_bytes_written, self.write_span);
        self.read_gibs = throughput(self.total_bytes_read, self.read_span);
    }

    /// Mean seconds per rank spent in each category, plus the shares of the
    /// per-category total in the summed busy time.
    pub fn cost_breakdown(&self) -> CostBreakdown {
        let n = self.per_rank.len().max(1) as f64;
        let read: f64 = self.per_rank.iter().map(|t| t.read_s).sum();
        let write: f64 = self.per_rank.iter().map(|t| t.write_s).sum();
        let meta: f64 = self.per_rank.iter().map(|t| t.meta_s).sum();
        let busy = read + write + meta;
        let share = |x: f64| if busy > 0.0 { x / busy } else { 0.0 };
        CostBreakdown {
            avg_read_s: read / n,
            avg_write_s: write / n,
            avg_meta_s: meta / n,
            read_share: share(read),
            write_share: share(write),
            meta_share: share(meta),
        }
    }
}

fn widen(span: Option<(u64, u64)>, r: &OpRecord) -> Option<(u64, u64)> {
    Some(match span {
        None => (r.t_start_ns, r.t_end_ns),
        Some((s, e)) => (s.min(r.t_start_ns), e.max(r.t_end_ns)),
    })
}

fn merge_span(a: Option<(u64, u64)>, b: Option<(u64, u64)>) -> Option<(u64, u64)> {
    match (a, b) {
        (None, s) | (s, None) => s,
        (Some((s1, e1)), Some((s2, e2))) => Some((s1.min(s2), e1.max(e2))),
    }
}

fn throughput(bytes: u64, span: Option<(u64, u64)>) -> f64 {
    match span {
        Some((s, e)) if e > s => bytes as f64 / ((e - s) as f64 * 1e-9) / (1u64 << 30) as f64,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub avg_read_s: f64,
    pub avg_write_s: f64,
    pub avg_meta_s: f64,
    pub read_share: f64,
    pub write_share: f64,
    pub meta_share: f64,
}

/// Per-rank profiling counters, the source for `profiling.json`.
///
/// `meta_us` covers metadata ops plus the engine's commit writes; `write_us`
/// is time in data appends; `memcpy_us` counts payload staging copies (zero
/// when compression hands its output buffer straight to the file write);
/// `compress_us` is encoder time.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ProfTimers {
    pub rank: usize,
    pub bytes_written: u64,
    pub meta_us: f64,
    pub write_us: f64,
    pub memcpy_us: f64,
    pub compress_us: f64,
}

/// Write the per-rank profiling summary.
pub fn write_profile_json(path: &Path, timers: &[ProfTimers]) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        version: u32,
        ranks: &'a [ProfTimers],
    }
    let doc = Doc {
        version: 1,
        ranks: timers,
    };
    let mut f = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    serde_json::to_writer_pretty(&mut f, &doc)
        .map_err(|e| Error::io("write profiling json", std::io::Error::other(e)))?;
    f.write_all(b"\n")
        .map_err(|e| Error::io("write profiling json", e))?;
    Ok(())
}

pub fn read_profile_json(path: &Path) -> Result<Vec<ProfTimers>> {
    #[derive(Deserialize)]
    struct Doc {
        #[allow(dead_code)]
        version: u32,
        ranks: Vec<ProfTimers>,
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let doc: Doc =
        serde_json::from_str(&text).map_err(|e| Error::ParseError(format!("profiling json: {e}")))?;
    Ok(doc.ranks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

/// Render a report for humans (text) or downstream tooling (csv).
pub fn render_report(report: &AggregateReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from(
                "rank,ops_read,ops_write,ops_meta,bytes_read,bytes_written,read_s,write_s,meta_s\n",
            );
            for t in &report.per_rank {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{:.9},{:.9},{:.9}\n",
                    t.rank,
                    t.ops_read,
                    t.ops_write,
                    t.ops_meta,
                    t.bytes_read,
                    t.bytes_written,
                    t.read_s,
                    t.write_s,
                    t.meta_s
                ));
            }
            out
        }
        ReportFormat::Text => {
            let mut out = String::new();
            let b = report.cost_breakdown();
            out.push_str(&format!(
                "ranks {}  bytes written {}  bytes read {}\n",
                report.per_rank.len(),
                report.total_bytes_written,
                report.total_bytes_read
            ));
            out.push_str(&format!(
                "write {:.3} GiB/s  read {:.3} GiB/s\n",
                report.write_gibs, report.read_gibs
            ));
            out.push_str(&format!(
                "avg per rank: read {:.6}s write {:.6}s meta {:.6}s (shares {:.2}/{:.2}/{:.2})\n",
                b.avg_read_s, b.avg_write_s, b.avg_meta_s, b.read_share, b.write_share, b.meta_share
            ));
            out.push_str(&format!(
                "{:>6} {:>9} {:>9} {:>9} {:>12} {:>12}\n",
                "rank", "ops_rd", "ops_wr", "ops_meta", "bytes_rd", "bytes_wr"
            ));
            for t in &report.per_rank {
                out.push_str(&format!(
                    "{:>6} {:>9} {:>9} {:>9} {:>12} {:>12}\n",
                    t.rank, t.ops_read, t.ops_write, t.ops_meta, t.bytes_read, t.bytes_written
                ));
            }
            let mut any = false;
            for (i, n) in report.access_hist.iter().enumerate() {
                if *n > 0 {
                    if !any {
                        out.push_str("access sizes:\n");
                        any = true;
                    }
                    out.push_str(&format!("  {:>12} {}\n", hist_bin_label(i), n));
                }
            }
            out
        }
    }
}
