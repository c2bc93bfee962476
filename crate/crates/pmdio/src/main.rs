//! Command-line front end.
//!
//! One invocation drives one in-process rank group; `--ranks N` spins up N
//! member threads for the parallel commands. Exit codes: 0 success, 2 usage
//! (from the argument parser), 3 bad configuration, 4 I/O failure, 5
//! detected corruption.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use pmdio::bench::{self, BenchMode, BenchResult, BenchSpec};
use pmdio::comm::spawn_group;
use pmdio::engine::layout::{AttrValue, EngineMode};
use pmdio::engine::reader::{load_inventory, SeriesInventory};
use pmdio::model::series_path;
use pmdio::monitor::{merge_logs, read_profile_json, render_report, MonitorLog, ReportFormat};
use pmdio::striping::{
    estimate_write_time, map_byte_range, parse_getstripe, per_ost_load, GetstripeReport,
    StripeConfig,
};
use pmdio::workload::{run_simulation, RunSummary, SimConfig};
use pmdio::{EngineConfig, Error, Result};

#[derive(Parser)]
#[command(
    name = "pmdio",
    version,
    about = "Parallel particle-mesh I/O engine: benchmark, workload, inspection and planning tools",
    max_term_width = 100
)]
struct Cli {
    /// Size of the in-process rank group.
    #[arg(long, global = true, default_value_t = 1)]
    ranks: usize,

    /// Seed override for the workload deck or benchmark pattern.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Emit machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic parallel write/read benchmark (IOR-style).
    ///
    /// Flag lineage: --file-per-process is IOR's -F, --reorder-readback is
    /// -C, --fsync is -e; --ranks plays the role of -N tasks.
    Bench(BenchArgs),

    /// Run the particle workload from a TOML deck.
    Run(RunArgs),

    /// Print the inventory of a series: files, iterations, variables.
    Inspect {
        /// Series path (with or without the .bp4 suffix).
        path: PathBuf,
    },

    /// Merge per-rank monitor logs into an I/O cost report.
    Report {
        /// Directory holding monitor.rank<k>.json files (see `run --log-dir`).
        log_dir: PathBuf,

        /// Render CSV instead of the text table.
        #[arg(long)]
        csv: bool,
    },

    /// Parse raid0 stripe geometry and estimate write cost.
    StripePlan(StripePlanArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Bytes each task writes in total (per repetition).
    #[arg(long, default_value = "16MiB", value_parser = parse_size)]
    block_size: u64,

    /// Bytes per write call; must divide the block size.
    #[arg(long, default_value = "1MiB", value_parser = parse_size)]
    transfer_size: u64,

    /// One data file per task instead of aggregated shared files.
    #[arg(long)]
    file_per_process: bool,

    /// Each task reads back its right neighbor's block.
    #[arg(long)]
    reorder_readback: bool,

    /// fsync data files before their write handles close.
    #[arg(long)]
    fsync: bool,

    #[arg(long, default_value_t = 1)]
    repetitions: u32,

    /// Subfile count in shared mode.
    #[arg(long, default_value_t = 1)]
    num_aggregators: u32,

    /// Run once per aggregator count and print one CSV row each.
    #[arg(long, value_delimiter = ',', value_name = "M,M,...")]
    sweep_aggregators: Option<Vec<u32>>,

    /// Series path; for sweeps, a directory holding one series per count.
    #[arg(long, default_value = "pmdio_bench")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Simulation deck (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Output series path.
    #[arg(long)]
    out: PathBuf,

    /// Engine configuration file (TOML); defaults apply when absent.
    #[arg(long)]
    engine_config: Option<PathBuf>,

    /// Resume from the checkpoint in an existing series.
    #[arg(long)]
    restart: bool,

    /// Write per-rank monitor logs here for `pmdio report`.
    #[arg(long)]
    log_dir: Option<PathBuf>,
}

#[derive(Args)]
struct StripePlanArgs {
    /// Parse an `lfs getstripe`-style report from this file ('-' = stdin).
    #[arg(long)]
    getstripe: Option<PathBuf>,

    /// Stripe count when no report is given.
    #[arg(long)]
    stripe_count: Option<u32>,

    /// Stripe size when no report is given.
    #[arg(long, value_parser = parse_size)]
    stripe_size: Option<u64>,

    /// File sizes to place, e.g. 256MiB,256MiB.
    #[arg(long, value_delimiter = ',', value_parser = parse_size)]
    file_sizes: Vec<u64>,

    /// Per-OST bandwidth for the time estimate.
    #[arg(long, default_value = "1GiB", value_parser = parse_size)]
    bandwidth: u64,

    /// Per-stripe latency in microseconds for the time estimate.
    #[arg(long, default_value_t = 0.0)]
    latency_us: f64,

    /// Show the OST assignment of one byte range, as offset:length.
    #[arg(long, value_name = "OFFSET:LEN")]
    range: Option<String>,
}

fn main() {
    // Die quietly when the consumer of a pipe goes away, like other
    // line-oriented tools.
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("pmdio: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_corruption() {
        5
    } else {
        match e {
            Error::InvalidConfig(_) | Error::ParseError(_) => 3,
            _ => 4,
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Bench(ref args) => cmd_bench(&cli, args),
        Cmd::Run(ref args) => cmd_run(&cli, args),
        Cmd::Inspect { ref path } => cmd_inspect(cli.json, path),
        Cmd::Report { ref log_dir, csv } => cmd_report(cli.json, log_dir, csv),
        Cmd::StripePlan(ref args) => cmd_stripe_plan(cli.json, args),
    }
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    let spec = BenchSpec {
        tasks: cli.ranks as u32,
        mode: if args.file_per_process {
            BenchMode::FilePerProcess
        } else {
            BenchMode::Shared
        },
        block_bytes: args.block_size,
        transfer_bytes: args.transfer_size,
        reorder_readback: args.reorder_readback,
        fsync_on_close: args.fsync,
        repetitions: args.repetitions,
        num_aggregators: args.num_aggregators,
        seed: cli.seed.unwrap_or(BenchSpec::default().seed),
    };

    if let Some(counts) = &args.sweep_aggregators {
        if args.file_per_process {
            return Err(Error::InvalidConfig(
                "an aggregator sweep applies to shared mode only".into(),
            ));
        }
        let (csv, results) = bench::run_sweep(&spec, counts, &args.out)?;
        if cli.json {
            println!("{}", serde_json::to_string_pretty(&results).expect("json"));
        } else {
            print!("{csv}");
        }
        return Ok(());
    }

    let result = bench::run_bench(&spec, &args.out)?;
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&result).expect("json"));
    } else {
        print_bench_text(&result);
    }
    Ok(())
}

fn print_bench_text(r: &BenchResult) {
    println!(
        "tasks {}  mode {}  block {}  transfer {}  reps {}  aggregators {}",
        r.spec.tasks,
        r.spec.mode,
        fmt_size(r.spec.block_bytes),
        fmt_size(r.spec.transfer_bytes),
        r.spec.repetitions,
        r.spec.num_aggregators
    );
    for rep in &r.reps {
        println!(
            "rep {}: write {:.3} GiB/s (monitor {:.3})  read {:.3} GiB/s (monitor {:.3})  verified {} words",
            rep.rep,
            rep.write_gibs,
            rep.write_gibs_monitor,
            rep.read_gibs,
            rep.read_gibs_monitor,
            rep.words_verified
        );
    }
    println!(
        "max write {:.3} GiB/s  max read {:.3} GiB/s",
        r.write_gibs, r.read_gibs
    );
    println!(
        "series {}  data files {} of {}  payload {}  framed {}",
        r.series.display(),
        r.data_files,
        r.total_files,
        fmt_size(r.payload_bytes),
        fmt_size(r.frame_bytes)
    );
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<()> {
    let mut sim = SimConfig::load(&args.config)?;
    if let Some(seed) = cli.seed {
        sim.seed = seed;
    }
    let engine = match &args.engine_config {
        Some(path) => EngineConfig::load(path)?,
        None => {
            let mut cfg = EngineConfig::default();
            cfg.apply_env();
            cfg
        }
    };

    let out = args.out.clone();
    let restart = args.restart;
    let per_rank: Vec<Result<RunSummary>> = spawn_group(cli.ranks, move |group| {
        run_simulation(sim.clone(), &out, engine.clone(), &group, restart)
    })?;
    let summaries = collect_ranks(per_rank)?;

    if let Some(dir) = &args.log_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("mkdir {}", dir.display()), e))?;
        for (rank, s) in summaries.iter().enumerate() {
            let path = dir.join(format!("monitor.rank{rank}.json"));
            let text = serde_json::to_string_pretty(&s.monitor_log).expect("json");
            std::fs::write(&path, text)
                .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
        }
    }

    let s = &summaries[0];
    if cli.json {
        let doc = serde_json::json!({
            "series": s.series,
            "first_step": s.first_step,
            "last_step": s.last_step,
            "ionized_total": s.ionized_total,
            "final_counts": {
                "electrons": s.final_counts[0],
                "ions": s.final_counts[1],
                "neutrals": s.final_counts[2],
            },
            "diag_iterations": s.diag_iterations,
            "checkpoints": s.checkpoints,
            "bytes_raw": s.bytes_raw,
            "bytes_stored": s.bytes_stored,
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    } else {
        println!("series {}", s.series.display());
        println!(
            "steps {}..={}  ionized {}",
            s.first_step, s.last_step, s.ionized_total
        );
        println!(
            "final counts: e {}  D+ {}  D {}",
            s.final_counts[0], s.final_counts[1], s.final_counts[2]
        );
        println!(
            "diagnostics at {} iterations  checkpoints {}",
            s.diag_iterations.len(),
            s.checkpoints
        );
        println!(
            "payload {} raw, {} stored",
            fmt_size(s.bytes_raw),
            fmt_size(s.bytes_stored)
        );
    }
    Ok(())
}

/// Surface the most specific error a group produced: the originating
/// rank's own error beats the GroupFault echoes of its peers.
fn collect_ranks<T>(per_rank: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(per_rank.len());
    let mut first_err: Option<Error> = None;
    for r in per_rank {
        match r {
            Ok(v) => out.push(v),
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
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

fn cmd_inspect(json: bool, path: &Path) -> Result<()> {
    let dir = series_path(path);
    let inv = load_inventory(&dir)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&inventory_json(&dir, &inv)).expect("json")
        );
        return Ok(());
    }

    println!(
        "series {}  mode {}  aggregators {}  writer ranks {}",
        dir.display(),
        mode_name(inv.header.mode),
        inv.header.num_aggregators,
        inv.header.n_ranks
    );
    println!("files:");
    for f in &inv.files {
        println!("  {:<24} {:>12} B", f.name, f.bytes);
    }
    let mut vars: Vec<_> = inv.variables.values().collect();
    vars.sort_by_key(|n| n.variable_id);
    println!("variables:");
    for v in vars {
        println!(
            "  [{}] {}/{} ({})",
            v.variable_id,
            v.record_name,
            v.component_name,
            v.record_kind.name()
        );
    }
    println!("iterations:");
    for s in &inv.steps {
        let versions = if s.versions > 1 {
            format!("  ({} versions, latest kept)", s.versions)
        } else {
            String::new()
        };
        println!("  iteration {}{versions}", s.step);
        for e in &s.entries {
            let name = inv
                .variables
                .get(&e.variable_id)
                .map(|n| format!("{}/{}", n.record_name, n.component_name))
                .unwrap_or_else(|| format!("var {}", e.variable_id));
            println!(
                "    {:<28} {} {:?}  {} chunk{}",
                name,
                e.datatype.name(),
                e.global_extent,
                e.chunks.len(),
                if e.chunks.len() == 1 { "" } else { "s" }
            );
        }
        for a in &s.attributes {
            println!("    @{} = {}", a.key, attr_text(&a.value));
        }
    }
    Ok(())
}

fn mode_name(mode: EngineMode) -> &'static str {
    match mode {
        EngineMode::Aggregated => "aggregated",
        EngineMode::FilePerProcess => "file_per_process",
    }
}

fn attr_text(v: &AttrValue) -> String {
    match v {
        AttrValue::U64(x) => x.to_string(),
        AttrValue::I64(x) => x.to_string(),
        AttrValue::F32(x) => x.to_string(),
        AttrValue::F64(x) => x.to_string(),
        AttrValue::Str(s) => format!("{s:?}"),
    }
}

fn attr_json(v: &AttrValue) -> serde_json::Value {
    match v {
        AttrValue::U64(x) => serde_json::json!(x),
        AttrValue::I64(x) => serde_json::json!(x),
        AttrValue::F32(x) => serde_json::json!(x),
        AttrValue::F64(x) => serde_json::json!(x),
        AttrValue::Str(s) => serde_json::json!(s),
    }
}

fn inventory_json(dir: &Path, inv: &SeriesInventory) -> serde_json::Value {
    let mut vars: Vec<_> = inv.variables.values().collect();
    vars.sort_by_key(|n| n.variable_id);
    serde_json::json!({
        "series": dir,
        "mode": mode_name(inv.header.mode),
        "num_aggregators": inv.header.num_aggregators,
        "writer_ranks": inv.header.n_ranks,
        "files": inv.files.iter().map(|f| serde_json::json!({
            "name": f.name,
            "bytes": f.bytes,
        })).collect::<Vec<_>>(),
        "variables": vars.iter().map(|v| serde_json::json!({
            "id": v.variable_id,
            "record": v.record_name,
            "component": v.component_name,
            "kind": v.record_kind.name(),
        })).collect::<Vec<_>>(),
        "iterations": inv.steps.iter().map(|s| serde_json::json!({
            "iteration": s.step,
            "versions": s.versions,
            "entries": s.entries.iter().map(|e| serde_json::json!({
                "variable_id": e.variable_id,
                "datatype": e.datatype.name(),
                "global_extent": e.global_extent,
                "chunks": e.chunks.len(),
            })).collect::<Vec<_>>(),
            "attributes": s.attributes.iter().map(|a| serde_json::json!({
                "key": a.key,
                "value": attr_json(&a.value),
            })).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    })
}

fn cmd_report(json: bool, log_dir: &Path, csv: bool) -> Result<()> {
    let logs = read_monitor_logs(log_dir)?;
    let report = merge_logs(&logs);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    } else {
        let format = if csv { ReportFormat::Csv } else { ReportFormat::Text };
        print!("{}", render_report(&report, format));
        if !csv {
            // The engine's own profile, if the logs sit next to one.
            let prof = log_dir.join("profiling.json");
            if prof.is_file() {
                if let Ok(timers) = read_profile_json(&prof) {
                    println!("profiling.json timers:");
                    for t in timers {
                        println!(
                            "  rank {}: {} B written, meta {:.1}us write {:.1}us memcpy {:.1}us compress {:.1}us",
                            t.rank, t.bytes_written, t.meta_us, t.write_us, t.memcpy_us, t.compress_us
                        );
                    }
                }
            }
        }
    }
    Ok(())
}

fn read_monitor_logs(dir: &Path) -> Result<Vec<MonitorLog>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("read log dir {}", dir.display()), e))?;
    let mut logs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io("read log dir entry", e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !(name.starts_with("monitor.rank") && name.ends_with(".json")) {
            continue;
        }
        let text = std::fs::read_to_string(entry.path())
            .map_err(|e| Error::io(format!("read {name}"), e))?;
        let log: MonitorLog = serde_json::from_str(&text)
            .map_err(|e| Error::ParseError(format!("{name}: {e}")))?;
        logs.push(log);
    }
    if logs.is_empty() {
        return Err(Error::io(
            format!("no monitor.rank<k>.json logs in {}", dir.display()),
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    logs.sort_by_key(|l| l.rank);
    Ok(logs)
}

fn cmd_stripe_plan(json: bool, args: &StripePlanArgs) -> Result<()> {
    let (config, parsed): (StripeConfig, Option<GetstripeReport>) = match &args.getstripe {
        Some(path) => {
            let text = if path.as_os_str() == "-" {
                use std::io::Read as _;
                let mut buf = String::new();
                std::io::stdin()
                    .read_to_string(&mut buf)
                    .map_err(|e| Error::io("read stdin", e))?;
                buf
            } else {
                std::fs::read_to_string(path)
                    .map_err(|e| Error::io(format!("read {}", path.display()), e))?
            };
            let report = parse_getstripe(&text)?;
            (report.config.clone(), Some(report))
        }
        None => {
            let count = args.stripe_count.ok_or_else(|| {
                Error::InvalidConfig("need --getstripe or --stripe-count/--stripe-size".into())
            })?;
            let size = args.stripe_size.ok_or_else(|| {
                Error::InvalidConfig("need --stripe-size alongside --stripe-count".into())
            })?;
            (StripeConfig::new(count, size)?, None)
        }
    };

    let range = args
        .range
        .as_deref()
        .map(parse_range)
        .transpose()?
        .map(|(off, len)| map_byte_range(&config, off, len))
        .transpose()?;

    let loads = if args.file_sizes.len() == 1 {
        Some(per_ost_load(&config, args.file_sizes[0])?)
    } else {
        None
    };
    let estimate = if args.file_sizes.is_empty() {
        None
    } else {
        Some(estimate_write_time(
            &config,
            &args.file_sizes,
            args.bandwidth as f64,
            args.latency_us * 1e-6,
        )?)
    };

    if json {
        let doc = serde_json::json!({
            "stripe_count": config.stripe_count,
            "stripe_size": config.stripe_size,
            "ost_ids": config.ost_ids,
            "pattern": parsed.as_ref().map(|p| p.pattern.clone()),
            "per_ost_bytes": loads,
            "estimated_seconds": estimate,
            "range_segments": range.as_ref().map(|a| a.segments.iter().map(|s| serde_json::json!({
                "ost_slot": s.ost_slot,
                "within_stripe": s.within_stripe,
                "length": s.length,
            })).collect::<Vec<_>>()),
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
        return Ok(());
    }

    println!(
        "stripe_count {}  stripe_size {}",
        config.stripe_count,
        fmt_size(config.stripe_size)
    );
    if let Some(p) = &parsed {
        println!("pattern {}  layout_gen {}  objects {}", p.pattern, p.layout_gen, p.objects.len());
    }
    if let Some(a) = &range {
        println!("range covers {} segments:", a.segments.len());
        for s in &a.segments {
            println!(
                "  slot {}  +{} within stripe  {} bytes",
                s.ost_slot, s.within_stripe, s.length
            );
        }
    }
    if let Some(loads) = &loads {
        println!("per-OST load:");
        for (k, b) in loads.iter().enumerate() {
            println!("  slot {k}: {}", fmt_size(*b));
        }
    }
    if let Some(t) = estimate {
        println!(
            "estimated write time for {} file(s): {:.6} s",
            args.file_sizes.len(),
            t
        );
    }
    Ok(())
}

fn parse_range(s: &str) -> Result<(u64, u64)> {
    let (off, len) = s
        .split_once(':')
        .ok_or_else(|| Error::InvalidConfig(format!("range {s:?} is not OFFSET:LEN")))?;
    Ok((parse_size(off)?, parse_size(len)?))
}

/// Parse a byte size: a plain integer with an optional B/KiB/MiB/GiB suffix
/// (k/m/g shorthand accepted, case-insensitive).
fn parse_size(s: &str) -> Result<u64> {
    let t = s.trim();
    let split = t
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(t.len());
    let (digits, suffix) = t.split_at(split);
    let n: u64 = digits
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("size {s:?}: no leading integer")))?;
    let shift = match suffix.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kib" => 10,
        "m" | "mib" => 20,
        "g" | "gib" => 30,
        other => {
            return Err(Error::InvalidConfig(format!(
                "size suffix {other:?} (expected B, KiB, MiB or GiB)"
            )))
        }
    };
    n.checked_shl(shift)
        .filter(|v| v >> shift == n)
        .ok_or_else(|| Error::InvalidConfig(format!("size {s:?} overflows")))
}

fn fmt_size(bytes: u64) -> String {
    if bytes >= (1 << 30) && bytes % (1 << 30) == 0 {
        format!("{}GiB", bytes >> 30)
    } else if bytes >= (1 << 20) && bytes % (1 << 20) == 0 {
        format!("{}MiB", bytes >> 20)
    } else if bytes >= (1 << 10) && bytes % (1 << 10) == 0 {
        format!("{}KiB", bytes >> 10)
    } else {
        format!("{bytes}B")
    }
}
