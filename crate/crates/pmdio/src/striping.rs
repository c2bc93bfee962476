//! raid0 striping math, a two-parameter write-time model, and a parser for
//! `lfs getstripe` output.
//!
//! The layout law is the usual one: byte `b` of a file lands on OST slot
//! `(b / S) mod c` for stripe size `S` and stripe count `c`. Slots are
//! file-relative; a concrete file additionally has a starting OST (its
//! `lmm_stripe_offset`) and one object per touched OST.
//!
//! The time model charges each slot `bytes / B` for bandwidth plus `L` per
//! stripe it handles, and takes the slowest slot. When several files are
//! written concurrently, each file's starting slot is a deterministic hash
//! of its index, standing in for the allocator's per-file object placement;
//! collisions are what make "more OSTs" occasionally slower once latency
//! dominates.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const MIN_STRIPE_SIZE: u64 = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StripeConfig {
    pub stripe_count: u32,
    pub stripe_size: u64,
    /// Explicit OST ids, one per slot, when known (e.g. parsed output).
    pub ost_ids: Option<Vec<u32>>,
}

impl StripeConfig {
    pub fn new(stripe_count: u32, stripe_size: u64) -> Result<Self> {
        let cfg = StripeConfig {
            stripe_count,
            stripe_size,
            ost_ids: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stripe_count == 0 {
            return Err(Error::InvalidConfig("stripe_count must be >= 1".into()));
        }
        if !self.stripe_size.is_power_of_two() || self.stripe_size < MIN_STRIPE_SIZE {
            return Err(Error::InvalidConfig(format!(
                "stripe_size must be a power of two >= 64 KiB, got {}",
                self.stripe_size
            )));
        }
        if let Some(ids) = &self.ost_ids {
            if ids.len() != self.stripe_count as usize {
                return Err(Error::InvalidConfig(format!(
                    "{} OST ids for stripe_count {}",
                    ids.len(),
                    self.stripe_count
                )));
            }
        }
        Ok(())
    }
}

/// One contiguous piece of a byte range on a single slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StripeSegment {
    pub ost_slot: u32,
    /// Offset of the segment start within its stripe.
    pub within_stripe: u64,
    pub length: u64,
}

/// Where the bytes `[offset, offset + len)` of a file land.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OstAssignment {
    pub segments: Vec<StripeSegment>,
}

impl OstAssignment {
    pub fn total_len(&self) -> u64 {
        self.segments.iter().map(|s| s.length).sum()
    }
}

/// Split a file byte range at stripe boundaries and assign each piece.
pub fn map_byte_range(cfg: &StripeConfig, offset: u64, len: u64) -> Result<OstAssignment> {
    cfg.validate()?;
    let s = cfg.stripe_size;
    let c = cfg.stripe_count as u64;
    let mut segments = Vec::new();
    let mut pos = offset;
    let end = offset
        .checked_add(len)
        .ok_or_else(|| Error::InvalidExtent("byte range overflows".into()))?;
    while pos < end {
        let stripe = pos / s;
        let within = pos % s;
        let take = (s - within).min(end - pos);
        segments.push(StripeSegment {
            ost_slot: (stripe % c) as u32,
            within_stripe: within,
            length: take,
        });
        pos += take;
    }
    Ok(OstAssignment { segments })
}

/// Bytes each slot receives for a file of `file_size`, starting at slot 0.
pub fn per_ost_load(cfg: &StripeConfig, file_size: u64) -> Result<Vec<u64>> {
    per_ost_load_from(cfg, file_size, 0)
}

fn per_ost_load_from(cfg: &StripeConfig, file_size: u64, start_slot: u32) -> Result<Vec<u64>> {
    cfg.validate()?;
    let s = cfg.stripe_size;
    let c = cfg.stripe_count as u64;
    let full = file_size / s;
    let rem = file_size % s;
    let mut loads = vec![0u64; c as usize];
    for k in 0..c {
        let count = full / c + u64::from(k < full % c);
        loads[((k + start_slot as u64) % c) as usize] = count * s;
    }
    if rem > 0 {
        loads[((full + start_slot as u64) % c) as usize] += rem;
    }
    Ok(loads)
}

fn per_ost_stripes_from(cfg: &StripeConfig, file_size: u64, start_slot: u32) -> Vec<u64> {
    let s = cfg.stripe_size;
    let c = cfg.stripe_count as u64;
    let stripes = file_size.div_ceil(s);
    let mut counts = vec![0u64; c as usize];
    for k in 0..c {
        counts[((k + start_slot as u64) % c) as usize] = stripes / c + u64::from(k < stripes % c);
    }
    counts
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Starting slot for the f-th concurrently written file.
pub fn file_start_slot(cfg: &StripeConfig, file_index: usize) -> u32 {
    (splitmix64(file_index as u64) % cfg.stripe_count as u64) as u32
}

/// Estimated seconds to write `file_sizes` concurrently.
///
/// `ost_bandwidth` is bytes per second per OST; `per_stripe_latency` is
/// seconds charged per (file, stripe) a slot handles. The estimate is the
/// slowest slot's `bytes / B + stripes * L`.
pub fn estimate_write_time(
    cfg: &StripeConfig,
    file_sizes: &[u64],
    ost_bandwidth: f64,
    per_stripe_latency: f64,
) -> Result<f64> {
    cfg.validate()?;
    if !(ost_bandwidth > 0.0) {
        return Err(Error::InvalidConfig("ost_bandwidth must be > 0".into()));
    }
    if per_stripe_latency < 0.0 {
        return Err(Error::InvalidConfig("per_stripe_latency must be >= 0".into()));
    }
    let c = cfg.stripe_count as usize;
    let mut bytes = vec![0u64; c];
    let mut stripes = vec![0u64; c];
    for (f, &size) in file_sizes.iter().enumerate() {
        let start = if file_sizes.len() == 1 {
            0
        } else {
            file_start_slot(cfg, f)
        };
        for (slot, b) in per_ost_load_from(cfg, size, start)?.into_iter().enumerate() {
            bytes[slot] += b;
        }
        for (slot, n) in per_ost_stripes_from(cfg, size, start).into_iter().enumerate() {
            stripes[slot] += n;
        }
    }
    let mut worst = 0.0f64;
    for k in 0..c {
        let t = bytes[k] as f64 / ost_bandwidth + stripes[k] as f64 * per_stripe_latency;
        worst = worst.max(t);
    }
    Ok(worst)
}

/// Parsed `lfs getstripe` report for one file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetstripeReport {
    pub path: Option<String>,
    pub config: StripeConfig,
    pub pattern: String,
    pub layout_gen: u32,
    pub stripe_offset: u32,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectEntry {
    pub obdidx: u32,
    pub objid: u64,
    pub group: u64,
}

/// Parse the text `lfs getstripe <file>` prints.
///
/// Expected shape: an optional path line, the `lmm_*` key/value lines, then
/// an object table with columns obdidx / objid / objid(hex) / group.
pub fn parse_getstripe(text: &str) -> Result<GetstripeReport> {
    let mut path = None;
    let mut stripe_count = None;
    let mut stripe_size = None;
    let mut pattern = None;
    let mut layout_gen = None;
    let mut stripe_offset = None;
    let mut objects = Vec::new();
    let mut in_table = false;

    let missing = |field: &str| Error::ParseError(format!("getstripe output missing {field}"));
    let bad = |field: &str, v: &str| Error::ParseError(format!("bad {field} value {v:?}"));

    for line in text.lines() {
        let line = line.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        if let Some((key, value)) = line.split_once(':') {
            let key = key.trim();
            let value = value.trim();
            match key {
                "lmm_stripe_count" => {
                    stripe_count =
                        Some(value.parse::<u32>().map_err(|_| bad(key, value))?)
                }
                "lmm_stripe_size" => {
                    stripe_size = Some(value.parse::<u64>().map_err(|_| bad(key, value))?)
                }
                "lmm_pattern" => pattern = Some(value.to_string()),
                "lmm_layout_gen" => {
                    layout_gen = Some(value.parse::<u32>().map_err(|_| bad(key, value))?)
                }
                "lmm_stripe_offset" => {
                    stripe_offset = Some(value.parse::<u32>().map_err(|_| bad(key, value))?)
                }
                _ if key.starts_with("lmm_") => {}
                _ => {
                    if !in_table && path.is_none() {
                        path = Some(line.trim().to_string());
                    }
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields == ["obdidx", "objid", "objid", "group"] {
            in_table = true;
            continue;
        }
        if in_table && fields.len() == 4 {
            let obdidx = fields[0]
                .parse::<u32>()
                .map_err(|_| bad("obdidx", fields[0]))?;
            let objid = fields[1]
                .parse::<u64>()
                .map_err(|_| bad("objid", fields[1]))?;
            let hex = fields[2]
                .strip_prefix("0x")
                .ok_or_else(|| bad("objid hex", fields[2]))?;
            let objid_hex = u64::from_str_radix(hex, 16).map_err(|_| bad("objid hex", fields[2]))?;
            if objid_hex != objid {
                return Err(Error::ParseError(format!(
                    "objid columns disagree: {objid} vs {:#x}",
                    objid_hex
                )));
            }
            let group_str = fields[3].strip_prefix("0x").unwrap_or(fields[3]);
            let radix = if fields[3].starts_with("0x") { 16 } else { 10 };
            let group =
                u64::from_str_radix(group_str, radix).map_err(|_| bad("group", fields[3]))?;
            objects.push(ObjectEntry { obdidx, objid, group });
            continue;
        }
        if path.is_none() && !in_table {
            path = Some(line.trim().to_string());
        }
    }

    let pattern = pattern.ok_or_else(|| missing("lmm_pattern"))?;
    if pattern != "raid0" {
        return Err(Error::ParseError(format!(
            "unsupported layout pattern {pattern:?}, expected raid0"
        )));
    }
    let stripe_count = stripe_count.ok_or_else(|| missing("lmm_stripe_count"))?;
    let stripe_size = stripe_size.ok_or_else(|| missing("lmm_stripe_size"))?;
    if !objects.is_empty() && objects.len() != stripe_count as usize {
        return Err(Error::ParseError(format!(
            "object table has {} rows for stripe_count {}",
            objects.len(),
            stripe_count
        )));
    }
    let config = StripeConfig {
        stripe_count,
        stripe_size,
        ost_ids: if objects.is_empty() {
            None
        } else {
            Some(objects.iter().map(|o| o.obdidx).collect())
        },
    };
    config.validate()?;
    Ok(GetstripeReport {
        path,
        config,
        pattern,
        layout_gen: layout_gen.ok_or_else(|| missing("lmm_layout_gen"))?,
        stripe_offset: stripe_offset.ok_or_else(|| missing("lmm_stripe_offset"))?,
        objects,
    })
}

/// Render a report in the same shape `lfs getstripe` prints, so that
/// `parse_getstripe(render_getstripe(r)) == r`.
pub fn render_getstripe(report: &GetstripeReport) -> String {
    let mut out = String::new();
    if let Some(path) = &report.path {
        let _ = writeln!(out, "{path}");
    }
    let _ = writeln!(out, "lmm_stripe_count:  {}", report.config.stripe_count);
    let _ = writeln!(out, "lmm_stripe_size:   {}", report.config.stripe_size);
    let _ = writeln!(out, "lmm_pattern:       {}", report.pattern);
    let _ = writeln!(out, "lmm_layout_gen:    {}", report.layout_gen);
    let _ = writeln!(out, "lmm_stripe_offset: {}", report.stripe_offset);
    if !report.objects.is_empty() {
        let _ = writeln!(
            out,
            "\t{:>6} {:>15} {:>15} {:>15}",
            "obdidx", "objid", "objid", "group"
        );
        for o in &report.objects {
            let _ = writeln!(
                out,
                "\t{:>6} {:>15} {:>15} {:>15}",
                o.obdidx,
                o.objid,
                format!("{:#x}", o.objid),
                format!("{:#x}", o.group)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: u32, s: u64) -> StripeConfig {
        StripeConfig::new(c, s).unwrap()
    }

    /// Byte-at-a-time oracle for the raid0 law.
    fn brute_force_slots(c: u32, s: u64, offset: u64, len: u64) -> Vec<u32> {
        (offset..offset + len)
            .map(|b| ((b / s) % c as u64) as u32)
            .collect()
    }

    #[test]
    fn range_crossing_one_boundary_splits_in_two() {
        let a = map_byte_range(&cfg(4, 1 << 20), (1 << 20) - 4096, 8192).unwrap();
        assert_eq!(a.segments.len(), 2);
        assert_eq!(a.segments[0].ost_slot, 0);
        assert_eq!(a.segments[0].length, 4096);
        assert_eq!(a.segments[1].ost_slot, 1);
        assert_eq!(a.segments[1].within_stripe, 0);
        assert_eq!(a.segments[1].length, 4096);
    }

    #[test]
    fn segments_agree_with_byte_oracle() {
        let c = 3;
        let s = 64 * 1024;
        let offset = 5 * s + 1234;
        let len = 4 * s - 99;
        let a = map_byte_range(&cfg(c, s), offset, len).unwrap();
        assert_eq!(a.total_len(), len);
        let oracle = brute_force_slots(c, s, offset, len);
        let mut i = 0usize;
        for seg in &a.segments {
            for _ in 0..seg.length {
                assert_eq!(oracle[i], seg.ost_slot);
                i += 1;
            }
        }
    }

    #[test]
    fn empty_range_maps_to_nothing() {
        let a = map_byte_range(&cfg(8, 1 << 20), 12345, 0).unwrap();
        assert!(a.segments.is_empty());
    }

    #[test]
    fn per_ost_load_even_file() {
        // 128 MiB over 8 OSTs at 16 MiB stripes: one stripe each.
        let loads = per_ost_load(&cfg(8, 16 << 20), 128 << 20).unwrap();
        assert_eq!(loads, vec![16 << 20; 8]);
    }

    #[test]
    fn per_ost_load_remainder() {
        // 20 MiB at 16 MiB stripes over 8 slots: 16 MiB on slot 0, 4 on slot 1.
        let loads = per_ost_load(&cfg(8, 16 << 20), 20 << 20).unwrap();
        assert_eq!(loads[0], 16 << 20);
        assert_eq!(loads[1], 4 << 20);
        assert!(loads[2..].iter().all(|&l| l == 0));
    }

    #[test]
    fn load_partition_laws() {
        // Loads sum to the file size and spread within one stripe size.
        let mut x = 1u64;
        for _ in 0..500 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let c = 1 + (x % 16) as u32;
            let s = MIN_STRIPE_SIZE << (x >> 8) % 9;
            let size = (x >> 16) % (1 << 28);
            let loads = per_ost_load(&cfg(c, s), size).unwrap();
            assert_eq!(loads.iter().sum::<u64>(), size);
            let max = *loads.iter().max().unwrap();
            let min = *loads.iter().min().unwrap();
            assert!(max - min <= s, "c={c} s={s} size={size}");
        }
    }

    #[test]
    fn estimate_single_file_bandwidth_only() {
        let gib = (1u64 << 30) as f64;
        // 128 MiB, 8 OSTs, 16 MiB stripes, 1 GiB/s, no latency.
        let t = estimate_write_time(&cfg(8, 16 << 20), &[128 << 20], gib, 0.0).unwrap();
        assert!((t - 0.015625).abs() < 1e-12, "{t}");
        // Same file on one OST: 8x slower.
        let t1 = estimate_write_time(&cfg(1, 16 << 20), &[128 << 20], gib, 0.0).unwrap();
        assert!((t1 - 0.125).abs() < 1e-12, "{t1}");
    }

    #[test]
    fn estimate_monotone_in_bandwidth_and_latency() {
        let sizes = [100 << 20, 3 << 20];
        let t_slow = estimate_write_time(&cfg(4, 1 << 20), &sizes, 1e8, 1e-3).unwrap();
        let t_fast = estimate_write_time(&cfg(4, 1 << 20), &sizes, 2e8, 1e-3).unwrap();
        assert!(t_fast <= t_slow);
        let t_latency = estimate_write_time(&cfg(4, 1 << 20), &sizes, 1e8, 2e-3).unwrap();
        assert!(t_latency >= t_slow);
    }

    #[test]
    fn single_file_never_slower_with_more_osts_at_zero_latency() {
        for c in 1..16u32 {
            let a = estimate_write_time(&cfg(c, 1 << 20), &[333 << 20], 1e9, 0.0).unwrap();
            let b = estimate_write_time(&cfg(c + 1, 1 << 20), &[333 << 20], 1e9, 0.0).unwrap();
            assert!(b <= a + 1e-15, "c={c}: {a} -> {b}");
        }
    }

    #[test]
    fn latency_dominant_regime_can_worsen_with_more_osts() {
        // Two single-stripe files whose hashed starting slots collide at
        // some width but not the one before it.
        let sizes = [1 << 20, 1 << 20];
        let mut found = false;
        for c in 2..12u32 {
            let t0 = estimate_write_time(&cfg(c, 1 << 20), &sizes, 1e12, 1.0).unwrap();
            let t1 = estimate_write_time(&cfg(c + 1, 1 << 20), &sizes, 1e12, 1.0).unwrap();
            if t1 > t0 {
                found = true;
                break;
            }
        }
        assert!(found, "no widening step increased the estimate");
    }

    const LISTING: &str = "io_openPMD/dat_file.bp4/data.0\n\
lmm_stripe_count:  8\n\
lmm_stripe_size:   16777216\n\
lmm_pattern:       raid0\n\
lmm_layout_gen:    0\n\
lmm_stripe_offset: 17\n\
\tobdidx\t\t objid\t\t objid\t\t group\n\
\t    17\t      297315680\t    0x11b8ad60\t   0x700000400\n\
\t    19\t      297328387\t    0x11b8df03\t   0x740000400\n\
\t    21\t      297317055\t    0x11b8b2bf\t   0x780000400\n\
\t    23\t      297328544\t    0x11b8dfa0\t   0x7c0000400\n\
\t    25\t      297317592\t    0x11b8b4d8\t   0x800000400\n\
\t    27\t      297332431\t    0x11b8eecf\t   0x840000400\n\
\t    29\t      297319445\t    0x11b8bc15\t   0x880000400\n\
\t    31\t      297330862\t    0x11b8e8ae\t   0x8c0000400\n";

    #[test]
    fn parses_real_getstripe_output() {
        let r = parse_getstripe(LISTING).unwrap();
        assert_eq!(r.path.as_deref(), Some("io_openPMD/dat_file.bp4/data.0"));
        assert_eq!(r.config.stripe_count, 8);
        assert_eq!(r.config.stripe_size, 16_777_216);
        assert_eq!(r.pattern, "raid0");
        assert_eq!(r.layout_gen, 0);
        assert_eq!(r.stripe_offset, 17);
        assert_eq!(
            r.config.ost_ids.as_deref(),
            Some(&[17u32, 19, 21, 23, 25, 27, 29, 31][..])
        );
        assert_eq!(r.objects[0].objid, 297_315_680);
        assert_eq!(r.objects[0].group, 0x700000400);
    }

    #[test]
    fn render_parse_round_trip() {
        let r = parse_getstripe(LISTING).unwrap();
        let rendered = render_getstripe(&r);
        let back = parse_getstripe(&rendered).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn missing_pattern_field_is_an_error() {
        let text = "lmm_stripe_count:  8\nlmm_stripe_size:   16777216\n\
lmm_layout_gen:    0\nlmm_stripe_offset: 17\n";
        let err = parse_getstripe(text).unwrap_err();
        assert!(err.to_string().contains("lmm_pattern"), "{err}");
    }

    #[test]
    fn non_raid0_pattern_rejected() {
        let text = "lmm_stripe_count:  2\nlmm_stripe_size:   1048576\n\
lmm_pattern:       mdt\nlmm_layout_gen:    0\nlmm_stripe_offset: 0\n";
        assert!(parse_getstripe(text).is_err());
    }

    #[test]
    fn invalid_stripe_size_rejected() {
        assert!(StripeConfig::new(4, 1000).is_err());
        assert!(StripeConfig::new(4, 32 * 1024).is_err());
        assert!(StripeConfig::new(0, 1 << 20).is_err());
    }
}
