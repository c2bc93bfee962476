//! Property tests for the pure layers: wire formats, codecs, striping
//! arithmetic, collective sums, and monitor merging.

use proptest::prelude::*;

use pmdio::codecs::{self, CodecConfig};
use pmdio::comm::spawn_group;
use pmdio::engine::layout::{align8, ChunkHeader};
use pmdio::model::{bytes_of, elements_from};
use pmdio::monitor::{merge_logs, MonitorLog, Op, OpRecord};
use pmdio::striping::{map_byte_range, per_ost_load, parse_getstripe, render_getstripe};
use pmdio::striping::{GetstripeReport, ObjectEntry, StripeConfig};

fn stripe_cfg() -> impl Strategy<Value = StripeConfig> {
    (1u32..=16, 16u32..=24).prop_map(|(c, e)| StripeConfig::new(c, 1u64 << e).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn collective_sums_match_sequential_scan(values in prop::collection::vec(0u64..1 << 40, 1..=6)) {
        let n = values.len();
        let vals = values.clone();
        let got = spawn_group(n, move |g| {
            let v = vals[g.rank()];
            (g.exclusive_prefix_sum(v).unwrap(), g.all_reduce_sum(v).unwrap())
        })
        .unwrap();

        let total: u64 = values.iter().sum();
        let mut running = 0u64;
        for (rank, &(prefix, sum)) in got.iter().enumerate() {
            prop_assert_eq!(prefix, running);
            prop_assert_eq!(sum, total);
            running += values[rank];
        }
    }

    #[test]
    fn codecs_round_trip_arbitrary_buffers(
        raw in prop::collection::vec(any::<u8>(), 0..2048),
        codec_id in 0u16..=2,
        level in 0u8..=9,
        shuffle in any::<bool>(),
        elem in prop::sample::select(vec![1usize, 2, 4, 8]),
    ) {
        let cfg = CodecConfig { codec_id, level, shuffle };
        let stored = codecs::compress_block(cfg, elem, &raw).unwrap();
        let back = codecs::decompress_block(codec_id, &stored, raw.len()).unwrap();
        prop_assert_eq!(back, raw);
    }

    #[test]
    fn element_bytes_round_trip(words in prop::collection::vec(any::<u64>(), 0..512)) {
        let bytes = bytes_of(&words);
        prop_assert_eq!(bytes.len(), words.len() * 8);
        prop_assert_eq!(&elements_from::<u64>(&bytes), &words);

        let floats: Vec<f64> = words.iter().map(|w| f64::from_bits(*w)).collect();
        let fb = bytes_of(&floats);
        prop_assert_eq!(&fb, &bytes);
        let back = elements_from::<f64>(&fb);
        for (a, b) in back.iter().zip(floats.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn chunk_header_round_trips(
        codec_id in 0u16..=2,
        variable_id in any::<u32>(),
        step in any::<u64>(),
        dims in prop::collection::vec((0u64..1 << 30, 0u64..1 << 30), 1..=3),
        stored_len in 0u64..1 << 20,
        checksum in any::<u32>(),
    ) {
        let header = ChunkHeader {
            codec_id,
            variable_id,
            step,
            offset: dims.iter().map(|d| d.0).collect(),
            extent: dims.iter().map(|d| d.1).collect(),
            raw_len: stored_len + 7,
            stored_len,
            checksum,
        };
        let buf = header.encode();
        prop_assert_eq!(buf.len() as u64, ChunkHeader::encoded_len(dims.len()));
        prop_assert_eq!(buf.len() % 8, 0);
        prop_assert_eq!(header.frame_len(), buf.len() as u64 + align8(stored_len));
        let back = ChunkHeader::decode(&buf, |r| pmdio::Error::ParseError(r)).unwrap();
        prop_assert_eq!(back, header);
    }

    #[test]
    fn stripe_map_matches_per_byte_arithmetic(
        cfg in stripe_cfg(),
        offset in 0u64..1 << 40,
        len in 0u64..4096,
    ) {
        let asn = map_byte_range(&cfg, offset, len).unwrap();
        prop_assert_eq!(asn.total_len(), len);

        let s = cfg.stripe_size;
        let c = cfg.stripe_count as u64;
        let mut byte = offset;
        for seg in &asn.segments {
            prop_assert!(seg.length > 0);
            prop_assert_eq!(seg.ost_slot as u64, (byte / s) % c);
            prop_assert_eq!(seg.within_stripe, byte % s);
            // A segment never crosses a stripe boundary.
            prop_assert!(seg.within_stripe + seg.length <= s);
            byte += seg.length;
        }
        prop_assert_eq!(byte, offset + len);
    }

    #[test]
    fn per_ost_load_partitions_the_file(cfg in stripe_cfg(), size in 0u64..1 << 34) {
        let loads = per_ost_load(&cfg, size).unwrap();
        prop_assert_eq!(loads.len(), cfg.stripe_count as usize);
        prop_assert_eq!(loads.iter().sum::<u64>(), size);
        // Round-robin keeps slots within one stripe of each other.
        let hi = loads.iter().max().copied().unwrap_or(0);
        let lo = loads.iter().min().copied().unwrap_or(0);
        prop_assert!(hi - lo <= cfg.stripe_size);
    }

    #[test]
    fn getstripe_report_survives_render_parse(
        count in 1u32..=16,
        size_exp in 16u32..=24,
        layout_gen in 0u32..1000,
        stripe_offset in 0u32..64,
        seed in any::<u64>(),
    ) {
        let objects: Vec<ObjectEntry> = (0..count)
            .map(|i| ObjectEntry {
                obdidx: stripe_offset + i * 2,
                objid: seed.wrapping_mul(i as u64 + 1) & 0xFFFF_FFFF,
                group: (i as u64) << 32,
            })
            .collect();
        let mut config = StripeConfig::new(count, 1u64 << size_exp).unwrap();
        config.ost_ids = Some(objects.iter().map(|o| o.obdidx).collect());
        let report = GetstripeReport {
            path: Some(format!("series.bp4/data.{}", seed % 10)),
            config,
            pattern: "raid0".to_string(),
            layout_gen,
            stripe_offset,
            objects,
        };
        let text = render_getstripe(&report);
        let back = parse_getstripe(&text).unwrap();
        prop_assert_eq!(back, report);
    }

    #[test]
    fn monitor_merge_is_order_independent(
        specs in prop::collection::vec(
            prop::collection::vec((0usize..8, 0u64..1 << 20, 0u64..1 << 30, 0u64..1 << 10), 0..20),
            1..=4,
        )
    ) {
        let ops = [Op::Open, Op::Close, Op::Seek, Op::Append, Op::Read, Op::Stat, Op::Fsync, Op::Memcpy];
        let logs: Vec<MonitorLog> = specs
            .iter()
            .enumerate()
            .map(|(rank, recs)| {
                let mut log = MonitorLog::new(rank);
                for &(op_idx, bytes, t0, dt) in recs {
                    let op = ops[op_idx];
                    log.records.push(OpRecord {
                        rank,
                        category: op.category(),
                        op,
                        bytes,
                        t_start_ns: t0,
                        t_end_ns: t0 + dt,
                    });
                }
                log
            })
            .collect();

        let forward = merge_logs(&logs);
        let mut reversed: Vec<MonitorLog> = logs.clone();
        reversed.reverse();
        let backward = merge_logs(&reversed);
        prop_assert_eq!(
            serde_json::to_value(&forward).unwrap(),
            serde_json::to_value(&backward).unwrap()
        );
    }
}
