//! End-to-end series tests: write through the model, read back, and check
//! the on-disk consequences (file census, commit protocol, supersede).

use pmdio::comm::{spawn_group, RankGroup};
use pmdio::config::{AggSetting, EngineConfig};
use pmdio::engine::layout::{AttrValue, EngineMode, RecordKind};
use pmdio::model::Series;
use pmdio::Error;

fn cfg_with(num_agg: u32) -> EngineConfig {
    EngineConfig {
        num_aggregators: AggSetting::Count(num_agg),
        ..EngineConfig::default()
    }
}

#[test]
fn solo_mesh_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("alpha");
    let group = RankGroup::solo();

    let mut s = Series::create(&path, &group, cfg_with(1)).unwrap();
    s.begin_iteration(1).unwrap();
    s.define_mesh::<f64>("density", "e", &[16]).unwrap();
    let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.5).collect();
    s.store_chunk("density", "e", &[0], &[16], &data).unwrap();
    let stats = s.close_iteration().unwrap();
    assert_eq!(stats.chunk_count, 1);
    assert_eq!(stats.bytes_raw, 128);
    s.close().unwrap();

    let mut r = Series::open_read(&path).unwrap();
    assert_eq!(r.iterations().unwrap(), vec![1]);
    let (extent, back) = r
        .read_component::<f64>(1, "density", "e", None)
        .unwrap();
    assert_eq!(extent, vec![16]);
    assert_eq!(back, data);
}

#[test]
fn four_ranks_two_aggregators_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("beta");
    let p = path.clone();

    spawn_group(4, move |g| {
        let mut s = Series::create(&p, &g, cfg_with(2)).unwrap();
        for step in 1..=3u64 {
            s.begin_iteration(step).unwrap();
            s.define_mesh::<f64>("density", "e", &[64]).unwrap();
            let lo = g.rank() as u64 * 16;
            let data: Vec<f64> = (0..16)
                .map(|i| (step * 1000 + lo + i) as f64)
                .collect();
            s.store_chunk("density", "e", &[lo], &[16], &data).unwrap();
            s.close_iteration().unwrap();
        }
        s.close().unwrap();
    })
    .unwrap();

    let mut r = Series::open_read(&path).unwrap();
    assert_eq!(r.iterations().unwrap(), vec![1, 2, 3]);
    for step in 1..=3u64 {
        let (extent, back) = r
            .read_component::<f64>(step, "density", "e", None)
            .unwrap();
        assert_eq!(extent, vec![64]);
        let want: Vec<f64> = (0..64).map(|i| (step * 1000 + i) as f64).collect();
        assert_eq!(back, want);
    }

    // Census: two subfiles, md.0, md.idx, profiling.json.
    let inv = r.inventory().unwrap();
    let names: Vec<&str> = inv.files.iter().map(|f| f.name.as_str()).collect();
    assert_eq!(names, vec!["data.0", "data.1", "md.0", "md.idx", "profiling.json"]);
}

#[test]
fn box_selection_reads_subset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gamma");
    let group = RankGroup::solo();

    let mut s = Series::create(&path, &group, cfg_with(1)).unwrap();
    s.begin_iteration(1).unwrap();
    s.define_mesh::<f64>("phi", "grid", &[8, 8]).unwrap();
    let data: Vec<f64> = (0..64).map(|i| i as f64).collect();
    s.store_chunk("phi", "grid", &[0, 0], &[8, 8], &data).unwrap();
    s.close().unwrap();

    let mut r = Series::open_read(&path).unwrap();
    let (extent, sub) = r
        .read_component::<f64>(1, "phi", "grid", Some((&[2, 3], &[3, 2])))
        .unwrap();
    assert_eq!(extent, vec![3, 2]);
    let want: Vec<f64> = vec![19.0, 20.0, 27.0, 28.0, 35.0, 36.0];
    assert_eq!(sub, want);
}

#[test]
fn compressed_series_round_trip_both_codecs() {
    for codec_id in [1u16, 2] {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("codec{codec_id}"));
        let p = path.clone();

        spawn_group(3, move |g| {
            let mut cfg = cfg_with(2);
            cfg.codec.codec_id = codec_id;
            let mut s = Series::create(&p, &g, cfg).unwrap();
            s.begin_iteration(7).unwrap();
            s.define_mesh::<f64>("density", "i", &[300]).unwrap();
            let lo = g.rank() as u64 * 100;
            let data: Vec<f64> = (0..100).map(|i| ((lo + i) % 17) as f64).collect();
            s.store_chunk("density", "i", &[lo], &[100], &data).unwrap();
            let st = s.close_iteration().unwrap();
            // Smooth data must actually compress.
            assert!(st.bytes_stored < st.bytes_raw, "codec {codec_id} did not shrink");
            s.close().unwrap();
        })
        .unwrap();

        let mut r = Series::open_read(&path).unwrap();
        let (_, back) = r.read_component::<f64>(7, "density", "i", None).unwrap();
        let want: Vec<f64> = (0..300).map(|i| (i % 17) as f64).collect();
        assert_eq!(back, want, "codec {codec_id}");
    }
}

#[test]
fn append_reopens_and_extends_series() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("delta");

    let group = RankGroup::solo();
    let mut s = Series::create(&path, &group, cfg_with(1)).unwrap();
    s.begin_iteration(1).unwrap();
    s.define_mesh::<u64>("counts", "x", &[4]).unwrap();
    s.store_chunk("counts", "x", &[0], &[4], &[1u64, 2, 3, 4]).unwrap();
    s.close().unwrap();

    let mut s = Series::append(&path, &group, cfg_with(1)).unwrap();
    s.begin_iteration(2).unwrap();
    // The variable table carries over: same names, same dataset id.
    s.define_mesh::<u64>("counts", "x", &[4]).unwrap();
    s.store_chunk("counts", "x", &[0], &[4], &[5u64, 6, 7, 8]).unwrap();
    s.close().unwrap();

    let mut r = Series::open_read(&path).unwrap();
    assert_eq!(r.iterations().unwrap(), vec![1, 2]);
    let (_, a) = r.read_component::<u64>(1, "counts", "x", None).unwrap();
    let (_, b) = r.read_component::<u64>(2, "counts", "x", None).unwrap();
    assert_eq!(a, vec![1, 2, 3, 4]);
    assert_eq!(b, vec![5, 6, 7, 8]);

    // Appending a committed step other than 0 is refused.
    let mut s = Series::append(&path, &group, cfg_with(1)).unwrap();
    match s.begin_iteration(2) {
        Err(Error::IterationClosed(2)) => {}
        other => panic!("expected IterationClosed, got {other:?}"),
    }
    s.close().unwrap();
}

#[test]
fn iteration_zero_supersedes_on_recommit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eps");
    let group = RankGroup::solo();

    let mut s = Series::create(&path, &group, cfg_with(1)).unwrap();
    for (pass, marker) in [(1u64, 111u64), (2, 222), (3, 333)] {
        s.begin_iteration(0).unwrap();
        s.define_particles::<u64>("ckpt", "x", 2).unwrap();
        s.store_chunk("ckpt", "x", &[0], &[2], &[marker, pass]).unwrap();
        s.set_iteration_attr("pass", AttrValue::U64(pass)).unwrap();
        s.close_iteration().unwrap();
    }
    s.close().unwrap();

    let mut r = Series::open_read(&path).unwrap();
    assert_eq!(r.iterations().unwrap(), vec![0]);
    let (_, back) = r.read_component::<u64>(0, "ckpt", "x", None).unwrap();
    assert_eq!(back, vec![333, 3]);
    assert_eq!(r.iteration_attr(0, "pass").unwrap(), Some(AttrValue::U64(3)));
    // All three commits are on the record.
    assert_eq!(r.inventory().unwrap().step(0).unwrap().versions, 3);
}

#[test]
fn file_per_process_makes_per_step_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zeta");
    let p = path.clone();

    spawn_group(2, move |g| {
        let mut cfg = cfg_with(1);
        cfg.mode = EngineMode::FilePerProcess;
        let mut s = Series::create(&p, &g, cfg).unwrap();
        for step in 1..=2u64 {
            s.begin_iteration(step).unwrap();
            s.define_mesh::<f64>("f", "v", &[8]).unwrap();
            let lo = g.rank() as u64 * 4;
            let d: Vec<f64> = (0..4).map(|i| (step * 10 + lo + i) as f64).collect();
            s.store_chunk("f", "v", &[lo], &[4], &d).unwrap();
            s.close_iteration().unwrap();
        }
        s.close().unwrap();
    })
    .unwrap();

    let mut r = Series::open_read(&path).unwrap();
    let inv = r.inventory().unwrap();
    let names: Vec<&str> = inv.files.iter().map(|f| f.name.as_str()).collect();
    assert_eq!(
        names,
        vec!["data.1.0", "data.1.1", "data.2.0", "data.2.1", "md.0", "md.idx", "profiling.json"]
    );
    let (_, back) = r.read_component::<f64>(2, "f", "v", None).unwrap();
    let want: Vec<f64> = (0..8).map(|i| 20.0 + i as f64).collect();
    assert_eq!(back, want);
}

#[test]
fn misuse_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eta");
    let group = RankGroup::solo();

    let mut s = Series::create(&path, &group, cfg_with(1)).unwrap();

    // No open iteration.
    match s.store_chunk::<f64>("a", "b", &[0], &[1], &[0.0]) {
        Err(Error::NoOpenIteration) => {}
        other => panic!("{other:?}"),
    }

    s.begin_iteration(1).unwrap();
    match s.begin_iteration(2) {
        Err(Error::IterationBusy { open: 1, requested: 2 }) => {}
        other => panic!("{other:?}"),
    }

    s.define_mesh::<f64>("density", "e", &[10]).unwrap();
    // Double definition in one iteration.
    match s.define_mesh::<f64>("density", "e", &[10]) {
        Err(Error::AlreadyDefined(_)) => {}
        other => panic!("{other:?}"),
    }
    // Wrong datatype on store.
    match s.store_chunk::<f32>("density", "e", &[0], &[1], &[0.0f32]) {
        Err(Error::TypeMismatch { .. }) => {}
        other => panic!("{other:?}"),
    }
    // Out of bounds.
    match s.store_chunk::<f64>("density", "e", &[8], &[4], &[0.0; 4]) {
        Err(Error::OutOfBounds(_)) => {}
        other => panic!("{other:?}"),
    }
    // Element count mismatch.
    match s.store_chunk::<f64>("density", "e", &[0], &[4], &[0.0; 3]) {
        Err(Error::InvalidExtent(_)) => {}
        other => panic!("{other:?}"),
    }
    // Particle datasets are rank 1 only.
    match s.define_dataset::<f64>(RecordKind::ParticleSpecies, "p", "x", &[2, 2]) {
        Err(Error::InvalidExtent(_)) => {}
        other => panic!("{other:?}"),
    }
    // Mesh rank is capped at 3.
    match s.define_mesh::<f64>("m", "x", &[2, 2, 2, 2]) {
        Err(Error::InvalidExtent(_)) => {}
        other => panic!("{other:?}"),
    }

    // Empty chunk is a legal no-op.
    s.store_chunk::<f64>("density", "e", &[5], &[0], &[]).unwrap();
    s.close().unwrap();

    // Creating over an existing series without overwrite fails.
    match Series::create(&path, &group, cfg_with(1)) {
        Err(Error::AlreadyExists(_)) => {}
        Err(other) => panic!("{other:?}"),
        Ok(_) => panic!("create over existing series succeeded"),
    }
    // With overwrite it succeeds.
    let mut cfg = cfg_with(1);
    cfg.overwrite = true;
    Series::create(&path, &group, cfg).unwrap().close().unwrap();
}

#[test]
fn unwritten_regions_read_as_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("theta");
    let group = RankGroup::solo();

    let mut s = Series::create(&path, &group, cfg_with(1)).unwrap();
    s.begin_iteration(1).unwrap();
    s.define_mesh::<f64>("sparse", "v", &[10]).unwrap();
    s.store_chunk("sparse", "v", &[4], &[2], &[7.5, 8.5]).unwrap();
    s.close().unwrap();

    let mut r = Series::open_read(&path).unwrap();
    let (_, back) = r.read_component::<f64>(1, "sparse", "v", None).unwrap();
    assert_eq!(back, vec![0.0, 0.0, 0.0, 0.0, 7.5, 8.5, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn series_and_record_attributes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("iota");
    let group = RankGroup::solo();

    let mut s = Series::create(&path, &group, cfg_with(1)).unwrap();
    s.set_series_attr("software", AttrValue::Str("pmdio".into())).unwrap();
    s.begin_iteration(3).unwrap();
    s.define_mesh::<f64>("density", "e", &[2]).unwrap();
    s.store_chunk("density", "e", &[0], &[2], &[1.0, 2.0]).unwrap();
    s.set_iteration_attr("time", AttrValue::F64(0.25)).unwrap();
    s.set_record_attr("density", None, "unit", AttrValue::Str("1/m^3".into())).unwrap();
    s.set_record_attr("density", Some("e"), "sign", AttrValue::I64(-1)).unwrap();
    s.close().unwrap();

    let mut r = Series::open_read(&path).unwrap();
    assert_eq!(
        r.series_attr("software").unwrap(),
        Some(AttrValue::Str("pmdio".into()))
    );
    assert_eq!(r.iteration_attr(3, "time").unwrap(), Some(AttrValue::F64(0.25)));
    let inv = r.inventory().unwrap();
    let attrs = &inv.step(3).unwrap().attributes;
    assert!(attrs.iter().any(|a| a.key == "unit"));
    assert!(attrs.iter().any(|a| a.key == "sign"));
}
