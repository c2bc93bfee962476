//! Series / iteration / record / component data model.
//!
//! A [`Series`] is a sequence of iterations, each holding mesh and
//! particle records whose components are n-dimensional datasets. Writes
//! are deferred: `store_chunk` only queues data, `flush` moves it through
//! the engine, and `close_iteration` makes the iteration durable. One
//! iteration is writable at a time, and a closed iteration cannot be
//! reopened, with one deliberate exception: iteration 0 is the checkpoint
//! slot and may be rewritten, each rewrite superseding the previous one.
//!
//! Dataset definitions and iteration boundaries are collective and must
//! agree across the group; `store_chunk` is rank-local. Attributes are
//! rank 0's copy. A superseded iteration keeps only what its latest
//! commit wrote, so checkpoint writers must re-set attributes each time.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::comm::RankGroup;
use crate::config::EngineConfig;
use crate::engine::layout::{
    checksum_payload, AttrTarget, AttrValue, AttributeRecord, Datatype, EngineMode, NameEntry,
    RecordKind,
};
use crate::engine::reader::{BpReader, SeriesInventory};
use crate::engine::writer::{BpWriter, ChunkRequest, FlushStats, StepDataset};
use crate::error::{Error, Result};
use crate::monitor::{MonitorLog, ProfTimers};

/// Scalar types storable in a record component.
pub trait Element: Copy + Default + Send + Sync + 'static {
    const DATATYPE: Datatype;
    fn write_le(buf: &mut Vec<u8>, v: Self);
    fn read_le(b: &[u8]) -> Self;
}

impl Element for f32 {
    const DATATYPE: Datatype = Datatype::F32;
    fn write_le(buf: &mut Vec<u8>, v: Self) {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f32::from_bits(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

impl Element for f64 {
    const DATATYPE: Datatype = Datatype::F64;
    fn write_le(buf: &mut Vec<u8>, v: Self) {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f64::from_bits(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

impl Element for u64 {
    const DATATYPE: Datatype = Datatype::U64;
    fn write_le(buf: &mut Vec<u8>, v: Self) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        u64::from_le_bytes(b.try_into().unwrap())
    }
}

impl Element for i64 {
    const DATATYPE: Datatype = Datatype::I64;
    fn write_le(buf: &mut Vec<u8>, v: Self) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        i64::from_le_bytes(b.try_into().unwrap())
    }
}

pub fn bytes_of<T: Element>(data: &[T]) -> Vec<u8> {
    let n = T::DATATYPE.element_size();
    debug_assert_eq!(n, std::mem::size_of::<T>());
    if cfg!(target_endian = "little") {
        // The file format is little-endian, so this is a plain copy. All
        // Element types are scalars with no padding.
        let len = data.len() * n;
        let mut out = Vec::with_capacity(len);
        unsafe {
            std::ptr::copy_nonoverlapping(data.as_ptr() as *const u8, out.as_mut_ptr(), len);
            out.set_len(len);
        }
        out
    } else {
        let mut out = Vec::with_capacity(data.len() * n);
        for &v in data {
            T::write_le(&mut out, v);
        }
        out
    }
}

pub fn elements_from<T: Element>(bytes: &[u8]) -> Vec<T> {
    let n = T::DATATYPE.element_size();
    debug_assert_eq!(n, std::mem::size_of::<T>());
    debug_assert_eq!(bytes.len() % n, 0);
    if cfg!(target_endian = "little") {
        // Copy into the Vec's own allocation; the source need not be
        // aligned for T, and any bit pattern is a valid scalar.
        let count = bytes.len() / n;
        let mut out: Vec<T> = Vec::with_capacity(count);
        unsafe {
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), out.as_mut_ptr() as *mut u8, count * n);
            out.set_len(count);
        }
        out
    } else {
        bytes.chunks_exact(n).map(T::read_le).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Create,
    Read,
    Append,
}

struct VarTable {
    by_name: HashMap<(String, String), u32>,
    entries: HashMap<u32, NameEntry>,
    next_id: u32,
}

impl VarTable {
    fn new() -> Self {
        VarTable {
            by_name: HashMap::new(),
            entries: HashMap::new(),
            next_id: 0,
        }
    }

    fn seed(names: &[NameEntry]) -> Self {
        let mut t = Self::new();
        for n in names {
            t.by_name
                .insert((n.record_name.clone(), n.component_name.clone()), n.variable_id);
            t.next_id = t.next_id.max(n.variable_id + 1);
            t.entries.insert(n.variable_id, n.clone());
        }
        t
    }

    fn lookup(&self, record: &str, component: &str) -> Option<&NameEntry> {
        self.by_name
            .get(&(record.to_string(), component.to_string()))
            .and_then(|id| self.entries.get(id))
    }

    fn intern(&mut self, kind: RecordKind, record: &str, component: &str) -> Result<u32> {
        if let Some(existing) = self.lookup(record, component) {
            if existing.record_kind != kind {
                return Err(Error::AlreadyDefined(format!(
                    "{record}/{component} as a {}",
                    existing.record_kind.name()
                )));
            }
            return Ok(existing.variable_id);
        }
        let id = self.next_id;
        self.next_id += 1;
        let entry = NameEntry {
            variable_id: id,
            record_kind: kind,
            record_name: record.to_string(),
            component_name: component.to_string(),
        };
        self.by_name.insert((record.to_string(), component.to_string()), id);
        self.entries.insert(id, entry);
        Ok(id)
    }
}

struct OpenIteration {
    step: u64,
    /// Datasets defined in this iteration, in definition order.
    datasets: Vec<StepDataset>,
    /// Datatype per variable for chunk validation.
    dtypes: HashMap<u32, Datatype>,
    pending: Vec<ChunkRequest>,
    dirty_attrs: Vec<AttributeRecord>,
}

enum Backend {
    Writer(BpWriter),
    Reader(BpReader),
}

pub struct Series {
    backend: Backend,
    group: RankGroup,
    vars: VarTable,
    open: Option<OpenIteration>,
    closed_steps: std::collections::HashSet<u64>,
    series_attrs: Vec<AttributeRecord>,
    closed: bool,
}

impl Series {
    /// Create a new series for writing. Collective over `group`.
    pub fn create(path: &Path, group: &RankGroup, cfg: EngineConfig) -> Result<Series> {
        let writer = BpWriter::create(path, group, cfg)?;
        Ok(Series {
            backend: Backend::Writer(writer),
            group: group.clone(),
            vars: VarTable::new(),
            open: None,
            closed_steps: Default::default(),
            series_attrs: Vec::new(),
            closed: false,
        })
    }

    /// Open an existing series to append further iterations. Collective.
    pub fn append(path: &Path, group: &RankGroup, cfg: EngineConfig) -> Result<Series> {
        let (writer, info) = BpWriter::open_append(path, group, cfg)?;
        Ok(Series {
            backend: Backend::Writer(writer),
            group: group.clone(),
            vars: VarTable::seed(&info.variables),
            open: None,
            closed_steps: info.committed_steps.iter().copied().collect(),
            series_attrs: Vec::new(),
            closed: false,
        })
    }

    /// Open a series read-only. Rank-local; any process may call it.
    pub fn open_read(path: &Path) -> Result<Series> {
        let reader = BpReader::open(path)?;
        let names: Vec<NameEntry> = reader.inventory().variables.values().cloned().collect();
        Ok(Series {
            backend: Backend::Reader(reader),
            group: RankGroup::solo(),
            vars: VarTable::seed(&names),
            open: None,
            closed_steps: Default::default(),
            series_attrs: Vec::new(),
            closed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        match &self.backend {
            Backend::Writer(w) => w.dir(),
            Backend::Reader(r) => r.dir(),
        }
    }

    pub fn mode(&self) -> EngineMode {
        match &self.backend {
            Backend::Writer(w) => w.mode(),
            Backend::Reader(r) => r.inventory().header.mode,
        }
    }

    fn writer(&mut self) -> Result<&mut BpWriter> {
        match &mut self.backend {
            Backend::Writer(w) => Ok(w),
            Backend::Reader(_) => Err(Error::NotWritable),
        }
    }

    fn reader(&mut self) -> Result<&mut BpReader> {
        match &mut self.backend {
            Backend::Reader(r) => Ok(r),
            Backend::Writer(_) => Err(Error::NotDefined("series is write-only".into())),
        }
    }

    /// Open iteration `step` for writing. Collective. Iteration 0 may be
    /// reopened after closing; any other committed step is final.
    pub fn begin_iteration(&mut self, step: u64) -> Result<()> {
        if let Some(open) = &self.open {
            return Err(Error::IterationBusy {
                open: open.step,
                requested: step,
            });
        }
        let agreed = self.group.all_gather(step)?;
        if agreed.iter().any(|s| **s != step) {
            return Err(Error::CollectiveMismatch(
                "ranks disagree on the iteration to open".into(),
            ));
        }
        if step != 0 && self.closed_steps.contains(&step) {
            return Err(Error::IterationClosed(step));
        }
        let w = self.writer()?;
        w.begin_step();
        self.open = Some(OpenIteration {
            step,
            datasets: Vec::new(),
            dtypes: HashMap::new(),
            pending: Vec::new(),
            dirty_attrs: Vec::new(),
        });
        Ok(())
    }

    pub fn open_iteration(&self) -> Option<u64> {
        self.open.as_ref().map(|o| o.step)
    }

    /// Define a dataset in the open iteration. Collective; all ranks must
    /// pass identical arguments. Mesh datasets may have rank 1 to 3,
    /// particle datasets exactly 1.
    pub fn define_dataset<T: Element>(
        &mut self,
        kind: RecordKind,
        record: &str,
        component: &str,
        global_extent: &[u64],
    ) -> Result<()> {
        match kind {
            RecordKind::Mesh => {
                if global_extent.is_empty() || global_extent.len() > 3 {
                    return Err(Error::InvalidExtent(format!(
                        "mesh rank {} not in 1..=3",
                        global_extent.len()
                    )));
                }
            }
            RecordKind::ParticleSpecies => {
                if global_extent.len() != 1 {
                    return Err(Error::InvalidExtent(format!(
                        "particle dataset rank {} != 1",
                        global_extent.len()
                    )));
                }
            }
        }

        // Everyone must define the same dataset at the same point.
        let sig = def_signature(kind, record, component, T::DATATYPE, global_extent);
        let sigs = self.group.all_gather(sig)?;
        if sigs.iter().any(|s| **s != sig) {
            return Err(Error::CollectiveMismatch(format!(
                "dataset definition {record}/{component} differs between ranks"
            )));
        }

        let open = self.open.as_mut().ok_or(Error::NoOpenIteration)?;
        let id = self.vars.intern(kind, record, component)?;
        if open.dtypes.contains_key(&id) {
            return Err(Error::AlreadyDefined(format!(
                "{record}/{component} in iteration {}",
                open.step
            )));
        }
        open.datasets.push(StepDataset {
            variable_id: id,
            datatype: T::DATATYPE,
            global_extent: global_extent.to_vec(),
        });
        open.dtypes.insert(id, T::DATATYPE);
        Ok(())
    }

    pub fn define_mesh<T: Element>(
        &mut self,
        record: &str,
        component: &str,
        global_extent: &[u64],
    ) -> Result<()> {
        self.define_dataset::<T>(RecordKind::Mesh, record, component, global_extent)
    }

    pub fn define_particles<T: Element>(
        &mut self,
        record: &str,
        component: &str,
        count: u64,
    ) -> Result<()> {
        self.define_dataset::<T>(RecordKind::ParticleSpecies, record, component, &[count])
    }

    /// Queue a chunk for the open iteration. Rank-local and deferred; the
    /// data is copied now, written at flush. A zero-sized extent is a
    /// legal no-op.
    pub fn store_chunk<T: Element>(
        &mut self,
        record: &str,
        component: &str,
        offset: &[u64],
        extent: &[u64],
        data: &[T],
    ) -> Result<()> {
        let open = self.open.as_mut().ok_or(Error::NoOpenIteration)?;
        let name = self
            .vars
            .lookup(record, component)
            .ok_or_else(|| Error::NotDefined(format!("{record}/{component}")))?;
        let id = name.variable_id;
        let ds = open
            .datasets
            .iter()
            .find(|d| d.variable_id == id)
            .ok_or_else(|| {
                Error::NotDefined(format!(
                    "{record}/{component} in iteration {}",
                    open.step
                ))
            })?;
        if T::DATATYPE != ds.datatype {
            return Err(Error::TypeMismatch {
                expected: ds.datatype.name().to_string(),
                got: T::DATATYPE.name().to_string(),
            });
        }
        if offset.len() != ds.global_extent.len() || extent.len() != ds.global_extent.len() {
            return Err(Error::InvalidExtent(format!(
                "chunk rank {} vs dataset rank {}",
                extent.len(),
                ds.global_extent.len()
            )));
        }
        for i in 0..extent.len() {
            let end = offset[i]
                .checked_add(extent[i])
                .ok_or_else(|| Error::OutOfBounds("chunk extent overflow".into()))?;
            if end > ds.global_extent[i] {
                return Err(Error::OutOfBounds(format!(
                    "chunk {}+{} exceeds extent {} in dim {}",
                    offset[i], extent[i], ds.global_extent[i], i
                )));
            }
        }
        let elems: u64 = extent.iter().product();
        if elems != data.len() as u64 {
            return Err(Error::InvalidExtent(format!(
                "chunk holds {} elements, extent needs {}",
                data.len(),
                elems
            )));
        }
        if elems == 0 {
            return Ok(());
        }
        let raw = bytes_of(data);
        let checksum = match &self.backend {
            Backend::Writer(w) if w.identity_codec() => Some(checksum_payload(&raw)),
            _ => None,
        };
        open.pending.push(ChunkRequest {
            variable_id: id,
            offset: offset.to_vec(),
            extent: extent.to_vec(),
            raw,
            checksum,
        });
        Ok(())
    }

    /// Attach an attribute to the open iteration.
    pub fn set_iteration_attr(&mut self, key: &str, value: AttrValue) -> Result<()> {
        let open = self.open.as_mut().ok_or(Error::NoOpenIteration)?;
        open.dirty_attrs.push(AttributeRecord {
            target: AttrTarget::Iteration,
            iteration: open.step,
            key: key.to_string(),
            value,
        });
        Ok(())
    }

    /// Attach an attribute to the series itself. Written with the next
    /// flushed batch.
    pub fn set_series_attr(&mut self, key: &str, value: AttrValue) -> Result<()> {
        self.series_attrs.push(AttributeRecord {
            target: AttrTarget::Series,
            iteration: 0,
            key: key.to_string(),
            value,
        });
        Ok(())
    }

    /// Attach an attribute to a record or one of its components.
    pub fn set_record_attr(
        &mut self,
        record: &str,
        component: Option<&str>,
        key: &str,
        value: AttrValue,
    ) -> Result<()> {
        let open = self.open.as_mut().ok_or(Error::NoOpenIteration)?;
        let target = match component {
            Some(c) => AttrTarget::Component(record.to_string(), c.to_string()),
            None => AttrTarget::Record(record.to_string()),
        };
        open.dirty_attrs.push(AttributeRecord {
            target,
            iteration: open.step,
            key: key.to_string(),
            value,
        });
        Ok(())
    }

    /// Push queued chunks through the engine. Collective.
    pub fn flush(&mut self) -> Result<FlushStats> {
        let open = self.open.as_mut().ok_or(Error::NoOpenIteration)?;
        let step = open.step;
        let datasets = open.datasets.clone();
        let chunks = std::mem::take(&mut open.pending);
        let mut attrs = std::mem::take(&mut open.dirty_attrs);
        let names: Vec<NameEntry> = datasets
            .iter()
            .map(|d| self.vars.entries[&d.variable_id].clone())
            .collect();
        attrs.extend(std::mem::take(&mut self.series_attrs));
        let w = self.writer()?;
        w.flush_step(step, &names, &datasets, attrs, chunks)
    }

    /// Flush and commit the open iteration. Collective.
    pub fn close_iteration(&mut self) -> Result<FlushStats> {
        let stats = self.flush()?;
        let step = self.open.as_ref().map(|o| o.step).expect("open iteration");
        let w = self.writer()?;
        w.commit_step(step)?;
        self.closed_steps.insert(step);
        self.open = None;
        Ok(stats)
    }

    /// Close the series. Collective for writers; idempotent.
    pub fn close(&mut self) -> Result<()> {
        if self.closed {
            return Ok(());
        }
        if self.open.is_some() {
            self.close_iteration()?;
        }
        if let Backend::Writer(w) = &mut self.backend {
            w.close()?;
        }
        self.closed = true;
        Ok(())
    }

    // Read-side accessors.

    pub fn iterations(&mut self) -> Result<Vec<u64>> {
        Ok(self.reader()?.iterations())
    }

    pub fn inventory(&mut self) -> Result<&SeriesInventory> {
        Ok(self.reader()?.inventory())
    }

    /// Datatype, global extent, and kind of a stored component.
    pub fn dataset_info(
        &mut self,
        iteration: u64,
        record: &str,
        component: &str,
    ) -> Result<(Datatype, Vec<u64>, RecordKind)> {
        let r = self.reader()?;
        let inv = r.inventory();
        let name = inv
            .variable_by_names(record, component)
            .ok_or_else(|| Error::NotDefined(format!("{record}/{component}")))?;
        let step = inv
            .step(iteration)
            .ok_or_else(|| Error::NotDefined(format!("iteration {iteration}")))?;
        let entry = step.entry(name.variable_id).ok_or_else(|| {
            Error::NotDefined(format!("{record}/{component} in iteration {iteration}"))
        })?;
        Ok((entry.datatype, entry.global_extent.clone(), name.record_kind))
    }

    /// Read a component, whole or a box selection. Returns the extent of
    /// the returned box and its elements.
    pub fn read_component<T: Element>(
        &mut self,
        iteration: u64,
        record: &str,
        component: &str,
        selection: Option<(&[u64], &[u64])>,
    ) -> Result<(Vec<u64>, Vec<T>)> {
        let (dtype, extent, bytes) =
            self.read_component_bytes(iteration, record, component, selection)?;
        if dtype != T::DATATYPE {
            return Err(Error::TypeMismatch {
                expected: dtype.name().to_string(),
                got: T::DATATYPE.name().to_string(),
            });
        }
        Ok((extent, elements_from(&bytes)))
    }

    /// Untyped variant of [`Series::read_component`]: the box's extent and
    /// its little-endian payload, plus the stored datatype.
    pub fn read_component_bytes(
        &mut self,
        iteration: u64,
        record: &str,
        component: &str,
        selection: Option<(&[u64], &[u64])>,
    ) -> Result<(Datatype, Vec<u64>, Vec<u8>)> {
        let r = self.reader()?;
        let res = r.read_component(iteration, record, component, selection)?;
        Ok((res.datatype, res.extent, res.bytes))
    }

    /// Latest value of an iteration attribute.
    pub fn iteration_attr(&mut self, iteration: u64, key: &str) -> Result<Option<AttrValue>> {
        let r = self.reader()?;
        let step = r
            .inventory()
            .step(iteration)
            .ok_or_else(|| Error::NotDefined(format!("iteration {iteration}")))?;
        Ok(step
            .attributes
            .iter()
            .rev()
            .find(|a| a.target == AttrTarget::Iteration && a.key == key)
            .map(|a| a.value.clone()))
    }

    /// Latest value of a series attribute, across all committed steps in
    /// commit order.
    pub fn series_attr(&mut self, key: &str) -> Result<Option<AttrValue>> {
        let r = self.reader()?;
        let mut steps: Vec<_> = r.inventory().steps.iter().collect();
        steps.sort_by_key(|s| s.ordinal);
        let mut found = None;
        for s in steps {
            for a in &s.attributes {
                if a.target == AttrTarget::Series && a.key == key {
                    found = Some(a.value.clone());
                }
            }
        }
        Ok(found)
    }

    // Introspection used by benchmarks and tests.

    pub fn monitor_log(&self) -> &MonitorLog {
        match &self.backend {
            Backend::Writer(w) => &w.log,
            Backend::Reader(r) => &r.log,
        }
    }

    pub fn prof_timers(&self) -> Option<ProfTimers> {
        match &self.backend {
            Backend::Writer(w) => Some(w.prof_timers()),
            Backend::Reader(_) => None,
        }
    }

    pub fn md_append_count(&self) -> u64 {
        match &self.backend {
            Backend::Writer(w) => w.md_append_count(),
            Backend::Reader(_) => 0,
        }
    }

    pub fn step_handle_touches(&self) -> u64 {
        match &self.backend {
            Backend::Writer(w) => w.step_handle_touches(),
            Backend::Reader(_) => 0,
        }
    }

    pub fn num_subfiles(&self) -> u32 {
        match &self.backend {
            Backend::Writer(w) => w.num_subfiles(),
            Backend::Reader(r) => r.inventory().header.num_aggregators,
        }
    }
}

impl Drop for Series {
    fn drop(&mut self) {
        // A collective close cannot run safely from drop on a multi-rank
        // group; only a solo writer gets the courtesy close.
        if !self.closed && self.group.size() == 1 {
            let _ = self.close();
        }
    }
}

fn def_signature(
    kind: RecordKind,
    record: &str,
    component: &str,
    dtype: Datatype,
    extent: &[u64],
) -> u64 {
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};
    let mut h = DefaultHasher::new();
    kind.tag().hash(&mut h);
    record.hash(&mut h);
    component.hash(&mut h);
    dtype.tag().hash(&mut h);
    extent.hash(&mut h);
    h.finish()
}

/// Convenience: full path of the series directory a path will map to.
pub fn series_path(path: &Path) -> PathBuf {
    if path.extension().map_or(false, |e| e == "bp4") {
        path.to_path_buf()
    } else {
        let mut s = path.as_os_str().to_os_string();
        s.push(".bp4");
        PathBuf::from(s)
    }
}
