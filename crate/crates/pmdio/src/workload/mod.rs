//! Miniature particle-in-cell / Monte-Carlo workload.
//!
//! Three species on a periodic 1-D cell grid: electrons `e`, ions `D+`,
//! and neutrals `D`. Each step pushes particles, then lets every neutral
//! ionize with probability `1 - exp(-ne_r * dt)`; a successful event
//! removes the neutral, creates an ion inheriting its position and
//! velocity, and creates an electron at the same position with freshly
//! sampled thermal velocity. Particle counts therefore obey, per step,
//! `Δe == ΔD+ == -ΔD` exactly.
//!
//! Each rank owns the particles it created; they drift across the whole
//! domain without migrating between ranks. Per-step randomness comes from
//! a counter-keyed stream, `ChaCha8(seed, rank, step)`, so a run restarted
//! from a checkpoint replays the exact trajectory of an uninterrupted one.
//!
//! Output goes to a single series: diagnostics at iteration = step number
//! (cell densities per species as block slices, a 64-bin speed histogram,
//! optionally a moving-average density), checkpoints into iteration 0,
//! which is superseded on every checkpoint so the series always carries
//! exactly one restart point. The moving-average window is not part of
//! the checkpoint; it refills within `mvflag` steps after a restart.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::comm::RankGroup;
use crate::config::EngineConfig;
use crate::engine::layout::AttrValue;
use crate::engine::writer::FlushStats;
use crate::error::{Error, Result};
use crate::model::Series;
use crate::monitor::MonitorLog;

pub const SPECIES_NAMES: [&str; 3] = ["e", "D+", "D"];
const ELECTRON: usize = 0;
const ION: usize = 1;
const NEUTRAL: usize = 2;

const SPEED_BINS: usize = 64;
const SPEED_BIN_WIDTH: f64 = 0.125;

fn default_n_cells() -> u64 {
    1000
}
fn default_particles() -> u64 {
    1000
}
fn default_dt() -> f64 {
    1.0
}
fn default_ne_r() -> f64 {
    1.0e-4
}
fn default_datfile() -> u64 {
    100
}
fn default_dmpstep() -> u64 {
    500
}
fn default_mvstep() -> u64 {
    100
}
fn default_last_step() -> u64 {
    2000
}
fn default_seed() -> u64 {
    42
}

/// Simulation deck. Every knob has a default, so an empty deck runs.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_n_cells")]
    pub n_cells: u64,
    /// Initial particles per species, split across ranks.
    #[serde(default = "default_particles")]
    pub particles_per_species: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Ionization rate coefficient (per unit time).
    #[serde(default = "default_ne_r")]
    pub ne_r: f64,
    /// Diagnostics period, in steps.
    #[serde(default = "default_datfile")]
    pub datfile: u64,
    /// Checkpoint period, in steps.
    #[serde(default = "default_dmpstep")]
    pub dmpstep: u64,
    /// Moving-average window length; 0 disables the averaged density.
    #[serde(default)]
    pub mvflag: u64,
    /// Moving-average output period, in steps.
    #[serde(default = "default_mvstep")]
    pub mvstep: u64,
    #[serde(default = "default_last_step")]
    pub last_step: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty deck")
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<SimConfig> {
        let cfg: SimConfig =
            toml::from_str(text).map_err(|e| Error::ParseError(format!("deck: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SimConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 {
            return Err(Error::InvalidConfig("n_cells must be positive".into()));
        }
        if self.last_step == 0 {
            return Err(Error::InvalidConfig("last_step must be positive".into()));
        }
        if self.dt <= 0.0 || !self.dt.is_finite() {
            return Err(Error::InvalidConfig("dt must be positive".into()));
        }
        if self.ne_r < 0.0 || !self.ne_r.is_finite() {
            return Err(Error::InvalidConfig("ne_r must be non-negative".into()));
        }
        if self.datfile == 0 {
            return Err(Error::InvalidConfig("datfile must be positive".into()));
        }
        if self.dmpstep == 0 {
            return Err(Error::InvalidConfig("dmpstep must be positive".into()));
        }
        if self.mvflag > 0 && self.mvstep == 0 {
            return Err(Error::InvalidConfig(
                "mvstep must be positive when mvflag is set".into(),
            ));
        }
        Ok(())
    }
}

/// Per-species particle storage, struct of arrays.
#[derive(Debug, Clone, Default)]
pub struct ParticleSet {
    pub x: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub vz: Vec<f64>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn push(&mut self, x: f64, vx: f64, vy: f64, vz: f64) {
        self.x.push(x);
        self.vx.push(vx);
        self.vy.push(vy);
        self.vz.push(vz);
    }

    /// Drop the particles whose keep flag is false, preserving order.
    fn compact(&mut self, keep: &[bool]) {
        let mut w = 0;
        for i in 0..self.x.len() {
            if keep[i] {
                self.x[w] = self.x[i];
                self.vx[w] = self.vx[i];
                self.vy[w] = self.vy[i];
                self.vz[w] = self.vz[i];
                w += 1;
            }
        }
        self.x.truncate(w);
        self.vx.truncate(w);
        self.vy.truncate(w);
        self.vz.truncate(w);
    }
}

/// Outcome of one step on one rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepReport {
    pub step: u64,
    pub ionized: u64,
}

pub struct SimState {
    pub cfg: SimConfig,
    group: RankGroup,
    /// Last completed step; 0 right after init.
    pub step: u64,
    pub species: [ParticleSet; 3],
    /// Per-species window of recent private density grids.
    window: [VecDeque<Vec<f64>>; 3],
}

fn rng_for(seed: u64, rank: u64, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&rank.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Contiguous cell block of `rank` when `n` cells split over `size` ranks.
fn cell_block(rank: u64, size: u64, n: u64) -> (u64, u64) {
    let lo = (rank * n).div_ceil(size);
    let hi = ((rank + 1) * n).div_ceil(size);
    (lo, hi)
}

/// Particles rank `rank` owns out of `total`, lower ranks one extra.
fn share(total: u64, rank: u64, size: u64) -> u64 {
    total / size + u64::from(rank < total % size)
}

impl SimState {
    /// Fresh start: equal particle counts per species, positions uniform
    /// in the rank's cell block, velocities standard normal.
    pub fn init(cfg: SimConfig, group: &RankGroup) -> Result<SimState> {
        cfg.validate()?;
        let size = group.size() as u64;
        let rank = group.rank() as u64;
        if size > cfg.n_cells {
            return Err(Error::InvalidConfig(format!(
                "{size} ranks need at least {size} cells, deck has {}",
                cfg.n_cells
            )));
        }
        let mut rng = rng_for(cfg.seed, rank, 0);
        let (lo, hi) = cell_block(rank, size, cfg.n_cells);
        let mine = share(cfg.particles_per_species, rank, size);

        let mut species: [ParticleSet; 3] = Default::default();
        for set in species.iter_mut() {
            for _ in 0..mine {
                let u: f64 = rng.gen();
                let x = lo as f64 + u * (hi - lo) as f64;
                let vx: f64 = rng.sample(StandardNormal);
                let vy: f64 = rng.sample(StandardNormal);
                let vz: f64 = rng.sample(StandardNormal);
                set.push(x, vx, vy, vz);
            }
        }
        Ok(SimState {
            cfg,
            group: group.clone(),
            step: 0,
            species,
            window: Default::default(),
        })
    }

    pub fn rank(&self) -> usize {
        self.group.rank()
    }

    /// Local particle counts, electrons/ions/neutrals.
    pub fn counts(&self) -> [u64; 3] {
        [
            self.species[ELECTRON].len() as u64,
            self.species[ION].len() as u64,
            self.species[NEUTRAL].len() as u64,
        ]
    }

    pub fn global_counts(&self) -> Result<[u64; 3]> {
        let c = self.counts();
        Ok([
            self.group.all_reduce_sum(c[0])?,
            self.group.all_reduce_sum(c[1])?,
            self.group.all_reduce_sum(c[2])?,
        ])
    }

    /// Advance one step: push, then ionize. Rank-local except for the
    /// deterministic per-step RNG key.
    pub fn advance(&mut self) -> StepReport {
        let step = self.step + 1;
        let n = self.cfg.n_cells as f64;
        let dt = self.cfg.dt;

        // Push: 1-D drift with periodic wrap.
        for set in self.species.iter_mut() {
            for i in 0..set.x.len() {
                let mut x = (set.x[i] + set.vx[i] * dt).rem_euclid(n);
                if x >= n {
                    x = 0.0;
                }
                set.x[i] = x;
            }
        }

        // Ionize neutrals in storage order.
        let p = 1.0 - (-self.cfg.ne_r * dt).exp();
        let mut rng = rng_for(self.cfg.seed, self.group.rank() as u64, step);
        let neutrals = self.species[NEUTRAL].len();
        let mut keep = vec![true; neutrals];
        let mut ionized = 0u64;
        for i in 0..neutrals {
            let u: f64 = rng.gen();
            if u < p {
                keep[i] = false;
                ionized += 1;
                let (x, vx, vy, vz) = (
                    self.species[NEUTRAL].x[i],
                    self.species[NEUTRAL].vx[i],
                    self.species[NEUTRAL].vy[i],
                    self.species[NEUTRAL].vz[i],
                );
                self.species[ION].push(x, vx, vy, vz);
                let evx: f64 = rng.sample(StandardNormal);
                let evy: f64 = rng.sample(StandardNormal);
                let evz: f64 = rng.sample(StandardNormal);
                self.species[ELECTRON].push(x, evx, evy, evz);
            }
        }
        self.species[NEUTRAL].compact(&keep);

        if self.cfg.mvflag > 0 {
            for s in 0..3 {
                let grid = self.deposit(s);
                let w = &mut self.window[s];
                w.push_back(grid);
                while w.len() > self.cfg.mvflag as usize {
                    w.pop_front();
                }
            }
        }

        self.step = step;
        StepReport { step, ionized }
    }

    /// Nearest-grid-point deposit of one species onto a private
    /// full-length grid. The grid total equals the live particle count.
    pub fn deposit(&self, species: usize) -> Vec<f64> {
        let n = self.cfg.n_cells as usize;
        let mut grid = vec![0.0f64; n];
        for &x in &self.species[species].x {
            let mut c = x.floor() as usize;
            if c >= n {
                c = n - 1;
            }
            grid[c] += 1.0;
        }
        grid
    }

    fn speed_histogram(&self, species: usize) -> Vec<u64> {
        let set = &self.species[species];
        let mut hist = vec![0u64; SPEED_BINS];
        for i in 0..set.len() {
            let v = (set.vx[i] * set.vx[i] + set.vy[i] * set.vy[i] + set.vz[i] * set.vz[i])
                .sqrt();
            let bin = ((v / SPEED_BIN_WIDTH) as usize).min(SPEED_BINS - 1);
            hist[bin] += 1;
        }
        hist
    }

    /// Elementwise sum of every rank's private grid, in rank order.
    fn global_grid(&self, local: Vec<f64>) -> Result<Vec<f64>> {
        let all = self.group.all_gather(local)?;
        let n = self.cfg.n_cells as usize;
        let mut sum = vec![0.0f64; n];
        for g in all.iter() {
            for (a, b) in sum.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
        Ok(sum)
    }

    /// Write per-species densities and speed histograms into iteration
    /// `self.step` of the series.
    pub fn emit_diagnostics(&mut self, series: &mut Series) -> Result<FlushStats> {
        let step = self.step;
        let n = self.cfg.n_cells;
        let rank = self.group.rank() as u64;
        let size = self.group.size() as u64;
        let (lo, hi) = cell_block(rank, size, n);

        series.begin_iteration(step)?;
        for s in 0..3 {
            series.define_mesh::<f64>("density", SPECIES_NAMES[s], &[n])?;
        }
        for s in 0..3 {
            series.define_mesh::<u64>("speed_hist", SPECIES_NAMES[s], &[SPEED_BINS as u64])?;
        }
        let mv_due = self.cfg.mvflag > 0 && step % self.cfg.mvstep == 0;
        if mv_due {
            for s in 0..3 {
                series.define_mesh::<f64>("density_avg", SPECIES_NAMES[s], &[n])?;
            }
        }

        for s in 0..3 {
            let total = self.global_grid(self.deposit(s))?;
            series.store_chunk(
                "density",
                SPECIES_NAMES[s],
                &[lo],
                &[hi - lo],
                &total[lo as usize..hi as usize],
            )?;
        }
        for s in 0..3 {
            let local = self.speed_histogram(s);
            let all = self.group.all_gather(local)?;
            if rank == 0 {
                let mut hist = vec![0u64; SPEED_BINS];
                for h in all.iter() {
                    for (a, b) in hist.iter_mut().zip(h.iter()) {
                        *a += b;
                    }
                }
                series.store_chunk(
                    "speed_hist",
                    SPECIES_NAMES[s],
                    &[0],
                    &[SPEED_BINS as u64],
                    &hist,
                )?;
            }
        }
        if mv_due {
            for s in 0..3 {
                let w = &self.window[s];
                let mut avg = vec![0.0f64; n as usize];
                for g in w.iter() {
                    for (a, b) in avg.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
                let m = w.len().max(1) as f64;
                for a in avg.iter_mut() {
                    *a /= m;
                }
                let total = self.global_grid(avg)?;
                series.store_chunk(
                    "density_avg",
                    SPECIES_NAMES[s],
                    &[lo],
                    &[hi - lo],
                    &total[lo as usize..hi as usize],
                )?;
            }
        }
        series.close_iteration()
    }

    /// Write a restart point into iteration 0, superseding any previous
    /// one. Stores every particle array, the per-rank layout, and the
    /// step and seed.
    pub fn checkpoint(&mut self, series: &mut Series) -> Result<FlushStats> {
        let size = self.group.size() as u64;
        series.begin_iteration(0)?;

        let counts = self.counts();
        let mut offsets = [0u64; 3];
        let mut totals = [0u64; 3];
        for s in 0..3 {
            offsets[s] = self.group.exclusive_prefix_sum(counts[s])?;
            totals[s] = self.group.all_reduce_sum(counts[s])?;
        }

        for s in 0..3 {
            let record = ckpt_record(SPECIES_NAMES[s]);
            for comp in ["x", "vx", "vy", "vz"] {
                series.define_particles::<f64>(&record, comp, totals[s])?;
            }
            series.define_mesh::<u64>("ckpt_layout", SPECIES_NAMES[s], &[size])?;
        }

        for s in 0..3 {
            let record = ckpt_record(SPECIES_NAMES[s]);
            let set = &self.species[s];
            let ext = [counts[s]];
            let off = [offsets[s]];
            series.store_chunk(&record, "x", &off, &ext, &set.x)?;
            series.store_chunk(&record, "vx", &off, &ext, &set.vx)?;
            series.store_chunk(&record, "vy", &off, &ext, &set.vy)?;
            series.store_chunk(&record, "vz", &off, &ext, &set.vz)?;
            series.store_chunk(
                "ckpt_layout",
                SPECIES_NAMES[s],
                &[self.group.rank() as u64],
                &[1],
                &[counts[s]],
            )?;
        }
        series.set_iteration_attr("step", AttrValue::U64(self.step))?;
        series.set_iteration_attr("seed", AttrValue::U64(self.cfg.seed))?;
        series.close_iteration()
    }

    /// Rebuild rank-local state from the checkpoint in iteration 0.
    /// Requires the same group size the checkpoint was written with.
    pub fn restore(cfg: SimConfig, group: &RankGroup, path: &Path) -> Result<SimState> {
        cfg.validate()?;
        let mut r = Series::open_read(path)?;
        if r.iterations()?.iter().all(|&it| it != 0) {
            return Err(Error::NoCheckpoint(r.dir().to_path_buf()));
        }
        let step = match r.iteration_attr(0, "step")? {
            Some(AttrValue::U64(v)) => v,
            _ => return Err(Error::CorruptIndex("checkpoint lacks a step attribute".into())),
        };
        let seed = match r.iteration_attr(0, "seed")? {
            Some(AttrValue::U64(v)) => v,
            _ => return Err(Error::CorruptIndex("checkpoint lacks a seed attribute".into())),
        };
        if seed != cfg.seed {
            return Err(Error::InvalidConfig(format!(
                "deck seed {} does not match checkpoint seed {}",
                cfg.seed, seed
            )));
        }

        let rank = group.rank();
        let mut species: [ParticleSet; 3] = Default::default();
        for s in 0..3 {
            let (_, layout) =
                r.read_component::<u64>(0, "ckpt_layout", SPECIES_NAMES[s], None)?;
            if layout.len() != group.size() {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint was written by {} ranks, restore uses {}",
                    layout.len(),
                    group.size()
                )));
            }
            let count = layout[rank];
            let off: u64 = layout[..rank].iter().sum();
            let record = ckpt_record(SPECIES_NAMES[s]);
            let sel = (vec![off], vec![count]);
            let (_, x) =
                r.read_component::<f64>(0, &record, "x", Some((&sel.0, &sel.1)))?;
            let (_, vx) =
                r.read_component::<f64>(0, &record, "vx", Some((&sel.0, &sel.1)))?;
            let (_, vy) =
                r.read_component::<f64>(0, &record, "vy", Some((&sel.0, &sel.1)))?;
            let (_, vz) =
                r.read_component::<f64>(0, &record, "vz", Some((&sel.0, &sel.1)))?;
            species[s] = ParticleSet { x, vx, vy, vz };
        }

        Ok(SimState {
            cfg,
            group: group.clone(),
            step,
            species,
            window: Default::default(),
        })
    }
}

/// Checkpoint record name for one species, for readers of the series.
pub fn ckpt_record(species: &str) -> String {
    format!("ckpt_{species}")
}

/// Result of a full simulation run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub series: PathBuf,
    pub first_step: u64,
    pub last_step: u64,
    pub ionized_total: u64,
    /// Global counts at the end: electrons, ions, neutrals.
    pub final_counts: [u64; 3],
    pub diag_iterations: Vec<u64>,
    pub checkpoints: u64,
    pub bytes_raw: u64,
    pub bytes_stored: u64,
    /// This rank's data-plane op trace, for offline cost reports.
    pub monitor_log: MonitorLog,
}

/// Drive a simulation to `last_step`, writing diagnostics and
/// checkpoints. With `restart` the series is reopened and the state
/// resumes from iteration 0; otherwise a fresh series is created.
pub fn run_simulation(
    cfg: SimConfig,
    out: &Path,
    engine_cfg: EngineConfig,
    group: &RankGroup,
    restart: bool,
) -> Result<RunSummary> {
    let (mut series, mut state) = if restart {
        let state = SimState::restore(cfg, group, out)?;
        let series = Series::append(out, group, engine_cfg)?;
        (series, state)
    } else {
        let series = Series::create(out, group, engine_cfg)?;
        let state = SimState::init(cfg, group)?;
        (series, state)
    };
    if state.step >= cfg.last_step {
        return Err(Error::InvalidConfig(format!(
            "checkpoint is already at step {}, nothing to do before last_step {}",
            state.step, cfg.last_step
        )));
    }

    let first_step = state.step + 1;
    let mut ionized_total = 0u64;
    let mut diag_iterations = Vec::new();
    let mut checkpoints = 0u64;
    let mut bytes_raw = 0u64;
    let mut bytes_stored = 0u64;

    while state.step < cfg.last_step {
        let report = state.advance();
        ionized_total += state.group.all_reduce_sum(report.ionized)?;

        let step = state.step;
        let diag_due = step % cfg.datfile == 0
            || (cfg.mvflag > 0 && step % cfg.mvstep == 0);
        if diag_due {
            let st = state.emit_diagnostics(&mut series)?;
            bytes_raw += st.bytes_raw;
            bytes_stored += st.bytes_stored;
            diag_iterations.push(step);
        }
        if step % cfg.dmpstep == 0 || step == cfg.last_step {
            let st = state.checkpoint(&mut series)?;
            bytes_raw += st.bytes_raw;
            bytes_stored += st.bytes_stored;
            checkpoints += 1;
        }
    }

    let final_counts = state.global_counts()?;
    series.close()?;
    Ok(RunSummary {
        series: series.dir().to_path_buf(),
        first_step,
        last_step: state.step,
        ionized_total,
        final_counts,
        diag_iterations,
        checkpoints,
        bytes_raw,
        bytes_stored,
        monitor_log: series.monitor_log().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deck(text: &str) -> SimConfig {
        SimConfig::from_toml(text).unwrap()
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = SimConfig::default();
        assert_eq!(c.n_cells, 1000);
        assert_eq!(c.particles_per_species, 1000);
        assert_eq!(c.dt, 1.0);
        assert_eq!(c.ne_r, 1.0e-4);
        assert_eq!(c.datfile, 100);
        assert_eq!(c.dmpstep, 500);
        assert_eq!(c.mvflag, 0);
        assert_eq!(c.mvstep, 100);
        assert_eq!(c.last_step, 2000);
        assert_eq!(c.seed, 42);
    }

    #[test]
    fn deck_rejects_zero_last_step_and_unknown_keys() {
        assert!(SimConfig::from_toml("last_step = 0").is_err());
        assert!(SimConfig::from_toml("lastStep = 10").is_err());
        assert!(SimConfig::from_toml("datfile = 0").is_err());
        assert!(SimConfig::from_toml("mvflag = 4\nmvstep = 0").is_err());
    }

    #[test]
    fn particle_share_splits_remainder_to_low_ranks() {
        let total: u64 = (0..5).map(|r| share(14, r, 5)).sum();
        assert_eq!(total, 14);
        assert_eq!(share(14, 0, 5), 3);
        assert_eq!(share(14, 3, 5), 3);
        assert_eq!(share(14, 4, 5), 2);
    }

    #[test]
    fn cell_blocks_partition_domain() {
        for n in [1u64, 7, 100, 1001] {
            for size in 1..=n.min(9) {
                let mut next = 0;
                for r in 0..size {
                    let (lo, hi) = cell_block(r, size, n);
                    assert_eq!(lo, next);
                    assert!(hi >= lo);
                    next = hi;
                }
                assert_eq!(next, n);
            }
        }
    }

    #[test]
    fn conservation_holds_every_step() {
        let cfg = deck("n_cells = 64\nparticles_per_species = 500\nne_r = 0.01\nlast_step = 50");
        let g = RankGroup::solo();
        let mut st = SimState::init(cfg, &g).unwrap();
        let [e0, i0, n0] = st.counts();
        for _ in 0..50 {
            let before = st.counts();
            let rep = st.advance();
            let after = st.counts();
            assert_eq!(after[0] - before[0], rep.ionized);
            assert_eq!(after[1] - before[1], rep.ionized);
            assert_eq!(before[2] - after[2], rep.ionized);
            // Grid mass equals live particles, species by species.
            for s in 0..3 {
                let total: f64 = st.deposit(s).iter().sum();
                assert_eq!(total, st.counts()[s] as f64);
            }
        }
        let [e1, i1, n1] = st.counts();
        assert_eq!(e1 - e0, i1 - i0);
        assert_eq!(e1 - e0, n0 - n1);
    }

    #[test]
    fn positions_stay_in_domain() {
        let cfg = deck("n_cells = 16\nparticles_per_species = 200\nlast_step = 30\ndt = 3.7");
        let g = RankGroup::solo();
        let mut st = SimState::init(cfg, &g).unwrap();
        for _ in 0..30 {
            st.advance();
            for set in &st.species {
                for &x in &set.x {
                    assert!((0.0..16.0).contains(&x), "x = {x}");
                }
            }
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let cfg = deck("particles_per_species = 300\nne_r = 0.001\nlast_step = 20");
        let g = RankGroup::solo();
        let mut a = SimState::init(cfg, &g).unwrap();
        let mut b = SimState::init(cfg, &g).unwrap();
        for _ in 0..20 {
            a.advance();
            b.advance();
        }
        assert_eq!(a.species[ELECTRON].x, b.species[ELECTRON].x);
        assert_eq!(a.species[NEUTRAL].vx, b.species[NEUTRAL].vx);
    }

    #[test]
    fn different_seeds_diverge() {
        let g = RankGroup::solo();
        let mut a = SimState::init(deck("seed = 1\nne_r = 0.01"), &g).unwrap();
        let mut b = SimState::init(deck("seed = 2\nne_r = 0.01"), &g).unwrap();
        for _ in 0..5 {
            a.advance();
            b.advance();
        }
        assert_ne!(a.species[ELECTRON].x, b.species[ELECTRON].x);
    }

    #[test]
    fn ionization_rate_matches_expectation_roughly() {
        // One step with p = 1 - e^(-0.5); 20000 neutrals.
        let cfg = deck("n_cells = 100\nparticles_per_species = 20000\nne_r = 0.5\nlast_step = 1");
        let g = RankGroup::solo();
        let mut st = SimState::init(cfg, &g).unwrap();
        let rep = st.advance();
        let p = 1.0 - (-0.5f64).exp();
        let mean = 20000.0 * p;
        let sigma = (20000.0 * p * (1.0 - p)).sqrt();
        assert!(
            (rep.ionized as f64 - mean).abs() < 4.0 * sigma,
            "ionized {} vs mean {mean:.1} sigma {sigma:.1}",
            rep.ionized
        );
    }

    #[test]
    fn moving_average_window_is_bounded() {
        let cfg = deck("n_cells = 8\nparticles_per_species = 10\nmvflag = 3\nmvstep = 2\nlast_step = 10");
        let g = RankGroup::solo();
        let mut st = SimState::init(cfg, &g).unwrap();
        for i in 1..=10u64 {
            st.advance();
            let want = i.min(3) as usize;
            assert_eq!(st.window[0].len(), want);
        }
    }
}
