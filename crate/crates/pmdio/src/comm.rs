//! In-process rank groups and the collectives the engine needs.
//!
//! A [`RankGroup`] looks like a tiny MPI communicator: `size` ranks, each
//! owned by one thread, exchanging values through a shared rendezvous. The
//! set of collectives is deliberately small (barrier, all_gather, prefix
//! sums, reductions); everything the storage engine does is built from them.
//!
//! Two failure modes are detected rather than left to hang:
//!
//! * mismatched collectives: every call carries an (op, per-rank call
//!   sequence) tag, and the rendezvous rejects the round if members disagree;
//! * member panic: a panicking rank poisons the group, and every blocked or
//!   future collective returns [`Error::GroupFault`] with the origin rank.
//!
//! Values are deterministic regardless of thread scheduling: gathers are
//! slotted by rank, and reductions fold in rank order.

use std::any::Any;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use crate::error::{Error, Result};

/// Tag carried by every collective call, used for mismatch detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct CallTag {
    seq: u64,
    op: &'static str,
}

type Slot = Option<(CallTag, Arc<dyn Any + Send + Sync>)>;

struct RoundState {
    slots: Vec<Slot>,
    arrived: usize,
    departed: usize,
    generation: u64,
    /// Snapshot published by the last arriver, consumed by everyone.
    published: Option<std::result::Result<Arc<Vec<Arc<dyn Any + Send + Sync>>>, String>>,
}

struct Shared {
    round: Mutex<RoundState>,
    cv: Condvar,
    fault: Mutex<Option<(usize, String)>>,
}

impl Shared {
    fn poison(&self, rank: usize, reason: String) {
        let mut f = self.fault.lock().unwrap();
        if f.is_none() {
            *f = Some((rank, reason));
        }
        drop(f);
        self.cv.notify_all();
    }

    fn fault_error(&self) -> Option<Error> {
        self.fault
            .lock()
            .unwrap()
            .as_ref()
            .map(|(rank, reason)| Error::GroupFault {
                rank: *rank,
                reason: reason.clone(),
            })
    }
}

/// Per-rank handle to a group of `size` ranks.
///
/// Cheap to clone; clones on the same rank share the collective sequence
/// counter, so a rank may drive several consumers (say, two open series)
/// through one membership. The handle is `Send` so a spawner can construct
/// it and move it into the rank's thread; it is not meant to be shared
/// across threads.
#[derive(Clone)]
pub struct RankGroup {
    rank: usize,
    size: usize,
    seq: Arc<AtomicU64>,
    shared: Arc<Shared>,
}

impl RankGroup {
    /// Single-member group, useful for serial tools and tests.
    pub fn solo() -> RankGroup {
        let shared = new_shared(1);
        RankGroup {
            rank: 0,
            size: 1,
            seq: Arc::new(AtomicU64::new(0)),
            shared,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Gather one value from every rank; returns the vector indexed by rank.
    ///
    /// The result is shared (`Arc`) so large per-rank payloads are exchanged
    /// without copying them once per member.
    pub fn all_gather<T: Send + Sync + 'static>(&self, value: T) -> Result<Arc<Vec<Arc<T>>>> {
        let raw = self.exchange("all_gather", Arc::new(value))?;
        let mut out = Vec::with_capacity(raw.len());
        for v in raw.iter() {
            out.push(
                v.clone()
                    .downcast::<T>()
                    .map_err(|_| Error::CollectiveMismatch("payload type mismatch".into()))?,
            );
        }
        Ok(Arc::new(out))
    }

    /// Block until every member has arrived.
    pub fn barrier(&self) -> Result<()> {
        self.exchange("barrier", Arc::new(())).map(|_| ())
    }

    /// Sum of `value` over all ranks.
    pub fn all_reduce_sum(&self, value: u64) -> Result<u64> {
        let parts = self.exchange("all_reduce_sum", Arc::new(value))?;
        let mut total: u64 = 0;
        for p in parts.iter() {
            let v = p
                .downcast_ref::<u64>()
                .ok_or_else(|| Error::CollectiveMismatch("payload type mismatch".into()))?;
            total = total
                .checked_add(*v)
                .ok_or_else(|| Error::InvalidExtent("all_reduce_sum overflow".into()))?;
        }
        Ok(total)
    }

    /// Exclusive prefix sum: rank r receives the sum of values of ranks < r.
    ///
    /// This is the offset collective used when ranks contribute
    /// variable-length pieces of one global array.
    pub fn exclusive_prefix_sum(&self, value: u64) -> Result<u64> {
        let parts = self.exchange("exclusive_prefix_sum", Arc::new(value))?;
        let mut acc: u64 = 0;
        for (r, p) in parts.iter().enumerate() {
            if r == self.rank {
                break;
            }
            let v = p
                .downcast_ref::<u64>()
                .ok_or_else(|| Error::CollectiveMismatch("payload type mismatch".into()))?;
            acc = acc
                .checked_add(*v)
                .ok_or_else(|| Error::InvalidExtent("prefix sum overflow".into()))?;
        }
        Ok(acc)
    }

    /// Core rendezvous: deposit a tagged value, wait for the full round,
    /// receive the rank-indexed snapshot.
    fn exchange(
        &self,
        op: &'static str,
        value: Arc<dyn Any + Send + Sync>,
    ) -> Result<Arc<Vec<Arc<dyn Any + Send + Sync>>>> {
        let tag = CallTag {
            seq: self.seq.fetch_add(1, Ordering::Relaxed),
            op,
        };

        if let Some(e) = self.shared.fault_error() {
            return Err(e);
        }
        if self.size == 1 {
            return Ok(Arc::new(vec![value]));
        }

        let mut round = self.shared.round.lock().unwrap();
        // Wait out the tail of the previous round.
        while round.departed != 0 {
            if let Some(e) = self.shared.fault_error() {
                return Err(e);
            }
            round = self.shared.cv.wait(round).unwrap();
        }
        let my_generation = round.generation;
        round.slots[self.rank] = Some((tag, value));
        round.arrived += 1;

        if round.arrived == self.size {
            // Last arriver validates tags and publishes the snapshot.
            let mut mismatch = None;
            let first = round.slots[0].as_ref().map(|(t, _)| *t).unwrap();
            for (r, slot) in round.slots.iter().enumerate() {
                let (t, _) = slot.as_ref().unwrap();
                if *t != first {
                    mismatch = Some(format!(
                        "rank 0 called {}#{} but rank {} called {}#{}",
                        first.op, first.seq, r, t.op, t.seq
                    ));
                    break;
                }
            }
            let snapshot = match mismatch {
                Some(m) => Err(m),
                None => Ok(Arc::new(
                    round
                        .slots
                        .iter_mut()
                        .map(|s| s.take().unwrap().1)
                        .collect::<Vec<_>>(),
                )),
            };
            if snapshot.is_err() {
                for s in round.slots.iter_mut() {
                    *s = None;
                }
            }
            round.published = Some(snapshot);
            round.arrived = 0;
            round.departed = self.size;
            self.shared.cv.notify_all();
        } else {
            while round.generation == my_generation && round.published.is_none() {
                if let Some(e) = self.shared.fault_error() {
                    return Err(e);
                }
                round = self.shared.cv.wait(round).unwrap();
            }
        }

        let result = round.published.clone().expect("published snapshot");
        round.departed -= 1;
        if round.departed == 0 {
            round.published = None;
            round.generation += 1;
            self.shared.cv.notify_all();
        }
        drop(round);

        result.map_err(|m| {
            self.shared
                .poison(self.rank, format!("collective mismatch: {m}"));
            Error::CollectiveMismatch(m)
        })
    }
}

fn new_shared(size: usize) -> Arc<Shared> {
    Arc::new(Shared {
        round: Mutex::new(RoundState {
            slots: (0..size).map(|_| None).collect(),
            arrived: 0,
            departed: 0,
            generation: 0,
            published: None,
        }),
        cv: Condvar::new(),
        fault: Mutex::new(None),
    })
}

/// Run `program` once per rank on `size` threads and collect the results in
/// rank order.
///
/// A panic on any rank poisons the group (so peers blocked in collectives
/// fail fast instead of deadlocking) and surfaces as [`Error::GroupFault`]
/// naming the first offending rank.
pub fn spawn_group<T, F>(size: usize, program: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(RankGroup) -> T + Send + Sync,
{
    if size == 0 {
        return Err(Error::InvalidConfig("group size must be >= 1".into()));
    }
    let shared = new_shared(size);
    let program = &program;

    let results = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(size);
        for rank in 0..size {
            let shared = shared.clone();
            handles.push(scope.spawn(move || {
                let group = RankGroup {
                    rank,
                    size,
                    seq: Arc::new(AtomicU64::new(0)),
                    shared: shared.clone(),
                };
                let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    program(group)
                }));
                if let Err(p) = &out {
                    let reason = panic_message(p);
                    shared.poison(rank, reason);
                }
                out
            }));
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread join"))
            .collect::<Vec<_>>()
    });

    let mut out = Vec::with_capacity(size);
    for (rank, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => out.push(v),
            Err(p) => {
                return Err(Error::GroupFault {
                    rank,
                    reason: panic_message(&p),
                })
            }
        }
    }
    Ok(out)
}

fn panic_message(p: &(dyn Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::Ordering as AtomicOrdering;
    use std::sync::atomic::AtomicU64;
    use std::time::{Duration, Instant};

    #[test]
    fn per_rank_results_in_rank_order() {
        let out = spawn_group(4, |g| g.rank() * g.rank()).unwrap();
        assert_eq!(out, vec![0, 1, 4, 9]);
    }

    #[test]
    fn prefix_sum_matches_sequential_scan() {
        let values = [5u64, 0, 3, 9, 2];
        let out = spawn_group(values.len(), |g| {
            g.exclusive_prefix_sum(values[g.rank()]).unwrap()
        })
        .unwrap();
        let mut expect = Vec::new();
        let mut acc = 0;
        for v in values {
            expect.push(acc);
            acc += v;
        }
        assert_eq!(out, expect);
    }

    #[test]
    fn prefix_sum_all_zero() {
        let out = spawn_group(4, |g| g.exclusive_prefix_sum(0).unwrap()).unwrap();
        assert_eq!(out, vec![0, 0, 0, 0]);
    }

    #[test]
    fn all_reduce_sum_single_rank_identity() {
        let g = RankGroup::solo();
        assert_eq!(g.all_reduce_sum(7).unwrap(), 7);
    }

    #[test]
    fn all_reduce_matches_scan_total() {
        let values = [1u64, 2, 3, 4, 5, 6];
        let out =
            spawn_group(values.len(), |g| g.all_reduce_sum(values[g.rank()]).unwrap()).unwrap();
        assert!(out.iter().all(|&v| v == 21));
    }

    #[test]
    fn barrier_releases_after_last_entry() {
        // No rank may return before the last one has entered.
        let n = 4;
        let entries: Vec<AtomicU64> = (0..n).map(|_| AtomicU64::new(0)).collect();
        let entries = &entries;
        let t0 = Instant::now();
        let exits = spawn_group(n, move |g| {
            if g.rank() == n - 1 {
                std::thread::sleep(Duration::from_millis(30));
            }
            entries[g.rank()].store(t0.elapsed().as_nanos() as u64, AtomicOrdering::SeqCst);
            g.barrier().unwrap();
            t0.elapsed().as_nanos() as u64
        })
        .unwrap();
        let last_entry = entries.iter().map(|e| e.load(AtomicOrdering::SeqCst)).max().unwrap();
        assert!(exits.iter().all(|&e| e >= last_entry));
    }

    #[test]
    fn barrier_reusable_many_times() {
        let n = 3;
        let out = spawn_group(n, |g| {
            let mut steps = Vec::new();
            for i in 0..100u64 {
                g.barrier().unwrap();
                let seen = g.all_gather(i).unwrap();
                assert!(seen.iter().all(|v| **v == i));
                steps.push(i);
            }
            steps
        })
        .unwrap();
        for s in out {
            assert_eq!(s, (0..100).collect::<Vec<_>>());
        }
    }

    #[test]
    fn collective_values_independent_of_scheduling() {
        // Same inputs, many repetitions under whatever interleaving the
        // scheduler produces; the values must never change.
        for _ in 0..100 {
            let out = spawn_group(5, |g| {
                let p = g.exclusive_prefix_sum(g.rank() as u64 + 1).unwrap();
                let s = g.all_reduce_sum(g.rank() as u64 + 1).unwrap();
                (p, s)
            })
            .unwrap();
            assert_eq!(out, vec![(0, 15), (1, 15), (3, 15), (6, 15), (10, 15)]);
        }
    }

    #[test]
    fn mismatched_collectives_detected() {
        let results = spawn_group(2, |g| {
            if g.rank() == 0 {
                g.barrier()
            } else {
                g.all_reduce_sum(1).map(|_| ())
            }
        })
        .unwrap();
        assert!(results
            .iter()
            .all(|r| matches!(r, Err(Error::CollectiveMismatch(_)))));
    }

    #[test]
    fn panicking_rank_poisons_peers() {
        let err = spawn_group(3, |g| {
            if g.rank() == 1 {
                panic!("rank 1 dies");
            }
            // Peers are already blocked (or about to block) in a collective.
            g.barrier()
        })
        .unwrap_err();
        match err {
            Error::GroupFault { rank, .. } => assert_eq!(rank, 1),
            other => panic!("expected GroupFault, got {other:?}"),
        }
    }

    #[test]
    fn gather_large_payloads_by_reference() {
        let out = spawn_group(3, |g| {
            let mine = vec![g.rank() as u8; 1 << 16];
            let all = g.all_gather(mine).unwrap();
            all.iter().map(|v| v[0]).collect::<Vec<_>>()
        })
        .unwrap();
        assert!(out.iter().all(|v| v == &[0u8, 1, 2]));
    }

    #[test]
    fn zero_size_group_rejected() {
        assert!(matches!(
            spawn_group(0, |_| ()),
            Err(Error::InvalidConfig(_))
        ));
    }
}
