//! The log-structured storage engine: aggregation planning, the write path,
//! and the verifying reader.

pub mod layout;
pub mod reader;
pub mod writer;

use crate::error::{Error, Result};

/// How ranks map onto data subfiles in aggregated mode.
///
/// Ranks are split into `num_subfiles` contiguous blocks; block k is the
/// half-open rank range `[ceil(k*n/m), ceil((k+1)*n/m))`. The lowest rank
/// of each block is the block's aggregator and the only writer of its
/// subfile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatorMap {
    n_ranks: u32,
    num_subfiles: u32,
}

impl AggregatorMap {
    pub fn n_ranks(&self) -> u32 {
        self.n_ranks
    }

    pub fn num_subfiles(&self) -> u32 {
        self.num_subfiles
    }

    fn block_start(&self, k: u32) -> u32 {
        // ceil(k * n / m) without overflow at these sizes.
        ((k as u64 * self.n_ranks as u64).div_ceil(self.num_subfiles as u64)) as u32
    }

    /// Subfile the rank's chunks are routed to.
    pub fn subfile_of(&self, rank: u32) -> u32 {
        debug_assert!(rank < self.n_ranks);
        // Invert the block partition: largest k with block_start(k) <= rank.
        let mut k = (rank as u64 * self.num_subfiles as u64 / self.n_ranks as u64) as u32;
        while self.block_start(k + 1) <= rank {
            k += 1;
        }
        while self.block_start(k) > rank {
            k -= 1;
        }
        k
    }

    /// The rank that performs appends for subfile `k`.
    pub fn aggregator_of(&self, k: u32) -> u32 {
        debug_assert!(k < self.num_subfiles);
        self.block_start(k)
    }

    /// Ranks whose chunks land in subfile `k`, in rank order.
    pub fn block_ranks(&self, k: u32) -> std::ops::Range<u32> {
        self.block_start(k)..self.block_start(k + 1)
    }

    pub fn is_aggregator(&self, rank: u32) -> bool {
        self.subfile_of(rank) < self.num_subfiles && self.aggregator_of(self.subfile_of(rank)) == rank
    }
}

/// Build the rank-to-subfile map. A request for more subfiles than ranks is
/// clamped so that the map stays surjective.
pub fn plan_aggregation(n_ranks: u32, requested_subfiles: u32) -> Result<AggregatorMap> {
    if n_ranks == 0 {
        return Err(Error::InvalidConfig("aggregation over zero ranks".into()));
    }
    if requested_subfiles == 0 {
        return Err(Error::InvalidConfig("num_aggregators must be >= 1".into()));
    }
    Ok(AggregatorMap {
        n_ranks,
        num_subfiles: requested_subfiles.min(n_ranks),
    })
}

/// Files a completed aggregated-mode series occupies: the data subfiles,
/// md.0 and md.idx, and profiling.json when profiling is on.
pub fn count_output_files(num_aggregators: u32, profiling: bool) -> u64 {
    num_aggregators as u64 + 2 + u64::from(profiling)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_ranks_two_subfiles_splits_in_half() {
        let map = plan_aggregation(8, 2).unwrap();
        for r in 0..4 {
            assert_eq!(map.subfile_of(r), 0, "rank {r}");
        }
        for r in 4..8 {
            assert_eq!(map.subfile_of(r), 1, "rank {r}");
        }
        assert_eq!(map.aggregator_of(0), 0);
        assert_eq!(map.aggregator_of(1), 4);
    }

    #[test]
    fn identity_map_when_counts_match() {
        let map = plan_aggregation(5, 5).unwrap();
        for r in 0..5 {
            assert_eq!(map.subfile_of(r), r);
            assert!(map.is_aggregator(r));
        }
    }

    #[test]
    fn requests_beyond_rank_count_clamp() {
        let map = plan_aggregation(3, 64).unwrap();
        assert_eq!(map.num_subfiles(), 3);
    }

    #[test]
    fn blocks_are_contiguous_balanced_and_surjective() {
        for n in 1..=32u32 {
            for m in 1..=n {
                let map = plan_aggregation(n, m).unwrap();
                let mut sizes = Vec::new();
                let mut next_rank = 0u32;
                for k in 0..m {
                    let block = map.block_ranks(k);
                    assert_eq!(block.start, next_rank, "n={n} m={m} k={k}");
                    assert!(!block.is_empty(), "n={n} m={m} k={k} empty block");
                    next_rank = block.end;
                    sizes.push(block.len() as u32);
                    for r in block {
                        assert_eq!(map.subfile_of(r), k);
                    }
                    assert_eq!(map.subfile_of(map.aggregator_of(k)), k);
                }
                assert_eq!(next_rank, n);
                let max = sizes.iter().max().unwrap();
                let min = sizes.iter().min().unwrap();
                assert!(max - min <= 1, "n={n} m={m} sizes {sizes:?}");
            }
        }
    }

    #[test]
    fn file_count_law() {
        assert_eq!(count_output_files(1, false), 3);
        assert_eq!(count_output_files(1, true), 4);
        assert_eq!(count_output_files(8, true), 11);
    }
}
