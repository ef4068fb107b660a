//! Fragmentation-free dual-pool block allocation and the residency ledger.
//!
//! HBM is partitioned into two fixed-block pools, one per precision tier,
//! plus a small transient buffer that absorbs in-flight transfer bursts.
//! Blocks within a pool are uniform, so allocation is a free-list pop and
//! can never fragment. The low pool is sized for all `N` experts (not just
//! `n_cold`) so a demotion can always complete without eviction deadlock.
//!
//! Allocation is lowest-free-index-first, which makes replay deterministic:
//! the same operation sequence always produces the same block assignments.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::controller::LayerBudget;
use crate::model::{Bytes, ExpertRef, ModelConfig, PrecisionTier, ResidencyTier};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolError {
    /// Free list empty; the caller must defer, the pool never grows.
    Exhausted { tier: PrecisionTier },
    /// Double free, foreign handle, or unbalanced transient release. Fatal:
    /// the ledger no longer matches reality.
    LedgerCorruption(&'static str),
    /// Transient reservation would exceed capacity; the transition must be
    /// deferred, not failed.
    TransientExhausted { requested: Bytes, available: Bytes },
    /// Pool construction from an infeasible budget.
    Infeasible(&'static str),
}

impl fmt::Display for PoolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolError::Exhausted { tier } => write!(f, "pool exhausted: {tier:?}"),
            PoolError::LedgerCorruption(m) => write!(f, "ledger corruption: {m}"),
            PoolError::TransientExhausted { requested, available } => {
                write!(f, "transient buffer exhausted: requested {requested}, available {available}")
            }
            PoolError::Infeasible(m) => write!(f, "infeasible pool construction: {m}"),
        }
    }
}

/// Handle to one allocated block. Handles are only minted by `alloc` and
/// consumed by `free`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHandle {
    pub tier: PrecisionTier,
    pub index: u32,
}

/// One fixed-block region: a free list (ordered, so the lowest index wins)
/// plus an owner ledger.
#[derive(Debug, Clone)]
struct FixedPool {
    block_bytes: Bytes,
    capacity: u32,
    free: BTreeSet<u32>,
    owner: Vec<Option<ExpertRef>>,
}

impl FixedPool {
    fn new(block_bytes: Bytes, capacity: u32) -> Self {
        Self {
            block_bytes,
            capacity,
            free: (0..capacity).collect(),
            owner: vec![None; capacity as usize],
        }
    }

    fn alloc(&mut self, owner: ExpertRef, tier: PrecisionTier) -> Result<BlockHandle, PoolError> {
        let index = *self.free.iter().next().ok_or(PoolError::Exhausted { tier })?;
        self.free.remove(&index);
        self.owner[index as usize] = Some(owner);
        Ok(BlockHandle { tier, index })
    }

    fn free_block(&mut self, index: u32) -> Result<(), PoolError> {
        if index >= self.capacity {
            return Err(PoolError::LedgerCorruption("foreign block handle"));
        }
        if self.owner[index as usize].is_none() {
            return Err(PoolError::LedgerCorruption("double free"));
        }
        self.owner[index as usize] = None;
        self.free.insert(index);
        Ok(())
    }

    fn used(&self) -> u32 {
        self.capacity - self.free.len() as u32
    }

    fn check_accounting(&self) -> bool {
        let owned = self.owner.iter().filter(|o| o.is_some()).count() as u32;
        self.free.len() as u32 + owned == self.capacity
    }
}

/// Bounded staging capacity for in-flight transfers.
#[derive(Debug, Clone)]
pub struct TransientBuffer {
    capacity: Bytes,
    in_use: Bytes,
}

/// Token proving a transient reservation; must be released exactly once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransientReservation {
    pub bytes: Bytes,
}

impl TransientBuffer {
    pub fn reserve(&mut self, bytes: Bytes) -> Result<TransientReservation, PoolError> {
        let available = self.capacity - self.in_use;
        if bytes > available {
            return Err(PoolError::TransientExhausted { requested: bytes, available });
        }
        self.in_use += bytes;
        Ok(TransientReservation { bytes })
    }

    pub fn release(&mut self, r: TransientReservation) -> Result<(), PoolError> {
        if r.bytes > self.in_use {
            return Err(PoolError::LedgerCorruption("unbalanced transient release"));
        }
        self.in_use -= r.bytes;
        Ok(())
    }

    pub fn in_use(&self) -> Bytes {
        self.in_use
    }

    pub fn capacity(&self) -> Bytes {
        self.capacity
    }
}

/// Snapshot of pool and transient occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Occupancy {
    pub used_high: u32,
    pub free_high: u32,
    pub used_low: u32,
    pub free_low: u32,
    pub transient_in_use: Bytes,
    pub transient_capacity: Bytes,
    /// Fixed pool bytes plus transient bytes currently in use.
    pub total_bytes: Bytes,
    /// Fixed pool bytes (constant after construction).
    pub pool_bytes: Bytes,
}

/// Dual fixed-block pools for one layer, plus the transient buffer.
#[derive(Debug, Clone)]
pub struct DualPool {
    high: FixedPool,
    low: FixedPool,
    transient: TransientBuffer,
}

impl DualPool {
    /// Builds the pools for one layer: `n_hot` high blocks and `N` low
    /// blocks (every expert must be storable at low precision at once,
    /// since demotions may eventually make all experts low).
    pub fn create(budget: &LayerBudget, config: &ModelConfig, transient_bytes: Bytes) -> Result<Self, PoolError> {
        if budget.n_hot + budget.n_cold != config.experts_per_layer {
            return Err(PoolError::Infeasible("n_hot + n_cold != experts_per_layer"));
        }
        Ok(Self {
            high: FixedPool::new(config.expert_bytes_high, budget.n_hot),
            low: FixedPool::new(config.expert_bytes_low, config.experts_per_layer),
            transient: TransientBuffer {
                capacity: transient_bytes,
                in_use: 0,
            },
        })
    }

    fn pool(&mut self, tier: PrecisionTier) -> &mut FixedPool {
        match tier {
            PrecisionTier::High => &mut self.high,
            PrecisionTier::Low => &mut self.low,
        }
    }

    /// Allocates the lowest-index free block in the tier's pool. O(log n)
    /// on the ordered free list; never grows the pool.
    pub fn alloc(&mut self, tier: PrecisionTier, owner: ExpertRef) -> Result<BlockHandle, PoolError> {
        self.pool(tier).alloc(owner, tier)
    }

    /// Returns a block to its free list. Double frees and foreign handles
    /// are fatal ledger corruption.
    pub fn free(&mut self, handle: BlockHandle) -> Result<(), PoolError> {
        self.pool(handle.tier).free_block(handle.index)
    }

    pub fn reserve_transient(&mut self, bytes: Bytes) -> Result<TransientReservation, PoolError> {
        self.transient.reserve(bytes)
    }

    pub fn release_transient(&mut self, r: TransientReservation) -> Result<(), PoolError> {
        self.transient.release(r)
    }

    pub fn transient_free(&self) -> Bytes {
        self.transient.capacity - self.transient.in_use
    }

    pub fn occupancy(&self) -> Occupancy {
        let pool_bytes = self.high.capacity as u64 * self.high.block_bytes
            + self.low.capacity as u64 * self.low.block_bytes;
        Occupancy {
            used_high: self.high.used(),
            free_high: self.high.free.len() as u32,
            used_low: self.low.used(),
            free_low: self.low.free.len() as u32,
            transient_in_use: self.transient.in_use,
            transient_capacity: self.transient.capacity,
            total_bytes: pool_bytes + self.transient.in_use,
            pool_bytes,
        }
    }

    pub fn high_capacity(&self) -> u32 {
        self.high.capacity
    }

    pub fn low_capacity(&self) -> u32 {
        self.low.capacity
    }

    pub fn owner_of(&self, handle: BlockHandle) -> Option<ExpertRef> {
        match handle.tier {
            PrecisionTier::High => self.high.owner.get(handle.index as usize).copied().flatten(),
            PrecisionTier::Low => self.low.owner.get(handle.index as usize).copied().flatten(),
        }
    }

    /// Accounting invariant: used + free = capacity in both pools, and
    /// transient in-use within capacity.
    pub fn check_accounting(&self) -> bool {
        self.high.check_accounting()
            && self.low.check_accounting()
            && self.transient.in_use <= self.transient.capacity
    }
}

/// Stable per-expert record: precision tier, owned HBM block, residency,
/// and a monotonically increasing version number. Forward reads resolve
/// exclusively through this index.
#[derive(Debug, Clone)]
pub struct ResidencyIndex {
    experts_per_layer: u32,
    entries: Vec<ResidencyEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidencyEntry {
    pub tier: PrecisionTier,
    pub block: Option<BlockHandle>,
    pub residency: ResidencyTier,
    pub version: u64,
}

impl ResidencyIndex {
    /// All experts start at low precision, HBM-resident, version 1, with
    /// their low blocks taken from the per-layer pools in expert order.
    pub fn initial(config: &ModelConfig, pools: &mut [DualPool]) -> Result<Self, PoolError> {
        let mut entries = Vec::with_capacity(config.total_experts() as usize);
        for e in config.all_experts() {
            let block = pools[e.layer as usize].alloc(PrecisionTier::Low, e)?;
            entries.push(ResidencyEntry {
                tier: PrecisionTier::Low,
                block: Some(block),
                residency: ResidencyTier::Hbm,
                version: 1,
            });
        }
        Ok(Self {
            experts_per_layer: config.experts_per_layer,
            entries,
        })
    }

    fn idx(&self, e: ExpertRef) -> usize {
        (e.layer * self.experts_per_layer + e.expert) as usize
    }

    pub fn entry(&self, e: ExpertRef) -> &ResidencyEntry {
        &self.entries[self.idx(e)]
    }

    /// The precision tier of the expert's last registered version. Never
    /// exposes a mid-transition state.
    pub fn stable_tier(&self, e: ExpertRef) -> PrecisionTier {
        self.entries[self.idx(e)].tier
    }

    pub fn version(&self, e: ExpertRef) -> u64 {
        self.entries[self.idx(e)].version
    }

    /// Atomically registers a new stable version: swaps in the new block,
    /// flips the tier, bumps the version, and returns the old block for
    /// immediate reclamation.
    pub fn register(
        &mut self,
        e: ExpertRef,
        tier: PrecisionTier,
        block: BlockHandle,
    ) -> Result<BlockHandle, PoolError> {
        let i = self.idx(e);
        let old = self.entries[i]
            .block
            .ok_or(PoolError::LedgerCorruption("register on expert without stable block"))?;
        self.entries[i] = ResidencyEntry {
            tier,
            block: Some(block),
            residency: ResidencyTier::Hbm,
            version: self.entries[i].version + 1,
        };
        Ok(old)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(n: u32, high: Bytes, low: Bytes) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            experts_per_layer: n,
            experts_active_per_token: 1,
            expert_bytes_high: high,
            expert_bytes_low: low,
        }
    }

    fn budget(n: u32, n_hot: u32) -> LayerBudget {
        LayerBudget {
            n_hot,
            n_cold: n - n_hot,
            tau_h: None,
            hbm_budget: u64::MAX,
        }
    }

    fn er(e: u32) -> ExpertRef {
        ExpertRef::new(0, e)
    }

    #[test]
    fn create_all_low_corner() {
        let c = cfg(8, 4, 1);
        let p = DualPool::create(&budget(8, 0), &c, 8).unwrap();
        assert_eq!(p.high_capacity(), 0);
        assert_eq!(p.low_capacity(), 8);
    }

    #[test]
    fn create_low_pool_covers_worst_case_occupancy() {
        // oracle: worst-case enumeration over reachable tier mixes — any
        // h highs and (N - h) lows plus one in-flight dual copy must fit.
        let c = cfg(4, 4, 1);
        let p = DualPool::create(&budget(4, 2), &c, 8).unwrap();
        assert_eq!(p.high_capacity(), 2);
        assert_eq!(p.low_capacity(), 4);
        for highs in 0..=2u32 {
            let lows = 4 - highs;
            assert!(highs <= p.high_capacity() && lows <= p.low_capacity());
        }
    }

    #[test]
    fn alloc_is_lowest_index_first() {
        let c = cfg(8, 4, 1);
        let mut p = DualPool::create(&budget(8, 4), &c, 0).unwrap();
        assert_eq!(p.alloc(PrecisionTier::High, er(0)).unwrap().index, 0);
        let b = p.alloc(PrecisionTier::High, er(1)).unwrap();
        assert_eq!(b.index, 1);
        p.alloc(PrecisionTier::High, er(2)).unwrap();
        p.free(b).unwrap();
        assert_eq!(p.alloc(PrecisionTier::High, er(3)).unwrap().index, 1);
    }

    #[test]
    fn alloc_exhaustion_boundary() {
        let c = cfg(8, 4, 1);
        let mut p = DualPool::create(&budget(8, 2), &c, 0).unwrap();
        p.alloc(PrecisionTier::High, er(0)).unwrap();
        p.alloc(PrecisionTier::High, er(1)).unwrap();
        assert_eq!(
            p.alloc(PrecisionTier::High, er(2)),
            Err(PoolError::Exhausted { tier: PrecisionTier::High })
        );
    }

    #[test]
    fn double_free_is_fatal() {
        let c = cfg(8, 4, 1);
        let mut p = DualPool::create(&budget(8, 2), &c, 0).unwrap();
        let before = p.occupancy();
        let b = p.alloc(PrecisionTier::High, er(0)).unwrap();
        p.free(b).unwrap();
        assert_eq!(p.occupancy(), before);
        assert!(matches!(p.free(b), Err(PoolError::LedgerCorruption(_))));
    }

    #[test]
    fn transient_boundary_and_reuse() {
        let c = cfg(8, 4, 1);
        let mut p = DualPool::create(&budget(8, 2), &c, 8).unwrap();
        let r = p.reserve_transient(8).unwrap();
        assert!(matches!(p.reserve_transient(1), Err(PoolError::TransientExhausted { .. })));
        p.release_transient(r).unwrap();
        let r = p.reserve_transient(4).unwrap();
        p.release_transient(r).unwrap();
        p.reserve_transient(8).unwrap();
    }

    #[test]
    fn occupancy_fresh_and_after_allocs() {
        let c = cfg(8, 4, 1);
        let mut p = DualPool::create(&budget(8, 4), &c, 8).unwrap();
        let o = p.occupancy();
        assert_eq!((o.used_high, o.used_low, o.transient_in_use), (0, 0, 0));
        for e in 0..3 {
            p.alloc(PrecisionTier::Low, er(e)).unwrap();
        }
        assert_eq!(p.occupancy().used_low, 3);
    }

    #[test]
    fn residency_index_initial_state() {
        let c = cfg(4, 4, 1);
        let mut pools = vec![DualPool::create(&budget(4, 2), &c, 0).unwrap()];
        let idx = ResidencyIndex::initial(&c, &mut pools).unwrap();
        for e in c.all_experts() {
            assert_eq!(idx.stable_tier(e), PrecisionTier::Low);
            assert_eq!(idx.version(e), 1);
            assert_eq!(idx.entry(e).residency, ResidencyTier::Hbm);
        }
        assert_eq!(pools[0].occupancy().used_low, 4);
    }

    #[test]
    fn register_bumps_version_and_returns_old_block() {
        let c = cfg(4, 4, 1);
        let mut pools = vec![DualPool::create(&budget(4, 2), &c, 0).unwrap()];
        let mut idx = ResidencyIndex::initial(&c, &mut pools).unwrap();
        let e = er(1);
        let new = pools[0].alloc(PrecisionTier::High, e).unwrap();
        let old = idx.register(e, PrecisionTier::High, new).unwrap();
        assert_eq!(old.tier, PrecisionTier::Low);
        assert_eq!(idx.stable_tier(e), PrecisionTier::High);
        assert_eq!(idx.version(e), 2);
        pools[0].free(old).unwrap();
        assert!(pools[0].check_accounting());
    }

    // Reference allocator: plain lowest-free scan over a bool vector.
    struct RefAlloc {
        used: Vec<bool>,
    }

    impl RefAlloc {
        fn alloc(&mut self) -> Option<u32> {
            let i = self.used.iter().position(|&u| !u)?;
            self.used[i] = true;
            Some(i as u32)
        }
        fn free(&mut self, i: u32) -> bool {
            if self.used[i as usize] {
                self.used[i as usize] = false;
                true
            } else {
                false
            }
        }
    }

    proptest! {
        #[test]
        fn random_sequences_match_reference_allocator(
            ops in proptest::collection::vec((proptest::bool::ANY, 0u32..16), 0..400)
        ) {
            let c = cfg(16, 4, 1);
            let mut p = DualPool::create(&budget(16, 16), &c, 0).unwrap();
            let mut r = RefAlloc { used: vec![false; 16] };
            let mut live: Vec<BlockHandle> = Vec::new();
            for (is_alloc, pick) in ops {
                if is_alloc {
                    match (p.alloc(PrecisionTier::High, er(0)), r.alloc()) {
                        (Ok(h), Some(i)) => {
                            prop_assert_eq!(h.index, i);
                            live.push(h);
                        }
                        (Err(PoolError::Exhausted { .. }), None) => {}
                        other => prop_assert!(false, "divergence: {:?}", other.0),
                    }
                } else if !live.is_empty() {
                    let h = live.remove(pick as usize % live.len());
                    prop_assert!(p.free(h).is_ok());
                    prop_assert!(r.free(h.index));
                }
                prop_assert!(p.check_accounting());
            }
        }
    }
}
