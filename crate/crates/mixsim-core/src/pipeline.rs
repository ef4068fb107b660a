//! Asynchronous promotion/demotion pipeline across SSD, DRAM, and HBM.
//!
//! A transition job walks `QUEUED -> SSD_FETCH -> DRAM_READY ->
//! H2D_TRANSFER -> REGISTER -> RECLAIM -> DONE`; stages are skipped when the
//! blob is already DRAM-cached, never revisited. Both links are single
//! serial channels with FIFO contention. Forward reads always resolve to
//! the last registered version, so the forward path never waits on any
//! stage. Prefetch stages high-precision blobs SSD->DRAM only, predicted
//! from cross-layer co-activation counts; it never touches HBM pool blocks
//! or stable tiers.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::controller::{Direction, HotnessTable, TransitionCommand};
use crate::model::{Bytes, ExpertRef, ModelConfig, PrecisionTier, Tick};
use crate::pool::{BlockHandle, DualPool, PoolError, ResidencyIndex, TransientReservation};

/// Bandwidths, fixed latencies, and DRAM cache capacity of the two
/// transfer links. Transfer time is `latency + ceil(size / bandwidth)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TierLinkModel {
    /// SSD -> DRAM bandwidth, bytes per tick.
    pub ssd_to_dram_bandwidth: u64,
    /// DRAM -> HBM bandwidth, bytes per tick.
    pub dram_to_hbm_bandwidth: u64,
    pub ssd_to_dram_latency: Tick,
    pub dram_to_hbm_latency: Tick,
    pub dram_cache_capacity: Bytes,
}

impl Default for TierLinkModel {
    fn default() -> Self {
        // ticks are nanoseconds at these defaults
        Self {
            ssd_to_dram_bandwidth: 4,      // 4 GB/s
            dram_to_hbm_bandwidth: 24,     // 24 GB/s
            ssd_to_dram_latency: 80_000,   // 80 us
            dram_to_hbm_latency: 10_000,   // 10 us
            dram_cache_capacity: 4 << 30,
        }
    }
}

impl TierLinkModel {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.ssd_to_dram_bandwidth == 0 || self.dram_to_hbm_bandwidth == 0 {
            return Err("link bandwidths must be positive");
        }
        Ok(())
    }

    fn ssd_transfer_ticks(&self, size: Bytes) -> Tick {
        self.ssd_to_dram_latency + size.div_ceil(self.ssd_to_dram_bandwidth)
    }

    fn h2d_transfer_ticks(&self, size: Bytes) -> Tick {
        self.dram_to_hbm_latency + size.div_ceil(self.dram_to_hbm_bandwidth)
    }
}

/// One serial transfer channel. Transfers occupy the link back to back;
/// intervals never overlap.
#[derive(Debug, Clone, Default)]
pub struct Link {
    busy_until: Tick,
    /// `(start, end)` of every transfer, in schedule order.
    pub intervals: Vec<(Tick, Tick)>,
}

impl Link {
    fn schedule(&mut self, now: Tick, duration: Tick) -> Tick {
        let start = now.max(self.busy_until);
        let end = start + duration;
        self.busy_until = end;
        self.intervals.push((start, end));
        end
    }
}

/// Pipeline stage of a transition job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Stage {
    Queued,
    SsdFetch,
    DramReady,
    H2dTransfer,
    Register,
    Reclaim,
    Done,
    Cancelled,
}

/// A promotion or demotion moving through the pipeline.
#[derive(Debug, Clone)]
pub struct TransitionJob {
    pub id: u64,
    pub expert: ExpertRef,
    pub direction: Direction,
    pub stage: Stage,
    pub enqueued_at: Tick,
    pub completed_at: Option<Tick>,
    /// `(stage, entry time)`, each stage at most once, in order.
    pub stage_log: Vec<(Stage, Tick)>,
    reservation: Option<TransientReservation>,
    dest_block: Option<BlockHandle>,
}

impl TransitionJob {
    fn enter(&mut self, stage: Stage, now: Tick) {
        debug_assert!(self.stage_log.iter().all(|&(s, _)| s != stage), "stage revisited");
        debug_assert!(stage > self.stage || self.stage_log.is_empty());
        self.stage = stage;
        self.stage_log.push((stage, now));
    }

    fn target_tier(&self) -> PrecisionTier {
        match self.direction {
            Direction::Upgrade => PrecisionTier::High,
            Direction::Downgrade => PrecisionTier::Low,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PipelineError {
    /// A second command arrived for an expert whose job is already past
    /// the point of no return (at or beyond H2D).
    InFlight(ExpertRef),
    Pool(PoolError),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::InFlight(e) => write!(f, "duplicate active job for expert {e}"),
            PipelineError::Pool(p) => write!(f, "{p}"),
        }
    }
}

impl From<PoolError> for PipelineError {
    fn from(p: PoolError) -> Self {
        PipelineError::Pool(p)
    }
}

/// Timestamped completion the engine must feed back via
/// [`SwapPipeline::on_event`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PipelineEvent {
    SsdFetchDone(u64),
    H2dDone(u64),
    PrefetchDone(ExpertRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CacheKey {
    expert: ExpertRef,
    tier: PrecisionTier,
}

#[derive(Debug, Clone)]
struct CacheEntry {
    size: Bytes,
    pinned: u32,
    /// False while the blob is still in transit from SSD.
    ready: bool,
    last_touch: u64,
}

/// LRU cache of expert blobs in DRAM, keyed by (expert, tier). Pinned
/// entries (in use by an in-flight job or still in transit) are never
/// evicted.
#[derive(Debug, Clone)]
struct DramCache {
    capacity: Bytes,
    in_use: Bytes,
    entries: BTreeMap<(ExpertRef, PrecisionTier), CacheEntry>,
    touch_counter: u64,
}

impl DramCache {
    fn new(capacity: Bytes) -> Self {
        Self {
            capacity,
            in_use: 0,
            entries: BTreeMap::new(),
            touch_counter: 0,
        }
    }

    fn get(&mut self, key: CacheKey) -> Option<&mut CacheEntry> {
        self.touch_counter += 1;
        let touch = self.touch_counter;
        self.entries.get_mut(&(key.expert, key.tier)).map(|e| {
            e.last_touch = touch;
            e
        })
    }

    fn peek(&self, key: CacheKey) -> Option<&CacheEntry> {
        self.entries.get(&(key.expert, key.tier))
    }

    /// Inserts a reservation-style entry, evicting unpinned LRU entries as
    /// needed. Returns false when the entry cannot fit.
    fn insert(&mut self, key: CacheKey, size: Bytes, pinned: bool, ready: bool) -> bool {
        if self.entries.contains_key(&(key.expert, key.tier)) {
            return true;
        }
        if size > self.capacity {
            return false;
        }
        while self.in_use + size > self.capacity {
            let victim = self
                .entries
                .iter()
                .filter(|(_, e)| e.pinned == 0)
                .min_by_key(|(_, e)| e.last_touch)
                .map(|(k, _)| *k);
            match victim {
                Some(k) => {
                    let e = self.entries.remove(&k).unwrap();
                    self.in_use -= e.size;
                }
                None => return false,
            }
        }
        self.touch_counter += 1;
        self.in_use += size;
        self.entries.insert(
            (key.expert, key.tier),
            CacheEntry {
                size,
                pinned: pinned as u32,
                ready,
                last_touch: self.touch_counter,
            },
        );
        true
    }

    fn unpin(&mut self, key: CacheKey) {
        if let Some(e) = self.entries.get_mut(&(key.expert, key.tier)) {
            debug_assert!(e.pinned > 0);
            e.pinned = e.pinned.saturating_sub(1);
        }
    }

    fn in_use(&self) -> Bytes {
        self.in_use
    }
}

/// Cross-layer co-activation counts, one matrix per consecutive layer pair.
#[derive(Debug, Clone)]
pub struct CorrelationModel {
    num_layers: u32,
    n: u32,
    counts: Vec<u64>,
}

impl CorrelationModel {
    pub fn new(num_layers: u32, experts_per_layer: u32) -> Self {
        let pairs = num_layers.saturating_sub(1) as usize;
        Self {
            num_layers,
            n: experts_per_layer,
            counts: vec![0; pairs * (experts_per_layer as usize).pow(2)],
        }
    }

    fn idx(&self, layer: u32, from: u32, to: u32) -> usize {
        ((layer as usize * self.n as usize) + from as usize) * self.n as usize + to as usize
    }

    pub fn count(&self, layer: u32, from: u32, to: u32) -> u64 {
        self.counts[self.idx(layer, from, to)]
    }

    /// Accumulates co-activation counts for one token: for each consecutive
    /// layer pair, every (activated, activated) expert pair is counted.
    pub fn update(&mut self, activations_per_layer: &[Vec<u32>]) {
        debug_assert_eq!(activations_per_layer.len(), self.num_layers as usize);
        for layer in 0..self.num_layers.saturating_sub(1) {
            for &from in &activations_per_layer[layer as usize] {
                for &to in &activations_per_layer[layer as usize + 1] {
                    let i = self.idx(layer, from, to);
                    self.counts[i] += 1;
                }
            }
        }
    }

    /// Next-layer experts most correlated with the given activated set,
    /// highest summed count first; zero-count experts never qualify. Count
    /// ties break by hotness (descending), then expert index.
    pub fn top_correlated(
        &self,
        layer: u32,
        activated: &[u32],
        fanout: u32,
        hotness: Option<&HotnessTable>,
    ) -> Vec<u32> {
        if fanout == 0 || layer + 1 >= self.num_layers {
            return Vec::new();
        }
        let mut scores = vec![0u64; self.n as usize];
        for &from in activated {
            for to in 0..self.n {
                scores[to as usize] += self.count(layer, from, to);
            }
        }
        let hot = hotness.map(|h| h.layer_scores(layer + 1));
        let mut order: Vec<u32> = (0..self.n).filter(|&e| scores[e as usize] > 0).collect();
        order.sort_by(|&a, &b| {
            scores[b as usize]
                .cmp(&scores[a as usize])
                .then_with(|| match hot {
                    Some(h) => h[b as usize].total_cmp(&h[a as usize]),
                    None => core::cmp::Ordering::Equal,
                })
                .then(a.cmp(&b))
        });
        order.truncate(fanout as usize);
        order
    }
}

/// Candidate experts to prefetch ahead of the next layer: the most
/// correlated next-layer experts that are currently low-precision and have
/// no transition in flight.
pub fn prefetch_candidates(
    model: &CorrelationModel,
    layer: u32,
    activated: &[u32],
    fanout: u32,
    registry: &ResidencyIndex,
    hotness: &HotnessTable,
    in_flight: impl Fn(ExpertRef) -> bool,
) -> Vec<ExpertRef> {
    model
        .top_correlated(layer, activated, fanout, Some(hotness))
        .into_iter()
        .map(|e| ExpertRef::new(layer + 1, e))
        .filter(|&e| registry.stable_tier(e) == PrecisionTier::Low && !in_flight(e))
        .collect()
}

/// Aggregate pipeline counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PipelineStats {
    pub upgrades_completed: u64,
    pub downgrades_completed: u64,
    pub cancelled: u64,
    pub prefetches_issued: u64,
    pub dram_cache_hits: u64,
    pub ssd_fetches: u64,
}

/// The swap pipeline: job table, transfer links, DRAM cache, and parked-job
/// queues. All mutation happens at event granularity, driven by the
/// simulation loop; every method is deterministic.
pub struct SwapPipeline {
    config: ModelConfig,
    links: TierLinkModel,
    ssd_link: Link,
    h2d_link: Link,
    cache: DramCache,
    jobs: Vec<TransitionJob>,
    active: BTreeMap<ExpertRef, u64>,
    /// Jobs waiting for DRAM cache space or an in-transit blob.
    parked_queued: BTreeSet<u64>,
    /// Jobs waiting for a destination block or transient capacity.
    parked_ready: BTreeSet<u64>,
    prefetch_in_transit: BTreeSet<ExpertRef>,
    pub stats: PipelineStats,
}

impl SwapPipeline {
    pub fn new(config: &ModelConfig, links: TierLinkModel) -> Self {
        Self {
            config: *config,
            links,
            ssd_link: Link::default(),
            h2d_link: Link::default(),
            cache: DramCache::new(links.dram_cache_capacity),
            jobs: Vec::new(),
            active: BTreeMap::new(),
            parked_queued: BTreeSet::new(),
            parked_ready: BTreeSet::new(),
            prefetch_in_transit: BTreeSet::new(),
            stats: PipelineStats::default(),
        }
    }

    pub fn job(&self, id: u64) -> &TransitionJob {
        &self.jobs[id as usize]
    }

    pub fn jobs(&self) -> &[TransitionJob] {
        &self.jobs
    }

    pub fn has_active_job(&self, e: ExpertRef) -> bool {
        self.active.contains_key(&e)
    }

    pub fn active_jobs(&self) -> usize {
        self.active.len()
    }

    pub fn dram_cache_in_use(&self) -> Bytes {
        self.cache.in_use()
    }

    pub fn link_intervals(&self) -> (&[(Tick, Tick)], &[(Tick, Tick)]) {
        (&self.ssd_link.intervals, &self.h2d_link.intervals)
    }

    /// Accepts a controller command. If the expert already has an active
    /// job: an identical direction is a controller bug and is rejected; an
    /// opposite command cancels the old job when it has not reached H2D,
    /// and is rejected otherwise.
    pub fn enqueue(
        &mut self,
        cmd: TransitionCommand,
        now: Tick,
        pools: &mut [DualPool],
    ) -> Result<Vec<(Tick, PipelineEvent)>, PipelineError> {
        if let Some(&old_id) = self.active.get(&cmd.expert) {
            let old = &self.jobs[old_id as usize];
            let cancellable = old.direction != direction_of(&cmd)
                && matches!(old.stage, Stage::Queued | Stage::SsdFetch | Stage::DramReady);
            if !cancellable {
                return Err(PipelineError::InFlight(cmd.expert));
            }
            self.cancel(old_id, now);
        }
        let id = self.jobs.len() as u64;
        let mut job = TransitionJob {
            id,
            expert: cmd.expert,
            direction: direction_of(&cmd),
            stage: Stage::Queued,
            enqueued_at: now,
            completed_at: None,
            stage_log: Vec::new(),
            reservation: None,
            dest_block: None,
        };
        job.enter(Stage::Queued, now);
        self.jobs.push(job);
        self.active.insert(cmd.expert, id);
        Ok(self.start_fetch(id, now, pools))
    }

    fn cancel(&mut self, id: u64, now: Tick) {
        let job = &mut self.jobs[id as usize];
        debug_assert!(job.reservation.is_none() && job.dest_block.is_none());
        job.enter(Stage::Cancelled, now);
        job.completed_at = Some(now);
        self.active.remove(&job.expert);
        self.parked_queued.remove(&id);
        self.parked_ready.remove(&id);
        let key = CacheKey {
            expert: job.expert,
            tier: job.target_tier(),
        };
        self.cache.unpin(key);
        self.stats.cancelled += 1;
    }

    fn cache_key(&self, id: u64) -> CacheKey {
        let job = &self.jobs[id as usize];
        CacheKey {
            expert: job.expert,
            tier: job.target_tier(),
        }
    }

    /// QUEUED -> SSD_FETCH or straight to DRAM_READY when the blob is
    /// already cached. Parks when the cache has an in-transit entry for the
    /// key or cannot admit a new one.
    fn start_fetch(&mut self, id: u64, now: Tick, pools: &mut [DualPool]) -> Vec<(Tick, PipelineEvent)> {
        let key = self.cache_key(id);
        match self.cache.get(key) {
            Some(entry) if entry.ready => {
                entry.pinned += 1;
                // cached blob: the SSD stage is skipped entirely
                self.stats.dram_cache_hits += u64::from(self.jobs[id as usize].direction == Direction::Upgrade);
                self.enter_dram_ready(id, now, pools)
            }
            Some(_) => {
                // blob in transit (prefetch or earlier fetch): wait for it
                self.parked_queued.insert(id);
                Vec::new()
            }
            None => {
                let size = self.config.expert_bytes(self.jobs[id as usize].target_tier());
                if !self.cache.insert(key, size, true, false) {
                    self.parked_queued.insert(id);
                    return Vec::new();
                }
                let end = self.ssd_link.schedule(now, self.links.ssd_transfer_ticks(size));
                self.jobs[id as usize].enter(Stage::SsdFetch, now);
                self.stats.ssd_fetches += 1;
                vec![(end, PipelineEvent::SsdFetchDone(id))]
            }
        }
    }

    /// DRAM_READY: acquire the destination block and a transient
    /// reservation, then start the H2D transfer. Parks on exhaustion of
    /// either; never drops the job.
    fn enter_dram_ready(&mut self, id: u64, now: Tick, pools: &mut [DualPool]) -> Vec<(Tick, PipelineEvent)> {
        if self.jobs[id as usize].stage < Stage::DramReady {
            self.jobs[id as usize].enter(Stage::DramReady, now);
        }
        let (expert, tier) = {
            let job = &self.jobs[id as usize];
            (job.expert, job.target_tier())
        };
        let size = self.config.expert_bytes(tier);
        let pool = &mut pools[expert.layer as usize];
        let reservation = match pool.reserve_transient(size) {
            Ok(r) => r,
            Err(_) => {
                self.parked_ready.insert(id);
                return Vec::new();
            }
        };
        let block = match pool.alloc(tier, expert) {
            Ok(b) => b,
            Err(_) => {
                pool.release_transient(reservation).expect("balanced release");
                self.parked_ready.insert(id);
                return Vec::new();
            }
        };
        let job = &mut self.jobs[id as usize];
        job.reservation = Some(reservation);
        job.dest_block = Some(block);
        let end = self.h2d_link.schedule(now, self.links.h2d_transfer_ticks(size));
        job.enter(Stage::H2dTransfer, now);
        vec![(end, PipelineEvent::H2dDone(id))]
    }

    /// Issues SSD->DRAM prefetches for the given experts' high-precision
    /// blobs. Skips anything already cached, in transit, or not admissible.
    pub fn prefetch(&mut self, experts: &[ExpertRef], now: Tick) -> Vec<(Tick, PipelineEvent)> {
        let mut events = Vec::new();
        for &e in experts {
            let key = CacheKey {
                expert: e,
                tier: PrecisionTier::High,
            };
            if self.cache.peek(key).is_some() || self.prefetch_in_transit.contains(&e) {
                continue;
            }
            let size = self.config.expert_bytes_high;
            if !self.cache.insert(key, size, true, false) {
                continue;
            }
            self.prefetch_in_transit.insert(e);
            let end = self.ssd_link.schedule(now, self.links.ssd_transfer_ticks(size));
            self.stats.prefetches_issued += 1;
            events.push((end, PipelineEvent::PrefetchDone(e)));
        }
        events
    }

    /// Handles a timestamped completion and retries parked jobs that the
    /// completion may have unblocked.
    pub fn on_event(
        &mut self,
        event: PipelineEvent,
        now: Tick,
        pools: &mut [DualPool],
        registry: &mut ResidencyIndex,
    ) -> Result<Vec<(Tick, PipelineEvent)>, PipelineError> {
        let mut events = match event {
            PipelineEvent::SsdFetchDone(id) => {
                if self.jobs[id as usize].stage == Stage::Cancelled {
                    // blob still lands in the cache for later reuse
                    let key = self.cache_key(id);
                    if let Some(e) = self.cache.get(key) {
                        e.ready = true;
                        e.pinned = e.pinned.saturating_sub(1);
                    }
                    Vec::new()
                } else {
                    let key = self.cache_key(id);
                    if let Some(e) = self.cache.get(key) {
                        e.ready = true;
                    }
                    self.enter_dram_ready(id, now, pools)
                }
            }
            PipelineEvent::H2dDone(id) => self.finish_job(id, now, pools, registry)?,
            PipelineEvent::PrefetchDone(e) => {
                self.prefetch_in_transit.remove(&e);
                let key = CacheKey {
                    expert: e,
                    tier: PrecisionTier::High,
                };
                if let Some(entry) = self.cache.get(key) {
                    entry.ready = true;
                    entry.pinned = entry.pinned.saturating_sub(1);
                }
                Vec::new()
            }
        };
        events.extend(self.retry_parked(now, pools));
        Ok(events)
    }

    /// REGISTER then RECLAIM: the new version becomes stable, the old block
    /// returns to its pool immediately, and the transient reservation is
    /// released.
    fn finish_job(
        &mut self,
        id: u64,
        now: Tick,
        pools: &mut [DualPool],
        registry: &mut ResidencyIndex,
    ) -> Result<Vec<(Tick, PipelineEvent)>, PipelineError> {
        let (expert, tier, block, reservation) = {
            let job = &mut self.jobs[id as usize];
            job.enter(Stage::Register, now);
            (
                job.expert,
                job.target_tier(),
                job.dest_block.take().expect("destination block held"),
                job.reservation.take().expect("transient held"),
            )
        };
        let old = registry.register(expert, tier, block)?;
        let pool = &mut pools[expert.layer as usize];
        pool.release_transient(reservation)?;
        self.jobs[id as usize].enter(Stage::Reclaim, now);
        pool.free(old)?;
        let job = &mut self.jobs[id as usize];
        job.enter(Stage::Done, now);
        job.completed_at = Some(now);
        self.active.remove(&expert);
        self.cache.unpin(CacheKey { expert, tier });
        match job.direction {
            Direction::Upgrade => self.stats.upgrades_completed += 1,
            Direction::Downgrade => self.stats.downgrades_completed += 1,
        }
        Ok(Vec::new())
    }

    /// Re-attempts parked jobs in id order. Queued jobs re-check the DRAM
    /// cache; ready jobs re-try block and transient acquisition.
    fn retry_parked(&mut self, now: Tick, pools: &mut [DualPool]) -> Vec<(Tick, PipelineEvent)> {
        let mut events = Vec::new();
        for id in core::mem::take(&mut self.parked_queued) {
            events.extend(self.start_fetch(id, now, pools));
        }
        for id in core::mem::take(&mut self.parked_ready) {
            events.extend(self.enter_dram_ready(id, now, pools));
        }
        events
    }

    /// Experts whose completed jobs finished at or before `now` since the
    /// last call would be redundant; the engine instead clears controller
    /// in-flight flags through the ids in completion events.
    pub fn expert_of(&self, id: u64) -> ExpertRef {
        self.jobs[id as usize].expert
    }
}

fn direction_of(cmd: &TransitionCommand) -> Direction {
    cmd.direction
}
