//! Discrete-event simulator tying the controller, pools, and pipeline
//! together over a routing trace.
//!
//! Time is an integer tick count; ties in the event queue break by insertion
//! sequence, so runs are exactly reproducible. Forward computation reads
//! stable precision tiers only and never waits on the pipeline — the
//! zero-stall property is audited online, not assumed. Prefill is modeled as
//! one token batch (the per-layer base cost is charged once for the whole
//! batch); decode charges base plus per-expert tier cost per token.

use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;
use core::fmt;

use crate::controller::{
    self, BudgetError, ControllerParams, HotnessTable, LayerBudget, LayerStates,
};
use crate::model::{Bytes, ExpertRef, ModelConfig, PrecisionTier, Tick};
use crate::pipeline::{
    prefetch_candidates, CorrelationModel, PipelineError, PipelineEvent, SwapPipeline,
    TierLinkModel,
};
use crate::pool::{DualPool, PoolError, ResidencyIndex};
use crate::workload::{Phase, Trace, TraceError};

/// Abstract compute cost model: per-layer base ticks plus per-activated-
/// expert ticks by serving tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ComputeModel {
    pub layer_base_ticks: Tick,
    pub expert_high_ticks: Tick,
    pub expert_low_ticks: Tick,
}

impl Default for ComputeModel {
    fn default() -> Self {
        Self {
            layer_base_ticks: 5_000,
            expert_high_ticks: 2_000,
            expert_low_ticks: 1_500,
        }
    }
}

impl ComputeModel {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.layer_base_ticks == 0 || self.expert_high_ticks == 0 || self.expert_low_ticks == 0 {
            return Err("compute times must be positive");
        }
        Ok(())
    }

    fn expert_ticks(&self, tier: PrecisionTier) -> Tick {
        match tier {
            PrecisionTier::High => self.expert_high_ticks,
            PrecisionTier::Low => self.expert_low_ticks,
        }
    }
}

/// HBM budget: total device bytes minus a single scalar reservation for
/// KV-cache, activations, and shared weights; the remainder is split evenly
/// across layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BudgetConfig {
    pub hbm_total: Bytes,
    pub reserved: Bytes,
    /// Forces the per-layer high-precision population instead of deriving
    /// the maximum feasible value from the budget.
    pub n_hot_override: Option<u32>,
    /// Transient staging capacity per layer, in high-precision blocks.
    pub transient_blocks: u32,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            hbm_total: 16 << 30,
            reserved: 4 << 30,
            n_hot_override: None,
            transient_blocks: 2,
        }
    }
}

/// Full simulation configuration. Embedded verbatim in every [`Report`] so
/// a report is a self-describing experiment record.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimConfig {
    pub model: ModelConfig,
    pub controller: ControllerParams,
    pub links: TierLinkModel,
    pub budget: BudgetConfig,
    pub compute: ComputeModel,
    /// Correlation-prefetch fan-out per layer boundary; 0 disables prefetch.
    pub prefetch_fanout: u32,
    /// Start every expert at high precision (requires n_hot = N) and keep
    /// the assignment static: with capacity for every expert no transition
    /// is possible, so the controller only tracks hotness. Defaults to the
    /// all-low cold start.
    pub start_high: bool,
    /// Record per-period hotness snapshots in the report.
    pub record_hotness: bool,
    /// Recorded in the report; the engine itself draws no random numbers.
    pub seed: u64,
}

impl SimConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            controller: ControllerParams::default(),
            links: TierLinkModel::default(),
            budget: BudgetConfig::default(),
            compute: ComputeModel::default(),
            prefetch_fanout: 0,
            start_high: false,
            record_hotness: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let report = self.model.validate();
        if !report.is_pass() {
            return Err(SimError::Validation(format!(
                "model config invalid: {}",
                report.violations.join("; ")
            )));
        }
        self.controller
            .validate()
            .map_err(|e| SimError::Validation(format!("{e}")))?;
        self.links.validate().map_err(|e| SimError::Validation(String::from(e)))?;
        self.compute.validate().map_err(|e| SimError::Validation(String::from(e)))?;
        if self.budget.reserved >= self.budget.hbm_total {
            return Err(SimError::Validation(String::from("reserved must be < hbm_total")));
        }
        Ok(())
    }

    /// Expert-pool budget for one layer: the post-reservation bytes split
    /// evenly across layers.
    pub fn per_layer_budget(&self) -> Bytes {
        (self.budget.hbm_total - self.budget.reserved) / self.model.num_layers as u64
    }

    /// Resolves the per-layer high-precision population. The derived value
    /// is the largest `n` whose dual pools (`n` high blocks plus `N` low
    /// blocks, so every expert can always be demoted) fit the layer budget.
    pub fn resolve_n_hot(&self) -> Result<u32, SimError> {
        let n = self.model.experts_per_layer;
        let budget = self.per_layer_budget();
        let all_low = n as u64 * self.model.expert_bytes_low;
        let fits = |n_hot: u32| all_low + n_hot as u64 * self.model.expert_bytes_high <= budget;
        match self.budget.n_hot_override {
            Some(v) => {
                if v > n {
                    return Err(SimError::Validation(format!("n_hot override {v} > {n} experts")));
                }
                if !fits(v) {
                    return Err(SimError::Budget(BudgetError::Infeasible {
                        required: all_low + v as u64 * self.model.expert_bytes_high,
                        budget,
                    }));
                }
                Ok(v)
            }
            None => {
                if !fits(0) {
                    return Err(SimError::Budget(BudgetError::Infeasible {
                        required: all_low,
                        budget,
                    }));
                }
                let step = self.model.expert_bytes_high;
                Ok((n as u64).min((budget - all_low) / step) as u32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    Validation(String),
    Trace(TraceError),
    Budget(BudgetError),
    /// An internal invariant broke mid-run; the run is aborted.
    Internal(String),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Validation(m) => write!(f, "invalid configuration: {m}"),
            SimError::Trace(e) => write!(f, "{e}"),
            SimError::Budget(e) => write!(f, "{e}"),
            SimError::Internal(m) => write!(f, "internal invariant violated: {m}"),
        }
    }
}

impl From<TraceError> for SimError {
    fn from(e: TraceError) -> Self {
        SimError::Trace(e)
    }
}

impl From<PipelineError> for SimError {
    fn from(e: PipelineError) -> Self {
        SimError::Internal(format!("{e}"))
    }
}

impl From<PoolError> for SimError {
    fn from(e: PoolError) -> Self {
        SimError::Internal(format!("{e}"))
    }
}

/// Latency summary over one class of completed transition jobs, in ticks
/// from enqueue to completion.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatencyStats {
    pub count: u64,
    pub mean: f64,
    pub max: Tick,
}

impl LatencyStats {
    fn from_latencies(lat: &[Tick]) -> Self {
        if lat.is_empty() {
            return Self::default();
        }
        Self {
            count: lat.len() as u64,
            mean: lat.iter().sum::<u64>() as f64 / lat.len() as f64,
            max: *lat.iter().max().unwrap(),
        }
    }
}

/// Hotness scores of one layer at one period boundary.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HotnessSample {
    pub step: u64,
    pub layer: u32,
    pub scores: Vec<f64>,
}

/// Periodic memory snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OccupancySample {
    pub tick: Tick,
    pub bytes_in_use: Bytes,
    pub active_jobs: u64,
}

/// Everything a run produces. Serialization of two identical runs is
/// byte-identical. `hot_coverage` is the fraction of routed gate mass served
/// at high precision — a precision-quality proxy, not a measured accuracy.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Report {
    pub config: SimConfig,
    /// Resolved per-layer high-precision population.
    pub n_hot: u32,
    /// End-to-end ticks to the first decode token (prefill + first step).
    pub ttft: Tick,
    /// Mean ticks per decode token.
    pub tpot: f64,
    /// Tokens per tick.
    pub prefill_throughput: f64,
    pub decode_throughput: f64,
    /// Gate-mass fraction served at high precision, whole run.
    pub hot_coverage: f64,
    /// Same, restricted to the second half of decode (post-convergence).
    pub steady_hot_coverage: f64,
    pub upgrades: u64,
    pub downgrades: u64,
    pub cancelled: u64,
    pub prefetches_issued: u64,
    pub dram_cache_hits: u64,
    /// Forward reads that found no stable representation. Always 0 in a
    /// valid run.
    pub stall_count: u64,
    /// Forward reads that did not resolve to the last registered version.
    pub provenance_violations: u64,
    /// Events at which pools + transient in use exceeded the ceiling.
    pub memory_violations: u64,
    pub peak_memory_bytes: Bytes,
    /// Fixed pool bytes plus total transient capacity.
    pub memory_ceiling_bytes: Bytes,
    pub upgrade_latency: LatencyStats,
    pub downgrade_latency: LatencyStats,
    /// Controller hot set per layer at end of run.
    pub final_hot_sets: Vec<Vec<u32>>,
    pub occupancy_series: Vec<OccupancySample>,
    /// Per-period hotness snapshots; empty unless requested.
    pub hotness_series: Vec<HotnessSample>,
    pub total_ticks: Tick,
}

impl Report {
    /// True when every online audit passed.
    pub fn clean(&self) -> bool {
        self.stall_count == 0 && self.provenance_violations == 0 && self.memory_violations == 0
    }
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    table: HotnessTable,
    budgets: Vec<LayerBudget>,
    states: Vec<LayerStates>,
    pools: Vec<DualPool>,
    registry: ResidencyIndex,
    pipeline: SwapPipeline,
    correlation: CorrelationModel,
    heap: BinaryHeap<Reverse<(Tick, u64, PipelineEvent)>>,
    seq: u64,
    now: Tick,
    layer_steps: Vec<u64>,
    expected_version: Vec<u64>,
    // audits and metrics
    pool_bytes_total: Bytes,
    ceiling: Bytes,
    peak: Bytes,
    memory_violations: u64,
    provenance_violations: u64,
    stall_count: u64,
    gate_total: f64,
    gate_high: f64,
    steady_gate_total: f64,
    steady_gate_high: f64,
    occupancy_series: Vec<OccupancySample>,
}

impl<'a> Sim<'a> {
    fn push_events(&mut self, events: Vec<(Tick, PipelineEvent)>) {
        for (t, ev) in events {
            self.seq += 1;
            self.heap.push(Reverse((t, self.seq, ev)));
        }
    }

    fn audit_memory(&mut self) {
        let transient: Bytes = self
            .pools
            .iter()
            .map(|p| p.occupancy().transient_in_use)
            .sum();
        let in_use = self.pool_bytes_total + transient;
        if in_use > self.ceiling {
            self.memory_violations += 1;
        }
        self.peak = self.peak.max(in_use);
    }

    fn expert_slot(&self, e: ExpertRef) -> usize {
        (e.layer * self.cfg.model.experts_per_layer + e.expert) as usize
    }

    /// Applies one pipeline completion: registry/pool updates inside the
    /// pipeline, then engine-side bookkeeping (in-flight flags, version
    /// expectations).
    fn dispatch(&mut self, ev: PipelineEvent, time: Tick) -> Result<(), SimError> {
        self.now = self.now.max(time);
        let completed = match ev {
            PipelineEvent::H2dDone(id) => Some(self.pipeline.expert_of(id)),
            _ => None,
        };
        let more = self
            .pipeline
            .on_event(ev, time, &mut self.pools, &mut self.registry)?;
        self.push_events(more);
        if let Some(e) = completed {
            self.states[e.layer as usize].in_flight[e.expert as usize] = false;
            let slot = self.expert_slot(e);
            self.expected_version[slot] += 1;
        }
        self.audit_memory();
        Ok(())
    }

    /// Drains all pipeline events due at or before `now`.
    fn drain_until(&mut self, now: Tick) -> Result<(), SimError> {
        while let Some(&Reverse((t, _, _))) = self.heap.peek() {
            if t > now {
                break;
            }
            let Reverse((t, _, ev)) = self.heap.pop().unwrap();
            self.dispatch(ev, t)?;
        }
        Ok(())
    }

    fn enqueue_commands(
        &mut self,
        commands: Vec<crate::controller::TransitionCommand>,
    ) -> Result<(), SimError> {
        for cmd in commands {
            let events = self
                .pipeline
                .enqueue(cmd, self.now, &mut self.pools)
                .map_err(|e| SimError::Internal(format!("{e}")))?;
            self.push_events(events);
        }
        Ok(())
    }
}

/// Runs one simulation over a validated trace. Deterministic given
/// `(sim, trace)`.
pub fn run(sim: &SimConfig, trace: &Trace) -> Result<Report, SimError> {
    sim.validate()?;
    trace.validate(&sim.model)?;
    let n_hot = sim.resolve_n_hot()?;
    let model = &sim.model;
    let layers = model.num_layers as usize;

    let budgets: Vec<LayerBudget> = (0..layers)
        .map(|_| LayerBudget {
            n_hot,
            n_cold: model.experts_per_layer - n_hot,
            tau_h: None,
            hbm_budget: sim.per_layer_budget(),
        })
        .collect();
    let transient_bytes = sim.budget.transient_blocks as u64 * model.expert_bytes_high;
    let mut pools: Vec<DualPool> = budgets
        .iter()
        .map(|b| DualPool::create(b, model, transient_bytes))
        .collect::<Result<_, _>>()?;
    let mut registry = ResidencyIndex::initial(model, &mut pools)?;
    let mut states: Vec<LayerStates> = (0..layers)
        .map(|_| LayerStates::all_low(model.experts_per_layer))
        .collect();

    if sim.start_high {
        if n_hot != model.experts_per_layer {
            return Err(SimError::Validation(String::from(
                "start_high requires n_hot = experts_per_layer",
            )));
        }
        for e in model.all_experts() {
            let block = pools[e.layer as usize].alloc(PrecisionTier::High, e)?;
            let old = registry.register(e, PrecisionTier::High, block)?;
            pools[e.layer as usize].free(old)?;
            states[e.layer as usize].tier[e.expert as usize] = PrecisionTier::High;
        }
    }

    let pool_bytes_total: Bytes = pools.iter().map(|p| p.occupancy().pool_bytes).sum();
    let ceiling = pool_bytes_total + layers as u64 * transient_bytes;
    let expected_version: Vec<u64> = model.all_experts().map(|e| registry.version(e)).collect();

    let mut s = Sim {
        cfg: sim,
        table: HotnessTable::new(model.num_layers, model.experts_per_layer),
        budgets,
        states,
        pools,
        registry,
        pipeline: SwapPipeline::new(model, sim.links),
        correlation: CorrelationModel::new(model.num_layers, model.experts_per_layer),
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0,
        layer_steps: vec![0; layers],
        expected_version,
        pool_bytes_total,
        ceiling,
        peak: pool_bytes_total,
        memory_violations: 0,
        provenance_violations: 0,
        stall_count: 0,
        gate_total: 0.0,
        gate_high: 0.0,
        steady_gate_total: 0.0,
        steady_gate_high: 0.0,
        occupancy_series: Vec::new(),
    };

    let decode_tokens: Vec<u64> = {
        let mut t: Vec<u64> = trace
            .events
            .iter()
            .filter(|e| e.phase == Phase::Decode)
            .map(|e| e.token)
            .collect();
        t.dedup();
        t
    };
    let num_decode = decode_tokens.len() as u64;
    let steady_from = decode_tokens
        .get(decode_tokens.len() / 2)
        .copied()
        .unwrap_or(u64::MAX);

    let mut first_prefill_token: Option<u64> = trace
        .events
        .iter()
        .find(|e| e.phase == Phase::Prefill)
        .map(|e| e.token);
    let mut prefill_end: Tick = 0;
    let mut prefill_count: u64 = 0;
    let mut ttft: Tick = 0;
    let mut decode_time_total: Tick = 0;
    let mut token_acts: Vec<Vec<u32>> = vec![Vec::new(); layers];
    let mut current_token: Option<(u64, Phase, Tick)> = None;
    let mut hotness_series: Vec<HotnessSample> = Vec::new();

    let mut i = 0usize;
    while i < trace.events.len() {
        let ev = &trace.events[i];
        i += 1;

        // token boundary bookkeeping
        let is_new_token = match current_token {
            Some((t, _, _)) => t != ev.token,
            None => true,
        };
        if is_new_token {
            if let Some((prev, phase, started)) = current_token.take() {
                finish_token(
                    &mut s, prev, phase, started, &mut prefill_end, &mut prefill_count,
                    &mut ttft, &mut decode_time_total, &decode_tokens, &mut token_acts,
                )?;
            }
            current_token = Some((ev.token, ev.phase, s.now));
        }

        s.drain_until(s.now)?;

        // forward read: stable tiers, provenance + stall audit, coverage
        let layer = ev.layer as usize;
        let mut expert_ticks: Tick = 0;
        let steady = ev.phase == Phase::Decode && ev.token >= steady_from;
        for &(e, g) in &ev.activations {
            let er = ExpertRef::new(ev.layer, e);
            let entry = s.registry.entry(er);
            if entry.block.is_none() {
                s.stall_count += 1;
            }
            let slot = s.expert_slot(er);
            if entry.version != s.expected_version[slot] {
                s.provenance_violations += 1;
            }
            let tier = entry.tier;
            expert_ticks += sim.compute.expert_ticks(tier);
            s.gate_total += g;
            if tier == PrecisionTier::High {
                s.gate_high += g;
            }
            if steady {
                s.steady_gate_total += g;
                if tier == PrecisionTier::High {
                    s.steady_gate_high += g;
                }
            }
        }
        s.audit_memory();

        // advance simulated time: prefill is batched (base charged once)
        let base = if ev.phase == Phase::Prefill {
            if first_prefill_token == Some(ev.token) {
                sim.compute.layer_base_ticks
            } else {
                0
            }
        } else {
            sim.compute.layer_base_ticks
        };
        s.now += base + expert_ticks;

        // controller: hotness update every event, scheduling at period
        // boundaries once the warmup threshold is fixed
        s.layer_steps[layer] += 1;
        let step = s.layer_steps[layer];
        s.table
            .update(ev.layer, &ev.activations, step, sim.controller.ema_factor)
            .map_err(|e| SimError::Internal(format!("{e}")))?;
        if sim.record_hotness && step % sim.controller.update_period == 0 {
            hotness_series.push(HotnessSample {
                step,
                layer: ev.layer,
                scores: s.table.layer_scores(ev.layer).to_vec(),
            });
        }
        if sim.start_high {
            // static all-high baseline: no transitions possible
        } else if step == sim.controller.warmup_steps {
            let commands = controller::warmup_init(
                &s.table,
                &mut s.states[layer],
                &mut s.budgets[layer],
                ev.layer,
                step,
            )
            .map_err(|e| SimError::Internal(format!("{e}")))?;
            s.enqueue_commands(commands)?;
            if layer == 0 {
                sample_occupancy(&mut s);
            }
        } else if step > sim.controller.warmup_steps {
            let commands = controller::schedule(
                &s.table,
                &mut s.states[layer],
                &s.budgets[layer],
                &sim.controller,
                ev.layer,
                step,
            );
            if !commands.is_empty() {
                s.enqueue_commands(commands)?;
            }
            if layer == 0 && step % sim.controller.update_period == 0 {
                sample_occupancy(&mut s);
            }
        }

        // correlation tracking and prefetch for the next layer
        if sim.prefetch_fanout > 0 {
            token_acts[layer] = ev.activations.iter().map(|&(e, _)| e).collect();
            if ev.layer + 1 < model.num_layers {
                let cands = prefetch_candidates(
                    &s.correlation,
                    ev.layer,
                    &token_acts[layer],
                    sim.prefetch_fanout,
                    &s.registry,
                    &s.table,
                    |e| s.pipeline.has_active_job(e),
                );
                let events = s.pipeline.prefetch(&cands, s.now);
                s.push_events(events);
            }
        }
    }
    if let Some((prev, phase, started)) = current_token.take() {
        finish_token(
            &mut s, prev, phase, started, &mut prefill_end, &mut prefill_count,
            &mut ttft, &mut decode_time_total, &decode_tokens, &mut token_acts,
        )?;
    }
    first_prefill_token = None;
    let _ = first_prefill_token;

    // drain every outstanding pipeline event
    while let Some(Reverse((t, _, ev))) = s.heap.pop() {
        s.dispatch(ev, t)?;
    }

    let stats = s.pipeline.stats;
    let mut up_lat = Vec::new();
    let mut down_lat = Vec::new();
    for job in s.pipeline.jobs() {
        if let (Some(done), crate::pipeline::Stage::Done) = (job.completed_at, job.stage) {
            let lat = done - job.enqueued_at;
            match job.direction {
                crate::controller::Direction::Upgrade => up_lat.push(lat),
                crate::controller::Direction::Downgrade => down_lat.push(lat),
            }
        }
    }

    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let prefill_time = prefill_end;
    Ok(Report {
        config: *sim,
        n_hot,
        ttft,
        tpot: ratio(decode_time_total as f64, num_decode as f64),
        prefill_throughput: ratio(prefill_count as f64, prefill_time as f64),
        decode_throughput: ratio(num_decode as f64, decode_time_total as f64),
        hot_coverage: ratio(s.gate_high, s.gate_total),
        steady_hot_coverage: ratio(s.steady_gate_high, s.steady_gate_total),
        upgrades: stats.upgrades_completed,
        downgrades: stats.downgrades_completed,
        cancelled: stats.cancelled,
        prefetches_issued: stats.prefetches_issued,
        dram_cache_hits: stats.dram_cache_hits,
        stall_count: s.stall_count,
        provenance_violations: s.provenance_violations,
        memory_violations: s.memory_violations,
        peak_memory_bytes: s.peak,
        memory_ceiling_bytes: s.ceiling,
        upgrade_latency: LatencyStats::from_latencies(&up_lat),
        downgrade_latency: LatencyStats::from_latencies(&down_lat),
        final_hot_sets: s.states.iter().map(|st| st.hot_set()).collect(),
        occupancy_series: s.occupancy_series,
        hotness_series,
        total_ticks: s.now,
    })
}

fn sample_occupancy(s: &mut Sim<'_>) {
    let transient: Bytes = s.pools.iter().map(|p| p.occupancy().transient_in_use).sum();
    s.occupancy_series.push(OccupancySample {
        tick: s.now,
        bytes_in_use: s.pool_bytes_total + transient,
        active_jobs: s.pipeline.active_jobs() as u64,
    });
}

#[allow(clippy::too_many_arguments)]
fn finish_token(
    s: &mut Sim<'_>,
    token: u64,
    phase: Phase,
    started: Tick,
    prefill_end: &mut Tick,
    prefill_count: &mut u64,
    ttft: &mut Tick,
    decode_time_total: &mut Tick,
    decode_tokens: &[u64],
    token_acts: &mut [Vec<u32>],
) -> Result<(), SimError> {
    match phase {
        Phase::Prefill => {
            *prefill_end = s.now;
            *prefill_count += 1;
        }
        Phase::Decode => {
            *decode_time_total += s.now - started;
            if decode_tokens.first() == Some(&token) {
                *ttft = s.now;
            }
        }
    }
    if s.cfg.prefetch_fanout > 0 && token_acts.iter().all(|a| !a.is_empty()) {
        s.correlation.update(token_acts);
    }
    for a in token_acts.iter_mut() {
        a.clear();
    }
    Ok(())
}

/// One run per `n_hot` grid point, everything else held fixed. Failures are
/// reported per point; the sweep continues.
pub fn sweep_n_hot(base: &SimConfig, grid: &[u32], trace: &Trace) -> Vec<Result<Report, SimError>> {
    grid.iter()
        .map(|&n| {
            let mut cfg = *base;
            cfg.budget.n_hot_override = Some(n);
            run(&cfg, trace)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate_trace, WorkloadSpec};

    fn small_model() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            experts_per_layer: 8,
            experts_active_per_token: 2,
            expert_bytes_high: 4096,
            expert_bytes_low: 1024,
        }
    }

    fn sim_for(model: ModelConfig, n_hot: u32) -> SimConfig {
        let mut cfg = SimConfig::new(model);
        cfg.budget.n_hot_override = Some(n_hot);
        cfg.controller.warmup_steps = 64;
        cfg.controller.update_period = 16;
        cfg.controller.dwell_min = 32;
        cfg
    }

    fn trace_for(model: &ModelConfig, decode: u64, seed: u64) -> Trace {
        let spec = WorkloadSpec {
            zipf_s: 1.2,
            prefill_tokens: 16,
            decode_tokens: decode,
            seed,
            ..WorkloadSpec::default()
        };
        generate_trace(model, &spec).unwrap()
    }

    #[test]
    fn all_high_decode_throughput_matches_closed_form() {
        // oracle: every decode token costs exactly L * (base + k * t_high)
        let model = small_model();
        let mut cfg = sim_for(model, model.experts_per_layer);
        cfg.start_high = true;
        let trace = trace_for(&model, 500, 3);
        let report = run(&cfg, &trace).unwrap();
        let per_token = model.num_layers as u64
            * (cfg.compute.layer_base_ticks
                + model.experts_active_per_token as u64 * cfg.compute.expert_high_ticks);
        assert_eq!(report.tpot, per_token as f64);
        assert_eq!(report.decode_throughput, 1.0 / per_token as f64);
        assert_eq!(report.hot_coverage, 1.0);
        assert!(report.clean());
    }

    #[test]
    fn n_hot_zero_serves_everything_low() {
        let model = small_model();
        let cfg = sim_for(model, 0);
        let trace = trace_for(&model, 500, 3);
        let report = run(&cfg, &trace).unwrap();
        assert_eq!(report.hot_coverage, 0.0);
        assert_eq!(report.upgrades + report.downgrades, 0);
        assert!(report.final_hot_sets.iter().all(|h| h.is_empty()));
        assert!(report.clean());
    }

    #[test]
    fn identical_runs_produce_identical_reports() {
        let model = small_model();
        let cfg = sim_for(model, 2);
        let trace = trace_for(&model, 800, 7);
        let a = run(&cfg, &trace).unwrap();
        let b = run(&cfg, &trace).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn audits_clean_and_peak_below_ceiling() {
        let model = small_model();
        let cfg = sim_for(model, 3);
        let trace = trace_for(&model, 2000, 11);
        let report = run(&cfg, &trace).unwrap();
        assert!(report.clean(), "{report:?}");
        assert!(report.peak_memory_bytes <= report.memory_ceiling_bytes);
        assert!(report.upgrades > 0);
        assert!(report.ttft > 0);
    }

    #[test]
    fn sweep_corners_give_zero_and_full_coverage() {
        let model = small_model();
        let mut cfg = sim_for(model, 0);
        cfg.controller.warmup_steps = 32;
        let trace = trace_for(&model, 2000, 5);
        let reports = sweep_n_hot(&cfg, &[0, model.experts_per_layer], &trace);
        let lo = reports[0].as_ref().unwrap();
        let hi = reports[1].as_ref().unwrap();
        assert_eq!(lo.steady_hot_coverage, 0.0);
        // the warmup threshold may occasionally demote an expert whose
        // score decays below it, so full capacity sits just under 1
        assert!(hi.steady_hot_coverage > 0.99, "{}", hi.steady_hot_coverage);
    }

    #[test]
    fn transition_count_non_increasing_in_dwell_min() {
        // paired runs on one drifting trace; a longer dwell can only
        // suppress transitions
        let model = small_model();
        let spec = WorkloadSpec {
            zipf_s: 1.2,
            drift_period: 512,
            drift_rotation: 0.5,
            prefill_tokens: 16,
            decode_tokens: 6000,
            seed: 9,
            ..WorkloadSpec::default()
        };
        let trace = generate_trace(&model, &spec).unwrap();
        let mut counts = Vec::new();
        for dwell in [16u64, 512, 4096] {
            let mut cfg = sim_for(model, 2);
            cfg.controller.dwell_min = dwell;
            let r = run(&cfg, &trace).unwrap();
            assert!(r.clean());
            counts.push(r.upgrades + r.downgrades);
        }
        assert!(counts[0] >= counts[1] && counts[1] >= counts[2], "{counts:?}");
    }

    #[test]
    fn geometry_mismatch_rejected_before_run() {
        let model = small_model();
        let cfg = sim_for(model, 2);
        let mut other = model;
        other.experts_active_per_token = 3;
        let trace = trace_for(&other, 10, 1);
        assert!(matches!(run(&cfg, &trace), Err(SimError::Trace(_))));
    }

    #[test]
    fn budget_resolution_matches_manual_arithmetic() {
        let model = small_model();
        let mut cfg = SimConfig::new(model);
        // per-layer budget: all-low (8 KiB) + 3 high blocks (12 KiB)
        cfg.budget.hbm_total = 2 * (8 * 1024 + 3 * 4096) + 1000;
        cfg.budget.reserved = 1000;
        assert_eq!(cfg.resolve_n_hot().unwrap(), 3);
        cfg.budget.hbm_total = 100;
        cfg.budget.reserved = 10;
        assert!(matches!(cfg.resolve_n_hot(), Err(SimError::Budget(_))));
    }

    #[test]
    fn prefetch_reduces_upgrade_latency_on_coupled_trace() {
        let model = ModelConfig {
            num_layers: 4,
            ..small_model()
        };
        let spec = WorkloadSpec {
            zipf_s: 1.2,
            coupling: 0.9,
            drift_period: 1024,
            drift_rotation: 0.5,
            prefill_tokens: 16,
            decode_tokens: 4000,
            seed: 21,
            ..WorkloadSpec::default()
        };
        let trace = generate_trace(&model, &spec).unwrap();
        let mut base = sim_for(model, 2);
        base.links.dram_cache_capacity = 64 * model.expert_bytes_high;
        let no_prefetch = run(&base, &trace).unwrap();
        let mut with = base;
        with.prefetch_fanout = 2;
        let with_prefetch = run(&with, &trace).unwrap();
        assert!(with_prefetch.dram_cache_hits > 0);
        assert!(
            with_prefetch.upgrade_latency.mean < no_prefetch.upgrade_latency.mean,
            "{} !< {}",
            with_prefetch.upgrade_latency.mean,
            no_prefetch.upgrade_latency.mean
        );
    }
}
