//! Routing-trace data model and the synthetic workload generator.
//!
//! A trace is an ordered sequence of per-token, per-layer routing outcomes:
//! the selected expert indices and their gate probabilities, renormalized
//! over the selected top-k so each event's gates sum to 1.
//!
//! The generator produces skewed, drifting, cross-layer-correlated
//! activations. Per layer, expert popularity follows a Zipf(s) distribution
//! over a seeded popularity-to-expert permutation (so layers differ).
//! Every drift period a fraction of the hot identities rotates out, and
//! with coupling `c` the layer `l+1` draw follows a deterministic
//! rank-preserving map of the layer `l` draw with probability `c`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::ModelConfig;

/// Request phase a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Phase {
    Prefill,
    Decode,
}

/// One routing outcome: the experts a token activated in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub token: u64,
    pub phase: Phase,
    pub layer: u32,
    /// `(expert index, gate probability)`, distinct indices, gates sum to 1.
    pub activations: Vec<(u32, f64)>,
}

/// An ordered routing trace plus the geometry it was produced for.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub num_layers: u32,
    pub experts_per_layer: u32,
    pub k: u32,
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceError {
    GeometryMismatch(alloc::string::String),
    MalformedEvent { index: usize, reason: &'static str },
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceError::GeometryMismatch(m) => write!(f, "trace/config geometry mismatch: {m}"),
            TraceError::MalformedEvent { index, reason } => {
                write!(f, "malformed trace event {index}: {reason}")
            }
        }
    }
}

/// Gate sums may deviate from 1 by printing/rounding error only.
pub const GATE_SUM_TOLERANCE: f64 = 1e-6;

impl Trace {
    /// Validates geometry against a model config and the per-event
    /// invariants (k activations, distinct indices, normalized gates).
    pub fn validate(&self, config: &ModelConfig) -> Result<(), TraceError> {
        if self.num_layers != config.num_layers
            || self.experts_per_layer != config.experts_per_layer
            || self.k != config.experts_active_per_token
        {
            return Err(TraceError::GeometryMismatch(format!(
                "trace is layers={} experts={} k={}, config is layers={} experts={} k={}",
                self.num_layers,
                self.experts_per_layer,
                self.k,
                config.num_layers,
                config.experts_per_layer,
                config.experts_active_per_token
            )));
        }
        for (i, ev) in self.events.iter().enumerate() {
            if ev.layer >= self.num_layers {
                return Err(TraceError::MalformedEvent { index: i, reason: "layer out of range" });
            }
            if ev.activations.len() != self.k as usize {
                return Err(TraceError::MalformedEvent { index: i, reason: "activation count != k" });
            }
            let mut sum = 0.0;
            for (j, &(e, g)) in ev.activations.iter().enumerate() {
                if e >= self.experts_per_layer {
                    return Err(TraceError::MalformedEvent { index: i, reason: "expert index out of range" });
                }
                if !(0.0..=1.0).contains(&g) {
                    return Err(TraceError::MalformedEvent { index: i, reason: "gate outside [0, 1]" });
                }
                if ev.activations[..j].iter().any(|&(p, _)| p == e) {
                    return Err(TraceError::MalformedEvent { index: i, reason: "duplicate expert index" });
                }
                sum += g;
            }
            if (sum - 1.0).abs() > GATE_SUM_TOLERANCE {
                return Err(TraceError::MalformedEvent { index: i, reason: "gates do not sum to 1" });
            }
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> u64 {
        self.events.iter().map(|e| e.token + 1).max().unwrap_or(0)
    }
}

/// Synthetic workload parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorkloadSpec {
    /// Zipf skew exponent; 0 is uniform.
    pub zipf_s: f64,
    /// Tokens between hot-set rotations; 0 disables drift.
    pub drift_period: u64,
    /// Fraction of the generator's hot set replaced per rotation.
    pub drift_rotation: f64,
    /// Cross-layer coupling strength in [0, 1].
    pub coupling: f64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            zipf_s: 1.2,
            drift_period: 0,
            drift_rotation: 0.0,
            coupling: 0.0,
            prefill_tokens: 64,
            decode_tokens: 1024,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.zipf_s < 0.0 {
            return Err("zipf_s must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.drift_rotation) {
            return Err("drift_rotation must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err("coupling must be in [0, 1]");
        }
        if self.prefill_tokens + self.decode_tokens == 0 {
            return Err("trace must contain at least one token");
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> u64 {
        self.prefill_tokens + self.decode_tokens
    }
}

fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
}

/// Rounds to 9 significant digits, the precision of the trace file format,
/// so generated traces survive a write/read round trip field-exactly.
pub fn round_gate(g: f64) -> f64 {
    format!("{g:.8e}").parse().unwrap_or(g)
}

/// Streaming trace generator. `generate_trace` drives it token by token;
/// tests can observe the internal hot set across drift boundaries.
pub struct Generator {
    config: ModelConfig,
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    /// Per layer: popularity rank -> expert id.
    perm: Vec<Vec<u32>>,
    /// Per layer: expert id -> popularity rank.
    inv: Vec<Vec<u32>>,
    /// Cumulative Zipf weights over ranks (shared by all layers).
    cum: Vec<f64>,
    hot_ranks: u32,
    next_token: u64,
}

impl Generator {
    pub fn new(config: &ModelConfig, spec: &WorkloadSpec) -> Self {
        let n = config.experts_per_layer as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut perm = Vec::with_capacity(config.num_layers as usize);
        let mut inv = Vec::with_capacity(config.num_layers as usize);
        for _ in 0..config.num_layers {
            let mut p: Vec<u32> = (0..config.experts_per_layer).collect();
            // Fisher-Yates
            for i in (1..n).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                p.swap(i, j);
            }
            let mut iv = vec![0u32; n];
            for (rank, &e) in p.iter().enumerate() {
                iv[e as usize] = rank as u32;
            }
            perm.push(p);
            inv.push(iv);
        }
        let mut cum = Vec::with_capacity(n);
        let mut acc = 0.0;
        for rank in 0..n {
            acc += libm::pow((rank + 1) as f64, -spec.zipf_s);
            cum.push(acc);
        }
        Self {
            config: *config,
            spec: *spec,
            rng,
            perm,
            inv,
            cum,
            hot_ranks: (config.experts_per_layer / 8).max(1),
            next_token: 0,
        }
    }

    fn rank_weight(&self, rank: u32) -> f64 {
        let r = rank as usize;
        if r == 0 {
            self.cum[0]
        } else {
            self.cum[r] - self.cum[r - 1]
        }
    }

    /// Inverse-CDF draw of one popularity rank.
    fn draw_rank(&mut self) -> u32 {
        let total = *self.cum.last().unwrap();
        let u = unit_f64(&mut self.rng) * total;
        self.cum.partition_point(|&c| c < u).min(self.cum.len() - 1) as u32
    }

    /// The generator's internal hot set for a layer: the experts currently
    /// occupying the top popularity ranks.
    pub fn hot_set(&self, layer: u32) -> BTreeSet<u32> {
        self.perm[layer as usize][..self.hot_ranks as usize]
            .iter()
            .copied()
            .collect()
    }

    /// Experts of a layer in descending popularity order.
    pub fn popularity_order(&self, layer: u32) -> Vec<u32> {
        self.perm[layer as usize].clone()
    }

    /// Replaces `ceil(rotation * |hot set|)` hot identities with randomly
    /// chosen cold ones by swapping permutation slots.
    fn rotate(&mut self) {
        let hot = self.hot_ranks as u64;
        let cold = self.config.experts_per_layer as u64 - hot;
        let r = ((self.spec.drift_rotation * hot as f64).ceil() as u64).min(hot.min(cold));
        for layer in 0..self.perm.len() {
            let mut hot_picks = BTreeSet::new();
            while (hot_picks.len() as u64) < r {
                hot_picks.insert(self.rng.next_u64() % hot);
            }
            let mut cold_picks = BTreeSet::new();
            while (cold_picks.len() as u64) < r {
                cold_picks.insert(hot + self.rng.next_u64() % cold);
            }
            for (&h, &c) in hot_picks.iter().zip(cold_picks.iter()) {
                self.perm[layer].swap(h as usize, c as usize);
                let (eh, ec) = (self.perm[layer][h as usize], self.perm[layer][c as usize]);
                self.inv[layer][eh as usize] = h as u32;
                self.inv[layer][ec as usize] = c as u32;
            }
        }
    }

    /// Generates the per-layer events of the next token.
    pub fn next_token_events(&mut self) -> Vec<TraceEvent> {
        let spec = self.spec;
        let token = self.next_token;
        self.next_token += 1;
        if spec.drift_period > 0 && token > 0 && token % spec.drift_period == 0 {
            self.rotate();
        }
        let phase = if token < spec.prefill_tokens {
            Phase::Prefill
        } else {
            Phase::Decode
        };
        let k = self.config.experts_active_per_token as usize;
        let mut events = Vec::with_capacity(self.config.num_layers as usize);
        let mut prev_ranks: Vec<u32> = Vec::with_capacity(k);
        for layer in 0..self.config.num_layers {
            let mut ranks: Vec<u32> = Vec::with_capacity(k);
            for slot in 0..k {
                // with probability `coupling`, follow the rank-preserving
                // map of the previous layer's draw for this slot
                let coupled = layer > 0
                    && spec.coupling > 0.0
                    && unit_f64(&mut self.rng) < spec.coupling
                    && !ranks.contains(&prev_ranks[slot]);
                if coupled {
                    ranks.push(prev_ranks[slot]);
                } else {
                    loop {
                        let r = self.draw_rank();
                        if !ranks.contains(&r) {
                            ranks.push(r);
                            break;
                        }
                    }
                }
            }
            let total: f64 = ranks.iter().map(|&r| self.rank_weight(r)).sum();
            let activations: Vec<(u32, f64)> = ranks
                .iter()
                .map(|&r| {
                    let e = self.perm[layer as usize][r as usize];
                    (e, round_gate(self.rank_weight(r) / total))
                })
                .collect();
            events.push(TraceEvent {
                token,
                phase,
                layer,
                activations,
            });
            prev_ranks = ranks;
        }
        events
    }
}

/// Generates a complete trace. Deterministic given `(config, spec)`.
pub fn generate_trace(config: &ModelConfig, spec: &WorkloadSpec) -> Result<Trace, &'static str> {
    spec.validate()?;
    let report = config.validate();
    if !report.is_pass() {
        return Err("invalid model config");
    }
    let mut generator = Generator::new(config, spec);
    let total = spec.total_tokens();
    let mut events = Vec::with_capacity((total * config.num_layers as u64) as usize);
    for _ in 0..total {
        events.extend(generator.next_token_events());
    }
    Ok(Trace {
        num_layers: config.num_layers,
        experts_per_layer: config.experts_per_layer,
        k: config.experts_active_per_token,
        events,
    })
}

/// Per-expert activation statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFrequency {
    /// Times each expert appeared in an activation set.
    pub counts: Vec<u64>,
    /// Mean gate mass per activation, 0 for never-activated experts.
    pub mean_gate: Vec<f64>,
}

/// Counts activations and mean gate mass per expert in one layer.
pub fn empirical_frequency(trace: &Trace, layer: u32) -> LayerFrequency {
    let n = trace.experts_per_layer as usize;
    let mut counts = vec![0u64; n];
    let mut mass = vec![0.0f64; n];
    for ev in trace.events.iter().filter(|e| e.layer == layer) {
        for &(e, g) in &ev.activations {
            counts[e as usize] += 1;
            mass[e as usize] += g;
        }
    }
    let mean_gate = counts
        .iter()
        .zip(&mass)
        .map(|(&c, &m)| if c == 0 { 0.0 } else { m / c as f64 })
        .collect();
    LayerFrequency { counts, mean_gate }
}
