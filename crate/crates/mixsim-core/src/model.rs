//! Model geometry, expert identity, and byte-size arithmetic.
//!
//! Expert weights are never materialized; only their sizes flow through the
//! system. All byte arithmetic is exact integer arithmetic so that memory
//! budget checks never depend on floating-point rounding.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Exact byte count. All sizes in the system are integers.
pub type Bytes = u64;

/// Controller step counter (one step per routed token).
pub type Step = u64;

/// Simulated time in integer ticks. Tick granularity is up to the
/// configuration (nanoseconds at typical link settings).
pub type Tick = u64;

/// Static geometry of the simulated MoE model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub num_layers: u32,
    /// Experts per layer (N).
    pub experts_per_layer: u32,
    /// Experts activated per token (k).
    pub experts_active_per_token: u32,
    /// Bytes of one expert at high precision.
    pub expert_bytes_high: Bytes,
    /// Bytes of one expert at low precision.
    pub expert_bytes_low: Bytes,
}

/// Precision tier of an expert's stable representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PrecisionTier {
    High,
    Low,
}

/// Storage tier an expert blob currently occupies. A stable (servable)
/// version always has residency HBM; DRAM and SSD are staging locations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ResidencyTier {
    Hbm,
    Dram,
    Ssd,
}

/// Identity of one expert. Derived `Ord` is lexicographic on
/// `(layer, expert)`, which is the deterministic tie-break order used
/// throughout the controller and pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpertRef {
    pub layer: u32,
    pub expert: u32,
}

impl ExpertRef {
    pub const fn new(layer: u32, expert: u32) -> Self {
        Self { layer, expert }
    }
}

impl fmt::Display for ExpertRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}/E{}", self.layer, self.expert)
    }
}

/// Outcome of [`ModelConfig::validate`]: pass, or the list of violated
/// invariants.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Argument outside its documented range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeError {
    pub what: &'static str,
    pub value: u64,
    pub max: u64,
}

impl fmt::Display for RangeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {} out of range (max {})", self.what, self.value, self.max)
    }
}

impl ModelConfig {
    /// Checks every structural invariant and reports all violations at once.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if self.num_layers < 1 {
            violations.push(String::from("num_layers >= 1"));
        }
        if self.experts_per_layer < 1 {
            violations.push(String::from("experts_per_layer >= 1"));
        }
        if self.experts_active_per_token < 1 {
            violations.push(String::from("experts_active_per_token >= 1"));
        }
        if self.experts_active_per_token > self.experts_per_layer {
            violations.push(String::from("experts_active_per_token <= experts_per_layer"));
        }
        if self.expert_bytes_low == 0 {
            violations.push(String::from("expert_bytes_low > 0"));
        }
        if self.expert_bytes_high <= self.expert_bytes_low {
            violations.push(String::from("expert_bytes_high > expert_bytes_low"));
        }
        ValidationReport { violations }
    }

    /// Byte size of one expert at the given precision tier.
    pub fn expert_bytes(&self, tier: PrecisionTier) -> Bytes {
        match tier {
            PrecisionTier::High => self.expert_bytes_high,
            PrecisionTier::Low => self.expert_bytes_low,
        }
    }

    /// Total stable bytes of one layer with `n_hot` experts at high
    /// precision and the rest at low precision.
    pub fn layer_bytes(&self, n_hot: u32) -> Result<Bytes, RangeError> {
        if n_hot > self.experts_per_layer {
            return Err(RangeError {
                what: "n_hot",
                value: n_hot as u64,
                max: self.experts_per_layer as u64,
            });
        }
        let n_cold = (self.experts_per_layer - n_hot) as u64;
        Ok(n_hot as u64 * self.expert_bytes_high + n_cold * self.expert_bytes_low)
    }

    /// Iterator over every expert in the model, in `ExpertRef` order.
    pub fn all_experts(&self) -> impl Iterator<Item = ExpertRef> + '_ {
        let n = self.experts_per_layer;
        (0..self.num_layers).flat_map(move |l| (0..n).map(move |e| ExpertRef::new(l, e)))
    }

    pub fn total_experts(&self) -> u64 {
        self.num_layers as u64 * self.experts_per_layer as u64
    }
}
