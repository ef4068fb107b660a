//! Experiment configuration files.
//!
//! A single TOML file describes one experiment; every key has a default, and
//! unknown keys are rejected so typos fail loudly instead of silently using
//! a default. Precedence is CLI flag > file value > default; `--print-config`
//! emits the fully resolved document.

use anyhow::{Context, Result};
use mixsim_core::engine::{BudgetConfig, ComputeModel, SimConfig};
use mixsim_core::controller::ControllerParams;
use mixsim_core::model::{Bytes, ModelConfig};
use mixsim_core::pipeline::TierLinkModel;
use mixsim_core::workload::WorkloadSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

// Each section mirrors a core type so the file schema can reject unknown
// keys without forcing `deny_unknown_fields` into the core crate.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: u32,
    pub experts_per_layer: u32,
    pub experts_active_per_token: u32,
    pub expert_bytes_high: Bytes,
    pub expert_bytes_low: Bytes,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            num_layers: 8,
            experts_per_layer: 128,
            experts_active_per_token: 8,
            expert_bytes_high: 4 << 20,
            expert_bytes_low: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub ema_factor: f64,
    pub update_period: u64,
    pub dwell_min: u64,
    pub warmup_steps: u64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let p = ControllerParams::default();
        Self {
            ema_factor: p.ema_factor,
            update_period: p.update_period,
            dwell_min: p.dwell_min,
            warmup_steps: p.warmup_steps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinksSection {
    pub ssd_to_dram_bandwidth: u64,
    pub dram_to_hbm_bandwidth: u64,
    pub ssd_to_dram_latency: u64,
    pub dram_to_hbm_latency: u64,
    pub dram_cache_capacity: Bytes,
}

impl Default for LinksSection {
    fn default() -> Self {
        let l = TierLinkModel::default();
        Self {
            ssd_to_dram_bandwidth: l.ssd_to_dram_bandwidth,
            dram_to_hbm_bandwidth: l.dram_to_hbm_bandwidth,
            ssd_to_dram_latency: l.ssd_to_dram_latency,
            dram_to_hbm_latency: l.dram_to_hbm_latency,
            dram_cache_capacity: l.dram_cache_capacity,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub hbm_total: Bytes,
    pub reserved: Bytes,
    pub n_hot_override: Option<u32>,
    pub transient_blocks: u32,
}

impl Default for BudgetSection {
    fn default() -> Self {
        let b = BudgetConfig::default();
        Self {
            hbm_total: b.hbm_total,
            reserved: b.reserved,
            n_hot_override: b.n_hot_override,
            transient_blocks: b.transient_blocks,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComputeSection {
    pub layer_base_ticks: u64,
    pub expert_high_ticks: u64,
    pub expert_low_ticks: u64,
}

impl Default for ComputeSection {
    fn default() -> Self {
        let c = ComputeModel::default();
        Self {
            layer_base_ticks: c.layer_base_ticks,
            expert_high_ticks: c.expert_high_ticks,
            expert_low_ticks: c.expert_low_ticks,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub prefetch_fanout: u32,
    pub start_high: bool,
    pub record_hotness: bool,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            prefetch_fanout: 0,
            start_high: false,
            record_hotness: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub zipf_s: f64,
    pub drift_period: u64,
    pub drift_rotation: f64,
    pub coupling: f64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub seed: u64,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let w = WorkloadSpec::default();
        Self {
            zipf_s: w.zipf_s,
            drift_period: w.drift_period,
            drift_rotation: w.drift_rotation,
            coupling: w.coupling,
            prefill_tokens: w.prefill_tokens,
            decode_tokens: w.decode_tokens,
            seed: w.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Default trace path for `gen-trace` when `-o` is omitted.
    pub trace: String,
    /// Default report path for `simulate` when `-o` is omitted.
    pub report: String,
    /// Default output directory for `sweep` when `-o` is omitted.
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            trace: String::from("trace.txt"),
            report: String::from("report.json"),
            dir: String::from("sweep-out"),
        }
    }
}

/// One experiment: all sections, all defaulted.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub controller: ControllerSection,
    pub links: LinksSection,
    pub budget: BudgetSection,
    pub compute: ComputeSection,
    pub sim: SimSection,
    pub workload: WorkloadSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.model.num_layers,
            experts_per_layer: self.model.experts_per_layer,
            experts_active_per_token: self.model.experts_active_per_token,
            expert_bytes_high: self.model.expert_bytes_high,
            expert_bytes_low: self.model.expert_bytes_low,
        }
    }

    pub fn workload_spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            zipf_s: self.workload.zipf_s,
            drift_period: self.workload.drift_period,
            drift_rotation: self.workload.drift_rotation,
            coupling: self.workload.coupling,
            prefill_tokens: self.workload.prefill_tokens,
            decode_tokens: self.workload.decode_tokens,
            seed: self.workload.seed,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            model: self.model_config(),
            controller: ControllerParams {
                ema_factor: self.controller.ema_factor,
                update_period: self.controller.update_period,
                dwell_min: self.controller.dwell_min,
                warmup_steps: self.controller.warmup_steps,
            },
            links: TierLinkModel {
                ssd_to_dram_bandwidth: self.links.ssd_to_dram_bandwidth,
                dram_to_hbm_bandwidth: self.links.dram_to_hbm_bandwidth,
                ssd_to_dram_latency: self.links.ssd_to_dram_latency,
                dram_to_hbm_latency: self.links.dram_to_hbm_latency,
                dram_cache_capacity: self.links.dram_cache_capacity,
            },
            budget: BudgetConfig {
                hbm_total: self.budget.hbm_total,
                reserved: self.budget.reserved,
                n_hot_override: self.budget.n_hot_override,
                transient_blocks: self.budget.transient_blocks,
            },
            compute: ComputeModel {
                layer_base_ticks: self.compute.layer_base_ticks,
                expert_high_ticks: self.compute.expert_high_ticks,
                expert_low_ticks: self.compute.expert_low_ticks,
            },
            prefetch_fanout: self.sim.prefetch_fanout,
            start_high: self.sim.start_high,
            record_hotness: self.sim.record_hotness,
            seed: self.sim.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_defaults() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.controller.ema_factor, 0.95);
        assert_eq!(cfg.controller.update_period, 64);
        assert_eq!(cfg.model.experts_per_layer, 128);
        assert!(cfg.sim_config().validate().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[model]\nnum_layres = 3\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[modle]\nnum_layers = 3\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.workload.zipf_s = 1.6;
        cfg.budget.n_hot_override = Some(16);
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.workload.zipf_s, 1.6);
        assert_eq!(back.budget.n_hot_override, Some(16));
    }
}
