//! Core algorithms for simulating mixed-precision Mixture-of-Experts serving.
//!
//! An MoE layer routes each token to a small subset of experts. Keeping every
//! expert at high precision does not fit on a memory-constrained device, so a
//! runtime controller tracks per-expert hotness and keeps only the hottest
//! experts at high precision, demoting the rest to a compact representation.
//! This crate models that runtime end to end, without touching real weights:
//!
//! * [`model`] — model geometry, expert identity, precision tiers, and byte
//!   arithmetic shared by everything else.
//! * [`controller`] — EMA hotness tracking, memory-budget feasibility, warmup
//!   threshold fixing, and periodic upgrade/downgrade scheduling.
//! * [`pool`] — deterministic fixed-block dual pools with a transient staging
//!   buffer and a residency/version ledger.
//! * [`pipeline`] — the asynchronous SSD→DRAM→HBM swap state machine with
//!   link contention, an LRU DRAM cache, and correlation-based prefetch.
//! * [`workload`] — routing-trace data model and a synthetic generator with
//!   Zipf skew, hot-set drift, and cross-layer coupling.
//! * [`engine`] — a discrete-event simulator that drives traces through the
//!   above and reports latency, throughput, memory, and coverage metrics.
//!
//! The crate is `no_std` (alloc required); all file formats, configuration
//! parsing, and the CLI live in the companion `mixsim` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod controller;
pub mod engine;
pub mod model;
pub mod pipeline;
pub mod pool;
pub mod workload;

pub use controller::{ControllerParams, HotnessTable, LayerBudget, TransitionCommand};
pub use engine::{Report, SimConfig};
pub use model::{Bytes, ExpertRef, ModelConfig, PrecisionTier, ResidencyTier, Step, Tick};
pub use pool::{BlockHandle, DualPool, ResidencyIndex};
pub use workload::{Trace, TraceEvent, WorkloadSpec};
