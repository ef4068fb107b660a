//! Hotness tracking and precision scheduling.
//!
//! Each expert carries an EMA hotness score updated from router gate
//! probabilities: an activated expert moves toward its gate value, every
//! other expert in the layer passively decays. At fixed period boundaries
//! the scheduler ranks a layer's experts, intersects the top `n_hot` with
//! the warmup-fixed threshold `tau_h`, and emits upgrade/downgrade commands
//! so that the high-precision population never exceeds the memory-derived
//! budget.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::model::{Bytes, ExpertRef, ModelConfig, PrecisionTier, RangeError, Step};

/// Controller tuning parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ControllerParams {
    /// EMA retention factor, in (0, 1).
    pub ema_factor: f64,
    /// Steps between scheduling decisions.
    pub update_period: Step,
    /// Minimum steps between two transitions of the same expert.
    pub dwell_min: Step,
    /// Steps of hotness collection before the threshold is fixed.
    pub warmup_steps: Step,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            ema_factor: 0.95,
            update_period: 64,
            dwell_min: 128,
            warmup_steps: 256,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(self.ema_factor > 0.0 && self.ema_factor < 1.0) {
            return Err(ControllerError::BadParam("ema_factor must be in (0, 1)"));
        }
        if self.update_period < 1 {
            return Err(ControllerError::BadParam("update_period must be >= 1"));
        }
        if self.warmup_steps < 1 {
            return Err(ControllerError::BadParam("warmup_steps must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControllerError {
    BadParam(&'static str),
    /// A trace event referenced the same expert twice or carried an
    /// out-of-range index or gate value.
    MalformedTrace(&'static str),
}

impl fmt::Display for ControllerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControllerError::BadParam(m) => write!(f, "invalid controller parameter: {m}"),
            ControllerError::MalformedTrace(m) => write!(f, "malformed trace event: {m}"),
        }
    }
}

/// Per-expert EMA hotness scores, layer-major.
#[derive(Debug, Clone)]
pub struct HotnessTable {
    num_layers: u32,
    experts_per_layer: u32,
    scores: Vec<f64>,
    last_update_step: Vec<Step>,
}

impl HotnessTable {
    pub fn new(num_layers: u32, experts_per_layer: u32) -> Self {
        Self {
            num_layers,
            experts_per_layer,
            scores: vec![0.0; (num_layers * experts_per_layer) as usize],
            last_update_step: vec![0; num_layers as usize],
        }
    }

    pub fn num_layers(&self) -> u32 {
        self.num_layers
    }

    pub fn score(&self, e: ExpertRef) -> f64 {
        self.scores[(e.layer * self.experts_per_layer + e.expert) as usize]
    }

    pub fn layer_scores(&self, layer: u32) -> &[f64] {
        let n = self.experts_per_layer as usize;
        &self.scores[layer as usize * n..(layer as usize + 1) * n]
    }

    pub fn last_update_step(&self, layer: u32) -> Step {
        self.last_update_step[layer as usize]
    }

    /// Applies one EMA step to a layer: every activated expert moves toward
    /// its gate probability, every inactive expert passively decays. Exactly
    /// one decay/update per expert per call.
    pub fn update(
        &mut self,
        layer: u32,
        activations: &[(u32, f64)],
        step: Step,
        ema_factor: f64,
    ) -> Result<(), ControllerError> {
        let n = self.experts_per_layer;
        for (i, &(e, g)) in activations.iter().enumerate() {
            if e >= n {
                return Err(ControllerError::MalformedTrace("expert index out of range"));
            }
            if !(0.0..=1.0).contains(&g) {
                return Err(ControllerError::MalformedTrace("gate probability outside [0, 1]"));
            }
            if activations[..i].iter().any(|&(p, _)| p == e) {
                return Err(ControllerError::MalformedTrace("duplicate expert index in event"));
            }
        }
        let base = (layer * n) as usize;
        for s in &mut self.scores[base..base + n as usize] {
            *s *= ema_factor;
        }
        for &(e, g) in activations {
            self.scores[base + e as usize] += (1.0 - ema_factor) * g;
        }
        self.last_update_step[layer as usize] = step;
        Ok(())
    }

    /// Expert indices of one layer ranked by descending score; equal scores
    /// fall back to ascending expert index.
    pub fn ranked(&self, layer: u32) -> Vec<u32> {
        let scores = self.layer_scores(layer);
        let mut order: Vec<u32> = (0..self.experts_per_layer).collect();
        order.sort_by(|&a, &b| {
            scores[b as usize]
                .total_cmp(&scores[a as usize])
                .then(a.cmp(&b))
        });
        order
    }
}

/// Per-layer precision budget: how many experts may be high precision, and
/// the hotness threshold fixed after warmup.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerBudget {
    pub n_hot: u32,
    pub n_cold: u32,
    /// Hotness cutoff, fixed by [`warmup_threshold`]. `None` until warmup
    /// completes; `+inf` when `n_hot` is zero (no expert qualifies).
    pub tau_h: Option<f64>,
    pub hbm_budget: Bytes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetError {
    /// Even the all-low configuration does not fit the budget.
    Infeasible { required: Bytes, budget: Bytes },
}

impl fmt::Display for BudgetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BudgetError::Infeasible { required, budget } => write!(
                f,
                "infeasible budget: all-low layout needs {required} bytes, budget is {budget}"
            ),
        }
    }
}

/// Computes the maximum feasible `n_hot` for one layer under `hbm_budget`:
/// the largest `n` with `n * S_hot + (N - n) * S_cold <= hbm_budget`.
pub fn init_budget(config: &ModelConfig, hbm_budget: Bytes) -> Result<LayerBudget, BudgetError> {
    let n = config.experts_per_layer as u64;
    let all_cold = n * config.expert_bytes_low;
    if hbm_budget < all_cold {
        return Err(BudgetError::Infeasible {
            required: all_cold,
            budget: hbm_budget,
        });
    }
    let step = config.expert_bytes_high - config.expert_bytes_low;
    let n_hot = n.min((hbm_budget - all_cold) / step) as u32;
    Ok(LayerBudget {
        n_hot,
        n_cold: config.experts_per_layer - n_hot,
        tau_h: None,
        hbm_budget,
    })
}

/// Returns the `n_hot`-th largest score in the layer. With `n_hot == 0` no
/// expert may qualify, so the sentinel is `+inf`. Once fixed, the caller
/// must treat the threshold as immutable.
pub fn warmup_threshold(
    table: &HotnessTable,
    layer: u32,
    n_hot: u32,
) -> Result<f64, RangeError> {
    let scores = table.layer_scores(layer);
    if n_hot as usize > scores.len() {
        return Err(RangeError {
            what: "n_hot",
            value: n_hot as u64,
            max: scores.len() as u64,
        });
    }
    if n_hot == 0 {
        return Ok(f64::INFINITY);
    }
    let ranked = table.ranked(layer);
    Ok(scores[ranked[n_hot as usize - 1] as usize])
}

/// Direction of a precision transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Direction {
    Upgrade,
    Downgrade,
}

/// A scheduling decision handed to the swap pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionCommand {
    pub expert: ExpertRef,
    pub direction: Direction,
    pub issued_at: Step,
}

/// Controller-side view of one layer's expert states: the target precision
/// tier, whether a transition is in flight, and the step of the last issued
/// transition (for the dwell guard).
#[derive(Debug, Clone)]
pub struct LayerStates {
    pub tier: Vec<PrecisionTier>,
    pub in_flight: Vec<bool>,
    pub last_transition: Vec<Step>,
}

impl LayerStates {
    pub fn all_low(experts_per_layer: u32) -> Self {
        let n = experts_per_layer as usize;
        Self {
            tier: vec![PrecisionTier::Low; n],
            in_flight: vec![false; n],
            last_transition: vec![0; n],
        }
    }

    pub fn high_count(&self) -> u32 {
        self.tier.iter().filter(|&&t| t == PrecisionTier::High).count() as u32
    }

    /// Expert indices whose target tier is high precision.
    pub fn hot_set(&self) -> Vec<u32> {
        (0..self.tier.len() as u32)
            .filter(|&e| self.tier[e as usize] == PrecisionTier::High)
            .collect()
    }
}

/// Membership set for one layer at one period boundary: experts ranked in
/// the top `n_hot` by hotness whose score also clears `tau_h`.
pub fn hot_set(table: &HotnessTable, layer: u32, n_hot: u32, tau_h: f64) -> Vec<u32> {
    let scores = table.layer_scores(layer);
    table
        .ranked(layer)
        .into_iter()
        .take(n_hot as usize)
        .filter(|&e| scores[e as usize] >= tau_h)
        .collect()
}

/// Periodic scheduling pass for one layer (runs only when
/// `step % update_period == 0` and the threshold has been fixed).
///
/// Emits downgrades for high-precision experts that left the hot set, then
/// upgrades for hot-set members still at low precision, subject to the
/// in-flight and dwell guards and capped so the high-precision population
/// never exceeds `n_hot`. Emitted commands flip the controller-side target
/// tier and mark the expert in flight, so repeating the call at the same
/// step emits nothing.
pub fn schedule(
    table: &HotnessTable,
    states: &mut LayerStates,
    budget: &LayerBudget,
    params: &ControllerParams,
    layer: u32,
    step: Step,
) -> Vec<TransitionCommand> {
    let tau_h = match budget.tau_h {
        Some(t) => t,
        None => return Vec::new(),
    };
    if step % params.update_period != 0 {
        return Vec::new();
    }
    let members = hot_set(table, layer, budget.n_hot, tau_h);
    let mut in_hot = vec![false; states.tier.len()];
    for &e in &members {
        in_hot[e as usize] = true;
    }
    let mut commands = Vec::new();
    let mut high_count = states.high_count();
    let dwell_ok = |states: &LayerStates, e: usize| step - states.last_transition[e] >= params.dwell_min;

    for e in 0..states.tier.len() {
        if !in_hot[e]
            && states.tier[e] == PrecisionTier::High
            && !states.in_flight[e]
            && dwell_ok(states, e)
        {
            states.tier[e] = PrecisionTier::Low;
            states.in_flight[e] = true;
            states.last_transition[e] = step;
            high_count -= 1;
            commands.push(TransitionCommand {
                expert: ExpertRef::new(layer, e as u32),
                direction: Direction::Downgrade,
                issued_at: step,
            });
        }
    }
    // Upgrades in descending-hotness order, so when the cap binds the
    // hottest candidates win.
    for &e in &members {
        let e = e as usize;
        if states.tier[e] == PrecisionTier::Low
            && !states.in_flight[e]
            && dwell_ok(states, e)
            && high_count < budget.n_hot
        {
            states.tier[e] = PrecisionTier::High;
            states.in_flight[e] = true;
            states.last_transition[e] = step;
            high_count += 1;
            commands.push(TransitionCommand {
                expert: ExpertRef::new(layer, e as u32),
                direction: Direction::Upgrade,
                issued_at: step,
            });
        }
    }
    commands
}

/// Warmup completion for one layer: fixes `tau_h` as the `n_hot`-th largest
/// warmup score and emits upgrades seeding the initial high-precision set
/// with the top `n_hot` experts.
pub fn warmup_init(
    table: &HotnessTable,
    states: &mut LayerStates,
    budget: &mut LayerBudget,
    layer: u32,
    step: Step,
) -> Result<Vec<TransitionCommand>, RangeError> {
    let tau = warmup_threshold(table, layer, budget.n_hot)?;
    budget.tau_h = Some(tau);
    let mut commands = Vec::new();
    for &e in table.ranked(layer).iter().take(budget.n_hot as usize) {
        let e = e as usize;
        debug_assert_eq!(states.tier[e], PrecisionTier::Low);
        states.tier[e] = PrecisionTier::High;
        states.in_flight[e] = true;
        states.last_transition[e] = step;
        commands.push(TransitionCommand {
            expert: ExpertRef::new(layer, e as u32),
            direction: Direction::Upgrade,
            issued_at: step,
        });
    }
    Ok(commands)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(n: u32, high: Bytes, low: Bytes) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            experts_per_layer: n,
            experts_active_per_token: 2,
            expert_bytes_high: high,
            expert_bytes_low: low,
        }
    }

    #[test]
    fn one_step_ema_from_zero() {
        let mut t = HotnessTable::new(1, 4);
        t.update(0, &[(0, 1.0)], 1, 0.9).unwrap();
        assert!((t.score(ExpertRef::new(0, 0)) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn passive_decay() {
        let mut t = HotnessTable::new(1, 4);
        t.update(0, &[(1, 1.0)], 1, 0.5).unwrap();
        t.update(0, &[(1, 1.0)], 2, 0.5).unwrap();
        // expert 0 never activated stays at 0; expert 1 approaches 1
        assert_eq!(t.score(ExpertRef::new(0, 0)), 0.0);
        let mut t = HotnessTable::new(1, 2);
        t.update(0, &[(0, 1.0)], 1, 0.9).unwrap();
        let s = t.score(ExpertRef::new(0, 0));
        t.update(0, &[(1, 1.0)], 2, 0.9).unwrap();
        assert!((t.score(ExpertRef::new(0, 0)) - s * 0.9).abs() < 1e-15);
    }

    #[test]
    fn three_constant_steps_match_recursive_oracle() {
        // oracle: direct recursive EMA evaluation, g=1 three times, alpha=0.5
        let mut t = HotnessTable::new(1, 1);
        for step in 1..=3 {
            t.update(0, &[(0, 1.0)], step, 0.5).unwrap();
        }
        assert!((t.score(ExpertRef::new(0, 0)) - 0.875).abs() < 1e-15);
    }

    #[test]
    fn duplicate_expert_in_event_rejected() {
        let mut t = HotnessTable::new(1, 4);
        let err = t.update(0, &[(2, 0.5), (2, 0.5)], 1, 0.9).unwrap_err();
        assert!(matches!(err, ControllerError::MalformedTrace(_)));
    }

    #[test]
    fn init_budget_corners() {
        let c = cfg(128, 2, 1);
        assert_eq!(init_budget(&c, 256).unwrap().n_hot, 128);
        assert_eq!(init_budget(&c, 128).unwrap().n_hot, 0);
        assert!(matches!(init_budget(&c, 127), Err(BudgetError::Infeasible { .. })));
    }

    #[test]
    fn init_budget_matches_brute_force_scan() {
        // oracle: scan all n_hot in 0..=N, take max satisfying the inequality
        let c = cfg(128, 4, 1);
        let budget = 200;
        let oracle = (0..=128u64)
            .filter(|&n| n * 4 + (128 - n) * 1 <= budget)
            .max()
            .unwrap();
        assert_eq!(oracle, 24);
        assert_eq!(init_budget(&c, budget).unwrap().n_hot, oracle as u32);
    }

    #[test]
    fn warmup_threshold_order_statistic() {
        let mut t = HotnessTable::new(1, 4);
        t.update(0, &[(0, 1.0), (1, 0.5)], 1, 0.0).unwrap();
        // scores now [1.0, 0.5, 0.0, 0.0]
        assert_eq!(warmup_threshold(&t, 0, 2).unwrap(), 0.5);
        assert_eq!(warmup_threshold(&t, 0, 0).unwrap(), f64::INFINITY);
        assert!(warmup_threshold(&t, 0, 5).is_err());
    }

    #[test]
    fn warmup_threshold_degenerate_tie() {
        let mut t = HotnessTable::new(1, 3);
        t.update(0, &[(0, 0.3), (1, 0.3), (2, 0.3)], 1, 0.0).unwrap();
        assert_eq!(warmup_threshold(&t, 0, 2).unwrap(), 0.3);
    }

    fn mk_budget(n: u32, n_hot: u32, tau: f64) -> LayerBudget {
        LayerBudget {
            n_hot,
            n_cold: n - n_hot,
            tau_h: Some(tau),
            hbm_budget: u64::MAX,
        }
    }

    fn table_with_scores(scores: &[f64]) -> HotnessTable {
        let mut t = HotnessTable::new(1, scores.len() as u32);
        let acts: Vec<(u32, f64)> = scores.iter().enumerate().map(|(i, &s)| (i as u32, s)).collect();
        t.update(0, &acts, 1, 0.0).unwrap();
        t
    }

    #[test]
    fn schedule_off_period_is_empty() {
        let t = table_with_scores(&[0.9, 0.5, 0.3]);
        let mut st = LayerStates::all_low(3);
        let b = mk_budget(3, 2, 0.4);
        let p = ControllerParams {
            update_period: 8,
            dwell_min: 0,
            ..Default::default()
        };
        assert!(schedule(&t, &mut st, &b, &p, 0, 7).is_empty());
    }

    #[test]
    fn schedule_upgrades_hot_candidates() {
        let t = table_with_scores(&[0.9, 0.5, 0.3]);
        let mut st = LayerStates::all_low(3);
        let b = mk_budget(3, 2, 0.4);
        let p = ControllerParams {
            update_period: 8,
            dwell_min: 0,
            ..Default::default()
        };
        let cmds = schedule(&t, &mut st, &b, &p, 0, 8);
        let got: Vec<_> = cmds.iter().map(|c| (c.expert.expert, c.direction)).collect();
        assert_eq!(got, vec![(0, Direction::Upgrade), (1, Direction::Upgrade)]);
        // idempotence: same step again emits nothing
        assert!(schedule(&t, &mut st, &b, &p, 0, 8).is_empty());
    }

    #[test]
    fn schedule_downgrades_below_threshold_even_in_rank() {
        // b ranks second but fails tau, so it is evicted from the hot set
        let t = table_with_scores(&[0.9, 0.35, 0.3]);
        let mut st = LayerStates::all_low(3);
        st.tier[0] = PrecisionTier::High;
        st.tier[1] = PrecisionTier::High;
        let b = mk_budget(3, 2, 0.4);
        let p = ControllerParams {
            update_period: 8,
            dwell_min: 0,
            ..Default::default()
        };
        let cmds = schedule(&t, &mut st, &b, &p, 0, 8);
        let got: Vec<_> = cmds.iter().map(|c| (c.expert.expert, c.direction)).collect();
        assert_eq!(got, vec![(1, Direction::Downgrade)]);
    }

    proptest! {
        #[test]
        fn scores_stay_in_unit_interval(
            alpha in 0.01f64..0.99,
            gates in proptest::collection::vec((0u32..8, 0.0f64..=1.0), 1..200),
        ) {
            let mut t = HotnessTable::new(1, 8);
            for (step, &(e, g)) in gates.iter().enumerate() {
                t.update(0, &[(e, g)], step as Step + 1, alpha).unwrap();
                for &s in t.layer_scores(0) {
                    prop_assert!((0.0..=1.0).contains(&s));
                }
            }
        }

        #[test]
        fn ema_closed_form_under_constant_gate(
            alpha in 0.01f64..0.99,
            g in 0.0f64..=1.0,
            steps in 1u64..2000,
        ) {
            let mut t = HotnessTable::new(1, 1);
            for step in 1..=steps {
                t.update(0, &[(0, g)], step, alpha).unwrap();
            }
            let closed = g * (1.0 - libm::pow(alpha, steps as f64));
            prop_assert!((t.score(ExpertRef::new(0, 0)) - closed).abs() < 1e-12);
        }

        #[test]
        fn schedule_never_exceeds_budget(
            raw in proptest::collection::vec((0.0f64..=1.0, proptest::bool::ANY), 16),
            n_hot in 0u32..=16,
            tau in 0.0f64..=1.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s).collect();
            let t = table_with_scores(&scores);
            let mut st = LayerStates::all_low(16);
            let mut pre_high = 0;
            for (e, &(_, high)) in raw.iter().enumerate() {
                if high && pre_high < n_hot {
                    st.tier[e] = PrecisionTier::High;
                    pre_high += 1;
                }
            }
            let b = mk_budget(16, n_hot, tau);
            let p = ControllerParams { update_period: 4, dwell_min: 0, ..Default::default() };
            schedule(&t, &mut st, &b, &p, 0, 8);
            prop_assert!(st.high_count() <= n_hot);
        }
    }
}
