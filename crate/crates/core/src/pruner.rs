//! Reconfiguration: choose which prunable coordinates stay in the model so
//! that estimated loss decrease per unit of round time is maximal.
//!
//! The estimate of loss decrease for a kept set `M` is `Δ(M) = Σ_{j∈M} g_j²`,
//! with `g_j²` the squared gradients accumulated since the last
//! reconfiguration. The objective is `Γ(M) = Δ(M) / T(M)`. Large-magnitude
//! weights form the set `P̄` that must stay; everything else (`P`) may be
//! pruned or added back.
//!
//! Floating-point sums for `Δ` and `T` are always evaluated over the sorted
//! coordinate set in ascending order ([`evaluate`]), so two routes that pick
//! the same set report bitwise-identical objective values.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cost::{CostModel, LinearSetCost, SetCost};
use crate::error::{Error, Result};
use crate::nn::{GradientSample, MaskedParams};

/// Per-coordinate running sums of squared full-space gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceAccumulator {
    sums: Vec<f64>,
    iterations: u64,
    samples: u64,
}

impl ImportanceAccumulator {
    pub fn new(capacity: usize) -> Self {
        Self { sums: vec![0.0; capacity], iterations: 0, samples: 0 }
    }

    pub fn add(&mut self, grad: &GradientSample) {
        for (s, g) in self.sums.iter_mut().zip(grad.flat_weights()) {
            *s += g * g;
        }
        self.iterations += 1;
        self.samples += grad.batch_size as u64;
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn reset(&mut self) {
        self.sums.iter_mut().for_each(|s| *s = 0.0);
        self.iterations = 0;
        self.samples = 0;
    }

    /// Weighted mean of client sums; weights are renormalized.
    pub fn merge_weighted(parts: &[(&ImportanceAccumulator, f64)]) -> Result<Vec<f64>> {
        let Some((first, _)) = parts.first() else {
            return Err(Error::Protocol("no importance reports to merge".into()));
        };
        let total: f64 = parts.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) {
            return Err(Error::Protocol("importance weights sum to zero".into()));
        }
        let mut out = vec![0.0; first.sums.len()];
        for (acc, w) in parts {
            if acc.sums.len() != out.len() {
                return Err(Error::Protocol("importance vectors differ in length".into()));
            }
            let w = w / total;
            for (o, s) in out.iter_mut().zip(&acc.sums) {
                *o += w * s;
            }
        }
        Ok(out)
    }
}

/// Alpha and density-cap schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedules {
    /// Fraction of prunable capacity that is eligible at round 0.
    pub alpha0: f64,
    /// Rounds over which the eligible fraction halves.
    pub alpha_half_life: f64,
    /// Density limit at the start of further pruning.
    pub density_limit: Option<f64>,
    /// Density the cap reaches at `cap_rounds`.
    pub target_density: Option<f64>,
    /// Length of the linear cap schedule, in rounds.
    pub cap_rounds: Option<u64>,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            alpha0: 0.3,
            alpha_half_life: 10_000.0,
            density_limit: None,
            target_density: None,
            cap_rounds: None,
        }
    }
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha0) || !(self.alpha_half_life > 0.0) {
            return Err(Error::InvalidArgument("alpha0 must be in [0,1] and alpha_half_life positive".into()));
        }
        match (self.density_limit, self.target_density, self.cap_rounds) {
            (None, None, _) => Ok(()),
            (Some(l), Some(t), Some(r)) if 0.0 <= t && t <= l && l <= 1.0 && r > 0 => Ok(()),
            (Some(l), Some(t), Some(_)) => Err(Error::InvalidArgument(format!(
                "density caps need 0 <= target ({t}) <= limit ({l}) <= 1"
            ))),
            _ => Err(Error::InvalidArgument(
                "density_limit, target_density and cap_rounds must be set together".into(),
            )),
        }
    }

    pub fn alpha_at(&self, round: u64) -> f64 {
        self.alpha0 * 0.5f64.powf(round as f64 / self.alpha_half_life)
    }

    /// `d_max(r) = (r·d_t + (r_max − r)·d_l) / r_max`, held at `d_t` past
    /// `r_max`. `None` when no caps are configured.
    pub fn max_density_at(&self, round: u64) -> Option<f64> {
        let (l, t, r_max) = (self.density_limit?, self.target_density?, self.cap_rounds?);
        let r = round.min(r_max) as f64;
        let r_max = r_max as f64;
        Some((r * t + (r_max - r) * l) / r_max)
    }
}

/// `alpha(r) = 0.3 · 0.5^(r/10000)`.
pub fn alpha_at(round: u64) -> f64 {
    Schedules::default().alpha_at(round)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunablePartition {
    /// Coordinates that may be pruned or added back, ascending.
    pub prunable: Vec<usize>,
    /// Coordinates that must stay, ascending.
    pub fixed: Vec<usize>,
    pub alpha: f64,
}

/// Every pruned or zero-valued coordinate, plus the `floor(alpha · capacity)`
/// smallest-magnitude nonzero weights, is prunable. Ties go to the lower index.
pub fn partition(params: &MaskedParams, alpha: f64) -> PrunablePartition {
    let weights = params.flat_weights();
    let mask = params.flat_mask();
    let slots = (alpha * weights.len() as f64).floor() as usize;

    let mut in_p = vec![false; weights.len()];
    let mut candidates = Vec::new();
    for (j, (w, m)) in weights.iter().zip(&mask).enumerate() {
        if !m || *w == 0.0 {
            in_p[j] = true;
        } else {
            candidates.push(j);
        }
    }
    candidates.sort_by(|&a, &b| weights[a].abs().total_cmp(&weights[b].abs()).then(a.cmp(&b)));
    for &j in candidates.iter().take(slots) {
        in_p[j] = true;
    }
    let (prunable, fixed) = (0..weights.len()).partition(|&j| in_p[j]);
    PrunablePartition { prunable, fixed, alpha }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Linear,
    General,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconfigPlan {
    /// Kept members of `P`, in the order the solver admitted them.
    pub added: Vec<usize>,
    /// New flat mask: `added ∪ P̄`.
    pub mask: Vec<bool>,
    pub gamma: f64,
    pub delta: f64,
    pub time: f64,
    pub solver: Solver,
    pub prunable_len: usize,
    pub fixed_len: usize,
    /// Objective after each admission, starting from `Γ(P̄)`.
    pub gamma_trace: Vec<f64>,
    /// Set when `P̄` alone exceeded the density cap.
    pub cap_violated: bool,
}

impl ReconfigPlan {
    pub fn kept(&self) -> usize {
        self.fixed_len + self.added.len()
    }

    pub fn density(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.kept() as f64 / self.mask.len() as f64
        }
    }
}

/// `Γ = Δ / T`, defined as zero when either side is zero.
pub fn gamma_of(delta: f64, time: f64) -> f64 {
    if delta == 0.0 || time == 0.0 {
        0.0
    } else {
        delta / time
    }
}

/// `(Δ, T, Γ)` of a sorted coordinate set, summed in ascending order.
pub fn evaluate(importance: &[f64], cost: &dyn SetCost, set: &[usize]) -> (f64, f64, f64) {
    let delta = set.iter().fold(0.0, |acc, &j| acc + importance[j]);
    let time = cost.cost(set);
    (delta, time, gamma_of(delta, time))
}

fn union_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out
}

fn finish(
    importance: &[f64],
    cost: &dyn SetCost,
    part: &PrunablePartition,
    added: Vec<usize>,
    solver: Solver,
    gamma_trace: Vec<f64>,
    cap_violated: bool,
) -> ReconfigPlan {
    let kept = union_sorted(&added, &part.fixed);
    let (delta, time, gamma) = evaluate(importance, cost, &kept);
    let mut mask = vec![false; importance.len()];
    for &j in &kept {
        mask[j] = true;
    }
    ReconfigPlan {
        added,
        mask,
        gamma,
        delta,
        time,
        solver,
        prunable_len: part.prunable.len(),
        fixed_len: part.fixed.len(),
        gamma_trace,
        cap_violated,
    }
}

fn by_ratio_desc(ratio: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| ratio[b].total_cmp(&ratio[a]).then(a.cmp(&b))
}

/// Sort `P` by `g_j²/t_j` and admit coordinates while their ratio is at least
/// the current objective. Globally optimal for linear `T`.
///
/// Coordinates with zero importance are never admitted.
pub fn solve_linear(importance: &[f64], cost: &LinearSetCost, part: &PrunablePartition) -> ReconfigPlan {
    let (mut delta, mut time, _) = evaluate(importance, cost, &part.fixed);
    let mut ratio = vec![0.0; importance.len()];
    for &j in &part.prunable {
        ratio[j] = importance[j] / cost.t[j];
    }
    let mut order = part.prunable.clone();
    order.sort_by(by_ratio_desc(&ratio));

    let mut added = Vec::new();
    let mut trace = vec![gamma_of(delta, time)];
    for j in order {
        if importance[j] > 0.0 && ratio[j] >= gamma_of(delta, time) {
            added.push(j);
            delta += importance[j];
            time += cost.t[j];
            trace.push(gamma_of(delta, time));
        } else {
            break;
        }
    }
    finish(importance, cost, part, added, Solver::Linear, trace, false)
}

/// Greedy admission by marginal ratio `g_j² / (T(M ∪ {j}) − T(M))` for an
/// arbitrary monotone `T`. Stops at a point where no single admission raises
/// the objective.
pub fn solve_general(importance: &[f64], cost: &dyn SetCost, part: &PrunablePartition) -> Result<ReconfigPlan> {
    let mut kept = part.fixed.clone();
    let mut in_a = vec![false; importance.len()];
    let mut added = Vec::new();
    let (_, _, mut gamma) = evaluate(importance, cost, &kept);
    let mut trace = vec![gamma];
    loop {
        let mut best: Option<(usize, f64)> = None;
        for &j in &part.prunable {
            if in_a[j] || importance[j] <= 0.0 {
                continue;
            }
            let marginal = cost.marginal(&kept, j);
            if marginal < 0.0 || marginal.is_nan() {
                return Err(Error::NonMonotone { coord: j, marginal });
            }
            let r = if marginal == 0.0 { f64::INFINITY } else { importance[j] / marginal };
            if best.is_none_or(|(_, br)| r > br) {
                best = Some((j, r));
            }
        }
        match best {
            Some((j, r)) if r >= gamma => {
                in_a[j] = true;
                added.push(j);
                let pos = kept.partition_point(|&x| x < j);
                kept.insert(pos, j);
                gamma = evaluate(importance, cost, &kept).2;
                trace.push(gamma);
            }
            _ => break,
        }
    }
    Ok(finish(importance, cost, part, added, Solver::General, trace, false))
}

/// Truncate the admitted set, in admission order, so that the kept count
/// stays within `floor(d_max(r) · capacity)`.
pub fn apply_caps(
    plan: ReconfigPlan,
    importance: &[f64],
    cost: &dyn SetCost,
    part: &PrunablePartition,
    round: u64,
    sched: &Schedules,
) -> ReconfigPlan {
    let Some(d_max) = sched.max_density_at(round) else {
        return plan;
    };
    let cap = (d_max * plan.mask.len() as f64).floor() as usize;
    if plan.kept() <= cap {
        return plan;
    }
    let violated = part.fixed.len() > cap;
    let room = cap.saturating_sub(part.fixed.len());
    let mut added = plan.added;
    added.truncate(room);
    let mut trace = plan.gamma_trace;
    trace.truncate(added.len() + 1);
    finish(importance, cost, part, added, plan.solver, trace, violated)
}

/// Partition, solve (linear `T`), cap, and apply the new mask.
pub fn reconfigure(
    params: &MaskedParams,
    importance: &[f64],
    cm: &CostModel,
    sched: &Schedules,
    round: u64,
) -> Result<(MaskedParams, ReconfigPlan)> {
    if importance.len() != params.capacity() {
        return Err(Error::Shape(format!(
            "importance covers {} coordinates, model has {}",
            importance.len(),
            params.capacity()
        )));
    }
    cm.check_layers(params.layers.len())?;
    let part = partition(params, sched.alpha_at(round));
    let cost = cm.linear_set_cost(&params.coordinate_layers());
    let plan = solve_linear(importance, &cost, &part);
    let plan = apply_caps(plan, importance, &cost, &part, round, sched);
    let mut next = params.clone();
    next.apply_mask(&plan.mask)?;
    Ok((next, plan))
}

/// One row of the reconfiguration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub round: i64,
    pub p: usize,
    pub p_bar: usize,
    pub a: usize,
    pub gamma: f64,
    pub delta: f64,
    pub time: f64,
    pub density: f64,
}

impl PlanRecord {
    pub fn new(round: i64, plan: &ReconfigPlan) -> Self {
        Self {
            round,
            p: plan.prunable_len,
            p_bar: plan.fixed_len,
            a: plan.added.len(),
            gamma: plan.gamma,
            delta: plan.delta,
            time: plan.time,
            density: plan.density(),
        }
    }
}

pub fn write_plan_csv<W: Write>(out: W, records: &[PlanRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(["round", "p", "p_bar", "a", "gamma", "delta", "time", "density"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params_from(weights: Vec<f64>, mask: Vec<bool>) -> MaskedParams {
        MaskedParams { layers: vec![LayerParams { weights, mask, bias: vec![] }] }
    }

    fn brute_force(importance: &[f64], cost: &dyn SetCost, part: &PrunablePartition) -> f64 {
        let n = part.prunable.len();
        let mut best = f64::NEG_INFINITY;
        for bits in 0u32..(1 << n) {
            let a: Vec<usize> = (0..n).filter(|i| bits >> i & 1 == 1).map(|i| part.prunable[i]).collect();
            let set = union_sorted(&a, &part.fixed);
            best = best.max(evaluate(importance, cost, &set).2);
        }
        best
    }

    #[test]
    fn alpha_schedule_points() {
        assert_eq!(alpha_at(0), 0.3);
        assert!((alpha_at(10_000) - 0.15).abs() < 1e-16);
        assert!(alpha_at(1_000_000) < 1e-20);
        assert!((0..100).all(|r| alpha_at(r * 1000) >= alpha_at((r + 1) * 1000)));
    }

    #[test]
    fn partition_alpha_zero_keeps_everything_fixed() {
        let p = params_from(vec![1.0, -2.0, 3.0], vec![true; 3]);
        let part = partition(&p, 0.0);
        assert!(part.prunable.is_empty());
        assert_eq!(part.fixed, vec![0, 1, 2]);
    }

    #[test]
    fn partition_fully_masked() {
        let p = params_from(vec![0.0; 4], vec![false; 4]);
        for alpha in [0.0, 0.5, 1.0] {
            let part = partition(&p, alpha);
            assert_eq!(part.prunable, vec![0, 1, 2, 3]);
            assert!(part.fixed.is_empty());
        }
    }

    #[test]
    fn partition_sort_and_cut() {
        // coordinates 0..6 unmasked with |w| = 5,4,3,2,1,0.5; 6..10 masked
        let mut w = vec![5.0, -4.0, 3.0, -2.0, 1.0, 0.5];
        w.extend([0.0; 4]);
        let mut m = vec![true; 6];
        m.extend([false; 4]);
        let part = partition(&params_from(w, m), 0.2);
        assert_eq!(part.prunable, vec![4, 5, 6, 7, 8, 9]);
        assert_eq!(part.fixed, vec![0, 1, 2, 3]);
    }

    #[test]
    fn partition_ties_break_by_index() {
        let part = partition(&params_from(vec![1.0, -1.0, 1.0, 2.0], vec![true; 4]), 0.5);
        assert_eq!(part.prunable, vec![0, 1]);
    }

    #[test]
    fn solve_linear_empty_candidates() {
        let imp = vec![1.0, 2.0];
        let cost = LinearSetCost { c: 1.0, t: vec![1.0, 1.0] };
        let part = PrunablePartition { prunable: vec![], fixed: vec![0, 1], alpha: 0.0 };
        let plan = solve_linear(&imp, &cost, &part);
        assert!(plan.added.is_empty());
        assert_eq!(plan.gamma, 3.0 / 3.0);
    }

    #[test]
    fn single_good_candidate_raises_gamma() {
        let imp = vec![1.0, 10.0];
        let cost = LinearSetCost { c: 1.0, t: vec![1.0, 1.0] };
        let part = PrunablePartition { prunable: vec![1], fixed: vec![0], alpha: 0.5 };
        let plan = solve_linear(&imp, &cost, &part);
        assert_eq!(plan.added, vec![1]);
        assert!(plan.gamma > plan.gamma_trace[0]);
    }

    #[test]
    fn degenerate_zero_everything() {
        let imp = vec![0.0; 3];
        let cost = LinearSetCost { c: 0.0, t: vec![1.0; 3] };
        let part = PrunablePartition { prunable: vec![0, 1, 2], fixed: vec![], alpha: 1.0 };
        let plan = solve_linear(&imp, &cost, &part);
        assert!(plan.added.is_empty());
        assert_eq!(plan.gamma, 0.0);
    }

    #[test]
    fn linear_matches_brute_force_on_twelve() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 16;
        let imp: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let cost = LinearSetCost { c: rng.random::<f64>(), t: (0..n).map(|_| rng.random_range(0.1..2.0)).collect() };
        let part = PrunablePartition { prunable: (0..12).collect(), fixed: (12..16).collect(), alpha: 0.75 };
        let plan = solve_linear(&imp, &cost, &part);
        assert_eq!(plan.gamma, brute_force(&imp, &cost, &part));
        // threshold structure
        let ratio = |j: usize| imp[j] / cost.t[j];
        for &j in &plan.added {
            assert!(ratio(j) >= plan.gamma);
        }
        for j in (0..12).filter(|j| !plan.added.contains(j)) {
            assert!(ratio(j) < plan.gamma);
        }
        assert!(plan.gamma_trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn general_with_linear_cost_matches_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 14;
        let imp: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(2)).collect();
        let cost = LinearSetCost { c: 0.3, t: (0..n).map(|_| rng.random_range(0.1..2.0)).collect() };
        let part = PrunablePartition { prunable: (0..10).collect(), fixed: (10..14).collect(), alpha: 0.7 };
        let a = solve_linear(&imp, &cost, &part);
        let b = solve_general(&imp, &cost, &part).unwrap();
        assert_eq!(a.gamma, b.gamma);
        assert_eq!(a.gamma, brute_force(&imp, &cost, &part));
    }

    #[test]
    fn general_no_candidate_above_base() {
        let imp = vec![10.0, 0.1, 0.1];
        let cost = LinearSetCost { c: 0.0, t: vec![1.0; 3] };
        let part = PrunablePartition { prunable: vec![1, 2], fixed: vec![0], alpha: 0.5 };
        let plan = solve_general(&imp, &cost, &part).unwrap();
        assert!(plan.added.is_empty());
    }

    struct Concave {
        c: f64,
        t: Vec<f64>,
    }

    impl SetCost for Concave {
        fn cost(&self, set: &[usize]) -> f64 {
            self.c + set.iter().map(|&j| self.t[j]).sum::<f64>().sqrt()
        }
    }

    #[test]
    fn general_local_optimality_on_concave_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 13;
        let imp: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let cost = Concave { c: 0.5, t: (0..n).map(|_| rng.random_range(0.1..2.0)).collect() };
        let part = PrunablePartition { prunable: (0..10).collect(), fixed: (10..13).collect(), alpha: 0.7 };
        let plan = solve_general(&imp, &cost, &part).unwrap();
        let base = union_sorted(&plan.added, &part.fixed);
        for j in (0..10).filter(|j| !plan.added.contains(j)) {
            let with = union_sorted(&base, &[j]);
            assert!(evaluate(&imp, &cost, &with).2 <= plan.gamma);
        }
    }

    struct Shrinking;

    impl SetCost for Shrinking {
        fn cost(&self, set: &[usize]) -> f64 {
            10.0 - set.len() as f64
        }
    }

    #[test]
    fn general_rejects_non_monotone_cost() {
        let part = PrunablePartition { prunable: vec![0, 1], fixed: vec![], alpha: 1.0 };
        let err = solve_general(&[1.0, 1.0], &Shrinking, &part).unwrap_err();
        assert!(matches!(err, Error::NonMonotone { .. }));
    }

    #[test]
    fn cap_schedule_endpoints() {
        let sched = Schedules {
            density_limit: Some(0.15),
            target_density: Some(0.05),
            cap_rounds: Some(1000),
            ..Schedules::default()
        };
        assert_eq!(sched.max_density_at(0), Some(0.15));
        assert_eq!(sched.max_density_at(1000), Some(0.05));
        assert!((sched.max_density_at(500).unwrap() - 0.10).abs() < 1e-15);
        assert_eq!(sched.max_density_at(5000), Some(0.05));
        assert_eq!(Schedules::default().max_density_at(10), None);
    }

    fn plan_len_at_least(imp: &[f64], cost: &LinearSetCost, part: &PrunablePartition, n: usize) -> bool {
        solve_linear(imp, cost, part).added.len() >= n
    }

    #[test]
    fn caps_truncate_in_admission_order() {
        let n = 20;
        let imp: Vec<f64> = (0..n).map(|j| 1.0 + j as f64).collect();
        let cost = LinearSetCost { c: 0.0, t: vec![1.0; n] };
        let part = PrunablePartition { prunable: (2..20).collect(), fixed: vec![0, 1], alpha: 0.9 };
        assert!(plan_len_at_least(&imp, &cost, &part, 4));
        let plan = solve_linear(&imp, &cost, &part);
        let sched = Schedules {
            density_limit: Some(0.25),
            target_density: Some(0.25),
            cap_rounds: Some(10),
            ..Schedules::default()
        };
        let capped = apply_caps(plan.clone(), &imp, &cost, &part, 0, &sched);
        assert_eq!(capped.kept(), 5);
        assert_eq!(capped.added, plan.added[..3].to_vec());
        assert!(!capped.cap_violated);

        let tight = Schedules { density_limit: Some(0.05), target_density: Some(0.05), ..sched };
        let capped = apply_caps(plan, &imp, &cost, &part, 0, &tight);
        assert!(capped.cap_violated);
        assert!(capped.added.is_empty());
        assert_eq!(capped.kept(), 2);
    }

    #[test]
    fn zero_importance_keeps_only_fixed() {
        let p = params_from(vec![3.0, 0.1, -2.0, 0.2, 0.0], vec![true, true, true, true, false]);
        let cm = CostModel { c_seconds: 0.5, bandwidth_bps: 1e6, t_per_layer: vec![1e-3] };
        let sched = Schedules { alpha0: 0.4, ..Schedules::default() };
        let (next, plan) = reconfigure(&p, &[0.0; 5], &cm, &sched, 0).unwrap();
        assert!(plan.added.is_empty());
        assert_eq!(next.flat_mask(), vec![true, false, true, false, false]);
        assert_eq!(next.flat_weights(), vec![3.0, 0.0, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn equal_importance_matches_brute_force() {
        let n = 10;
        let w: Vec<f64> = (0..n).map(|j| 1.0 + j as f64).collect();
        let p = params_from(w, vec![true; n]);
        let cm = CostModel { c_seconds: 0.5, bandwidth_bps: f64::INFINITY, t_per_layer: vec![0.1] };
        let sched = Schedules { alpha0: 0.6, ..Schedules::default() };
        let imp = vec![0.3; n];
        let (_, plan) = reconfigure(&p, &imp, &cm, &sched, 0).unwrap();
        let part = partition(&p, 0.6);
        let cost = cm.linear_set_cost(&p.coordinate_layers());
        assert_eq!(plan.gamma, brute_force(&imp, &cost, &part));
    }

    #[test]
    fn late_rounds_freeze_nonzero_weights() {
        let p = params_from(vec![1.0, 0.0, 2.0, 3.0], vec![true, false, true, true]);
        let part = partition(&p, alpha_at(2_000_000));
        assert_eq!(part.prunable, vec![1]);
        assert_eq!(part.fixed, vec![0, 2, 3]);
    }

    #[test]
    fn merge_is_weighted_mean() {
        let mut a = ImportanceAccumulator::new(2);
        let mut b = ImportanceAccumulator::new(2);
        a.sums = vec![1.0, 2.0];
        b.sums = vec![3.0, 6.0];
        let merged = ImportanceAccumulator::merge_weighted(&[(&a, 1.0), (&b, 3.0)]).unwrap();
        assert_eq!(merged, vec![2.5, 5.0]);
        a.reset();
        assert_eq!(a.sums(), &[0.0, 0.0]);
    }

    #[test]
    fn plan_csv_header() {
        let mut buf = Vec::new();
        write_plan_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "round,p,p_bar,a,gamma,delta,time,density\n");
    }
}
