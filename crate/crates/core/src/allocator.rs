//! Bit-budget allocation: minimize predicted gradient variance
//! `sum_l c_l * S(b_l)` subject to `sum_l b_l * D_l <= B`.
//!
//! The greedy method starts every slot at the widest admissible width and
//! repeatedly applies the downgrade with the smallest variance increase per
//! bit saved until the budget holds, then fills any remaining slack with the
//! best upgrades that still fit. An exhaustive enumerator serves as the
//! optimality oracle for small instances.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{ActError, Result};
use crate::quantizer::{BitWidth, CompressionScheme, LADDER};

/// One bit-allocation instance.
#[derive(Debug, Clone)]
pub struct AllocationProblem {
    /// Per-slot sensitivity coefficients; `f64::INFINITY` pins a slot to 32
    /// bits.
    pub sensitivities: Vec<f64>,
    /// Per-slot element counts.
    pub dims: Vec<usize>,
    /// Admissible compressed widths, ascending.
    pub ladder: Vec<BitWidth>,
    /// Total bit budget over non-pinned slots.
    pub budget_bits: u64,
    /// Slots pinned to 32 bits regardless of budget.
    pub forced_fullprec: Vec<bool>,
    /// Group size recorded into the returned scheme.
    pub group_size: usize,
}

impl AllocationProblem {
    pub fn new(
        sensitivities: Vec<f64>,
        dims: Vec<usize>,
        budget_bits: u64,
        group_size: usize,
    ) -> Self {
        let n = sensitivities.len();
        AllocationProblem {
            sensitivities,
            dims,
            ladder: LADDER.to_vec(),
            budget_bits,
            forced_fullprec: vec![false; n],
            group_size,
        }
    }

    /// Budget from an average bits/dim target over the non-pinned slots.
    pub fn budget_from_average(avg_bits: f64, dims: &[usize], pinned: &[bool]) -> u64 {
        let total: f64 = dims
            .iter()
            .zip(pinned)
            .filter(|(_, &p)| !p)
            .map(|(&d, _)| d as f64)
            .sum();
        (avg_bits * total).floor() as u64
    }

    fn num_slots(&self) -> usize {
        self.sensitivities.len()
    }

    fn validate(&self) -> Result<()> {
        if self.dims.len() != self.num_slots() || self.forced_fullprec.len() != self.num_slots() {
            return Err(ActError::ProblemMismatch(format!(
                "c/D/forced lengths {}/{}/{}",
                self.num_slots(),
                self.dims.len(),
                self.forced_fullprec.len()
            )));
        }
        if self.ladder.is_empty() || self.ladder.iter().any(|b| b.is_full()) {
            return Err(ActError::ProblemMismatch(
                "ladder must be non-empty compressed widths".into(),
            ));
        }
        if self.ladder.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ActError::ProblemMismatch("ladder must be ascending".into()));
        }
        if self.sensitivities.iter().any(|c| c.is_nan() || *c < 0.0) {
            return Err(ActError::ProblemMismatch(
                "sensitivities must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// True for slots that must sit at 32 bits: explicitly forced or carrying
    /// the infinite-sensitivity marker.
    fn pinned(&self, slot: usize) -> bool {
        self.forced_fullprec[slot] || self.sensitivities[slot].is_infinite()
    }

    fn min_feasible_bits(&self) -> u64 {
        let lo = self.ladder[0].get() as u64;
        (0..self.num_slots())
            .filter(|&l| !self.pinned(l))
            .map(|l| lo * self.dims[l] as u64)
            .sum()
    }

    fn spent(&self, widths: &[BitWidth]) -> u64 {
        (0..self.num_slots())
            .filter(|&l| !self.pinned(l))
            .map(|l| widths[l].get() as u64 * self.dims[l] as u64)
            .sum()
    }

    fn to_scheme(&self, widths: Vec<BitWidth>) -> CompressionScheme {
        let mut scheme = CompressionScheme::from_bits(widths, self.group_size);
        for slot in 0..self.num_slots() {
            if self.pinned(slot) {
                scheme.force_fullprec(slot);
            }
        }
        scheme
    }
}

/// Predicted compression variance `sum_l c_l * S(b_l)` of a scheme, with
/// `S(32) = 0` (pinned slots contribute nothing even at infinite
/// sensitivity).
pub fn predicted_variance(sensitivities: &[f64], scheme: &CompressionScheme) -> Result<f64> {
    if sensitivities.len() != scheme.num_slots() {
        return Err(ActError::ProblemMismatch(format!(
            "{} sensitivities vs {} slots",
            sensitivities.len(),
            scheme.num_slots()
        )));
    }
    let mut total = 0.0;
    for (slot, &c) in sensitivities.iter().enumerate() {
        let b = scheme.bits_for(slot);
        if b.is_full() {
            continue;
        }
        total += c * b.s_factor();
    }
    Ok(total)
}

/// Heap entry ordered by (ratio, slot): `BinaryHeap` + `Reverse` pops the
/// smallest ratio, ties broken by smaller slot id.
#[derive(PartialEq)]
struct Move {
    ratio: f64,
    slot: usize,
    to: BitWidth,
}

impl Eq for Move {}

impl PartialOrd for Move {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Move {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.ratio
            .total_cmp(&other.ratio)
            .then(self.slot.cmp(&other.slot))
    }
}

/// Greedy allocation. Starts every non-pinned slot at the top of the ladder;
/// while over budget, applies the downgrade minimizing
/// `c_l * (S(b-) - S(b)) / (D_l * (b - b-))`; finally upgrades slots back up
/// wherever slack remains. The result always satisfies the budget when the
/// problem is feasible.
pub fn allocate_bits(p: &AllocationProblem) -> Result<CompressionScheme> {
    p.validate()?;
    let need = p.min_feasible_bits();
    if need > p.budget_bits {
        return Err(ActError::InfeasibleBudget {
            needed: need,
            budget: p.budget_bits,
        });
    }
    let n = p.num_slots();
    let top = *p.ladder.last().unwrap();
    let mut widths: Vec<BitWidth> = (0..n)
        .map(|l| if p.pinned(l) { BitWidth::FULL } else { top })
        .collect();
    let mut level: Vec<usize> = vec![p.ladder.len() - 1; n];

    let downgrade_ratio = |slot: usize, from_level: usize| -> Move {
        let from = p.ladder[from_level];
        let to = p.ladder[from_level - 1];
        let dvar = p.sensitivities[slot] * (to.s_factor() - from.s_factor());
        let dbits = p.dims[slot] as f64 * (from.get() - to.get()) as f64;
        Move {
            ratio: dvar / dbits,
            slot,
            to,
        }
    };

    let mut spent = p.spent(&widths);
    let mut heap: BinaryHeap<Reverse<Move>> = BinaryHeap::new();
    for slot in 0..n {
        if !p.pinned(slot) && level[slot] > 0 {
            heap.push(Reverse(downgrade_ratio(slot, level[slot])));
        }
    }
    while spent > p.budget_bits {
        let Some(Reverse(mv)) = heap.pop() else {
            // All slots at the bottom; feasibility was checked above.
            break;
        };
        // Stale entries (slot already moved past this width) are skipped.
        if p.ladder[level[mv.slot]] == widths[mv.slot]
            && level[mv.slot] > 0
            && p.ladder[level[mv.slot] - 1] == mv.to
        {
            let saved =
                p.dims[mv.slot] as u64 * (widths[mv.slot].get() - mv.to.get()) as u64;
            widths[mv.slot] = mv.to;
            level[mv.slot] -= 1;
            spent -= saved;
            if level[mv.slot] > 0 {
                heap.push(Reverse(downgrade_ratio(mv.slot, level[mv.slot])));
            }
        }
    }

    // Slack backfill: re-promote the upgrades with the largest variance
    // reduction per bit that still fit. Never exceeds the budget, so the
    // oracle-gap and feasibility properties are preserved.
    let mut up: BinaryHeap<Move> = BinaryHeap::new();
    let upgrade_gain = |slot: usize, from_level: usize| -> Move {
        let from = p.ladder[from_level];
        let to = p.ladder[from_level + 1];
        let dvar = p.sensitivities[slot] * (from.s_factor() - to.s_factor());
        let dbits = p.dims[slot] as f64 * (to.get() - from.get()) as f64;
        Move {
            ratio: dvar / dbits,
            slot,
            to,
        }
    };
    for slot in 0..n {
        if !p.pinned(slot) && level[slot] + 1 < p.ladder.len() {
            up.push(upgrade_gain(slot, level[slot]));
        }
    }
    while let Some(mv) = up.pop() {
        if p.pinned(mv.slot) || level[mv.slot] + 1 >= p.ladder.len() {
            continue;
        }
        if p.ladder[level[mv.slot] + 1] != mv.to {
            continue; // stale
        }
        let cost = p.dims[mv.slot] as u64 * (mv.to.get() - widths[mv.slot].get()) as u64;
        if spent + cost <= p.budget_bits {
            widths[mv.slot] = mv.to;
            level[mv.slot] += 1;
            spent += cost;
            if level[mv.slot] + 1 < p.ladder.len() {
                up.push(upgrade_gain(mv.slot, level[mv.slot]));
            }
        }
    }

    // Funded-upgrade polish: for each candidate upgrade, assemble the
    // cheapest set of downgrades (by variance per freed bit) that pays for
    // it, and apply the bundle when the net variance strictly drops.
    // Feasibility is invariant; bounded sweeps.
    let s_at = |lvl: usize| p.ladder[lvl].s_factor();
    for _ in 0..64 {
        let slack = p.budget_bits - spent;
        let mut best: Option<(f64, usize, usize, Vec<usize>)> = None;
        for j in 0..n {
            if p.pinned(j) {
                continue;
            }
            for lj in level[j] + 1..p.ladder.len() {
                let cost =
                    p.dims[j] as u64 * (p.ladder[lj].get() - p.ladder[level[j]].get()) as u64;
                let gain = p.sensitivities[j] * (s_at(level[j]) - s_at(lj));
                // Walk the cheapest-ratio downgrade path; at every prefix,
                // "finish with the smallest-loss move that closes the gap"
                // is a candidate funding plan. Keep the cheapest plan.
                let mut trial = level.clone();
                let mut freed = 0u64;
                let mut lose = 0.0;
                let mut path: Vec<usize> = Vec::new();
                let mut plan: Option<(f64, usize, Option<usize>)> = None; // (lose, prefix, closer)
                loop {
                    if freed + slack >= cost {
                        if plan.as_ref().map_or(true, |(pl, ..)| lose < *pl) {
                            plan = Some((lose, path.len(), None));
                        }
                        break;
                    }
                    let remaining = cost - (freed + slack);
                    let mut closer: Option<(f64, usize)> = None;
                    let mut cheapest: Option<(f64, usize)> = None;
                    for i in 0..n {
                        if i == j || p.pinned(i) || trial[i] == 0 {
                            continue;
                        }
                        let dv = p.sensitivities[i] * (s_at(trial[i] - 1) - s_at(trial[i]));
                        let db = p.dims[i] as u64
                            * (p.ladder[trial[i]].get() - p.ladder[trial[i] - 1].get()) as u64;
                        if db >= remaining && closer.map_or(true, |(pv, pi)| (dv, i) < (pv, pi)) {
                            closer = Some((dv, i));
                        }
                        let r = dv / db as f64;
                        if cheapest.map_or(true, |(pr, pi)| (r, i) < (pr, pi)) {
                            cheapest = Some((r, i));
                        }
                    }
                    if let Some((dv, i)) = closer {
                        let total = lose + dv;
                        if plan.as_ref().map_or(true, |(pl, ..)| total < *pl) {
                            plan = Some((total, path.len(), Some(i)));
                        }
                    }
                    let Some((_, i)) = cheapest else { break };
                    freed += p.dims[i] as u64
                        * (p.ladder[trial[i]].get() - p.ladder[trial[i] - 1].get()) as u64;
                    lose += p.sensitivities[i] * (s_at(trial[i] - 1) - s_at(trial[i]));
                    trial[i] -= 1;
                    path.push(i);
                }
                let Some((plan_lose, prefix, closer)) = plan else {
                    continue;
                };
                let net = gain - plan_lose;
                if net > 1e-15 && best.as_ref().map_or(true, |(b, ..)| net > *b) {
                    let mut funded = level.clone();
                    for &i in &path[..prefix] {
                        funded[i] -= 1;
                    }
                    if let Some(i) = closer {
                        funded[i] -= 1;
                    }
                    best = Some((net, j, lj, funded));
                }
            }
        }
        let Some((_, j, lj, trial)) = best else { break };
        level = trial;
        level[j] = lj;
        for i in 0..n {
            if !p.pinned(i) {
                widths[i] = p.ladder[level[i]];
            }
        }
        spent = p.spent(&widths);
        // Freed budget may now admit plain upgrades again.
        loop {
            let mut moved = false;
            for k in 0..n {
                if p.pinned(k) || level[k] + 1 >= p.ladder.len() {
                    continue;
                }
                let cost = p.dims[k] as u64
                    * (p.ladder[level[k] + 1].get() - p.ladder[level[k]].get()) as u64;
                if spent + cost <= p.budget_bits {
                    level[k] += 1;
                    widths[k] = p.ladder[level[k]];
                    spent += cost;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
    }

    debug_assert!(p.spent(&widths) <= p.budget_bits);
    Ok(p.to_scheme(widths))
}

/// Exhaustive enumeration over `ladder^L` (guarded at L <= 8): the globally
/// optimal scheme by predicted variance, used as the greedy's oracle.
pub fn exhaustive_allocate(p: &AllocationProblem) -> Result<CompressionScheme> {
    p.validate()?;
    let free: Vec<usize> = (0..p.num_slots()).filter(|&l| !p.pinned(l)).collect();
    if free.len() > 8 {
        return Err(ActError::TooManySlots(free.len()));
    }
    let need = p.min_feasible_bits();
    if need > p.budget_bits {
        return Err(ActError::InfeasibleBudget {
            needed: need,
            budget: p.budget_bits,
        });
    }
    let k = p.ladder.len();
    let mut assignment = vec![0usize; free.len()];
    let mut best: Option<(f64, Vec<BitWidth>)> = None;
    loop {
        let mut spent = 0u64;
        let mut var = 0.0;
        for (i, &slot) in free.iter().enumerate() {
            let b = p.ladder[assignment[i]];
            spent += b.get() as u64 * p.dims[slot] as u64;
            var += p.sensitivities[slot] * b.s_factor();
        }
        if spent <= p.budget_bits {
            let better = match &best {
                None => true,
                Some((v, _)) => var < *v,
            };
            if better {
                let mut widths = vec![BitWidth::FULL; p.num_slots()];
                for (i, &slot) in free.iter().enumerate() {
                    widths[slot] = p.ladder[assignment[i]];
                }
                best = Some((var, widths));
            }
        }
        // Odometer increment.
        let mut pos = 0;
        loop {
            if pos == assignment.len() {
                let (_, widths) = best.expect("feasibility checked above");
                return Ok(p.to_scheme(widths));
            }
            assignment[pos] += 1;
            if assignment[pos] < k {
                break;
            }
            assignment[pos] = 0;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{counter_rng, StreamKey};

    fn b(v: u8) -> BitWidth {
        BitWidth::new(v).unwrap()
    }

    fn total_bits(p: &AllocationProblem, s: &CompressionScheme) -> u64 {
        (0..p.dims.len())
            .filter(|&l| !s.bits_for(l).is_full())
            .map(|l| s.bits_for(l).get() as u64 * p.dims[l] as u64)
            .sum()
    }

    #[test]
    fn symmetric_instance_gets_uniform_bits() {
        let p = AllocationProblem::new(vec![1.0; 4], vec![100; 4], 4 * 4 * 100, 256);
        let s = allocate_bits(&p).unwrap();
        for slot in 0..4 {
            assert_eq!(s.bits_for(slot), b(4));
        }
    }

    #[test]
    fn infinite_sensitivity_pins_to_full_precision() {
        let mut p = AllocationProblem::new(
            vec![f64::INFINITY, 1.0, 1.0],
            vec![50, 100, 100],
            4 * 200,
            256,
        );
        p.group_size = 128;
        let s = allocate_bits(&p).unwrap();
        assert!(s.bits_for(0).is_full());
        assert!(s.is_forced(0));
    }

    #[test]
    fn sensitive_slot_wins_the_budget() {
        // c = [1, 100], equal D, ladder {2, 8}, budget admitting one slot at
        // 8 and one at 2: the sensitive slot gets 8, the other 2, since
        // 1*S(2) + 100*S(8) < 1*S(8) + 100*S(2).
        let mut p = AllocationProblem::new(vec![1.0, 100.0], vec![10, 10], 100, 256);
        p.ladder = vec![b(2), b(8)];
        let s = exhaustive_allocate(&p).unwrap();
        assert_eq!(s.bits_for(0), b(2));
        assert_eq!(s.bits_for(1), b(8));
        let g = allocate_bits(&p).unwrap();
        assert_eq!(g.bits_for(0), b(2));
        assert_eq!(g.bits_for(1), b(8));
    }

    #[test]
    fn slack_budget_keeps_everything_at_max() {
        let p = AllocationProblem::new(vec![3.0, 2.0, 1.0], vec![10, 20, 30], 8 * 60, 256);
        let s = allocate_bits(&p).unwrap();
        for slot in 0..3 {
            assert_eq!(s.bits_for(slot), b(8));
        }
        let e = exhaustive_allocate(&p).unwrap();
        for slot in 0..3 {
            assert_eq!(e.bits_for(slot), b(8));
        }
    }

    #[test]
    fn single_slot_gets_largest_feasible_width() {
        let p = AllocationProblem::new(vec![5.0], vec![100], 4 * 100, 256);
        let e = exhaustive_allocate(&p).unwrap();
        assert_eq!(e.bits_for(0), b(4));
    }

    #[test]
    fn infeasible_budget_is_rejected() {
        let p = AllocationProblem::new(vec![1.0, 1.0], vec![100, 100], 100, 256);
        assert!(matches!(
            allocate_bits(&p),
            Err(ActError::InfeasibleBudget { .. })
        ));
        assert!(exhaustive_allocate(&p).is_err());
    }

    #[test]
    fn predicted_variance_examples() {
        let s = CompressionScheme::uniform(2, BitWidth::FULL, 256);
        assert_eq!(predicted_variance(&[5.0, 7.0], &s).unwrap(), 0.0);
        let s = CompressionScheme::uniform(1, b(2), 256);
        assert_eq!(predicted_variance(&[9.0], &s).unwrap(), 1.0);
    }

    fn random_problem(seed: u64) -> AllocationProblem {
        let key = StreamKey::new(seed, 0);
        let l = 2 + (counter_rng(key, 0) * 5.0) as usize; // 2..=6
        let c: Vec<f64> = (0..l)
            .map(|i| (counter_rng(key, 10 + i as u64) * 6.0).exp())
            .collect();
        let dims: Vec<usize> = (0..l)
            .map(|i| 16 + (counter_rng(key, 100 + i as u64) * 500.0) as usize)
            .collect();
        let total: usize = dims.iter().sum();
        let lo = 2.0;
        let hi = 8.0;
        let avg = lo + counter_rng(key, 999) * (hi - lo);
        AllocationProblem::new(c, dims.clone(), (avg * total as f64) as u64, 256)
    }

    #[test]
    fn greedy_stays_close_to_exhaustive_optimum() {
        let mut ok = 0;
        let n = 300;
        for seed in 0..n {
            let p = random_problem(seed);
            let g = allocate_bits(&p).unwrap();
            let e = exhaustive_allocate(&p).unwrap();
            assert!(total_bits(&p, &g) <= p.budget_bits);
            let vg = predicted_variance(&p.sensitivities, &g).unwrap();
            let ve = predicted_variance(&p.sensitivities, &e).unwrap();
            assert!(vg + 1e-15 >= ve, "greedy beat the oracle?");
            if vg <= 1.05 * ve + 1e-15 {
                ok += 1;
            }
        }
        assert!(
            ok as f64 >= 0.95 * n as f64,
            "only {ok}/{n} instances within 5% of optimum"
        );
    }

    #[test]
    fn enlarging_budget_never_hurts() {
        for seed in 40..80u64 {
            let p = random_problem(seed);
            let mut prev = f64::INFINITY;
            for extra in [0u64, 64, 512, 4096, 1 << 20] {
                let mut q = p.clone();
                q.budget_bits = p.budget_bits + extra;
                let v =
                    predicted_variance(&q.sensitivities, &allocate_bits(&q).unwrap()).unwrap();
                assert!(
                    v <= prev + 1e-12,
                    "seed {seed}: variance rose from {prev} to {v} with +{extra} bits"
                );
                prev = v;
            }
        }
    }

    #[test]
    fn higher_sensitivity_gets_at_least_as_many_bits() {
        for seed in 200..260u64 {
            let p = random_problem(seed);
            let s = allocate_bits(&p).unwrap();
            for i in 0..p.dims.len() {
                for j in 0..p.dims.len() {
                    if p.dims[i] == p.dims[j] && p.sensitivities[i] > p.sensitivities[j] {
                        assert!(
                            s.bits_for(i) >= s.bits_for(j),
                            "seed {seed}: dominance violated"
                        );
                    }
                }
            }
        }
    }
}
