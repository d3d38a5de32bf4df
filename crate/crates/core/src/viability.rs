//! Brute-force viability-kernel oracle over the space-time lattice.
//!
//! Verification machinery independent of the planner's sweep loop: the
//! untransformed arrival-time recursion on integer time lattices, the
//! fully-discrete space-time dynamics, the viability set recursion, and
//! the epigraph-equivalence check between the two. Deliberately
//! single-threaded and enumeration-based; instances are capped by
//! configuration since this is a correctness oracle, not a solver.

use bitvec::vec::BitVec;
use serde::Serialize;

use crate::dynamics::StageDynamics;
use crate::error::{Error, Result};
use crate::grid::{GridStage, NodeId, SafetySet};
use crate::model::Scenario;
use crate::pareto::{combine_q, ParetoSet, TimeVec, QUANT_ONE};

/// Sentinel for an infinite untransformed arrival time.
pub const LATTICE_INF: u64 = u64::MAX;

/// Map from joint node to the Pareto frontier of untransformed arrival
/// times, entries stored as integer multiples of `h_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaTable {
    pub stage_index: usize,
    pub sweep: usize,
    values: Vec<ParetoSet>,
}

impl ThetaTable {
    pub fn get(&self, id: NodeId) -> &ParetoSet {
        &self.values[id.0 as usize]
    }

    pub fn set(&mut self, id: NodeId, v: ParetoSet) {
        self.values[id.0 as usize] = v;
    }
}

/// Initial table: `{0_N}` on safety nodes, the infinite sentinel
/// elsewhere.
pub fn theta_init(stage: &GridStage, safety: &SafetySet, robots: usize) -> ThetaTable {
    let inf = ParetoSet::singleton(TimeVec::from_quantized(
        std::iter::repeat(LATTICE_INF).take(robots),
    ));
    let mut values = vec![inf; stage.joint_count as usize];
    for &id in &safety.ids {
        values[id.0 as usize] = ParetoSet::singleton(TimeVec::zeros(robots));
    }
    ThetaTable {
        stage_index: stage.index,
        sweep: 0,
        values,
    }
}

fn lattice_add(a: u64, b: u64) -> u64 {
    if a == LATTICE_INF || b == LATTICE_INF {
        LATTICE_INF
    } else {
        a + b
    }
}

/// One untransformed Bellman step over the safety nodes: the minimal
/// lattice time increment (0 for goal-proximate robots, `kappa` steps
/// otherwise) composed with successor values, Pareto-reduced. Nodes with
/// no safe successors take the infinite sentinel; non-safety nodes keep
/// their value.
pub fn theta_step(
    table: &ThetaTable,
    stage: &GridStage,
    safety: &SafetySet,
    dynamics: &StageDynamics,
    kappa_steps: u32,
) -> ThetaTable {
    let robots = stage.robot_count();
    let mut out = table.clone();
    out.sweep = table.sweep + 1;
    for &x in &safety.ids {
        let idxs = stage.decode(x);
        let inc: Vec<u64> = idxs
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                if stage.robot_is_goal_proximate(r, i) {
                    0
                } else {
                    kappa_steps as u64
                }
            })
            .collect();
        let succ = dynamics.successors(stage, safety, x);
        let mut frontier = ParetoSet::default();
        succ.for_each(|xt| {
            for t in table.get(xt).points() {
                frontier.insert(TimeVec::from_quantized(
                    t.0.iter().zip(&inc).map(|(&a, &b)| lattice_add(a, b)),
                ));
            }
        });
        if frontier.is_empty() {
            frontier = ParetoSet::singleton(TimeVec::from_quantized(
                std::iter::repeat(LATTICE_INF).take(robots),
            ));
        }
        out.set(x, frontier);
    }
    out
}

/// Quantized Kruzhkov images of `0, kappa, 2 kappa, ...` computed by the
/// same iterated combine the transformed Bellman operator uses, so the
/// conjugation `G = Psi T Psi^{-1}` holds bit-exactly on quantized values.
pub fn psi_chain(dt_move_q: u64, max_steps: usize) -> Vec<u64> {
    let mut chain = Vec::with_capacity(max_steps + 1);
    chain.push(0u64);
    for k in 1..=max_steps {
        chain.push(combine_q(dt_move_q, chain[k - 1]));
    }
    chain
}

/// Transforms a lattice-time table into quantized Kruzhkov space.
/// Lattice entries must be multiples of `kappa_steps`.
pub fn theta_to_transformed(
    table: &ThetaTable,
    kappa_steps: u32,
    chain: &[u64],
) -> Vec<ParetoSet> {
    table
        .values
        .iter()
        .map(|ps| {
            let mut out = ParetoSet::default();
            for p in ps.points() {
                out.insert(TimeVec::from_quantized(p.0.iter().map(|&v| {
                    if v == LATTICE_INF {
                        QUANT_ONE
                    } else {
                        debug_assert_eq!(v % kappa_steps as u64, 0);
                        chain[(v / kappa_steps as u64) as usize]
                    }
                })));
            }
            out
        })
        .collect()
}

/// A set of space-time lattice points `(x, t)` with `t` on the
/// `h_p`-lattice truncated at `t_steps * h_p`, as a bitset.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeSet {
    pub t_steps: u32,
    time_radix: u64,
    robots: usize,
    bits: BitVec,
}

impl SpaceTimeSet {
    pub fn encode(&self, node: NodeId, times: &[u32]) -> usize {
        debug_assert_eq!(times.len(), self.robots);
        let mut flat = node.0;
        for &t in times {
            debug_assert!(t <= self.t_steps);
            flat = flat * self.time_radix + t as u64;
        }
        flat as usize
    }

    pub fn contains(&self, node: NodeId, times: &[u32]) -> bool {
        self.bits[self.encode(node, times)]
    }

    pub fn len(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.not_any()
    }

    pub fn is_subset_of(&self, other: &SpaceTimeSet) -> bool {
        self.bits
            .iter()
            .zip(other.bits.iter())
            .all(|(a, b)| !*a || *b)
    }
}

/// Builds the oracle's discrete dynamics context. `cap` bounds the total
/// space-time lattice size.
pub struct OracleInstance<'a> {
    pub scenario: &'a Scenario,
    pub stage: &'a GridStage,
    pub safety: &'a SafetySet,
    /// Shared with the planner's Bellman path (goal-proximate robots
    /// frozen) so conjugation checks compare identical successor sets.
    pub dynamics: &'a StageDynamics,
    /// Unfrozen dynamics for the moving branch of goal-proximate robots
    /// in the space-time map.
    pub moving: &'a StageDynamics,
    pub t_steps: u32,
}

impl<'a> OracleInstance<'a> {
    pub fn space_time_size(&self) -> u128 {
        let r = (self.t_steps as u128 + 1).pow(self.stage.robot_count() as u32);
        self.stage.joint_count as u128 * r
    }

    pub fn check_cap(&self, cap: u128) -> Result<()> {
        let size = self.space_time_size();
        if size > cap {
            return Err(Error::budget(format!(
                "oracle space-time lattice has {size} points, cap is {cap}"
            )));
        }
        Ok(())
    }

    fn empty_set(&self) -> SpaceTimeSet {
        let robots = self.stage.robot_count();
        let time_radix = self.t_steps as u64 + 1;
        let total = self.stage.joint_count as usize * (time_radix as usize).pow(robots as u32);
        SpaceTimeSet {
            t_steps: self.t_steps,
            time_radix,
            robots,
            bits: BitVec::repeat(false, total),
        }
    }

    /// `S_0`: safety nodes coupled with every truncated time vector.
    pub fn initial_set(&self) -> SpaceTimeSet {
        let mut s = self.empty_set();
        let robots = self.stage.robot_count();
        for &id in &self.safety.ids {
            let mut times = vec![0u32; robots];
            loop {
                let flat = s.encode(id, &times);
                s.bits.set(flat, true);
                if !odometer(&mut times, self.t_steps) {
                    break;
                }
            }
        }
        s
    }

    /// Per-robot space-time successor pairs of `(x_i, t_i)` under the
    /// fully-discrete dynamics: moving robots couple the fattened image
    /// with times in `t - eps +/- 2h`; goal-proximate robots add the
    /// stay-put option `(x_i +/- 2h) x (t_i +/- 2h)`. Successor times
    /// beyond the truncation are clipped out (reported via the flag).
    pub fn robot_gamma(
        &self,
        r: usize,
        idx: u32,
        t: u32,
        clipped: &mut bool,
    ) -> Vec<(u32, u32)> {
        let stage = self.stage;
        let h = stage.h;
        let eps = stage.eps;
        let mut out = Vec::new();
        let prox = stage.robot_is_goal_proximate(r, idx);
        let moving_spatial: &[u32] = &self.moving.robot(r, idx).merged;
        let t_f = t as f64 * h;
        let (lo, hi) = (t_f - eps - 2.0 * h, t_f - eps + 2.0 * h);
        let times = lattice_times(lo, hi, h, self.t_steps, clipped);
        for &ti in &times {
            for &xi in moving_spatial {
                out.push((xi, ti));
            }
        }
        if prox {
            let stay_spatial = stage.robot_nodes_within(r, stage.robot_position(r, idx), 2.0 * h);
            let stay_times = lattice_times(t_f - 2.0 * h, t_f + 2.0 * h, h, self.t_steps, clipped);
            for &ti in &stay_times {
                for &xi in &stay_spatial {
                    out.push((xi, ti));
                }
            }
            out.sort_unstable();
            out.dedup();
        }
        out
    }

    /// Joint space-time successors of `(x, t)` within the lattice.
    pub fn gamma_step(&self, node: NodeId, times: &[u32]) -> (Vec<(NodeId, Vec<u32>)>, bool) {
        let idxs = self.stage.decode(node);
        let mut clipped = false;
        let per: Vec<Vec<(u32, u32)>> = idxs
            .iter()
            .enumerate()
            .map(|(r, &i)| self.robot_gamma(r, i, times[r], &mut clipped))
            .collect();
        if per.iter().any(|p| p.is_empty()) {
            return (Vec::new(), clipped);
        }
        let mut out = Vec::new();
        let mut cursor = vec![0usize; per.len()];
        'outer: loop {
            let mut spatial = Vec::with_capacity(per.len());
            let mut tvec = Vec::with_capacity(per.len());
            for (r, &c) in cursor.iter().enumerate() {
                let (xi, ti) = per[r][c];
                spatial.push(xi);
                tvec.push(ti);
            }
            out.push((self.stage.encode(&spatial), tvec));
            let mut d = per.len();
            loop {
                if d == 0 {
                    break 'outer;
                }
                d -= 1;
                cursor[d] += 1;
                if cursor[d] < per[d].len() {
                    break;
                }
                cursor[d] = 0;
            }
        }
        (out, clipped)
    }

    /// One step of the viability recursion:
    /// `S_{k+1} = { z in S_k : Gamma(z) intersects S_k }`.
    pub fn viability_step(&self, s: &SpaceTimeSet) -> SpaceTimeSet {
        let mut next = self.empty_set();
        let robots = self.stage.robot_count();
        for &id in &self.safety.ids {
            let mut times = vec![0u32; robots];
            loop {
                if s.contains(id, &times) {
                    let (succ, _) = self.gamma_step(id, &times);
                    if succ.iter().any(|(n, t)| s.contains(*n, t)) {
                        let flat = next.encode(id, &times);
                        next.bits.set(flat, true);
                    }
                }
                if !odometer(&mut times, self.t_steps) {
                    break;
                }
            }
        }
        next
    }

    /// Runs `S_0 .. S_n`.
    pub fn viability_recursion(&self, n_steps: usize, cap: u128) -> Result<Vec<SpaceTimeSet>> {
        self.check_cap(cap)?;
        let mut seq = vec![self.initial_set()];
        for _ in 0..n_steps {
            let next = self.viability_step(seq.last().unwrap());
            seq.push(next);
        }
        Ok(seq)
    }
}

fn odometer(times: &mut [u32], max: u32) -> bool {
    for t in times.iter_mut() {
        if *t < max {
            *t += 1;
            return true;
        }
        *t = 0;
    }
    false
}

fn lattice_times(lo: f64, hi: f64, h: f64, t_steps: u32, clipped: &mut bool) -> Vec<u32> {
    if hi / h > t_steps as f64 + 1e-9 {
        *clipped = true;
    }
    let first = ((lo / h) - 1e-9).ceil().max(0.0) as i64;
    let last = (((hi / h) + 1e-9).floor() as i64).min(t_steps as i64);
    (first..=last).map(|k| k as u32).collect()
}

/// A mismatch between the epigraph of the time table and the viability
/// set, reported for test triage.
#[derive(Debug, Clone, Serialize)]
pub struct Counterexample {
    pub node: u64,
    pub coords: Vec<Vec<f64>>,
    pub times: Vec<u32>,
    pub in_viability_set: bool,
    pub in_epigraph: bool,
    pub sweep: usize,
}

/// Checks `Epi(Theta_n) = S_n` over all lattice points with every
/// `t_i <= T_max - (eps + 2h)` (the clipping shadow near the truncation
/// boundary is excluded). Returns the first counterexample, if any.
pub fn epi_equivalence_check(
    theta: &ThetaTable,
    s_n: &SpaceTimeSet,
    instance: &OracleInstance<'_>,
    sweep: usize,
) -> Result<Option<Counterexample>> {
    if theta.stage_index != instance.stage.index {
        return Err(Error::domain("theta table and instance stage mismatch"));
    }
    if theta.sweep != sweep {
        return Err(Error::domain(format!(
            "theta table is at sweep {}, expected {sweep}",
            theta.sweep
        )));
    }
    let stage = instance.stage;
    let h = stage.h;
    let shadow = stage.eps + 2.0 * h;
    let t_limit_f = instance.t_steps as f64 * h - shadow;
    let t_limit = (t_limit_f / h + 1e-9).floor().max(-1.0) as i64;
    if t_limit < 0 {
        return Err(Error::domain(
            "equivalence window is empty: truncation shadow exceeds T_max",
        ));
    }
    let robots = stage.robot_count();
    for raw in 0..stage.joint_count {
        let id = NodeId(raw);
        let frontier = theta.get(id);
        let mut times = vec![0u32; robots];
        loop {
            let in_s = s_n.contains(id, &times);
            let in_epi = frontier.points().iter().any(|p| {
                p.0.iter()
                    .zip(&times)
                    .all(|(&v, &t)| v != LATTICE_INF && v <= t as u64)
            });
            if in_s != in_epi {
                return Ok(Some(Counterexample {
                    node: id.0,
                    coords: stage.team_state(id).robots,
                    times: times.clone(),
                    in_viability_set: in_s,
                    in_epigraph: in_epi,
                    sweep,
                }));
            }
            if !odometer(&mut times, t_limit as u32) {
                break;
            }
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{kappa_steps, StageDynamics};
    use crate::grid::{build_stage, safety_nodes};
    use crate::model::{DynamicsKind, RobotSpec};
    use crate::region::{AxisBox, Region};

    fn line_scenario() -> Scenario {
        Scenario {
            name: "line5".into(),
            robots: vec![RobotSpec {
                id: 0,
                dynamics: DynamicsKind::CustomAffine {
                    a: vec![vec![0.0]],
                    b: vec![vec![1.0]],
                    c: vec![0.0],
                },
                control_box: AxisBox::new(vec![-0.25], vec![0.25]).unwrap(),
                speed_bound: 0.25,
                lipschitz: 0.0,
            }],
            state_boxes: vec![AxisBox::new(vec![0.0], vec![0.4]).unwrap()],
            obstacles: vec![Region::empty()],
            goals: vec![Region::new(vec![AxisBox::new(vec![0.0], vec![0.01]).unwrap()])],
            sigma: 0.05,
            starts: None,
        }
        .validated()
        .unwrap()
    }

    struct Ctx {
        scenario: Scenario,
        stage: GridStage,
        safety: SafetySet,
        frozen: StageDynamics,
        moving: StageDynamics,
    }

    fn ctx() -> Ctx {
        let scenario = line_scenario();
        let stage = build_stage(&scenario, 0.1, 0.3, 1).unwrap();
        let safety = safety_nodes(&stage, &scenario, false);
        let frozen = StageDynamics::build(&stage, &scenario, 3).unwrap();
        let moving = StageDynamics::build_unfrozen(&stage, &scenario, 3).unwrap();
        Ctx {
            scenario,
            stage,
            safety,
            frozen,
            moving,
        }
    }

    #[test]
    fn theta_chain_matches_hand_dp() {
        let c = ctx();
        let ks = kappa_steps(0.1, 0.3).unwrap();
        assert_eq!(ks, 1);
        let mut table = theta_init(&c.stage, &c.safety, 1);
        // prox threshold = 0.25*0.3+0.1 = 0.175; prox nodes x in {0, 0.1}
        // hop reach = 0.25*0.3 + 0.2 = 0.275 -> 2 lattice steps
        for _ in 0..3 {
            table = theta_step(&table, &c.stage, &c.safety, &c.frozen, ks);
        }
        // hand DP: x=0.2 -> 1 step; 0.3 -> 1 step (reach 0.275 covers 0.1);
        // 0.4 -> 2 steps
        let v = |i: u64| table.get(NodeId(i)).points()[0].get(0);
        assert_eq!(v(0), 0);
        assert_eq!(v(1), 0);
        assert_eq!(v(2), 1);
        assert_eq!(v(3), 1);
        assert_eq!(v(4), 2);
    }

    #[test]
    fn goal_proximate_everywhere_is_stationary() {
        let mut scenario = line_scenario();
        scenario.goals[0] = Region::new(vec![AxisBox::new(vec![0.0], vec![0.4]).unwrap()]);
        let scenario = scenario.validated().unwrap();
        let stage = build_stage(&scenario, 0.1, 0.3, 1).unwrap();
        let safety = safety_nodes(&stage, &scenario, false);
        let dynamics = StageDynamics::build(&stage, &scenario, 3).unwrap();
        let t0 = theta_init(&stage, &safety, 1);
        let t1 = theta_step(&t0, &stage, &safety, &dynamics, 1);
        for id in 0..stage.joint_count {
            assert_eq!(t0.get(NodeId(id)), t1.get(NodeId(id)));
        }
    }

    #[test]
    fn gamma_moving_branch_time_window() {
        let c = ctx();
        let inst = OracleInstance {
            scenario: &c.scenario,
            stage: &c.stage,
            safety: &c.safety,
            dynamics: &c.frozen,
            moving: &c.moving,
            t_steps: 12,
        };
        // far-from-goal robot at x=0.4 (idx 4), t = 8h
        let mut clipped = false;
        let succ = inst.robot_gamma(0, 4, 8, &mut clipped);
        // times must lie in [t - eps - 2h, t - eps + 2h] = [3h, 7h]
        for &(_, t) in &succ {
            assert!((3..=7).contains(&t));
        }
        assert!(!clipped);
    }

    #[test]
    fn gamma_stay_put_includes_self() {
        let c = ctx();
        let inst = OracleInstance {
            scenario: &c.scenario,
            stage: &c.stage,
            safety: &c.safety,
            dynamics: &c.frozen,
            moving: &c.moving,
            t_steps: 12,
        };
        // goal-proximate node idx 1 (x = 0.1)
        assert!(c.stage.robot_is_goal_proximate(0, 1));
        let mut clipped = false;
        let succ = inst.robot_gamma(0, 1, 5, &mut clipped);
        assert!(succ.contains(&(1, 5)), "stay-put option missing: {succ:?}");
    }

    #[test]
    fn viability_monotone_shrinkage_and_exit() {
        let c = ctx();
        let inst = OracleInstance {
            scenario: &c.scenario,
            stage: &c.stage,
            safety: &c.safety,
            dynamics: &c.frozen,
            moving: &c.moving,
            t_steps: 12,
        };
        let seq = inst.viability_recursion(6, 1_000_000).unwrap();
        for w in seq.windows(2) {
            assert!(w[1].is_subset_of(&w[0]));
        }
    }

    #[test]
    fn equivalence_on_line_instance() {
        let c = ctx();
        let inst = OracleInstance {
            scenario: &c.scenario,
            stage: &c.stage,
            safety: &c.safety,
            dynamics: &c.frozen,
            moving: &c.moving,
            t_steps: 12,
        };
        let ks = kappa_steps(0.1, 0.3).unwrap();
        let seq = inst.viability_recursion(8, 1_000_000).unwrap();
        let mut theta = theta_init(&c.stage, &c.safety, 1);
        for n in 0..=8usize {
            let cex = epi_equivalence_check(&theta, &seq[n], &inst, n).unwrap();
            assert!(cex.is_none(), "sweep {n}: {cex:?}");
            theta = theta_step(&theta, &c.stage, &c.safety, &c.frozen, ks);
        }
    }

    #[test]
    fn corrupted_theta_yields_counterexample() {
        let c = ctx();
        let inst = OracleInstance {
            scenario: &c.scenario,
            stage: &c.stage,
            safety: &c.safety,
            dynamics: &c.frozen,
            moving: &c.moving,
            t_steps: 12,
        };
        let ks = kappa_steps(0.1, 0.3).unwrap();
        let seq = inst.viability_recursion(3, 1_000_000).unwrap();
        let mut theta = theta_init(&c.stage, &c.safety, 1);
        for _ in 0..3 {
            theta = theta_step(&theta, &c.stage, &c.safety, &c.frozen, ks);
        }
        // lower the value at the far node: claims arrival faster than possible
        theta.set(NodeId(4), ParetoSet::singleton(TimeVec::from_quantized([0u64])));
        let cex = epi_equivalence_check(&theta, &seq[3], &inst, 3).unwrap();
        assert!(cex.is_some());
    }
}
