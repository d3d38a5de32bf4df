//! Multigrid Pareto value iteration and policy extraction.
//!
//! Each stage runs Jacobi sweeps of the transformed Bellman operator
//!
//! `v_n(x) = E({ dt + tau - dt o tau : x~ in X~(x), tau in v_{n-1}(x~) })`
//!
//! over the safety nodes minus the goal-expanded exclusion set, exits at a
//! quantized-exact fixed point or by the configured stopping rule, then
//! restores excluded nodes from the interpolated function. Values carry
//! over between stages by interpolation (old nodes copy, new nodes get a
//! 0/1 vector by goal proximity) followed by initialization over
//! equivalent-node unions.

use std::time::Instant;

use rayon::prelude::*;

use crate::dynamics::{StageDynamics, SuccessorSet};
use crate::error::{Error, Result};
use crate::grid::{build_stage, safety_nodes, GridStage, NodeId, SafetySet};
use crate::model::Scenario;
use crate::pareto::{ParetoSet, TimeVec, hausdorff_frontiers};

/// Map from joint node to Pareto frontier of transformed arrival-time
/// vectors, dense over one stage's joint lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub stage_index: usize,
    pub sweep: usize,
    values: Vec<ParetoSet>,
}

impl ValueFunction {
    pub fn new_filled(stage: &GridStage, fill: ParetoSet, sweep: usize) -> Self {
        ValueFunction {
            stage_index: stage.index,
            sweep,
            values: vec![fill; stage.joint_count as usize],
        }
    }

    pub fn get(&self, id: NodeId) -> &ParetoSet {
        &self.values[id.0 as usize]
    }

    pub fn set(&mut self, id: NodeId, v: ParetoSet) {
        self.values[id.0 as usize] = v;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_frontier_len(&self) -> usize {
        self.values.iter().map(|p| p.len()).max().unwrap_or(0)
    }
}

/// One policy entry: a successor node, the transformed time vector it
/// achieves, and for each robot the admissible control samples realizing
/// it (`None` for a goal-frozen robot). The `(u, successor, value)`
/// solution triples are the product expansion over robots.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEntry {
    pub successor: NodeId,
    pub value: TimeVec,
    pub controls: Vec<Option<Vec<u16>>>,
}

impl PolicyEntry {
    /// Number of distinct `(u, successor, value)` triples this entry
    /// represents.
    pub fn multiplicity(&self) -> u64 {
        self.controls
            .iter()
            .map(|c| c.as_ref().map_or(1, |v| v.len() as u64))
            .product()
    }
}

/// Controls solving the last Bellman update, per node. Carries the
/// per-robot control sample grid so entries' sample indices resolve to
/// concrete control vectors without the dynamics cache.
#[derive(Debug, Clone, Default)]
pub struct PolicyTable {
    pub stage_index: usize,
    pub control_samples: Vec<Vec<Vec<f64>>>,
    entries: Vec<Vec<PolicyEntry>>,
}

impl PolicyTable {
    pub fn new(stage: &GridStage, control_samples: Vec<Vec<Vec<f64>>>) -> Self {
        PolicyTable {
            stage_index: stage.index,
            control_samples,
            entries: vec![Vec::new(); stage.joint_count as usize],
        }
    }

    pub fn control_vector(&self, robot: usize, sample: u16) -> &[f64] {
        &self.control_samples[robot][sample as usize]
    }

    pub fn entries(&self, id: NodeId) -> &[PolicyEntry] {
        &self.entries[id.0 as usize]
    }

    pub fn set_entries(&mut self, id: NodeId, e: Vec<PolicyEntry>) {
        self.entries[id.0 as usize] = e;
    }

    pub fn has_entries(&self, id: NodeId) -> bool {
        !self.entries[id.0 as usize].is_empty()
    }

    pub fn nonempty_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.is_empty())
            .map(|(i, _)| NodeId(i as u64))
    }
}

/// Stopping rule for the per-stage sweep loop (a hard budget always
/// applies on top).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Run until the budget or a fixed point.
    Budget,
    /// Stop once D(v_{n-1}, v_n) / D(v_0, v_n) <= threshold.
    RelativeDifference { threshold: f64 },
}

/// Per-stage resolutions and iteration counts, plus the update-window
/// parameters for budget scheduling.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub stages: Vec<StageParams>,
    pub gamma: f64,
    pub window: usize,
    pub stop: StopRule,
}

#[derive(Debug, Clone, Copy)]
pub struct StageParams {
    pub h: f64,
    pub eps: f64,
    /// Hard sweep budget for this stage.
    pub budget: usize,
}

impl Schedule {
    /// Dyadic schedule from a list of spatial resolutions and an eps rule.
    pub fn from_resolutions(hs: &[f64], eps_of_h: impl Fn(f64) -> f64, budget: usize) -> Schedule {
        Schedule {
            stages: hs
                .iter()
                .map(|&h| StageParams {
                    h,
                    eps: eps_of_h(h),
                    budget,
                })
                .collect(),
            gamma: 0.5,
            window: 1,
            stop: StopRule::Budget,
        }
    }

    /// Checks the resolution conditions across stages:
    /// eps > 2h per stage; eps and h/eps decreasing monotonically;
    /// alpha_p >= h_{p-1} between consecutive stages.
    pub fn validate(&self, scenario: &Scenario) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::schedule("schedule has no stages"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::schedule("gamma must be in [0,1)"));
        }
        let (m_plus, l_plus) = scenario.team_bounds();
        for (p, st) in self.stages.iter().enumerate() {
            if st.eps <= 2.0 * st.h {
                return Err(Error::schedule(format!(
                    "stage {}: eps {} <= 2h = {}",
                    p + 1,
                    st.eps,
                    2.0 * st.h
                )));
            }
            if p > 0 {
                let prev = &self.stages[p - 1];
                if st.eps > prev.eps + 1e-12 {
                    return Err(Error::schedule(format!("stage {}: eps must decrease", p + 1)));
                }
                if st.h / st.eps > prev.h / prev.eps + 1e-12 {
                    return Err(Error::schedule(format!(
                        "stage {}: h/eps must decrease",
                        p + 1
                    )));
                }
                let a = crate::dynamics::alpha(st.h, st.eps, l_plus, m_plus);
                if a + 1e-12 < prev.h {
                    return Err(Error::schedule(format!(
                        "stage {}: alpha {} < previous h {}",
                        p + 1,
                        a,
                        prev.h
                    )));
                }
            }
        }
        Ok(())
    }

    /// Warnings for the goal-standoff resolution condition evaluated at the
    /// coarsest stage: the free region of robot j should keep clear of
    /// goal i expanded by `sigma + M_i eps_1 + h_1`. Checked on a dense
    /// sample of each robot's lattice at the coarsest resolution.
    pub fn standoff_warnings(&self, scenario: &Scenario) -> Vec<String> {
        let mut warnings = Vec::new();
        let Some(first) = self.stages.first() else {
            return warnings;
        };
        let Ok(stage) = build_stage(scenario, first.h, first.eps, 1) else {
            return warnings;
        };
        for i in 0..scenario.robot_count() {
            let reach = scenario.sigma + scenario.robots[i].speed_bound * first.eps + first.h;
            for j in 0..scenario.robot_count() {
                if i == j {
                    continue;
                }
                let mut witness = None;
                for idx in 0..stage.robot_node_count(j) {
                    let x = stage.robot_position(j, idx as u32);
                    if stage.robot_is_free(j, idx as u32) && scenario.goals[i].distance(x) <= reach
                    {
                        witness = Some(x.to_vec());
                        break;
                    }
                }
                if let Some(w) = witness {
                    warnings.push(format!(
                        "goal-standoff condition: robot {j} free region comes within sigma + M_{i} eps_1 + h_1 = {reach:.4} of goal {i} (e.g. at {w:?}); convergence guarantees may degrade near goals"
                    ));
                }
            }
        }
        warnings
    }
}

/// Smallest uniform per-stage sweep count for each window so that
/// `exp(-sum n_p kappa_p) <= gamma`.
pub fn schedule_iterations(kappas: &[f64], gamma: f64, window: usize) -> Result<Vec<usize>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::schedule("gamma must be in (0,1)"));
    }
    if window == 0 {
        return Err(Error::schedule("window must be positive"));
    }
    let mut out = vec![0usize; kappas.len()];
    let target = -gamma.ln();
    for chunk_start in (0..kappas.len()).step_by(window) {
        let chunk = &kappas[chunk_start..(chunk_start + window).min(kappas.len())];
        let ksum: f64 = chunk.iter().sum();
        if !(ksum > 0.0) {
            return Err(Error::schedule("kappa must be positive"));
        }
        let n = (target / ksum - 1e-12).ceil().max(1.0) as usize;
        for p in 0..chunk.len() {
            out[chunk_start + p] = n;
        }
    }
    Ok(out)
}

/// One transformed Bellman update at a node.
///
/// Dead-end convention: an empty joint successor set returns the node's
/// previous value unchanged.
pub fn bellman_update(
    x: NodeId,
    succ: &SuccessorSet<'_>,
    dt: &TimeVec,
    v_prev: &ValueFunction,
) -> ParetoSet {
    let mut out = ParetoSet::default();
    succ.for_each(|xt| {
        for tau in v_prev.get(xt).points() {
            let combined = TimeVec::from_quantized(
                tau.0
                    .iter()
                    .zip(&dt.0)
                    .map(|(&t, &d)| crate::pareto::combine_q(d, t)),
            );
            out.insert(combined);
        }
    });
    if out.is_empty() {
        v_prev.get(x).clone()
    } else {
        out
    }
}

/// Records every `(u, successor, value)` solving the update that produced
/// `v_new` from `v_prev` at `x`. At least one entry exists per frontier
/// element of `v_new` whenever `v_new` came from a nonempty successor set.
pub fn extract_controls(
    succ: &SuccessorSet<'_>,
    dt: &TimeVec,
    v_prev: &ValueFunction,
    v_new: &ParetoSet,
) -> Vec<PolicyEntry> {
    let mut entries = Vec::new();
    succ.for_each(|xt| {
        for tau in v_prev.get(xt).points() {
            let combined = TimeVec::from_quantized(
                tau.0
                    .iter()
                    .zip(&dt.0)
                    .map(|(&t, &d)| crate::pareto::combine_q(d, t)),
            );
            if v_new.points().contains(&combined) {
                let idxs = succ_decode(succ, xt);
                let controls: Vec<Option<Vec<u16>>> = idxs
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| {
                        if succ.per_robot[r].frozen {
                            None
                        } else {
                            Some(succ.controls_reaching(r, i))
                        }
                    })
                    .collect();
                entries.push(PolicyEntry {
                    successor: xt,
                    value: combined,
                    controls,
                });
            }
        }
    });
    entries.sort_by(|a, b| (a.successor, &a.value).cmp(&(b.successor, &b.value)));
    entries.dedup();
    entries
}

fn succ_decode(succ: &SuccessorSet<'_>, id: NodeId) -> Vec<u32> {
    succ.stage().decode(id)
}

/// Interpolates the previous stage's final values onto a new stage:
/// shared nodes copy; new safety nodes get the 0/1 vector by goal
/// proximity at the new stage; remaining new nodes get the all-ones
/// vector.
pub fn interpolate_value(
    prev: Option<(&ValueFunction, &GridStage)>,
    stage: &GridStage,
    safety: &SafetySet,
) -> ValueFunction {
    let n = stage.robot_count();
    let values: Vec<ParetoSet> = (0..stage.joint_count)
        .into_par_iter()
        .map(|raw| {
            let id = NodeId(raw);
            if let Some((vf, pg)) = prev {
                if let Some(old) = stage.map_to_stage(pg, id) {
                    return vf.get(old).clone();
                }
            }
            if safety.contains(id) {
                let idxs = stage.decode(id);
                let v = TimeVec::from_quantized(idxs.iter().enumerate().map(|(r, &i)| {
                    if stage.robot_is_goal_proximate(r, i) {
                        0
                    } else {
                        crate::pareto::QUANT_ONE
                    }
                }));
                ParetoSet::singleton(v)
            } else {
                ParetoSet::singleton(TimeVec::ones(n))
            }
        })
        .collect();
    ValueFunction {
        stage_index: stage.index,
        sweep: 0,
        values,
    }
}

/// How new-node values are drawn from the equivalent-node set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Pareto-reduced union over the whole equivalent set.
    FullUnion,
    /// A single representative from the coarsest grid when one exists
    /// (falls back to the full union otherwise).
    Representative,
}

/// Initializes `v_0` on a stage: nodes shared with the previous stage
/// keep the interpolated value; new nodes take the (reduced) union of the
/// interpolated values over their equivalent-node set.
pub fn initialize_value(
    tilde: &ValueFunction,
    stage: &GridStage,
    prev_stage: Option<&GridStage>,
    coarsest: Option<&GridStage>,
    mode: InitMode,
) -> ValueFunction {
    let values: Vec<ParetoSet> = (0..stage.joint_count)
        .into_par_iter()
        .map(|raw| {
            let id = NodeId(raw);
            if let Some(pg) = prev_stage {
                if stage.map_to_stage(pg, id).is_some() {
                    return tilde.get(id).clone();
                }
            }
            let eq = stage.equivalent_nodes(id);
            if let (InitMode::Representative, Some(cg)) = (mode, coarsest) {
                if let Some(rep) = eq.iter().find(|&&e| stage.map_to_stage(cg, e).is_some()) {
                    return tilde.get(*rep).clone();
                }
            }
            let mut out = ParetoSet::default();
            for e in eq {
                for p in tilde.get(e).points() {
                    out.insert(p.clone());
                }
            }
            out
        })
        .collect();
    ValueFunction {
        stage_index: stage.index,
        sweep: 0,
        values,
    }
}

/// `D(a, b) = sqrt(sum_x d_H^2(a(x), b(x)))` over the given nodes.
pub fn value_difference(a: &ValueFunction, b: &ValueFunction, nodes: &[NodeId]) -> f64 {
    nodes
        .par_iter()
        .map(|&id| {
            let d = hausdorff_frontiers(a.get(id), b.get(id));
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// The §-style stopping test: relative difference of consecutive value
/// functions against the total progress since `v_0`. False when no
/// progress has been made at all.
pub fn relative_difference_stop(
    v_n: &ValueFunction,
    v_prev: &ValueFunction,
    v_0: &ValueFunction,
    threshold: f64,
    nodes: &[NodeId],
) -> bool {
    let total = value_difference(v_0, v_n, nodes);
    if total == 0.0 {
        return false;
    }
    let step = value_difference(v_prev, v_n, nodes);
    step / total <= threshold
}

/// Result of running one stage.
pub struct StageRun {
    pub stage: GridStage,
    pub safety: SafetySet,
    pub dynamics: StageDynamics,
    pub tilde: ValueFunction,
    pub v_final: ValueFunction,
    pub policy: PolicyTable,
    pub sweeps: usize,
    pub reached_fixed_point: bool,
    pub warnings: Vec<String>,
    pub svd_seconds: f64,
    pub vi_seconds: f64,
}

/// Sweep domain of a stage: safety nodes outside the goal region expanded
/// by `M+ eps + h` in the joint norm.
pub fn sweep_domain(stage: &GridStage, scenario: &Scenario, safety: &SafetySet) -> Vec<NodeId> {
    let (m_plus, _) = scenario.team_bounds();
    let excl = m_plus * stage.eps + stage.h;
    safety
        .ids
        .par_iter()
        .copied()
        .filter(|&id| {
            let st = stage.team_state(id);
            scenario.joint_goal_distance(&st) > excl
        })
        .collect()
}

/// Applies one Jacobi sweep of the Bellman operator over `domain`,
/// leaving all other nodes unchanged.
pub fn sweep(
    stage: &GridStage,
    safety: &SafetySet,
    dynamics: &StageDynamics,
    domain: &[NodeId],
    v_prev: &ValueFunction,
) -> (ValueFunction, bool) {
    let updated: Vec<(NodeId, ParetoSet)> = domain
        .par_iter()
        .map(|&x| {
            let succ = dynamics.successors(stage, safety, x);
            let dt = dynamics.time_increment(stage, x);
            (x, bellman_update(x, &succ, &dt, v_prev))
        })
        .collect();
    let mut out = v_prev.clone();
    out.sweep = v_prev.sweep + 1;
    let mut changed = false;
    for (x, v) in updated {
        if !changed && *out.get(x) != v {
            changed = true;
        }
        out.set(x, v);
    }
    (out, changed)
}

/// Full-domain sweep used by the fixed-point construction that seeds the
/// fresh-stage analysis: every safety node updates, nothing is excluded.
pub fn sweep_all_safety(
    stage: &GridStage,
    safety: &SafetySet,
    dynamics: &StageDynamics,
    v_prev: &ValueFunction,
) -> (ValueFunction, bool) {
    sweep(stage, safety, dynamics, &safety.ids, v_prev)
}

/// Fresh-stage initial values for the fixed-point construction:
/// zeros on safety nodes, ones elsewhere.
pub fn construction_v0(stage: &GridStage, safety: &SafetySet, n: usize) -> ValueFunction {
    let mut v = ValueFunction::new_filled(stage, ParetoSet::singleton(TimeVec::ones(n)), 0);
    for &id in &safety.ids {
        v.set(id, ParetoSet::singleton(TimeVec::zeros(n)));
    }
    v
}

/// Runs value iteration on one stage from `v0`.
///
/// Exits at a quantized-exact fixed point, by the relative-difference
/// rule when configured, or at the sweep budget. Afterwards nodes in the
/// goal-expanded exclusion set and outside the safety set are restored
/// from the interpolated function, and policies are extracted from the
/// last executed update.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    stage: GridStage,
    scenario: &Scenario,
    safety: SafetySet,
    dynamics: StageDynamics,
    tilde: ValueFunction,
    v0: ValueFunction,
    budget: usize,
    stop: StopRule,
    frontier_warn: usize,
    mut on_sweep: Option<&mut dyn FnMut(usize, &ValueFunction)>,
) -> StageRun {
    let t0 = Instant::now();
    let domain = sweep_domain(&stage, scenario, &safety);
    let mut warnings = Vec::new();
    let mut v_prev = v0.clone();
    let mut v_last_prev = v0.clone();
    let mut sweeps = 0usize;
    let mut fixed = false;
    while sweeps < budget {
        let (v_next, changed) = sweep(&stage, &safety, &dynamics, &domain, &v_prev);
        sweeps += 1;
        if let Some(cb) = on_sweep.as_deref_mut() {
            cb(sweeps, &v_next);
        }
        v_last_prev = std::mem::replace(&mut v_prev, v_next);
        if !changed {
            fixed = true;
            break;
        }
        if let StopRule::RelativeDifference { threshold } = stop {
            if relative_difference_stop(&v_prev, &v_last_prev, &v0, threshold, &safety.ids) {
                break;
            }
        }
    }
    let mut v_final = v_prev;

    // restore excluded and non-safety nodes from the interpolated function
    let (m_plus, _) = scenario.team_bounds();
    let excl = m_plus * stage.eps + stage.h;
    let restored: Vec<NodeId> = (0..stage.joint_count)
        .into_par_iter()
        .map(NodeId)
        .filter(|&id| {
            if !safety.contains(id) {
                return true;
            }
            let st = stage.team_state(id);
            scenario.joint_goal_distance(&st) <= excl
        })
        .collect();
    for id in restored {
        v_final.set(id, tilde.get(id).clone());
    }

    // policy: solutions of the last executed update
    let mut policy = PolicyTable::new(&stage, dynamics.control_samples.clone());
    if sweeps == 0 {
        warnings.push("stage ran zero sweeps; policy table is empty".to_string());
    } else {
        let extracted: Vec<(NodeId, Vec<PolicyEntry>)> = domain
            .par_iter()
            .map(|&x| {
                let succ = dynamics.successors(&stage, &safety, x);
                let dt = dynamics.time_increment(&stage, x);
                let v_new = bellman_update(x, &succ, &dt, &v_last_prev);
                (x, extract_controls(&succ, &dt, &v_last_prev, &v_new))
            })
            .collect();
        for (x, e) in extracted {
            policy.set_entries(x, e);
        }
    }
    let max_front = v_final.max_frontier_len();
    if max_front > frontier_warn {
        warnings.push(format!(
            "frontier cardinality reached {max_front} (warn threshold {frontier_warn})"
        ));
    }
    let vi_seconds = t0.elapsed().as_secs_f64();
    StageRun {
        stage,
        safety,
        dynamics,
        tilde,
        v_final,
        policy,
        sweeps,
        reached_fixed_point: fixed,
        warnings,
        svd_seconds: 0.0,
        vi_seconds,
    }
}

/// End-to-end options for `plan`.
#[derive(Debug, Clone)]
pub struct PlanOptions {
    pub control_density: usize,
    pub expand_safety: bool,
    pub init_mode: InitMode,
    pub goal_refinement: bool,
    /// Upper bound on a stage's joint lattice size.
    pub node_budget: u64,
    pub frontier_warn: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            control_density: 9,
            expand_safety: false,
            init_mode: InitMode::FullUnion,
            goal_refinement: false,
            node_budget: 20_000_000,
            frontier_warn: 64,
        }
    }
}

pub struct PlanResult {
    pub stages: Vec<StageRun>,
    pub refinement: Option<RefinedOverlay>,
    pub warnings: Vec<String>,
}

/// Goal-neighborhood refinement: one extra stage at half the finest
/// resolution, swept only inside the one-hop goal expansion, whose policy
/// overrides the coarse one there.
pub struct RefinedOverlay {
    pub stage: GridStage,
    pub safety: SafetySet,
    pub dynamics: StageDynamics,
    pub policy: PolicyTable,
    pub v_final: ValueFunction,
    /// Per-robot proximity thresholds of the base stage; a state is in the
    /// overlay domain when every robot is within its base one-hop radius.
    pub base_thresholds: Vec<f64>,
}

impl RefinedOverlay {
    pub fn covers(&self, scenario: &Scenario, state: &crate::model::TeamState) -> bool {
        (0..scenario.robot_count()).all(|i| {
            scenario.goals[i].distance(state.robot(i)) <= self.base_thresholds[i]
        })
    }
}

/// Runs the full multigrid pipeline over the schedule.
pub fn plan(
    scenario: &Scenario,
    schedule: &Schedule,
    options: &PlanOptions,
    mut on_sweep: Option<&mut dyn FnMut(usize, usize, &ValueFunction)>,
) -> Result<PlanResult> {
    schedule.validate(scenario)?;
    let mut warnings = schedule.standoff_warnings(scenario);
    let mut stages: Vec<StageRun> = Vec::new();
    let mut coarsest: Option<GridStage> = None;
    for (p, params) in schedule.stages.iter().enumerate() {
        let stage = build_stage(scenario, params.h, params.eps, p + 1)?;
        if stage.joint_count > options.node_budget {
            return Err(Error::budget(format!(
                "stage {}: joint lattice has {} nodes, budget is {}",
                p + 1,
                stage.joint_count,
                options.node_budget
            )));
        }
        let t0 = Instant::now();
        let safety = safety_nodes(&stage, scenario, options.expand_safety);
        let dynamics = StageDynamics::build(&stage, scenario, options.control_density)?;
        let svd_seconds = t0.elapsed().as_secs_f64();
        let tilde = {
            let prev = stages
                .last()
                .map(|run| (&run.v_final, &run.stage));
            interpolate_value(prev, &stage, &safety)
        };
        let v0 = initialize_value(
            &tilde,
            &stage,
            stages.last().map(|r| &r.stage),
            coarsest.as_ref(),
            options.init_mode,
        );
        if coarsest.is_none() {
            coarsest = Some(stage.clone());
        }
        let stage_idx = p + 1;
        let mut cb = on_sweep
            .as_deref_mut()
            .map(|f| move |n: usize, v: &ValueFunction| f(stage_idx, n, v));
        let mut run = run_stage(
            stage,
            scenario,
            safety,
            dynamics,
            tilde,
            v0,
            params.budget,
            schedule.stop,
            options.frontier_warn,
            cb.as_mut().map(|f| f as &mut dyn FnMut(usize, &ValueFunction)),
        );
        run.svd_seconds = svd_seconds;
        warnings.extend(run.warnings.iter().cloned());
        stages.push(run);
    }

    let refinement = if options.goal_refinement {
        Some(refine_goal_neighborhood(scenario, stages.last().unwrap(), options)?)
    } else {
        None
    };

    Ok(PlanResult {
        stages,
        refinement,
        warnings,
    })
}

fn refine_goal_neighborhood(
    scenario: &Scenario,
    base: &StageRun,
    options: &PlanOptions,
) -> Result<RefinedOverlay> {
    let h = base.stage.h / 2.0;
    let eps_ratio = base.stage.eps / base.stage.h.sqrt();
    let eps = eps_ratio * h.sqrt();
    let stage = build_stage(scenario, h, eps, base.stage.index + 1)?;
    if stage.joint_count > options.node_budget {
        return Err(Error::budget(format!(
            "goal refinement lattice has {} nodes, budget is {}",
            stage.joint_count, options.node_budget
        )));
    }
    let base_thresholds: Vec<f64> = (0..scenario.robot_count())
        .map(|r| base.stage.goal_proximity_threshold(r))
        .collect();
    let safety = safety_nodes(&stage, scenario, base.safety.expanded);
    let dynamics = StageDynamics::build(&stage, scenario, options.control_density)?;
    let tilde = interpolate_value(Some((&base.v_final, &base.stage)), &stage, &safety);
    let v0 = initialize_value(&tilde, &stage, Some(&base.stage), None, InitMode::FullUnion);

    // sweep only within the one-hop expansion of the base stage, minus the
    // refined stage's own exclusion set
    let (m_plus, _) = scenario.team_bounds();
    let excl = m_plus * stage.eps + stage.h;
    let domain: Vec<NodeId> = safety
        .ids
        .par_iter()
        .copied()
        .filter(|&id| {
            let st = stage.team_state(id);
            let in_overlay = (0..scenario.robot_count())
                .all(|i| scenario.goals[i].distance(st.robot(i)) <= base_thresholds[i]);
            in_overlay && scenario.joint_goal_distance(&st) > excl
        })
        .collect();

    let mut v_prev = v0;
    let mut v_last_prev = v_prev.clone();
    let budget = 64;
    for _ in 0..budget {
        let (v_next, changed) = sweep(&stage, &safety, &dynamics, &domain, &v_prev);
        v_last_prev = std::mem::replace(&mut v_prev, v_next);
        if !changed {
            break;
        }
    }
    let mut policy = PolicyTable::new(&stage, dynamics.control_samples.clone());
    let extracted: Vec<(NodeId, Vec<PolicyEntry>)> = domain
        .par_iter()
        .map(|&x| {
            let succ = dynamics.successors(&stage, &safety, x);
            let dt = dynamics.time_increment(&stage, x);
            let v_new = bellman_update(x, &succ, &dt, &v_last_prev);
            (x, extract_controls(&succ, &dt, &v_last_prev, &v_new))
        })
        .collect();
    for (x, e) in extracted {
        policy.set_entries(x, e);
    }
    Ok(RefinedOverlay {
        stage,
        safety,
        dynamics,
        policy,
        v_final: v_prev,
        base_thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::StageDynamics;
    use crate::grid::{build_stage, safety_nodes};
    use crate::model::{DynamicsKind, RobotSpec};
    use crate::pareto::{combine_q, kruzhkov_q, QUANT_ONE};
    use crate::region::{AxisBox, Region};

    fn chain_scenario() -> Scenario {
        Scenario {
            name: "chain".into(),
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
            state_boxes: vec![AxisBox::new(vec![0.0], vec![1.0]).unwrap()],
            obstacles: vec![Region::empty()],
            goals: vec![Region::new(vec![AxisBox::new(vec![0.0], vec![0.0]).unwrap()])],
            sigma: 0.1,
            starts: None,
        }
        .validated()
        .unwrap()
    }

    struct ChainCtx {
        scenario: Scenario,
        stage: GridStage,
        safety: SafetySet,
        dynamics: StageDynamics,
        tilde: ValueFunction,
        v0: ValueFunction,
    }

    fn chain_ctx(density: usize) -> ChainCtx {
        let scenario = chain_scenario();
        let stage = build_stage(&scenario, 0.1, 0.201, 1).unwrap();
        let safety = safety_nodes(&stage, &scenario, false);
        let dynamics = StageDynamics::build(&stage, &scenario, density).unwrap();
        let tilde = interpolate_value(None, &stage, &safety);
        let v0 = initialize_value(&tilde, &stage, None, None, InitMode::FullUnion);
        ChainCtx {
            scenario,
            stage,
            safety,
            dynamics,
            tilde,
            v0,
        }
    }

    #[test]
    fn chain_matches_hand_dp_per_sweep() {
        let c = chain_ctx(3);
        let d = kruzhkov_q(0.1).unwrap(); // kappa = 0.1
        assert_eq!(c.dynamics.dt_move_q, d);
        let mut chain = vec![0u64];
        for m in 1..=6 {
            chain.push(combine_q(d, chain[m - 1]));
        }
        let mut snapshots: Vec<ValueFunction> = Vec::new();
        let mut cb = |_n: usize, v: &ValueFunction| snapshots.push(v.clone());
        let run = run_stage(
            c.stage,
            &c.scenario,
            c.safety,
            c.dynamics,
            c.tilde,
            c.v0,
            16,
            StopRule::Budget,
            64,
            Some(&mut cb),
        );
        for (sweep_idx, v) in snapshots.iter().enumerate() {
            let n = sweep_idx + 1;
            for k in 2..=10usize {
                let steps = (k - 1).div_ceil(2);
                let expect = if n >= steps { chain[steps] } else { QUANT_ONE };
                let got = v.get(NodeId(k as u64));
                assert_eq!(
                    got.points().len(),
                    1,
                    "node {k} sweep {n}: single-objective frontier is a singleton"
                );
                assert_eq!(got.points()[0].get(0), expect, "node {k} sweep {n}");
            }
        }
        // fixed point after the deepest chain (5 steps) settles
        assert!(run.reached_fixed_point);
        assert_eq!(run.sweeps, 6);
    }

    #[test]
    fn v0_already_fixed_point_exits_after_one_sweep() {
        let c = chain_ctx(3);
        // run to convergence first
        let run = run_stage(
            c.stage.clone(),
            &c.scenario,
            c.safety.clone(),
            c.dynamics.clone(),
            c.tilde.clone(),
            c.v0,
            32,
            StopRule::Budget,
            64,
            None,
        );
        let fixed = run.v_final.clone();
        let rerun = run_stage(
            c.stage,
            &c.scenario,
            run.safety,
            run.dynamics,
            run.tilde,
            fixed.clone(),
            32,
            StopRule::Budget,
            64,
            None,
        );
        assert_eq!(rerun.sweeps, 1);
        assert!(rerun.reached_fixed_point);
        for id in 0..rerun.v_final.len() as u64 {
            assert_eq!(rerun.v_final.get(NodeId(id)), fixed.get(NodeId(id)));
        }
    }

    #[test]
    fn zero_budget_returns_v0_with_warning() {
        let c = chain_ctx(3);
        let run = run_stage(
            c.stage,
            &c.scenario,
            c.safety,
            c.dynamics,
            c.tilde,
            c.v0.clone(),
            0,
            StopRule::Budget,
            64,
            None,
        );
        assert_eq!(run.sweeps, 0);
        assert!(run.warnings.iter().any(|w| w.contains("zero sweeps")));
        for id in 0..run.v_final.len() as u64 {
            assert_eq!(run.v_final.get(NodeId(id)), c.v0.get(NodeId(id)));
        }
        assert_eq!(run.policy.nonempty_nodes().count(), 0);
    }

    #[test]
    fn policy_entries_replay_into_final_frontier() {
        let c = chain_ctx(5);
        let run = run_stage(
            c.stage,
            &c.scenario,
            c.safety,
            c.dynamics,
            c.tilde,
            c.v0,
            32,
            StopRule::Budget,
            64,
            None,
        );
        let mut saw_multi_control = false;
        let mut nodes = 0;
        for id in run.policy.nonempty_nodes().collect::<Vec<_>>() {
            nodes += 1;
            let frontier = run.v_final.get(id);
            for e in run.policy.entries(id) {
                assert!(frontier.points().contains(&e.value));
                for c in e.controls.iter().flatten() {
                    assert!(!c.is_empty());
                    if c.len() >= 2 {
                        saw_multi_control = true;
                    }
                }
            }
            // at least one entry per frontier element
            for p in frontier.points() {
                assert!(run.policy.entries(id).iter().any(|e| &e.value == p));
            }
        }
        assert!(nodes > 0);
        assert!(saw_multi_control, "expected some frontier point reached by several controls");
    }

    #[test]
    fn interpolation_and_initialization_rules() {
        let scenario = chain_scenario();
        let coarse = build_stage(&scenario, 0.2, 0.45, 1).unwrap();
        let coarse_safety = safety_nodes(&coarse, &scenario, false);
        let dynamics = StageDynamics::build(&coarse, &scenario, 3).unwrap();
        let tilde1 = interpolate_value(None, &coarse, &coarse_safety);
        let v0 = initialize_value(&tilde1, &coarse, None, None, InitMode::FullUnion);
        let run = run_stage(
            coarse,
            &scenario,
            coarse_safety,
            dynamics,
            tilde1,
            v0,
            32,
            StopRule::Budget,
            64,
            None,
        );
        let fine = build_stage(&scenario, 0.1, 0.35, 2).unwrap();
        let fine_safety = safety_nodes(&fine, &scenario, false);
        let tilde = interpolate_value(Some((&run.v_final, &run.stage)), &fine, &fine_safety);
        // old nodes copy verbatim
        for old in 0..run.stage.joint_count {
            let pos = run.stage.team_state(NodeId(old));
            let fine_id = fine
                .nodes_within(&pos, 1e-9)
                .into_iter()
                .next()
                .expect("nested node");
            assert_eq!(tilde.get(fine_id), run.v_final.get(NodeId(old)));
        }
        // new nodes: 0/1 by goal proximity at the fine stage
        // node at 0.1 is new (coarse lattice is 0.2-pitch), proximate
        let id_01 = fine.nodes_within(&crate::model::TeamState::new(vec![vec![0.1]]), 1e-9)[0];
        assert_eq!(tilde.get(id_01).points()[0].get(0), 0);
        // node at 0.5 is new, not proximate (thr = 0.25*0.35+0.1 = 0.1875)
        let id_05 = fine.nodes_within(&crate::model::TeamState::new(vec![vec![0.5]]), 1e-9)[0];
        assert_eq!(tilde.get(id_05).points()[0].get(0), QUANT_ONE);

        // initialization keeps old nodes and unions equivalent sets on new ones
        let v0 = initialize_value(&tilde, &fine, Some(&run.stage), Some(&run.stage), InitMode::FullUnion);
        for old in 0..run.stage.joint_count {
            let pos = run.stage.team_state(NodeId(old));
            let fine_id = fine.nodes_within(&pos, 1e-9)[0];
            assert_eq!(v0.get(fine_id), tilde.get(fine_id));
        }
        // new proximate node: equivalent set spans prox nodes; union of
        // tilde there includes the copied coarse values reduced by
        // domination; its own value 0 dominates everything
        assert_eq!(v0.get(id_01).points(), tilde.get(id_01).points());

        // representative mode agrees with the union on this instance
        let v0_rep =
            initialize_value(&tilde, &fine, Some(&run.stage), Some(&run.stage), InitMode::Representative);
        for id in 0..fine.joint_count {
            assert_eq!(v0.get(NodeId(id)), v0_rep.get(NodeId(id)), "node {id}");
        }
    }

    #[test]
    fn schedule_iteration_counts() {
        assert_eq!(schedule_iterations(&[0.2], 0.5, 1).unwrap(), vec![4]);
        // gamma close to 1: single sweep suffices once e^{-kappa} <= gamma
        assert_eq!(schedule_iterations(&[0.2], 0.9, 1).unwrap(), vec![1]);
        // two-stage window splits the exponent budget
        let n = schedule_iterations(&[0.2, 0.1], 0.5, 2).unwrap();
        assert_eq!(n[0], n[1]);
        let total: f64 = n[0] as f64 * 0.2 + n[1] as f64 * 0.1;
        assert!((-total).exp() <= 0.5);
        assert!(schedule_iterations(&[0.2], 1.0, 1).is_err());
        assert!(schedule_iterations(&[0.2], 0.0, 1).is_err());
    }

    #[test]
    fn relative_difference_rule() {
        let scenario = chain_scenario();
        let stage = build_stage(&scenario, 0.5, 1.01, 1).unwrap();
        let nodes = vec![NodeId(0)];
        let mk = |v: f64| {
            let mut f = ValueFunction::new_filled(&stage, ParetoSet::singleton(TimeVec::zeros(1)), 0);
            f.set(NodeId(0), ParetoSet::singleton(TimeVec::from_quantized([
                crate::pareto::quantize(v),
            ])));
            f
        };
        let v0 = mk(1.0);
        let vn = mk(0.0);
        // consecutive equal: numerator zero
        assert!(relative_difference_stop(&vn, &vn.clone(), &v0, 0.1, &nodes));
        // first sweep: ratio 1
        assert!(!relative_difference_stop(&vn, &v0, &v0, 0.1, &nodes));
        // constructed ratio 0.05
        let vprev = mk(0.05);
        assert!(relative_difference_stop(&vn, &vprev, &v0, 0.1, &nodes));
        assert!(!relative_difference_stop(&vn, &vprev, &v0, 0.04, &nodes));
        // no progress at all: false
        assert!(!relative_difference_stop(&v0, &v0.clone(), &v0, 0.1, &nodes));
    }

    #[test]
    fn schedule_validation_catches_bad_sequences() {
        let scenario = chain_scenario();
        let mut s = Schedule::from_resolutions(&[0.2, 0.1], |h| h.sqrt(), 8);
        s.validate(&scenario).unwrap();
        // eps <= 2h
        s.stages[0].eps = 0.4;
        assert!(s.validate(&scenario).is_err());
        // eps increasing across stages
        let mut s = Schedule::from_resolutions(&[0.2, 0.1], |h| h.sqrt(), 8);
        s.stages[1].eps = 0.9;
        assert!(s.validate(&scenario).is_err());
        // alpha smaller than the previous h breaks the nesting gap
        let mut s = Schedule::from_resolutions(&[0.2, 0.1], |h| h.sqrt(), 8);
        s.stages[0].h = 0.9;
        s.stages[0].eps = 2.0;
        assert!(s.validate(&scenario).is_err());
    }
}
