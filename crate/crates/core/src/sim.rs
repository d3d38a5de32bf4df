//! Closed-loop execution of grid policies on the continuous dynamics.
//!
//! Controls are looked up at the nearest policy-bearing safety node,
//! selected uniformly among that node's `(u, successor, value)` solutions
//! under a seeded generator, held constant for one temporal resolution,
//! and integrated with fixed-step RK4 at `eps/20`. Goal-proximate robots
//! hold their previous control (standing still when they have none), and
//! a robot freezes permanently the moment it enters its goal region.

use bitvec::vec::BitVec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::GridStage;
use crate::model::{eval_dynamics, norm, pair_distance, RobotSpec, Scenario, TeamState};
use crate::planner::{PolicyTable, RefinedOverlay};

/// A policy bound to its stage, ready for closed-loop lookup.
pub struct SimPolicy<'a> {
    pub scenario: &'a Scenario,
    pub stage: &'a GridStage,
    pub policy: &'a PolicyTable,
    entried: BitVec,
    pub overlay: Option<OverlayPolicy<'a>>,
}

pub struct OverlayPolicy<'a> {
    pub overlay: &'a RefinedOverlay,
    entried: BitVec,
}

impl<'a> SimPolicy<'a> {
    pub fn new(
        scenario: &'a Scenario,
        stage: &'a GridStage,
        policy: &'a PolicyTable,
        overlay: Option<&'a RefinedOverlay>,
    ) -> Self {
        let entried = entried_bits(stage, policy);
        let overlay = overlay.map(|o| OverlayPolicy {
            overlay: o,
            entried: entried_bits(&o.stage, &o.policy),
        });
        SimPolicy {
            scenario,
            stage,
            policy,
            entried,
            overlay,
        }
    }
}

fn entried_bits(stage: &GridStage, policy: &PolicyTable) -> BitVec {
    let mut bits = BitVec::repeat(false, stage.joint_count as usize);
    for id in policy.nonempty_nodes() {
        bits.set(id.0 as usize, true);
    }
    bits
}

/// Outcome of one control lookup.
pub struct LookupResult {
    /// Applied control per robot.
    pub controls: Vec<Vec<f64>>,
    /// Epoch duration of the table that served the lookup.
    pub epoch: f64,
    /// True when no policy-bearing node existed and the previous controls
    /// were held.
    pub fallback: bool,
}

/// Nearest policy-bearing node (ties to lowest id), uniform solution
/// choice, per-robot goal-proximity override.
pub fn policy_lookup(
    sim: &SimPolicy<'_>,
    state: &TeamState,
    prev: &[Option<Vec<f64>>],
    rng: &mut ChaCha8Rng,
) -> LookupResult {
    // refined overlay takes precedence inside its domain
    if let Some(ov) = &sim.overlay {
        if ov.overlay.covers(sim.scenario, state) {
            if let Some(res) =
                lookup_on(sim.scenario, &ov.overlay.stage, &ov.overlay.policy, &ov.entried, state, prev, rng)
            {
                return res;
            }
        }
    }
    if let Some(res) = lookup_on(sim.scenario, sim.stage, sim.policy, &sim.entried, state, prev, rng) {
        return res;
    }
    // dead end: hold previous controls, flagged
    let controls = (0..sim.scenario.robot_count())
        .map(|i| hold_or_stop(&sim.scenario.robots[i], prev[i].as_deref()))
        .collect();
    LookupResult {
        controls,
        epoch: sim.stage.eps,
        fallback: true,
    }
}

fn lookup_on(
    scenario: &Scenario,
    stage: &GridStage,
    policy: &PolicyTable,
    entried: &BitVec,
    state: &TeamState,
    prev: &[Option<Vec<f64>>],
    rng: &mut ChaCha8Rng,
) -> Option<LookupResult> {
    let node = stage.nearest_node_in_bits(state, entried)?;
    let entries = policy.entries(node);
    debug_assert!(!entries.is_empty());
    let total: u64 = entries.iter().map(|e| e.multiplicity()).sum();
    let mut pick = rng.gen_range(0..total);
    let mut chosen = &entries[0];
    for e in entries {
        let m = e.multiplicity();
        if pick < m {
            chosen = e;
            break;
        }
        pick -= m;
    }
    let succ = stage.decode(chosen.successor);
    let _ = succ;
    let mut controls = Vec::with_capacity(scenario.robot_count());
    for (i, c) in chosen.controls.iter().enumerate() {
        let robot = &scenario.robots[i];
        let physical_prox =
            scenario.goals[i].distance(state.robot(i)) <= stage.goal_proximity_threshold(i);
        if physical_prox {
            controls.push(hold_or_stop(robot, prev[i].as_deref()));
            continue;
        }
        match c {
            Some(samples) if !samples.is_empty() => {
                let k = samples[rng.gen_range(0..samples.len())];
                controls.push(policy.control_vector(i, k).to_vec());
            }
            _ => controls.push(hold_or_stop(robot, prev[i].as_deref())),
        }
    }
    Some(LookupResult {
        controls,
        epoch: stage.eps,
        fallback: false,
    })
}

/// A zero-motion control clamped into the control box, or the previous
/// control when one exists.
pub fn hold_or_stop(robot: &RobotSpec, prev: Option<&[f64]>) -> Vec<f64> {
    if let Some(p) = prev {
        return p.to_vec();
    }
    stop_control(robot)
}

pub fn stop_control(robot: &RobotSpec) -> Vec<f64> {
    let zero = vec![0.0; robot.control_dim()];
    robot.control_box.project(&zero)
}

/// One RK4 step of the robot dynamics under a constant control.
pub fn rk4_step(robot: &RobotSpec, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
    let k1 = eval_dynamics(robot, x, u)?;
    let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * dt * k).collect();
    let k2 = eval_dynamics(robot, &x2, u)?;
    let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * dt * k).collect();
    let k3 = eval_dynamics(robot, &x3, u)?;
    let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + dt * k).collect();
    let k4 = eval_dynamics(robot, &x4, u)?;
    Ok(x
        .iter()
        .enumerate()
        .map(|(d, a)| a + dt / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]))
        .collect())
}

/// One sampled instant of the closed-loop run.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub speeds: Vec<f64>,
    pub min_pairwise_distance: f64,
}

/// Time-stamped closed-loop run with arrival and safety accounting.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    /// First time each robot entered its goal region (+inf if never).
    pub arrival_times: Vec<f64>,
    pub fallback_count: usize,
}

/// Summary metrics of a trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub arrival_times: Vec<f64>,
    pub all_arrived: bool,
    pub min_pairwise_distance: f64,
    pub min_obstacle_clearance: f64,
    pub fallback_count: usize,
    pub feasible: bool,
}

fn signed_obstacle_clearance(scenario: &Scenario, i: usize, x: &[f64]) -> f64 {
    if !scenario.in_obstacle(i, x) {
        return scenario.obstacles[i].distance(x);
    }
    // penetration depth: distance to the nearest face of a containing box
    let mut depth = f64::INFINITY;
    for b in &scenario.obstacles[i].boxes {
        if b.contains(x) {
            for d in 0..b.dim() {
                depth = depth.min((x[d] - b.min[d]).min(b.max[d] - x[d]));
            }
        }
    }
    -depth
}

fn min_pairwise(states: &[Vec<f64>]) -> f64 {
    let n = states.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            best = best.min(pair_distance(&states[i], &states[j]));
        }
    }
    best
}

/// Simulates the closed loop from `x0` until all robots arrive or the
/// horizon elapses. Deterministic for a fixed seed.
pub fn simulate(
    sim: &SimPolicy<'_>,
    x0: &TeamState,
    seed: u64,
    horizon: f64,
) -> Result<Trajectory> {
    let scenario = sim.scenario;
    if !scenario.in_safety(x0) {
        return Err(Error::domain("simulate: initial state outside the safety region"));
    }
    let n = scenario.robot_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states: Vec<Vec<f64>> = x0.robots.clone();
    let mut frozen = vec![false; n];
    let mut arrivals = vec![f64::INFINITY; n];
    let mut prev_controls: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut fallback_count = 0usize;
    let mut t = 0.0f64;
    for (i, s) in states.iter().enumerate() {
        if scenario.in_goal(i, s) {
            frozen[i] = true;
            arrivals[i] = 0.0;
        }
    }
    let zero_controls: Vec<Vec<f64>> = scenario.robots.iter().map(stop_control).collect();
    let mut rows = vec![TrajectoryRow {
        t,
        states: states.clone(),
        controls: zero_controls,
        speeds: vec![0.0; n],
        min_pairwise_distance: min_pairwise(&states),
    }];

    while t < horizon - 1e-12 && frozen.iter().any(|f| !f) {
        let team = TeamState::new(states.clone());
        let lookup = policy_lookup(sim, &team, &prev_controls, &mut rng);
        if lookup.fallback {
            fallback_count += 1;
        }
        let epoch = lookup.epoch.min(horizon - t);
        let substeps = 20usize;
        let dt = epoch / substeps as f64;
        for (i, c) in lookup.controls.iter().enumerate() {
            prev_controls[i] = Some(c.clone());
        }
        for _ in 0..substeps {
            for i in 0..n {
                if frozen[i] {
                    continue;
                }
                let u = &lookup.controls[i];
                states[i] = rk4_step(&scenario.robots[i], &states[i], u, dt)?;
            }
            t += dt;
            for i in 0..n {
                if !frozen[i] && scenario.in_goal(i, &states[i]) {
                    frozen[i] = true;
                    arrivals[i] = t;
                }
            }
            let speeds: Vec<f64> = (0..n)
                .map(|i| {
                    if frozen[i] {
                        0.0
                    } else {
                        eval_dynamics(&scenario.robots[i], &states[i], &lookup.controls[i])
                            .map(|f| norm(&f))
                            .unwrap_or(0.0)
                    }
                })
                .collect();
            rows.push(TrajectoryRow {
                t,
                states: states.clone(),
                controls: lookup.controls.clone(),
                speeds,
                min_pairwise_distance: min_pairwise(&states),
            });
        }
    }

    Ok(Trajectory {
        rows,
        arrival_times: arrivals,
        fallback_count,
    })
}

/// Arrival, distance and feasibility accounting for a finished run.
pub fn trajectory_metrics(traj: &Trajectory, scenario: &Scenario) -> Metrics {
    let min_pair = traj
        .rows
        .iter()
        .map(|r| r.min_pairwise_distance)
        .fold(f64::INFINITY, f64::min);
    let mut min_clear = f64::INFINITY;
    for row in &traj.rows {
        for (i, s) in row.states.iter().enumerate() {
            if scenario.obstacles[i].is_empty() {
                continue;
            }
            min_clear = min_clear.min(signed_obstacle_clearance(scenario, i, s));
        }
    }
    let all_arrived = traj.arrival_times.iter().all(|a| a.is_finite());
    let sigma_ok = scenario.robot_count() < 2 || min_pair >= scenario.sigma;
    let feasible = all_arrived && sigma_ok && min_clear >= 0.0;
    Metrics {
        arrival_times: traj.arrival_times.clone(),
        all_arrived,
        min_pairwise_distance: min_pair,
        min_obstacle_clearance: min_clear,
        fallback_count: traj.fallback_count,
        feasible,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_stage, safety_nodes, NodeId};
    use crate::instances::line_robot;
    use crate::planner::{
        initialize_value, interpolate_value, run_stage, InitMode, PolicyEntry, PolicyTable,
        StopRule,
    };
    use crate::dynamics::StageDynamics;

    /// Hand policy: drive at full speed toward the goal from every node.
    fn hand_policy(stage: &crate::grid::GridStage) -> PolicyTable {
        let mut policy = PolicyTable::new(stage, vec![vec![vec![-1.0], vec![1.0]]]);
        for id in 0..stage.joint_count {
            let x = stage.robot_position(0, stage.robot_index_of(NodeId(id), 0))[0];
            let sample = if x >= 0.0 { 0u16 } else { 1u16 };
            policy.set_entries(
                NodeId(id),
                vec![PolicyEntry {
                    successor: NodeId(id),
                    value: crate::pareto::TimeVec::zeros(1),
                    controls: vec![Some(vec![sample])],
                }],
            );
        }
        policy
    }

    #[test]
    fn analytic_arrival_under_hand_policy() {
        let scenario = line_robot(1.0);
        let stage = build_stage(&scenario, 0.1, 0.1f64.sqrt(), 1).unwrap();
        let policy = hand_policy(&stage);
        let sim = SimPolicy::new(&scenario, &stage, &policy, None);
        let x0 = TeamState::new(vec![vec![0.5]]);
        let traj = simulate(&sim, &x0, 7, 5.0).unwrap();
        // analytic minimal time (0.5 - 0.05)/1.0 = 0.45, reached within one epoch
        let arrival = traj.arrival_times[0];
        assert!(arrival.is_finite());
        assert!((arrival - 0.45).abs() <= stage.eps, "arrival {arrival}");
        // goal absorption: state constant afterwards
        let after: Vec<&TrajectoryRow> = traj.rows.iter().filter(|r| r.t > arrival).collect();
        for r in &after {
            assert!((r.states[0][0] - after[0].states[0][0]).abs() < 1e-12);
            assert_eq!(r.speeds[0], 0.0);
        }
    }

    #[test]
    fn start_inside_goal_arrives_at_zero() {
        let scenario = line_robot(1.0);
        let stage = build_stage(&scenario, 0.1, 0.1f64.sqrt(), 1).unwrap();
        let policy = hand_policy(&stage);
        let sim = SimPolicy::new(&scenario, &stage, &policy, None);
        let x0 = TeamState::new(vec![vec![0.02]]);
        let traj = simulate(&sim, &x0, 1, 2.0).unwrap();
        assert_eq!(traj.arrival_times[0], 0.0);
        for r in &traj.rows {
            assert_eq!(r.states[0][0], 0.02);
        }
    }

    #[test]
    fn start_outside_safety_is_domain_error() {
        let scenario = line_robot(1.0);
        let stage = build_stage(&scenario, 0.1, 0.1f64.sqrt(), 1).unwrap();
        let policy = hand_policy(&stage);
        let sim = SimPolicy::new(&scenario, &stage, &policy, None);
        let x0 = TeamState::new(vec![vec![1.5]]);
        assert!(matches!(
            simulate(&sim, &x0, 1, 2.0),
            Err(crate::error::Error::Domain(_))
        ));
    }

    #[test]
    fn planned_policy_reaches_goal_and_is_seed_deterministic() {
        let scenario = line_robot(1.0);
        let stage = build_stage(&scenario, 0.1, 0.1f64.sqrt(), 1).unwrap();
        let safety = safety_nodes(&stage, &scenario, false);
        let dynamics = StageDynamics::build(&stage, &scenario, 9).unwrap();
        let tilde = interpolate_value(None, &stage, &safety);
        let v0 = initialize_value(&tilde, &stage, None, None, InitMode::FullUnion);
        let run = run_stage(
            stage,
            &scenario,
            safety,
            dynamics,
            tilde,
            v0,
            32,
            StopRule::Budget,
            64,
            None,
        );
        let sim = SimPolicy::new(&scenario, &run.stage, &run.policy, None);
        let x0 = TeamState::new(vec![vec![0.8]]);
        let a = simulate(&sim, &x0, 42, 15.0).unwrap();
        assert!(a.arrival_times[0].is_finite(), "robot never arrived");
        assert_eq!(a.fallback_count, 0);
        let b = simulate(&sim, &x0, 42, 15.0).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.states, rb.states);
            assert_eq!(ra.controls, rb.controls);
        }
        let m = trajectory_metrics(&a, &scenario);
        assert!(m.feasible);
        assert!(m.min_obstacle_clearance.is_infinite()); // no obstacles
    }

    #[test]
    fn lookup_on_policy_node_uses_its_entry() {
        let scenario = line_robot(1.0);
        let stage = build_stage(&scenario, 0.1, 0.1f64.sqrt(), 1).unwrap();
        let policy = hand_policy(&stage);
        let sim = SimPolicy::new(&scenario, &stage, &policy, None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // x = 0.8 sits on a node and is not goal-proximate (thr ~ 0.416)
        let state = TeamState::new(vec![vec![0.8]]);
        let res = policy_lookup(&sim, &state, &[None], &mut rng);
        assert!(!res.fallback);
        assert_eq!(res.controls[0], vec![-1.0]);
    }

    #[test]
    fn goal_proximate_holds_previous_control() {
        let scenario = line_robot(1.0);
        let stage = build_stage(&scenario, 0.1, 0.1f64.sqrt(), 1).unwrap();
        let policy = hand_policy(&stage);
        let sim = SimPolicy::new(&scenario, &stage, &policy, None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // x = 0.3 is goal-proximate; previous control is held
        let state = TeamState::new(vec![vec![0.3]]);
        let res = policy_lookup(&sim, &state, &[Some(vec![-0.7])], &mut rng);
        assert_eq!(res.controls[0], vec![-0.7]);
        // with no history the robot stands still
        let res = policy_lookup(&sim, &state, &[None], &mut rng);
        assert_eq!(res.controls[0], vec![0.0]);
    }
}
