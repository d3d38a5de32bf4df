//! Set-valued one-step dynamics on a grid stage.
//!
//! For every non-goal-proximate robot the control box is sampled on a
//! regular grid; each sampled endpoint `x_i + eps * f_i(x_i, u)` is
//! fattened by the ball `alpha_p B` and intersected with the robot's
//! lattice. Goal-proximate robots are frozen at their coordinate with a
//! zero time increment. The joint successor set is the product of the
//! per-robot sets intersected with the safety nodes, enumerated lazily;
//! per-robot results are cached once per stage since they depend only on
//! the robot's own node.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{GridStage, NodeId, SafetySet};
use crate::model::{eval_dynamics, grid_samples, Scenario};
use crate::pareto::{kruzhkov_q, TimeVec};

/// `alpha_p = 2 h_p + eps_p h_p l+ + eps_p^2 l+ M+`.
pub fn alpha(h: f64, eps: f64, l_plus: f64, m_plus: f64) -> f64 {
    2.0 * h + eps * h * l_plus + eps * eps * l_plus * m_plus
}

/// `kappa_p = (ceil(eps/h) - 2) h`, the minimum positive lattice time
/// increment. Requires `eps > 2h`. The ratio is snapped within 1e-9 so
/// exact multiples like `eps = 3h` stay exact.
pub fn kappa(h: f64, eps: f64) -> Result<f64> {
    if eps <= 2.0 * h {
        return Err(Error::schedule(format!(
            "kappa undefined: eps {eps} <= 2h = {}",
            2.0 * h
        )));
    }
    let ratio = eps / h;
    let steps = (ratio - 1e-9).ceil() as i64 - 2;
    debug_assert!(steps >= 1);
    Ok(steps as f64 * h)
}

/// Integer form of `kappa / h` (lattice steps per move).
pub fn kappa_steps(h: f64, eps: f64) -> Result<u32> {
    let k = kappa(h, eps)?;
    Ok((k / h).round() as u32)
}

/// Per-robot one-step image: either frozen at the node or the sampled,
/// fattened endpoint set.
#[derive(Debug, Clone)]
pub struct RobotSuccessors {
    pub frozen: bool,
    /// Per control sample: lattice indices within alpha of its endpoint.
    pub images: Vec<Vec<u32>>,
    /// Union of all sample images (the frozen node when frozen), sorted.
    pub merged: Vec<u32>,
}

/// Per-stage successor cache plus the stage's scalar discretization data.
#[derive(Debug, Clone)]
pub struct StageDynamics {
    pub alpha: f64,
    pub kappa: f64,
    /// Quantized transformed increment `1 - e^{-kappa}` for moving robots.
    pub dt_move_q: u64,
    pub control_density: usize,
    /// Per robot: the regular control sample grid shared by all nodes.
    pub control_samples: Vec<Vec<Vec<f64>>>,
    per_robot: Vec<Vec<RobotSuccessors>>,
}

impl StageDynamics {
    /// Computes per-robot successor structures for a whole stage, with
    /// goal-proximate robots frozen at their node.
    pub fn build(
        stage: &GridStage,
        scenario: &Scenario,
        control_density: usize,
    ) -> Result<StageDynamics> {
        Self::build_inner(stage, scenario, control_density, true)
    }

    /// Variant with no goal freezing: every node gets the sampled,
    /// fattened image. Used by the space-time oracle for the moving
    /// branch of goal-proximate robots.
    pub fn build_unfrozen(
        stage: &GridStage,
        scenario: &Scenario,
        control_density: usize,
    ) -> Result<StageDynamics> {
        Self::build_inner(stage, scenario, control_density, false)
    }

    fn build_inner(
        stage: &GridStage,
        scenario: &Scenario,
        control_density: usize,
        freeze_proximate: bool,
    ) -> Result<StageDynamics> {
        let (m_plus, l_plus) = scenario.team_bounds();
        let a = alpha(stage.h, stage.eps, l_plus, m_plus);
        let k = kappa(stage.h, stage.eps)?;
        let dt_move_q = kruzhkov_q(k)?;
        let mut control_samples = Vec::with_capacity(scenario.robot_count());
        let mut per_robot = Vec::with_capacity(scenario.robot_count());
        for r in 0..scenario.robot_count() {
            let robot = &scenario.robots[r];
            let samples = grid_samples(&robot.control_box, control_density);
            let count = stage.robot_node_count(r);
            let entries: Vec<RobotSuccessors> = (0..count)
                .into_par_iter()
                .map(|idx| {
                    let idx = idx as u32;
                    if freeze_proximate && stage.robot_is_goal_proximate(r, idx) {
                        return RobotSuccessors {
                            frozen: true,
                            images: Vec::new(),
                            merged: vec![idx],
                        };
                    }
                    let x = stage.robot_position(r, idx);
                    let mut images = Vec::with_capacity(samples.len());
                    let mut merged: Vec<u32> = Vec::new();
                    for u in &samples {
                        let f = eval_dynamics(robot, x, u).expect("sampled control is admissible");
                        let endpoint: Vec<f64> = x
                            .iter()
                            .zip(&f)
                            .map(|(xi, fi)| xi + stage.eps * fi)
                            .collect();
                        let nodes = stage.robot_nodes_within(r, &endpoint, a);
                        merged.extend_from_slice(&nodes);
                        images.push(nodes);
                    }
                    merged.sort_unstable();
                    merged.dedup();
                    RobotSuccessors {
                        frozen: false,
                        images,
                        merged,
                    }
                })
                .collect();
            control_samples.push(samples);
            per_robot.push(entries);
        }
        Ok(StageDynamics {
            alpha: a,
            kappa: k,
            dt_move_q,
            control_density,
            control_samples,
            per_robot,
        })
    }

    pub fn robot(&self, r: usize, idx: u32) -> &RobotSuccessors {
        &self.per_robot[r][idx as usize]
    }

    /// The set-valued one-step image of a joint node, as a lazy view.
    pub fn successors<'a>(
        &'a self,
        stage: &'a GridStage,
        safety: &'a SafetySet,
        node: NodeId,
    ) -> SuccessorSet<'a> {
        let idxs = stage.decode(node);
        let per_robot: Vec<&RobotSuccessors> = idxs
            .iter()
            .enumerate()
            .map(|(r, &i)| self.robot(r, i))
            .collect();
        SuccessorSet {
            node,
            stage,
            safety,
            dynamics: self,
            per_robot,
        }
    }

    /// Kruzhkov-transformed minimal time increment at a node: 0 for
    /// goal-proximate robots, `1 - e^{-kappa}` otherwise.
    pub fn time_increment(&self, stage: &GridStage, node: NodeId) -> TimeVec {
        let idxs = stage.decode(node);
        TimeVec::from_quantized(idxs.iter().enumerate().map(|(r, &i)| {
            if stage.robot_is_goal_proximate(r, i) {
                0
            } else {
                self.dt_move_q
            }
        }))
    }
}

/// Joint successor view of one node: product of per-robot images
/// intersected with the safety nodes.
pub struct SuccessorSet<'a> {
    pub node: NodeId,
    stage: &'a GridStage,
    safety: &'a SafetySet,
    dynamics: &'a StageDynamics,
    pub per_robot: Vec<&'a RobotSuccessors>,
}

impl<'a> SuccessorSet<'a> {
    pub fn stage(&self) -> &'a GridStage {
        self.stage
    }

    pub fn all_frozen(&self) -> bool {
        self.per_robot.iter().all(|r| r.frozen)
    }

    /// Visits every joint successor node (ascending per-robot index
    /// order, hence deterministic).
    pub fn for_each(&self, mut f: impl FnMut(NodeId)) {
        let lists: Vec<&[u32]> = self.per_robot.iter().map(|r| r.merged.as_slice()).collect();
        if lists.iter().any(|l| l.is_empty()) {
            return;
        }
        let mut cursor = vec![0usize; lists.len()];
        let mut per = vec![0u32; lists.len()];
        'outer: loop {
            for (r, &c) in cursor.iter().enumerate() {
                per[r] = lists[r][c];
            }
            let id = self.stage.encode(&per);
            if self.safety.contains(id) {
                f(id);
            }
            let mut d = lists.len();
            loop {
                if d == 0 {
                    break 'outer;
                }
                d -= 1;
                cursor[d] += 1;
                if cursor[d] < lists[d].len() {
                    break;
                }
                cursor[d] = 0;
            }
        }
    }

    /// Materialized merged successor node set, ascending.
    pub fn joint_nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.for_each(|id| out.push(id));
        out.sort_unstable();
        out
    }

    /// Control samples of robot `r` whose image contains per-robot node
    /// index `idx` (empty when the robot is frozen).
    pub fn controls_reaching(&self, r: usize, idx: u32) -> Vec<u16> {
        let rs = self.per_robot[r];
        rs.images
            .iter()
            .enumerate()
            .filter(|(_, nodes)| nodes.binary_search(&idx).is_ok())
            .map(|(k, _)| k as u16)
            .collect()
    }

    pub fn control_sample(&self, r: usize, k: u16) -> &[f64] {
        &self.dynamics.control_samples[r][k as usize]
    }
}
