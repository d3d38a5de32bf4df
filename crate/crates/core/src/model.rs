//! Robot dynamics, team configuration, and region membership predicates.
//!
//! A scenario is a team of robots, each with its own state box, obstacle
//! and goal regions, plus an inter-robot safety distance `sigma`. All
//! region queries are exact box arithmetic; distances are 2-norm. Types
//! are immutable after construction and safe to share across threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{AxisBox, Region};

/// Dynamics family of one robot.
///
/// `CustomAffine` covers data-driven models `f(x, u) = A x + B u + c`
/// so scenarios never embed code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DynamicsKind {
    SingleIntegrator2d,
    Unicycle,
    CustomAffine {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<f64>,
    },
}

impl DynamicsKind {
    pub fn state_dim(&self) -> usize {
        match self {
            DynamicsKind::SingleIntegrator2d => 2,
            DynamicsKind::Unicycle => 2,
            DynamicsKind::CustomAffine { c, .. } => c.len(),
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            DynamicsKind::SingleIntegrator2d => 2,
            DynamicsKind::Unicycle => 2, // (heading rad, speed m/s)
            DynamicsKind::CustomAffine { b, .. } => {
                b.first().map(|row| row.len()).unwrap_or(0)
            }
        }
    }
}

/// One robot: dynamics family, admissible control box, and the bounds
/// `speed_bound` (max norm of f over X_i x U_i) and `lipschitz` (Lipschitz
/// constant of the set-valued map F_i) that the discretization consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSpec {
    pub id: usize,
    pub dynamics: DynamicsKind,
    pub control_box: AxisBox,
    pub speed_bound: f64,
    pub lipschitz: f64,
}

impl RobotSpec {
    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    fn validate(&self) -> Result<()> {
        if self.control_box.dim() != self.control_dim() {
            return Err(Error::validation(format!(
                "robot {}: control_box dim {} does not match dynamics control dim {}",
                self.id,
                self.control_box.dim(),
                self.control_dim()
            )));
        }
        if !(self.speed_bound > 0.0) {
            return Err(Error::validation(format!(
                "robot {}: speed_bound must be positive",
                self.id
            )));
        }
        if !(self.lipschitz >= 0.0) {
            return Err(Error::validation(format!(
                "robot {}: lipschitz must be nonnegative",
                self.id
            )));
        }
        if let DynamicsKind::CustomAffine { a, b, c } = &self.dynamics {
            let d = c.len();
            if a.len() != d || a.iter().any(|row| row.len() != d) {
                return Err(Error::validation(format!("robot {}: A must be {d}x{d}", self.id)));
            }
            if b.len() != d {
                return Err(Error::validation(format!("robot {}: B must have {d} rows", self.id)));
            }
            let m = b[0].len();
            if b.iter().any(|row| row.len() != m) || m == 0 {
                return Err(Error::validation(format!("robot {}: B rows must be equal nonzero length", self.id)));
            }
        }
        Ok(())
    }
}

/// A team scenario: per-robot state boxes, obstacle and goal regions,
/// and the inter-robot safety distance `sigma` (m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub robots: Vec<RobotSpec>,
    pub state_boxes: Vec<AxisBox>,
    pub obstacles: Vec<Region>,
    pub goals: Vec<Region>,
    pub sigma: f64,
    /// Optional default start states for the simulator.
    #[serde(default)]
    pub starts: Option<Vec<Vec<f64>>>,
}

/// Per-robot state vectors for the whole team.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamState {
    pub robots: Vec<Vec<f64>>,
}

impl TeamState {
    pub fn new(robots: Vec<Vec<f64>>) -> Self {
        TeamState { robots }
    }

    pub fn robot(&self, i: usize) -> &[f64] {
        &self.robots[i]
    }

    pub fn len(&self) -> usize {
        self.robots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.robots.is_empty()
    }
}

impl Scenario {
    pub fn robot_count(&self) -> usize {
        self.robots.len()
    }

    /// Checks all load-time invariants and returns the scenario by value.
    ///
    /// Rejects: dimension mismatches, goals intersecting obstacles, and
    /// goal regions of distinct robots closer than `sigma`.
    pub fn validated(self) -> Result<Scenario> {
        if self.robots.is_empty() {
            return Err(Error::validation("scenario has no robots"));
        }
        if self.state_boxes.len() != self.robots.len()
            || self.obstacles.len() != self.robots.len()
            || self.goals.len() != self.robots.len()
        {
            return Err(Error::validation(
                "state_boxes, obstacles and goals must each have one entry per robot",
            ));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::validation("sigma must be positive"));
        }
        for (i, r) in self.robots.iter().enumerate() {
            if r.id != i {
                return Err(Error::validation(format!(
                    "robot ids must be 0..N in order; robot at index {i} has id {}",
                    r.id
                )));
            }
            r.validate()?;
            let d = r.state_dim();
            if self.state_boxes[i].dim() != d {
                return Err(Error::validation(format!(
                    "robot {i}: state_box dim {} != state dim {d}",
                    self.state_boxes[i].dim()
                )));
            }
            for b in &self.obstacles[i].boxes {
                if b.dim() != d {
                    return Err(Error::validation(format!("robot {i}: obstacle box dim mismatch")));
                }
            }
            if self.goals[i].is_empty() {
                return Err(Error::validation(format!("robot {i}: goal region is empty")));
            }
            for b in &self.goals[i].boxes {
                if b.dim() != d {
                    return Err(Error::validation(format!("robot {i}: goal box dim mismatch")));
                }
            }
            if self.goals[i].intersects(&self.obstacles[i]) {
                return Err(Error::validation(format!(
                    "robot {i}: goal region intersects obstacle region (X^G and X^O must be disjoint)"
                )));
            }
        }
        // Pairwise clauses require a common state dimension.
        let d0 = self.robots[0].state_dim();
        if self.robots.len() > 1 && self.robots.iter().any(|r| r.state_dim() != d0) {
            return Err(Error::validation(
                "multi-robot scenarios require equal state dimensions for pairwise distances",
            ));
        }
        for i in 0..self.robots.len() {
            for j in (i + 1)..self.robots.len() {
                let d = self.goals[i].region_distance(&self.goals[j]);
                if d < self.sigma {
                    return Err(Error::validation(format!(
                        "goal separation violated: d(X^G_{i}, X^G_{j}) = {d:.6} < sigma = {}",
                        self.sigma
                    )));
                }
            }
        }
        if let Some(starts) = &self.starts {
            if starts.len() != self.robots.len() {
                return Err(Error::validation("starts must have one state per robot"));
            }
            for (i, s) in starts.iter().enumerate() {
                if s.len() != self.robots[i].state_dim() {
                    return Err(Error::validation(format!("start state dim mismatch for robot {i}")));
                }
            }
        }
        Ok(self)
    }

    /// `M+ = sqrt(sum M_i^2)`, `l+ = sqrt(sum l_i^2)`.
    pub fn team_bounds(&self) -> (f64, f64) {
        let m = self.robots.iter().map(|r| r.speed_bound * r.speed_bound).sum::<f64>().sqrt();
        let l = self.robots.iter().map(|r| r.lipschitz * r.lipschitz).sum::<f64>().sqrt();
        (m, l)
    }

    pub fn in_obstacle(&self, i: usize, x: &[f64]) -> bool {
        self.obstacles[i].contains(x)
    }

    pub fn in_goal(&self, i: usize, x: &[f64]) -> bool {
        self.goals[i].contains(x)
    }

    pub fn goal_distance(&self, i: usize, x: &[f64]) -> f64 {
        self.goals[i].distance(x)
    }

    /// Free-region membership for robot `i`: inside its state box, outside
    /// its obstacles, and at least `sigma` away from every other robot's
    /// goal region (the goal-standoff clause of X^F_i).
    pub fn in_free(&self, i: usize, x: &[f64]) -> bool {
        if !self.state_boxes[i].contains(x) || self.obstacles[i].contains(x) {
            return false;
        }
        for j in 0..self.robots.len() {
            if j != i && self.goals[j].distance(x) < self.sigma {
                return false;
            }
        }
        true
    }

    /// Joint safety-region membership: every robot in its free region and
    /// all pairwise distances at least `sigma` (boundary inclusive).
    pub fn in_safety(&self, state: &TeamState) -> bool {
        debug_assert_eq!(state.len(), self.robots.len());
        for i in 0..self.robots.len() {
            if !self.in_free(i, state.robot(i)) {
                return false;
            }
        }
        for i in 0..self.robots.len() {
            for j in (i + 1)..self.robots.len() {
                if pair_distance(state.robot(i), state.robot(j)) < self.sigma {
                    return false;
                }
            }
        }
        true
    }

    /// Joint 2-norm distance from a team state to the product goal region:
    /// sqrt(sum_i d(x_i, X^G_i)^2).
    pub fn joint_goal_distance(&self, state: &TeamState) -> f64 {
        state
            .robots
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let d = self.goals[i].distance(x);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Sampling audit of the user-supplied speed bound: evaluates `f` on a
    /// dense regular grid of X_i x U_i and checks `|f| <= M_i + tol`.
    pub fn audit_speed_bound(&self, i: usize, samples_per_dim: usize, tol: f64) -> Result<()> {
        let r = &self.robots[i];
        let sb = &self.state_boxes[i];
        let cb = &r.control_box;
        let xs = grid_samples(sb, samples_per_dim);
        let us = grid_samples(cb, samples_per_dim);
        for x in &xs {
            for u in &us {
                let f = eval_dynamics(r, x, u)?;
                let n = norm(&f);
                if n > r.speed_bound + tol {
                    return Err(Error::validation(format!(
                        "robot {i}: |f(x,u)| = {n:.9} exceeds speed_bound {} at x={x:?} u={u:?}",
                        r.speed_bound
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn pair_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Evaluates `f_i(x, u)` for one robot.
///
/// Errors if the control is outside the robot's control box.
pub fn eval_dynamics(robot: &RobotSpec, state: &[f64], control: &[f64]) -> Result<Vec<f64>> {
    if control.len() != robot.control_dim() {
        return Err(Error::domain(format!(
            "robot {}: control dim {} != {}",
            robot.id,
            control.len(),
            robot.control_dim()
        )));
    }
    if !robot.control_box.contains(control) {
        return Err(Error::domain(format!(
            "robot {}: control {control:?} outside control_box",
            robot.id
        )));
    }
    if state.len() != robot.state_dim() {
        return Err(Error::domain(format!(
            "robot {}: state dim {} != {}",
            robot.id,
            state.len(),
            robot.state_dim()
        )));
    }
    Ok(match &robot.dynamics {
        DynamicsKind::SingleIntegrator2d => vec![control[0], control[1]],
        DynamicsKind::Unicycle => {
            let (theta, v) = (control[0], control[1]);
            vec![v * theta.cos(), v * theta.sin()]
        }
        DynamicsKind::CustomAffine { a, b, c } => {
            let d = c.len();
            let mut out = c.clone();
            for (row, o) in a.iter().zip(out.iter_mut()).take(d) {
                *o += row.iter().zip(state).map(|(aij, xj)| aij * xj).sum::<f64>();
            }
            for (row, o) in b.iter().zip(out.iter_mut()).take(d) {
                *o += row.iter().zip(control).map(|(bij, uj)| bij * uj).sum::<f64>();
            }
            out
        }
    })
}

/// Regular grid over a box, endpoints included (midpoint when n == 1).
pub fn grid_samples(b: &AxisBox, n: usize) -> Vec<Vec<f64>> {
    let n = n.max(1);
    let axes: Vec<Vec<f64>> = (0..b.dim())
        .map(|d| {
            let (lo, hi) = (b.min[d], b.max[d]);
            if n == 1 || hi == lo {
                vec![0.5 * (lo + hi)]
            } else {
                (0..n)
                    .map(|k| lo + (hi - lo) * (k as f64) / ((n - 1) as f64))
                    .collect()
            }
        })
        .collect();
    let mut out = vec![Vec::new()];
    for axis in &axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for prefix in &out {
            for v in axis {
                let mut p = prefix.clone();
                p.push(*v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}
