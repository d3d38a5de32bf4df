//! Multi-resolution discretization of per-robot and joint state spaces.
//!
//! Per-robot lattices are product lattices anchored at the state-box
//! minimum with spacing `h_p` (the box maximum is appended when the extent
//! is not a multiple of `h_p`, so coverage holds). Joint nodes are the
//! Cartesian product across robots, addressed by a packed `NodeId` and
//! never fully materialized beyond what a query needs. Dyadic refinement
//! with a shared anchor makes consecutive stages nested.

use bitvec::vec::BitVec;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{pair_distance, Scenario, TeamState};

/// Packed per-robot lattice coordinates for one joint node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

#[derive(Debug, Clone)]
struct LatticeAxis {
    min: f64,
    h: f64,
    regular: usize,
    extra_max: Option<f64>,
}

impl LatticeAxis {
    fn build(lo: f64, hi: f64, h: f64) -> Self {
        let span = hi - lo;
        let k = (span / h + 1e-9).floor().max(0.0) as usize;
        let last = lo + k as f64 * h;
        let extra = if hi - last > 1e-9 * (1.0 + span.abs()) {
            Some(hi)
        } else {
            None
        };
        LatticeAxis {
            min: lo,
            h,
            regular: k + 1,
            extra_max: extra,
        }
    }

    fn count(&self) -> usize {
        self.regular + usize::from(self.extra_max.is_some())
    }

    fn coord(&self, i: usize) -> f64 {
        if i < self.regular {
            self.min + i as f64 * self.h
        } else {
            self.extra_max.unwrap()
        }
    }

    fn nearest(&self, v: f64) -> usize {
        let k = ((v - self.min) / self.h).round();
        let k = k.clamp(0.0, (self.regular - 1) as f64) as usize;
        match self.extra_max {
            Some(m) if (v - m).abs() < (v - self.coord(k)).abs() => self.regular,
            _ => k,
        }
    }

    /// Indices with coordinate in `[lo, hi]`.
    fn indices_within(&self, lo: f64, hi: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if hi < lo {
            return out;
        }
        let first = ((lo - self.min) / self.h - 1e-12).ceil().max(0.0) as usize;
        let last_f = ((hi - self.min) / self.h + 1e-12).floor();
        if last_f >= 0.0 {
            let last = (last_f as usize).min(self.regular - 1);
            for i in first..=last {
                if i < self.regular {
                    out.push(i);
                }
            }
        }
        if let Some(m) = self.extra_max {
            if m >= lo && m <= hi {
                out.push(self.regular);
            }
        }
        out
    }

    /// Exact index of a coordinate already on the lattice, if any.
    fn index_of(&self, v: f64, tol: f64) -> Option<usize> {
        let k = ((v - self.min) / self.h).round();
        if k >= 0.0 && (k as usize) < self.regular && (self.coord(k as usize) - v).abs() <= tol {
            return Some(k as usize);
        }
        match self.extra_max {
            Some(m) if (m - v).abs() <= tol => Some(self.regular),
            _ => None,
        }
    }
}

/// Product lattice over one robot's state box.
#[derive(Debug, Clone)]
pub struct RobotLattice {
    axes: Vec<LatticeAxis>,
    node_count: usize,
}

impl RobotLattice {
    fn build(box_min: &[f64], box_max: &[f64], h: f64) -> Self {
        let axes: Vec<LatticeAxis> = box_min
            .iter()
            .zip(box_max)
            .map(|(lo, hi)| LatticeAxis::build(*lo, *hi, h))
            .collect();
        let node_count = axes.iter().map(|a| a.count()).product();
        RobotLattice { axes, node_count }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn position(&self, idx: usize) -> Vec<f64> {
        let mut rem = idx;
        let mut out = vec![0.0; self.axes.len()];
        for (d, axis) in self.axes.iter().enumerate().rev() {
            let c = axis.count();
            out[d] = axis.coord(rem % c);
            rem /= c;
        }
        out
    }

    fn encode(&self, coords: &[usize]) -> usize {
        let mut idx = 0usize;
        for (axis, &c) in self.axes.iter().zip(coords) {
            idx = idx * axis.count() + c;
        }
        idx
    }

    pub fn nearest_index(&self, x: &[f64]) -> usize {
        let coords: Vec<usize> = self.axes.iter().zip(x).map(|(a, v)| a.nearest(*v)).collect();
        self.encode(&coords)
    }

    /// Node indices within 2-norm `radius` of `center` (per-axis windows,
    /// then exact filtering).
    pub fn indices_within(&self, center: &[f64], radius: f64) -> Vec<u32> {
        let windows: Vec<Vec<usize>> = self
            .axes
            .iter()
            .zip(center)
            .map(|(a, c)| a.indices_within(c - radius, c + radius))
            .collect();
        if windows.iter().any(|w| w.is_empty()) {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut cursor = vec![0usize; windows.len()];
        let r2 = radius * radius;
        'outer: loop {
            let mut d2 = 0.0;
            let mut idx = 0usize;
            for (d, axis) in self.axes.iter().enumerate() {
                let i = windows[d][cursor[d]];
                let gap = axis.coord(i) - center[d];
                d2 += gap * gap;
                idx = idx * axis.count() + i;
            }
            if d2 <= r2 * (1.0 + 1e-12) + 1e-300 {
                out.push(idx as u32);
            }
            let mut d = windows.len();
            loop {
                if d == 0 {
                    break 'outer;
                }
                d -= 1;
                cursor[d] += 1;
                if cursor[d] < windows[d].len() {
                    break;
                }
                cursor[d] = 0;
            }
        }
        out.sort_unstable();
        out
    }

    fn index_of_position(&self, x: &[f64], tol: f64) -> Option<usize> {
        let mut coords = Vec::with_capacity(self.axes.len());
        for (a, v) in self.axes.iter().zip(x) {
            coords.push(a.index_of(*v, tol)?);
        }
        Some(self.encode(&coords))
    }
}

/// One stage of the multigrid hierarchy: spatial resolution `h`, temporal
/// resolution `eps`, per-robot lattices and their cached per-node
/// metadata (position, free-region flag, goal distance, goal proximity).
#[derive(Debug, Clone)]
pub struct GridStage {
    pub index: usize,
    pub h: f64,
    pub eps: f64,
    pub lattices: Vec<RobotLattice>,
    strides: Vec<u64>,
    counts: Vec<u64>,
    pub joint_count: u64,
    positions: Vec<Vec<f64>>,
    free: Vec<Vec<bool>>,
    goal_dist: Vec<Vec<f64>>,
    prox: Vec<Vec<bool>>,
    prox_nodes: Vec<Vec<u32>>,
    prox_threshold: Vec<f64>,
}

/// Builds a stage. `eps > 2h` is required by the schedule conditions.
pub fn build_stage(scenario: &Scenario, h: f64, eps: f64, index: usize) -> Result<GridStage> {
    if !(h > 0.0) || !(eps > 0.0) {
        return Err(Error::schedule("resolutions must be positive"));
    }
    if eps <= 2.0 * h {
        return Err(Error::schedule(format!(
            "temporal resolution must satisfy eps > 2h (eps={eps}, h={h})"
        )));
    }
    let lattices: Vec<RobotLattice> = scenario
        .state_boxes
        .iter()
        .map(|b| RobotLattice::build(&b.min, &b.max, h))
        .collect();
    let n = lattices.len();
    let counts: Vec<u64> = lattices.iter().map(|l| l.node_count() as u64).collect();
    let mut strides = vec![1u64; n];
    for r in (0..n.saturating_sub(1)).rev() {
        strides[r] = strides[r + 1] * counts[r + 1];
    }
    let joint_count = counts.iter().product();

    let mut positions = Vec::with_capacity(n);
    let mut free = Vec::with_capacity(n);
    let mut goal_dist = Vec::with_capacity(n);
    let mut prox = Vec::with_capacity(n);
    let mut prox_nodes = Vec::with_capacity(n);
    let mut prox_threshold = Vec::with_capacity(n);
    for (r, lat) in lattices.iter().enumerate() {
        let dim = lat.dim();
        let thr = scenario.robots[r].speed_bound * eps + h;
        let mut pos = Vec::with_capacity(lat.node_count() * dim);
        let mut fr = Vec::with_capacity(lat.node_count());
        let mut gd = Vec::with_capacity(lat.node_count());
        let mut px = Vec::with_capacity(lat.node_count());
        let mut pn = Vec::new();
        for i in 0..lat.node_count() {
            let p = lat.position(i);
            fr.push(scenario.in_free(r, &p));
            let d = scenario.goal_distance(r, &p);
            gd.push(d);
            let is_prox = d <= thr;
            px.push(is_prox);
            if is_prox {
                pn.push(i as u32);
            }
            pos.extend_from_slice(&p);
        }
        positions.push(pos);
        free.push(fr);
        goal_dist.push(gd);
        prox.push(px);
        prox_nodes.push(pn);
        prox_threshold.push(thr);
    }

    Ok(GridStage {
        index,
        h,
        eps,
        lattices,
        strides,
        counts,
        joint_count,
        positions,
        free,
        goal_dist,
        prox,
        prox_nodes,
        prox_threshold,
    })
}

impl GridStage {
    pub fn robot_count(&self) -> usize {
        self.lattices.len()
    }

    pub fn robot_node_count(&self, r: usize) -> usize {
        self.counts[r] as usize
    }

    pub fn decode(&self, id: NodeId) -> Vec<u32> {
        let mut rem = id.0;
        self.strides
            .iter()
            .zip(&self.counts)
            .map(|(s, c)| {
                let i = rem / s;
                rem %= s;
                debug_assert!(i < *c);
                i as u32
            })
            .collect()
    }

    pub fn encode(&self, per_robot: &[u32]) -> NodeId {
        debug_assert_eq!(per_robot.len(), self.strides.len());
        NodeId(
            per_robot
                .iter()
                .zip(&self.strides)
                .map(|(i, s)| *i as u64 * s)
                .sum(),
        )
    }

    pub fn robot_index_of(&self, id: NodeId, r: usize) -> u32 {
        ((id.0 / self.strides[r]) % self.counts[r]) as u32
    }

    pub fn robot_position(&self, r: usize, idx: u32) -> &[f64] {
        let d = self.lattices[r].dim();
        &self.positions[r][idx as usize * d..(idx as usize + 1) * d]
    }

    pub fn robot_is_free(&self, r: usize, idx: u32) -> bool {
        self.free[r][idx as usize]
    }

    pub fn robot_goal_distance(&self, r: usize, idx: u32) -> f64 {
        self.goal_dist[r][idx as usize]
    }

    pub fn robot_is_goal_proximate(&self, r: usize, idx: u32) -> bool {
        self.prox[r][idx as usize]
    }

    pub fn goal_proximity_threshold(&self, r: usize) -> f64 {
        self.prox_threshold[r]
    }

    pub fn team_state(&self, id: NodeId) -> TeamState {
        let idxs = self.decode(id);
        TeamState::new(
            idxs.iter()
                .enumerate()
                .map(|(r, &i)| self.robot_position(r, i).to_vec())
                .collect(),
        )
    }

    /// Exact safety membership of a joint node (no expansion): every robot
    /// free and pairwise distances at least sigma.
    pub fn node_in_safety(&self, scenario: &Scenario, per_robot: &[u32]) -> bool {
        for (r, &i) in per_robot.iter().enumerate() {
            if !self.free[r][i as usize] {
                return false;
            }
        }
        let n = per_robot.len();
        for i in 0..n {
            for j in (i + 1)..n {
                let pi = self.robot_position(i, per_robot[i]);
                let pj = self.robot_position(j, per_robot[j]);
                if pair_distance(pi, pj) < scenario.sigma {
                    return false;
                }
            }
        }
        true
    }

    /// Robots within one discrete hop (`M_i eps + h`) of their goal
    /// regions at this node.
    pub fn goal_proximity_set(&self, id: NodeId) -> Vec<usize> {
        self.decode(id)
            .iter()
            .enumerate()
            .filter(|(r, &i)| self.prox[*r][i as usize])
            .map(|(r, _)| r)
            .collect()
    }

    /// Equivalent nodes of `x`: nodes agreeing with `x` on every robot
    /// outside the goal-proximity set, with goal-proximate robots ranging
    /// over all goal-proximate lattice positions. Sorted ascending.
    pub fn equivalent_nodes(&self, id: NodeId) -> Vec<NodeId> {
        let idxs = self.decode(id);
        let mut choices: Vec<&[u32]> = Vec::with_capacity(idxs.len());
        let singles: Vec<[u32; 1]> = idxs.iter().map(|&i| [i]).collect();
        for (r, &i) in idxs.iter().enumerate() {
            if self.prox[r][i as usize] {
                choices.push(&self.prox_nodes[r]);
            } else {
                choices.push(&singles[r]);
            }
        }
        let mut out = Vec::new();
        let mut cursor = vec![0usize; choices.len()];
        'outer: loop {
            let per: Vec<u32> = cursor.iter().zip(&choices).map(|(&c, ch)| ch[c]).collect();
            out.push(self.encode(&per));
            let mut d = choices.len();
            loop {
                if d == 0 {
                    break 'outer;
                }
                d -= 1;
                cursor[d] += 1;
                if cursor[d] < choices[d].len() {
                    break;
                }
                cursor[d] = 0;
            }
        }
        out.sort_unstable();
        out
    }

    /// Per-robot lattice indices within 2-norm `radius` of a point in
    /// robot `r`'s state space.
    pub fn robot_nodes_within(&self, r: usize, center: &[f64], radius: f64) -> Vec<u32> {
        self.lattices[r].indices_within(center, radius)
    }

    /// Joint lattice nodes within 2-norm `radius` of `center` in the joint
    /// space (per-robot windows, exact joint filter). Sorted ascending.
    pub fn nodes_within(&self, center: &TeamState, radius: f64) -> Vec<NodeId> {
        let windows: Vec<Vec<u32>> = (0..self.robot_count())
            .map(|r| self.robot_nodes_within(r, center.robot(r), radius))
            .collect();
        if windows.iter().any(|w| w.is_empty()) {
            return Vec::new();
        }
        let r2 = radius * radius;
        let mut out = Vec::new();
        let mut cursor = vec![0usize; windows.len()];
        'outer: loop {
            let mut d2 = 0.0;
            for (r, &c) in cursor.iter().enumerate() {
                let p = self.robot_position(r, windows[r][c]);
                let dd = pair_distance(p, center.robot(r));
                d2 += dd * dd;
            }
            if d2 <= r2 * (1.0 + 1e-12) + 1e-300 {
                let per: Vec<u32> = cursor.iter().zip(&windows).map(|(&c, w)| w[c]).collect();
                out.push(self.encode(&per));
            }
            let mut d = windows.len();
            loop {
                if d == 0 {
                    break 'outer;
                }
                d -= 1;
                cursor[d] += 1;
                if cursor[d] < windows[d].len() {
                    break;
                }
                cursor[d] = 0;
            }
        }
        out.sort_unstable();
        out
    }

    /// Joint distance from a point to a node.
    pub fn distance_to_node(&self, point: &TeamState, id: NodeId) -> f64 {
        let idxs = self.decode(id);
        idxs.iter()
            .enumerate()
            .map(|(r, &i)| {
                let d = pair_distance(self.robot_position(r, i), point.robot(r));
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Nearest node over an explicit restriction set; ties break to the
    /// lowest NodeId. Errors on an empty set.
    pub fn nearest_node(&self, point: &TeamState, restrict: &[NodeId]) -> Result<NodeId> {
        if restrict.is_empty() {
            return Err(Error::lookup("nearest_node: empty restrict set"));
        }
        let mut best = (f64::INFINITY, NodeId(u64::MAX));
        for &id in restrict {
            let d = self.distance_to_node(point, id);
            if d < best.0 || (d == best.0 && id < best.1) {
                best = (d, id);
            }
        }
        Ok(best.1)
    }

    /// Nearest node among those set in `bits`, via expanding lattice
    /// shells. Equivalent to a linear scan over the members of `bits`
    /// (ties to lowest id); used where scans would be too slow.
    pub fn nearest_node_in_bits(&self, point: &TeamState, bits: &BitVec) -> Option<NodeId> {
        let centers: Vec<Vec<usize>> = (0..self.robot_count())
            .map(|r| {
                let lat = &self.lattices[r];
                lat.axes
                    .iter()
                    .zip(point.robot(r))
                    .map(|(a, v)| a.nearest(*v))
                    .collect()
            })
            .collect();
        let max_extent = self
            .lattices
            .iter()
            .flat_map(|l| l.axes.iter().map(|a| a.count()))
            .max()
            .unwrap_or(1);
        let mut best: Option<(f64, NodeId)> = None;
        for radius in 0..=max_extent {
            self.scan_shell(&centers, radius, bits, point, &mut best);
            if let Some((d, _)) = best {
                if d <= (radius as f64 - 0.5) * self.h {
                    break;
                }
            }
        }
        best.map(|(_, id)| id)
    }

    fn scan_shell(
        &self,
        centers: &[Vec<usize>],
        radius: usize,
        bits: &BitVec,
        point: &TeamState,
        best: &mut Option<(f64, NodeId)>,
    ) {
        // axis-index windows of half-width `radius` around the center
        let mut windows: Vec<(usize, Vec<usize>)> = Vec::new(); // (axis count, indices)
        for (r, lat) in self.lattices.iter().enumerate() {
            for (d, axis) in lat.axes.iter().enumerate() {
                let c = centers[r][d] as i64;
                let lo = (c - radius as i64).max(0) as usize;
                let hi = ((c + radius as i64) as usize).min(axis.count() - 1);
                windows.push((centers[r][d], (lo..=hi).collect()));
            }
        }
        let axis_meta: Vec<(usize, usize)> = {
            // (robot, axis dim) per flattened axis
            let mut v = Vec::new();
            for (r, lat) in self.lattices.iter().enumerate() {
                for d in 0..lat.dim() {
                    v.push((r, d));
                }
            }
            v
        };
        let mut cursor = vec![0usize; windows.len()];
        'outer: loop {
            // Chebyshev index distance must equal `radius` (shell only).
            let mut cheb = 0usize;
            for (a, (center, idxs)) in windows.iter().enumerate() {
                let off = idxs[cursor[a]].abs_diff(*center);
                cheb = cheb.max(off);
                let _ = a;
            }
            if cheb == radius {
                // assemble per-robot indices
                let mut per = vec![0u32; self.robot_count()];
                let mut per_coords: Vec<Vec<usize>> =
                    self.lattices.iter().map(|l| vec![0usize; l.dim()]).collect();
                for (a, (_c, idxs)) in windows.iter().enumerate() {
                    let (r, d) = axis_meta[a];
                    per_coords[r][d] = idxs[cursor[a]];
                }
                for (r, lat) in self.lattices.iter().enumerate() {
                    per[r] = lat.encode(&per_coords[r]) as u32;
                }
                let id = self.encode(&per);
                if bits[id.0 as usize] {
                    let d = self.distance_to_node(point, id);
                    let better = match best {
                        None => true,
                        Some((bd, bid)) => d < *bd || (d == *bd && id < *bid),
                    };
                    if better {
                        *best = Some((d, id));
                    }
                }
            }
            let mut d = windows.len();
            loop {
                if d == 0 {
                    break 'outer;
                }
                d -= 1;
                cursor[d] += 1;
                if cursor[d] < windows[d].1.len() {
                    break;
                }
                cursor[d] = 0;
            }
        }
    }

    /// Maps a node of this stage to the node of `prev` at the identical
    /// position, when one exists.
    pub fn map_to_stage(&self, other: &GridStage, id: NodeId) -> Option<NodeId> {
        let tol = 1e-9 * (1.0 + self.h);
        let idxs = self.decode(id);
        let mut per = Vec::with_capacity(idxs.len());
        for (r, &i) in idxs.iter().enumerate() {
            let pos = self.robot_position(r, i);
            per.push(other.lattices[r].index_of_position(pos, tol)? as u32);
        }
        Some(other.encode(&per))
    }
}

/// The discretized safety region `S^p`: sorted member ids plus a joint
/// bitset for O(1) membership.
#[derive(Debug, Clone)]
pub struct SafetySet {
    pub ids: Vec<NodeId>,
    pub bits: BitVec,
    pub expanded: bool,
}

impl SafetySet {
    pub fn contains(&self, id: NodeId) -> bool {
        self.bits[id.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Builds `S^p`. With `expand` false this is `S intersect X^p` (the
/// simulation choice); with `expand` true, nodes within `h_p` of the
/// safety region in the joint 2-norm are also admitted, established by
/// exhibiting a repaired witness state.
pub fn safety_nodes(stage: &GridStage, scenario: &Scenario, expand: bool) -> SafetySet {
    let total = stage.joint_count as usize;
    let members: Vec<bool> = (0..total)
        .into_par_iter()
        .map(|i| {
            let id = NodeId(i as u64);
            let per = stage.decode(id);
            if stage.node_in_safety(scenario, &per) {
                return true;
            }
            if expand {
                let st = stage.team_state(id);
                return expanded_member(scenario, stage.h, &st);
            }
            false
        })
        .collect();
    let mut bits = BitVec::repeat(false, total);
    let mut ids = Vec::new();
    for (i, m) in members.iter().enumerate() {
        if *m {
            bits.set(i, true);
            ids.push(NodeId(i as u64));
        }
    }
    SafetySet {
        ids,
        bits,
        expanded: expand,
    }
}

/// Witness-based test of `d(x, S) <= delta`: tries to repair free-region
/// violations by projecting each robot and pairwise violations by
/// symmetric separation, then checks the witness lands in `S` within the
/// allowed joint displacement. Sound (never admits a node farther than
/// `delta`); borderline compound violations may be missed.
fn expanded_member(scenario: &Scenario, delta: f64, state: &TeamState) -> bool {
    let n = state.len();
    let mut witness: Vec<Vec<f64>> = state.robots.clone();
    for pass in 0..4 {
        // per-robot free-region repair
        for i in 0..n {
            if !scenario.in_free(i, &witness[i]) {
                if let Some(fixed) = project_to_free(scenario, i, &witness[i]) {
                    witness[i] = fixed;
                }
            }
        }
        // pairwise separation repair
        let mut any_pair = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = pair_distance(&witness[i], &witness[j]);
                if d < scenario.sigma {
                    any_pair = true;
                    let need = (scenario.sigma - d) / 2.0 + 1e-12;
                    let dir: Vec<f64> = if d > 1e-12 {
                        witness[i]
                            .iter()
                            .zip(&witness[j])
                            .map(|(a, b)| (a - b) / d)
                            .collect()
                    } else {
                        let mut e = vec![0.0; witness[i].len()];
                        e[0] = 1.0;
                        e
                    };
                    for k in 0..witness[i].len() {
                        witness[i][k] += dir[k] * need;
                        witness[j][k] -= dir[k] * need;
                    }
                }
            }
        }
        if !any_pair && pass > 0 {
            break;
        }
    }
    let w = TeamState::new(witness.clone());
    if !scenario.in_safety(&w) {
        return false;
    }
    let moved: f64 = state
        .robots
        .iter()
        .zip(&witness)
        .map(|(a, b)| {
            let d = pair_distance(a, b);
            d * d
        })
        .sum::<f64>()
        .sqrt();
    moved <= delta * (1.0 + 1e-9)
}

/// Nearest free-region point candidates: obstacle face projections and
/// radial standoff pushes, filtered to the free region.
fn project_to_free(scenario: &Scenario, i: usize, x: &[f64]) -> Option<Vec<f64>> {
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    let clamped = scenario.state_boxes[i].project(x);
    candidates.push(clamped.clone());
    for b in &scenario.obstacles[i].boxes {
        if b.contains(&clamped) {
            // push out through each face
            for d in 0..b.dim() {
                let mut lo = clamped.clone();
                lo[d] = b.min[d] - 1e-12;
                candidates.push(lo);
                let mut hi = clamped.clone();
                hi[d] = b.max[d] + 1e-12;
                candidates.push(hi);
            }
        }
    }
    for j in 0..scenario.robots.len() {
        if j == i {
            continue;
        }
        for gb in &scenario.goals[j].boxes {
            let d = gb.distance(&clamped);
            if d < scenario.sigma {
                let p = gb.project(&clamped);
                let dir: Vec<f64> = if d > 1e-12 {
                    clamped.iter().zip(&p).map(|(a, b)| (a - b) / d).collect()
                } else {
                    let mut e = vec![0.0; clamped.len()];
                    e[0] = 1.0;
                    e
                };
                let push = scenario.sigma + 1e-12;
                candidates.push(
                    p.iter()
                        .zip(&dir)
                        .map(|(pv, dv)| pv + dv * push)
                        .collect(),
                );
            }
        }
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for c in candidates {
        if scenario.in_free(i, &c) {
            let d = pair_distance(x, &c);
            if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, c));
            }
        }
    }
    best.map(|(_, c)| c)
}

/// Checks that every node of `coarse` maps onto a node of `fine` with
/// identical coordinates (grid nesting across consecutive stages).
pub fn validate_nesting(coarse: &GridStage, fine: &GridStage) -> Result<()> {
    for id in 0..coarse.joint_count {
        if coarse.map_to_stage(fine, NodeId(id)).is_none() {
            return Err(Error::schedule(format!(
                "grid nesting violated: stage {} node {id} missing from stage {}",
                coarse.index, fine.index
            )));
        }
    }
    Ok(())
}
