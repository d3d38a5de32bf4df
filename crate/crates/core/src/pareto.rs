//! Vector-order algebra on transformed arrival times: the Kruzhkov
//! transform, Pareto frontiers, epigraphical profiles, and Hausdorff
//! distances.
//!
//! Values live in `[0,1]^N` after the transform `t -> 1 - exp(-t)`; the
//! sentinel 1.0 encodes an infinite (infeasible) arrival time. Entries are
//! quantized to multiples of 2^-40 before they enter a frontier, so
//! fixed-point detection in the Bellman recursion is an exact integer
//! comparison rather than a float tolerance. The same frontier machinery
//! is reused by the viability oracle with entries interpreted as integer
//! time-lattice multiples (sentinel `u64::MAX`).

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Quantization grain: values are multiples of 2^-40.
pub const QUANT_BITS: u32 = 40;
/// Quantized representation of 1.0.
pub const QUANT_ONE: u64 = 1 << QUANT_BITS;

/// Rounds a transformed value in [0,1] to the quantization lattice.
pub fn quantize(x: f64) -> u64 {
    let clamped = x.clamp(0.0, 1.0);
    let q = (clamped * QUANT_ONE as f64).round() as u64;
    q.min(QUANT_ONE)
}

pub fn dequantize(q: u64) -> f64 {
    q as f64 / QUANT_ONE as f64
}

/// Kruzhkov transform `1 - exp(-t)`, mapping `[0, +inf]` onto `[0, 1]`.
pub fn kruzhkov(t: f64) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::domain(format!("kruzhkov: time {t} is negative")));
    }
    Ok(if t.is_infinite() { 1.0 } else { -(-t).exp_m1() })
}

/// Inverse transform `-ln(1 - tau)`; `tau = 1` maps to `+inf`.
pub fn kruzhkov_inv(tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::domain(format!("kruzhkov_inv: {tau} outside [0,1]")));
    }
    Ok(if tau >= 1.0 { f64::INFINITY } else { -(-tau).ln_1p() })
}

pub fn kruzhkov_q(t: f64) -> Result<u64> {
    Ok(quantize(kruzhkov(t)?))
}

/// One quantized combine step of the transformed Bellman algebra:
/// `d + t - d*t` (survival composition `1 - (1-d)(1-t)`).
///
/// The `d == 0` and saturation cases short-circuit so that goal-frozen
/// coordinates and the infeasible sentinel are preserved bit-exactly.
pub fn combine_q(d: u64, t: u64) -> u64 {
    if d == 0 {
        return t;
    }
    if t == 0 {
        return d;
    }
    if d >= QUANT_ONE || t >= QUANT_ONE {
        return QUANT_ONE;
    }
    let df = dequantize(d);
    let tf = dequantize(t);
    quantize(df + tf - df * tf)
}

/// An N-vector of quantized entries under the componentwise order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeVec(pub SmallVec<[u64; 2]>);

impl TimeVec {
    pub fn from_quantized(vals: impl IntoIterator<Item = u64>) -> Self {
        TimeVec(vals.into_iter().collect())
    }

    /// Kruzhkov-transforms and quantizes a vector of raw times.
    pub fn from_times(times: &[f64]) -> Result<Self> {
        let mut v = SmallVec::with_capacity(times.len());
        for t in times {
            v.push(kruzhkov_q(*t)?);
        }
        Ok(TimeVec(v))
    }

    pub fn zeros(n: usize) -> Self {
        TimeVec(std::iter::repeat(0).take(n).collect())
    }

    pub fn ones(n: usize) -> Self {
        TimeVec(std::iter::repeat(QUANT_ONE).take(n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> u64 {
        self.0[i]
    }

    pub fn to_f64s(&self) -> Vec<f64> {
        self.0.iter().map(|&q| dequantize(q)).collect()
    }

    /// Componentwise `<=`; callers must ensure equal lengths.
    pub fn leq(&self, other: &TimeVec) -> bool {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }
}

/// `a` dominates `b` in the product order (`a_i <= b_i` for all i).
pub fn dominates(a: &TimeVec, b: &TimeVec) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "dominates: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.leq(b))
}

/// A finite set of mutually non-dominated vectors, canonically sorted
/// lexicographically and deduplicated.
///
/// For N = 2 the canonical order doubles as a staircase (second coordinate
/// strictly decreasing), which makes insertion a binary search plus a
/// contiguous removal.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParetoSet {
    points: Vec<TimeVec>,
}

impl ParetoSet {
    pub fn singleton(v: TimeVec) -> Self {
        ParetoSet { points: vec![v] }
    }

    /// Frontier of a nonempty multiset: exactly the non-dominated
    /// elements, deduplicated.
    pub fn from_vectors(vecs: impl IntoIterator<Item = TimeVec>) -> Result<Self> {
        let mut s = ParetoSet::default();
        let mut any = false;
        for v in vecs {
            any = true;
            s.insert(v);
        }
        if !any {
            return Err(Error::domain("pareto_frontier: empty input"));
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[TimeVec] {
        &self.points
    }

    pub fn into_points(self) -> Vec<TimeVec> {
        self.points
    }

    /// Inserts a candidate, keeping the set a canonical frontier.
    /// Returns true when the set changed.
    pub fn insert(&mut self, v: TimeVec) -> bool {
        if self.points.is_empty() {
            self.points.push(v);
            return true;
        }
        debug_assert_eq!(self.points[0].len(), v.len());
        if v.len() == 2 {
            self.insert_staircase(v)
        } else {
            self.insert_generic(v)
        }
    }

    fn insert_staircase(&mut self, v: TimeVec) -> bool {
        let (x, y) = (v.get(0), v.get(1));
        // index of first point with first coordinate >= x
        let idx = self.points.partition_point(|p| p.get(0) < x);
        // a predecessor has smaller first coord; it dominates v iff its
        // second coord is <= y
        if idx > 0 && self.points[idx - 1].get(1) <= y {
            return false;
        }
        if idx < self.points.len() {
            let p = &self.points[idx];
            if p.get(0) == x && p.get(1) <= y {
                return false; // equal-or-dominating point at same column
            }
        }
        // points from idx on have first coord >= x; they are dominated
        // exactly while their second coord is >= y
        let mut end = idx;
        while end < self.points.len() && self.points[end].get(1) >= y {
            end += 1;
        }
        self.points.splice(idx..end, std::iter::once(v));
        true
    }

    fn insert_generic(&mut self, v: TimeVec) -> bool {
        if self.points.iter().any(|p| p.leq(&v)) {
            return false;
        }
        self.points.retain(|p| !v.leq(p));
        let idx = self.points.partition_point(|p| *p < v);
        self.points.insert(idx, v);
        true
    }

    /// Epigraphical-profile membership: some frontier element dominates `t`.
    pub fn epi_contains(&self, t: &TimeVec) -> bool {
        self.points.iter().any(|p| p.leq(t))
    }

    /// Componentwise quantized combine against a fixed increment, with
    /// frontier reduction. Order-preserving, so the frontier of the image
    /// is the image of the frontier.
    pub fn combine(&self, dt: &TimeVec) -> ParetoSet {
        let mut out = ParetoSet::default();
        for p in &self.points {
            let q = TimeVec(
                p.0.iter()
                    .zip(&dt.0)
                    .map(|(&t, &d)| combine_q(d, t))
                    .collect(),
            );
            out.insert(q);
        }
        out
    }
}

/// Frontier of a nonempty multiset of vectors.
pub fn pareto_frontier(vectors: impl IntoIterator<Item = TimeVec>) -> Result<ParetoSet> {
    ParetoSet::from_vectors(vectors)
}

/// Membership test for the epigraphical profile of a frontier.
pub fn epi_contains(frontier: &ParetoSet, t: &TimeVec) -> bool {
    frontier.epi_contains(t)
}

/// Hausdorff distance between two finite point sets (2-norm).
pub fn hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("hausdorff: empty point set"));
    }
    Ok(directed(a, b).max(directed(b, a)))
}

fn directed(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for p in a {
        let mut best = f64::INFINITY;
        for q in b {
            let d = p
                .iter()
                .zip(q)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if d < best {
                best = d;
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Hausdorff distance between the dequantized point sets of two frontiers.
pub fn hausdorff_frontiers(a: &ParetoSet, b: &ParetoSet) -> f64 {
    let ap: Vec<Vec<f64>> = a.points().iter().map(|p| p.to_f64s()).collect();
    let bp: Vec<Vec<f64>> = b.points().iter().map(|p| p.to_f64s()).collect();
    if ap.is_empty() || bp.is_empty() {
        return if ap.is_empty() == bp.is_empty() { 0.0 } else { f64::INFINITY };
    }
    directed(&ap, &bp).max(directed(&bp, &ap))
}

/// Exact Hausdorff distance between the epigraphical profiles of two
/// frontiers in `[0,1]^N`.
///
/// The distance from a point to an upper set `{t : t >= g}` is
/// `|(g - f)_+|`, and over a staircase profile the sup of point-to-set
/// distance is attained at the minimal elements, i.e. the frontier points.
/// So both directed distances reduce to max-min over frontier points with
/// the positive-part clamp, with no rasterization involved.
pub fn profile_distance(u: &ParetoSet, v: &ParetoSet) -> f64 {
    directed_profile(u, v).max(directed_profile(v, u))
}

fn directed_profile(u: &ParetoSet, v: &ParetoSet) -> f64 {
    let mut worst = 0.0f64;
    for f in u.points() {
        let ff = f.to_f64s();
        let mut best = f64::INFINITY;
        for g in v.points() {
            let gg = g.to_f64s();
            let d = ff
                .iter()
                .zip(&gg)
                .map(|(fi, gi)| {
                    let gap = (gi - fi).max(0.0);
                    gap * gap
                })
                .sum::<f64>()
                .sqrt();
            if d < best {
                best = d;
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Rasterized profile distance: Hausdorff distance between the two
/// profiles sampled on a regular `[0,1]^N` lattice with `samples` points
/// per axis. Deterministic for a fixed density; agrees with
/// [`profile_distance`] up to the lattice pitch.
pub fn sampled_profile_distance(u: &ParetoSet, v: &ParetoSet, samples: usize) -> Result<f64> {
    if samples < 2 {
        return Err(Error::domain("sampled_profile_distance: need at least 2 samples"));
    }
    if u.is_empty() || v.is_empty() {
        return Err(Error::domain("sampled_profile_distance: empty frontier"));
    }
    let n = u.points()[0].len();
    let pitch = 1.0 / (samples - 1) as f64;
    let mut grid = vec![0usize; n];
    let mut du = 0.0f64;
    let mut dv = 0.0f64;
    loop {
        let t: Vec<f64> = grid.iter().map(|&k| k as f64 * pitch).collect();
        let tq = TimeVec(t.iter().map(|&x| quantize(x)).collect());
        let in_u = u.epi_contains(&tq);
        let in_v = v.epi_contains(&tq);
        if in_u && !in_v {
            du = du.max(point_to_profile(&t, v));
        }
        if in_v && !in_u {
            dv = dv.max(point_to_profile(&t, u));
        }
        // odometer increment
        let mut axis = 0;
        loop {
            if axis == n {
                return Ok(du.max(dv));
            }
            grid[axis] += 1;
            if grid[axis] < samples {
                break;
            }
            grid[axis] = 0;
            axis += 1;
        }
    }
}

fn point_to_profile(t: &[f64], v: &ParetoSet) -> f64 {
    let mut best = f64::INFINITY;
    for g in v.points() {
        let gg = g.to_f64s();
        let d = t
            .iter()
            .zip(&gg)
            .map(|(ti, gi)| {
                let gap = (gi - ti).max(0.0);
                gap * gap
            })
            .sum::<f64>()
            .sqrt();
        best = best.min(d);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(vals: &[f64]) -> TimeVec {
        TimeVec(vals.iter().map(|&x| quantize(x)).collect())
    }

    #[test]
    fn kruzhkov_anchors() {
        assert_eq!(kruzhkov(0.0).unwrap(), 0.0);
        assert_eq!(kruzhkov(f64::INFINITY).unwrap(), 1.0);
        assert!((kruzhkov(2.0f64.ln()).unwrap() - 0.5).abs() < 1e-15);
        assert!(kruzhkov(-0.1).is_err());
        assert_eq!(kruzhkov_inv(1.0).unwrap(), f64::INFINITY);
        assert!((kruzhkov_inv(0.5).unwrap() - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dominance_examples() {
        assert!(dominates(&tv(&[0.1, 0.2]), &tv(&[0.1, 0.3])).unwrap());
        assert!(!dominates(&tv(&[0.1, 0.4]), &tv(&[0.2, 0.3])).unwrap());
        let a = tv(&[0.3, 0.3]);
        assert!(dominates(&a, &a).unwrap());
        assert!(dominates(&tv(&[0.1]), &tv(&[0.1, 0.2])).is_err());
    }

    #[test]
    fn frontier_keeps_non_dominated_only() {
        let s = ParetoSet::from_vectors(vec![tv(&[0.1, 0.2]), tv(&[0.2, 0.1]), tv(&[0.2, 0.2])])
            .unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.points().contains(&tv(&[0.1, 0.2])));
        assert!(s.points().contains(&tv(&[0.2, 0.1])));

        let chain = ParetoSet::from_vectors(vec![tv(&[0.1, 0.1]), tv(&[0.2, 0.2]), tv(&[0.3, 0.3])])
            .unwrap();
        assert_eq!(chain.points(), &[tv(&[0.1, 0.1])]);

        assert!(ParetoSet::from_vectors(std::iter::empty()).is_err());
    }

    #[test]
    fn staircase_insert_handles_equal_columns() {
        let mut s = ParetoSet::default();
        s.insert(tv(&[0.2, 0.8]));
        assert!(!s.insert(tv(&[0.2, 0.9])));
        assert!(s.insert(tv(&[0.2, 0.5])));
        assert_eq!(s.points(), &[tv(&[0.2, 0.5])]);
    }

    #[test]
    fn epi_contains_examples() {
        let all = ParetoSet::singleton(tv(&[0.0, 0.0]));
        assert!(epi_contains(&all, &tv(&[0.9, 0.1])));
        let mid = ParetoSet::singleton(tv(&[0.5, 0.5]));
        assert!(!epi_contains(&mid, &tv(&[0.4, 0.9])));
        let two = ParetoSet::from_vectors(vec![tv(&[0.2, 0.8]), tv(&[0.7, 0.3])]).unwrap();
        assert!(epi_contains(&two, &tv(&[0.7, 0.8])));
    }

    #[test]
    fn hausdorff_examples() {
        let a = vec![vec![0.0]];
        let b = vec![vec![1.0]];
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &b).unwrap(), 1.0);
        let p = vec![vec![0.0, 0.0]];
        let q = vec![vec![3.0, 4.0]];
        assert_eq!(hausdorff(&p, &q).unwrap(), 5.0);
        assert!(hausdorff(&[], &b).is_err());
    }

    #[test]
    fn profile_distance_examples() {
        let a = ParetoSet::from_vectors(vec![tv(&[0.0, 1.0]), tv(&[1.0, 0.0])]).unwrap();
        let b = ParetoSet::singleton(tv(&[0.0, 0.0]));
        assert_eq!(profile_distance(&a, &a), 0.0);
        assert!((profile_distance(&a, &b) - 1.0).abs() < 1e-12);

        let u = ParetoSet::singleton(tv(&[0.0]));
        let v = ParetoSet::singleton(tv(&[0.3]));
        assert!((profile_distance(&u, &v) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn sampled_profile_distance_tracks_exact_within_pitch() {
        let a = ParetoSet::from_vectors(vec![tv(&[0.0, 1.0]), tv(&[1.0, 0.0])]).unwrap();
        let b = ParetoSet::singleton(tv(&[0.0, 0.0]));
        let exact = profile_distance(&a, &b);
        let approx = sampled_profile_distance(&a, &b, 101).unwrap();
        assert!((exact - approx).abs() <= 0.02, "exact {exact} approx {approx}");
    }

    #[test]
    fn combine_preserves_zero_and_saturation_exactly() {
        assert_eq!(combine_q(0, 12345), 12345);
        assert_eq!(combine_q(777, 0), 777);
        assert_eq!(combine_q(777, QUANT_ONE), QUANT_ONE);
        assert_eq!(combine_q(QUANT_ONE, 777), QUANT_ONE);
        // survival composition: 1-(1-d)(1-t)
        let d = quantize(0.25);
        let t = quantize(0.5);
        assert_eq!(combine_q(d, t), quantize(0.625));
    }
}
