//! Axis-aligned boxes and finite unions of boxes.
//!
//! All region membership and distance queries are exact interval
//! arithmetic; distances are 2-norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A closed axis-aligned box `[min, max]` in d dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl AxisBox {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::validation("box min/max dimension mismatch"));
        }
        if min.is_empty() {
            return Err(Error::validation("box must have at least one dimension"));
        }
        for (d, (lo, hi)) in min.iter().zip(&max).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::validation(format!("box bound not finite in dim {d}")));
            }
            if lo > hi {
                return Err(Error::validation(format!(
                    "box empty in dim {d}: min {lo} > max {hi}"
                )));
            }
        }
        Ok(AxisBox { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Inclusive membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        debug_assert_eq!(x.len(), self.dim());
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// 2-norm distance from `x` to the box (0 inside).
    pub fn distance(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let mut s = 0.0;
        for (v, (lo, hi)) in x.iter().zip(self.min.iter().zip(&self.max)) {
            let gap = if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0.0
            };
            s += gap * gap;
        }
        s.sqrt()
    }

    /// Nearest point of the box to `x`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
            .collect()
    }

    /// Minimum 2-norm distance between two boxes (0 if they intersect).
    pub fn box_distance(&self, other: &AxisBox) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        let mut s = 0.0;
        for d in 0..self.dim() {
            let gap = (other.min[d] - self.max[d]).max(self.min[d] - other.max[d]).max(0.0);
            s += gap * gap;
        }
        s.sqrt()
    }

    /// Whether the closed boxes share at least one point.
    pub fn intersects(&self, other: &AxisBox) -> bool {
        debug_assert_eq!(self.dim(), other.dim());
        (0..self.dim()).all(|d| self.min[d] <= other.max[d] && other.min[d] <= self.max[d])
    }
}

/// A finite union of closed boxes. An empty list is the empty set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Region {
    pub boxes: Vec<AxisBox>,
}

impl Region {
    pub fn new(boxes: Vec<AxisBox>) -> Self {
        Region { boxes }
    }

    pub fn empty() -> Self {
        Region { boxes: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.boxes.iter().any(|b| b.contains(x))
    }

    /// Distance to the union; +inf for the empty region.
    pub fn distance(&self, x: &[f64]) -> f64 {
        self.boxes
            .iter()
            .map(|b| b.distance(x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Minimum distance between two unions; +inf if either is empty.
    pub fn region_distance(&self, other: &Region) -> f64 {
        let mut best = f64::INFINITY;
        for a in &self.boxes {
            for b in &other.boxes {
                best = best.min(a.box_distance(b));
            }
        }
        best
    }

    pub fn intersects(&self, other: &Region) -> bool {
        self.boxes
            .iter()
            .any(|a| other.boxes.iter().any(|b| a.intersects(b)))
    }
}
