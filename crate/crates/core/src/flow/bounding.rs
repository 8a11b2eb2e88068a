//! Logit/sigmoid maps between a box and the real line.

use serde::{Deserialize, Serialize};

use crate::autodiff::{canonical_sum, sigmoid};
use crate::error::{Error, Result};
use crate::pointset::{Batch, PointSet};

/// Margin inside the unit interval: the box is rescaled onto
/// `[BOUND_EPS, 1 - BOUND_EPS]` before the logit.
pub const BOUND_EPS: f64 = 1e-5;

/// Axis-aligned box `prod (lower_j, upper_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    /// Infinite bounds are written as JSON `null`.
    #[serde(with = "lower_bounds")]
    pub lower: Vec<f64>,
    #[serde(with = "upper_bounds")]
    pub upper: Vec<f64>,
    pub bounded: bool,
}

fn finite_or_null<S: serde::Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    v.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>().serialize(s)
}

fn null_as<'de, D: serde::Deserializer<'de>>(d: D, missing: f64) -> std::result::Result<Vec<f64>, D::Error> {
    Ok(Vec::<Option<f64>>::deserialize(d)?
        .into_iter()
        .map(|x| x.unwrap_or(missing))
        .collect())
}

mod lower_bounds {
    pub(super) use super::finite_or_null as serialize;

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        super::null_as(d, f64::NEG_INFINITY)
    }
}

mod upper_bounds {
    pub(super) use super::finite_or_null as serialize;

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        super::null_as(d, f64::INFINITY)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundDirection {
    ToUnbounded,
    ToDomain,
}

/// `(logit(u), -log(u (1 - u)))`.
pub fn logit_with_logdet(u: f64) -> (f64, f64) {
    ((u / (1.0 - u)).ln(), -(u * (1.0 - u)).ln())
}

/// `(sigmoid(y), log(u (1 - u)))`, the inverse of [`logit_with_logdet`].
pub fn sigmoid_with_logdet(y: f64) -> (f64, f64) {
    let u = sigmoid(y);
    (u, (u * (1.0 - u)).ln())
}

impl Domain {
    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
            bounded: true,
        }
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
            bounded: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::Config("domain bounds must share a positive dimension".into()));
        }
        if self.bounded && self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::Config("domain needs finite lower < upper in every dimension".into()));
        }
        Ok(())
    }

    /// Volume of the box.
    pub fn area(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    /// Errors unless `p` is strictly inside the box (always fine when
    /// unbounded).
    pub fn check_point(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::Contract(format!(
                "point has {} coordinates, domain has {}",
                p.len(),
                self.dim()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite point {p:?}")));
        }
        if self.bounded {
            for (j, v) in p.iter().enumerate() {
                if !(*v > self.lower[j] && *v < self.upper[j]) {
                    return Err(Error::Domain(format!(
                        "coordinate {j} of point {p:?} is not inside ({}, {})",
                        self.lower[j], self.upper[j]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn check_set(&self, set: &PointSet) -> Result<()> {
        set.points().try_for_each(|p| self.check_point(p))
    }

    /// Box to real line. Identity with zero log-determinant when unbounded.
    pub fn to_unbounded(&self, set: &PointSet) -> Result<(PointSet, f64)> {
        self.check_set(set)?;
        if !self.bounded {
            return Ok((set.clone(), 0.0));
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(set.coords().len());
        let mut terms = Vec::with_capacity(set.coords().len());
        for p in set.points() {
            for j in 0..d {
                let width = self.upper[j] - self.lower[j];
                let s = (p[j] - self.lower[j]) / width;
                let u = BOUND_EPS + (1.0 - 2.0 * BOUND_EPS) * s;
                let (y, ld) = logit_with_logdet(u);
                out.push(y);
                terms.push(ld + ((1.0 - 2.0 * BOUND_EPS) / width).ln());
            }
        }
        Ok((PointSet::new(d, out)?, canonical_sum(&terms)))
    }

    /// Real line to box; the log-determinant is that of this direction.
    /// Images that land in the outer margin are pulled just inside the box.
    pub fn to_domain(&self, set: &PointSet) -> (PointSet, f64) {
        if !self.bounded {
            return (set.clone(), 0.0);
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(set.coords().len());
        let mut terms = Vec::with_capacity(set.coords().len());
        for p in set.points() {
            for j in 0..d {
                let width = self.upper[j] - self.lower[j];
                let (u, ld) = sigmoid_with_logdet(p[j]);
                let s = ((u - BOUND_EPS) / (1.0 - 2.0 * BOUND_EPS)).clamp(1e-12, 1.0 - 1e-12);
                out.push(self.lower[j] + width * s);
                terms.push(ld - ((1.0 - 2.0 * BOUND_EPS) / width).ln());
            }
        }
        (PointSet::new(d, out).expect("same dimension"), canonical_sum(&terms))
    }

    /// Batch form of [`Domain::to_unbounded`] / [`Domain::to_domain`].
    pub fn transform(&self, batch: &Batch, direction: BoundDirection) -> Result<(Batch, Vec<f64>)> {
        let mut sets = Vec::with_capacity(batch.size());
        let mut logdets = Vec::with_capacity(batch.size());
        for set in batch.sets() {
            let (s, ld) = match direction {
                BoundDirection::ToUnbounded => self.to_unbounded(&set)?,
                BoundDirection::ToDomain => self.to_domain(&set),
            };
            sets.push(s);
            logdets.push(ld);
        }
        Ok((crate::pointset::pad_batch(&sets)?, logdets))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_at_half() {
        let (y, ld) = logit_with_logdet(0.5);
        assert_eq!(y, 0.0);
        assert!((ld - 1.3862943611).abs() < 1e-10);
        for u in [0.1, 0.5, 0.9] {
            let (y, a) = logit_with_logdet(u);
            let (back, b) = sigmoid_with_logdet(y);
            assert!((back - u).abs() < 1e-12);
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn box_round_trip_and_logdets() {
        let dom = Domain {
            lower: vec![-1.0, 0.0],
            upper: vec![1.0, 4.0],
            bounded: true,
        };
        let set = PointSet::new(2, vec![0.0, 2.0, -0.9, 3.5]).unwrap();
        let (y, ld) = dom.to_unbounded(&set).unwrap();
        let (back, ld2) = dom.to_domain(&y);
        for (a, b) in back.coords().iter().zip(set.coords()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((ld + ld2).abs() < 1e-10);
        // Centre of each axis: logit 0 and -log(1/4) - log(width) + log(1 - 2 eps).
        let centre = PointSet::new(2, vec![0.0, 2.0]).unwrap();
        let (y, ld) = dom.to_unbounded(&centre).unwrap();
        assert!(y.coords().iter().all(|v| v.abs() < 1e-12));
        let want = 2.0 * 4f64.ln() - 2f64.ln() - 4f64.ln() + 2.0 * (1.0 - 2.0 * BOUND_EPS).ln();
        assert!((ld - want).abs() < 1e-12);
    }

    #[test]
    fn boundary_points_are_domain_errors() {
        let dom = Domain::unit(2);
        for bad in [[0.0, 0.5], [0.5, 1.0], [1.2, 0.5], [f64::NAN, 0.5]] {
            let set = PointSet::new(2, bad.to_vec()).unwrap();
            assert!(matches!(dom.to_unbounded(&set), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn sigmoid_images_stay_inside() {
        let dom = Domain::unit(1);
        let set = PointSet::new(1, vec![-40.0, -3.0, 0.0, 3.0, 40.0]).unwrap();
        let (x, _) = dom.to_domain(&set);
        assert!(x.coords().iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}
