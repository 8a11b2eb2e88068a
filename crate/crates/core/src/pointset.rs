//! Point sets and padded batches.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One realization: `len()` points in `dim()` dimensions, stored row-major.
/// Storage order carries no meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("point dimension must be positive".into()));
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(Error::Contract(format!(
                "{} coordinates do not form {dim}-dimensional points",
                coords.len()
            )));
        }
        Ok(Self { dim, coords })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            coords: Vec::new(),
        }
    }

    pub fn from_points(dim: usize, points: &[Vec<f64>]) -> Result<Self> {
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(Error::Contract(format!(
                    "point has {} coordinates, expected {dim}",
                    p.len()
                )));
            }
            coords.extend_from_slice(p);
        }
        Self::new(dim, coords)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn push(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.dim);
        self.coords.extend_from_slice(p);
    }

    /// Point `i` of the result is point `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.len());
        let mut coords = Vec::with_capacity(self.coords.len());
        for &p in perm {
            coords.extend_from_slice(self.point(p));
        }
        Self {
            dim: self.dim,
            coords,
        }
    }

    /// A copy with `extra` appended as the last point.
    pub fn with_point(&self, extra: &[f64]) -> Self {
        let mut out = self.clone();
        out.push(extra);
        out
    }
}

#[derive(Serialize, Deserialize)]
struct PointSetRecord {
    points: Vec<Vec<f64>>,
}

impl Serialize for PointSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PointSetRecord {
            points: self.points().map(<[f64]>::to_vec).collect(),
        }
        .serialize(s)
    }
}

impl PointSet {
    /// Parses `{"points": [[x, y], ...]}`. An empty list needs `dim` to be
    /// known, hence the argument.
    pub fn from_json(line: &str, dim: usize) -> Result<Self> {
        let rec: PointSetRecord = serde_json::from_str(line)?;
        Self::from_points(dim, &rec.points)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("point sets always serialize")
    }
}

/// Sets padded to a common length.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, n_max, d]`.
    pub points: Tensor,
    pub lengths: Vec<usize>,
    /// `[B, n_max]`, 1 for real points.
    pub mask: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn n_max(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[2]
    }

    /// Valid rows of set `b`.
    pub fn set(&self, b: usize) -> PointSet {
        let (n, d) = (self.n_max(), self.dim());
        let start = b * n * d;
        PointSet::new(d, self.points.values()[start..start + self.lengths[b] * d].to_vec())
            .expect("batch rows are whole points")
    }

    pub fn sets(&self) -> Vec<PointSet> {
        (0..self.size()).map(|b| self.set(b)).collect()
    }

    /// Overwrites every padded slot with `value`; results must not change.
    pub fn fill_padding(&mut self, value: impl Fn(usize) -> f64) {
        let (n, d) = (self.n_max(), self.dim());
        let lengths = self.lengths.clone();
        let vals = self.points.values_mut();
        let mut k = 0;
        for (b, len) in lengths.iter().enumerate() {
            for slot in *len..n {
                for j in 0..d {
                    vals[(b * n + slot) * d + j] = value(k);
                    k += 1;
                }
            }
        }
    }
}

pub fn pad_batch(sets: &[PointSet]) -> Result<Batch> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Contract("cannot pad an empty list of sets".into()))?;
    let d = first.dim();
    if let Some(s) = sets.iter().find(|s| s.dim() != d) {
        return Err(Error::Contract(format!(
            "mixed point dimensions {d} and {}",
            s.dim()
        )));
    }
    let n_max = sets.iter().map(PointSet::len).max().unwrap_or(0);
    let b = sets.len();
    let mut points = vec![0.0; b * n_max * d];
    let mut mask = vec![0.0; b * n_max];
    for (k, s) in sets.iter().enumerate() {
        points[k * n_max * d..k * n_max * d + s.coords().len()].copy_from_slice(s.coords());
        for m in &mut mask[k * n_max..k * n_max + s.len()] {
            *m = 1.0;
        }
    }
    Ok(Batch {
        points: Tensor::new(vec![b, n_max, d], points)?,
        lengths: sets.iter().map(PointSet::len).collect(),
        mask: Tensor::new(vec![b, n_max], mask)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_to_longest_set() {
        let a = PointSet::new(2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = PointSet::new(2, vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95]).unwrap();
        let batch = pad_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(batch.points.shape(), &[2, 3, 2]);
        assert_eq!(batch.lengths, vec![2, 3]);
        assert_eq!(batch.mask.values(), &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(batch.set(0), a);
        assert_eq!(batch.set(1), b);

        let single = pad_batch(&[b]).unwrap();
        assert!(single.mask.values().iter().all(|m| *m == 1.0));
    }

    #[test]
    fn rejects_mixed_dimensions() {
        let a = PointSet::new(2, vec![0.1, 0.2]).unwrap();
        let b = PointSet::new(1, vec![0.5]).unwrap();
        assert!(matches!(pad_batch(&[a, b]), Err(Error::Contract(_))));
        assert!(pad_batch(&[]).is_err());
    }

    #[test]
    fn json_line_round_trip() {
        let a = PointSet::new(2, vec![0.1, 0.2, 1.0 / 3.0, 0.4]).unwrap();
        let line = a.to_json();
        assert!(line.starts_with("{\"points\":[["));
        assert_eq!(PointSet::from_json(&line, 2).unwrap(), a);
        let empty = PointSet::from_json("{\"points\": []}", 2).unwrap();
        assert!(empty.is_empty());
    }
}
