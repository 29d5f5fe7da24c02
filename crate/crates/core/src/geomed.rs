//! Geometric median by Weiszfeld iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distances below this are clamped in the Weiszfeld weights, so an iterate
/// landing on a data point stays finite.
pub const SINGULARITY_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoMedOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for GeoMedOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 200,
        }
    }
}

/// Equal-dimension points with optional nonnegative weights.
#[derive(Clone, Debug)]
pub struct PointSet<'a> {
    points: Vec<&'a [f64]>,
    weights: Option<Vec<f64>>,
}

impl<'a> PointSet<'a> {
    pub fn new<P: AsRef<[f64]> + ?Sized>(points: impl IntoIterator<Item = &'a P>) -> Result<Self>
    where
        P: 'a,
    {
        let points: Vec<&[f64]> = points.into_iter().map(AsRef::as_ref).collect();
        let Some(first) = points.first() else {
            return Err(Error::invalid("point set is empty"));
        };
        let dim = first.len();
        if let Some(bad) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::ShapeMismatch {
                expected: dim,
                actual: bad.len(),
            });
        }
        Ok(Self {
            points,
            weights: None,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.points.len() {
            return Err(Error::ShapeMismatch {
                expected: self.points.len(),
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("point weights must be finite and nonnegative"));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid("point weights are all zero"));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// Weighted sum of Euclidean distances from `m` to every point.
    pub fn objective(&self, m: &[f64]) -> f64 {
        self.points
            .iter()
            .enumerate()
            .map(|(i, p)| self.weight(i) * distance(m, p))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoMedResult {
    pub median: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the initial point and after every update.
    pub objective_trace: Vec<f64>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Weiszfeld iteration from the weighted coordinate-wise mean, stopping when
/// an update moves less than `tol` or after `max_iters` updates. Sums run in
/// point order, so results are reproducible bit for bit.
pub fn geometric_median(ps: &PointSet<'_>, opts: &GeoMedOptions) -> GeoMedResult {
    let dim = ps.dim();
    if ps.len() == 1 {
        return GeoMedResult {
            median: ps.points[0].to_vec(),
            iterations: 0,
            converged: true,
            objective_trace: vec![0.0],
        };
    }
    let total: f64 = (0..ps.len()).map(|i| ps.weight(i)).sum();
    let mut m = vec![0.0; dim];
    for (i, p) in ps.points.iter().enumerate() {
        let w = ps.weight(i) / total;
        m.iter_mut().zip(p.iter()).for_each(|(a, b)| *a += w * b);
    }

    let mut dists: Vec<f64> = ps.points.iter().map(|p| distance(&m, p)).collect();
    let objective = |d: &[f64]| -> f64 { d.iter().enumerate().map(|(i, d)| ps.weight(i) * d).sum() };
    let mut trace = vec![objective(&dists)];
    let mut next = vec![0.0; dim];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        next.iter_mut().for_each(|v| *v = 0.0);
        let mut denom = 0.0;
        for (i, p) in ps.points.iter().enumerate() {
            let w = ps.weight(i) / dists[i].max(SINGULARITY_EPS);
            denom += w;
            next.iter_mut().zip(p.iter()).for_each(|(a, b)| *a += w * b);
        }
        next.iter_mut().for_each(|v| *v /= denom);
        let step = distance(&next, &m);
        std::mem::swap(&mut m, &mut next);
        iterations += 1;
        for (d, p) in dists.iter_mut().zip(&ps.points) {
            *d = distance(&m, p);
        }
        trace.push(objective(&dists));
        if step < opts.tol {
            converged = true;
            break;
        }
    }
    GeoMedResult {
        median: m,
        iterations,
        converged,
        objective_trace: trace,
    }
}
