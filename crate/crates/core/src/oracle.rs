//! Slow reference implementations used to cross-check the fast paths.

use serde::Serialize;

use crate::defense::{trust_propagate, ClientScore};
use crate::error::Result;
use crate::geomed::{geometric_median, GeoMedOptions, PointSet};

/// Minimizes the summed distance to 2-D `points` by repeated grid refinement
/// of the bounding box.
pub fn grid_geomed_2d(points: &[[f64; 2]]) -> [f64; 2] {
    let cost = |x: f64, y: f64| points.iter().map(|p| ((p[0] - x).powi(2) + (p[1] - y).powi(2)).sqrt()).sum::<f64>();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let mut best = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let mut half = [(hi[0] - lo[0]).max(1e-9) / 2.0, (hi[1] - lo[1]).max(1e-9) / 2.0];
    const STEPS: i32 = 40;
    for _ in 0..30 {
        let center = best;
        let mut best_cost = cost(best[0], best[1]);
        for i in -STEPS..=STEPS {
            for j in -STEPS..=STEPS {
                let x = center[0] + half[0] * i as f64 / STEPS as f64;
                let y = center[1] + half[1] * j as f64 / STEPS as f64;
                let c = cost(x, y);
                if c < best_cost {
                    best_cost = c;
                    best = [x, y];
                }
            }
        }
        half = [half[0] * 0.25, half[1] * 0.25];
    }
    best
}

/// Benign set by enumerating every prefix of the sorted scores and keeping
/// the longest one whose consecutive gaps are all within `delta`.
pub fn first_gap_oracle(eps: &[f64], lambda: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..eps.len()).collect();
    order.sort_by(|&a, &b| eps[a].total_cmp(&eps[b]).then(a.cmp(&b)));
    let max = eps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eps.iter().copied().fold(f64::INFINITY, f64::min);
    let delta = lambda * (max - min);
    let mut best = 1;
    for k in 1..=eps.len() {
        if (1..k).all(|i| eps[order[i]] - eps[order[i - 1]] <= delta) {
            best = k;
        }
    }
    order[..best].to_vec()
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub instances: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Weiszfeld against the grid search on random 3 to 7 point sets in the unit square.
pub fn check_geomed(instances: usize, seed: u64) -> Result<OracleReport> {
    use rand::Rng;
    let mut rng = crate::seed::rng(seed);
    let tolerance = 2e-3;
    let (mut failures, mut max_error) = (0, 0.0f64);
    for _ in 0..instances {
        let n = rng.random_range(3..=7);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let ps = PointSet::new(pts.iter().map(|p| &p[..]))?;
        let fast = geometric_median(&ps, &GeoMedOptions { tol: 1e-9, max_iters: 10_000 });
        let slow = grid_geomed_2d(&pts);
        let err = ((fast.median[0] - slow[0]).powi(2) + (fast.median[1] - slow[1]).powi(2)).sqrt();
        let monotone = fast.objective_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        max_error = max_error.max(err);
        if err > tolerance || !monotone {
            failures += 1;
        }
    }
    Ok(OracleReport { instances, failures, max_error, tolerance })
}

/// Trust propagation against [`first_gap_oracle`] on random score lists of
/// length 1 to 12, with clustered values so gaps of every size occur.
pub fn check_trust(instances: usize, seed: u64) -> Result<OracleReport> {
    use rand::Rng;
    let mut rng = crate::seed::rng(seed);
    let mut failures = 0;
    for _ in 0..instances {
        let n = rng.random_range(1..=12);
        let eps: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.7) { rng.random::<f64>() * 0.05 } else { 0.3 + rng.random::<f64>() })
            .collect();
        let lambda = rng.random::<f64>();
        let scores: Vec<ClientScore> = eps.iter().enumerate().map(|(i, &e)| ClientScore::new(i, e)).collect();
        if trust_propagate(&scores, lambda)?.benign_ids != first_gap_oracle(&eps, lambda) {
            failures += 1;
        }
    }
    Ok(OracleReport { instances, failures, max_error: 0.0, tolerance: 0.0 })
}
