//! Client filtering: activation-map scoring through a trained CVAE, trust
//! propagation over the sorted scores, and the baseline filter and
//! aggregators it is compared against.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cvae::{normalize_activation, Reconstructor};
use crate::data::TriggerSet;
use crate::error::{Error, Result};
use crate::geomed::{geometric_median, GeoMedOptions, PointSet};
use crate::nn::{forward, LayerMask, ModelSpec, WeightVector};

pub const DEFAULT_LAMBDA: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientScore {
    pub client_id: usize,
    pub epsilon: f64,
    pub accepted: bool,
}

impl ClientScore {
    pub fn new(client_id: usize, epsilon: f64) -> Self {
        Self {
            client_id,
            epsilon,
            accepted: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    /// Accepted clients in ascending score order.
    pub benign_ids: Vec<usize>,
    /// Blocked clients in ascending score order.
    pub blocked_ids: Vec<usize>,
    pub delta: f64,
    pub lambda: f64,
}

impl FilterDecision {
    pub fn accept_all(ids: impl IntoIterator<Item = usize>) -> Self {
        Self {
            benign_ids: ids.into_iter().collect(),
            blocked_ids: Vec::new(),
            delta: 0.0,
            lambda: 0.0,
        }
    }

    pub fn is_blocked(&self, id: usize) -> bool {
        self.blocked_ids.contains(&id)
    }

    /// Copies of `scores` with `accepted` set from this decision.
    pub fn mark(&self, scores: &[ClientScore]) -> Vec<ClientScore> {
        scores
            .iter()
            .map(|s| ClientScore {
                accepted: self.benign_ids.contains(&s.client_id),
                ..*s
            })
            .collect()
    }
}

/// Scores together with anything unusual met while computing them.
#[derive(Clone, Debug, PartialEq)]
pub struct Scoring {
    pub scores: Vec<ClientScore>,
    /// Trigger samples whose cross-client geometric median hit the iteration cap.
    pub geomed_unconverged: usize,
}

/// For every trigger sample, normalizes each client's activation map against
/// the geometric median of all clients' maps for that sample, then averages
/// the CVAE reconstruction error over samples. Scores come back in input order.
pub fn score_clients(
    clients: &[(usize, &WeightVector)],
    spec: &ModelSpec,
    trigger: &TriggerSet,
    mask: &LayerMask,
    cvae: &impl Reconstructor,
    geomed: &GeoMedOptions,
) -> Result<Scoring> {
    if clients.len() < 2 {
        return Err(Error::invalid("scoring needs at least two clients"));
    }
    if trigger.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let len = clients[0].1.len();
    if let Some((_, w)) = clients.iter().find(|(_, w)| w.len() != len) {
        return Err(Error::ShapeMismatch {
            expected: len,
            actual: w.len(),
        });
    }
    let dim = spec.activation_dim(mask)?;
    if dim != cvae.input_dim() {
        return Err(Error::ShapeMismatch {
            expected: cvae.input_dim(),
            actual: dim,
        });
    }
    let inputs = trigger.data.all();
    let labels = trigger.labels();
    // Reductions run in client-id order whatever the input order.
    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by_key(|&i| clients[i].0);
    let ams: Vec<Vec<Vec<f64>>> = order
        .par_iter()
        .map(|&i| clients[i])
        .map(|(_, w)| {
            let f = forward(w, spec, &inputs, Some(mask))?;
            Ok(f.activations.into_iter().map(|a| a.values).collect())
        })
        .collect::<Result<_>>()?;

    let n = trigger.len();
    let per_sample: Vec<(Vec<Vec<f64>>, bool)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let points = PointSet::new(ams.iter().map(|c| &c[s]))?;
            let gm = geometric_median(&points, geomed);
            let nams = ams.iter().map(|c| normalize_activation(&c[s], &gm.median)).collect();
            Ok((nams, gm.converged))
        })
        .collect::<Result<_>>()?;
    let geomed_unconverged = per_sample.iter().filter(|(_, ok)| !ok).count();

    let mut by_id: Vec<ClientScore> = order
        .par_iter()
        .enumerate()
        .map(|(c, &i)| {
            let id = clients[i].0;
            let mut x = Array2::zeros((n, dim));
            for (mut row, (nams, _)) in x.rows_mut().into_iter().zip(&per_sample) {
                row.as_slice_mut().unwrap().copy_from_slice(&nams[c]);
            }
            let errs = cvae.reconstruction_errors(&x, &labels);
            ClientScore::new(id, errs.iter().sum::<f64>() / n as f64)
        })
        .collect();
    let mut scores = vec![ClientScore::new(0, 0.0); clients.len()];
    for (&i, s) in order.iter().zip(by_id.drain(..)) {
        scores[i] = s;
    }
    Ok(Scoring {
        scores,
        geomed_unconverged,
    })
}

fn sorted_by_score(scores: &[ClientScore]) -> Vec<ClientScore> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon).then(a.client_id.cmp(&b.client_id)));
    sorted
}

/// `delta = lambda * (max - min)`. Walking the scores in ascending order, the
/// lowest is accepted and each next one joins while its gap to the previous
/// accepted score is at most `delta`; everything after the first larger gap
/// is blocked.
pub fn trust_propagate(scores: &[ClientScore], lambda: f64) -> Result<FilterDecision> {
    if scores.is_empty() {
        return Err(Error::invalid("no client scores to filter"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} is not in [0, 1]")));
    }
    if scores.iter().any(|s| !s.epsilon.is_finite()) {
        return Err(Error::invalid("client scores must be finite"));
    }
    let sorted = sorted_by_score(scores);
    let lo = sorted[0].epsilon;
    let hi = sorted[sorted.len() - 1].epsilon;
    let delta = lambda * (hi - lo);
    let mut cut = 1;
    while cut < sorted.len() && sorted[cut].epsilon - sorted[cut - 1].epsilon <= delta {
        cut += 1;
    }
    Ok(FilterDecision {
        benign_ids: sorted[..cut].iter().map(|s| s.client_id).collect(),
        blocked_ids: sorted[cut..].iter().map(|s| s.client_id).collect(),
        delta,
        lambda,
    })
}

/// Accepts clients scoring strictly below the mean; if none do, accepts all.
pub fn filter_mean_threshold(scores: &[ClientScore]) -> Result<FilterDecision> {
    if scores.is_empty() {
        return Err(Error::invalid("no client scores to filter"));
    }
    let mean = scores.iter().map(|s| s.epsilon).sum::<f64>() / scores.len() as f64;
    let sorted = sorted_by_score(scores);
    let (benign, blocked): (Vec<&ClientScore>, Vec<&ClientScore>) = sorted.iter().partition(|s| s.epsilon < mean);
    if benign.is_empty() {
        return Ok(FilterDecision::accept_all(sorted.iter().map(|s| s.client_id)));
    }
    Ok(FilterDecision {
        benign_ids: benign.iter().map(|s| s.client_id).collect(),
        blocked_ids: blocked.iter().map(|s| s.client_id).collect(),
        delta: 0.0,
        lambda: 0.0,
    })
}

fn check_models(models: &[&WeightVector]) -> Result<usize> {
    let Some(first) = models.first() else {
        return Err(Error::invalid("nothing to aggregate"));
    };
    if let Some(bad) = models.iter().find(|m| m.len() != first.len()) {
        return Err(Error::ShapeMismatch {
            expected: first.len(),
            actual: bad.len(),
        });
    }
    Ok(first.len())
}

/// Dataset-size-weighted mean, accumulated in the given model order.
pub fn aggregate_fedavg(models: &[&WeightVector], dataset_sizes: &[usize]) -> Result<WeightVector> {
    let dim = check_models(models)?;
    if dataset_sizes.len() != models.len() {
        return Err(Error::ShapeMismatch {
            expected: models.len(),
            actual: dataset_sizes.len(),
        });
    }
    if dataset_sizes.contains(&0) {
        return Err(Error::invalid("dataset sizes must be positive"));
    }
    let total: usize = dataset_sizes.iter().sum();
    let mut out = vec![0.0; dim];
    for (m, &n) in models.iter().zip(dataset_sizes) {
        let w = n as f64 / total as f64;
        out.iter_mut().zip(m.as_slice()).for_each(|(o, v)| *o += w * v);
    }
    Ok(WeightVector::new(out))
}

pub fn aggregate_geomed(models: &[&WeightVector], opts: &GeoMedOptions) -> Result<WeightVector> {
    check_models(models)?;
    let ps = PointSet::new(models.iter().map(|m| m.as_slice()))?;
    Ok(WeightVector::new(geometric_median(&ps, opts).median))
}
