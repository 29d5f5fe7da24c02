//! Non-IID client partitions: Dirichlet label skew and inverse-law quantity
//! skew over two classes per client.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::LabeledData;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Sample indices into the source dataset, one list per client.
    pub assignments: Vec<Vec<usize>>,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// `{"<client_id>": [indices...]}`, keys in client order.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<usize, &Vec<usize>> = self.assignments.iter().enumerate().collect();
        serde_json::to_string_pretty(&map).expect("partition serializes")
    }
}

const MAX_DIRICHLET_DRAWS: usize = 100;

/// Splits each class across `num_clients` clients in proportions drawn from a
/// symmetric Dirichlet(alpha). Counts use largest-remainder rounding, so every
/// sample is assigned exactly once. Draws are repeated (from the same seeded
/// stream) until every client holds at least one sample.
pub fn partition_dirichlet(data: &LabeledData, num_clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("alpha must be positive and finite"));
    }
    if data.len() < num_clients {
        return Err(Error::invalid(format!(
            "{} samples cannot cover {num_clients} clients",
            data.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = crate::seed::rng(seed);
    let by_class = data.indices_by_class();
    for _ in 0..MAX_DIRICHLET_DRAWS {
        let mut assignments = vec![Vec::new(); num_clients];
        for members in &by_class {
            let mut q: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = q.iter().sum();
            if total > 0.0 {
                q.iter_mut().for_each(|v| *v /= total);
            } else {
                let pick = rng.random_range(0..num_clients);
                q.iter_mut().enumerate().for_each(|(i, v)| *v = (i == pick) as u8 as f64);
            }
            let counts = largest_remainder(&q, members.len());
            let mut pool = members.clone();
            pool.shuffle(&mut rng);
            let mut start = 0;
            for (client, &n) in counts.iter().enumerate() {
                assignments[client].extend_from_slice(&pool[start..start + n]);
                start += n;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            assignments.iter_mut().for_each(|a| a.sort_unstable());
            return Ok(Partition { assignments, seed });
        }
    }
    Err(Error::invalid(format!(
        "could not draw a Dirichlet partition with no empty client in {MAX_DIRICHLET_DRAWS} attempts"
    )))
}

/// Integer counts proportional to `fractions` summing exactly to `total`;
/// leftover units go to the largest fractional parts, ties to the lower index.
pub(crate) fn largest_remainder(fractions: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseLawParams {
    pub alpha: f64,
    pub gamma: usize,
    pub r: f64,
}

impl Default for InverseLawParams {
    fn default() -> Self {
        Self {
            alpha: 2000.0,
            gamma: 20,
            r: 2.0,
        }
    }
}

/// `floor(alpha / (c + r)) + gamma` samples for the client with 0-based index `c`.
pub fn inverse_law_size(client: usize, p: &InverseLawParams) -> usize {
    (p.alpha / (client as f64 + p.r)).floor() as usize + p.gamma
}

/// Quantity skew: client `c` draws `inverse_law_size(c)` samples without
/// replacement from a seeded, uniformly chosen pair of classes, half from each
/// (the first class takes the odd one); if one class runs short the other
/// covers the deficit.
pub fn partition_inverse_law(
    data: &LabeledData,
    num_clients: usize,
    params: &InverseLawParams,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(params.alpha >= 0.0) || !(params.r > 0.0) {
        return Err(Error::invalid("inverse law needs alpha >= 0 and r > 0"));
    }
    let classes = data.num_classes();
    if classes < 2 {
        return Err(Error::invalid("quantity skew needs at least two classes"));
    }
    let mut rng = crate::seed::rng(seed);
    let mut pools: Vec<VecDeque<usize>> = data
        .indices_by_class()
        .into_iter()
        .map(|mut v| {
            v.shuffle(&mut rng);
            v.into()
        })
        .collect();
    let class_ids: Vec<usize> = (0..classes).collect();
    let mut assignments = Vec::with_capacity(num_clients);
    for client in 0..num_clients {
        let demand = inverse_law_size(client, params);
        let mut pair: Vec<usize> = class_ids.choose_multiple(&mut rng, 2).copied().collect();
        pair.sort_unstable();
        let (a, b) = (pair[0], pair[1]);
        let supply = pools[a].len() + pools[b].len();
        if demand > supply {
            return Err(Error::InsufficientSamples {
                client,
                demand,
                supply,
            });
        }
        let mut take_a = demand.div_ceil(2).min(pools[a].len());
        let take_b = (demand - take_a).min(pools[b].len());
        take_a = demand - take_b;
        let mut mine: Vec<usize> = pools[a].drain(..take_a).collect();
        mine.extend(pools[b].drain(..take_b));
        if mine.is_empty() {
            return Err(Error::invalid(format!("client {client} would receive no samples")));
        }
        mine.sort_unstable();
        assignments.push(mine);
    }
    Ok(Partition { assignments, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape;
    use std::collections::HashSet;

    fn labeled(counts: &[usize]) -> LabeledData {
        let mut labels = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat_n(c as u8, n));
        }
        let images = vec![0.0; labels.len()];
        LabeledData::new(images, labels, Shape::flat(1), counts.len()).unwrap()
    }

    #[test]
    fn largest_remainder_conserves_totals() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 5), vec![3, 1, 1]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.0, 1.0], 7), vec![0, 7]);
    }

    #[test]
    fn dirichlet_conserves_every_class() {
        let data = labeled(&[97, 120, 55, 300]);
        let p = partition_dirichlet(&data, 7, 1.0, 42).unwrap();
        let mut seen = HashSet::new();
        for a in &p.assignments {
            assert!(!a.is_empty());
            for &i in a {
                assert!(seen.insert(i), "index {i} assigned twice");
            }
        }
        assert_eq!(seen.len(), data.len());
        assert_eq!(p, partition_dirichlet(&data, 7, 1.0, 42).unwrap());
    }

    #[test]
    fn huge_alpha_is_nearly_uniform() {
        let data = labeled(&[400]);
        let p = partition_dirichlet(&data, 4, 1e6, 5).unwrap();
        for n in p.sizes() {
            assert!((98..=102).contains(&n), "{n}");
        }
    }

    #[test]
    fn inverse_law_sizes_follow_the_closed_form() {
        let p = InverseLawParams::default();
        assert_eq!(inverse_law_size(0, &p), 1020);
        assert_eq!(inverse_law_size(98, &p), 40);
        assert_eq!(inverse_law_size(1, &p), 686);
    }

    #[test]
    fn inverse_law_uses_two_classes_without_replacement() {
        let data = labeled(&[1500; 10]);
        let params = InverseLawParams::default();
        let p = partition_inverse_law(&data, 20, &params, 9).unwrap();
        let mut seen = HashSet::new();
        for (c, a) in p.assignments.iter().enumerate() {
            assert_eq!(a.len(), inverse_law_size(c, &params));
            let labels: HashSet<usize> = a.iter().map(|&i| data.label(i)).collect();
            assert!(labels.len() <= 2);
            assert!(a.iter().all(|&i| seen.insert(i)));
        }
    }

    #[test]
    fn inverse_law_reports_the_starved_client() {
        let data = labeled(&[30, 30]);
        let params = InverseLawParams { alpha: 100.0, gamma: 0, r: 2.0 };
        // client 0 wants 50 of 60, client 1 wants 33 of the remaining 10
        assert!(matches!(
            partition_inverse_law(&data, 2, &params, 0),
            Err(Error::InsufficientSamples { client: 1, demand: 33, supply: 10 })
        ));
    }

    #[test]
    fn partition_json_is_keyed_by_client() {
        let p = Partition { assignments: vec![vec![3, 1], vec![2]], seed: 0 };
        let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(v["0"], serde_json::json!([3, 1]));
        assert_eq!(v["1"], serde_json::json!([2]));
    }
}
