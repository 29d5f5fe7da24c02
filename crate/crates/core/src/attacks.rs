//! Malicious client behaviour: weight-level byzantine transforms and
//! data-poisoning backdoors.

use std::borrow::Cow;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{BackdoorPattern, LabeledData};
use crate::error::{Error, Result};
use crate::nn::{loss_and_gradient, train_local_with, ModelSpec, TrainParams, WeightVector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    SignFlip { xi: f64 },
    AdditiveNoise { sigma: f64, fraction: f64 },
    SameValue { c: f64 },
    Scaling { a: f64 },
    Dba { pattern: BackdoorPattern, part_index: u8, poison_rate: f64 },
    Neurotoxin { pattern: BackdoorPattern, k_percent: f64, poison_rate: f64 },
}

impl AttackKind {
    pub fn sign_flip() -> Self {
        AttackKind::SignFlip { xi: 1.0 }
    }

    pub fn additive_noise() -> Self {
        AttackKind::AdditiveNoise { sigma: 0.1, fraction: 1.0 }
    }

    pub fn same_value() -> Self {
        AttackKind::SameValue { c: 0.01 }
    }

    pub fn scaling() -> Self {
        AttackKind::Scaling { a: 10.0 }
    }

    pub fn dba(part_index: u8) -> Self {
        AttackKind::Dba {
            pattern: BackdoorPattern::default(),
            part_index,
            poison_rate: 0.3,
        }
    }

    pub fn neurotoxin() -> Self {
        AttackKind::Neurotoxin {
            pattern: BackdoorPattern::default(),
            k_percent: 95.0,
            poison_rate: 0.3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::SignFlip { .. } => "sign_flip",
            AttackKind::AdditiveNoise { .. } => "additive_noise",
            AttackKind::SameValue { .. } => "same_value",
            AttackKind::Scaling { .. } => "scaling",
            AttackKind::Dba { .. } => "dba",
            AttackKind::Neurotoxin { .. } => "neurotoxin",
        }
    }

    pub fn is_byzantine(&self) -> bool {
        !self.is_backdoor()
    }

    pub fn is_backdoor(&self) -> bool {
        matches!(self, AttackKind::Dba { .. } | AttackKind::Neurotoxin { .. })
    }

    /// The pattern a backdoor targets, in full.
    pub fn pattern(&self) -> Option<BackdoorPattern> {
        match self {
            AttackKind::Dba { pattern, .. } | AttackKind::Neurotoxin { pattern, .. } => Some(pattern.full()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AttackKind::SignFlip { xi } => xi > 0.0,
            AttackKind::AdditiveNoise { sigma, fraction } => sigma > 0.0 && fraction > 0.0 && fraction <= 1.0,
            AttackKind::SameValue { c } => c.is_finite(),
            AttackKind::Scaling { a } => a > 1.0,
            AttackKind::Dba { part_index, poison_rate, .. } => part_index < 4 && (0.0..=1.0).contains(&poison_rate),
            AttackKind::Neurotoxin { k_percent, poison_rate, .. } => {
                k_percent > 0.0 && k_percent < 100.0 && (0.0..=1.0).contains(&poison_rate)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {} parameters: {self:?}", self.name())))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub seed: u64,
}

/// Replaces an honest client's outgoing weights.
pub fn apply_byzantine(weights: &WeightVector, spec: &AttackSpec) -> Result<WeightVector> {
    let w = weights.as_slice();
    let out = match spec.kind {
        AttackKind::SignFlip { xi } => w.iter().map(|v| -xi * v).collect(),
        AttackKind::Scaling { a } => w.iter().map(|v| a * v).collect(),
        AttackKind::SameValue { c } => vec![c; w.len()],
        AttackKind::AdditiveNoise { sigma, fraction } => {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            let mut rng = crate::seed::rng(spec.seed);
            let count = ((fraction * w.len() as f64).round() as usize).min(w.len());
            let mut out = w.to_vec();
            if count == w.len() {
                out.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            } else {
                let mut picked = index::sample(&mut rng, w.len(), count).into_vec();
                picked.sort_unstable();
                for i in picked {
                    out[i] += normal.sample(&mut rng);
                }
            }
            out
        }
        AttackKind::Dba { .. } | AttackKind::Neurotoxin { .. } => {
            return Err(Error::invalid(format!("{} is not a weight-level attack", spec.kind.name())))
        }
    };
    Ok(WeightVector::new(out))
}

/// `true` for the `round(k% * dim)` coordinates of smallest gradient
/// magnitude (ties to the lower index); only those may be updated.
pub fn neurotoxin_mask(gradient: &[f64], k_percent: f64) -> Vec<bool> {
    let keep = ((k_percent / 100.0 * gradient.len() as f64).round() as usize).min(gradient.len());
    let mut order: Vec<usize> = (0..gradient.len()).collect();
    order.sort_by(|&a, &b| gradient[a].abs().total_cmp(&gradient[b].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; gradient.len()];
    order[..keep].iter().for_each(|&i| mask[i] = true);
    mask
}

/// Copy of `data` where a seeded `poison_rate` share of samples carries the
/// pattern and the target label.
pub fn poison(data: &LabeledData, pattern: &BackdoorPattern, poison_rate: f64, rng: &mut impl Rng) -> Result<LabeledData> {
    pattern.validate(data.shape())?;
    let count = ((poison_rate * data.len() as f64).round() as usize).min(data.len());
    let mut out = data.clone();
    let shape = data.shape();
    for i in index::sample(rng, data.len(), count) {
        pattern.stamp(out.sample_mut(i), shape);
        out.set_label(i, pattern.target_class);
    }
    Ok(out)
}

/// Local training of a backdoor attacker. Each epoch re-draws which samples
/// are poisoned. Neurotoxin additionally freezes the coordinates with the
/// largest gradient magnitude at the received weights.
pub fn run_backdoor_client(
    global: &WeightVector,
    spec: &ModelSpec,
    local: &LabeledData,
    attack: &AttackSpec,
    params: &TrainParams,
) -> Result<WeightVector> {
    let (pattern, poison_rate, mask) = match attack.kind {
        AttackKind::Dba { pattern, part_index, poison_rate } => (pattern.part(part_index), poison_rate, None),
        AttackKind::Neurotoxin { pattern, k_percent, poison_rate } => {
            let labels: Vec<usize> = (0..local.len()).map(|i| local.label(i)).collect();
            let (_, grad) = loss_and_gradient(global, spec, &local.all(), &labels)?;
            (pattern.full(), poison_rate, Some(neurotoxin_mask(&grad, k_percent)))
        }
        _ => {
            return Err(Error::invalid(format!("{} is not a backdoor attack", attack.kind.name())));
        }
    };
    pattern.validate(local.shape())?;
    let mut rng = crate::seed::rng(attack.seed);
    let mut failure = None;
    let out = train_local_with(global, spec, params, mask.as_deref(), |_| {
        if poison_rate == 0.0 {
            return Cow::Borrowed(local);
        }
        match poison(local, &pattern, poison_rate, &mut rng) {
            Ok(d) => Cow::Owned(d),
            Err(e) => {
                failure = Some(e);
                Cow::Borrowed(local)
            }
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}
