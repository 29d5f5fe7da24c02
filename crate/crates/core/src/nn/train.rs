use std::borrow::Cow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::engine::{check_inputs, loss_and_gradient_unchecked};
use super::{forward, ModelSpec, WeightVector};
use crate::data::LabeledData;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Mini-batch SGD on cross-entropy. Components where `grad_mask` is `false`
/// are never updated.
pub fn train_local(
    weights: &WeightVector,
    spec: &ModelSpec,
    data: &LabeledData,
    params: &TrainParams,
    grad_mask: Option<&[bool]>,
) -> Result<WeightVector> {
    train_local_with(weights, spec, params, grad_mask, |_| Cow::Borrowed(data))
}

/// Like [`train_local`], but the training samples of each epoch come from
/// `epoch_data`. Every epoch must supply the same number of samples; the
/// shuffling stream is identical to `train_local` with the same seed.
pub fn train_local_with<'a, F>(
    weights: &WeightVector,
    spec: &ModelSpec,
    params: &TrainParams,
    grad_mask: Option<&[bool]>,
    mut epoch_data: F,
) -> Result<WeightVector>
where
    F: FnMut(usize) -> Cow<'a, LabeledData>,
{
    let layout = spec.layout()?;
    if !(params.lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if params.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if let Some(mask) = grad_mask {
        if mask.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                expected: weights.len(),
                actual: mask.len(),
            });
        }
    }
    let mut w = weights.clone();
    let mut rng = crate::seed::rng(params.seed);
    let mut expected_len = None;
    for epoch in 0..params.epochs {
        let data = epoch_data(epoch);
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if *expected_len.get_or_insert(data.len()) != data.len() {
            return Err(Error::invalid("epoch datasets differ in length"));
        }
        if data.shape().size() != layout.input_shape.size() {
            return Err(Error::ShapeMismatch {
                expected: layout.input_shape.size(),
                actual: data.shape().size(),
            });
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(params.batch_size) {
            let batch = data.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            let (_, grad) = loss_and_gradient_unchecked(&layout, w.as_slice(), batch, &labels);
            let ws = w.as_mut_slice();
            match grad_mask {
                None => ws.iter_mut().zip(&grad).for_each(|(v, g)| *v -= params.lr * g),
                Some(mask) => ws
                    .iter_mut()
                    .zip(&grad)
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .for_each(|((v, g), _)| *v -= params.lr * g),
            }
        }
    }
    if params.epochs > 0 && expected_len.is_none() {
        return Err(Error::EmptyDataset);
    }
    Ok(w)
}

const EVAL_CHUNK: usize = 512;

/// Argmax class per sample; ties go to the lowest class index.
pub fn predict(weights: &WeightVector, spec: &ModelSpec, data: &LabeledData) -> Result<Vec<usize>> {
    let layout = spec.layout()?;
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk);
        check_inputs(&layout, weights, &batch)?;
        let probs = forward(weights, spec, &batch, None)?.probs;
        out.extend(probs.rows().into_iter().map(|row| {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        }));
    }
    Ok(out)
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate(weights: &WeightVector, spec: &ModelSpec, data: &LabeledData) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict(weights, spec, data)?;
    let correct = preds
        .iter()
        .zip(data.labels())
        .filter(|(&p, &l)| p == l as usize)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
