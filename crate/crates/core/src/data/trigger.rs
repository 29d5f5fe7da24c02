use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::LabeledData;
use crate::error::{Error, Result};
use crate::nn::Shape;

/// Server-held probe set fed through every client model.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerSet {
    pub data: LabeledData,
    /// Positions of the trigger samples in the source test set.
    pub source_indices: Vec<usize>,
}

impl TriggerSet {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.data.labels().iter().map(|&l| l as usize).collect()
    }
}

/// Seeded uniform sample of `size` test samples without replacement. Also
/// returns the ascending indices of the samples left out, which form the
/// evaluation subset.
pub fn make_trigger_set(test: &LabeledData, size: usize, seed: u64) -> Result<(TriggerSet, Vec<usize>)> {
    if size == 0 {
        return Err(Error::invalid("trigger set size must be at least 1"));
    }
    if size > test.len() {
        return Err(Error::invalid(format!(
            "trigger set of {size} exceeds the {} available test samples",
            test.len()
        )));
    }
    let mut rng = crate::seed::rng(seed);
    let picked = index::sample(&mut rng, test.len(), size).into_vec();
    let mut taken = vec![false; test.len()];
    picked.iter().for_each(|&i| taken[i] = true);
    let rest = (0..test.len()).filter(|&i| !taken[i]).collect();
    Ok((
        TriggerSet {
            data: test.subset(&picked),
            source_indices: picked,
        },
        rest,
    ))
}

/// A square of maximum-intensity pixels and the class it should map to.
/// With `part_index` set, only one quarter of the square is stamped:
/// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackdoorPattern {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub target_class: usize,
    pub part_index: Option<u8>,
}

impl Default for BackdoorPattern {
    fn default() -> Self {
        Self {
            row: 0,
            col: 0,
            size: 10,
            target_class: 0,
            part_index: None,
        }
    }
}

impl BackdoorPattern {
    pub fn part(self, part_index: u8) -> Self {
        Self {
            part_index: Some(part_index),
            ..self
        }
    }

    pub fn full(self) -> Self {
        Self {
            part_index: None,
            ..self
        }
    }

    pub fn validate(&self, shape: Shape) -> Result<()> {
        if self.size == 0 || self.row + self.size > shape.height || self.col + self.size > shape.width {
            return Err(Error::invalid("backdoor pattern falls outside the image"));
        }
        if let Some(p) = self.part_index {
            if p > 3 {
                return Err(Error::invalid(format!("pattern part {p} is not in 0..4")));
            }
            if self.size % 2 != 0 {
                return Err(Error::invalid("a pattern split into quarters needs an even size"));
            }
        }
        Ok(())
    }

    /// `(row, col)` positions covered by this pattern (or pattern part).
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let half = self.size / 2;
        let (rows, cols) = match self.part_index {
            None => (0..self.size, 0..self.size),
            Some(p) => {
                let r0 = if p >= 2 { half } else { 0 };
                let c0 = if p % 2 == 1 { half } else { 0 };
                (r0..r0 + half, c0..c0 + half)
            }
        };
        rows.flat_map(|r| cols.clone().map(move |c| (self.row + r, self.col + c)))
            .collect()
    }

    /// Sets the covered pixels to 1.0 in every channel.
    pub fn stamp(&self, image: &mut [f32], shape: Shape) {
        let plane = shape.height * shape.width;
        for (r, c) in self.pixels() {
            for ch in 0..shape.channels {
                image[ch * plane + r * shape.width + c] = 1.0;
            }
        }
    }
}

/// Returns the poisoned copy of `image` and the label it should carry.
pub fn apply_trigger(image: &[f32], shape: Shape, pattern: &BackdoorPattern) -> Result<(Vec<f32>, usize)> {
    pattern.validate(shape)?;
    if image.len() != shape.size() {
        return Err(Error::ShapeMismatch {
            expected: shape.size(),
            actual: image.len(),
        });
    }
    let mut out = image.to_vec();
    pattern.stamp(&mut out, shape);
    Ok((out, pattern.target_class))
}
