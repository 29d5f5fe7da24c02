use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};

use super::{ActivationMap, Layer, LayerMask, LayerPlan, Layout, ModelSpec, Shape, WeightVector};
use crate::error::{Error, Result};

/// Output of [`forward`]: per-sample class probabilities and, when capture
/// was requested, one activation map per sample.
#[derive(Clone, Debug)]
pub struct Forward {
    pub probs: Array2<f64>,
    pub activations: Vec<ActivationMap>,
}

pub fn forward(
    weights: &WeightVector,
    spec: &ModelSpec,
    batch: &Array2<f64>,
    capture: Option<&LayerMask>,
) -> Result<Forward> {
    let layout = spec.layout()?;
    check_inputs(&layout, weights, batch)?;
    if let Some(mask) = capture {
        mask.validate(spec)?;
    }
    let pass = run(&layout, weights.as_slice(), batch.clone(), false, capture);
    let activations = match capture {
        None => Vec::new(),
        Some(mask) => (0..batch.nrows())
            .map(|i| {
                let mut values = Vec::new();
                for c in &pass.captured {
                    values.extend(c.row(i).iter().copied());
                }
                ActivationMap {
                    values,
                    sample_index: i,
                    layer_mask: mask.clone(),
                }
            })
            .collect(),
    };
    Ok(Forward {
        probs: pass.output,
        activations,
    })
}

/// Mean cross-entropy over the batch and its gradient with respect to every
/// parameter.
pub fn loss_and_gradient(
    weights: &WeightVector,
    spec: &ModelSpec,
    batch: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let layout = spec.layout()?;
    check_inputs(&layout, weights, batch)?;
    if labels.len() != batch.nrows() {
        return Err(Error::ShapeMismatch {
            expected: batch.nrows(),
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= layout.num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    Ok(loss_and_gradient_unchecked(&layout, weights.as_slice(), batch.clone(), labels))
}

pub(crate) fn check_inputs(layout: &Layout, weights: &WeightVector, batch: &Array2<f64>) -> Result<()> {
    if weights.len() != layout.param_count {
        return Err(Error::ShapeMismatch {
            expected: layout.param_count,
            actual: weights.len(),
        });
    }
    if batch.ncols() != layout.input_shape.size() {
        return Err(Error::ShapeMismatch {
            expected: layout.input_shape.size(),
            actual: batch.ncols(),
        });
    }
    Ok(())
}

pub(crate) fn loss_and_gradient_unchecked(
    layout: &Layout,
    params: &[f64],
    batch: Array2<f64>,
    labels: &[usize],
) -> (f64, Vec<f64>) {
    let n = batch.nrows();
    let pass = run(layout, params, batch, true, None);
    let probs = &pass.output;
    let mut loss = 0.0;
    let mut delta = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].max(f64::MIN_POSITIVE).ln();
        delta[[i, y]] -= 1.0;
    }
    let scale = 1.0 / n as f64;
    delta.mapv_inplace(|d| d * scale);
    let grad = backward(layout, params, &pass, delta);
    (loss * scale, grad)
}

struct Pass {
    /// Input of every layer, recorded only for training passes.
    inputs: Vec<Array2<f64>>,
    /// Flat argmax positions of each max-pool layer, per sample.
    pool_argmax: Vec<Vec<u32>>,
    captured: Vec<Array2<f64>>,
    output: Array2<f64>,
}

fn run(layout: &Layout, params: &[f64], x: Array2<f64>, record: bool, capture: Option<&LayerMask>) -> Pass {
    let mut inputs = Vec::new();
    let mut pool_argmax = Vec::new();
    let mut captured = Vec::new();
    let mut cur = x;
    for (i, plan) in layout.plans.iter().enumerate() {
        let mut argmax = Vec::new();
        let next = match plan.layer {
            Layer::Dense { .. } => dense_forward(plan, params, &cur),
            Layer::Conv2d { .. } => conv_forward(plan, params, &cur),
            Layer::Relu => cur.mapv(|v| v.max(0.0)),
            Layer::Sigmoid => cur.mapv(sigmoid),
            Layer::MaxPool2 => maxpool_forward(plan, &cur, &mut argmax),
            Layer::Flatten => cur.clone(),
            Layer::Softmax => softmax_rows(&cur),
        };
        if plan.layer.is_parametric() && capture.is_some_and(|m| m.selects(i)) {
            captured.push(next.clone());
        }
        if record {
            inputs.push(cur);
            pool_argmax.push(argmax);
        }
        cur = next;
    }
    Pass {
        inputs,
        pool_argmax,
        captured,
        output: cur,
    }
}

/// Backpropagates `delta`, the loss gradient with respect to the softmax input.
fn backward(layout: &Layout, params: &[f64], pass: &Pass, mut delta: Array2<f64>) -> Vec<f64> {
    let mut grad = vec![0.0; layout.param_count];
    let last = layout.plans.len() - 1;
    for i in (0..last).rev() {
        let plan = &layout.plans[i];
        let input = &pass.inputs[i];
        let need_input_grad = i > 0;
        delta = match plan.layer {
            Layer::Dense { .. } => dense_backward(plan, params, input, &delta, &mut grad, need_input_grad),
            Layer::Conv2d { .. } => conv_backward(plan, params, input, &delta, &mut grad, need_input_grad),
            Layer::Relu => {
                let mut d = delta;
                ndarray::Zip::from(&mut d).and(input).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                d
            }
            Layer::Sigmoid => {
                let mut d = delta;
                ndarray::Zip::from(&mut d).and(input).for_each(|d, &x| {
                    let s = sigmoid(x);
                    *d *= s * (1.0 - s);
                });
                d
            }
            Layer::MaxPool2 => {
                let mut d = Array2::zeros(input.raw_dim());
                for (b, argmax) in pass.pool_argmax[i].chunks(plan.output.size()).enumerate() {
                    for (j, &src) in argmax.iter().enumerate() {
                        d[[b, src as usize]] += delta[[b, j]];
                    }
                }
                d
            }
            Layer::Flatten => delta,
            Layer::Softmax => unreachable!("softmax is always the terminal layer"),
        };
        if !need_input_grad {
            break;
        }
    }
    grad
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn dense_views<'a>(plan: &LayerPlan, params: &'a [f64]) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
    let Layer::Dense { input, output } = plan.layer else {
        unreachable!()
    };
    let w_end = plan.offset + input * output;
    let w = ArrayView2::from_shape((output, input), &params[plan.offset..w_end]).unwrap();
    let b = ArrayView1::from(&params[w_end..w_end + output]);
    (w, b)
}

fn dense_forward(plan: &LayerPlan, params: &[f64], x: &Array2<f64>) -> Array2<f64> {
    let (w, b) = dense_views(plan, params);
    let mut z = x.dot(&w.t());
    z += &b;
    z
}

fn dense_backward(
    plan: &LayerPlan,
    params: &[f64],
    x: &Array2<f64>,
    delta: &Array2<f64>,
    grad: &mut [f64],
    need_input_grad: bool,
) -> Array2<f64> {
    let (w, _) = dense_views(plan, params);
    let (output, input) = w.dim();
    let w_end = plan.offset + input * output;
    {
        let mut gw = ArrayViewMut2::from_shape((output, input), &mut grad[plan.offset..w_end]).unwrap();
        ndarray::linalg::general_mat_mul(1.0, &delta.t(), x, 1.0, &mut gw);
    }
    for (g, d) in grad[w_end..w_end + output].iter_mut().zip(delta.sum_axis(Axis(0))) {
        *g += d;
    }
    if need_input_grad {
        delta.dot(&w)
    } else {
        Array2::zeros((0, 0))
    }
}

struct ConvDims {
    in_ch: usize,
    out_ch: usize,
    k: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(plan: &LayerPlan) -> ConvDims {
    let Layer::Conv2d {
        in_channels,
        out_channels,
        kernel,
    } = plan.layer
    else {
        unreachable!()
    };
    let Shape { height, width, .. } = plan.input;
    ConvDims {
        in_ch: in_channels,
        out_ch: out_channels,
        k: kernel,
        h: height,
        w: width,
        oh: plan.output.height,
        ow: plan.output.width,
    }
}

/// Unfolds one `(in_ch, h, w)` sample into `(in_ch*k*k, oh*ow)` patch columns.
fn im2col(d: &ConvDims, x: &[f64]) -> Array2<f64> {
    let mut cols = Array2::zeros((d.in_ch * d.k * d.k, d.oh * d.ow));
    for c in 0..d.in_ch {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().unwrap();
                for oy in 0..d.oh {
                    let src = c * d.h * d.w + (oy + ky) * d.w + kx;
                    dst[oy * d.ow..(oy + 1) * d.ow].copy_from_slice(&x[src..src + d.ow]);
                }
            }
        }
    }
    cols
}

fn col2im_add(d: &ConvDims, cols: &Array2<f64>, out: &mut [f64]) {
    for c in 0..d.in_ch {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let src = cols.row(row);
                let src = src.as_slice().unwrap();
                for oy in 0..d.oh {
                    let base = c * d.h * d.w + (oy + ky) * d.w + kx;
                    for (o, s) in out[base..base + d.ow].iter_mut().zip(&src[oy * d.ow..(oy + 1) * d.ow]) {
                        *o += s;
                    }
                }
            }
        }
    }
}

fn conv_views<'a>(d: &ConvDims, plan: &LayerPlan, params: &'a [f64]) -> (ArrayView2<'a, f64>, &'a [f64]) {
    let w_len = d.out_ch * d.in_ch * d.k * d.k;
    let w = ArrayView2::from_shape((d.out_ch, d.in_ch * d.k * d.k), &params[plan.offset..plan.offset + w_len]).unwrap();
    (w, &params[plan.offset + w_len..plan.offset + w_len + d.out_ch])
}

fn conv_forward(plan: &LayerPlan, params: &[f64], x: &Array2<f64>) -> Array2<f64> {
    let d = conv_dims(plan);
    let (w, b) = conv_views(&d, plan, params);
    let area = d.oh * d.ow;
    let mut out = Array2::zeros((x.nrows(), d.out_ch * area));
    for (xi, mut oi) in x.rows().into_iter().zip(out.rows_mut()) {
        let xs = xi.to_vec();
        let cols = im2col(&d, &xs);
        let y = w.dot(&cols);
        let o = oi.as_slice_mut().unwrap();
        for (ch, yrow) in y.rows().into_iter().enumerate() {
            for (dst, v) in o[ch * area..(ch + 1) * area].iter_mut().zip(yrow) {
                *dst = v + b[ch];
            }
        }
    }
    out
}

fn conv_backward(
    plan: &LayerPlan,
    params: &[f64],
    x: &Array2<f64>,
    delta: &Array2<f64>,
    grad: &mut [f64],
    need_input_grad: bool,
) -> Array2<f64> {
    let d = conv_dims(plan);
    let (w, _) = conv_views(&d, plan, params);
    let area = d.oh * d.ow;
    let ck = d.in_ch * d.k * d.k;
    let w_len = d.out_ch * ck;
    let mut dx = if need_input_grad {
        Array2::zeros(x.raw_dim())
    } else {
        Array2::zeros((0, 0))
    };
    for (b, (xi, di)) in x.rows().into_iter().zip(delta.rows()).enumerate() {
        let xs = xi.to_vec();
        let cols = im2col(&d, &xs);
        let ds = di.to_owned().into_shape_with_order((d.out_ch, area)).unwrap();
        {
            let mut gw = ArrayViewMut2::from_shape((d.out_ch, ck), &mut grad[plan.offset..plan.offset + w_len]).unwrap();
            ndarray::linalg::general_mat_mul(1.0, &ds, &cols.t(), 1.0, &mut gw);
        }
        for (g, s) in grad[plan.offset + w_len..plan.offset + w_len + d.out_ch]
            .iter_mut()
            .zip(ds.sum_axis(Axis(1)))
        {
            *g += s;
        }
        if need_input_grad {
            let dcols = w.t().dot(&ds);
            let mut row = dx.slice_mut(s![b, ..]);
            col2im_add(&d, &dcols, row.as_slice_mut().unwrap());
        }
    }
    dx
}

fn maxpool_forward(plan: &LayerPlan, x: &Array2<f64>, argmax: &mut Vec<u32>) -> Array2<f64> {
    let Shape { channels, height, width } = plan.input;
    let (oh, ow) = (plan.output.height, plan.output.width);
    let mut out = Array2::zeros((x.nrows(), plan.output.size()));
    argmax.reserve(x.nrows() * plan.output.size());
    for (xi, mut oi) in x.rows().into_iter().zip(out.rows_mut()) {
        for c in 0..channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = c * height * width + (2 * oy + dy) * width + 2 * ox + dx;
                            if best == usize::MAX || xi[idx] > best_v {
                                best = idx;
                                best_v = xi[idx];
                            }
                        }
                    }
                    oi[c * oh * ow + oy * ow + ox] = best_v;
                    argmax.push(best as u32);
                }
            }
        }
    }
    out
}
