//! Reference implementations shared by the integration tests and the
//! acceptance suite. None of them call into the code they check.
#![allow(dead_code)]

use flcleaner::cvae::{CvaeConfig, CvaeState};
use flcleaner::nn::{forward, init_model, loss_and_gradient, Layer, ModelSpec, Shape};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const MAX_REL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

/// One sample through `layers`; returns class probabilities.
pub fn reference_forward(layers: &[Layer], input_shape: Shape, params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let (mut c, mut h, mut w) = (input_shape.channels, input_shape.height, input_shape.width);
    let mut off = 0;
    for layer in layers {
        cur = match *layer {
            Layer::Dense { input, output } => {
                let wt = &params[off..off + input * output];
                let b = &params[off + input * output..off + input * output + output];
                off += input * output + output;
                (c, h, w) = (output, 1, 1);
                (0..output)
                    .map(|o| b[o] + (0..input).map(|i| wt[o * input + i] * cur[i]).sum::<f64>())
                    .collect()
            }
            Layer::Conv2d { in_channels, out_channels, kernel } => {
                let wlen = out_channels * in_channels * kernel * kernel;
                let wt = &params[off..off + wlen];
                let b = &params[off + wlen..off + wlen + out_channels];
                off += wlen + out_channels;
                let (oh, ow) = (h - kernel + 1, w - kernel + 1);
                let mut out = vec![0.0; out_channels * oh * ow];
                for oc in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = b[oc];
                            for ic in 0..in_channels {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let wi = ((oc * in_channels + ic) * kernel + ky) * kernel + kx;
                                        s += wt[wi] * cur[ic * h * w + (oy + ky) * w + ox + kx];
                                    }
                                }
                            }
                            out[oc * oh * ow + oy * ow + ox] = s;
                        }
                    }
                }
                (c, h, w) = (out_channels, oh, ow);
                out
            }
            Layer::Relu => cur.iter().map(|v| v.max(0.0)).collect(),
            Layer::Sigmoid => cur.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            Layer::MaxPool2 => {
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let at = |dy: usize, dx: usize| cur[ch * h * w + (2 * oy + dy) * w + 2 * ox + dx];
                            out[ch * oh * ow + oy * ow + ox] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                        }
                    }
                }
                (h, w) = (oh, ow);
                out
            }
            Layer::Flatten => {
                (c, h, w) = (c * h * w, 1, 1);
                cur
            }
            Layer::Softmax => {
                let m = cur.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = cur.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }
        };
    }
    cur
}

pub fn reference_loss(spec: &ModelSpec, params: &[f64], xs: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = xs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| -reference_forward(&spec.layers, spec.input_shape, params, &row.to_vec())[y].ln())
        .sum();
    total / labels.len() as f64
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error over all parameters of one random instance.
pub fn check_model(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(2..5);
    let d = spec.input_shape.size();
    let classes = spec.num_classes().unwrap();
    let xs = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut weights = init_model(spec).unwrap();
    for v in weights.as_mut_slice() {
        *v += rng.random_range(-0.1..0.1);
    }

    let fwd = forward(&weights, spec, &xs, None).unwrap();
    for (i, row) in xs.rows().into_iter().enumerate() {
        let expect = reference_forward(&spec.layers, spec.input_shape, weights.as_slice(), &row.to_vec());
        for (a, b) in fwd.probs.row(i).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "forward disagrees with the reference");
        }
    }

    let (loss, grad) = loss_and_gradient(&weights, spec, &xs, &labels).unwrap();
    assert!((loss - reference_loss(spec, weights.as_slice(), &xs, &labels)).abs() < 1e-12);
    let mut p = weights.into_inner();
    let mut worst = 0.0f64;
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + FD_STEP;
        let up = reference_loss(spec, &p, &xs, &labels);
        p[k] = orig - FD_STEP;
        let down = reference_loss(spec, &p, &xs, &labels);
        p[k] = orig;
        worst = worst.max(rel_err(grad[k], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// Loop-based CVAE loss with the parameter order encoder (hidden, head),
/// decoder (hidden, output), each weight row-major then bias.
pub fn reference_cvae_loss(
    params: &[f64],
    dims: (usize, usize, usize, usize),
    xs: &Array2<f64>,
    labels: &[usize],
    noise: &Array2<f64>,
    beta: f64,
) -> f64 {
    let (d, k, z, h) = dims;
    let mut off = 0;
    let mut take = |n: usize| {
        let s = &params[off..off + n];
        off += n;
        s
    };
    let (e1w, e1b) = (take(h * (d + k)), take(h));
    let (e2w, e2b) = (take(2 * z * h), take(2 * z));
    let (d1w, d1b) = (take(h * (z + k)), take(h));
    let (d2w, d2b) = (take(d * h), take(d));
    let affine = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..b.len()).map(|o| b[o] + x.iter().enumerate().map(|(i, v)| w[o * x.len() + i] * v).sum::<f64>()).collect()
    };
    let (mut mse, mut kl) = (0.0, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        let mut u: Vec<f64> = xs.row(i).to_vec();
        u.extend((0..k).map(|c| if c == y { 1.0 } else { 0.0 }));
        let h1: Vec<f64> = affine(e1w, e1b, &u).into_iter().map(|v| v.max(0.0)).collect();
        let head = affine(e2w, e2b, &h1);
        let mut v: Vec<f64> = (0..z).map(|j| head[j] + (0.5 * head[z + j]).exp() * noise[[i, j]]).collect();
        kl += (0..z).map(|j| 0.5 * (head[z + j].exp() + head[j] * head[j] - 1.0 - head[z + j])).sum::<f64>();
        v.extend((0..k).map(|c| if c == y { 1.0 } else { 0.0 }));
        let h3: Vec<f64> = affine(d1w, d1b, &v).into_iter().map(|t| t.max(0.0)).collect();
        let xhat: Vec<f64> = affine(d2w, d2b, &h3).into_iter().map(|t| 1.0 / (1.0 + (-t).exp())).collect();
        mse += xhat.iter().zip(xs.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64;
    }
    let n = labels.len() as f64;
    mse / n + beta * kl / n
}


pub fn dense(input: usize, output: usize) -> Layer {
    Layer::Dense { input, output }
}

/// Random small architectures exercising one layer type each.
pub const FAMILIES: [&str; 5] = ["dense", "relu", "sigmoid", "conv", "maxpool"];

pub fn build_family(name: &str, rng: &mut ChaCha8Rng) -> ModelSpec {
    let layers_flat = |rng: &mut ChaCha8Rng, act: Option<Layer>| {
        let (i, h, o) = (rng.random_range(2..7), rng.random_range(2..8), rng.random_range(2..5));
        let layers = match act {
            None => vec![dense(i, o), Layer::Softmax],
            Some(a) => vec![dense(i, h), a, dense(h, o), Layer::Softmax],
        };
        ModelSpec { layers, input_shape: Shape::flat(i), seed: 0 }
    };
    match name {
        "dense" => layers_flat(rng, None),
        "relu" => layers_flat(rng, Some(Layer::Relu)),
        "sigmoid" => layers_flat(rng, Some(Layer::Sigmoid)),
        "conv" => {
            let (ci, co, k) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
            let (h, w) = (rng.random_range(k..k + 4), rng.random_range(k..k + 4));
            let flat = co * (h - k + 1) * (w - k + 1);
            ModelSpec {
                layers: vec![
                    Layer::Conv2d { in_channels: ci, out_channels: co, kernel: k },
                    Layer::Flatten,
                    dense(flat, 3),
                    Layer::Softmax,
                ],
                input_shape: Shape::new(ci, h, w),
                seed: 0,
            }
        }
        "maxpool" => {
            let (ci, co) = (rng.random_range(1..3), rng.random_range(1..3));
            let (h, w) = (rng.random_range(4..8), rng.random_range(4..8));
            let (oh, ow) = ((h - 1) / 2, (w - 1) / 2);
            ModelSpec {
                layers: vec![
                    Layer::Conv2d { in_channels: ci, out_channels: co, kernel: 2 },
                    Layer::Relu,
                    Layer::MaxPool2,
                    Layer::Flatten,
                    dense(co * oh * ow, 3),
                    Layer::Softmax,
                ],
                input_shape: Shape::new(ci, h, w),
                seed: 0,
            }
        }
        other => panic!("unknown family {other}"),
    }
}

/// Worst relative error over `INSTANCES` random members of a family.
pub fn family_worst(name: &str) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let spec = build_family(name, &mut rng).with_seed(seed);
        worst = worst.max(check_model(&spec, &mut rng));
    }
    worst
}

/// Worst relative error of the CVAE loss gradient over `INSTANCES` random instances.
pub fn cvae_worst() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (d, k, z, h) = (rng.random_range(2..6), rng.random_range(2..4), rng.random_range(1..4), rng.random_range(3..7));
        let cfg = CvaeConfig { latent_dim: z, hidden: h, seed, ..CvaeConfig::default() };
        let mut state = CvaeState::new(d, k, &cfg).unwrap();
        for v in state.params.as_mut_slice() {
            *v += rng.random_range(-0.2..0.2);
        }
        let n = rng.random_range(1..4);
        let xs = Array2::from_shape_fn((n, d), |_| rng.random_range(0.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let noise = Array2::from_shape_fn((n, z), |_| rng.random_range(-1.5..1.5));
        let beta = rng.random_range(0.0..1.0);
        let (loss, grad) = state.loss_and_gradient(&xs, &labels, &noise, beta).unwrap();
        let dims = (d, k, z, h);
        let mut p = state.params.clone().into_inner();
        assert!((loss.total - reference_cvae_loss(&p, dims, &xs, &labels, &noise, beta)).abs() < 1e-12);
        for j in 0..p.len() {
            let orig = p[j];
            p[j] = orig + FD_STEP;
            let up = reference_cvae_loss(&p, dims, &xs, &labels, &noise, beta);
            p[j] = orig - FD_STEP;
            let down = reference_cvae_loss(&p, dims, &xs, &labels, &noise, beta);
            p[j] = orig;
            worst = worst.max(rel_err(grad[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Summed Euclidean distance from `m` to `points`.
pub fn geomed_cost(points: &[[f64; 2]], m: [f64; 2]) -> f64 {
    points.iter().map(|p| ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt()).sum()
}

/// Exhaustive search for the 2-D geometric median: a 201x201 grid over the
/// bounding box, then a zoom around the best cell, repeated.
pub fn grid_geomed(points: &[[f64; 2]]) -> [f64; 2] {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let mut best = lo;
    for _ in 0..12 {
        const N: usize = 200;
        let mut best_cost = f64::INFINITY;
        for i in 0..=N {
            for j in 0..=N {
                let m = [
                    lo[0] + (hi[0] - lo[0]) * i as f64 / N as f64,
                    lo[1] + (hi[1] - lo[1]) * j as f64 / N as f64,
                ];
                let c = geomed_cost(points, m);
                if c < best_cost {
                    best_cost = c;
                    best = m;
                }
            }
        }
        let span = [(hi[0] - lo[0]) / N as f64 * 4.0, (hi[1] - lo[1]) / N as f64 * 4.0];
        lo = [best[0] - span[0], best[1] - span[1]];
        hi = [best[0] + span[0], best[1] + span[1]];
    }
    best
}

/// Benign set by trying every prefix of the score order and keeping the
/// longest whose consecutive gaps all stay within `lambda * range`.
pub fn first_gap_benign(eps: &[f64], lambda: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..eps.len()).collect();
    order.sort_by(|&a, &b| eps[a].partial_cmp(&eps[b]).unwrap().then(a.cmp(&b)));
    let hi = eps.iter().copied().fold(f64::MIN, f64::max);
    let lo = eps.iter().copied().fold(f64::MAX, f64::min);
    let delta = lambda * (hi - lo);
    let mut keep = 1;
    for len in 1..=eps.len() {
        let prefix = &order[..len];
        if prefix.windows(2).all(|w| eps[w[1]] - eps[w[0]] <= delta) {
            keep = len;
        }
    }
    order.truncate(keep);
    order
}

/// Random score lists mixing a tight low cluster with scattered high values.
pub fn random_scores(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(1..=12);
    (0..n)
        .map(|_| if rng.random_bool(0.65) { rng.random_range(0.0..0.05) } else { rng.random_range(0.1..1.5) })
        .collect()
}

/// 28x28 images whose class is a bright band on rows `2c..2c+3`, right of
/// column 12, over uniform noise up to 0.2. Labels cycle through 10 classes.
pub fn banded_pixels(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        labels.push(c as u8);
        for y in 0..28 {
            for x in 0..28 {
                let band = y >= 2 * c && y < 2 * c + 3 && x >= 12;
                pixels.push(if band { 230 } else { rng.random_range(0..50) });
            }
        }
    }
    (pixels, labels)
}

pub fn banded_data(n: usize, seed: u64) -> flcleaner::data::LabeledData {
    let (pixels, labels) = banded_pixels(n, seed);
    let images = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    flcleaner::data::LabeledData::new(images, labels, Shape::new(1, 28, 28), 10).unwrap()
}

/// Writes the four MNIST IDX files of a banded dataset into `dir`.
pub fn write_banded_mnist(dir: &std::path::Path, train: usize, test: usize) {
    use flcleaner::data::write_idx;
    std::fs::create_dir_all(dir).unwrap();
    let (p, l) = banded_pixels(train, 1);
    write_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"), &p, 28, 28, &l).unwrap();
    let (p, l) = banded_pixels(test, 2);
    write_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"), &p, 28, 28, &l).unwrap();
}

/// A fast experiment over banded data: 6 clients, 3 rounds, tiny CVAE.
pub fn tiny_config() -> flcleaner::harness::ExperimentConfig {
    flcleaner::harness::ExperimentConfig {
        name: "tiny".into(),
        train_limit: 0,
        test_limit: 0,
        rounds: 3,
        num_clients: 6,
        attacker_fraction: 0.34,
        participation: 1.0,
        hidden: 16,
        local_epochs: 1,
        trigger_size: 40,
        warmup_epochs: 2,
        harvest_epochs: 2,
        cvae_epochs: 4,
        cvae_hidden: 12,
        cvae_latent: 4,
        plots: false,
        ..Default::default()
    }
}
