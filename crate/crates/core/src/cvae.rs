//! Conditional variational autoencoder over normalized activation maps.
//!
//! Encoder: `[x | onehot(y)] -> hidden (ReLU) -> [mu | log sigma^2]`.
//! Decoder: `[z | onehot(y)] -> hidden (ReLU) -> sigmoid`.
//! The loss is `MSE(x_hat, x) + beta * KL(q(z|x,y) || N(0, I))`, with MSE
//! averaged over input dimensions and KL summed over latent dimensions.
//!
//! Training data comes from a server-side replay: a copy of the initial global
//! model is trained on the trigger set, and after a warmup the activation maps
//! of each subsequent epoch are normalized against that epoch's geometric
//! median and squashed through a sigmoid.

use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TriggerSet;
use crate::error::{Error, Result};
use crate::geomed::{geometric_median, GeoMedOptions, PointSet};
use crate::nn::{forward, train_local, LayerMask, ModelSpec, TrainParams, WeightVector};

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `sigmoid(am - center)` elementwise.
pub fn normalize_activation(am: &[f64], center: &[f64]) -> Vec<f64> {
    am.iter().zip(center).map(|(a, c)| sigmoid(a - c)).collect()
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Maps a normalized activation map and its class label to a reconstruction.
pub trait Reconstructor: Sync {
    fn input_dim(&self) -> usize;

    fn reconstruct(&self, x: &[f64], label: usize) -> Vec<f64>;

    fn reconstruction_error(&self, x: &[f64], label: usize) -> f64 {
        mse(&self.reconstruct(x, label), x)
    }

    /// Reconstruction error of every row of `xs`.
    fn reconstruction_errors(&self, xs: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
        xs.rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &y)| {
                let x = row.to_vec();
                self.reconstruction_error(&x, y)
            })
            .collect()
    }
}

/// Reconstructs every input perfectly.
#[derive(Clone, Copy, Debug)]
pub struct IdentityReconstructor {
    pub dim: usize,
}

impl Reconstructor for IdentityReconstructor {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn reconstruct(&self, x: &[f64], _label: usize) -> Vec<f64> {
        x.to_vec()
    }
}

/// `beta = initial + increment * floor((epoch - 1) / step_epoch)` for 1-based epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub initial: f64,
    pub increment: f64,
    pub step_epoch: usize,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            initial: 0.0,
            increment: 0.5,
            step_epoch: 10,
        }
    }
}

impl BetaSchedule {
    pub fn beta_at(&self, epoch: usize) -> f64 {
        let steps = if self.step_epoch == 0 {
            0
        } else {
            epoch.saturating_sub(1) / self.step_epoch
        };
        self.initial + self.increment * steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta: BetaSchedule,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden: 100,
            epochs: 20,
            lr: 1e-2,
            batch_size: 64,
            beta: BetaSchedule::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvaeDims {
    pub input_dim: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
struct CvaeLayout {
    enc1_w: usize,
    enc1_b: usize,
    enc2_w: usize,
    enc2_b: usize,
    dec1_w: usize,
    dec1_b: usize,
    dec2_w: usize,
    dec2_b: usize,
    total: usize,
}

impl CvaeLayout {
    fn new(d: CvaeDims) -> Self {
        let enc_in = d.input_dim + d.num_classes;
        let dec_in = d.latent_dim + d.num_classes;
        let enc1_w = 0;
        let enc1_b = enc1_w + d.hidden * enc_in;
        let enc2_w = enc1_b + d.hidden;
        let enc2_b = enc2_w + 2 * d.latent_dim * d.hidden;
        let dec1_w = enc2_b + 2 * d.latent_dim;
        let dec1_b = dec1_w + d.hidden * dec_in;
        let dec2_w = dec1_b + d.hidden;
        let dec2_b = dec2_w + d.input_dim * d.hidden;
        let total = dec2_b + d.input_dim;
        Self {
            enc1_w,
            enc1_b,
            enc2_w,
            enc2_b,
            dec1_w,
            dec1_b,
            dec2_w,
            dec2_b,
            total,
        }
    }

    fn mat<'a>(&self, p: &'a [f64], at: usize, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((rows, cols), &p[at..at + rows * cols]).unwrap()
    }

    fn vec<'a>(&self, p: &'a [f64], at: usize, n: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[at..at + n])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeState {
    pub dims: CvaeDims,
    pub params: WeightVector,
    /// Current KL weight.
    pub beta: f64,
    pub epochs_trained: usize,
    pub schedule: BetaSchedule,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

/// Intermediate values of one batch pass.
struct Pass {
    u: Array2<f64>,
    a1: Array2<f64>,
    h1: Array2<f64>,
    mu: Array2<f64>,
    logvar: Array2<f64>,
    noise: Array2<f64>,
    v: Array2<f64>,
    a3: Array2<f64>,
    h3: Array2<f64>,
    xhat: Array2<f64>,
}

fn concat_onehot(x: &ArrayView2<'_, f64>, labels: &[usize], classes: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d + classes));
    out.slice_mut(s![.., ..d]).assign(x);
    for (i, &y) in labels.iter().enumerate() {
        out[[i, d + y]] = 1.0;
    }
    out
}

fn affine(x: &Array2<f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut z = x.dot(&w.t());
    z += &b;
    z
}

fn add_grad(grad: &mut [f64], at: usize, delta: &Array2<f64>, input: &Array2<f64>) {
    let (rows, cols) = (delta.ncols(), input.ncols());
    let mut gw = ArrayViewMut2::from_shape((rows, cols), &mut grad[at..at + rows * cols]).unwrap();
    ndarray::linalg::general_mat_mul(1.0, &delta.t(), input, 1.0, &mut gw);
    let b_at = at + rows * cols;
    for (g, d) in grad[b_at..b_at + rows].iter_mut().zip(delta.sum_axis(Axis(0))) {
        *g += d;
    }
}

impl CvaeState {
    /// Fresh parameters: `U(-b, b)` weights with `b = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(input_dim: usize, num_classes: usize, cfg: &CvaeConfig) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || cfg.latent_dim == 0 || cfg.hidden == 0 {
            return Err(Error::invalid("CVAE dimensions must be positive"));
        }
        let dims = CvaeDims {
            input_dim,
            num_classes,
            latent_dim: cfg.latent_dim,
            hidden: cfg.hidden,
        };
        let l = CvaeLayout::new(dims);
        let mut rng = crate::seed::rng(cfg.seed);
        let mut p = vec![0.0; l.total];
        let enc_in = input_dim + num_classes;
        let dec_in = cfg.latent_dim + num_classes;
        for (at, rows, cols) in [
            (l.enc1_w, cfg.hidden, enc_in),
            (l.enc2_w, 2 * cfg.latent_dim, cfg.hidden),
            (l.dec1_w, cfg.hidden, dec_in),
            (l.dec2_w, input_dim, cfg.hidden),
        ] {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            for v in &mut p[at..at + rows * cols] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            dims,
            params: WeightVector::new(p),
            beta: cfg.beta.beta_at(1),
            epochs_trained: 0,
            schedule: cfg.beta,
            seed: cfg.seed,
        })
    }

    fn layout(&self) -> CvaeLayout {
        CvaeLayout::new(self.dims)
    }

    /// Bias of the encoder head: the first `latent_dim` entries produce `mu`,
    /// the rest `log sigma^2`.
    pub fn encoder_head_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let l = self.layout();
        let (h, z) = (self.dims.hidden, self.dims.latent_dim);
        let (w, b) = self.params.as_mut_slice()[l.enc2_w..l.enc2_b + 2 * z].split_at_mut(2 * z * h);
        (w, b)
    }

    fn check_input(&self, x_len: usize, label: usize) -> Result<()> {
        if x_len != self.dims.input_dim {
            return Err(Error::ShapeMismatch {
                expected: self.dims.input_dim,
                actual: x_len,
            });
        }
        if label >= self.dims.num_classes {
            return Err(Error::invalid(format!("condition label {label} out of range")));
        }
        Ok(())
    }

    fn pass(&self, x: &ArrayView2<'_, f64>, labels: &[usize], noise: Option<&Array2<f64>>) -> Pass {
        let l = self.layout();
        let d = self.dims;
        let p = self.params.as_slice();
        let z = d.latent_dim;
        let u = concat_onehot(x, labels, d.num_classes);
        let a1 = affine(&u, l.mat(p, l.enc1_w, d.hidden, d.input_dim + d.num_classes), l.vec(p, l.enc1_b, d.hidden));
        let h1 = a1.mapv(|v| v.max(0.0));
        let o = affine(&h1, l.mat(p, l.enc2_w, 2 * z, d.hidden), l.vec(p, l.enc2_b, 2 * z));
        let mu = o.slice(s![.., ..z]).to_owned();
        let logvar = o.slice(s![.., z..]).to_owned();
        let noise = noise.cloned().unwrap_or_else(|| Array2::zeros(mu.raw_dim()));
        let latent = &mu + &(logvar.mapv(|lv| (0.5 * lv).exp()) * &noise);
        let v = concat_onehot(&latent.view(), labels, d.num_classes);
        let a3 = affine(&v, l.mat(p, l.dec1_w, d.hidden, z + d.num_classes), l.vec(p, l.dec1_b, d.hidden));
        let h3 = a3.mapv(|v| v.max(0.0));
        let xhat = affine(&h3, l.mat(p, l.dec2_w, d.input_dim, d.hidden), l.vec(p, l.dec2_b, d.input_dim)).mapv(sigmoid);
        Pass {
            u,
            a1,
            h1,
            mu,
            logvar,
            noise,
            v,
            a3,
            h3,
            xhat,
        }
    }

    fn batch_loss(&self, x: &ArrayView2<'_, f64>, pass: &Pass, beta: f64) -> LossParts {
        let n = x.nrows() as f64;
        let d = self.dims.input_dim as f64;
        let mse = (&pass.xhat - x).mapv(|e| e * e).sum() / (n * d);
        let kl = pass
            .mu
            .iter()
            .zip(&pass.logvar)
            .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
            .sum::<f64>()
            / n;
        LossParts {
            total: mse + beta * kl,
            mse,
            kl,
        }
    }

    /// Batch-mean loss and its gradient, with the reparameterization noise given.
    pub fn loss_and_gradient(
        &self,
        x: &Array2<f64>,
        labels: &[usize],
        noise: &Array2<f64>,
        beta: f64,
    ) -> Result<(LossParts, Vec<f64>)> {
        if x.ncols() != self.dims.input_dim || x.nrows() != labels.len() || noise.dim() != (x.nrows(), self.dims.latent_dim) {
            return Err(Error::ShapeMismatch {
                expected: self.dims.input_dim,
                actual: x.ncols(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.dims.num_classes) {
            return Err(Error::invalid(format!("condition label {bad} out of range")));
        }
        let xv = x.view();
        let pass = self.pass(&xv, labels, Some(noise));
        let loss = self.batch_loss(&xv, &pass, beta);
        Ok((loss, self.backward(&xv, &pass, beta)))
    }

    fn backward(&self, x: &ArrayView2<'_, f64>, pass: &Pass, beta: f64) -> Vec<f64> {
        let l = self.layout();
        let d = self.dims;
        let p = self.params.as_slice();
        let z = d.latent_dim;
        let n = x.nrows() as f64;
        let mut grad = vec![0.0; l.total];

        let scale = 2.0 / (n * d.input_dim as f64);
        let mut da4 = (&pass.xhat - x) * scale;
        ndarray::Zip::from(&mut da4).and(&pass.xhat).for_each(|g, &y| *g *= y * (1.0 - y));
        add_grad(&mut grad, l.dec2_w, &da4, &pass.h3);
        let mut da3 = da4.dot(&l.mat(p, l.dec2_w, d.input_dim, d.hidden));
        ndarray::Zip::from(&mut da3).and(&pass.a3).for_each(|g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        add_grad(&mut grad, l.dec1_w, &da3, &pass.v);
        let dv = da3.dot(&l.mat(p, l.dec1_w, d.hidden, z + d.num_classes));
        let dz = dv.slice(s![.., ..z]);

        let kl_scale = beta / n;
        let mut dout = Array2::zeros((x.nrows(), 2 * z));
        for i in 0..x.nrows() {
            for j in 0..z {
                let mu = pass.mu[[i, j]];
                let lv = pass.logvar[[i, j]];
                let sigma = (0.5 * lv).exp();
                dout[[i, j]] = dz[[i, j]] + kl_scale * mu;
                dout[[i, z + j]] = dz[[i, j]] * pass.noise[[i, j]] * 0.5 * sigma + kl_scale * 0.5 * (lv.exp() - 1.0);
            }
        }
        add_grad(&mut grad, l.enc2_w, &dout, &pass.h1);
        let mut da1 = dout.dot(&l.mat(p, l.enc2_w, 2 * z, d.hidden));
        ndarray::Zip::from(&mut da1).and(&pass.a1).for_each(|g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        add_grad(&mut grad, l.enc1_w, &da1, &pass.u);
        grad
    }

    /// Deterministic reconstruction (`z = mu`) of every row.
    pub fn reconstruct_batch(&self, xs: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
        self.pass(&xs.view(), labels, None).xhat
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `u64` LE header length, JSON header, then the parameters in the
    /// [`WeightVector`] encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            dims: self.dims,
            beta: self.beta,
            epochs_trained: self.epochs_trained,
            schedule: self.schedule,
            seed: self.seed,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = (json.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.params.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |expected| Error::Truncated {
            path: "<cvae>".into(),
            expected,
            found: bytes.len(),
        };
        let len = u64::from_le_bytes(bytes.get(..8).ok_or_else(|| truncated(8))?.try_into().unwrap()) as usize;
        let end = len.checked_add(8).filter(|&e| e <= bytes.len()).ok_or_else(|| truncated(len.saturating_add(8)))?;
        let json = &bytes[8..end];
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| Error::invalid(format!("bad CVAE header: {e}")))?;
        let (params, _) = WeightVector::from_bytes(&bytes[end..])?;
        if params.len() != CvaeLayout::new(header.dims).total {
            return Err(Error::ShapeMismatch {
                expected: CvaeLayout::new(header.dims).total,
                actual: params.len(),
            });
        }
        Ok(Self {
            dims: header.dims,
            params,
            beta: header.beta,
            epochs_trained: header.epochs_trained,
            schedule: header.schedule,
            seed: header.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dims: CvaeDims,
    beta: f64,
    epochs_trained: usize,
    schedule: BetaSchedule,
    seed: u64,
}

impl Reconstructor for CvaeState {
    fn input_dim(&self) -> usize {
        self.dims.input_dim
    }

    fn reconstruct(&self, x: &[f64], label: usize) -> Vec<f64> {
        let xs = ArrayView2::from_shape((1, x.len()), x).unwrap();
        self.pass(&xs, &[label], None).xhat.into_raw_vec_and_offset().0
    }

    fn reconstruction_errors(&self, xs: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
        let rec = self.reconstruct_batch(xs, labels);
        rec.rows()
            .into_iter()
            .zip(xs.rows())
            .map(|(r, x)| mse(r.as_slice().unwrap(), &x.to_vec()))
            .collect()
    }
}

/// Single-sample loss with an explicit latent noise draw.
pub fn cvae_loss(x: &[f64], label: usize, state: &CvaeState, noise: &[f64]) -> Result<LossParts> {
    state.check_input(x.len(), label)?;
    if noise.len() != state.dims.latent_dim {
        return Err(Error::ShapeMismatch {
            expected: state.dims.latent_dim,
            actual: noise.len(),
        });
    }
    let xs = ArrayView2::from_shape((1, x.len()), x).unwrap();
    let nz = Array2::from_shape_vec((1, noise.len()), noise.to_vec()).unwrap();
    let pass = state.pass(&xs, &[label], Some(&nz));
    let loss = state.batch_loss(&xs, &pass, state.beta);
    if !loss.total.is_finite() {
        return Err(Error::Divergence {
            epoch: state.epochs_trained,
        });
    }
    Ok(loss)
}

/// Deterministic (`z = mu`) reconstruction MSE.
pub fn reconstruction_error(state: &CvaeState, nam: &[f64], label: usize) -> Result<f64> {
    state.check_input(nam.len(), label)?;
    Ok(state.reconstruction_error(nam, label))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamSample {
    pub values: Vec<f64>,
    pub label: usize,
    /// 0-based harvest epoch the sample was captured in.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeTrainingSet {
    pub dim: usize,
    pub num_classes: usize,
    pub samples: Vec<NamSample>,
    /// Harvest epochs whose geometric median hit the iteration cap.
    pub geomed_unconverged: usize,
}

impl CvaeTrainingSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn matrix(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let mut m = Array2::zeros((idx.len(), self.dim));
        let mut labels = Vec::with_capacity(idx.len());
        for (mut row, &i) in m.rows_mut().into_iter().zip(idx) {
            row.assign(&ArrayView1::from(&self.samples[i].values));
            labels.push(self.samples[i].label);
        }
        (m, labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarvestConfig {
    pub warmup_epochs: usize,
    pub harvest_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub layer_mask: LayerMask,
    pub geomed: GeoMedOptions,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 10,
            harvest_epochs: 10,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
            layer_mask: LayerMask::All,
            geomed: GeoMedOptions::default(),
        }
    }
}

/// Trains a copy of `global_init` on the trigger set and collects
/// `|trigger| * harvest_epochs` normalized activation maps.
pub fn build_training_set(
    global_init: &WeightVector,
    spec: &ModelSpec,
    trigger: &TriggerSet,
    cfg: &HarvestConfig,
) -> Result<CvaeTrainingSet> {
    if trigger.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let num_classes = spec.num_classes()?;
    let dim = spec.activation_dim(&cfg.layer_mask)?;
    let mut model = global_init.clone();
    let step = |w: &WeightVector, epoch: usize| {
        let params = TrainParams {
            epochs: 1,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            seed: crate::seed::derive_seed(cfg.seed, &[epoch as u64]),
        };
        train_local(w, spec, &trigger.data, &params, None)
    };
    for epoch in 0..cfg.warmup_epochs {
        model = step(&model, epoch)?;
    }
    let inputs = trigger.data.all();
    let labels = trigger.labels();
    let mut samples = Vec::with_capacity(trigger.len() * cfg.harvest_epochs);
    let mut unconverged = 0;
    for h in 0..cfg.harvest_epochs {
        model = step(&model, cfg.warmup_epochs + h)?;
        let ams = forward(&model, spec, &inputs, Some(&cfg.layer_mask))?.activations;
        let gm = geometric_median(&PointSet::new(ams.iter().map(|a| &a.values))?, &cfg.geomed);
        if !gm.converged {
            unconverged += 1;
        }
        for (am, &label) in ams.iter().zip(&labels) {
            samples.push(NamSample {
                values: normalize_activation(&am.values, &gm.median),
                label,
                epoch: h,
            });
        }
    }
    Ok(CvaeTrainingSet {
        dim,
        num_classes,
        samples,
        geomed_unconverged: unconverged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub beta: f64,
    pub loss: LossParts,
}

pub fn train_cvae(ts: &CvaeTrainingSet, cfg: &CvaeConfig) -> Result<CvaeState> {
    train_cvae_logged(ts, cfg).map(|(s, _)| s)
}

/// SGD over shuffled mini-batches with a fresh Gaussian noise draw per
/// sample; the KL weight follows `cfg.beta` epoch by epoch.
pub fn train_cvae_logged(ts: &CvaeTrainingSet, cfg: &CvaeConfig) -> Result<(CvaeState, Vec<EpochLog>)> {
    if ts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 {
        return Err(Error::invalid("CVAE needs a positive learning rate and batch size"));
    }
    let mut state = CvaeState::new(ts.dim, ts.num_classes, cfg)?;
    let mut rng = crate::seed::derived_rng(cfg.seed, &[1]);
    let mut order: Vec<usize> = (0..ts.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let beta = cfg.beta.beta_at(epoch);
        state.beta = beta;
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = ts.matrix(chunk);
            let noise = Array2::from_shape_fn((chunk.len(), cfg.latent_dim), |_| rng.sample::<f64, _>(StandardNormal));
            let (loss, grad) = state.loss_and_gradient(&x, &labels, &noise, beta)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            let w = chunk.len() as f64;
            sums.0 += loss.total * w;
            sums.1 += loss.mse * w;
            sums.2 += loss.kl * w;
            state.params.as_mut_slice().iter_mut().zip(&grad).for_each(|(p, g)| *p -= cfg.lr * g);
        }
        state.epochs_trained = epoch;
        let n = ts.len() as f64;
        log.push(EpochLog {
            epoch,
            beta,
            loss: LossParts {
                total: sums.0 / n,
                mse: sums.1 / n,
                kl: sums.2 / n,
            },
        });
    }
    Ok((state, log))
}

/// Mean deterministic reconstruction error over a training set.
pub fn mean_reconstruction_error(state: &impl Reconstructor, ts: &CvaeTrainingSet) -> f64 {
    let idx: Vec<usize> = (0..ts.len()).collect();
    let (x, labels) = ts.matrix(&idx);
    let errs = state.reconstruction_errors(&x, &labels);
    errs.iter().sum::<f64>() / errs.len().max(1) as f64
}
