//! Feed-forward network with weighted squared-error training.
//!
//! Hidden layers use the rational sigmoid `x / (1 + |x|)`; the output layer
//! is linear. The loss is `sum_k rho_k * |y(X_k) - Y_k|^2` with per-example
//! weights, minimized either by Levenberg-Marquardt over mini-batch
//! Jacobians (step acceptance always checks the full training loss, so the
//! accepted-loss history is non-increasing) or by gradient descent with
//! momentum and a step-doubling/halving schedule behind the same interface.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Result, TomoError};
use crate::rng::{self, TomoRng};

/// Rational sigmoid, odd and bounded in (-1, 1).
#[inline]
pub fn activation(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

/// Derivative `1 / (1 + |x|)^2`.
#[inline]
pub fn activation_deriv(x: f64) -> f64 {
    let d = 1.0 + x.abs();
    1.0 / (d * d)
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// `out x in` weight matrix.
    weights: Array2<f64>,
    biases: Array1<f64>,
}

/// Multi-layer feed-forward network plus the dataset normalization
/// constants stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNet {
    layers: Vec<Layer>,
    norm_shift: f64,
    norm_scale: f64,
}

impl NeuralNet {
    /// Seeded initialization, uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<NeuralNet> {
        Self::check_sizes(layer_sizes)?;
        let mut r = rng::child(seed, 0);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    rng::uniform(&mut r, -bound, bound)
                });
                let biases = Array1::from_shape_fn(fan_out, |_| rng::uniform(&mut r, -bound, bound));
                Layer { weights, biases }
            })
            .collect();
        Ok(NeuralNet {
            layers,
            norm_shift: 0.0,
            norm_scale: 1.0,
        })
    }

    /// All-zero parameters (tests and hand-built nets).
    pub fn zeros(layer_sizes: &[usize]) -> Result<NeuralNet> {
        Self::check_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer {
                weights: Array2::zeros((w[1], w[0])),
                biases: Array1::zeros(w[1]),
            })
            .collect();
        Ok(NeuralNet {
            layers,
            norm_shift: 0.0,
            norm_scale: 1.0,
        })
    }

    fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(TomoError::Input(
                "need at least input and output layers of positive size".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].weights.ncols()];
        sizes.extend(self.layers.iter().map(|l| l.weights.nrows()));
        sizes
    }

    pub fn num_inputs(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn num_outputs(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    pub fn norm_shift(&self) -> f64 {
        self.norm_shift
    }

    pub fn norm_scale(&self) -> f64 {
        self.norm_scale
    }

    pub fn set_normalization(&mut self, shift: f64, scale: f64) {
        self.norm_shift = shift;
        self.norm_scale = scale;
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub(crate) fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.biases.iter());
        }
        out
    }

    pub(crate) fn set_flat_params(&mut self, params: &[f64]) {
        let mut idx = 0;
        for l in self.layers.iter_mut() {
            for w in l.weights.iter_mut() {
                *w = params[idx];
                idx += 1;
            }
            for b in l.biases.iter_mut() {
                *b = params[idx];
                idx += 1;
            }
        }
        debug_assert_eq!(idx, params.len());
    }

    /// Evaluate the network on one (already normalized) input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.num_inputs() {
            return Err(TomoError::Dimension(format!(
                "input length {} != {}",
                x.len(),
                self.num_inputs()
            )));
        }
        let mut a = Array1::from(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.weights.dot(&a) + &l.biases;
            if i < last {
                z.mapv_inplace(activation);
            }
            a = z;
        }
        Ok(a.to_vec())
    }

    /// Batched evaluation: rows of `x` are examples.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.num_inputs() {
            return Err(TomoError::Dimension("batch input width mismatch".into()));
        }
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weights.t()) + &l.biases;
            if i < last {
                z.mapv_inplace(activation);
            }
            a = z;
        }
        Ok(a)
    }

    /// Forward pass keeping every layer's activations (index 0 is the input)
    /// and pre-activations; used by backpropagation.
    fn forward_trace(&self, x: &[f64]) -> (Vec<Array1<f64>>, Vec<Array1<f64>>) {
        let last = self.layers.len() - 1;
        let mut activations = vec![Array1::from(x.to_vec())];
        let mut preacts = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.weights.dot(activations.last().unwrap()) + &l.biases;
            preacts.push(z.clone());
            let a = if i < last { z.mapv(activation) } else { z };
            activations.push(a);
        }
        (activations, preacts)
    }

    /// Backpropagate an output-side error vector into a flat parameter
    /// gradient, accumulating into `grad`.
    fn backprop_into(
        &self,
        activations: &[Array1<f64>],
        preacts: &[Array1<f64>],
        out_error: &Array1<f64>,
        grad: &mut [f64],
    ) {
        let n_layers = self.layers.len();
        let mut delta = out_error.clone();
        // walk layers backward, writing each layer's block
        let mut block_starts = Vec::with_capacity(n_layers);
        let mut start = 0;
        for l in &self.layers {
            block_starts.push(start);
            start += l.weights.len() + l.biases.len();
        }
        for li in (0..n_layers).rev() {
            let a_prev = &activations[li];
            let base = block_starts[li];
            let n_in = self.layers[li].weights.ncols();
            for (j, &dj) in delta.iter().enumerate() {
                let row = base + j * n_in;
                for (i, &ai) in a_prev.iter().enumerate() {
                    grad[row + i] += dj * ai;
                }
            }
            let bias_base = base + self.layers[li].weights.len();
            for (j, &dj) in delta.iter().enumerate() {
                grad[bias_base + j] += dj;
            }
            if li > 0 {
                let mut back = self.layers[li].weights.t().dot(&delta);
                for (b, z) in back.iter_mut().zip(preacts[li - 1].iter()) {
                    *b *= activation_deriv(*z);
                }
                delta = back;
            }
        }
    }
}

/// Fit the affine normalization of a data matrix: `alpha1` is the global
/// minimum, `alpha2` the reciprocal of the global range.
pub fn normalize_fit(data: &Array2<f64>) -> Result<(f64, f64)> {
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(TomoError::Degenerate(
            "constant data cannot be normalized".into(),
        ));
    }
    Ok((min, 1.0 / (max - min)))
}

/// Apply `(x - alpha1) * alpha2` elementwise. Values outside the fitted
/// range map outside `[0, 1]` and are not clipped.
pub fn normalize_apply(data: &mut Array2<f64>, alpha1: f64, alpha2: f64) {
    data.mapv_inplace(|v| (v - alpha1) * alpha2);
}

/// Slice variant of [`normalize_apply`].
pub fn normalize_apply_slice(data: &mut [f64], alpha1: f64, alpha2: f64) {
    for v in data.iter_mut() {
        *v = (*v - alpha1) * alpha2;
    }
}

/// Training examples: rows of `inputs`/`targets` plus per-example weights.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub example_weights: Vec<f64>,
    /// Normalization already applied to `inputs`, to be stored in the net.
    pub norm_shift: f64,
    pub norm_scale: f64,
}

impl TrainingSet {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>, example_weights: Vec<f64>) -> Result<TrainingSet> {
        if inputs.nrows() != targets.nrows() || inputs.nrows() != example_weights.len() {
            return Err(TomoError::Dimension("training set row counts disagree".into()));
        }
        if !example_weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(TomoError::Input("example weights must be >= 0".into()));
        }
        if !example_weights.iter().any(|&w| w > 0.0) {
            return Err(TomoError::Input("at least one example weight must be positive".into()));
        }
        Ok(TrainingSet {
            inputs,
            targets,
            example_weights,
            norm_shift: 0.0,
            norm_scale: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weighted squared-error loss over a subset of examples.
fn loss_subset(net: &NeuralNet, set: &TrainingSet, indices: &[usize]) -> f64 {
    indices
        .par_iter()
        .with_min_len(256)
        .map(|&k| {
            let rho = set.example_weights[k];
            if rho == 0.0 {
                return 0.0;
            }
            let out = net
                .forward(set.inputs.row(k).as_slice().unwrap())
                .expect("sizes checked");
            let err: f64 = out
                .iter()
                .zip(set.targets.row(k))
                .map(|(o, t)| (o - t) * (o - t))
                .sum();
            rho * err
        })
        .sum()
}

/// `sum_k rho_k |y(X_k) - Y_k|^2`; zero-weight examples contribute exactly 0.
pub fn loss(net: &NeuralNet, set: &TrainingSet) -> f64 {
    let all: Vec<usize> = (0..set.len()).collect();
    loss_subset(net, set, &all)
}

/// Flat gradient of [`loss`] by backpropagation.
pub fn loss_gradient(net: &NeuralNet, set: &TrainingSet) -> Vec<f64> {
    let all: Vec<usize> = (0..set.len()).collect();
    loss_gradient_subset(net, set, &all)
}

fn loss_gradient_subset(net: &NeuralNet, set: &TrainingSet, indices: &[usize]) -> Vec<f64> {
    let p = net.param_count();
    // fixed-size chunks combined in order keep the sum bitwise deterministic
    let chunks: Vec<&[usize]> = indices.chunks(512).collect();
    let partials: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut grad = vec![0.0; p];
            for &k in chunk.iter() {
                let rho = set.example_weights[k];
                if rho == 0.0 {
                    continue;
                }
                let x = set.inputs.row(k);
                let (acts, pres) = net.forward_trace(x.as_slice().unwrap());
                let out = acts.last().unwrap();
                let err = Array1::from_iter(
                    out.iter()
                        .zip(set.targets.row(k))
                        .map(|(o, t)| 2.0 * rho * (o - t)),
                );
                net.backprop_into(&acts, &pres, &err, &mut grad);
            }
            grad
        })
        .collect();
    let mut grad = vec![0.0; p];
    for part in partials {
        for (g, v) in grad.iter_mut().zip(part) {
            *g += v;
        }
    }
    grad
}

/// Which optimizer drives the weight updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trainer {
    /// Damped Gauss-Newton over the Jacobian of a fixed, seeded subsample of
    /// at most `batch` examples (step acceptance still uses the full loss).
    /// Resampling the batch every step destroys the curvature information
    /// the damping schedule adapts to, so the subsample is drawn once.
    LevenbergMarquardt { batch: usize },
    /// Gradient descent with momentum and a doubling/halving step schedule.
    GradientDescent { momentum: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Initial LM damping.
    pub mu0: f64,
    /// Damping multiplier on a rejected step.
    pub mu_up: f64,
    /// Damping multiplier on an accepted step.
    pub mu_down: f64,
    /// Stop when the relative loss decrease of an accepted step falls below this.
    pub tolerance: f64,
    /// Fraction of examples held out for early stopping, in `[0, 0.5]`.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Momentum-GD epochs run before the first LM step. Far from the
    /// optimum the damped Gauss-Newton model buys nothing over a gradient
    /// step at many times the cost, so LM starts from a cheap warm start.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub trainer: Trainer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            mu0: 1e-3,
            mu_up: 10.0,
            mu_down: 0.1,
            tolerance: 1e-9,
            validation_fraction: 0.1,
            patience: 20,
            warmup_epochs: 300,
            seed: 0,
            trainer: Trainer::LevenbergMarquardt { batch: 6000 },
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 || !(self.mu0 > 0.0) || !(self.mu_up > 1.0) || !(self.mu_down > 0.0 && self.mu_down < 1.0) {
            return Err(TomoError::Input("invalid trainer configuration".into()));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(TomoError::Input("validation fraction must be in [0, 0.5]".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(TomoError::Input("tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub net: NeuralNet,
    /// Full training loss after every accepted step (non-increasing),
    /// starting with the loss of the initial weights.
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch (empty without a validation split).
    pub val_loss: Vec<f64>,
    pub epochs_run: usize,
}

/// In-place Cholesky solve of `m x = b` for symmetric positive definite `m`.
/// Fails on a non-positive pivot, which LM answers by raising the damping.
fn cholesky_solve(mut m: Array2<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    debug_assert_eq!(m.nrows(), n);
    {
        let md = m.as_slice_mut().unwrap();
        for j in 0..n {
            let mut d = md[j * n + j];
            for k in 0..j {
                d -= md[j * n + k] * md[j * n + k];
            }
            if !(d > 0.0) {
                return Err(TomoError::Numerical("non-positive Cholesky pivot".into()));
            }
            let d = d.sqrt();
            md[j * n + j] = d;
            let inv = 1.0 / d;
            for i in j + 1..n {
                let mut v = md[i * n + j];
                let row_i = i * n;
                let row_j = j * n;
                for k in 0..j {
                    v -= md[row_i + k] * md[row_j + k];
                }
                md[row_i + j] = v * inv;
            }
        }
        // forward then backward substitution
    }
    let md = m.as_slice().unwrap();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= md[i * n + k] * y[k];
        }
        y[i] = v / md[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in i + 1..n {
            v -= md[k * n + i] * x[k];
        }
        x[i] = v / md[i * n + i];
    }
    Ok(x)
}

/// Jacobian of the sqrt(rho)-scaled residuals over `batch` examples:
/// one row per (example, output component).
fn residual_jacobian(
    net: &NeuralNet,
    set: &TrainingSet,
    batch: &[usize],
) -> (Array2<f64>, Vec<f64>) {
    let p = net.param_count();
    let n_out = net.num_outputs();
    let rows = batch.len() * n_out;
    let mut jac = vec![0.0; rows * p];
    let mut res = vec![0.0; rows];

    jac.par_chunks_mut(n_out * p)
        .zip(res.par_chunks_mut(n_out))
        .zip(batch.par_iter())
        .for_each(|((jrows, rrows), &k)| {
            let rho = set.example_weights[k];
            if rho == 0.0 {
                return;
            }
            let sqrt_rho = rho.sqrt();
            let x = set.inputs.row(k);
            let (acts, pres) = net.forward_trace(x.as_slice().unwrap());
            let out = acts.last().unwrap();
            for j in 0..n_out {
                rrows[j] = sqrt_rho * (out[j] - set.targets[(k, j)]);
                let mut seed = Array1::zeros(n_out);
                seed[j] = sqrt_rho;
                net.backprop_into(&acts, &pres, &seed, &mut jrows[j * p..(j + 1) * p]);
            }
        });

    (
        Array2::from_shape_vec((rows, p), jac).expect("shape matches"),
        res,
    )
}

fn sample_batch(train_idx: &[usize], batch: usize, rng: &mut TomoRng) -> Vec<usize> {
    if batch >= train_idx.len() {
        return train_idx.to_vec();
    }
    // partial Fisher-Yates over a copy
    let mut pool = train_idx.to_vec();
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let j = i + (rng::uniform(rng, 0.0, (pool.len() - i) as f64) as usize).min(pool.len() - i - 1);
        pool.swap(i, j);
        out.push(pool[i]);
    }
    out
}

/// Train the network on the set, returning the best weights found and the
/// loss history. Reproducible from `cfg.seed` (weight state is whatever the
/// caller built; batch sampling and the validation split draw their own
/// sub-streams).
pub fn train(mut net: NeuralNet, set: &TrainingSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if set.inputs.ncols() != net.num_inputs() || set.targets.ncols() != net.num_outputs() {
        return Err(TomoError::Dimension(
            "training set does not match the network shape".into(),
        ));
    }
    net.set_normalization(set.norm_shift, set.norm_scale);

    // validation split
    let k = set.len();
    let mut indices: Vec<usize> = (0..k).collect();
    let mut split_rng = rng::child(cfg.seed, 1);
    for i in (1..k).rev() {
        let j = (rng::uniform(&mut split_rng, 0.0, (i + 1) as f64) as usize).min(i);
        indices.swap(i, j);
    }
    let val_n = (cfg.validation_fraction * k as f64).floor() as usize;
    let (val_idx, train_idx) = indices.split_at(val_n.min(k.saturating_sub(1)));
    let val_usable = val_idx.iter().any(|&i| set.example_weights[i] > 0.0);

    let mut batch_rng = rng::child(cfg.seed, 2);
    let lm_batch_idx = match cfg.trainer {
        Trainer::LevenbergMarquardt { batch } => {
            sample_batch(train_idx, batch.max(1), &mut batch_rng)
        }
        Trainer::GradientDescent { .. } => Vec::new(),
    };
    let mut current_loss = loss_subset(&net, set, train_idx);
    let mut train_loss = vec![current_loss];
    let mut val_loss = Vec::new();

    let mut best_val = f64::INFINITY;
    let mut best_params = net.flat_params();
    let mut best_is_set = false;
    let mut stale_epochs = 0usize;

    let mut mu = cfg.mu0;
    let mut velocity = vec![0.0; net.param_count()];
    let mut gd_step = f64::NAN; // set from the first gradient

    let total_epochs = match cfg.trainer {
        Trainer::LevenbergMarquardt { .. } => cfg.warmup_epochs + cfg.max_epochs,
        Trainer::GradientDescent { .. } => cfg.max_epochs,
    };
    let mut epochs_run = 0usize;
    'epochs: for epoch in 0..total_epochs {
        epochs_run = epoch + 1;
        let in_warmup = matches!(cfg.trainer, Trainer::LevenbergMarquardt { .. })
            && epoch < cfg.warmup_epochs;
        let step_kind = if in_warmup {
            Trainer::GradientDescent { momentum: 0.9 }
        } else {
            cfg.trainer
        };
        let params = net.flat_params();
        let mut accepted = false;
        let mut new_loss = current_loss;

        match step_kind {
            Trainer::LevenbergMarquardt { .. } => {
                let (jac, res) = residual_jacobian(&net, set, &lm_batch_idx);
                let jtj = jac.t().dot(&jac);
                let jtr: Vec<f64> = jac.t().dot(&Array1::from(res)).to_vec();
                let neg_jtr: Vec<f64> = jtr.iter().map(|v| -v).collect();
                let max_diag = jtj.diag().iter().cloned().fold(0.0, f64::max).max(1e-300);

                // gain-ratio damping schedule; a rejected or singular system
                // raises mu geometrically until a step is accepted
                let mut nu = cfg.mu_up;
                for _retry in 0..14 {
                    let mut damped = jtj.clone();
                    for (i, d) in damped.diag_mut().iter_mut().enumerate() {
                        let scale = jtj[(i, i)].max(1e-12 * max_diag);
                        *d += mu * scale;
                    }
                    match cholesky_solve(damped, &neg_jtr) {
                        Ok(step) => {
                            let trial: Vec<f64> =
                                params.iter().zip(&step).map(|(p, s)| p + s).collect();
                            net.set_flat_params(&trial);
                            let trial_loss = loss_subset(&net, set, train_idx);
                            if trial_loss.is_finite() && trial_loss < current_loss {
                                // predicted decrease of the quadratic model
                                let jtjh = jtj.dot(&Array1::from(step.clone()));
                                let predicted: f64 = step
                                    .iter()
                                    .zip(jtr.iter().zip(jtjh.iter()))
                                    .map(|(h, (g, qh))| -2.0 * h * g - h * qh)
                                    .sum();
                                let gain = if predicted > 0.0 {
                                    (current_loss - trial_loss) / predicted
                                } else {
                                    0.5
                                };
                                mu = (mu * (1.0 - (2.0 * gain - 1.0).powi(3)).max(1.0 / 3.0))
                                    .max(1e-14);
                                new_loss = trial_loss;
                                accepted = true;
                                break;
                            }
                            net.set_flat_params(&params);
                            mu *= nu;
                            nu *= 2.0;
                        }
                        Err(_) => {
                            mu *= nu;
                            nu *= 2.0;
                        }
                    }
                }
            }
            Trainer::GradientDescent { momentum } => {
                let grad = loss_gradient_subset(&net, set, train_idx);
                if gd_step.is_nan() {
                    let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                    gd_step = 1.0 / gnorm.max(1e-12);
                }
                for _retry in 0..40 {
                    let trial_v: Vec<f64> = velocity
                        .iter()
                        .zip(&grad)
                        .map(|(v, g)| momentum * v - gd_step * g)
                        .collect();
                    let trial: Vec<f64> = params.iter().zip(&trial_v).map(|(p, v)| p + v).collect();
                    net.set_flat_params(&trial);
                    let trial_loss = loss_subset(&net, set, train_idx);
                    if trial_loss.is_finite() && trial_loss <= current_loss {
                        velocity = trial_v;
                        new_loss = trial_loss;
                        accepted = true;
                        gd_step *= 1.1;
                        break;
                    }
                    net.set_flat_params(&params);
                    gd_step *= 0.5;
                    velocity.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }

        if accepted {
            let drop = current_loss - new_loss;
            current_loss = new_loss;
            train_loss.push(current_loss);
            if val_usable {
                let vl = loss_subset(&net, set, val_idx);
                val_loss.push(vl);
                if vl < best_val {
                    best_val = vl;
                    best_params = net.flat_params();
                    best_is_set = true;
                    stale_epochs = 0;
                } else {
                    stale_epochs += 1;
                    if stale_epochs >= cfg.patience {
                        break 'epochs;
                    }
                }
            }
            // the decrease tolerance only applies once the final phase runs
            if !in_warmup && drop <= cfg.tolerance * current_loss.max(1e-300) {
                break 'epochs;
            }
        }
    }

    if val_usable && best_is_set {
        net.set_flat_params(&best_params);
    }
    Ok(TrainReport {
        net,
        train_loss,
        val_loss,
        epochs_run,
    })
}

// ---------------------------------------------------------------------------
// Model file format
// ---------------------------------------------------------------------------

/// Write the network as a line-oriented `TFNN1` text file. Floats use
/// shortest-round-trip formatting, so save/load/save is byte-identical.
pub fn save_model(net: &NeuralNet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "TFNN1")?;
    let sizes: Vec<String> = net.layer_sizes().iter().map(|s| s.to_string()).collect();
    writeln!(w, "layers {}", sizes.join(" "))?;
    writeln!(w, "alpha {} {}", net.norm_shift, net.norm_scale)?;
    for l in &net.layers {
        for row in l.weights.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", cells.join(" "))?;
        }
        let cells: Vec<String> = l.biases.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "bias {}", cells.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Load a `TFNN1` model; any truncation or malformed line is a parse error
/// and no partial network is returned.
pub fn load_model(path: &Path) -> Result<NeuralNet> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(TomoError::Parse {
                line: i + 1,
                msg: e.to_string(),
            }),
            None => Err(TomoError::Parse {
                line: 0,
                msg: format!("file ended while expecting {expect}"),
            }),
        }
    };

    let (ln, magic) = next_line("magic")?;
    if magic.trim() != "TFNN1" {
        return Err(TomoError::Parse {
            line: ln,
            msg: "missing TFNN1 magic".into(),
        });
    }
    let (ln, sizes_line) = next_line("layer sizes")?;
    let mut it = sizes_line.split_whitespace();
    if it.next() != Some("layers") {
        return Err(TomoError::Parse {
            line: ln,
            msg: "expected `layers ...`".into(),
        });
    }
    let sizes: Vec<usize> = it
        .map(|t| {
            t.parse().map_err(|_| TomoError::Parse {
                line: ln,
                msg: format!("bad layer size `{t}`"),
            })
        })
        .collect::<Result<_>>()?;
    NeuralNet::check_sizes(&sizes)?;

    let (ln, alpha_line) = next_line("alpha")?;
    let parts: Vec<&str> = alpha_line.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "alpha" {
        return Err(TomoError::Parse {
            line: ln,
            msg: "expected `alpha <a1> <a2>`".into(),
        });
    }
    let parse_f = |t: &str, line: usize| -> Result<f64> {
        t.parse().map_err(|_| TomoError::Parse {
            line,
            msg: format!("bad float `{t}`"),
        })
    };
    let a1 = parse_f(parts[1], ln)?;
    let a2 = parse_f(parts[2], ln)?;

    let mut layers = Vec::new();
    for w in sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let mut weights = Array2::zeros((n_out, n_in));
        for r in 0..n_out {
            let (ln, row_line) = next_line("weight row")?;
            let vals: Vec<f64> = row_line
                .split_whitespace()
                .map(|t| parse_f(t, ln))
                .collect::<Result<_>>()?;
            if vals.len() != n_in {
                return Err(TomoError::Parse {
                    line: ln,
                    msg: format!("expected {n_in} weights, found {}", vals.len()),
                });
            }
            for (c, v) in vals.into_iter().enumerate() {
                weights[(r, c)] = v;
            }
        }
        let (ln, bias_line) = next_line("bias row")?;
        let mut it = bias_line.split_whitespace();
        if it.next() != Some("bias") {
            return Err(TomoError::Parse {
                line: ln,
                msg: "expected `bias ...`".into(),
            });
        }
        let biases: Vec<f64> = it.map(|t| parse_f(t, ln)).collect::<Result<_>>()?;
        if biases.len() != n_out {
            return Err(TomoError::Parse {
                line: ln,
                msg: format!("expected {n_out} biases, found {}", biases.len()),
            });
        }
        layers.push(Layer {
            weights,
            biases: Array1::from(biases),
        });
    }

    let mut net = NeuralNet { layers, norm_shift: a1, norm_scale: a2 };
    if !(net.norm_scale > 0.0) {
        return Err(TomoError::Parse {
            line: 3,
            msg: "norm scale must be positive".into(),
        });
    }
    // reject NaN/inf weights
    if net.layers.iter().any(|l| {
        l.weights.iter().chain(l.biases.iter()).any(|v| !v.is_finite())
    }) {
        return Err(TomoError::Parse {
            line: 0,
            msg: "model contains non-finite parameters".into(),
        });
    }
    net.norm_shift = a1;
    Ok(net)
}
