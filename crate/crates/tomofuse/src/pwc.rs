//! 1-D piecewise-constant denoising: the smallest end-to-end exercise of the
//! fusion idea. A random step signal is smoothed by a bank of Gaussian
//! kernels of increasing width, and a small network fuses an 11-sample
//! window from each smoothed version into an estimate of the clean sample.

use ndarray::Array2;

use crate::error::{Result, TomoError};
use crate::image::Image;
use crate::metrics;
use crate::nn::{self, NeuralNet, TrainConfig, TrainingSet};
use crate::rng;

/// Signal generation and evaluation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PwcConfig {
    /// Signal length; one breakpoint is drawn per 30 samples.
    pub length: usize,
    /// Additive Gaussian noise level.
    pub noise_std: f64,
    /// Gaussian kernel widths of the filter bank, strictly increasing.
    pub kernel_widths: Vec<f64>,
    /// Half-width of the feature window (5 gives 11-sample windows).
    pub window_half: usize,
    /// Length of the centered evaluation interval.
    pub eval_interval: usize,
}

impl PwcConfig {
    pub fn with_length(length: usize) -> PwcConfig {
        let window_half = 5;
        PwcConfig {
            length,
            noise_std: 0.06,
            kernel_widths: vec![0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0],
            window_half,
            eval_interval: 200.min(length.saturating_sub(2 * (window_half + 1))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 60 {
            return Err(TomoError::Input("signal length must be >= 60".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(TomoError::Input("noise std must be >= 0".into()));
        }
        if self.kernel_widths.is_empty()
            || self.kernel_widths.windows(2).any(|w| !(w[0] < w[1]))
            || !(self.kernel_widths[0] > 0.0)
        {
            return Err(TomoError::Input(
                "kernel widths must be positive and strictly increasing".into(),
            ));
        }
        if self.eval_interval + 2 * (self.window_half + 1) > self.length {
            return Err(TomoError::Input(
                "evaluation interval does not fit the signal".into(),
            ));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        2 * self.window_half + 1
    }

    pub fn num_breakpoints(&self) -> usize {
        self.length / 30
    }
}

/// Seeded piecewise-constant signal: `length/30` distinct breakpoints at
/// uniform random positions, segment values i.i.d. uniform on `[0, 1]`.
pub fn generate_pwc(cfg: &PwcConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.length;
    let k = cfg.num_breakpoints();
    let mut r = rng::child(seed, 0);
    let mut breaks = std::collections::BTreeSet::new();
    while breaks.len() < k {
        let pos = 1 + (rng::uniform(&mut r, 0.0, (n - 1) as f64) as usize).min(n - 2);
        breaks.insert(pos);
    }
    let mut values = rng::child(seed, 1);
    let mut signal = Vec::with_capacity(n);
    let mut current = rng::uniform(&mut values, 0.0, 1.0);
    let mut next_breaks = breaks.iter().cloned().peekable();
    for i in 0..n {
        if next_breaks.peek() == Some(&i) {
            next_breaks.next();
            current = rng::uniform(&mut values, 0.0, 1.0);
        }
        signal.push(current);
    }
    Ok(signal)
}

/// Add seeded i.i.d. Gaussian noise.
pub fn add_noise(signal: &[f64], noise_std: f64, seed: u64) -> Vec<f64> {
    let mut r = rng::child(seed, 2);
    signal
        .iter()
        .map(|&v| v + noise_std * rng::standard_normal(&mut r))
        .collect()
}

/// Unit-sum sampled Gaussian of standard deviation `width`, truncated at
/// four standard deviations.
fn gaussian_kernel(width: f64) -> Vec<f64> {
    let radius = (4.0 * width).ceil() as usize;
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * width * width)).exp()
        })
        .collect();
    let sum: f64 = kernel.iter().sum();
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    kernel
}

/// Convolve with symmetric boundary reflection.
fn convolve_reflect(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = signal.len() as isize;
    let radius = (kernel.len() / 2) as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let mut j = i + k as isize - radius;
                // reflect with edge repetition: ..., s1, s0 | s0, s1, ...
                if j < 0 {
                    j = -j - 1;
                }
                if j >= n {
                    j = 2 * n - 1 - j;
                }
                acc += kv * signal[j.clamp(0, n - 1) as usize];
            }
            acc
        })
        .collect()
}

/// The eight smoothed versions `y * G(p_i)`.
pub fn gaussian_filter_bank(signal: &[f64], widths: &[f64]) -> Vec<Vec<f64>> {
    widths
        .iter()
        .map(|&w| convolve_reflect(signal, &gaussian_kernel(w)))
        .collect()
}

/// Window features at `q`: the 11 samples around `q` from each filtered
/// version, concatenated in bank order.
pub fn window_features(filtered: &[Vec<f64>], q: usize, window_half: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(filtered.len() * (2 * window_half + 1));
    for version in filtered {
        out.extend_from_slice(&version[q - window_half..=q + window_half]);
    }
    out
}

/// SNR over a 1-D slice via the image metric.
fn snr_slice(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    let f = Image::from_data(reference.len(), 1, 1.0, reference.to_vec())?;
    let g = Image::from_data(estimate.len(), 1, 1.0, estimate.to_vec())?;
    metrics::snr(&f, &g, None)
}

/// Outcome of the end-to-end denoising experiment, all SNR values over the
/// centered evaluation interval of the test signal.
#[derive(Debug, Clone)]
pub struct PwcReport {
    pub snr_noisy: f64,
    pub snr_filtered: Vec<f64>,
    pub best_filtered_index: usize,
    pub snr_best_filtered: f64,
    pub snr_fused: f64,
    pub feature_len: usize,
    pub train_examples: usize,
}

/// Train on one long signal, evaluate on a fresh short one.
///
/// Seed streams: the training signal, its noise, the test signal and its
/// noise are all derived from `seed`, so the whole experiment is
/// reproducible from one number.
pub fn run_pwc_experiment(
    train_cfg: &PwcConfig,
    test_cfg: &PwcConfig,
    hidden: usize,
    nn_cfg: &TrainConfig,
    seed: u64,
) -> Result<PwcReport> {
    train_cfg.validate()?;
    test_cfg.validate()?;
    if train_cfg.kernel_widths != test_cfg.kernel_widths
        || train_cfg.window_half != test_cfg.window_half
    {
        return Err(TomoError::Input(
            "train and test configurations must share the filter bank and window".into(),
        ));
    }

    // training data
    let clean_train = generate_pwc(train_cfg, seed.wrapping_mul(4).wrapping_add(0))?;
    let noisy_train = add_noise(&clean_train, train_cfg.noise_std, seed.wrapping_mul(4).wrapping_add(1));
    let filtered_train = gaussian_filter_bank(&noisy_train, &train_cfg.kernel_widths);
    let half = train_cfg.window_half;
    let m = train_cfg.kernel_widths.len() * train_cfg.window_len();
    let positions: Vec<usize> = (half..train_cfg.length - half).collect();
    let k = positions.len();
    let mut inputs = Array2::zeros((k, m));
    let mut targets = Array2::zeros((k, 1));
    for (row, &q) in positions.iter().enumerate() {
        let feats = window_features(&filtered_train, q, half);
        for (j, &v) in feats.iter().enumerate() {
            inputs[(row, j)] = v;
        }
        targets[(row, 0)] = clean_train[q];
    }
    let (alpha1, alpha2) = nn::normalize_fit(&inputs)?;
    nn::normalize_apply(&mut inputs, alpha1, alpha2);
    let mut set = TrainingSet::new(inputs, targets, vec![1.0; k])?;
    set.norm_shift = alpha1;
    set.norm_scale = alpha2;

    let net = NeuralNet::new(&[m, hidden, 1], seed.wrapping_mul(4).wrapping_add(2))?;
    let report = nn::train(net, &set, nn_cfg)?;
    let net = report.net;

    // test data
    let clean_test = generate_pwc(test_cfg, seed.wrapping_mul(4).wrapping_add(3))?;
    let noisy_test = add_noise(&clean_test, test_cfg.noise_std, seed.wrapping_mul(4).wrapping_add(4));
    let filtered_test = gaussian_filter_bank(&noisy_test, &test_cfg.kernel_widths);

    let n = test_cfg.length;
    let start = (n - test_cfg.eval_interval) / 2;
    let span = start..start + test_cfg.eval_interval;

    let mut fused = noisy_test.clone();
    for q in half..n - half {
        let mut feats = window_features(&filtered_test, q, half);
        nn::normalize_apply_slice(&mut feats, net.norm_shift(), net.norm_scale());
        fused[q] = net.forward(&feats)?[0];
    }

    let clean_span = &clean_test[span.clone()];
    let snr_noisy = snr_slice(clean_span, &noisy_test[span.clone()])?;
    let snr_filtered: Vec<f64> = filtered_test
        .iter()
        .map(|v| snr_slice(clean_span, &v[span.clone()]))
        .collect::<Result<_>>()?;
    let (best_filtered_index, snr_best_filtered) = snr_filtered
        .iter()
        .cloned()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .expect("bank is non-empty");
    let snr_fused = snr_slice(clean_span, &fused[span])?;

    Ok(PwcReport {
        snr_noisy,
        snr_filtered,
        best_filtered_index,
        snr_best_filtered,
        snr_fused,
        feature_len: m,
        train_examples: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Trainer;

    fn segments(signal: &[f64]) -> Vec<f64> {
        let mut vals = vec![signal[0]];
        for w in signal.windows(2) {
            if w[1] != w[0] {
                vals.push(w[1]);
            }
        }
        vals
    }

    #[test]
    fn generator_breakpoint_count_and_range() {
        let cfg = PwcConfig::with_length(60);
        let signal = generate_pwc(&cfg, 3).unwrap();
        assert_eq!(signal.len(), 60);
        assert_eq!(segments(&signal).len(), 3, "2 breakpoints give 3 segments");
        assert!(signal.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(signal, generate_pwc(&cfg, 3).unwrap());
        assert_ne!(signal, generate_pwc(&cfg, 4).unwrap());
    }

    #[test]
    fn segment_values_look_uniform() {
        // Kolmogorov-Smirnov sanity check at the 1% level
        let cfg = PwcConfig::with_length(300_000);
        let signal = generate_pwc(&cfg, 17).unwrap();
        let mut vals = segments(&signal);
        assert!(vals.len() >= 10_000);
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = vals.len() as f64;
        let mut d = 0.0f64;
        for (i, &v) in vals.iter().enumerate() {
            let emp_hi = (i as f64 + 1.0) / n;
            let emp_lo = i as f64 / n;
            d = d.max((emp_hi - v).abs()).max((v - emp_lo).abs());
        }
        let critical = 1.63 / n.sqrt();
        assert!(d < critical, "KS statistic {d} exceeds {critical}");
    }

    #[test]
    fn filters_preserve_constants() {
        let cfg = PwcConfig::with_length(200);
        let constant = vec![0.42; 200];
        for out in gaussian_filter_bank(&constant, &cfg.kernel_widths) {
            for v in out {
                assert!((v - 0.42).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_response_is_the_unit_sum_kernel() {
        let mut impulse = vec![0.0; 401];
        impulse[200] = 1.0;
        for out in gaussian_filter_bank(&impulse, &[0.5, 2.0, 12.0]) {
            let sum: f64 = out.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "kernel sum {sum}");
            let peak = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(out[200], peak);
        }
    }

    #[test]
    fn wider_kernels_smooth_noise_more() {
        let cfg = PwcConfig::with_length(2000);
        let mut var = vec![0.0f64; cfg.kernel_widths.len()];
        for draw in 0..50 {
            let noise = add_noise(&vec![0.0; 2000], 1.0, 1000 + draw);
            for (i, out) in gaussian_filter_bank(&noise, &cfg.kernel_widths).iter().enumerate() {
                // interior only, away from reflected boundaries
                for &v in &out[100..1900] {
                    var[i] += v * v;
                }
            }
        }
        for w in var.windows(2) {
            assert!(w[1] < w[0], "variance must drop with kernel width: {var:?}");
        }
    }

    #[test]
    fn feature_vector_has_88_entries() {
        let cfg = PwcConfig::with_length(100);
        let noisy = add_noise(&generate_pwc(&cfg, 5).unwrap(), cfg.noise_std, 6);
        let filtered = gaussian_filter_bank(&noisy, &cfg.kernel_widths);
        let feats = window_features(&filtered, 50, cfg.window_half);
        assert_eq!(feats.len(), 88);
    }

    #[test]
    fn experiment_runs_and_orders_qualitatively() {
        let train = PwcConfig::with_length(6000);
        let test = PwcConfig::with_length(300);
        let nn_cfg = TrainConfig {
            max_epochs: 25,
            validation_fraction: 0.0,
            tolerance: 0.0,
            trainer: Trainer::LevenbergMarquardt { batch: 1500 },
            seed: 9,
            ..TrainConfig::default()
        };
        let report = run_pwc_experiment(&train, &test, 20, &nn_cfg, 42).unwrap();
        assert_eq!(report.feature_len, 88);
        assert_eq!(report.train_examples, 6000 - 10);
        assert_eq!(report.snr_filtered.len(), 8);
        assert!(
            report.snr_fused > report.snr_best_filtered,
            "fused {} vs best filtered {}",
            report.snr_fused,
            report.snr_best_filtered
        );
        assert!(
            report.snr_best_filtered > report.snr_noisy,
            "best filtered {} vs noisy {}",
            report.snr_best_filtered,
            report.snr_noisy
        );
    }

    #[test]
    fn zero_noise_favors_the_narrowest_kernel() {
        let mut train = PwcConfig::with_length(4000);
        train.noise_std = 0.0;
        let mut test = PwcConfig::with_length(300);
        test.noise_std = 0.0;
        let nn_cfg = TrainConfig {
            max_epochs: 20,
            validation_fraction: 0.0,
            tolerance: 0.0,
            trainer: Trainer::LevenbergMarquardt { batch: 1500 },
            seed: 3,
            ..TrainConfig::default()
        };
        let report = run_pwc_experiment(&train, &test, 20, &nn_cfg, 7).unwrap();
        assert_eq!(report.best_filtered_index, 0, "narrowest kernel wins");
        assert!(
            report.snr_fused >= report.snr_best_filtered - 0.25,
            "fused {} should tie or exceed best filtered {}",
            report.snr_fused,
            report.snr_best_filtered
        );
    }

    #[test]
    fn experiment_is_deterministic() {
        let train = PwcConfig::with_length(2000);
        let test = PwcConfig::with_length(300);
        let nn_cfg = TrainConfig {
            max_epochs: 5,
            validation_fraction: 0.0,
            seed: 1,
            ..TrainConfig::default()
        };
        let a = run_pwc_experiment(&train, &test, 10, &nn_cfg, 5).unwrap();
        let b = run_pwc_experiment(&train, &test, 10, &nn_cfg, 5).unwrap();
        assert_eq!(a.snr_fused.to_bits(), b.snr_fused.to_bits());
        assert_eq!(a.snr_noisy.to_bits(), b.snr_noisy.to_bits());
    }
}
