use std::time::Instant;
use ndarray::Array2;
use tomofuse::nn::*;
use tomofuse::pwc::*;

fn experiment(hidden: &[usize], nn_cfg: &TrainConfig, label: &str) {
    let t0 = Instant::now();
    let train_cfg = PwcConfig::with_length(20000);
    let test_cfg = PwcConfig::with_length(300);
    let seed = 7u64;
    // replicate run_pwc_experiment but with arbitrary layer stacks
    let clean = generate_pwc(&train_cfg, seed * 4).unwrap();
    let noisy = add_noise(&clean, train_cfg.noise_std, seed * 4 + 1);
    let filtered = gaussian_filter_bank(&noisy, &train_cfg.kernel_widths);
    let half = train_cfg.window_half;
    let m = 88;
    let k = train_cfg.length - 2 * half;
    let mut inputs = Array2::zeros((k, m));
    let mut targets = Array2::zeros((k, 1));
    for (row, q) in (half..train_cfg.length - half).enumerate() {
        for (j, &v) in window_features(&filtered, q, half).iter().enumerate() {
            inputs[(row, j)] = v;
        }
        targets[(row, 0)] = clean[q];
    }
    let (a1, a2) = normalize_fit(&inputs).unwrap();
    normalize_apply(&mut inputs, a1, a2);
    let mut set = TrainingSet::new(inputs, targets, vec![1.0; k]).unwrap();
    set.norm_shift = a1;
    set.norm_scale = a2;
    let mut sizes = vec![m];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let net = NeuralNet::new(&sizes, seed * 4 + 2).unwrap();
    let report = train(net, &set, nn_cfg).unwrap();
    let net = report.net;

    let tclean = generate_pwc(&test_cfg, seed * 4 + 3).unwrap();
    let tnoisy = add_noise(&tclean, test_cfg.noise_std, seed * 4 + 4);
    let tfiltered = gaussian_filter_bank(&tnoisy, &test_cfg.kernel_widths);
    let n = test_cfg.length;
    let start = (n - test_cfg.eval_interval) / 2;
    let mut fused = tnoisy.clone();
    for q in half..n - half {
        let mut f = window_features(&tfiltered, q, half);
        normalize_apply_slice(&mut f, net.norm_shift(), net.norm_scale());
        fused[q] = net.forward(&f).unwrap()[0];
    }
    let span = start..start + test_cfg.eval_interval;
    let snr = |est: &[f64]| {
        let num: f64 = tclean[span.clone()].iter().map(|v| v * v).sum();
        let fg: f64 = tclean[span.clone()].iter().zip(est).map(|(a, b)| a * b).sum();
        let gg: f64 = est.iter().map(|v| v * v).sum();
        let alpha = fg / gg;
        let res: f64 = tclean[span.clone()]
            .iter()
            .zip(est)
            .map(|(a, b)| (a - alpha * b).powi(2))
            .sum();
        -10.0 * (res / num).log10()
    };
    let best = tfiltered
        .iter()
        .map(|v| snr(&v[span.clone()]))
        .fold(f64::NEG_INFINITY, f64::max);
    let got = snr(&fused[span.clone()]);
    eprintln!(
        "{label} {hidden:?}: best {best:.2} fused {got:.2} (gain {:+.2}) loss {:.3e} [{:.0}s]",
        got - best,
        report.train_loss.last().unwrap() / k as f64,
        t0.elapsed().as_secs_f64()
    );
}

fn main() {
    let gd = |epochs| TrainConfig {
        max_epochs: epochs,
        validation_fraction: 0.0,
        tolerance: 0.0,
        trainer: Trainer::GradientDescent { momentum: 0.9 },
        seed: 3,
        ..TrainConfig::default()
    };
    let lm = |epochs, batch, warmup| TrainConfig {
        max_epochs: epochs,
        warmup_epochs: warmup,
        validation_fraction: 0.0,
        tolerance: 0.0,
        trainer: Trainer::LevenbergMarquardt { batch },
        seed: 3,
        ..TrainConfig::default()
    };
    experiment(&[40, 20], &gd(2000), "gd2000");
    experiment(&[40, 20], &lm(40, 6000, 0), "lm-cold40");
    experiment(&[40], &lm(60, 6000, 0), "lm-cold60");
}
