//! Penalized weighted least-squares reconstruction.
//!
//! Minimizes `(A f - g)' D (A f - g) + beta * R(f)` with the Huber
//! edge-preserving penalty over 4-connected neighbor differences, using the
//! L-BFGS optimizer and the matched projector pair from [`crate::scan`].
//! Image versions are snapshotted every `snapshot_every` iterations for the
//! fusion stage.
//!
//! The penalty follows the double sum over pixels and their neighborhoods,
//! so every unordered neighbor pair is counted twice (once from each side);
//! `penalty([a, a+t]) == t^2` for `|t| < delta`.

use crate::error::{Result, TomoError};
use crate::image::Image;
use crate::lbfgs::{self, LbfgsOptions, StopReason};
use crate::scan::{system_matrix_adjoint, system_matrix_apply, CountsData, ScanGeometry, Sinogram};

/// PWLS parameters. `beta` is the prior weight, `delta` the Huber threshold
/// on neighbor differences (attenuation units).
#[derive(Debug, Clone, Copy)]
pub struct PwlsParams {
    pub beta: f64,
    pub delta: f64,
    pub max_iters: usize,
    pub snapshot_every: usize,
    pub lbfgs_memory: usize,
}

impl PwlsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.delta > 0.0) {
            return Err(TomoError::Input("beta and delta must be > 0".into()));
        }
        if self.max_iters < 1 || self.snapshot_every < 1 || self.snapshot_every > self.max_iters {
            return Err(TomoError::Input(
                "need 1 <= snapshot_every <= max_iters".into(),
            ));
        }
        if self.lbfgs_memory < 1 {
            return Err(TomoError::Input("lbfgs_memory must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for PwlsParams {
    fn default() -> Self {
        PwlsParams {
            beta: 8e-5,
            delta: 0.02,
            max_iters: 90,
            snapshot_every: 10,
            lbfgs_memory: 10,
        }
    }
}

/// Diagonal data weights, one per sinogram entry.
#[derive(Debug, Clone)]
pub struct WeightMap {
    geometry: ScanGeometry,
    weights: Vec<f64>,
}

impl WeightMap {
    pub fn new(geometry: ScanGeometry, weights: Vec<f64>) -> Result<WeightMap> {
        if weights.len() != geometry.num_views() * geometry.num_bins() {
            return Err(TomoError::Dimension("weight map size mismatch".into()));
        }
        if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(TomoError::Input("weights must be finite and >= 0".into()));
        }
        Ok(WeightMap { geometry, weights })
    }

    /// Weights proportional to photon counts, normalized to a maximum of 1.
    pub fn from_counts(counts: &CountsData) -> Result<WeightMap> {
        let max = counts.counts().iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(TomoError::Degenerate("all photon counts are zero".into()));
        }
        let weights = counts.counts().iter().map(|&y| y / max).collect();
        WeightMap::new(*counts.geometry(), weights)
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Huber penalty: quadratic below `delta`, linear above, C1 at the joint.
#[inline]
pub fn huber(x: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    let ax = x.abs();
    if ax < delta {
        0.5 * x * x
    } else {
        delta * ax - 0.5 * delta * delta
    }
}

#[inline]
pub fn huber_deriv(x: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    if x.abs() < delta {
        x
    } else {
        delta * x.signum()
    }
}

/// Roughness penalty: sum over all pixels and their 4-neighborhoods of the
/// Huber penalty of the intensity difference.
pub fn penalty(image: &Image, delta: f64) -> f64 {
    let w = image.width();
    let h = image.height();
    let d = image.data();
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = d[r * w + c];
            if c + 1 < w {
                acc += 2.0 * huber(v - d[r * w + c + 1], delta);
            }
            if r + 1 < h {
                acc += 2.0 * huber(v - d[(r + 1) * w + c], delta);
            }
        }
    }
    acc
}

/// Gradient of [`penalty`] with respect to every pixel.
pub fn penalty_gradient(image: &Image, delta: f64) -> Image {
    let w = image.width();
    let h = image.height();
    let d = image.data();
    let mut grad = Image::zeros(w, h, image.pixel_size());
    let g = grad.data_mut();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                let df = 2.0 * huber_deriv(d[i] - d[i + 1], delta);
                g[i] += df;
                g[i + 1] -= df;
            }
            if r + 1 < h {
                let df = 2.0 * huber_deriv(d[i] - d[i + w], delta);
                g[i] += df;
                g[i + w] -= df;
            }
        }
    }
    grad
}

/// PWLS objective `(Af - g)' D (Af - g) + beta R(f)`.
pub fn pwls_objective(
    f: &Image,
    g_hat: &Sinogram,
    w: &WeightMap,
    params: &PwlsParams,
) -> Result<f64> {
    params.validate()?;
    if w.geometry() != g_hat.geometry() {
        return Err(TomoError::Dimension("weights do not match sinogram".into()));
    }
    let af = system_matrix_apply(f, g_hat.geometry())?;
    let data: f64 = af
        .data()
        .iter()
        .zip(g_hat.data())
        .zip(w.weights())
        .map(|((a, g), wi)| wi * (a - g) * (a - g))
        .sum();
    Ok(data + params.beta * penalty(f, params.delta))
}

/// Gradient of the PWLS objective: `2 A' D (Af - g) + beta grad R(f)`.
pub fn pwls_gradient(
    f: &Image,
    g_hat: &Sinogram,
    w: &WeightMap,
    params: &PwlsParams,
) -> Result<Image> {
    params.validate()?;
    if w.geometry() != g_hat.geometry() {
        return Err(TomoError::Dimension("weights do not match sinogram".into()));
    }
    let af = system_matrix_apply(f, g_hat.geometry())?;
    let residual: Vec<f64> = af
        .data()
        .iter()
        .zip(g_hat.data())
        .zip(w.weights())
        .map(|((a, g), wi)| 2.0 * wi * (a - g))
        .collect();
    let res_sino = Sinogram::from_data(*g_hat.geometry(), residual)?;
    let mut grad = system_matrix_adjoint(&res_sino, f.width(), f.height(), f.pixel_size())?;
    grad.axpy(params.beta, &penalty_gradient(f, params.delta));
    Ok(grad)
}

/// PWLS reconstruction result: the initial image, the snapshots taken every
/// `snapshot_every` iterations, and how the optimizer stopped.
#[derive(Debug, Clone)]
pub struct PwlsSnapshots {
    pub init: Image,
    /// `(iteration, image)` pairs in iteration order.
    pub snapshots: Vec<(usize, Image)>,
    pub reason: StopReason,
    /// Objective at the start plus after every accepted iterate.
    pub trace: Vec<f64>,
}

impl PwlsSnapshots {
    /// Snapshot taken at `iteration`, if the run got that far.
    pub fn at_iteration(&self, iteration: usize) -> Option<&Image> {
        self.snapshots
            .iter()
            .find(|(it, _)| *it == iteration)
            .map(|(_, img)| img)
    }
}

/// Run PWLS from `init`, returning iteration snapshots for fusion.
///
/// Weights are proportional to the photon counts (normalized to max 1); the
/// sinogram is the log transform of the counts. If the optimizer converges
/// before `max_iters` the remaining snapshots repeat the final iterate; a
/// line-search failure truncates the snapshot list.
pub fn pwls_reconstruct(
    counts: &CountsData,
    init: &Image,
    params: &PwlsParams,
) -> Result<PwlsSnapshots> {
    params.validate()?;
    let g_hat = crate::scan::counts_to_sinogram(counts);
    let weights = WeightMap::from_counts(counts)?;
    let geom = *counts.geometry();
    let width = init.width();
    let height = init.height();
    let ps = init.pixel_size();

    let beta = params.beta;
    let delta = params.delta;
    let eval = |x: &[f64], grad_out: &mut [f64]| {
        let f = Image::from_data(width, height, ps, x.to_vec()).expect("iterate stays finite");
        let af = system_matrix_apply(&f, &geom).expect("geometry validated");
        let mut data_term = 0.0;
        let residual: Vec<f64> = af
            .data()
            .iter()
            .zip(g_hat.data())
            .zip(weights.weights())
            .map(|((a, g), wi)| {
                let r = a - g;
                data_term += wi * r * r;
                2.0 * wi * r
            })
            .collect();
        let res_sino = Sinogram::from_data(geom, residual).expect("sizes match");
        let mut grad = system_matrix_adjoint(&res_sino, width, height, ps).expect("sizes match");
        grad.axpy(beta, &penalty_gradient(&f, delta));
        grad_out.copy_from_slice(grad.data());
        data_term + beta * penalty(&f, delta)
    };

    let opts = LbfgsOptions {
        memory: params.lbfgs_memory,
        max_iters: params.max_iters,
        // far below any gradient a noisy run reaches within the budget, but
        // lets an already-optimal start converge instead of grinding through
        // zero-length steps
        grad_tolerance: 1e-9,
    };
    let mut snapshots: Vec<(usize, Image)> = Vec::new();
    let snap_every = params.snapshot_every;
    let result = lbfgs::lbfgs_minimize(
        eval,
        init.data(),
        &opts,
        |iter, x, _| {
            if iter % snap_every == 0 {
                let img = Image::from_data(width, height, ps, x.to_vec()).expect("finite iterate");
                snapshots.push((iter, img));
            }
        },
    )?;

    if result.reason != StopReason::LineSearchFailed {
        // pad snapshots the optimizer converged past
        let final_img = Image::from_data(width, height, ps, result.x.clone())?;
        let mut iter = snap_every * (snapshots.len() + 1);
        while iter <= params.max_iters {
            snapshots.push((iter, final_img.clone()));
            iter += snap_every;
        }
    }

    Ok(PwlsSnapshots {
        init: init.clone(),
        snapshots,
        reason: result.reason,
        trace: result.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lbfgs::test_oracles::solve_dense;
    use crate::rng;
    use crate::scan::{self, default_num_bins, Ellipse, Phantom};
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64, scale: f64) -> Image {
        let mut r = rng::seeded(seed);
        Image::from_data(w, h, 1.0, (0..w * h).map(|_| scale * (r.gen::<f64>() - 0.5)).collect())
            .unwrap()
    }

    #[test]
    fn huber_matches_both_branches() {
        let delta = 0.02;
        assert_eq!(huber(0.0, delta), 0.0);
        assert_eq!(huber_deriv(0.0, delta), 0.0);
        // |x| = delta: both branches agree, derivative is +-delta
        let quad = 0.5 * delta * delta;
        let lin = delta * delta - 0.5 * delta * delta;
        assert!((quad - lin).abs() < 1e-18);
        assert!((huber(delta, delta) - quad).abs() < 1e-18);
        assert_eq!(huber_deriv(delta, delta), delta);
        assert_eq!(huber_deriv(-delta, delta), -delta);
        // worked value from the linear branch at delta = 0.02
        assert!((huber(0.04, 0.02) - 0.0006).abs() < 1e-15);
    }

    #[test]
    fn huber_is_even_and_convex() {
        let delta = 0.5;
        let mut r = rng::seeded(9);
        for _ in 0..200 {
            let x = 4.0 * (r.gen::<f64>() - 0.5);
            let y = 4.0 * (r.gen::<f64>() - 0.5);
            assert!((huber(x, delta) - huber(-x, delta)).abs() < 1e-15);
            let mid = huber(0.5 * (x + y), delta);
            let avg = 0.5 * (huber(x, delta) + huber(y, delta));
            assert!(mid <= avg + 1e-12, "convexity violated at {x}, {y}");
        }
    }

    #[test]
    fn huber_is_c1_at_the_threshold() {
        let delta = 0.3;
        let eps = 1e-9;
        for sign in [-1.0, 1.0] {
            let x = sign * delta;
            let left = (huber(x, delta) - huber(x - eps, delta)) / eps;
            let right = (huber(x + eps, delta) - huber(x, delta)) / eps;
            assert!((left - right).abs() < 1e-6, "kink at {x}: {left} vs {right}");
        }
    }

    #[test]
    fn penalty_of_constant_image_is_zero() {
        let img = Image::from_data(4, 3, 1.0, vec![2.5; 12]).unwrap();
        assert_eq!(penalty(&img, 0.1), 0.0);
        assert!(penalty_gradient(&img, 0.1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn penalty_two_pixel_case() {
        // [a, a+t] has one neighbor pair counted from both sides: 2 * t^2/2
        let t = 0.005;
        let img = Image::from_data(2, 1, 1.0, vec![1.0, 1.0 + t]).unwrap();
        let p = penalty(&img, 0.02);
        assert!((p - t * t).abs() < 1e-12 * t * t, "penalty {p}");
    }

    #[test]
    fn penalty_is_shift_invariant() {
        let img = random_image(8, 8, 12, 0.1);
        let shifted = img.map(|v| v + 5.0);
        let a = penalty(&img, 0.05);
        let b = penalty(&shifted, 0.05);
        assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let delta = 0.05;
        let img = random_image(16, 16, 21, 0.1);
        let grad = penalty_gradient(&img, delta);
        let h = 1e-6;
        let mut max_rel = 0.0f64;
        for i in (0..256).step_by(7) {
            let mut plus = img.clone();
            plus.data_mut()[i] += h;
            let mut minus = img.clone();
            minus.data_mut()[i] -= h;
            let fd = (penalty(&plus, delta) - penalty(&minus, delta)) / (2.0 * h);
            let g = grad.data()[i];
            let rel = (fd - g).abs() / (1.0 + g.abs());
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    fn small_problem(seed: u64) -> (Image, Sinogram, WeightMap, ScanGeometry) {
        let geom = ScanGeometry::new(12, default_num_bins(16, 16), 1.0, 1e5).unwrap();
        let f = random_image(16, 16, seed, 0.05);
        let mut r = rng::seeded(seed + 1);
        let g = Sinogram::from_data(
            geom,
            (0..geom.num_views() * geom.num_bins())
                .map(|_| 0.3 * r.gen::<f64>())
                .collect(),
        )
        .unwrap();
        let w = WeightMap::new(
            geom,
            (0..geom.num_views() * geom.num_bins())
                .map(|_| 0.2 + 0.8 * r.gen::<f64>())
                .collect(),
        )
        .unwrap();
        (f, g, w, geom)
    }

    #[test]
    fn objective_zero_on_zero_pair() {
        let geom = ScanGeometry::new(8, 49, 1.0, 1e5).unwrap();
        let f = Image::zeros(32, 32, 1.0);
        let g = Sinogram::zeros(geom);
        let w = WeightMap::new(geom, vec![1.0; 8 * 49]).unwrap();
        let params = PwlsParams::default();
        assert_eq!(pwls_objective(&f, &g, &w, &params).unwrap(), 0.0);
    }

    #[test]
    fn beta_zero_matches_direct_weighted_sum() {
        let (f, g, w, geom) = small_problem(31);
        let params = PwlsParams {
            beta: 1e-300, // validated positive; penalty contribution is negligible
            ..PwlsParams::default()
        };
        let obj = pwls_objective(&f, &g, &w, &params).unwrap();
        let af = scan::system_matrix_apply(&f, &geom).unwrap();
        let mut oracle = 0.0;
        for i in 0..af.data().len() {
            let r = af.data()[i] - g.data()[i];
            oracle += w.weights()[i] * r * r;
        }
        assert!((obj - oracle).abs() < 1e-12 * (1.0 + oracle));
    }

    #[test]
    fn pwls_gradient_matches_finite_differences() {
        let (f, g, w, _) = small_problem(41);
        let params = PwlsParams {
            beta: 0.01,
            delta: 0.02,
            ..PwlsParams::default()
        };
        let grad = pwls_gradient(&f, &g, &w, &params).unwrap();
        let h = 1e-6;
        let mut max_rel = 0.0f64;
        for i in (0..256).step_by(11) {
            let mut plus = f.clone();
            plus.data_mut()[i] += h;
            let mut minus = f.clone();
            minus.data_mut()[i] -= h;
            let fd = (pwls_objective(&plus, &g, &w, &params).unwrap()
                - pwls_objective(&minus, &g, &w, &params).unwrap())
                / (2.0 * h);
            let rel = (fd - grad.data()[i]).abs() / (1.0 + grad.data()[i].abs());
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn snapshot_schedule_and_padding() {
        // noiseless counts, truth init: objective ~0, snapshots stay at init
        let phantom = Phantom::new(vec![Ellipse {
            cx: 0.0,
            cy: 0.0,
            a: 10.0,
            b: 8.0,
            angle_deg: 15.0,
            value: 0.02,
        }]);
        let truth = scan::rasterize_phantom(&phantom, 32, 32, 1.0);
        let geom = ScanGeometry::new(24, default_num_bins(32, 32), 1.0, 1e5).unwrap();
        let sino = scan::radon_forward(&truth, &geom).unwrap();
        let counts = scan::simulate_counts(&sino, 0, true).unwrap();
        let params = PwlsParams {
            beta: 1e-300,
            delta: 0.02,
            max_iters: 90,
            snapshot_every: 10,
            lbfgs_memory: 10,
        };
        let out = pwls_reconstruct(&counts, &truth, &params).unwrap();
        assert_eq!(out.snapshots.len(), 9);
        let iters: Vec<usize> = out.snapshots.iter().map(|(i, _)| *i).collect();
        assert_eq!(iters, vec![10, 20, 30, 40, 50, 60, 70, 80, 90]);
        assert_eq!(out.init, truth);
        for (_, img) in &out.snapshots {
            for (a, b) in img.data().iter().zip(truth.data()) {
                assert!((a - b).abs() < 1e-8, "snapshot drifted from the optimum");
            }
        }
    }

    #[test]
    fn objective_is_monotone_on_a_noisy_run() {
        let phantom = Phantom::new(vec![Ellipse {
            cx: 0.0,
            cy: 0.0,
            a: 10.0,
            b: 10.0,
            angle_deg: 0.0,
            value: 0.02,
        }]);
        let truth = scan::rasterize_phantom(&phantom, 32, 32, 1.0);
        let geom = ScanGeometry::new(24, default_num_bins(32, 32), 1.0, 1e4).unwrap();
        let sino = scan::radon_forward(&truth, &geom).unwrap();
        let counts = scan::simulate_counts(&sino, 7, false).unwrap();
        let params = PwlsParams {
            beta: 1e-3,
            delta: 0.02,
            max_iters: 30,
            snapshot_every: 10,
            lbfgs_memory: 10,
        };
        let out = pwls_reconstruct(&counts, &Image::zeros(32, 32, 1.0), &params).unwrap();
        assert!(out.trace.len() >= 2);
        for w in out.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn beta_zero_minimizer_matches_normal_equations() {
        // dense oracle: assemble A column by column, solve A' D A x = A' D g
        let w_img = 10usize;
        let geom = ScanGeometry::new(16, default_num_bins(w_img, w_img), 1.0, 1e5).unwrap();
        let truth = random_image(w_img, w_img, 55, 0.05);
        let g = scan::system_matrix_apply(&truth, &geom).unwrap();
        let m = geom.num_views() * geom.num_bins();
        let n = w_img * w_img;
        let mut r = rng::seeded(56);
        let weights: Vec<f64> = (0..m).map(|_| 0.3 + 0.7 * r.gen::<f64>()).collect();
        let wmap = WeightMap::new(geom, weights.clone()).unwrap();

        let mut a_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        for j in 0..n {
            let mut e = Image::zeros(w_img, w_img, 1.0);
            e.data_mut()[j] = 1.0;
            a_cols.push(scan::system_matrix_apply(&e, &geom).unwrap().data().to_vec());
        }
        let mut ata = vec![vec![0.0; n]; n];
        let mut atb = vec![0.0; n];
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += weights[k] * a_cols[i][k] * a_cols[j][k];
                }
                ata[i][j] = acc;
                ata[j][i] = acc;
            }
            let mut acc = 0.0;
            for k in 0..m {
                acc += weights[k] * a_cols[i][k] * g.data()[k];
            }
            atb[i] = acc;
        }
        let oracle = solve_dense(&ata, &atb);

        let params = PwlsParams {
            beta: 1e-300,
            delta: 0.02,
            max_iters: 2000,
            snapshot_every: 2000,
            lbfgs_memory: 20,
        };
        let eval = |x: &[f64], grad: &mut [f64]| {
            let f = Image::from_data(w_img, w_img, 1.0, x.to_vec()).unwrap();
            let obj = pwls_objective(&f, &g, &wmap, &params).unwrap();
            let gr = pwls_gradient(&f, &g, &wmap, &params).unwrap();
            grad.copy_from_slice(gr.data());
            obj
        };
        let res = lbfgs::lbfgs_minimize(
            eval,
            &vec![0.0; n],
            &LbfgsOptions {
                memory: 20,
                max_iters: 2000,
                grad_tolerance: 1e-12,
            },
            |_, _, _| {},
        )
        .unwrap();
        let num: f64 = res
            .x
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-6, "relative distance to oracle {}", num / den);
    }
}
