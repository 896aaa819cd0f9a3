//! Filtered back-projection with a Ram-Lak ramp and Butterworth low-pass.
//!
//! Filtering is a frequency-domain multiplication per view: the projection is
//! padded to the next power of two at least twice the bin count (the pad is
//! filled by edge replication, which coincides with zero-padding for
//! projections that vanish at the detector ends and keeps the ramp's exact
//! null at DC), its spectrum is scaled by `|nu| * butterworth_gain(omega)`,
//! and the first `num_bins` samples of the inverse transform are kept.
//! Frequencies are normalized so `omega = 1` is the Nyquist rate of the bin
//! sampling; the ramp keeps physical units so reconstructions come out on
//! the scale of the projected image.

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Result, TomoError};
use crate::image::Image;
use crate::scan::Sinogram;

/// Butterworth low-pass parameters: cut-off in normalized frequency units
/// (`f64::INFINITY` means no low-pass) and roll-off order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    pub cutoff: f64,
    pub order: u32,
}

impl FilterParams {
    pub fn new(cutoff: f64, order: u32) -> Result<FilterParams> {
        if !(cutoff > 0.0) {
            return Err(TomoError::Input("cutoff must be positive or infinite".into()));
        }
        if order < 1 {
            return Err(TomoError::Input("order must be >= 1".into()));
        }
        Ok(FilterParams { cutoff, order })
    }
}

/// Ordered list of distinct filter settings used for a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank(Vec<FilterParams>);

impl FilterBank {
    pub fn new(params: Vec<FilterParams>) -> Result<FilterBank> {
        if params.is_empty() {
            return Err(TomoError::Input("filter bank must be non-empty".into()));
        }
        for i in 0..params.len() {
            for j in i + 1..params.len() {
                if params[i] == params[j] {
                    return Err(TomoError::Input("filter bank entries must be distinct".into()));
                }
            }
        }
        Ok(FilterBank(params))
    }

    /// The sweep used throughout the FBP fusion experiments:
    /// cut-offs 0.4, 1.15 and no low-pass, all with order 3.
    pub fn fbp_default() -> FilterBank {
        FilterBank(vec![
            FilterParams { cutoff: 0.4, order: 3 },
            FilterParams { cutoff: 1.15, order: 3 },
            FilterParams { cutoff: f64::INFINITY, order: 3 },
        ])
    }

    pub fn params(&self) -> &[FilterParams] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `(1 + (omega/cutoff)^(2p))^(-1/2)`; identically 1 for an infinite cutoff.
pub fn butterworth_gain(omega: f64, params: &FilterParams) -> f64 {
    debug_assert!(omega >= 0.0);
    if params.cutoff.is_infinite() {
        return 1.0;
    }
    (1.0 + (omega / params.cutoff).powi(2 * params.order as i32)).powf(-0.5)
}

fn padded_len(num_bins: usize) -> usize {
    (2 * num_bins).next_power_of_two()
}

/// Ramp-and-low-pass filter one projection.
///
/// Output has the length of the input and is linear in it.
pub fn filter_projection(view: &[f64], params: &FilterParams, bin_spacing: f64) -> Vec<f64> {
    let nb = view.len();
    let n = padded_len(nb);
    let mut buf: Vec<Complex<f64>> = Vec::with_capacity(n);
    buf.extend(view.iter().map(|&v| Complex::new(v, 0.0)));
    // pad by edge replication: the right edge continues forward, the left
    // edge wraps in from the end of the circular buffer
    let pad = n - nb;
    let right_len = pad / 2;
    buf.extend(std::iter::repeat(Complex::new(view[nb - 1], 0.0)).take(right_len));
    buf.extend(std::iter::repeat(Complex::new(view[0], 0.0)).take(pad - right_len));

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    fft.process(&mut buf);

    // bin m <= n/2 sits at physical frequency m/(n*bin_spacing) and
    // normalized frequency 2m/n; the upper half mirrors.
    for (m, value) in buf.iter_mut().enumerate() {
        let k = if m <= n / 2 { m } else { n - m } as f64;
        let nu = k / (n as f64 * bin_spacing);
        let omega = 2.0 * k / n as f64;
        *value *= nu * butterworth_gain(omega, params);
    }

    ifft.process(&mut buf);
    let scale = 1.0 / n as f64;
    buf[..nb].iter().map(|c| c.re * scale).collect()
}

/// Pixel-driven back-projection: each pixel accumulates the linearly
/// interpolated view value at `s = x cos(theta) + y sin(theta)`, scaled by
/// `pi / num_views`.
pub fn backproject(sino: &Sinogram, width: usize, height: usize, pixel_size: f64) -> Result<Image> {
    let geom = *sino.geometry();
    let nb = geom.num_bins();
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let ds = geom.bin_spacing();
    let half = (nb as f64 - 1.0) / 2.0;
    let weight = std::f64::consts::PI / geom.num_views() as f64;

    let trig: Vec<(f64, f64)> = (0..geom.num_views())
        .map(|v| geom.angle(v).sin_cos())
        .collect();

    let mut img = Image::zeros(width, height, pixel_size);
    img.data_mut()
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(row, out_row)| {
            let y = (row as f64 - cy) * pixel_size;
            for (col, out) in out_row.iter_mut().enumerate() {
                let x = (col as f64 - cx) * pixel_size;
                let mut acc = 0.0;
                for (v, &(sin_t, cos_t)) in trig.iter().enumerate() {
                    let s = x * cos_t + y * sin_t;
                    let u = s / ds + half;
                    let u0 = u.floor();
                    let frac = u - u0;
                    let b0 = u0 as isize;
                    let view = &sino.data()[v * nb..(v + 1) * nb];
                    let mut val = 0.0;
                    if b0 >= 0 && (b0 as usize) < nb {
                        val += (1.0 - frac) * view[b0 as usize];
                    }
                    let b1 = b0 + 1;
                    if b1 >= 0 && (b1 as usize) < nb {
                        val += frac * view[b1 as usize];
                    }
                    acc += val;
                }
                *out = acc * weight;
            }
        });
    Ok(img)
}

/// Full FBP reconstruction: filter every view, then back-project.
pub fn fbp_reconstruct(
    sino: &Sinogram,
    params: &FilterParams,
    width: usize,
    height: usize,
    pixel_size: f64,
) -> Result<Image> {
    let geom = *sino.geometry();
    let nb = geom.num_bins();
    let mut filtered = Sinogram::zeros(geom);
    let ds = geom.bin_spacing();
    let views: Vec<Vec<f64>> = (0..geom.num_views())
        .into_par_iter()
        .map(|v| filter_projection(sino.view(v), params, ds))
        .collect();
    for (v, fv) in views.into_iter().enumerate() {
        filtered.data_mut()[v * nb..(v + 1) * nb].copy_from_slice(&fv);
    }
    backproject(&filtered, width, height, pixel_size)
}

/// One reconstruction per filter in the bank, order preserved, all computed
/// from the same sinogram.
pub fn fbp_sweep(
    sino: &Sinogram,
    bank: &FilterBank,
    width: usize,
    height: usize,
    pixel_size: f64,
) -> Result<Vec<Image>> {
    bank.params()
        .iter()
        .map(|p| fbp_reconstruct(sino, p, width, height, pixel_size))
        .collect()
}
