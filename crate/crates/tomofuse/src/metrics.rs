//! Image quality assessment: scale-optimal SNR, windowed SNR, SSIM, object
//! masking and local-impulse-response resolution measurement.

use rayon::prelude::*;

use crate::error::{Result, TomoError};
use crate::image::Image;
use crate::rng;

/// SNR value returned when the residual is exactly zero.
pub const SNR_CAP_DB: f64 = 300.0;

/// Intensity window, Hounsfield-like units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuWindow {
    pub low: f64,
    pub high: f64,
}

impl HuWindow {
    pub fn new(low: f64, high: f64) -> Result<HuWindow> {
        if !(low < high) {
            return Err(TomoError::Input("window requires low < high".into()));
        }
        Ok(HuWindow { low, high })
    }

    /// The soft-tissue window used throughout the experiments.
    pub fn soft_tissue() -> HuWindow {
        HuWindow { low: -220.0, high: 350.0 }
    }

    pub fn span(&self) -> f64 {
        self.high - self.low
    }

    pub fn clip(&self, v: f64) -> f64 {
        v.clamp(self.low, self.high)
    }
}

/// Boolean raster marking the scanned object's support.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
    degenerate: bool,
}

impl ObjectMask {
    /// Whole-image mask.
    pub fn full(width: usize, height: usize) -> ObjectMask {
        ObjectMask {
            width,
            height,
            data: vec![true; width * height],
            degenerate: false,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    /// True when the histogram had a single mode and the mask fell back to
    /// the whole image.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

fn masked_pair<'a>(
    reference: &'a Image,
    estimate: &'a Image,
    mask: Option<&ObjectMask>,
) -> Result<Vec<(f64, f64)>> {
    if !reference.same_grid(estimate) {
        return Err(TomoError::Dimension("images differ in size".into()));
    }
    if let Some(m) = mask {
        if m.width != reference.width() || m.height != reference.height() {
            return Err(TomoError::Dimension("mask does not match the image".into()));
        }
        Ok(reference
            .data()
            .iter()
            .zip(estimate.data())
            .zip(m.data.iter())
            .filter(|(_, &keep)| keep)
            .map(|((&f, &g), _)| (f, g))
            .collect())
    } else {
        Ok(reference
            .data()
            .iter()
            .zip(estimate.data())
            .map(|(&f, &g)| (f, g))
            .collect())
    }
}

/// Scale-optimal signal-to-noise ratio in decibels.
///
/// Maximizes `-20 log10(|f - alpha g| / |f|)` over the multiplicative
/// constant; the maximizer is `alpha = <f,g>/|g|^2`. Capped at
/// [`SNR_CAP_DB`] when the residual vanishes.
pub fn snr(reference: &Image, estimate: &Image, mask: Option<&ObjectMask>) -> Result<f64> {
    let pairs = masked_pair(reference, estimate, mask)?;
    let ref_norm2: f64 = pairs.iter().map(|(f, _)| f * f).sum();
    if ref_norm2 == 0.0 {
        return Err(TomoError::Degenerate("reference is zero on the mask".into()));
    }
    let est_norm2: f64 = pairs.iter().map(|(_, g)| g * g).sum();
    let alpha = if est_norm2 > 0.0 {
        pairs.iter().map(|(f, g)| f * g).sum::<f64>() / est_norm2
    } else {
        0.0
    };
    let residual2: f64 = pairs.iter().map(|(f, g)| (f - alpha * g).powi(2)).sum();
    if residual2 == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    let value = -10.0 * (residual2 / ref_norm2).log10();
    Ok(value.min(SNR_CAP_DB))
}

/// SNR after clipping both images into the window.
pub fn windowed_snr(
    reference: &Image,
    estimate: &Image,
    window: &HuWindow,
    mask: Option<&ObjectMask>,
) -> Result<f64> {
    let f = reference.map(|v| window.clip(v));
    let g = estimate.map(|v| window.clip(v));
    snr(&f, &g, mask)
}

/// SSIM parameters: stabilizer factors, Gaussian window and the dynamic
/// range `L`. Defaults follow the reference implementation, with `L` set to
/// the span of the soft-tissue window.
#[derive(Debug, Clone, Copy)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub window: usize,
    pub sigma: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            k1: 0.01,
            k2: 0.03,
            window: 11,
            sigma: 1.5,
            dynamic_range: HuWindow::soft_tissue().span(),
        }
    }
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let half = (n as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-mode filtering; output is (w-n+1) x (h-n+1).
fn filter_valid(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = kernel.len();
    let ow = w - n + 1;
    // horizontal pass
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * data[r * w + c + k];
            }
            tmp[r * ow + c] = acc;
        }
    }
    // vertical pass
    let oh = h - n + 1;
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(r + k) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity over Gaussian-weighted local patches.
pub fn ssim(reference: &Image, estimate: &Image, params: &SsimParams) -> Result<f64> {
    if !reference.same_grid(estimate) {
        return Err(TomoError::Dimension("images differ in size".into()));
    }
    let w = reference.width();
    let h = reference.height();
    if w < params.window || h < params.window {
        return Err(TomoError::Dimension(format!(
            "image {w}x{h} smaller than the {0}x{0} SSIM window",
            params.window
        )));
    }
    let kernel = gaussian_window(params.window, params.sigma);
    let f = reference.data();
    let g = estimate.data();
    let ff: Vec<f64> = f.iter().map(|v| v * v).collect();
    let gg: Vec<f64> = g.iter().map(|v| v * v).collect();
    let fg: Vec<f64> = f.iter().zip(g).map(|(a, b)| a * b).collect();

    let (mu_f, ow, oh) = filter_valid(f, w, h, &kernel);
    let (mu_g, _, _) = filter_valid(g, w, h, &kernel);
    let (m_ff, _, _) = filter_valid(&ff, w, h, &kernel);
    let (m_gg, _, _) = filter_valid(&gg, w, h, &kernel);
    let (m_fg, _, _) = filter_valid(&fg, w, h, &kernel);

    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let mut acc = 0.0;
    for i in 0..ow * oh {
        let var_f = m_ff[i] - mu_f[i] * mu_f[i];
        let var_g = m_gg[i] - mu_g[i] * mu_g[i];
        let cov = m_fg[i] - mu_f[i] * mu_g[i];
        let num = (2.0 * mu_f[i] * mu_g[i] + c1) * (2.0 * cov + c2);
        let den = (mu_f[i] * mu_f[i] + mu_g[i] * mu_g[i] + c1) * (var_f + var_g + c2);
        acc += num / den;
    }
    Ok(acc / (ow * oh) as f64)
}

/// Threshold-based object mask: Otsu split, largest 4-connected component,
/// hole filling. A single-mode histogram degenerates to the whole image.
pub fn object_mask(image: &Image) -> ObjectMask {
    let w = image.width();
    let h = image.height();
    let data = image.data();
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return ObjectMask {
            width: w,
            height: h,
            data: vec![true; w * h],
            degenerate: true,
        };
    }

    // Otsu on a 256-bin histogram
    const BINS: usize = 256;
    let scale = BINS as f64 / (max - min);
    let mut hist = [0usize; BINS];
    for &v in data {
        let b = (((v - min) * scale) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = data.len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| i as f64 * n as f64)
        .sum::<f64>()
        / total;
    let mut best_t = 0usize;
    let mut best_var = -1.0;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..BINS - 1 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        if w0 == 0.0 || w0 == total {
            continue;
        }
        let w1 = total - w0;
        let mu0 = sum0 / w0;
        let mu1 = (total_mean * total - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best_var {
            best_var = between;
            best_t = t;
        }
    }
    if best_var <= 0.0 {
        return ObjectMask {
            width: w,
            height: h,
            data: vec![true; w * h],
            degenerate: true,
        };
    }
    let threshold = min + (best_t as f64 + 1.0) / scale;
    // the object is the brighter class
    let mut mask: Vec<bool> = data.iter().map(|&v| v >= threshold).collect();

    // keep the largest 4-connected object component
    let mut labels = vec![0u32; w * h];
    let mut sizes: Vec<usize> = vec![0];
    let mut stack = Vec::new();
    for start in 0..w * h {
        if mask[start] && labels[start] == 0 {
            let label = sizes.len() as u32;
            sizes.push(0);
            labels[start] = label;
            stack.push(start);
            while let Some(i) = stack.pop() {
                *sizes.last_mut().unwrap() += 1;
                let (r, c) = (i / w, i % w);
                let mut push = |j: usize| {
                    if mask[j] && labels[j] == 0 {
                        labels[j] = label;
                        stack.push(j);
                    }
                };
                if c > 0 {
                    push(i - 1);
                }
                if c + 1 < w {
                    push(i + 1);
                }
                if r > 0 {
                    push(i - w);
                }
                if r + 1 < h {
                    push(i + w);
                }
            }
        }
    }
    if let Some((largest, _)) = sizes.iter().enumerate().skip(1).max_by_key(|(_, &s)| s) {
        for i in 0..w * h {
            mask[i] = labels[i] == largest as u32;
        }
    }

    // fill holes: background is whatever non-object region touches the border
    let mut outside = vec![false; w * h];
    let mut stack = Vec::new();
    for c in 0..w {
        for &r in &[0, h - 1] {
            let i = r * w + c;
            if !mask[i] && !outside[i] {
                outside[i] = true;
                stack.push(i);
            }
        }
    }
    for r in 0..h {
        for &c in &[0, w - 1] {
            let i = r * w + c;
            if !mask[i] && !outside[i] {
                outside[i] = true;
                stack.push(i);
            }
        }
    }
    while let Some(i) = stack.pop() {
        let (r, c) = (i / w, i % w);
        let mut push = |j: usize| {
            if !mask[j] && !outside[j] {
                outside[j] = true;
                stack.push(j);
            }
        };
        if c > 0 {
            push(i - 1);
        }
        if c + 1 < w {
            push(i + 1);
        }
        if r > 0 {
            push(i - w);
        }
        if r + 1 < h {
            push(i + w);
        }
    }
    for i in 0..w * h {
        if !mask[i] && !outside[i] {
            mask[i] = true;
        }
    }

    ObjectMask {
        width: w,
        height: h,
        data: mask,
        degenerate: false,
    }
}

/// Bilinear upsampling by an integer factor with half-pixel centers.
fn upsample_bilinear(data: &[f64], w: usize, h: usize, factor: usize) -> (Vec<f64>, usize, usize) {
    let ow = w * factor;
    let oh = h * factor;
    let mut out = vec![0.0; ow * oh];
    let inv = 1.0 / factor as f64;
    for r in 0..oh {
        let y = ((r as f64 + 0.5) * inv - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for c in 0..ow {
            let x = ((c as f64 + 0.5) * inv - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            out[r * ow + c] = (1.0 - fy) * ((1.0 - fx) * data[y0 * w + x0] + fx * data[y0 * w + x1])
                + fy * ((1.0 - fx) * data[y1 * w + x0] + fx * data[y1 * w + x1]);
        }
    }
    (out, ow, oh)
}

/// Default spike amplitude for local impulse response probing.
pub const LIR_SPIKE_AMPLITUDE: f64 = 1000.0;
/// Upsampling factor used by the FWHM measure.
pub const LIR_UPSAMPLE: usize = 16;
/// Half-size of the patch cut around each probe.
const LIR_PATCH_RADIUS: usize = 16;

/// Draw probe locations uniformly from the mask interior, keeping a margin
/// from the image border.
pub fn sample_probe_locations(
    mask: &ObjectMask,
    count: usize,
    margin: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut rng = rng::seeded(seed);
    let mut out = Vec::with_capacity(count);
    let mut guard = 0usize;
    while out.len() < count && guard < 100_000 {
        guard += 1;
        let r = margin + (rng::uniform(&mut rng, 0.0, (mask.height - 2 * margin) as f64) as usize);
        let c = margin + (rng::uniform(&mut rng, 0.0, (mask.width - 2 * margin) as f64) as usize);
        if mask.at(r, c) {
            out.push((r, c));
        }
    }
    out
}

/// Full-width-half-maximum area of the local impulse response at each probe.
///
/// For each location the difference between reconstructing the reference
/// with and without a single-pixel spike is upsampled 16x per axis and the
/// number of samples above half of the peak is divided by 256. The value is
/// an area in original-pixel units.
pub fn lir_fwhm<F>(
    reconstruct: F,
    reference: &Image,
    probes: &[(usize, usize)],
    amplitude: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&Image) -> Result<Image> + Sync,
{
    let base = reconstruct(reference)?;
    if !base.same_grid(reference) {
        return Err(TomoError::Dimension(
            "reconstructor changed the image size".into(),
        ));
    }
    probes
        .par_iter()
        .map(|&(pr, pc)| {
            let mut spiked = reference.clone();
            *spiked.at_mut(pr, pc) += amplitude;
            let recon = reconstruct(&spiked)?;
            // LIR patch around the probe
            let w = reference.width();
            let h = reference.height();
            let r0 = pr.saturating_sub(LIR_PATCH_RADIUS);
            let r1 = (pr + LIR_PATCH_RADIUS + 1).min(h);
            let c0 = pc.saturating_sub(LIR_PATCH_RADIUS);
            let c1 = (pc + LIR_PATCH_RADIUS + 1).min(w);
            let pw = c1 - c0;
            let ph = r1 - r0;
            let mut patch = vec![0.0; pw * ph];
            for r in r0..r1 {
                for c in c0..c1 {
                    patch[(r - r0) * pw + (c - c0)] = recon.at(r, c) - base.at(r, c);
                }
            }
            let peak = patch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !(peak > 0.0) {
                return Err(TomoError::Degenerate(format!(
                    "impulse response at ({pr},{pc}) has non-positive peak {peak}"
                )));
            }
            let (up, uw, uh) = upsample_bilinear(&patch, pw, ph, LIR_UPSAMPLE);
            let half = 0.5 * peak;
            let count = up[..uw * uh].iter().filter(|&&v| v > half).count();
            Ok(count as f64 / (LIR_UPSAMPLE * LIR_UPSAMPLE) as f64)
        })
        .collect()
}
