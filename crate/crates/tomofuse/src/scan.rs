//! Scan model: phantoms, parallel-beam forward projection, photon counts.
//!
//! The projector is a Joseph-style line integral: for each view the rays are
//! swept along their dominant axis one row (or column) at a time, and the
//! image is sampled with linear interpolation between the two pixel centers
//! straddling the ray. The adjoint uses the very same interpolation weights
//! gathered per pixel, so `apply`/`adjoint` form an exact algebraic transpose
//! pair up to floating-point rounding.

use rayon::prelude::*;

use crate::error::{Result, TomoError};
use crate::image::Image;
use crate::rng;

/// Linear attenuation of water per unit length (pixel-size units).
///
/// Used by [`hu_to_mu`] / [`mu_to_hu`] to move between the Hounsfield-like
/// scale of phantoms and the attenuation scale the scan integrates.
pub const MU_WATER: f64 = 0.02;

/// Photon floor applied before the log transform when a detector bin
/// records zero counts.
pub const COUNT_FLOOR: f64 = 1.0;

/// Parallel-beam scan geometry: uniformly spaced angles on `[0, pi)`,
/// detector centered on the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanGeometry {
    num_views: usize,
    num_bins: usize,
    bin_spacing: f64,
    blank_count: f64,
}

impl ScanGeometry {
    pub fn new(num_views: usize, num_bins: usize, bin_spacing: f64, blank_count: f64) -> Result<ScanGeometry> {
        if num_views < 1 || num_bins < 1 {
            return Err(TomoError::Input("views and bins must be >= 1".into()));
        }
        if !(bin_spacing > 0.0) || !bin_spacing.is_finite() {
            return Err(TomoError::Input("bin_spacing must be > 0".into()));
        }
        if !(blank_count > 0.0) || !blank_count.is_finite() {
            return Err(TomoError::Input("blank_count must be > 0".into()));
        }
        Ok(ScanGeometry {
            num_views,
            num_bins,
            bin_spacing,
            blank_count,
        })
    }

    pub fn num_views(&self) -> usize {
        self.num_views
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn bin_spacing(&self) -> f64 {
        self.bin_spacing
    }

    pub fn blank_count(&self) -> f64 {
        self.blank_count
    }

    /// Angle of view `v` in radians.
    #[inline]
    pub fn angle(&self, v: usize) -> f64 {
        v as f64 * std::f64::consts::PI / self.num_views as f64
    }

    /// Signed detector offset of bin `b`.
    #[inline]
    pub fn bin_offset(&self, b: usize) -> f64 {
        (b as f64 - (self.num_bins as f64 - 1.0) / 2.0) * self.bin_spacing
    }
}

/// Detector sample count that covers the full diagonal of a `w x h` image,
/// matching the usual discrete Radon sizing convention.
pub fn default_num_bins(width: usize, height: usize) -> usize {
    let ax = width as f64 - ((width as f64 - 1.0) / 2.0).floor() - 1.0;
    let ay = height as f64 - ((height as f64 - 1.0) / 2.0).floor() - 1.0;
    2 * ax.hypot(ay).ceil() as usize + 3
}

/// Views x bins matrix of line integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    geometry: ScanGeometry,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(geometry: ScanGeometry) -> Sinogram {
        Sinogram {
            geometry,
            data: vec![0.0; geometry.num_views * geometry.num_bins],
        }
    }

    pub fn from_data(geometry: ScanGeometry, data: Vec<f64>) -> Result<Sinogram> {
        if data.len() != geometry.num_views * geometry.num_bins {
            return Err(TomoError::Dimension(format!(
                "sinogram data length {} != {} views x {} bins",
                data.len(),
                geometry.num_views,
                geometry.num_bins
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TomoError::Input("sinogram contains non-finite values".into()));
        }
        Ok(Sinogram { geometry, data })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, view: usize, bin: usize) -> f64 {
        self.data[view * self.geometry.num_bins + bin]
    }

    /// One view as a contiguous slice of bins.
    pub fn view(&self, v: usize) -> &[f64] {
        let b = self.geometry.num_bins;
        &self.data[v * b..(v + 1) * b]
    }
}

/// Views x bins matrix of (possibly noisy) photon counts.
#[derive(Debug, Clone)]
pub struct CountsData {
    geometry: ScanGeometry,
    counts: Vec<f64>,
}

impl CountsData {
    pub fn from_data(geometry: ScanGeometry, counts: Vec<f64>) -> Result<CountsData> {
        if counts.len() != geometry.num_views * geometry.num_bins {
            return Err(TomoError::Dimension("counts size does not match geometry".into()));
        }
        if !counts.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(TomoError::Input("counts must be finite and non-negative".into()));
        }
        Ok(CountsData { geometry, counts })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }
}

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

/// One additive ellipse of a phantom, in physical units with the origin at
/// the image center and y pointing up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle_deg: f64,
    pub value: f64,
}

impl Ellipse {
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let phi = self.angle_deg.to_radians();
        let (sin_p, cos_p) = phi.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let xr = dx * cos_p + dy * sin_p;
        let yr = -dx * sin_p + dy * cos_p;
        (xr / self.a).powi(2) + (yr / self.b).powi(2) <= 1.0
    }
}

/// Additive-ellipse phantom over a constant background.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Phantom {
    pub background: f64,
    pub ellipses: Vec<Ellipse>,
}

impl Phantom {
    pub fn new(ellipses: Vec<Ellipse>) -> Phantom {
        Phantom {
            background: 0.0,
            ellipses,
        }
    }

    /// HU-adapted head phantom in the classic ten-ellipse layout, scaled so
    /// the outer shell has semi-axes `0.69 * fov_radius` by `0.92 * fov_radius`.
    /// Background is air, the shell is bone, the interior is soft tissue with
    /// faint internal features.
    pub fn shepp_logan(fov_radius: f64) -> Phantom {
        let r = fov_radius;
        let e = |cx: f64, cy: f64, a: f64, b: f64, ang: f64, v: f64| Ellipse {
            cx: cx * r,
            cy: cy * r,
            a: a * r,
            b: b * r,
            angle_deg: ang,
            value: v,
        };
        Phantom {
            background: -1000.0,
            ellipses: vec![
                e(0.0, 0.0, 0.69, 0.92, 0.0, 2000.0),
                e(0.0, -0.0184, 0.6624, 0.874, 0.0, -1960.0),
                e(0.22, 0.0, 0.11, 0.31, -18.0, -60.0),
                e(-0.22, 0.0, 0.16, 0.41, 18.0, -60.0),
                e(0.0, 0.35, 0.21, 0.25, 0.0, 30.0),
                e(0.0, 0.1, 0.046, 0.046, 0.0, 30.0),
                e(0.0, -0.1, 0.046, 0.046, 0.0, 30.0),
                e(-0.08, -0.605, 0.046, 0.023, 0.0, 30.0),
                e(0.0, -0.605, 0.023, 0.023, 0.0, 30.0),
                e(0.06, -0.605, 0.023, 0.046, 0.0, 30.0),
            ],
        }
    }

    /// Seeded soft-tissue slice: an elliptical tissue cross-section over an
    /// air background, with bone inclusions, air cavities and faint lesions
    /// at +-30..80 HU contrast.
    pub fn random_tissue(seed: u64, fov_radius: f64) -> Phantom {
        let mut r = rng::seeded(seed);
        let fr = fov_radius;

        let tissue_a = rng::uniform(&mut r, 0.62, 0.80) * fr;
        let tissue_b = rng::uniform(&mut r, 0.70, 0.88) * fr;
        let tissue_angle = rng::uniform(&mut r, -30.0, 30.0);
        let tissue_hu = rng::uniform(&mut r, 20.0, 60.0);
        let mut ellipses = vec![Ellipse {
            cx: 0.0,
            cy: 0.0,
            a: tissue_a,
            b: tissue_b,
            angle_deg: tissue_angle,
            value: 1000.0 + tissue_hu,
        }];

        // interior features stay well inside the tissue ellipse
        let inner = 0.55 * tissue_a.min(tissue_b);
        let place = |r: &mut rng::TomoRng, max_ax: f64, min_ax: f64| {
            let rho = inner * rng::uniform(r, 0.0, 1.0).sqrt();
            let phi = rng::uniform(r, 0.0, std::f64::consts::TAU);
            let a = rng::uniform(r, min_ax, max_ax) * fr;
            let b = rng::uniform(r, min_ax, max_ax) * fr;
            let ang = rng::uniform(r, 0.0, 180.0);
            (rho * phi.cos(), rho * phi.sin(), a, b, ang)
        };

        let n_bone = 2 + (rng::uniform(&mut r, 0.0, 2.0) as usize);
        for _ in 0..n_bone {
            let (cx, cy, a, b, ang) = place(&mut r, 0.14, 0.05);
            let v = rng::uniform(&mut r, 1100.0, 1260.0);
            ellipses.push(Ellipse { cx, cy, a, b, angle_deg: ang, value: v });
        }

        let n_air = 1 + (rng::uniform(&mut r, 0.0, 2.0) as usize);
        for _ in 0..n_air {
            let (cx, cy, a, b, ang) = place(&mut r, 0.09, 0.03);
            let v = -(1000.0 + tissue_hu) - rng::uniform(&mut r, 0.0, 20.0);
            ellipses.push(Ellipse { cx, cy, a, b, angle_deg: ang, value: v });
        }

        let n_lesion = 4 + (rng::uniform(&mut r, 0.0, 4.0) as usize);
        for _ in 0..n_lesion {
            let (cx, cy, a, b, ang) = place(&mut r, 0.08, 0.02);
            let mag = rng::uniform(&mut r, 30.0, 80.0);
            let v = if rng::uniform(&mut r, 0.0, 1.0) < 0.5 { mag } else { -mag };
            ellipses.push(Ellipse { cx, cy, a, b, angle_deg: ang, value: v });
        }

        Phantom {
            background: -1000.0,
            ellipses,
        }
    }
}

/// Rasterize a phantom: each pixel receives the background plus the sum of
/// the values of every ellipse containing the pixel center.
pub fn rasterize_phantom(phantom: &Phantom, width: usize, height: usize, pixel_size: f64) -> Image {
    let mut img = Image::zeros(width, height, pixel_size);
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    for row in 0..height {
        let y = (cy - row as f64) * pixel_size;
        for col in 0..width {
            let x = (col as f64 - cx) * pixel_size;
            let mut v = phantom.background;
            for e in &phantom.ellipses {
                if e.contains(x, y) {
                    v += e.value;
                }
            }
            *img.at_mut(row, col) = v;
        }
    }
    img
}

/// Hounsfield-like scale to linear attenuation, clamped at zero below air.
pub fn hu_to_mu(image: &Image) -> Image {
    image.map(|hu| (MU_WATER * (1.0 + hu / 1000.0)).max(0.0))
}

/// Linear attenuation back to the Hounsfield-like scale.
pub fn mu_to_hu(image: &Image) -> Image {
    image.map(|mu| 1000.0 * (mu / MU_WATER - 1.0))
}

// ---------------------------------------------------------------------------
// Forward projection and its adjoint
// ---------------------------------------------------------------------------

struct ViewFrame {
    sin_t: f64,
    cos_t: f64,
    // step rows when the ray direction is closer to vertical, columns otherwise
    drive_rows: bool,
    seg_len: f64,
}

impl ViewFrame {
    fn new(theta: f64, pixel_size: f64) -> ViewFrame {
        let (sin_t, cos_t) = theta.sin_cos();
        let drive_rows = cos_t.abs() >= sin_t.abs();
        let seg_len = if drive_rows {
            pixel_size / cos_t.abs()
        } else {
            pixel_size / sin_t.abs()
        };
        ViewFrame {
            sin_t,
            cos_t,
            drive_rows,
            seg_len,
        }
    }
}

/// Fractional column hit by ray `s` on the line of constant `y`.
#[inline]
fn col_at(s: f64, y: f64, frame: &ViewFrame, inv_ps: f64, cx: f64) -> f64 {
    ((s - y * frame.sin_t) / frame.cos_t) * inv_ps + cx
}

/// Fractional row hit by ray `s` on the line of constant `x`.
#[inline]
fn row_at(s: f64, x: f64, frame: &ViewFrame, inv_ps: f64, cy: f64) -> f64 {
    ((s - x * frame.cos_t) / frame.sin_t) * inv_ps + cy
}

fn check_fov(image_width: usize, image_height: usize, pixel_size: f64, geometry: &ScanGeometry) -> Result<()> {
    let fov = image_width.min(image_height) as f64 * pixel_size;
    let detector = geometry.num_bins as f64 * geometry.bin_spacing;
    if detector + 1e-9 < fov {
        return Err(TomoError::Dimension(format!(
            "detector extent {detector} does not cover the field of view {fov}"
        )));
    }
    Ok(())
}

/// Discrete Radon transform of `image` under `geometry`.
///
/// Identical to [`system_matrix_apply`]; the reconstruction modules use the
/// matched pair, direct callers usually want this name.
pub fn radon_forward(image: &Image, geometry: &ScanGeometry) -> Result<Sinogram> {
    system_matrix_apply(image, geometry)
}

/// Apply the system matrix `A` (Joseph projector) to an image.
pub fn system_matrix_apply(image: &Image, geometry: &ScanGeometry) -> Result<Sinogram> {
    check_fov(image.width(), image.height(), image.pixel_size(), geometry)?;
    let w = image.width();
    let h = image.height();
    let ps = image.pixel_size();
    let inv_ps = 1.0 / ps;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let nb = geometry.num_bins;
    let geom = *geometry;
    let data = image.data();

    let mut sino = Sinogram::zeros(geom);
    sino.data_mut()
        .par_chunks_mut(nb)
        .enumerate()
        .for_each(|(v, out_view)| {
            let frame = ViewFrame::new(geom.angle(v), ps);
            if frame.drive_rows {
                for row in 0..h {
                    let y = (row as f64 - cy) * ps;
                    let base = row * w;
                    for (b, out) in out_view.iter_mut().enumerate() {
                        let col = col_at(geom.bin_offset(b), y, &frame, inv_ps, cx);
                        let c0 = col.floor();
                        let frac = col - c0;
                        let c0 = c0 as isize;
                        let c1 = c0 + 1;
                        let mut acc = 0.0;
                        if c0 >= 0 && (c0 as usize) < w {
                            acc += (1.0 - frac) * data[base + c0 as usize];
                        }
                        if c1 >= 0 && (c1 as usize) < w {
                            acc += frac * data[base + c1 as usize];
                        }
                        *out += acc;
                    }
                }
            } else {
                for colu in 0..w {
                    let x = (colu as f64 - cx) * ps;
                    for (b, out) in out_view.iter_mut().enumerate() {
                        let row = row_at(geom.bin_offset(b), x, &frame, inv_ps, cy);
                        let r0 = row.floor();
                        let frac = row - r0;
                        let r0 = r0 as isize;
                        let r1 = r0 + 1;
                        let mut acc = 0.0;
                        if r0 >= 0 && (r0 as usize) < h {
                            acc += (1.0 - frac) * data[r0 as usize * w + colu];
                        }
                        if r1 >= 0 && (r1 as usize) < h {
                            acc += frac * data[r1 as usize * w + colu];
                        }
                        *out += acc;
                    }
                }
            }
            for out in out_view.iter_mut() {
                *out *= frame.seg_len;
            }
        });
    Ok(sino)
}

/// Apply the exact transpose of the system matrix to a sinogram.
///
/// Gathers, per pixel, every interpolation weight the forward pass would
/// scatter to it, so `<A f, g> == <f, At g>` up to rounding.
pub fn system_matrix_adjoint(sino: &Sinogram, width: usize, height: usize, pixel_size: f64) -> Result<Image> {
    let geom = *sino.geometry();
    check_fov(width, height, pixel_size, &geom)?;
    let ps = pixel_size;
    let inv_ps = 1.0 / ps;
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let nb = geom.num_bins;
    let s0 = geom.bin_offset(0);
    let inv_ds = 1.0 / geom.bin_spacing;

    let frames: Vec<ViewFrame> = (0..geom.num_views)
        .map(|v| ViewFrame::new(geom.angle(v), ps))
        .collect();

    let mut img = Image::zeros(width, height, ps);
    img.data_mut()
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(row, out_row)| {
            let y = (row as f64 - cy) * ps;
            for (col, out) in out_row.iter_mut().enumerate() {
                let x = (col as f64 - cx) * ps;
                let mut acc = 0.0;
                for (v, frame) in frames.iter().enumerate() {
                    let view = &sino.data()[v * nb..(v + 1) * nb];
                    if frame.drive_rows {
                        // rays of this view cross our row once; bins whose
                        // crossing lands within one column of us contribute
                        let s_lo = ((col as f64 - 1.0 - cx) * ps) * frame.cos_t + y * frame.sin_t;
                        let s_hi = ((col as f64 + 1.0 - cx) * ps) * frame.cos_t + y * frame.sin_t;
                        let (s_min, s_max) = if s_lo <= s_hi { (s_lo, s_hi) } else { (s_hi, s_lo) };
                        let b_min = ((s_min - s0) * inv_ds).floor().max(0.0) as usize;
                        let b_max = (((s_max - s0) * inv_ds).ceil().max(0.0) as usize).min(nb - 1);
                        let mut sum = 0.0;
                        for b in b_min..=b_max {
                            let cf = col_at(geom.bin_offset(b), y, frame, inv_ps, cx);
                            let d = cf - col as f64;
                            let wgt = 1.0 - d.abs();
                            if wgt > 0.0 {
                                sum += wgt * view[b];
                            }
                        }
                        acc += sum * frame.seg_len;
                    } else {
                        let s_lo = x * frame.cos_t + ((row as f64 - 1.0 - cy) * ps) * frame.sin_t;
                        let s_hi = x * frame.cos_t + ((row as f64 + 1.0 - cy) * ps) * frame.sin_t;
                        let (s_min, s_max) = if s_lo <= s_hi { (s_lo, s_hi) } else { (s_hi, s_lo) };
                        let b_min = ((s_min - s0) * inv_ds).floor().max(0.0) as usize;
                        let b_max = (((s_max - s0) * inv_ds).ceil().max(0.0) as usize).min(nb - 1);
                        let mut sum = 0.0;
                        for b in b_min..=b_max {
                            let rf = row_at(geom.bin_offset(b), x, frame, inv_ps, cy);
                            let d = rf - row as f64;
                            let wgt = 1.0 - d.abs();
                            if wgt > 0.0 {
                                sum += wgt * view[b];
                            }
                        }
                        acc += sum * frame.seg_len;
                    }
                }
                *out = acc;
            }
        });
    Ok(img)
}

// ---------------------------------------------------------------------------
// Photon statistics
// ---------------------------------------------------------------------------

/// Ideal or Poisson-noisy photon counts for a sinogram.
///
/// The ideal count in each bin is `blank_count * exp(-g)`. With noise, each
/// bin draws from its own seeded sub-stream, so the result is independent of
/// evaluation order and reproducible from `seed`.
pub fn simulate_counts(sino: &Sinogram, seed: u64, noiseless: bool) -> Result<CountsData> {
    let geom = *sino.geometry();
    let lambda0 = geom.blank_count();
    if !sino.data().iter().all(|v| v.is_finite()) {
        return Err(TomoError::Input("sinogram contains non-finite values".into()));
    }
    let counts: Vec<f64> = if noiseless {
        sino.data().iter().map(|&g| lambda0 * (-g).exp()).collect()
    } else {
        sino.data()
            .par_iter()
            .enumerate()
            .map(|(i, &g)| {
                let lambda = lambda0 * (-g).exp();
                let mut r = rng::child(seed, i as u64);
                rng::poisson(&mut r, lambda)
            })
            .collect()
    };
    CountsData::from_data(geom, counts)
}

/// Log-transform counts back to the sinogram domain, with the zero-count
/// floor of [`COUNT_FLOOR`] photons.
pub fn counts_to_sinogram(counts: &CountsData) -> Sinogram {
    let geom = *counts.geometry();
    let lambda0 = geom.blank_count();
    let data: Vec<f64> = counts
        .counts()
        .iter()
        .map(|&y| -(y.max(COUNT_FLOOR) / lambda0).ln())
        .collect();
    Sinogram { geometry: geom, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn disk_phantom(radius: f64, value: f64) -> Phantom {
        Phantom::new(vec![Ellipse {
            cx: 0.0,
            cy: 0.0,
            a: radius,
            b: radius,
            angle_deg: 0.0,
            value,
        }])
    }

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut r = rng::seeded(seed);
        let data = (0..w * h).map(|_| r.gen::<f64>() - 0.5).collect();
        Image::from_data(w, h, 1.0, data).unwrap()
    }

    fn random_sino(geom: ScanGeometry, seed: u64) -> Sinogram {
        let mut r = rng::seeded(seed);
        let data = (0..geom.num_views() * geom.num_bins())
            .map(|_| r.gen::<f64>() - 0.5)
            .collect();
        Sinogram::from_data(geom, data).unwrap()
    }

    #[test]
    fn rasterize_empty_phantom_is_zero() {
        let img = rasterize_phantom(&Phantom::default(), 16, 16, 1.0);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rasterize_disk_containment() {
        let img = rasterize_phantom(&disk_phantom(32.0, 1.0), 128, 128, 1.0);
        assert_eq!(img.at(64, 64), 1.0);
        assert_eq!(img.at(0, 0), 0.0);
    }

    #[test]
    fn rasterize_overlap_is_additive() {
        let p = Phantom::new(vec![
            Ellipse { cx: 0.0, cy: 0.0, a: 20.0, b: 20.0, angle_deg: 0.0, value: 0.5 },
            Ellipse { cx: 5.0, cy: 0.0, a: 20.0, b: 10.0, angle_deg: 30.0, value: 0.3 },
        ]);
        let img = rasterize_phantom(&p, 64, 64, 1.0);
        let center = img.at(32, 32);
        assert!((center - 0.8).abs() < 1e-12, "overlap value {center}");
    }

    #[test]
    fn default_bins_match_radon_convention() {
        assert_eq!(default_num_bins(256, 256), 367);
        assert_eq!(default_num_bins(32, 32), 49);
    }

    #[test]
    fn radon_zero_image_is_zero() {
        let geom = ScanGeometry::new(24, 49, 1.0, 1e5).unwrap();
        let sino = radon_forward(&Image::zeros(32, 32, 1.0), &geom).unwrap();
        assert!(sino.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radon_is_homogeneous() {
        let geom = ScanGeometry::new(24, 49, 1.0, 1e5).unwrap();
        let f = random_image(32, 32, 3);
        let f2 = f.map(|v| 2.0 * v);
        let g1 = radon_forward(&f, &geom).unwrap();
        let g2 = radon_forward(&f2, &geom).unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn radon_is_additive() {
        let geom = ScanGeometry::new(24, 49, 1.0, 1e5).unwrap();
        let f = random_image(32, 32, 5);
        let g = random_image(32, 32, 6);
        let mut fg = f.clone();
        fg.axpy(1.0, &g);
        let lhs = radon_forward(&fg, &geom).unwrap();
        let rf = radon_forward(&f, &geom).unwrap();
        let rg = radon_forward(&g, &geom).unwrap();
        for i in 0..lhs.data().len() {
            let want = rf.data()[i] + rg.data()[i];
            assert!((lhs.data()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn radon_disk_matches_chord_length() {
        // acceptance-scale oracle: 2*sqrt(R^2 - s^2) for |s| < 0.9 R
        let radius = 100.0;
        let img = rasterize_phantom(&disk_phantom(radius, 1.0), 256, 256, 1.0);
        let geom = ScanGeometry::new(360, 367, 1.0, 1e5).unwrap();
        let sino = radon_forward(&img, &geom).unwrap();
        let mut max_rel = 0.0f64;
        for v in 0..geom.num_views() {
            for b in 0..geom.num_bins() {
                let s = geom.bin_offset(b);
                if s.abs() < 0.9 * radius {
                    let chord = 2.0 * (radius * radius - s * s).sqrt();
                    let rel = (sino.at(v, b) - chord).abs() / chord;
                    max_rel = max_rel.max(rel);
                }
            }
        }
        assert!(max_rel < 0.02, "max relative chord error {max_rel}");
    }

    #[test]
    fn radon_agrees_with_dense_sampling_oracle() {
        // independent discretization: nearest-neighbor sampling at 0.01 px steps
        let img = rasterize_phantom(&disk_phantom(10.0, 1.0), 32, 32, 1.0);
        let geom = ScanGeometry::new(8, 49, 1.0, 1e5).unwrap();
        let sino = radon_forward(&img, &geom).unwrap();
        let cx = 15.5;
        let cy = 15.5;
        for &(v, b) in &[(0usize, 24usize), (3, 20), (5, 28), (7, 24)] {
            let theta = geom.angle(v);
            let s = geom.bin_offset(b);
            let (sin_t, cos_t) = theta.sin_cos();
            let step = 0.01;
            let mut oracle = 0.0;
            let mut t = -24.0;
            while t < 24.0 {
                let x = s * cos_t - t * sin_t;
                let y = s * sin_t + t * cos_t;
                let col = (x + cx).round();
                let row = (y + cy).round();
                if col >= 0.0 && col < 32.0 && row >= 0.0 && row < 32.0 {
                    oracle += step * img.at(row as usize, col as usize);
                }
                t += step;
            }
            assert!(
                (sino.at(v, b) - oracle).abs() < 0.35,
                "view {v} bin {b}: joseph {} vs dense {}",
                sino.at(v, b),
                oracle
            );
        }
    }

    #[test]
    fn impulse_traces_a_sine_curve() {
        let mut img = Image::zeros(40, 40, 1.0);
        let (pr, pc) = (12usize, 27usize);
        *img.at_mut(pr, pc) = 1.0;
        let geom = ScanGeometry::new(24, default_num_bins(40, 40), 1.0, 1e5).unwrap();
        let sino = system_matrix_apply(&img, &geom).unwrap();
        let x = pc as f64 - 19.5;
        let y = pr as f64 - 19.5;
        for v in 0..geom.num_views() {
            let theta = geom.angle(v);
            let s_pred = x * theta.cos() + y * theta.sin();
            let mut mass_near = 0.0;
            let mut mass_far = 0.0;
            for b in 0..geom.num_bins() {
                let d = (geom.bin_offset(b) - s_pred).abs();
                if d <= 2.0 {
                    mass_near += sino.at(v, b);
                } else {
                    mass_far += sino.at(v, b).abs();
                }
            }
            assert!(mass_near > 0.5, "view {v} has no mass near the sine curve");
            assert!(mass_far < 1e-12, "view {v} has mass off the curve: {mass_far}");
        }
    }

    #[test]
    fn adjoint_of_zero_is_zero() {
        let geom = ScanGeometry::new(24, 49, 1.0, 1e5).unwrap();
        let img = system_matrix_adjoint(&Sinogram::zeros(geom), 32, 32, 1.0).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_identity_on_random_pairs() {
        let geom = ScanGeometry::new(24, 49, 1.0, 1e5).unwrap();
        for trial in 0..20 {
            let f = random_image(32, 32, 100 + trial);
            let g = random_sino(geom, 200 + trial);
            let af = system_matrix_apply(&f, &geom).unwrap();
            let atg = system_matrix_adjoint(&g, 32, 32, 1.0).unwrap();
            let lhs: f64 = af.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = f.data().iter().zip(atg.data()).map(|(a, b)| a * b).sum();
            let af_norm = af.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let g_norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let rel = (lhs - rhs).abs() / (af_norm * g_norm);
            assert!(rel < 1e-10, "trial {trial}: adjoint discrepancy {rel}");
        }
    }

    #[test]
    fn mass_consistency_per_view() {
        // smooth blob: sum over bins * bin_spacing ~ image mass * pixel area
        let mut img = Image::zeros(64, 64, 1.0);
        for r in 0..64 {
            for c in 0..64 {
                let dx = c as f64 - 31.5;
                let dy = r as f64 - 31.5;
                *img.at_mut(r, c) = (-(dx * dx + dy * dy) / (2.0 * 8.0 * 8.0)).exp();
            }
        }
        let geom = ScanGeometry::new(16, default_num_bins(64, 64), 1.0, 1e5).unwrap();
        let sino = radon_forward(&img, &geom).unwrap();
        let mass = img.sum() * img.pixel_size() * img.pixel_size() / geom.bin_spacing();
        for v in 0..geom.num_views() {
            let view_sum: f64 = sino.view(v).iter().sum();
            assert!(
                (view_sum - mass).abs() / mass < 0.01,
                "view {v}: {view_sum} vs mass {mass}"
            );
        }
    }

    #[test]
    fn noiseless_counts_equal_lambda() {
        let geom = ScanGeometry::new(4, 8, 1.0, 2e5).unwrap();
        let sino = Sinogram::zeros(geom);
        let counts = simulate_counts(&sino, 0, true).unwrap();
        assert!(counts.counts().iter().all(|&y| y == 2e5));
    }

    #[test]
    fn counts_are_reproducible_from_seed() {
        let geom = ScanGeometry::new(6, 10, 1.0, 1e4).unwrap();
        let sino = random_sino(geom, 9);
        let a = simulate_counts(&sino, 77, false).unwrap();
        let b = simulate_counts(&sino, 77, false).unwrap();
        assert_eq!(a.counts(), b.counts());
        let c = simulate_counts(&sino, 78, false).unwrap();
        assert_ne!(a.counts(), c.counts());
    }

    #[test]
    fn poisson_moments_at_lambda_1000() {
        // lambda = 1000 via g = ln(lambda0/lambda)
        let n = 100_000usize;
        let geom = ScanGeometry::new(100, 1000, 1.0, 1e5).unwrap();
        let g = (1e5f64 / 1e3).ln();
        let sino = Sinogram::from_data(geom, vec![g; n]).unwrap();
        let counts = simulate_counts(&sino, 5, false).unwrap();
        let mean = counts.counts().iter().sum::<f64>() / n as f64;
        let var = counts
            .counts()
            .iter()
            .map(|&y| (y - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let tol = 3.0 * (1000.0f64 / n as f64).sqrt();
        assert!((mean - 1000.0).abs() < tol, "mean {mean}");
        assert!((var - 1000.0).abs() / 1000.0 < 0.1, "variance {var}");
    }

    #[test]
    fn log_transform_at_blank_count_is_zero() {
        let geom = ScanGeometry::new(2, 3, 1.0, 1e5).unwrap();
        let counts = CountsData::from_data(geom, vec![1e5; 6]).unwrap();
        let sino = counts_to_sinogram(&counts);
        assert!(sino.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noiseless_round_trip_recovers_sinogram() {
        let geom = ScanGeometry::new(6, 10, 1.0, 2e5).unwrap();
        let sino = random_sino(geom, 13);
        // keep line integrals positive so counts stay above the floor
        let sino = Sinogram::from_data(geom, sino.data().iter().map(|v| v.abs()).collect()).unwrap();
        let counts = simulate_counts(&sino, 0, true).unwrap();
        let back = counts_to_sinogram(&counts);
        for (a, b) in sino.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_count_clamp() {
        let geom = ScanGeometry::new(1, 1, 1.0, 1e5).unwrap();
        let counts = CountsData::from_data(geom, vec![0.0]).unwrap();
        let sino = counts_to_sinogram(&counts);
        assert!((sino.data()[0] - (1e5f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn noise_std_tracks_inverse_sqrt_lambda() {
        // std(g_hat - g) ~ lambda^{-1/2} within 15% for lambda >= 100
        for &lambda in &[100.0f64, 1000.0, 10000.0] {
            let n = 100_000usize;
            let geom = ScanGeometry::new(100, 1000, 1.0, 1e6).unwrap();
            let g = (1e6 / lambda).ln();
            let sino = Sinogram::from_data(geom, vec![g; n]).unwrap();
            let counts = simulate_counts(&sino, 21, false).unwrap();
            let ghat = counts_to_sinogram(&counts);
            let mut ss = 0.0;
            for &v in ghat.data() {
                ss += (v - g) * (v - g);
            }
            let std = (ss / n as f64).sqrt();
            let want = lambda.powf(-0.5);
            assert!(
                (std - want).abs() / want < 0.15,
                "lambda {lambda}: std {std} vs {want}"
            );
        }
    }

    #[test]
    fn hu_mu_round_trip() {
        let img = Image::from_data(2, 2, 1.0, vec![-1000.0, 0.0, 40.0, 1200.0]).unwrap();
        let mu = hu_to_mu(&img);
        assert_eq!(mu.data()[0], 0.0);
        assert!((mu.data()[1] - MU_WATER).abs() < 1e-15);
        let back = mu_to_hu(&mu);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn random_tissue_is_seeded_and_distinct() {
        let a = Phantom::random_tissue(1, 128.0);
        let b = Phantom::random_tissue(1, 128.0);
        let c = Phantom::random_tissue(2, 128.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
