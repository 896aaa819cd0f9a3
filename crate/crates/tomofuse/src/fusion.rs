//! Local fusion of image stacks through a trained network.
//!
//! Training examples pair disk-shaped neighborhoods extracted from every
//! version in a stack (the feature vector) with the reference values on an
//! output disk. Examples with nearly constant features (air) are discarded;
//! examples on the very strongest reference edges keep weight zero; the rest
//! are weighted by their accumulated reference gradient. At inference time
//! the network's output disks are scattered over the image and overlapping
//! contributions are averaged.

use ndarray::Array2;
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TomoError};
use crate::fbp::{fbp_sweep, FilterBank};
use crate::image::Image;
use crate::nn::{self, NeuralNet, TrainingSet};
use crate::pwls::{pwls_reconstruct, PwlsParams};
use crate::rng;
use crate::scan::{counts_to_sinogram, mu_to_hu, CountsData};

/// Pixel offsets of the disk of a given radius, ordered row-major
/// (by `dy`, then `dx`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiskOffsets {
    radius: usize,
    offsets: Vec<(isize, isize)>,
}

impl DiskOffsets {
    pub fn new(radius: usize) -> DiskOffsets {
        let r = radius as isize;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    offsets.push((dy, dx));
                }
            }
        }
        DiskOffsets { radius, offsets }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn count(&self) -> usize {
        self.offsets.len()
    }
}

/// Fusion configuration: one neighborhood radius per stack image, the output
/// disk radius, the training grid stride and the pruning factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub radii: Vec<usize>,
    pub output_radius: usize,
    pub stride: usize,
    pub variance_prune_factor: f64,
    pub gradient_prune_factor: f64,
    /// Cap on retained examples; a seeded uniform subsample applies beyond it.
    pub max_examples: usize,
    pub seed: u64,
}

impl FusionConfig {
    /// Stack of three FBP versions, radius-3 disks in and out.
    pub fn fbp_default() -> FusionConfig {
        FusionConfig {
            radii: vec![3, 3, 3],
            output_radius: 3,
            stride: 3,
            variance_prune_factor: 1e-6,
            gradient_prune_factor: 0.02,
            max_examples: 30_000,
            seed: 0,
        }
    }

    /// Three PWLS snapshots with radii 4, 1, 4 and a single-pixel output.
    pub fn pwls_default() -> FusionConfig {
        FusionConfig {
            radii: vec![4, 1, 4],
            output_radius: 0,
            stride: 3,
            variance_prune_factor: 1e-6,
            gradient_prune_factor: 0.02,
            max_examples: 30_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() {
            return Err(TomoError::Input("need at least one stack radius".into()));
        }
        if self.stride < 1 {
            return Err(TomoError::Input("stride must be >= 1".into()));
        }
        for f in [self.variance_prune_factor, self.gradient_prune_factor] {
            if !(f > 0.0 && f < 1.0) {
                return Err(TomoError::Input("prune factors must be in (0, 1)".into()));
            }
        }
        if self.max_examples < 1 {
            return Err(TomoError::Input("max_examples must be >= 1".into()));
        }
        Ok(())
    }

    /// Total feature length for a full stack.
    pub fn feature_len(&self) -> usize {
        self.radii.iter().map(|&r| DiskOffsets::new(r).count()).sum()
    }

    /// Output vector length.
    pub fn target_len(&self) -> usize {
        DiskOffsets::new(self.output_radius).count()
    }

    /// Border margin the training grid must respect.
    pub fn margin(&self) -> usize {
        self.radii
            .iter()
            .cloned()
            .chain(std::iter::once(self.output_radius))
            .max()
            .unwrap()
    }
}

/// Values of the disk around `q`, in the fixed offset order. The disk must
/// fit inside the image.
pub fn extract_disk(image: &Image, q: (usize, usize), radius: usize) -> Result<Vec<f64>> {
    let (row, col) = q;
    let r = radius as isize;
    if (row as isize) < r
        || (col as isize) < r
        || row as isize + r >= image.height() as isize
        || col as isize + r >= image.width() as isize
    {
        return Err(TomoError::OutOfBounds(format!(
            "disk of radius {radius} at ({row},{col}) leaves the image"
        )));
    }
    let disk = DiskOffsets::new(radius);
    Ok(disk
        .offsets()
        .iter()
        .map(|&(dy, dx)| image.at((row as isize + dy) as usize, (col as isize + dx) as usize))
        .collect())
}

/// Disk extraction with clamp-to-edge replication, for inference over the
/// whole image including borders.
fn extract_disk_clamped(image: &Image, q: (usize, usize), disk: &DiskOffsets, out: &mut Vec<f64>) {
    let (row, col) = (q.0 as isize, q.1 as isize);
    let h = image.height() as isize;
    let w = image.width() as isize;
    for &(dy, dx) in disk.offsets() {
        let r = (row + dy).clamp(0, h - 1);
        let c = (col + dx).clamp(0, w - 1);
        out.push(image.at(r as usize, c as usize));
    }
}

/// Concatenate the per-version disks at `q` in stack order.
pub fn build_features(stack: &[Image], q: (usize, usize), radii: &[usize]) -> Result<Vec<f64>> {
    if stack.len() != radii.len() {
        return Err(TomoError::Dimension(format!(
            "{} images but {} radii",
            stack.len(),
            radii.len()
        )));
    }
    let mut features = Vec::new();
    for (image, &radius) in stack.iter().zip(radii) {
        features.extend(extract_disk(image, q, radius)?);
    }
    Ok(features)
}

/// Sum of central-difference gradient magnitudes of `reference` over the
/// output disk at `q`. Differences are clamped at the image border.
pub fn accumulated_gradient(reference: &Image, q: (usize, usize), output_radius: usize) -> f64 {
    let disk = DiskOffsets::new(output_radius);
    let h = reference.height() as isize;
    let w = reference.width() as isize;
    let mut acc = 0.0;
    for &(dy, dx) in disk.offsets() {
        let r = q.0 as isize + dy;
        let c = q.1 as isize + dx;
        let rp = (r + 1).min(h - 1) as usize;
        let rm = (r - 1).max(0) as usize;
        let cp = (c + 1).min(w - 1) as usize;
        let cm = (c - 1).max(0) as usize;
        let gy = 0.5 * (reference.at(rp, c as usize) - reference.at(rm, c as usize));
        let gx = 0.5 * (reference.at(r as usize, cp) - reference.at(r as usize, cm));
        acc += gx.hypot(gy);
    }
    acc
}

fn feature_variance(features: &[f64]) -> f64 {
    let n = features.len() as f64;
    let mean = features.iter().sum::<f64>() / n;
    features.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Example weight from the pruning rules, given the dataset-level maxima:
/// zero below the variance floor, zero above the gradient cap, otherwise
/// proportional to the accumulated gradient.
pub fn compute_example_weight(
    features: &[f64],
    accumulated_gradient: f64,
    max_variance: f64,
    max_gradient: f64,
    cfg: &FusionConfig,
) -> f64 {
    if feature_variance(features) < cfg.variance_prune_factor * max_variance {
        return 0.0;
    }
    if max_gradient <= 0.0 {
        return 0.0;
    }
    if accumulated_gradient > cfg.gradient_prune_factor * max_gradient {
        return 0.0;
    }
    accumulated_gradient / max_gradient
}

/// One stack of reconstructions plus the reference they approximate.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub stack: Vec<Image>,
    pub reference: Image,
}

/// Grid coordinates along one axis: `margin + k * stride` for
/// `k < floor((size - 2 margin) / stride)`.
pub fn grid_positions(size: usize, margin: usize, stride: usize) -> Vec<usize> {
    if size < 2 * margin {
        return Vec::new();
    }
    let count = (size - 2 * margin) / stride;
    (0..count).map(|k| margin + k * stride).collect()
}

/// Assemble the training set from one or more `(stack, reference)` pairs.
///
/// Grid-sampled candidates with feature variance below the floor are
/// dropped; candidates above the gradient cap stay with weight zero; the
/// survivors are weighted by accumulated gradient. Features are normalized
/// and the constants recorded on the returned set.
pub fn build_training_set(pairs: &[TrainingPair], cfg: &FusionConfig) -> Result<TrainingSet> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TomoError::Input("no training pairs".into()));
    }
    let margin = cfg.margin();
    let m = cfg.feature_len();
    let n_out = cfg.target_len();
    let out_disk = DiskOffsets::new(cfg.output_radius);

    struct Candidate {
        features: Vec<f64>,
        targets: Vec<f64>,
        variance: f64,
        grad: f64,
    }

    let mut candidates: Vec<Candidate> = Vec::new();
    for (pi, pair) in pairs.iter().enumerate() {
        if pair.stack.len() != cfg.radii.len() {
            return Err(TomoError::Dimension(format!(
                "pair {pi}: stack size {} != {} radii",
                pair.stack.len(),
                cfg.radii.len()
            )));
        }
        for img in pair.stack.iter() {
            if !img.same_grid(&pair.reference) {
                return Err(TomoError::Dimension(format!(
                    "pair {pi}: stack and reference grids differ"
                )));
            }
        }
        let rows = grid_positions(pair.reference.height(), margin, cfg.stride);
        let cols = grid_positions(pair.reference.width(), margin, cfg.stride);
        let mut pair_cands: Vec<Candidate> = rows
            .par_iter()
            .flat_map_iter(|&r| {
                let pair = &*pair;
                let cols = &cols;
                let out_disk = &out_disk;
                cols.iter().map(move |&c| {
                    let features =
                        build_features(&pair.stack, (r, c), &cfg.radii).expect("margin respected");
                    let targets: Vec<f64> = out_disk
                        .offsets()
                        .iter()
                        .map(|&(dy, dx)| {
                            pair.reference
                                .at((r as isize + dy) as usize, (c as isize + dx) as usize)
                        })
                        .collect();
                    let variance = feature_variance(&features);
                    let grad = accumulated_gradient(&pair.reference, (r, c), cfg.output_radius);
                    Candidate {
                        features,
                        targets,
                        variance,
                        grad,
                    }
                })
            })
            .collect();
        candidates.append(&mut pair_cands);
    }

    let max_var = candidates.iter().map(|c| c.variance).fold(0.0, f64::max);
    let max_grad = candidates.iter().map(|c| c.grad).fold(0.0, f64::max);

    // air pruning drops the example; edge capping keeps it at weight zero
    let mut retained: Vec<Candidate> = candidates
        .into_iter()
        .filter(|c| c.variance >= cfg.variance_prune_factor * max_var)
        .collect();
    if retained.is_empty() || max_grad <= 0.0 {
        return Err(TomoError::EmptyDataset);
    }
    if !retained
        .iter()
        .any(|c| c.grad <= cfg.gradient_prune_factor * max_grad && c.grad > 0.0)
    {
        return Err(TomoError::EmptyDataset);
    }

    if retained.len() > cfg.max_examples {
        // seeded uniform subsample, original order kept
        let mut idx: Vec<usize> = (0..retained.len()).collect();
        let mut r = rng::child(cfg.seed, 3);
        for i in 0..cfg.max_examples {
            let j = i + (rng::uniform(&mut r, 0.0, (idx.len() - i) as f64) as usize)
                .min(idx.len() - i - 1);
            idx.swap(i, j);
        }
        let mut keep: Vec<usize> = idx[..cfg.max_examples].to_vec();
        keep.sort_unstable();
        let mut picked = Vec::with_capacity(cfg.max_examples);
        let mut iter = retained.into_iter();
        let mut next = 0usize;
        for (i, cand) in iter.by_ref().enumerate() {
            if next < keep.len() && keep[next] == i {
                picked.push(cand);
                next += 1;
            }
        }
        retained = picked;
    }

    let k = retained.len();
    let mut inputs = Array2::zeros((k, m));
    let mut targets = Array2::zeros((k, n_out));
    let mut weights = Vec::with_capacity(k);
    for (i, cand) in retained.iter().enumerate() {
        for (j, &v) in cand.features.iter().enumerate() {
            inputs[(i, j)] = v;
        }
        for (j, &v) in cand.targets.iter().enumerate() {
            targets[(i, j)] = v;
        }
        let w = if cand.grad > cfg.gradient_prune_factor * max_grad {
            0.0
        } else {
            cand.grad / max_grad
        };
        weights.push(w);
    }

    let (alpha1, alpha2) = nn::normalize_fit(&inputs)?;
    nn::normalize_apply(&mut inputs, alpha1, alpha2);
    let mut set = TrainingSet::new(inputs, targets, weights)?;
    set.norm_shift = alpha1;
    set.norm_scale = alpha2;
    Ok(set)
}

fn fuse_parts(stack: &[Image], net: &NeuralNet, cfg: &FusionConfig) -> Result<(Image, Vec<f64>)> {
    cfg.validate()?;
    if stack.len() != cfg.radii.len() {
        return Err(TomoError::Dimension(format!(
            "{} images but {} radii",
            stack.len(),
            cfg.radii.len()
        )));
    }
    if net.num_inputs() != cfg.feature_len() || net.num_outputs() != cfg.target_len() {
        return Err(TomoError::Dimension(format!(
            "network {}->{} does not fit features {} -> outputs {}",
            net.num_inputs(),
            net.num_outputs(),
            cfg.feature_len(),
            cfg.target_len()
        )));
    }
    let first = &stack[0];
    for img in stack.iter().skip(1) {
        if !img.same_grid(first) {
            return Err(TomoError::Dimension("stack grids differ".into()));
        }
    }
    let w = first.width();
    let h = first.height();
    let disks: Vec<DiskOffsets> = cfg.radii.iter().map(|&r| DiskOffsets::new(r)).collect();
    let out_disk = DiskOffsets::new(cfg.output_radius);
    let shift = net.norm_shift();
    let scale = net.norm_scale();

    // per-pixel network outputs, then a sequential overlap-average scatter
    let outputs: Vec<Vec<f64>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let q = (i / w, i % w);
            let mut features = Vec::with_capacity(cfg.feature_len());
            for (img, disk) in stack.iter().zip(&disks) {
                extract_disk_clamped(img, q, disk, &mut features);
            }
            nn::normalize_apply_slice(&mut features, shift, scale);
            net.forward(&features).expect("sizes validated")
        })
        .collect();

    let mut acc = vec![0.0f64; w * h];
    let mut counts = vec![0.0f64; w * h];
    for (i, out) in outputs.iter().enumerate() {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for (&(dy, dx), &v) in out_disk.offsets().iter().zip(out) {
            let rr = r + dy;
            let cc = c + dx;
            if rr >= 0 && rr < h as isize && cc >= 0 && cc < w as isize {
                let j = rr as usize * w + cc as usize;
                acc[j] += v;
                counts[j] += 1.0;
            }
        }
    }
    for (a, n) in acc.iter_mut().zip(&counts) {
        *a /= n;
    }
    Ok((Image::from_data(w, h, first.pixel_size(), acc)?, counts))
}

/// Fuse a stack of image versions into one image with the trained network.
///
/// Every pixel is visited (borders use clamp-to-edge feature extraction),
/// the output disks are scattered and overlapping contributions averaged.
/// With `output_radius = 0` each pixel is the network's single output.
pub fn fuse(stack: &[Image], net: &NeuralNet, cfg: &FusionConfig) -> Result<Image> {
    fuse_parts(stack, net, cfg).map(|(img, _)| img)
}

/// Counts-to-fused-image pipeline over an FBP filter sweep. Reconstructions
/// are converted to the Hounsfield-like scale before fusion.
pub fn end_to_end_fbp_boost(
    counts: &CountsData,
    bank: &FilterBank,
    net: &NeuralNet,
    cfg: &FusionConfig,
    width: usize,
    height: usize,
    pixel_size: f64,
) -> Result<Image> {
    let sino = counts_to_sinogram(counts);
    let stack: Vec<Image> = fbp_sweep(&sino, bank, width, height, pixel_size)?
        .iter()
        .map(mu_to_hu)
        .collect();
    fuse(&stack, net, cfg)
}

/// Counts-to-fused-image pipeline over PWLS iteration snapshots.
pub fn end_to_end_pwls_boost(
    counts: &CountsData,
    init: &Image,
    params: &PwlsParams,
    snapshot_iters: &[usize],
    net: &NeuralNet,
    cfg: &FusionConfig,
) -> Result<Image> {
    let out = pwls_reconstruct(counts, init, params)?;
    let stack: Vec<Image> = snapshot_iters
        .iter()
        .map(|&it| {
            out.at_iteration(it).map(mu_to_hu).ok_or_else(|| {
                TomoError::Numerical(format!(
                    "snapshot at iteration {it} unavailable (optimizer stopped early)"
                ))
            })
        })
        .collect::<Result<_>>()?;
    fuse(&stack, net, cfg)
}

// ---------------------------------------------------------------------------
// Dataset file format
// ---------------------------------------------------------------------------

const DATASET_MAGIC: &[u8] = b"TFDS1\n";

/// Write a training set as `TFDS1`: magic, an ASCII header with the counts
/// and normalization constants, then one little-endian f64 record
/// `rho | X... | Y...` per example.
pub fn write_dataset(path: &Path, set: &TrainingSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    let header = format!(
        "examples={} inputs={} outputs={} alpha1={} alpha2={}\n",
        set.len(),
        set.inputs.ncols(),
        set.targets.ncols(),
        set.norm_shift,
        set.norm_scale
    );
    w.write_all(header.as_bytes())?;
    for k in 0..set.len() {
        w.write_all(&set.example_weights[k].to_le_bytes())?;
        for v in set.inputs.row(k) {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in set.targets.row(k) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a `TFDS1` training set.
pub fn read_dataset(path: &Path) -> Result<TrainingSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| TomoError::Parse {
        line: 1,
        msg: "file too short for TFDS1 magic".into(),
    })?;
    if magic != DATASET_MAGIC {
        return Err(TomoError::Parse {
            line: 1,
            msg: "missing TFDS1 magic".into(),
        });
    }
    let mut header = String::new();
    r.read_line(&mut header)?;
    let mut examples = None;
    let mut inputs_n = None;
    let mut outputs_n = None;
    let mut alpha1 = None;
    let mut alpha2 = None;
    for field in header.trim_end().split(' ') {
        let (k, v) = field.split_once('=').ok_or_else(|| TomoError::Parse {
            line: 2,
            msg: format!("malformed header field `{field}`"),
        })?;
        match k {
            "examples" => examples = v.parse().ok(),
            "inputs" => inputs_n = v.parse().ok(),
            "outputs" => outputs_n = v.parse().ok(),
            "alpha1" => alpha1 = v.parse().ok(),
            "alpha2" => alpha2 = v.parse().ok(),
            _ => {
                return Err(TomoError::Parse {
                    line: 2,
                    msg: format!("unknown header key `{k}`"),
                })
            }
        }
    }
    let (k, m, n, a1, a2) = match (examples, inputs_n, outputs_n, alpha1, alpha2) {
        (Some(k), Some(m), Some(n), Some(a1), Some(a2)) => (k, m, n, a1, a2),
        _ => {
            return Err(TomoError::Parse {
                line: 2,
                msg: "header must define examples, inputs, outputs, alpha1, alpha2".into(),
            })
        }
    };
    let record = 1 + m + n;
    let mut payload = vec![0u8; k * record * 8];
    r.read_exact(&mut payload).map_err(|_| TomoError::Parse {
        line: 3,
        msg: format!("payload truncated, expected {k} records of {record} floats"),
    })?;
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut inputs = Array2::zeros((k, m));
    let mut targets = Array2::zeros((k, n));
    let mut weights = Vec::with_capacity(k);
    for i in 0..k {
        let base = i * record;
        weights.push(floats[base]);
        for j in 0..m {
            inputs[(i, j)] = floats[base + 1 + j];
        }
        for j in 0..n {
            targets[(i, j)] = floats[base + 1 + m + j];
        }
    }
    let mut set = TrainingSet::new(inputs, targets, weights)?;
    set.norm_shift = a1;
    set.norm_scale = a2;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::scan::{rasterize_phantom, Ellipse, Phantom};
    use rand::Rng;

    fn noisy_disk_image(w: usize, h: usize, seed: u64) -> Image {
        let phantom = Phantom {
            background: -1000.0,
            ellipses: vec![
                Ellipse { cx: 0.0, cy: 0.0, a: 0.4 * w as f64, b: 0.35 * h as f64, angle_deg: 10.0, value: 1040.0 },
                Ellipse { cx: 4.0, cy: 3.0, a: 3.0, b: 2.0, angle_deg: 0.0, value: 60.0 },
                Ellipse { cx: -6.0, cy: -2.0, a: 2.5, b: 2.5, angle_deg: 0.0, value: -50.0 },
            ],
        };
        let mut img = rasterize_phantom(&phantom, w, h, 1.0);
        let mut r = rng::seeded(seed);
        for v in img.data_mut() {
            *v += 20.0 * (r.gen::<f64>() - 0.5);
        }
        img
    }

    #[test]
    fn disk_cardinalities() {
        let want = [1usize, 5, 13, 29, 49];
        for (r, &n) in want.iter().enumerate() {
            assert_eq!(DiskOffsets::new(r).count(), n, "radius {r}");
        }
    }

    #[test]
    fn disk_ordering_is_row_major() {
        let disk = DiskOffsets::new(1);
        assert_eq!(
            disk.offsets(),
            &[(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)]
        );
        assert_eq!(DiskOffsets::new(0).offsets(), &[(0, 0)]);
    }

    #[test]
    fn extract_disk_basics() {
        let mut img = Image::zeros(9, 9, 1.0);
        *img.at_mut(4, 4) = 7.0;
        assert_eq!(extract_disk(&img, (4, 4), 0).unwrap(), vec![7.0]);
        assert_eq!(extract_disk(&img, (4, 4), 3).unwrap().len(), 29);
        let constant = Image::from_data(9, 9, 1.0, vec![3.0; 81]).unwrap();
        assert!(extract_disk(&constant, (4, 4), 4)
            .unwrap()
            .iter()
            .all(|&v| v == 3.0));
        assert!(matches!(
            extract_disk(&img, (1, 4), 3),
            Err(TomoError::OutOfBounds(_))
        ));
    }

    #[test]
    fn feature_lengths_match_the_configurations() {
        let imgs: Vec<Image> = (0..3).map(|s| noisy_disk_image(16, 16, s)).collect();
        let fbp = build_features(&imgs, (8, 8), &[3, 3, 3]).unwrap();
        assert_eq!(fbp.len(), 87);
        let pwls = build_features(&imgs, (8, 8), &[4, 1, 4]).unwrap();
        assert_eq!(pwls.len(), 103);
        assert_eq!(FusionConfig::fbp_default().feature_len(), 87);
        assert_eq!(FusionConfig::pwls_default().feature_len(), 103);
        assert_eq!(FusionConfig::fbp_default().target_len(), 29);
        assert_eq!(FusionConfig::pwls_default().target_len(), 1);
    }

    #[test]
    fn features_are_stack_order_covariant() {
        let imgs: Vec<Image> = (0..3).map(|s| noisy_disk_image(16, 16, 10 + s)).collect();
        let radii = [3usize, 1, 2];
        let base = build_features(&imgs, (8, 8), &radii).unwrap();
        let perm = [2usize, 0, 1];
        let pimgs: Vec<Image> = perm.iter().map(|&i| imgs[i].clone()).collect();
        let pradii: Vec<usize> = perm.iter().map(|&i| radii[i]).collect();
        let permuted = build_features(&pimgs, (8, 8), &pradii).unwrap();
        // offsets of each block in the original concatenation
        let counts: Vec<usize> = radii.iter().map(|&r| DiskOffsets::new(r).count()).collect();
        let starts = [0, counts[0], counts[0] + counts[1]];
        let mut expected = Vec::new();
        for &i in &perm {
            expected.extend_from_slice(&base[starts[i]..starts[i] + counts[i]]);
        }
        assert_eq!(permuted, expected);
    }

    #[test]
    fn example_weight_rules() {
        let cfg = FusionConfig::fbp_default();
        let constant = vec![5.0; 87];
        assert_eq!(compute_example_weight(&constant, 1.0, 10.0, 100.0, &cfg), 0.0);
        let mut r = rng::seeded(1);
        let varied: Vec<f64> = (0..87).map(|_| r.gen::<f64>() * 100.0).collect();
        // strongest edge in the pool: pruned to zero weight
        assert_eq!(compute_example_weight(&varied, 100.0, 10.0, 100.0, &cfg), 0.0);
        // mid-strength edge: proportional weight
        let w = compute_example_weight(&varied, 1.0, 10.0, 100.0, &cfg);
        assert!((w - 0.01).abs() < 1e-15);
    }

    #[test]
    fn grid_count_formula() {
        assert_eq!(grid_positions(256, 3, 3).len(), 83);
        assert_eq!(grid_positions(256, 3, 3).len().pow(2), 6889);
        let pos = grid_positions(30, 4, 3);
        assert_eq!(pos, vec![4, 7, 10, 13, 16, 19, 22]);
    }

    #[test]
    fn training_set_assembly_and_weights() {
        let stack: Vec<Image> = (0..3).map(|s| noisy_disk_image(48, 48, 20 + s)).collect();
        let reference = noisy_disk_image(48, 48, 99);
        let cfg = FusionConfig {
            stride: 3,
            ..FusionConfig::fbp_default()
        };
        let pairs = vec![TrainingPair { stack, reference }];
        let set = build_training_set(&pairs, &cfg).unwrap();
        assert!(set.len() > 0);
        assert_eq!(set.inputs.ncols(), 87);
        assert_eq!(set.targets.ncols(), 29);
        // normalization applied: inputs span [0, 1]
        let min = set.inputs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = set.inputs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
        assert!(set.norm_scale > 0.0);
        assert!(set.example_weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        assert!(set.example_weights.iter().any(|&w| w == 0.0), "edge caps expected");
        assert!(set.example_weights.iter().any(|&w| w > 0.0));
    }

    #[test]
    fn all_air_stack_is_an_empty_dataset() {
        let air = Image::from_data(32, 32, 1.0, vec![-1000.0; 1024]).unwrap();
        let pairs = vec![TrainingPair {
            stack: vec![air.clone(), air.clone(), air.clone()],
            reference: air,
        }];
        assert!(matches!(
            build_training_set(&pairs, &FusionConfig::fbp_default()),
            Err(TomoError::EmptyDataset)
        ));
    }

    #[test]
    fn raising_the_variance_floor_never_grows_the_set() {
        let stack: Vec<Image> = (0..3).map(|s| noisy_disk_image(48, 48, 40 + s)).collect();
        let reference = noisy_disk_image(48, 48, 77);
        let mut last = usize::MAX;
        for factor in [1e-8, 1e-6, 1e-3, 1e-1] {
            let cfg = FusionConfig {
                variance_prune_factor: factor,
                ..FusionConfig::fbp_default()
            };
            let pairs = vec![TrainingPair {
                stack: stack.clone(),
                reference: reference.clone(),
            }];
            let n = match build_training_set(&pairs, &cfg) {
                Ok(set) => set.len(),
                Err(TomoError::EmptyDataset) => 0,
                Err(e) => panic!("unexpected error {e:?}"),
            };
            assert!(n <= last, "factor {factor} grew the set: {n} > {last}");
            last = n;
        }
    }

    #[test]
    fn example_cap_subsamples_deterministically() {
        let stack: Vec<Image> = (0..3).map(|s| noisy_disk_image(64, 64, 60 + s)).collect();
        let reference = noisy_disk_image(64, 64, 88);
        let cfg = FusionConfig {
            max_examples: 50,
            ..FusionConfig::fbp_default()
        };
        let pairs = vec![TrainingPair { stack, reference }];
        let a = build_training_set(&pairs, &cfg).unwrap();
        let b = build_training_set(&pairs, &cfg).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.example_weights, b.example_weights);
    }

    #[test]
    fn fuse_with_single_pixel_output_is_direct_assignment() {
        let stack: Vec<Image> = (0..3).map(|s| noisy_disk_image(24, 24, 70 + s)).collect();
        let cfg = FusionConfig {
            radii: vec![1, 1, 1],
            output_radius: 0,
            ..FusionConfig::pwls_default()
        };
        let net = NeuralNet::new(&[15, 6, 1], 5).unwrap();
        let (fused, counts) = fuse_parts(&stack, &net, &cfg).unwrap();
        assert!(counts.iter().all(|&c| c == 1.0));
        // spot-check one pixel against a direct forward pass
        let q = (10usize, 12usize);
        let mut features = build_features(&stack, q, &cfg.radii).unwrap();
        nn::normalize_apply_slice(&mut features, net.norm_shift(), net.norm_scale());
        let direct = net.forward(&features).unwrap()[0];
        assert_eq!(fused.at(q.0, q.1), direct);
    }

    #[test]
    fn fuse_interior_pixels_receive_29_contributions() {
        let stack: Vec<Image> = (0..3).map(|s| noisy_disk_image(24, 24, 80 + s)).collect();
        let cfg = FusionConfig::fbp_default();
        let net = NeuralNet::new(&[87, 8, 29], 6).unwrap();
        let (_, counts) = fuse_parts(&stack, &net, &cfg).unwrap();
        for r in 3..21 {
            for c in 3..21 {
                assert_eq!(counts[r * 24 + c], 29.0, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn constant_output_net_fuses_to_a_constant() {
        let stack: Vec<Image> = (0..3).map(|s| noisy_disk_image(20, 20, 90 + s)).collect();
        let cfg = FusionConfig::fbp_default();
        let mut net = NeuralNet::zeros(&[87, 4, 29]).unwrap();
        // output biases = 42 regardless of input
        let p_count = net.param_count();
        let mut params = vec![0.0; p_count];
        for i in (p_count - 29)..p_count {
            params[i] = 42.0;
        }
        net.set_flat_params(&params);
        let fused = fuse(&stack, &net, &cfg).unwrap();
        for &v in fused.data() {
            assert!((v - 42.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_is_deterministic() {
        let stack: Vec<Image> = (0..3).map(|s| noisy_disk_image(24, 24, 100 + s)).collect();
        let cfg = FusionConfig::fbp_default();
        let net = NeuralNet::new(&[87, 8, 29], 7).unwrap();
        let a = fuse(&stack, &net, &cfg).unwrap();
        let b = fuse(&stack, &net, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn net_shape_mismatch_is_rejected() {
        let stack: Vec<Image> = (0..3).map(|s| noisy_disk_image(24, 24, 110 + s)).collect();
        let cfg = FusionConfig::fbp_default();
        let net = NeuralNet::new(&[50, 8, 29], 8).unwrap();
        assert!(matches!(
            fuse(&stack, &net, &cfg),
            Err(TomoError::Dimension(_))
        ));
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.tfds");
        let stack: Vec<Image> = (0..3).map(|s| noisy_disk_image(48, 48, 120 + s)).collect();
        let reference = noisy_disk_image(48, 48, 130);
        let pairs = vec![TrainingPair { stack, reference }];
        let set = build_training_set(&pairs, &FusionConfig::fbp_default()).unwrap();
        write_dataset(&path, &set).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(set.inputs, back.inputs);
        assert_eq!(set.targets, back.targets);
        assert_eq!(set.example_weights, back.example_weights);
        assert_eq!(set.norm_shift, back.norm_shift);
        assert_eq!(set.norm_scale, back.norm_scale);

        // truncated file is a parse error
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_dataset(&path), Err(TomoError::Parse { .. })));
    }
}
