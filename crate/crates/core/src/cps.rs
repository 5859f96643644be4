//! CAM refinement into pseudo-label distributions and confident
//! pseudo-supervision.
//!
//! Refinement is a simplified affinity propagation in the spirit of pixel
//! adaptive mask refinement: a background channel `(1 - max_c m_c)^q` is
//! prepended, each pixel's distribution is repeatedly replaced by an
//! affinity-weighted average of its dilated 3x3 neighbors, and affinities are
//! a softmax over negative color distances scaled by the image's color std,
//! computed at image resolution.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autograd::masked_softmax;
use crate::error::{Error, Result};
use crate::netcore::CamMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PseudoOrigin {
    /// Refined from the CAM of the original image.
    Original,
    /// Refined from the CAM of the erased image.
    Masked,
}

/// Per-pixel distribution over `{background} + classes`, `[C+1, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub probs: Array3<f64>,
    pub origin: PseudoOrigin,
}

impl PseudoLabelMap {
    pub fn spatial(&self) -> (usize, usize) {
        (self.probs.shape()[1], self.probs.shape()[2])
    }

    /// `(argmax channel, max probability)` at `pixel`; ties go to the lowest channel.
    pub fn argmax(&self, pixel: usize) -> (usize, f64) {
        let (k, _, w) = self.probs.dim();
        let (y, x) = (pixel / w, pixel % w);
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..k {
            let v = self.probs[[c, y, x]];
            if v > best.1 {
                best = (c, v);
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub iterations: usize,
    pub dilations: Vec<usize>,
    /// Exponent `q` of the background channel.
    pub bg_power: f64,
    /// Affinity temperature, in units of the per-image channel std.
    pub temperature: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iterations: 10,
            dilations: vec![1, 2, 4, 8],
            bg_power: 3.0,
            temperature: 0.1,
        }
    }
}

/// Block-average an `[C,H,W]` array down to `h x w`.
pub fn downsample(image: &Array3<f64>, h: usize, w: usize) -> Result<Array3<f64>> {
    let (_, hh, ww) = image.dim();
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 {
        return Err(Error::shape("downsample", format!("multiple of {h}x{w}"), format!("{hh}x{ww}")));
    }
    Ok(block_mean(image, h, w))
}

/// Neighbor offsets of the dilated 3x3 rings, in a fixed order.
fn ring_offsets(dilations: &[usize]) -> Vec<(isize, isize)> {
    let mut out = Vec::with_capacity(8 * dilations.len());
    for &d in dilations {
        let d = d as isize;
        for dy in [-1isize, 0, 1] {
            for dx in [-1isize, 0, 1] {
                if dy != 0 || dx != 0 {
                    out.push((dy * d, dx * d));
                }
            }
        }
    }
    out
}

/// Affinity rows: for each pixel, the neighbor pixel indices (replicate
/// padding at the border) and their softmax weights.
pub fn affinity(image_small: &Array3<f64>, dilations: &[usize], temperature: f64) -> (Vec<usize>, Vec<f64>, usize) {
    let (c, h, w) = image_small.dim();
    let offsets = ring_offsets(dilations);
    let k = offsets.len();
    let n = (h * w) as f64;
    let std: Vec<f64> = (0..c)
        .map(|ch| {
            let plane = image_small.index_axis(ndarray::Axis(0), ch);
            let mean = plane.sum() / n;
            temperature * (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    let mut nbr = vec![0usize; h * w * k];
    let mut wts = vec![0.0; h * w * k];
    let mut logits = vec![0.0; k];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for (j, &(dy, dx)) in offsets.iter().enumerate() {
                let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                nbr[i * k + j] = ny * w + nx;
                let mut dist = 0.0;
                for ch in 0..c {
                    dist += (image_small[[ch, y, x]] - image_small[[ch, ny, nx]]).abs() / (std[ch] + 1e-8);
                }
                logits[j] = -dist / c as f64;
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..k {
                wts[i * k + j] = (logits[j] - m).exp() / z;
            }
        }
    }
    (nbr, wts, k)
}

fn renormalize(probs: &mut Array3<f64>) {
    let (k, h, w) = probs.dim();
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (0..k).map(|c| probs[[c, y, x]]).sum();
            if s > 0.0 {
                for c in 0..k {
                    probs[[c, y, x]] /= s;
                }
            } else {
                probs[[0, y, x]] = 1.0;
            }
        }
    }
}

/// Background-augmented, renormalized map before any propagation.
pub fn with_background(cam: &CamMap, bg_power: f64) -> Array3<f64> {
    let (c, h, w) = cam.normalized.dim();
    let mut probs = Array3::zeros((c + 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut m: f64 = 0.0;
            for ci in 0..c {
                let v = cam.normalized[[ci, y, x]].max(0.0);
                probs[[ci + 1, y, x]] = v;
                m = m.max(v);
            }
            probs[[0, y, x]] = (1.0 - m).max(0.0).powf(bg_power);
        }
    }
    renormalize(&mut probs);
    probs
}

/// Affinity propagation of `[K,H,W]` distributions guided by `image` at the same size.
pub fn propagate(probs: &mut Array3<f64>, image: &Array3<f64>, iterations: usize, dilations: &[usize], temperature: f64) {
    let (k_ch, h, w) = probs.dim();
    if iterations == 0 || dilations.is_empty() {
        return;
    }
    let (nbr, wts, k) = affinity(image, dilations, temperature);
    let p = h * w;
    let mut next = Array3::zeros((k_ch, h, w));
    for _ in 0..iterations {
        {
            let src = probs.as_slice().expect("contiguous");
            let dst = next.as_slice_mut().expect("contiguous");
            for ch in 0..k_ch {
                let plane = &src[ch * p..(ch + 1) * p];
                for i in 0..p {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += wts[i * k + j] * plane[nbr[i * k + j]];
                    }
                    dst[ch * p + i] = acc;
                }
            }
        }
        std::mem::swap(probs, &mut next);
    }
}

/// Refines a normalized CAM with image-affinity propagation.
///
/// Propagation runs at image resolution: the background-augmented map is
/// bilinearly upsampled, propagated, block-averaged back onto the CAM grid
/// and renormalized. When the image already has the CAM's size no resampling
/// happens.
pub fn refine_cam(cam: &CamMap, image: &Array3<f64>, cfg: &RefineConfig, origin: PseudoOrigin) -> Result<PseudoLabelMap> {
    let (_, h, w) = cam.normalized.dim();
    let (_, hh, ww) = image.dim();
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 {
        return Err(Error::shape("refine_cam", format!("image a multiple of {h}x{w}"), format!("{hh}x{ww}")));
    }
    let mut probs = with_background(cam, cfg.bg_power);
    if cfg.iterations > 0 && !cfg.dilations.is_empty() {
        if (hh, ww) == (h, w) {
            propagate(&mut probs, image, cfg.iterations, &cfg.dilations, cfg.temperature);
        } else {
            let mut full = crate::evalviz::upsample_bilinear(&probs, hh, ww);
            propagate(&mut full, image, cfg.iterations, &cfg.dilations, cfg.temperature);
            probs = block_mean(&full, h, w);
        }
        renormalize(&mut probs);
    }
    Ok(PseudoLabelMap { probs, origin })
}

fn block_mean(x: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, hh, ww) = x.dim();
    let (sy, sx) = (hh / h, ww / w);
    let norm = (sy * sx) as f64;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..hh {
            for x_ in 0..ww {
                out[[ch, y / sy, x_ / sx]] += x[[ch, y, x_]] / norm;
            }
        }
    }
    out
}

/// `beta_i = beta' * max_j p[j, c_i]` with `c_i` the argmax channel at pixel `i`.
pub fn dynamic_threshold(pseudo: &PseudoLabelMap, beta_prime: f64) -> Result<Array2<f64>> {
    if !(beta_prime > 0.0 && beta_prime < 1.0) {
        return Err(Error::config("beta_prime", format!("{beta_prime} must lie in (0, 1)")));
    }
    let (k, h, w) = pseudo.probs.dim();
    let channel_max: Vec<f64> = (0..k)
        .map(|c| {
            pseudo
                .probs
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let (c, _) = pseudo.argmax(y * w + x);
        beta_prime * channel_max[c]
    }))
}

/// Pixels of `pixel_set` whose pseudo-label confidence exceeds their
/// threshold, with their hard labels `(pixel, argmax channel)`.
pub fn confident_pixels(pseudo: &PseudoLabelMap, pixel_set: &[usize], beta: &Array2<f64>) -> Result<Vec<(usize, usize)>> {
    let (h, w) = pseudo.spatial();
    if beta.dim() != (h, w) {
        return Err(Error::shape("confident_pixels", format!("{:?}", (h, w)), format!("{:?}", beta.dim())));
    }
    let mut out = Vec::new();
    for &p in pixel_set {
        if p >= h * w {
            return Err(Error::IndexOutOfRange {
                context: "cps pixel set",
                index: p,
                len: h * w,
            });
        }
        let (c, v) = pseudo.argmax(p);
        if v > beta[[p / w, p % w]] {
            out.push((p, c));
        }
    }
    Ok(out)
}

/// Mean cross-entropy of `prediction` (`[C+1,h,w]` distributions) against the
/// hard pseudo-labels over the confident part of `pixel_set`; 0 when none.
pub fn cps_loss(prediction: &Array3<f64>, pseudo: &PseudoLabelMap, pixel_set: &[usize], beta: &Array2<f64>) -> Result<f64> {
    if prediction.dim() != pseudo.probs.dim() {
        return Err(Error::shape(
            "cps_loss",
            format!("{:?}", pseudo.probs.dim()),
            format!("{:?}", prediction.dim()),
        ));
    }
    let confident = confident_pixels(pseudo, pixel_set, beta)?;
    if confident.is_empty() {
        return Ok(0.0);
    }
    let w = pseudo.spatial().1;
    let total: f64 = confident
        .iter()
        .map(|&(p, c)| -prediction[[c, p / w, p % w]].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / confident.len() as f64)
}

/// Pixel logits `[C+1,h,w]`: `scale * (1 - max_c m_c)^q` for background and
/// `scale * m_c` per class, with absent classes masked out.
pub fn pixel_logits(cam: &CamMap, scale: f64, bg_power: f64) -> Array3<f64> {
    let (c, h, w) = cam.normalized.dim();
    let mut out = Array3::zeros((c + 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                let v = cam.normalized[[ci, y, x]];
                m = m.max(v);
                out[[ci + 1, y, x]] = scale * v;
            }
            let m = if c == 0 { 0.0 } else { m };
            out[[0, y, x]] = scale * (1.0 - m).max(0.0).powf(bg_power);
        }
    }
    out
}

/// Softmax of [`pixel_logits`] over background and present classes.
pub fn pixel_prediction(cam: &CamMap, label: &[u8], scale: f64, bg_power: f64) -> Array3<f64> {
    let logits = pixel_logits(cam, scale, bg_power);
    let (k, h, w) = logits.dim();
    let allowed: Vec<bool> = std::iter::once(true).chain(label.iter().map(|&l| l > 0)).collect();
    let mut out = Array3::zeros((k, h, w));
    let mut row = vec![0.0; k];
    for y in 0..h {
        for x in 0..w {
            for c in 0..k {
                row[c] = logits[[c, y, x]];
            }
            let p = masked_softmax(&row, &allowed);
            for c in 0..k {
                out[[c, y, x]] = p[c];
            }
        }
    }
    out
}
