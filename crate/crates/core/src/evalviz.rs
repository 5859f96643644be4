//! CAM evaluation: mIoU, CAM-to-mask conversion, the background threshold
//! sweep, and the source/target feature-similarity diagnostic.

use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domadv::Domain;
use crate::error::{Error, Result};
use crate::netcore::CamMap;

/// Per-label IoU over `{background} + classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// `C+1` entries; 0 for labels with empty union.
    pub per_class: Vec<f64>,
    /// Labels with nonzero union.
    pub valid: Vec<bool>,
    pub mean: f64,
    pub valid_classes: usize,
}

/// Running intersection / union counts.
#[derive(Clone, Debug, PartialEq)]
pub struct IoUAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl IoUAccumulator {
    /// `num_classes` foreground classes plus background.
    pub fn new(num_classes: usize) -> Self {
        IoUAccumulator {
            inter: vec![0; num_classes + 1],
            union: vec![0; num_classes + 1],
        }
    }

    pub fn add(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::shape("miou", format!("{:?}", gt.dim()), format!("{:?}", pred.dim())));
        }
        let k = self.inter.len();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let (p, g) = (p as usize, g as usize);
            for v in [p, g] {
                if v >= k {
                    return Err(Error::IndexOutOfRange {
                        context: "miou label",
                        index: v,
                        len: k,
                    });
                }
            }
            if p == g {
                self.inter[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> IoUReport {
        let valid: Vec<bool> = self.union.iter().map(|&u| u > 0).collect();
        let per_class: Vec<f64> = self
            .inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| if u > 0 { i as f64 / u as f64 } else { 0.0 })
            .collect();
        let valid_classes = valid.iter().filter(|&&v| v).count();
        let mean = if valid_classes == 0 {
            0.0
        } else {
            per_class.iter().zip(&valid).filter(|(_, &v)| v).map(|(&x, _)| x).sum::<f64>() / valid_classes as f64
        };
        IoUReport {
            per_class,
            valid,
            mean,
            valid_classes,
        }
    }
}

/// mIoU accumulated over all `(pred, gt)` pairs; labels `0..=num_classes`.
pub fn miou(preds: &[Array2<u8>], gts: &[Array2<u8>], num_classes: usize) -> Result<IoUReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape("miou", gts.len().to_string(), preds.len().to_string()));
    }
    let mut acc = IoUAccumulator::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc.report())
}

/// Bilinear resize of `[C,h,w]` maps to `[C,oh,ow]` (half-pixel centers, edge clamped).
pub fn upsample_bilinear(maps: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = maps.dim();
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..oh).map(|y| coord(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| coord(x, w, ow)).collect();
    Array3::from_shape_fn((c, oh, ow), |(ci, y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = maps[[ci, y0, x0]] * (1.0 - fx) + maps[[ci, y0, x1]] * fx;
        let bot = maps[[ci, y1, x0]] * (1.0 - fx) + maps[[ci, y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::config("bg_threshold", format!("{t} must lie in (0, 1)")));
    }
    Ok(())
}

/// Label raster from normalized maps: the best present class where it exceeds
/// `bg_threshold`, background (0) elsewhere.
pub fn cam_to_mask(normalized: &Array3<f64>, bg_threshold: f64, label: &[u8]) -> Result<Array2<u8>> {
    check_threshold(bg_threshold)?;
    let (c, h, w) = normalized.dim();
    if label.len() != c {
        return Err(Error::shape("cam_to_mask label", c.to_string(), label.len().to_string()));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0u8;
        let mut val = bg_threshold;
        for ci in 0..c {
            if label[ci] > 0 && normalized[[ci, y, x]] > val {
                val = normalized[[ci, y, x]];
                best = ci as u8 + 1;
            }
        }
        best
    }))
}

/// One evaluation image: normalized maps at ground-truth resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub cam: Array3<f64>,
    pub label: Vec<u8>,
    pub gt: Array2<u8>,
}

impl EvalItem {
    /// Upsamples a CAM to the ground-truth size.
    pub fn from_cam(cam: &CamMap, label: &[u8], gt: &Array2<u8>) -> Self {
        let (h, w) = gt.dim();
        EvalItem {
            cam: upsample_bilinear(&cam.normalized, h, w),
            label: label.to_vec(),
            gt: gt.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_threshold: f64,
    pub best: IoUReport,
    /// `(threshold, mean IoU)` for every grid entry, in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Thresholds `0.05, 0.10, ..., 0.95`.
pub fn default_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}

/// Evaluates every grid threshold and keeps the best mean IoU; ties go to
/// the smaller threshold.
pub fn sweep_background_threshold(items: &[EvalItem], grid: &[f64]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    for &t in grid {
        check_threshold(t)?;
    }
    let num_classes = items.first().map(|i| i.cam.dim().0).unwrap_or(0);
    // The best present class per pixel does not depend on the threshold.
    let mut best_class = Vec::with_capacity(items.len());
    for item in items {
        let (c, h, w) = item.cam.dim();
        if c != num_classes || item.label.len() != c || item.gt.dim() != (h, w) {
            return Err(Error::shape("sweep item", format!("{num_classes} classes at gt size"), format!("{:?}", item.cam.dim())));
        }
        best_class.push(Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = (0u8, f64::NEG_INFINITY);
            for ci in 0..c {
                if item.label[ci] > 0 && item.cam[[ci, y, x]] > best.1 {
                    best = (ci as u8 + 1, item.cam[[ci, y, x]]);
                }
            }
            best
        }));
    }
    let mut curve = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, IoUReport)> = None;
    for &t in grid {
        let mut acc = IoUAccumulator::new(num_classes);
        for (item, bc) in items.iter().zip(&best_class) {
            let pred = bc.mapv(|(c, v)| if v > t { c } else { 0 });
            acc.add(&pred, &item.gt)?;
        }
        let report = acc.report();
        curve.push((t, report.mean));
        let better = match &best {
            None => true,
            Some((bt, br)) => report.mean > br.mean || (report.mean == br.mean && t < *bt),
        };
        if better {
            best = Some((t, report));
        }
    }
    let (best_threshold, best) = best.expect("nonempty grid");
    Ok(SweepResult {
        best_threshold,
        best,
        curve,
    })
}

/// Nearest (cell-center) downsampling of a label raster onto the CAM grid.
pub fn downsample_labels(gt: &Array2<u8>, stride: usize) -> Array2<u8> {
    let (h, w) = gt.dim();
    let off = stride / 2;
    Array2::from_shape_fn((h / stride, w / stride), |(y, x)| gt[[y * stride + off, x * stride + off]])
}

/// Diagnostic split of ground-truth object pixels (CAM grid): pixels of class
/// `c` whose normalized map exceeds `alpha` are source, the rest of the
/// object is target.
pub fn diagnostic_regions(cam: &CamMap, gt_small: &Array2<u8>, alpha: f64) -> Result<Vec<Option<(usize, Domain)>>> {
    let (c, h, w) = cam.normalized.dim();
    if gt_small.dim() != (h, w) {
        return Err(Error::shape("diagnostic_regions", format!("{:?}", (h, w)), format!("{:?}", gt_small.dim())));
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let g = gt_small[[y, x]] as usize;
            if g == 0 || g > c {
                out.push(None);
                continue;
            }
            let d = if cam.normalized[[g - 1, y, x]] > alpha {
                Domain::Source
            } else {
                Domain::Target
            };
            out.push(Some((g - 1, d)));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub bins: usize,
    /// Normalized histograms over `[0, 1]`; each sums to 1 when nonempty.
    pub source_hist: Vec<f64>,
    pub target_hist: Vec<f64>,
    pub source_mean: f64,
    pub target_mean: f64,
    /// Classes used (both domains nonempty).
    pub classes_used: Vec<usize>,
    pub samples_per_class: Vec<usize>,
}

impl SimilarityReport {
    /// `source_mean - target_mean`.
    pub fn gap(&self) -> f64 {
        self.source_mean - self.target_mean
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-class cosine similarity of every labeled pixel to its class centroid.
/// Returns, per class, `(domain, raw similarity)` for each of its pixels.
pub fn centroid_similarities(
    features: &[Array3<f64>],
    regions: &[Vec<Option<(usize, Domain)>>],
    num_classes: usize,
) -> Result<Vec<Vec<(Domain, f64)>>> {
    if features.len() != regions.len() {
        return Err(Error::shape("similarity regions", features.len().to_string(), regions.len().to_string()));
    }
    let d = features.first().map(|f| f.dim().0).unwrap_or(0);
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    let mut pixels: Vec<Vec<(Domain, Vec<f64>)>> = vec![Vec::new(); num_classes];
    for (f, r) in features.iter().zip(regions) {
        let (fd, h, w) = f.dim();
        if fd != d || r.len() != h * w {
            return Err(Error::shape("similarity features", format!("{d} x {}", r.len()), format!("{:?}", f.dim())));
        }
        for (p, slot) in r.iter().enumerate() {
            let Some((c, dom)) = *slot else { continue };
            if c >= num_classes {
                return Err(Error::IndexOutOfRange {
                    context: "similarity class",
                    index: c,
                    len: num_classes,
                });
            }
            let v: Vec<f64> = (0..d).map(|k| f[[k, p / w, p % w]]).collect();
            sums[c].iter_mut().zip(&v).for_each(|(s, x)| *s += x);
            counts[c] += 1;
            pixels[c].push((dom, v));
        }
    }
    Ok(pixels
        .into_iter()
        .enumerate()
        .map(|(c, px)| {
            if counts[c] == 0 {
                log::warn!("similarity diagnostic: class {c} has no pixels, skipped");
                return Vec::new();
            }
            let centroid: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            px.into_iter().map(|(dom, v)| (dom, cosine(&v, &centroid))).collect()
        })
        .collect())
}

/// Min-max normalization to `[0,1]`; constant inputs map to 1.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 })
        .collect()
}

fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if values.is_empty() {
        return h;
    }
    for &v in values {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    h.iter_mut().for_each(|x| *x /= values.len() as f64);
    h
}

/// Source vs target histograms of per-class min-max normalized centroid
/// similarity, drawing the same number of pixels (at most `per_class`) from
/// each domain of every class.
pub fn similarity_histogram(
    features: &[Array3<f64>],
    regions: &[Vec<Option<(usize, Domain)>>],
    num_classes: usize,
    per_class: usize,
    bins: usize,
    rng: &mut impl Rng,
) -> Result<SimilarityReport> {
    if bins == 0 {
        return Err(Error::config("bins", "need at least one bin"));
    }
    let sims = centroid_similarities(features, regions, num_classes)?;
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut classes_used = Vec::new();
    let mut samples_per_class = Vec::new();
    for (c, entries) in sims.iter().enumerate() {
        if entries.is_empty() {
            continue;
        }
        let raw: Vec<f64> = entries.iter().map(|e| e.1).collect();
        let norm = min_max_normalize(&raw);
        let s: Vec<f64> = entries.iter().zip(&norm).filter(|(e, _)| e.0 == Domain::Source).map(|(_, &v)| v).collect();
        let t: Vec<f64> = entries.iter().zip(&norm).filter(|(e, _)| e.0 == Domain::Target).map(|(_, &v)| v).collect();
        let k = per_class.min(s.len()).min(t.len());
        if k == 0 {
            log::warn!("similarity diagnostic: class {c} lacks source or target pixels, skipped");
            continue;
        }
        src.extend(sample(rng, s.len(), k).into_iter().map(|i| s[i]));
        tgt.extend(sample(rng, t.len(), k).into_iter().map(|i| t[i]));
        classes_used.push(c);
        samples_per_class.push(k);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(SimilarityReport {
        bins,
        source_hist: histogram(&src, bins),
        target_hist: histogram(&tgt, bins),
        source_mean: mean(&src),
        target_mean: mean(&tgt),
        classes_used,
        samples_per_class,
    })
}
