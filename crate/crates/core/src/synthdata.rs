//! Deterministic synthetic dataset with composite objects.
//!
//! Every object is an elongated ellipse split along its major axis: the
//! discriminative *core* at one end carries a class-unique color, the *body*
//! carries a noise texture that is identical in distribution for every class.
//! A classifier trained on image tags only needs the core, which reproduces
//! the partial-activation behavior of CAMs on natural images.
//!
//! Persisted layout (see [`save_dataset`]):
//!
//! ```text
//! <dir>/spec.json          DatasetSpec used for generation
//! <dir>/index.jsonl        {"id":..,"split":"train"|"val","label":[0|1,..]} per line
//! <dir>/images/{id}.png    RGB8 image
//! <dir>/gt/{id}.png        L8 class index (0 = background)
//! <dir>/parts/{id}.png     L8 part index (0 = background, 1 = core, 2 = body)
//! ```
//!
//! Images are generated on the 8-bit grid, so the PNG round trip is exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PART_BACKGROUND: u8 = 0;
pub const PART_CORE: u8 = 1;
pub const PART_BODY: u8 = 2;

/// Canonical core colors; class `c` (1-based) uses entry `c - 1` modulo the table.
pub const CORE_PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.85, 0.20],
    [0.20, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.30, 0.10],
];

const BODY_BASE: [f64; 3] = [0.62, 0.60, 0.58];
const BACKGROUND_BASE: [f64; 3] = [0.30, 0.32, 0.34];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `[3, H, W]`, values on the 8-bit grid in `[0, 1]`.
    pub image: Array3<f64>,
    /// Multi-hot, length `C`.
    pub image_label: Vec<u8>,
    /// `[H, W]` class index, 0 = background.
    pub gt_mask: Array2<u8>,
    /// `[H, W]` part index, see [`PART_CORE`] and [`PART_BODY`].
    pub part_mask: Array2<u8>,
    pub sample_id: u64,
}

impl SynthSample {
    pub fn height(&self) -> usize {
        self.gt_mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.gt_mask.ncols()
    }

    /// The multi-hot label implied by `gt_mask`.
    pub fn label_from_mask(gt: &Array2<u8>, num_classes: usize) -> Vec<u8> {
        let mut label = vec![0u8; num_classes];
        for &v in gt.iter() {
            if v > 0 && (v as usize) <= num_classes {
                label[v as usize - 1] = 1;
            }
        }
        label
    }

    /// Mirrors the sample left-right.
    pub fn hflip(&self) -> SynthSample {
        let mut s = self.clone();
        s.image.invert_axis(ndarray::Axis(2));
        s.gt_mask.invert_axis(ndarray::Axis(1));
        s.part_mask.invert_axis(ndarray::Axis(1));
        s.image = s.image.as_standard_layout().into_owned();
        s.gt_mask = s.gt_mask.as_standard_layout().into_owned();
        s.part_mask = s.part_mask.as_standard_layout().into_owned();
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_train: usize,
    pub num_val: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fraction of each object's area covered by its core.
    pub core_fraction: f64,
    /// Object semi-major axis range in pixels.
    pub major_axis: (f64, f64),
    /// Object semi-minor axis range in pixels.
    pub minor_axis: (f64, f64),
    /// Standard deviation of per-pixel noise on the core color.
    pub core_noise: f64,
    /// Amplitude of the shared body texture.
    pub body_contrast: f64,
    /// Standard deviation of background noise.
    pub background_noise: f64,
    /// The backbone's total stride; the image size must be a multiple.
    pub stride: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_train: 500,
            num_val: 100,
            num_classes: 3,
            image_size: 64,
            min_objects: 1,
            max_objects: 2,
            core_fraction: 0.25,
            major_axis: (14.0, 20.0),
            minor_axis: (6.0, 8.0),
            core_noise: 0.04,
            body_contrast: 0.12,
            background_noise: 0.06,
            stride: 4,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.core_fraction > 0.0 && self.core_fraction < 1.0) {
            return Err(Error::config("core_fraction", "must lie in (0, 1)"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.num_classes > 255 {
            return Err(Error::config("num_classes", "class indices are stored as u8"));
        }
        if self.stride == 0 || self.image_size == 0 || self.image_size % self.stride != 0 {
            return Err(Error::config(
                "image_size",
                format!("{} is not a positive multiple of stride {}", self.image_size, self.stride),
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("min_objects", "need 1 <= min_objects <= max_objects"));
        }
        let (a0, a1) = self.major_axis;
        let (b0, b1) = self.minor_axis;
        if !(a0 > 0.0 && a0 <= a1 && b0 > 0.0 && b0 <= b1) {
            return Err(Error::config("major_axis", "axis ranges must be positive and ordered"));
        }
        if 2.0 * a1 >= self.image_size as f64 {
            return Err(Error::config("major_axis", "objects must fit inside the image"));
        }
        for (field, v) in [
            ("core_noise", self.core_noise),
            ("body_contrast", self.body_contrast),
            ("background_noise", self.background_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Rounds to the 8-bit grid so persisted rasters reproduce the data exactly.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Placed {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Placed {
    fn inside(&self, y: f64, x: f64, margin: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let a = self.a + margin;
        let b = self.b + margin;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }

    /// Coordinate along the major axis.
    fn along(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        (x - self.cx) * c + (y - self.cy) * s
    }
}

/// Generates one sample. Pure in `(spec, id)`.
pub fn generate_sample(spec: &DatasetSpec, id: u64) -> SynthSample {
    let mut rng = sample_rng(spec.seed, id);
    let n = spec.image_size;
    let mut image = Array3::<f64>::zeros((3, n, n));
    let mut gt = Array2::<u8>::zeros((n, n));
    let mut parts = Array2::<u8>::zeros((n, n));

    let bg_noise = Normal::new(0.0, spec.background_noise.max(1e-12)).expect("valid sigma");
    // low-frequency background shading plus white noise
    let shade_y: f64 = rng.random_range(-0.06..0.06);
    let shade_x: f64 = rng.random_range(-0.06..0.06);
    for y in 0..n {
        for x in 0..n {
            let grad = shade_y * (y as f64 / n as f64 - 0.5) + shade_x * (x as f64 / n as f64 - 0.5);
            for ch in 0..3 {
                let noise = if spec.background_noise > 0.0 {
                    bg_noise.sample(&mut rng)
                } else {
                    0.0
                };
                image[[ch, y, x]] = BACKGROUND_BASE[ch] + grad + noise;
            }
        }
    }

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<Placed> = Vec::new();
    let mut classes: Vec<u8> = Vec::new();
    for _ in 0..count {
        let class = rng.random_range(1..=spec.num_classes) as u8;
        let mut found = None;
        for _attempt in 0..50 {
            let a = rng.random_range(spec.major_axis.0..=spec.major_axis.1);
            let b = rng.random_range(spec.minor_axis.0..=spec.minor_axis.1);
            let theta = rng.random_range(0.0..std::f64::consts::PI * 2.0);
            // keep the rotated bounding box inside the image
            let (s, c) = theta.sin_cos();
            let ext_x = ((a * c).powi(2) + (b * s).powi(2)).sqrt() + 1.0;
            let ext_y = ((a * s).powi(2) + (b * c).powi(2)).sqrt() + 1.0;
            if 2.0 * ext_x >= n as f64 || 2.0 * ext_y >= n as f64 {
                continue;
            }
            let cx = rng.random_range(ext_x..(n as f64 - ext_x));
            let cy = rng.random_range(ext_y..(n as f64 - ext_y));
            let cand = Placed { cy, cx, a, b, theta };
            let overlaps = (0..n).any(|y| {
                (0..n).any(|x| {
                    let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                    cand.inside(yf, xf, 0.0) && placed.iter().any(|p| p.inside(yf, xf, 2.0))
                })
            });
            if !overlaps {
                found = Some(cand);
                break;
            }
        }
        if let Some(p) = found {
            placed.push(p);
            classes.push(class);
        }
    }
    if placed.is_empty() {
        // the first attempt always fits on an empty canvas; this is unreachable
        // for validated specs but keeps the label invariant if it ever happens
        let a = spec.major_axis.0;
        let b = spec.minor_axis.0;
        placed.push(Placed {
            cy: n as f64 / 2.0,
            cx: n as f64 / 2.0,
            a,
            b,
            theta: 0.0,
        });
        classes.push(rng.random_range(1..=spec.num_classes) as u8);
    }

    let core_noise = Normal::new(0.0, spec.core_noise.max(1e-12)).expect("valid sigma");
    for (obj, &class) in placed.iter().zip(&classes) {
        let mut pixels: Vec<(usize, usize, f64)> = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                if obj.inside(yf, xf, 0.0) {
                    pixels.push((y, x, obj.along(yf, xf)));
                }
            }
        }
        // the core is the top `core_fraction` of the object along its major axis
        pixels.sort_by(|l, r| r.2.total_cmp(&l.2).then(l.0.cmp(&r.0)).then(l.1.cmp(&r.1)));
        let n_core = ((pixels.len() as f64 * spec.core_fraction).round() as usize).clamp(1, pixels.len());
        let color = CORE_PALETTE[(class as usize - 1) % CORE_PALETTE.len()];
        // per-object body texture phase; the statistics are class independent
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (s, c) = obj.theta.sin_cos();
        for (rank, &(y, x, along)) in pixels.iter().enumerate() {
            gt[[y, x]] = class;
            if rank < n_core {
                parts[[y, x]] = PART_CORE;
                for ch in 0..3 {
                    let noise = if spec.core_noise > 0.0 {
                        core_noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    image[[ch, y, x]] = color[ch] + noise;
                }
            } else {
                parts[[y, x]] = PART_BODY;
                let across = -(x as f64 + 0.5 - obj.cx) * s + (y as f64 + 0.5 - obj.cy) * c;
                let stripes = (along * 1.3 + phase).sin() * (across * 0.9).cos();
                let jitter: f64 = rng.random_range(-0.5..0.5);
                for ch in 0..3 {
                    image[[ch, y, x]] = BODY_BASE[ch] + spec.body_contrast * (stripes + 0.5 * jitter);
                }
            }
        }
    }

    image.mapv_inplace(quantize);
    let image_label = SynthSample::label_from_mask(&gt, spec.num_classes);
    SynthSample {
        image,
        image_label,
        gt_mask: gt,
        part_mask: parts,
        sample_id: id,
    }
}

/// Generates `(train, val)`. Train ids are `0..num_train`, val ids follow.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    spec.validate()?;
    let train = (0..spec.num_train as u64).map(|id| generate_sample(spec, id)).collect();
    let val = (spec.num_train as u64..(spec.num_train + spec.num_val) as u64)
        .map(|id| generate_sample(spec, id))
        .collect();
    Ok((train, val))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_samples: usize,
    /// Number of images containing each class (index 0 = class 1).
    pub class_image_counts: Vec<usize>,
    pub num_objects: usize,
    pub mean_object_area: f64,
    pub mean_core_area: f64,
}

/// Per-class image counts and mean object/core areas.
///
/// Objects are counted as connected components (4-connectivity) of the
/// foreground; generated objects never touch, so this recovers them exactly.
pub fn dataset_stats(dataset: &[SynthSample]) -> Result<DatasetStats> {
    let first = dataset.first().ok_or(Error::Empty("dataset_stats needs at least one sample"))?;
    let num_classes = first.image_label.len();
    let mut counts = vec![0usize; num_classes];
    let mut object_areas = Vec::new();
    let mut core_areas = Vec::new();
    for s in dataset {
        for (c, &v) in s.image_label.iter().enumerate() {
            if v > 0 {
                counts[c] += 1;
            }
        }
        for (area, core) in components(&s.gt_mask, &s.part_mask) {
            object_areas.push(area as f64);
            core_areas.push(core as f64);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(DatasetStats {
        num_samples: dataset.len(),
        class_image_counts: counts,
        num_objects: object_areas.len(),
        mean_object_area: mean(&object_areas),
        mean_core_area: mean(&core_areas),
    })
}

/// `(area, core_area)` of each 4-connected foreground component.
pub fn components(gt: &Array2<u8>, parts: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = gt.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if gt[[y, x]] == 0 || seen[[y, x]] {
                continue;
            }
            let class = gt[[y, x]];
            let (mut area, mut core) = (0, 0);
            seen[[y, x]] = true;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                area += 1;
                if parts[[cy, cx]] == PART_CORE {
                    core += 1;
                }
                let neighbors = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w && !seen[[ny, nx]] && gt[[ny, nx]] == class {
                        seen[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            out.push((area, core));
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    id: u64,
    split: String,
    label: Vec<u8>,
}

fn write_png_rgb(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            px.0[ch] = (image[[ch, y as usize, x as usize]] * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn write_png_gray(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([mask[[y as usize, x as usize]]]));
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes both splits into `dir` using the layout in the module docs.
pub fn save_dataset(dir: &Path, spec: &DatasetSpec, train: &[SynthSample], val: &[SynthSample]) -> Result<()> {
    for sub in ["images", "gt", "parts"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    let index_path = dir.join("index.jsonl");
    let file = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut index = BufWriter::new(file);
    for (split, samples) in [("train", train), ("val", val)] {
        for s in samples {
            let id = s.sample_id;
            write_png_rgb(&dir.join("images").join(format!("{id}.png")), &s.image)?;
            write_png_gray(&dir.join("gt").join(format!("{id}.png")), &s.gt_mask)?;
            write_png_gray(&dir.join("parts").join(format!("{id}.png")), &s.part_mask)?;
            let rec = IndexRecord {
                id,
                split: split.to_string(),
                label: s.image_label.clone(),
            };
            writeln!(index, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&index_path, e))?;
        }
    }
    index.flush().map_err(|e| Error::io(&index_path, e))
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetSpec, Vec<SynthSample>, Vec<SynthSample>)> {
    let spec_path = dir.join("spec.json");
    let spec_text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: DatasetSpec = serde_json::from_str(&spec_text)?;
    let index_path = dir.join("index.jsonl");
    let file = fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndexRecord = serde_json::from_str(&line)?;
        let id = rec.id;
        let rgb = read_png(&dir.join("images").join(format!("{id}.png")))?.to_rgb8();
        let gt = read_png(&dir.join("gt").join(format!("{id}.png")))?.to_luma8();
        let parts = read_png(&dir.join("parts").join(format!("{id}.png")))?.to_luma8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let image = Array3::from_shape_fn((3, h, w), |(ch, y, x)| rgb.get_pixel(x as u32, y as u32).0[ch] as f64 / 255.0);
        let gt_mask = Array2::from_shape_fn((h, w), |(y, x)| gt.get_pixel(x as u32, y as u32).0[0]);
        let part_mask = Array2::from_shape_fn((h, w), |(y, x)| parts.get_pixel(x as u32, y as u32).0[0]);
        let sample = SynthSample {
            image,
            image_label: rec.label,
            gt_mask,
            part_mask,
            sample_id: id,
        };
        match rec.split.as_str() {
            "train" => train.push(sample),
            "val" => val.push(sample),
            other => return Err(Error::config("split", format!("unknown split `{other}` in index"))),
        }
    }
    Ok((spec, train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            num_train: 20,
            num_val: 5,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let other = generate_dataset(&DatasetSpec { seed: 7, ..spec }).unwrap();
        assert_ne!(a.0, other.0);
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let cases: Vec<(DatasetSpec, &str)> = vec![
            (DatasetSpec { core_fraction: 1.0, ..small_spec() }, "core_fraction"),
            (DatasetSpec { core_fraction: 0.0, ..small_spec() }, "core_fraction"),
            (DatasetSpec { num_classes: 1, ..small_spec() }, "num_classes"),
            (DatasetSpec { image_size: 62, ..small_spec() }, "image_size"),
        ];
        for (spec, field) in cases {
            match generate_dataset(&spec) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn masks_and_labels_are_consistent() {
        let (train, val) = generate_dataset(&small_spec()).unwrap();
        for s in train.iter().chain(&val) {
            assert_eq!(s.image_label, SynthSample::label_from_mask(&s.gt_mask, 3));
            for (g, p) in s.gt_mask.iter().zip(s.part_mask.iter()) {
                assert_eq!(*g == 0, *p == PART_BACKGROUND);
            }
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn core_area_tracks_core_fraction() {
        let spec = DatasetSpec {
            num_train: 40,
            num_val: 0,
            major_axis: (16.0, 16.0),
            minor_axis: (8.0, 8.0),
            ..DatasetSpec::default()
        };
        let (train, _) = generate_dataset(&spec).unwrap();
        for s in &train {
            for (area, core) in components(&s.gt_mask, &s.part_mask) {
                let target = area as f64 * spec.core_fraction;
                assert!((core as f64 - target).abs() <= 0.2 * target, "area {area} core {core}");
            }
        }
    }

    #[test]
    fn stats_on_single_sample() {
        let mut s = generate_sample(&small_spec(), 0);
        s.gt_mask.fill(0);
        s.part_mask.fill(0);
        s.gt_mask[[3, 3]] = 1;
        s.part_mask[[3, 3]] = PART_CORE;
        s.image_label = vec![1, 0, 0];
        let st = dataset_stats(&[s]).unwrap();
        assert_eq!(st.class_image_counts, vec![1, 0, 0]);
        assert_eq!(st.num_objects, 1);
        assert_eq!(st.mean_core_area, 1.0);
        assert!(matches!(dataset_stats(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn hflip_mirrors_all_rasters() {
        let s = generate_sample(&small_spec(), 3);
        let f = s.hflip();
        let w = s.width();
        assert_eq!(f.gt_mask[[10, 0]], s.gt_mask[[10, w - 1]]);
        assert_eq!(f.image[[1, 5, 2]], s.image[[1, 5, w - 3]]);
        assert_eq!(f.hflip(), s);
    }
}
