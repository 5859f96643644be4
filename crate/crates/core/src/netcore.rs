//! Feature extractor, CAM head, class activation maps and the image-level
//! classification loss.

use ndarray::{Array3, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{self, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named access to trainable arrays, in a fixed order.
///
/// The order returned by [`Module::named_params`] is the order in which
/// [`bind`] creates graph leaves, so forward passes can index the bound
/// variables positionally.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Puts every parameter of `module` on the graph, differentiable or not.
pub fn bind(module: &dyn Module, g: &mut Graph, trainable: bool) -> Vec<Var> {
    module
        .named_params()
        .into_iter()
        .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect()
}

fn kaiming(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::from_shape_vec(IxDyn(shape), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

/// Per-channel affine parameters of the optional per-pixel channel norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAffine {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// conv 3x3 -> (channel norm | bias) -> ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `[out, in, 3, 3]`
    pub weight: Tensor,
    /// Used when `norm` is `None`.
    pub bias: Tensor,
    pub norm: Option<ChannelAffine>,
    pub stride: usize,
}

/// Small convolutional feature extractor producing `D`-channel maps at stride `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub blocks: Vec<ConvBlock>,
}

/// Default block widths; the last entry is the feature dimension `D`.
pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 64];
/// Default per-block strides, total stride 4.
pub const DEFAULT_STRIDES: [usize; 4] = [1, 2, 2, 1];

impl BackboneParams {
    /// `channel_norm` swaps each block's bias for a per-pixel channel norm.
    pub fn new(widths: &[usize], strides: &[usize], channel_norm: bool, rng: &mut impl Rng) -> Result<Self> {
        if widths.is_empty() || widths.len() != strides.len() {
            return Err(Error::config("backbone_widths", "need one stride per block and at least one block"));
        }
        if widths.contains(&0) || strides.contains(&0) {
            return Err(Error::config("backbone_widths", "widths and strides must be positive"));
        }
        let mut cin = 3;
        let blocks = widths
            .iter()
            .zip(strides)
            .map(|(&cout, &stride)| {
                let block = ConvBlock {
                    weight: kaiming(rng, &[cout, cin, 3, 3], cin * 9),
                    bias: Tensor::zeros(IxDyn(&[cout])),
                    norm: channel_norm.then(|| ChannelAffine {
                        gamma: Tensor::ones(IxDyn(&[cout])),
                        beta: Tensor::zeros(IxDyn(&[cout])),
                    }),
                    stride,
                };
                cin = cout;
                block
            })
            .collect();
        Ok(BackboneParams { blocks })
    }

    pub fn stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map(|b| b.weight.shape()[0]).unwrap_or(3)
    }

    /// Receptive field radius in input pixels around a feature cell's anchor.
    pub fn receptive_radius(&self) -> usize {
        let mut radius = 0;
        let mut jump = 1;
        for b in &self.blocks {
            radius += jump;
            jump *= b.stride;
        }
        radius
    }

    /// `x: [B,3,H,W] -> z: [B,D,H/s,W/s]` using variables from [`bind`].
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let mut h = x;
        let mut k = 0;
        for block in &self.blocks {
            let c = g.conv2d(h, vars[k], block.stride);
            let n = if block.norm.is_some() {
                k += 3;
                g.channel_norm(c, vars[k - 2], vars[k - 1])
            } else {
                k += 2;
                g.channel_bias(c, vars[k - 1])
            };
            h = g.relu(n);
        }
        h
    }
}

impl Module for BackboneParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &b.weight));
            match &b.norm {
                Some(n) => {
                    out.push((format!("backbone.{i}.gamma"), &n.gamma));
                    out.push((format!("backbone.{i}.beta"), &n.beta));
                }
                None => out.push((format!("backbone.{i}.bias"), &b.bias)),
            }
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.weight"), &mut b.weight));
            match &mut b.norm {
                Some(n) => {
                    out.push((format!("backbone.{i}.gamma"), &mut n.gamma));
                    out.push((format!("backbone.{i}.beta"), &mut n.beta));
                }
                None => out.push((format!("backbone.{i}.bias"), &mut b.bias)),
            }
        }
        out
    }
}

/// Bias-free classification head `w: [C, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamHead {
    pub weight: Tensor,
}

impl CamHead {
    pub fn new(num_classes: usize, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / feature_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..num_classes * feature_dim).map(|_| normal.sample(rng)).collect();
        CamHead {
            weight: Tensor::from_shape_vec(IxDyn(&[num_classes, feature_dim]), data).expect("shape"),
        }
    }

    pub fn from_weight(weight: Tensor) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(Error::shape("CamHead", "[C, D]", format!("{:?}", weight.shape())));
        }
        Ok(CamHead { weight })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Module for CamHead {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("cam_head.weight".to_string(), &self.weight)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("cam_head.weight".to_string(), &mut self.weight)]
    }
}

/// Per-class activation maps for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    /// `[C, h, w]`, `ReLU(w_c . z)`.
    pub raw: Array3<f64>,
    /// `[C, h, w]`, `raw` divided by its per-class spatial max; zero for
    /// classes absent from the image label and for all-zero maps.
    pub normalized: Array3<f64>,
}

impl CamMap {
    pub fn num_classes(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.raw.shape()[1], self.raw.shape()[2])
    }

    /// Builds a map from raw activations, applying label-masked max normalization.
    pub fn from_raw(raw: Array3<f64>, label: &[u8]) -> Result<Self> {
        let c = raw.shape()[0];
        if label.len() != c {
            return Err(Error::shape("CamMap label", c.to_string(), label.len().to_string()));
        }
        let mut normalized = Array3::zeros(raw.raw_dim());
        for (ci, (plane, mut out)) in raw.outer_iter().zip(normalized.outer_iter_mut()).enumerate() {
            let m = plane.iter().copied().fold(0.0, f64::max);
            if label[ci] > 0 && m > 0.0 {
                out.zip_mut_with(&plane, |o, &r| *o = r / m);
            }
        }
        Ok(CamMap { raw, normalized })
    }
}

fn to_batch(images: &[&Array3<f64>]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::Empty("no images"))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if im.dim() != (c, h, w) {
            return Err(Error::shape("image batch", format!("{:?}", (c, h, w)), format!("{:?}", im.dim())));
        }
        data.extend(im.iter().copied());
    }
    Ok(Tensor::from_shape_vec(IxDyn(&[images.len(), c, h, w]), data).expect("shape"))
}

/// Stacks `[3,H,W]` images into a `[B,3,H,W]` tensor after checking stride divisibility.
pub fn image_batch(images: &[&Array3<f64>], stride: usize) -> Result<Tensor> {
    for im in images {
        let (c, h, w) = im.dim();
        if c != 3 {
            return Err(Error::shape("extract_features", "3 channels", c.to_string()));
        }
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::shape(
                "extract_features",
                format!("H, W divisible by {stride}"),
                format!("{h}x{w}"),
            ));
        }
    }
    to_batch(images)
}

/// Features `[B,D,h,w]` for a batch, without gradient tracking.
pub fn extract_features_batch(images: &[&Array3<f64>], params: &BackboneParams) -> Result<Tensor> {
    let x = image_batch(images, params.stride())?;
    let mut g = Graph::new();
    let vars = bind(params, &mut g, false);
    let xv = g.constant(x);
    let z = params.forward(&mut g, &vars, xv);
    Ok(g.value(z).clone())
}

/// `z = f(image)`: `[3,H,W] -> [D,H/s,W/s]`.
pub fn extract_features(image: &Array3<f64>, params: &BackboneParams) -> Result<Array3<f64>> {
    let z = extract_features_batch(&[image], params)?;
    Ok(z.index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("3-d features"))
}

/// Pre-activation class maps `w_c . z`: `[C,h,w]`.
pub fn class_logit_maps(z: &Array3<f64>, head: &CamHead) -> Result<Array3<f64>> {
    let (d, h, w) = z.dim();
    if head.feature_dim() != d {
        return Err(Error::shape("compute_cam", head.feature_dim().to_string(), d.to_string()));
    }
    let z4 = z.clone().into_dyn().into_shape_with_order(IxDyn(&[1, d, h, w])).expect("4-d");
    let out = autograd::channel_matmul_kernel(&z4, &head.weight);
    Ok(out
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("3-d"))
}

/// Class activation maps `m_c = ReLU(w_c . z)`, max-normalized with absent classes zeroed.
pub fn compute_cam(z: &Array3<f64>, head: &CamHead, label: &[u8]) -> Result<CamMap> {
    let raw = class_logit_maps(z, head)?.mapv(|v| v.max(0.0));
    CamMap::from_raw(raw, label)
}

/// Image-level class scores: global average of the pre-activation maps `w_c . z`.
pub fn class_scores(z: &Array3<f64>, head: &CamHead) -> Result<Vec<f64>> {
    let maps = class_logit_maps(z, head)?;
    Ok(maps.outer_iter().map(|p| p.mean().unwrap_or(0.0)).collect())
}

/// Mean over classes of binary cross-entropy between `sigmoid(score)` and the label.
pub fn classification_loss(scores: &[f64], label: &[u8]) -> Result<f64> {
    if scores.len() != label.len() {
        return Err(Error::shape("classification_loss", scores.len().to_string(), label.len().to_string()));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = scores
        .iter()
        .zip(label)
        .map(|(&s, &y)| {
            if y > 0 {
                autograd::softplus(-s)
            } else {
                autograd::softplus(s)
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_backbone(seed: u64) -> BackboneParams {
        backbone(seed, false)
    }

    fn backbone(seed: u64, channel_norm: bool) -> BackboneParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BackboneParams::new(&DEFAULT_WIDTHS, &DEFAULT_STRIDES, channel_norm, &mut rng).unwrap()
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn feature_shape_and_determinism() {
        let bb = default_backbone(0);
        let im = random_image(1, 64, 64);
        let z = extract_features(&im, &bb).unwrap();
        assert_eq!(z.dim(), (64, 16, 16));
        assert_eq!(z, extract_features(&im, &bb).unwrap());
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stride_mismatch_is_an_error() {
        let bb = default_backbone(0);
        let im = random_image(1, 30, 32);
        assert!(matches!(extract_features(&im, &bb), Err(Error::Shape { .. })));
    }

    #[test]
    fn perturbation_stays_inside_receptive_field() {
        for norm in [false, true] {
            receptive_field_case(backbone(2, norm));
        }
    }

    fn receptive_field_case(bb: BackboneParams) {
        let im = random_image(3, 64, 64);
        let (py, px) = (13usize, 40usize);
        let mut im2 = im.clone();
        im2[[1, py, px]] += 1e-3;
        let z1 = extract_features(&im, &bb).unwrap();
        let z2 = extract_features(&im2, &bb).unwrap();
        let s = bb.stride();
        let r = bb.receptive_radius() as isize;
        assert_eq!(r, 1 + 1 + 2 + 4);
        let mut changed_inside = false;
        for y in 0..16 {
            for x in 0..16 {
                let inside = ((y * s) as isize - py as isize).abs() <= r && ((x * s) as isize - px as isize).abs() <= r;
                for d in 0..64 {
                    let diff = (z1[[d, y, x]] - z2[[d, y, x]]).abs();
                    if !inside {
                        assert_eq!(diff, 0.0, "change outside receptive field at ({y},{x})");
                    } else if diff > 0.0 {
                        changed_inside = true;
                    }
                }
            }
        }
        assert!(changed_inside);
    }

    #[test]
    fn cam_relu_and_normalization_examples() {
        // w_c . z < 0 everywhere
        let z = Array3::from_elem((2, 2, 2), 1.0);
        let head = CamHead::from_weight(Tensor::from_shape_vec(IxDyn(&[1, 2]), vec![-1.0, -0.5]).unwrap()).unwrap();
        let cam = compute_cam(&z, &head, &[1]).unwrap();
        assert!(cam.raw.iter().all(|&v| v == 0.0));
        assert!(cam.normalized.iter().all(|&v| v == 0.0));

        // constant features, w_c = 1/D
        let d = 4;
        let z = Array3::from_elem((d, 3, 3), 1.0);
        let head = CamHead::from_weight(Tensor::from_elem(IxDyn(&[2, d]), 1.0 / d as f64)).unwrap();
        let cam = compute_cam(&z, &head, &[1, 1]).unwrap();
        assert!(cam.raw.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(cam.normalized.iter().all(|&v| v == 1.0));
        let cam = compute_cam(&z, &head, &[1, 0]).unwrap();
        assert!(cam.normalized.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));

        // two pixels with features (1,3) and (2,4), w = [1,-1] -> ReLU([-2,-2])
        let z = Array3::from_shape_vec((2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let head = CamHead::from_weight(Tensor::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, -1.0]).unwrap()).unwrap();
        let cam = compute_cam(&z, &head, &[1]).unwrap();
        assert_eq!(cam.raw.as_slice().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn classification_loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((classification_loss(&[0.0, 0.0, 0.0], &[1, 0, 1]).unwrap() - ln2).abs() < 1e-15);
        let big = 60.0;
        assert!(classification_loss(&[big, -big], &[1, 0]).unwrap() < 1e-20);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expected = -(sig(1.0).ln() + (1.0 - sig(-1.0)).ln()) / 2.0;
        assert!((classification_loss(&[1.0, -1.0], &[1, 0]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn named_params_are_stable_and_ordered() {
        let bb = default_backbone(0);
        let names: Vec<String> = bb.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 8);
        assert_eq!(names[0], "backbone.0.weight");
        assert_eq!(names[7], "backbone.3.bias");
        let normed = backbone(0, true);
        let names: Vec<String> = normed.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 12);
        assert_eq!(names[11], "backbone.3.beta");
        assert_eq!(bb.feature_dim(), 64);
        assert_eq!(bb.stride(), 4);
    }
}
