//! Training: configuration, the composed objective, one optimization step and
//! the epoch loop.
//!
//! A step runs the original image through the network with gradients, runs
//! the erased image without them, assigns source / target pixels, refines
//! both CAMs into pseudo-labels and sums
//! `L_cls + L_uda + L_cps_s + L_cps_t` before a single backward pass.

use ndarray::{Array3, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign;
use crate::autograd::{Graph, HeadRow, PixelTarget, Tensor, Var};
use crate::cps::{self, PseudoLabelMap, PseudoOrigin, RefineConfig};
use crate::domadv::{self, DomainAssignment, DomainClassifierParams};
use crate::error::{Error, Result};
use crate::evalviz::{self, EvalItem, SweepResult};
use crate::grl::GrlConfig;
use crate::netcore::{self, bind, BackboneParams, CamHead, CamMap, Module};
use crate::synthdata::SynthSample;

/// Class channels of the per-pixel prediction supervised by the CPS losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpsLogits {
    /// `scale * n_c` from the max-normalized maps; gradients pass through the normalization.
    Normalized,
    /// The pre-ReLU class maps; the background logit is a constant of the current CAMs.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UdaMode {
    /// One domain head per class, each pixel scored by its class's head.
    Multihead,
    /// A single class-agnostic domain head.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    Mask,
    Simple,
}

/// Which features represent target pixels in the domain loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFeatures {
    /// Features of the original image, at the target pixels.
    Original,
    /// Features of the erased image (constants; only the classifier learns from them).
    Masked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta_prime: f64,
    pub gamma: f64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit per step; 0 disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    /// Leading epochs trained with `L_cls` alone, standing in for a
    /// pretrained starting point; counted within `epochs`.
    pub cls_warmup_epochs: usize,
    /// Initial learning rate of the warm-up, which has its own poly schedule;
    /// the main phase then restarts from `base_lr`.
    pub warmup_lr: f64,
    pub batch_size: usize,
    pub grl_lambda: f64,
    pub grl_warmup: bool,
    pub refine_iterations: usize,
    pub refine_dilations: Vec<usize>,
    /// Affinity temperature of the refinement, in per-image color stds.
    pub refine_temperature: f64,
    pub bg_power: f64,
    /// Scale from normalized CAM values to pixel logits.
    pub logit_scale: f64,
    /// Treat each CAM's spatial max as a constant in the CPS backward pass.
    pub cps_detach_max: bool,
    pub cps_logits: CpsLogits,
    pub use_uda: bool,
    pub use_cps_s: bool,
    pub use_cps_t: bool,
    pub uda_mode: UdaMode,
    pub assign: AssignMode,
    /// Lower threshold of SimpleAssign; the upper one is `alpha`.
    pub simple_alpha_lo: f64,
    pub target_features: TargetFeatures,
    /// Inverse-frequency weighting of source / target rows in the domain loss.
    pub domain_weighting: bool,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Per-pixel channel norm in the backbone instead of conv biases.
    pub channel_norm: bool,
    pub domain_dropout: f64,
    pub hflip: bool,
    /// Evaluate validation mIoU every this many epochs (0: final epoch only).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.6,
            beta_prime: 0.6,
            gamma: 0.9,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            epochs: 20,
            cls_warmup_epochs: 5,
            warmup_lr: 0.05,
            batch_size: 8,
            grl_lambda: 1.0,
            grl_warmup: false,
            refine_iterations: 10,
            refine_dilations: vec![1, 2, 4, 8],
            refine_temperature: 0.1,
            bg_power: 3.0,
            logit_scale: 10.0,
            cps_detach_max: false,
            cps_logits: CpsLogits::Normalized,
            use_uda: true,
            use_cps_s: true,
            use_cps_t: true,
            uda_mode: UdaMode::Multihead,
            assign: AssignMode::Mask,
            simple_alpha_lo: 0.4,
            target_features: TargetFeatures::Original,
            domain_weighting: true,
            widths: netcore::DEFAULT_WIDTHS.to_vec(),
            strides: netcore::DEFAULT_STRIDES.to_vec(),
            channel_norm: false,
            domain_dropout: 0.5,
            hflip: true,
            eval_every: 1,
            seed: 0,
        }
    }
}

/// Named loss-switch configurations of the ablation matrix.
pub const PRESETS: [&str; 7] = ["baseline", "uda", "cps_s", "cps_t", "uda_cps_s", "full", "full_simple"];

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        let (u, s, t) = match name {
            "baseline" => (false, false, false),
            "uda" => (true, false, false),
            "cps_s" => (false, true, false),
            "cps_t" => (false, false, true),
            "uda_cps_s" => (true, true, false),
            "full" => (true, true, true),
            "full_simple" => {
                c.assign = AssignMode::Simple;
                (true, true, true)
            }
            other => return Err(Error::config("preset", format!("unknown preset {other:?}; known: {PRESETS:?}"))),
        };
        c.use_uda = u;
        c.use_cps_s = s;
        c.use_cps_t = t;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, field: &'static str| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("{v} must lie in (0, 1)")))
            }
        };
        unit(self.alpha, "alpha")?;
        unit(self.beta_prime, "beta_prime")?;
        if self.assign == AssignMode::Simple && !(self.simple_alpha_lo > 0.0 && self.simple_alpha_lo < self.alpha) {
            return Err(Error::config("simple_alpha_lo", "must lie in (0, alpha)"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma", "must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if !(self.warmup_lr > 0.0 && self.warmup_lr.is_finite()) {
            return Err(Error::config("warmup_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", "must be >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.cls_warmup_epochs >= self.epochs && (self.use_uda || self.use_cps_s || self.use_cps_t) {
            return Err(Error::config("cls_warmup_epochs", "must be smaller than epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::config("logit_scale", "must be positive"));
        }
        if !(self.bg_power > 0.0) {
            return Err(Error::config("bg_power", "must be positive"));
        }
        if !(self.refine_temperature > 0.0) {
            return Err(Error::config("refine_temperature", "must be positive"));
        }
        if self.refine_dilations.contains(&0) {
            return Err(Error::config("refine_dilations", "dilations must be positive"));
        }
        if !(0.0..1.0).contains(&self.domain_dropout) {
            return Err(Error::config("domain_dropout", "must lie in [0, 1)"));
        }
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::config("widths", "need one stride per width"));
        }
        self.grl().validate()
    }

    pub fn grl(&self) -> GrlConfig {
        GrlConfig {
            lambda: self.grl_lambda,
            warmup: self.grl_warmup,
        }
    }

    pub fn refine(&self) -> RefineConfig {
        RefineConfig {
            iterations: self.refine_iterations,
            dilations: self.refine_dilations.clone(),
            bg_power: self.bg_power,
            temperature: self.refine_temperature,
        }
    }

    /// The same configuration with every auxiliary loss switched off.
    pub fn cls_only(&self) -> Self {
        TrainConfig {
            use_uda: false,
            use_cps_s: false,
            use_cps_t: false,
            ..self.clone()
        }
    }

    /// Everything that shapes the `L_cls`-only warm-up: the auxiliary switches
    /// and their settings reset to defaults.
    pub fn warmup_view(&self) -> Self {
        let d = TrainConfig::default();
        TrainConfig {
            alpha: d.alpha,
            beta_prime: d.beta_prime,
            grl_lambda: d.grl_lambda,
            grl_warmup: d.grl_warmup,
            refine_iterations: d.refine_iterations,
            refine_dilations: d.refine_dilations,
            refine_temperature: d.refine_temperature,
            bg_power: d.bg_power,
            logit_scale: d.logit_scale,
            cps_detach_max: d.cps_detach_max,
            cps_logits: d.cps_logits,
            uda_mode: d.uda_mode,
            assign: d.assign,
            simple_alpha_lo: d.simple_alpha_lo,
            target_features: d.target_features,
            domain_weighting: d.domain_weighting,
            domain_dropout: d.domain_dropout,
            eval_every: d.eval_every,
            ..self.cls_only()
        }
    }

    fn needs_masked_pass(&self) -> bool {
        self.assign == AssignMode::Mask && (self.use_uda || self.use_cps_t)
    }
}

/// `base * (1 - t/T)^gamma`.
pub fn poly_lr(t: usize, total: usize, base: f64, gamma: f64) -> Result<f64> {
    if t > total || total == 0 {
        return Err(Error::IndexOutOfRange {
            context: "poly_lr step",
            index: t,
            len: total + 1,
        });
    }
    Ok(base * (1.0 - t as f64 / total as f64).powf(gamma))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub cls: f64,
    pub uda: f64,
    pub cps_s: f64,
    pub cps_t: f64,
    pub total: f64,
}

impl LossBundle {
    fn check_finite(&self) -> Result<()> {
        for (name, v) in [("cls", self.cls), ("uda", self.uda), ("cps_s", self.cps_s), ("cps_t", self.cps_t)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { component: name, value: v });
            }
        }
        Ok(())
    }
}

/// Backbone, CAM head and domain classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PldaModel {
    pub backbone: BackboneParams,
    pub head: CamHead,
    pub domain: DomainClassifierParams,
}

impl PldaModel {
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("num_classes", "need at least one class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let backbone = BackboneParams::new(&cfg.widths, &cfg.strides, cfg.channel_norm, &mut rng)?;
        let d = backbone.feature_dim();
        let head = CamHead::new(num_classes, d, &mut rng);
        let heads = match cfg.uda_mode {
            UdaMode::Multihead => num_classes,
            UdaMode::Global => 1,
        };
        let domain = DomainClassifierParams::new(d, heads, cfg.domain_dropout, &mut rng)?;
        Ok(PldaModel { backbone, head, domain })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Features and CAMs for a set of images, without gradients.
    pub fn cams(&self, samples: &[&SynthSample]) -> Result<Vec<(Array3<f64>, CamMap)>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(16) {
            let images: Vec<&Array3<f64>> = chunk.iter().map(|s| &s.image).collect();
            let z = netcore::extract_features_batch(&images, &self.backbone)?;
            for (b, s) in chunk.iter().enumerate() {
                let zb: Array3<f64> = z.index_axis(Axis(0), b).to_owned().into_dimensionality().expect("3-d");
                let cam = netcore::compute_cam(&zb, &self.head, &s.image_label)?;
                out.push((zb, cam));
            }
        }
        Ok(out)
    }
}

impl Module for PldaModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.backbone.named_params();
        v.extend(self.head.named_params());
        v.extend(self.domain.named_params());
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.backbone.named_params_mut();
        v.extend(self.head.named_params_mut());
        v.extend(self.domain.named_params_mut());
        v
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Module, grads: &[Tensor], lr: f64) -> Result<()> {
        let mut params = model.named_params_mut();
        if params.len() != grads.len() {
            return Err(Error::shape("sgd step", params.len().to_string(), grads.len().to_string()));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| Tensor::zeros(p.raw_dim())).collect();
        }
        for (((_, p), g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let (mu, wd) = (self.momentum, self.weight_decay);
            ndarray::Zip::from(&mut **p).and(g).and(v).for_each(|p, &g, v| {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            });
        }
        Ok(())
    }
}

/// Step-dependent quantities that are not parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepContext {
    pub lambda: f64,
    /// Seeds the domain-classifier dropout masks.
    pub dropout_seed: u64,
}

/// Per-image intermediate products of a step, exposed for inspection.
#[derive(Clone, Debug)]
pub struct StepDetail {
    pub cams: Vec<CamMap>,
    pub masked_cams: Vec<Option<CamMap>>,
    pub assignments: Vec<DomainAssignment>,
    pub pseudo: Vec<Option<PseudoLabelMap>>,
    pub pseudo_masked: Vec<Option<PseudoLabelMap>>,
    pub cps_s_targets: Vec<PixelTarget>,
    pub cps_t_targets: Vec<PixelTarget>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub losses: LossBundle,
    /// One gradient per parameter, in [`Module::named_params`] order.
    pub grads: Vec<Tensor>,
    pub detail: StepDetail,
}

fn plane(t: &Tensor, b: usize) -> Array3<f64> {
    t.index_axis(Axis(0), b).to_owned().into_dimensionality().expect("3-d")
}

/// Forward and backward of the full objective on `batch` without updating
/// parameters.
pub fn compute_gradients(model: &PldaModel, batch: &[SynthSample], cfg: &TrainConfig, ctx: StepContext) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let c = model.num_classes();
    let stride = model.backbone.stride();
    for s in batch {
        if s.image_label.len() != c {
            return Err(Error::shape("batch label", c.to_string(), s.image_label.len().to_string()));
        }
    }
    let images: Vec<&Array3<f64>> = batch.iter().map(|s| &s.image).collect();
    let x = netcore::image_batch(&images, stride)?;
    let bsz = batch.len();

    let mut g = Graph::new();
    let bb_vars = bind(&model.backbone, &mut g, true);
    let head_vars = bind(&model.head, &mut g, true);
    let dom_vars = bind(&model.domain, &mut g, true);
    let xv = g.constant(x);
    let z = model.backbone.forward(&mut g, &bb_vars, xv);
    let maps = g.channel_matmul(z, head_vars[0]);

    let scores = g.spatial_mean(maps);
    let labels: Vec<f64> = batch.iter().flat_map(|s| s.image_label.iter().map(|&l| l as f64)).collect();
    let cls = g.bce_with_logits(scores, Tensor::from_shape_vec(IxDyn(&[bsz, c]), labels).expect("shape"));

    let raw = g.relu(maps);
    let active: Vec<bool> = batch.iter().flat_map(|s| s.image_label.iter().map(|&l| l > 0)).collect();
    let norm = if cfg.cps_detach_max {
        g.cam_normalize_detached(raw, active)
    } else {
        g.cam_normalize(raw, active)
    };

    let raw_value = g.value(raw).clone();
    let cams: Vec<CamMap> = (0..bsz)
        .map(|b| CamMap::from_raw(plane(&raw_value, b), &batch[b].image_label))
        .collect::<Result<_>>()?;

    // Erased pass, no gradient.
    let mut masked_images = Vec::new();
    let mut masked_cams: Vec<Option<CamMap>> = vec![None; bsz];
    let mut z_masked: Option<Tensor> = None;
    if cfg.needs_masked_pass() {
        for (s, cam) in batch.iter().zip(&cams) {
            masked_images.push(assign::mask_image(&s.image, cam, cfg.alpha, &s.image_label)?);
        }
        let refs: Vec<&Array3<f64>> = masked_images.iter().collect();
        let zt = netcore::extract_features_batch(&refs, &model.backbone)?;
        for (b, s) in batch.iter().enumerate() {
            masked_cams[b] = Some(netcore::compute_cam(&plane(&zt, b), &model.head, &s.image_label)?);
        }
        z_masked = Some(zt);
    }

    let assignments: Vec<DomainAssignment> = (0..bsz)
        .map(|b| {
            let label = &batch[b].image_label;
            match (cfg.assign, &masked_cams[b]) {
                (AssignMode::Mask, Some(mc)) => assign::mask_assign(&cams[b], mc, cfg.alpha, label),
                (AssignMode::Simple, _) => assign::simple_assign(&cams[b], cfg.alpha, cfg.simple_alpha_lo, label),
                // Only the source set is needed.
                (AssignMode::Mask, None) => assign::mask_assign(&cams[b], &cams[b], cfg.alpha, label).map(|mut a| {
                    a.target_idx.clear();
                    a.target_class.clear();
                    a
                }),
            }
        })
        .collect::<Result<_>>()?;

    let zero = g.constant(crate::autograd::scalar(0.0));

    let uda = if cfg.use_uda {
        let (index, rows) = domadv::batch_rows(&assignments, cfg.uda_mode == UdaMode::Multihead, cfg.domain_weighting);
        if rows.is_empty() {
            zero
        } else {
            let (mut si, mut sr, mut ti, mut tr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (ix, row) in index.into_iter().zip(rows) {
                if row.domain == 0 {
                    si.push(ix);
                    sr.push(row);
                } else {
                    ti.push(ix);
                    tr.push(row);
                }
            }
            let src = g.gather_pixels(z, si);
            let src = g.grl(src, ctx.lambda);
            let tgt = match (cfg.target_features, &z_masked) {
                (TargetFeatures::Masked, Some(zt)) => {
                    let zc = g.constant(zt.clone());
                    g.gather_pixels(zc, ti)
                }
                _ => {
                    let t = g.gather_pixels(z, ti);
                    g.grl(t, ctx.lambda)
                }
            };
            let feats = g.concat_rows(src, tgt);
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.dropout_seed);
            let logits = model.domain.forward(&mut g, &dom_vars, feats, Some(&mut rng));
            let rows: Vec<HeadRow> = sr.into_iter().chain(tr).collect();
            let n = rows.len() as f64;
            g.head_cross_entropy(logits, rows, n)
        }
    } else {
        zero
    };

    let refine = cfg.refine();
    let mut pseudo: Vec<Option<PseudoLabelMap>> = vec![None; bsz];
    let mut pseudo_masked: Vec<Option<PseudoLabelMap>> = vec![None; bsz];
    let mut cps_s_targets = Vec::new();
    let mut cps_t_targets = Vec::new();
    if cfg.use_cps_s || cfg.use_cps_t {
        for b in 0..bsz {
            let p = cps::refine_cam(&cams[b], &batch[b].image, &refine, PseudoOrigin::Original)?;
            if cfg.use_cps_s {
                let beta = cps::dynamic_threshold(&p, cfg.beta_prime)?;
                for (pixel, class) in cps::confident_pixels(&p, &assignments[b].source_idx, &beta)? {
                    cps_s_targets.push(PixelTarget { batch: b, pixel, class });
                }
            }
            if cfg.use_cps_t {
                let pt = match &masked_cams[b] {
                    Some(mc) => Some(cps::refine_cam(mc, &masked_images[b], &refine, PseudoOrigin::Masked)?),
                    None => None,
                };
                let src = pt.as_ref().unwrap_or(&p);
                let beta = cps::dynamic_threshold(src, cfg.beta_prime)?;
                for (pixel, class) in cps::confident_pixels(src, &assignments[b].target_idx, &beta)? {
                    cps_t_targets.push(PixelTarget { batch: b, pixel, class });
                }
                pseudo_masked[b] = pt;
            }
            pseudo[b] = Some(p);
        }
    }
    let (cps_s, cps_t) = if cfg.use_cps_s || cfg.use_cps_t {
        let logits = match cfg.cps_logits {
            CpsLogits::Normalized => g.background_logits(norm, cfg.logit_scale, cfg.bg_power),
            CpsLogits::Raw => {
                let (h, w) = cams[0].spatial();
                let mut bg = Tensor::zeros(IxDyn(&[bsz, h, w]));
                for (b, cam) in cams.iter().enumerate() {
                    let probs = cps::pixel_logits(cam, cfg.logit_scale, cfg.bg_power);
                    bg.index_axis_mut(ndarray::Axis(0), b).assign(&probs.index_axis(ndarray::Axis(0), 0).into_dyn());
                }
                g.prepend_channel(maps, &bg)
            }
        };
        let allowed: Vec<bool> = batch
            .iter()
            .flat_map(|s| std::iter::once(true).chain(s.image_label.iter().map(|&l| l > 0)))
            .collect();
        let s = if cfg.use_cps_s {
            g.masked_cross_entropy(logits, allowed.clone(), cps_s_targets.clone())
        } else {
            zero
        };
        let t = if cfg.use_cps_t {
            g.masked_cross_entropy(logits, allowed, cps_t_targets.clone())
        } else {
            zero
        };
        (s, t)
    } else {
        (zero, zero)
    };

    let mut losses = LossBundle {
        cls: g.scalar(cls),
        uda: g.scalar(uda),
        cps_s: g.scalar(cps_s),
        cps_t: g.scalar(cps_t),
        total: 0.0,
    };
    losses.check_finite()?;
    let t1 = g.add(cls, uda);
    let t2 = g.add(t1, cps_s);
    let total = g.add(t2, cps_t);
    losses.total = g.scalar(total);

    let grads = g.backward(total);
    let all_vars: Vec<Var> = bb_vars.into_iter().chain(head_vars).chain(dom_vars).collect();
    let grads = model
        .named_params()
        .iter()
        .zip(&all_vars)
        .map(|((_, t), &v)| grads.get_or_zeros(v, t))
        .collect();
    Ok(StepOutput {
        losses,
        grads,
        detail: StepDetail {
            cams,
            masked_cams,
            assignments,
            pseudo,
            pseudo_masked,
            cps_s_targets,
            cps_t_targets,
        },
    })
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm` (0: no-op).
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}

fn step_seed(seed: u64, step: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1 + step as u64);
    r.random()
}

/// Stateful optimization over a fixed schedule of `total_steps`.
#[derive(Clone)]
pub struct Trainer {
    pub model: PldaModel,
    pub cfg: TrainConfig,
    pub opt: Sgd,
    pub step: usize,
    pub total_steps: usize,
    /// Steps before the auxiliary losses switch on.
    pub warmup_steps: usize,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, num_classes: usize, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let model = PldaModel::new(&cfg, num_classes)?;
        Ok(Trainer {
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            model,
            cfg,
            step: 0,
            total_steps: total_steps.max(1),
            warmup_steps: 0,
            epoch: 0,
        })
    }

    /// A trainer for `cfg.epochs` epochs over `train_set`, warm-up included.
    pub fn for_dataset(cfg: &TrainConfig, train_set: &[SynthSample]) -> Result<Self> {
        cfg.validate()?;
        let first = train_set.first().ok_or(Error::Empty("training set"))?;
        let per_epoch = train_set.len().div_ceil(cfg.batch_size);
        let mut t = Trainer::new(cfg.clone(), first.image_label.len(), per_epoch * cfg.epochs)?;
        t.warmup_steps = per_epoch * cfg.cls_warmup_epochs;
        Ok(t)
    }

    /// Copy of a trainer that is still inside its warm-up, continuing under
    /// `cfg`. Both configurations must share the warm-up trajectory.
    pub fn branch(&self, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if self.step > self.warmup_steps || cfg.warmup_view() != self.cfg.warmup_view() {
            return Err(Error::config("branch", "configurations diverge before the branch point"));
        }
        let mut t = self.clone();
        t.cfg = cfg.clone();
        Ok(t)
    }

    pub fn lr(&self) -> Result<f64> {
        let t = self.step.min(self.total_steps);
        if t < self.warmup_steps {
            poly_lr(t, self.warmup_steps, self.cfg.warmup_lr, self.cfg.gamma)
        } else {
            let main = self.total_steps.saturating_sub(self.warmup_steps).max(1);
            poly_lr((t - self.warmup_steps).min(main), main, self.cfg.base_lr, self.cfg.gamma)
        }
    }

    pub fn context(&self) -> StepContext {
        StepContext {
            lambda: self.cfg.grl().lambda_at(self.step as f64 / self.total_steps as f64),
            dropout_seed: step_seed(self.cfg.seed, self.step),
        }
    }

    /// One update; returns the losses evaluated before it.
    pub fn train_step(&mut self, batch: &[SynthSample]) -> Result<LossBundle> {
        let lr = self.lr()?;
        let cfg = if self.step < self.warmup_steps {
            self.cfg.cls_only()
        } else {
            self.cfg.clone()
        };
        let mut out = compute_gradients(&self.model, batch, &cfg, self.context())?;
        clip_global_norm(&mut out.grads, self.cfg.grad_clip);
        self.opt.step(&mut self.model, &out.grads, lr)?;
        self.step += 1;
        Ok(out.losses)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    pub cls: f64,
    pub uda: f64,
    pub cps_s: f64,
    pub cps_t: f64,
    pub total: f64,
    pub val_miou: Option<f64>,
    pub steps: usize,
}

pub struct TrainOutcome {
    pub model: PldaModel,
    pub log: Vec<EpochRecord>,
    pub steps: usize,
    pub final_eval: Option<SweepResult>,
}

/// CAM mIoU on `samples` at the best threshold of `grid`.
pub fn evaluate(model: &PldaModel, samples: &[SynthSample], grid: &[f64]) -> Result<SweepResult> {
    let refs: Vec<&SynthSample> = samples.iter().collect();
    let cams = model.cams(&refs)?;
    let items: Vec<EvalItem> = samples
        .iter()
        .zip(&cams)
        .map(|(s, (_, cam))| EvalItem::from_cam(cam, &s.image_label, &s.gt_mask))
        .collect();
    evalviz::sweep_background_threshold(&items, grid)
}

/// Source / target centroid-similarity histograms of a model's features on
/// `samples`, with regions split by the `alpha` rule on ground-truth objects.
pub fn similarity_diagnostic(
    model: &PldaModel,
    samples: &[SynthSample],
    alpha: f64,
    per_class: usize,
    bins: usize,
    seed: u64,
) -> Result<evalviz::SimilarityReport> {
    let refs: Vec<&SynthSample> = samples.iter().collect();
    let cams = model.cams(&refs)?;
    let stride = model.backbone.stride();
    let mut feats = Vec::with_capacity(samples.len());
    let mut regions = Vec::with_capacity(samples.len());
    for (s, (z, cam)) in samples.iter().zip(cams) {
        let gt_small = evalviz::downsample_labels(&s.gt_mask, stride);
        regions.push(evalviz::diagnostic_regions(&cam, &gt_small, alpha)?);
        feats.push(z);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    evalviz::similarity_histogram(&feats, &regions, model.num_classes(), per_class, bins, &mut rng)
}

impl Trainer {
    /// Trains until `until` epochs are complete; `on_epoch` sees every record
    /// as it is produced. Evaluates on `val_set` per `cfg.eval_every` and
    /// always after the schedule's final epoch.
    pub fn run_until(
        &mut self,
        train_set: &[SynthSample],
        val_set: &[SynthSample],
        until: usize,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<(Vec<EpochRecord>, Option<SweepResult>)> {
        let cfg = self.cfg.clone();
        let until = until.min(cfg.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let grid = evalviz::default_grid();
        let mut log = Vec::new();
        let mut final_eval = None;
        while self.epoch < until {
            let epoch = self.epoch;
            order.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 << 32 | epoch as u64);
            order.shuffle(&mut rng);
            let lr = self.lr()?;
            let mut sum = LossBundle::default();
            let mut n = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<SynthSample> = chunk
                    .iter()
                    .map(|&i| {
                        if cfg.hflip && rng.random::<bool>() {
                            train_set[i].hflip()
                        } else {
                            train_set[i].clone()
                        }
                    })
                    .collect();
                let l = self.train_step(&batch)?;
                sum.cls += l.cls;
                sum.uda += l.uda;
                sum.cps_s += l.cps_s;
                sum.cps_t += l.cps_t;
                sum.total += l.total;
                n += 1;
            }
            self.epoch += 1;
            let last = epoch + 1 == cfg.epochs;
            let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
            let val_miou = if !val_set.is_empty() && (last || due) {
                let r = evaluate(&self.model, val_set, &grid)?;
                let m = r.best.mean;
                if last {
                    final_eval = Some(r);
                }
                Some(m)
            } else {
                None
            };
            let k = n.max(1) as f64;
            let rec = EpochRecord {
                epoch,
                lr,
                cls: sum.cls / k,
                uda: sum.uda / k,
                cps_s: sum.cps_s / k,
                cps_t: sum.cps_t / k,
                total: sum.total / k,
                val_miou,
                steps: n,
            };
            log::info!(
                "epoch {epoch}: total {:.4} (cls {:.4} uda {:.4} cps_s {:.4} cps_t {:.4}) val_miou {:?}",
                rec.total,
                rec.cls,
                rec.uda,
                rec.cps_s,
                rec.cps_t,
                rec.val_miou
            );
            on_epoch(&rec);
            log.push(rec);
        }
        Ok((log, final_eval))
    }
}

/// Runs `cfg.epochs` epochs; `on_epoch` sees every record as it is produced.
pub fn train_with(
    train_set: &[SynthSample],
    val_set: &[SynthSample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::for_dataset(cfg, train_set)?;
    let (log, final_eval) = trainer.run_until(train_set, val_set, cfg.epochs, on_epoch)?;
    Ok(TrainOutcome {
        steps: trainer.step,
        model: trainer.model,
        log,
        final_eval,
    })
}

pub fn train(train_set: &[SynthSample], val_set: &[SynthSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(train_set, val_set, cfg, |_| {})
}
