//! Pixel-level domain classifier and the adversarial domain losses.
//!
//! The classifier is a shared per-pixel MLP base followed by `H` independent
//! two-logit heads. With `H = C` each head separates source from target
//! pixels of one class only (the disentangled loss); with `H = 1` the single
//! head gives the global, class-agnostic loss.

use ndarray::{Array2, Array3, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{self, Graph, HeadRow, Tensor, Var};
use crate::error::{Error, Result};
use crate::netcore::Module;

/// Domain index: source pixels are labelled 0, target pixels 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source = 0,
    Target = 1,
}

impl Domain {
    /// One-hot domain label `d`.
    pub fn one_hot(self) -> [u8; 2] {
        match self {
            Domain::Source => [1, 0],
            Domain::Target => [0, 1],
        }
    }
}

/// Source / target pixel sets of one image with the class each pixel is assigned to.
///
/// Pixel indices are row-major positions in the `h x w` CAM grid. A pixel may
/// appear in both sets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DomainAssignment {
    pub source_idx: Vec<usize>,
    pub source_class: Vec<usize>,
    pub target_idx: Vec<usize>,
    pub target_class: Vec<usize>,
}

/// One listed pixel of a [`DomainAssignment`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AssignedPixel {
    pub pixel: usize,
    pub class: usize,
    pub domain: Domain,
}

impl DomainAssignment {
    pub fn len(&self) -> usize {
        self.source_idx.len() + self.target_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Source pixels first, then target pixels (`d = concat(d_s, d_t)`).
    pub fn pixels(&self) -> impl Iterator<Item = AssignedPixel> + '_ {
        let src = self
            .source_idx
            .iter()
            .zip(&self.source_class)
            .map(|(&pixel, &class)| AssignedPixel {
                pixel,
                class,
                domain: Domain::Source,
            });
        let tgt = self
            .target_idx
            .iter()
            .zip(&self.target_class)
            .map(|(&pixel, &class)| AssignedPixel {
                pixel,
                class,
                domain: Domain::Target,
            });
        src.chain(tgt)
    }
}

/// Per-domain loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainWeights {
    pub source: f64,
    pub target: f64,
}

impl DomainWeights {
    pub fn unit() -> Self {
        DomainWeights {
            source: 1.0,
            target: 1.0,
        }
    }

    /// `w_s = N / (2 N_s)`, `w_t = N / (2 N_t)` with `N = N_s + N_t`, so both
    /// domains contribute equally. An empty domain gets weight 0.
    pub fn inverse_frequency(num_source: usize, num_target: usize) -> Self {
        let n = (num_source + num_target) as f64;
        let w = |k: usize| if k == 0 { 0.0 } else { n / (2.0 * k as f64) };
        DomainWeights {
            source: w(num_source),
            target: w(num_target),
        }
    }

    pub fn get(&self, d: Domain) -> f64 {
        match d {
            Domain::Source => self.source,
            Domain::Target => self.target,
        }
    }
}

/// Shared base `Linear(D,D) -> ReLU -> Dropout -> Linear(D,D) -> ReLU -> Dropout`
/// and `H` two-logit heads.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainClassifierParams {
    pub base1_weight: Tensor,
    pub base1_bias: Tensor,
    pub base2_weight: Tensor,
    pub base2_bias: Tensor,
    /// `[H, 2, D]`
    pub head_weight: Tensor,
    /// `[H, 2]`
    pub head_bias: Tensor,
    /// Dropout probability used in training mode.
    pub dropout: f64,
}

fn linear_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (1.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::from_shape_vec(IxDyn(shape), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

impl DomainClassifierParams {
    pub fn new(feature_dim: usize, num_heads: usize, dropout: f64, rng: &mut impl Rng) -> Result<Self> {
        if num_heads == 0 {
            return Err(Error::config("num_heads", "need at least one head"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config("domain_dropout", "must lie in [0, 1)"));
        }
        let d = feature_dim;
        Ok(DomainClassifierParams {
            base1_weight: linear_init(rng, &[d, d], d),
            base1_bias: Tensor::zeros(IxDyn(&[d])),
            base2_weight: linear_init(rng, &[d, d], d),
            base2_bias: Tensor::zeros(IxDyn(&[d])),
            head_weight: linear_init(rng, &[num_heads, 2, d], d),
            head_bias: Tensor::zeros(IxDyn(&[num_heads, 2])),
            dropout,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.head_weight.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.base1_weight.shape()[1]
    }

    /// `[N, D] -> [N, H, 2]`. `dropout_rng` enables training-mode dropout.
    pub fn forward<R: Rng>(&self, g: &mut Graph, vars: &[Var], x: Var, dropout_rng: Option<&mut R>) -> Var {
        let n = g.value(x).shape()[0];
        let d = self.feature_dim();
        let h = self.num_heads();
        let mut rng = dropout_rng;
        let mut drop = |g: &mut Graph, v: Var| -> Var {
            match rng.as_mut() {
                Some(r) if self.dropout > 0.0 => {
                    let keep = 1.0 - self.dropout;
                    let mask: Vec<f64> = (0..n * d)
                        .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    g.mul_const(v, Tensor::from_shape_vec(IxDyn(&[n, d]), mask).expect("shape"))
                }
                _ => v,
            }
        };
        let a = g.linear(x, vars[0], vars[1]);
        let a = g.relu(a);
        let a = drop(g, a);
        let b = g.linear(a, vars[2], vars[3]);
        let b = g.relu(b);
        let b = drop(g, b);
        let w = g.reshape(vars[4], &[h * 2, d]);
        let bias = g.reshape(vars[5], &[h * 2]);
        let y = g.linear(b, w, bias);
        g.reshape(y, &[n, h, 2])
    }
}

impl Module for DomainClassifierParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("domain.base1.weight".into(), &self.base1_weight),
            ("domain.base1.bias".into(), &self.base1_bias),
            ("domain.base2.weight".into(), &self.base2_weight),
            ("domain.base2.bias".into(), &self.base2_bias),
            ("domain.heads.weight".into(), &self.head_weight),
            ("domain.heads.bias".into(), &self.head_bias),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("domain.base1.weight".into(), &mut self.base1_weight),
            ("domain.base1.bias".into(), &mut self.base1_bias),
            ("domain.base2.weight".into(), &mut self.base2_weight),
            ("domain.base2.bias".into(), &mut self.base2_bias),
            ("domain.heads.weight".into(), &mut self.head_weight),
            ("domain.heads.bias".into(), &mut self.head_bias),
        ]
    }
}

/// Inference-mode logits `[N, H, 2]` for pixel features `[N, D]`.
pub fn domain_logits(pixel_features: &Array2<f64>, params: &DomainClassifierParams) -> Result<Array3<f64>> {
    let (n, d) = pixel_features.dim();
    if d != params.feature_dim() {
        return Err(Error::shape("domain_logits", params.feature_dim().to_string(), d.to_string()));
    }
    let h = params.num_heads();
    if n == 0 {
        return Ok(Array3::zeros((0, h, 2)));
    }
    let mut g = Graph::new();
    let vars = crate::netcore::bind(params, &mut g, false);
    let x = g.constant(pixel_features.clone().into_dyn());
    let y = params.forward::<rand_chacha::ChaCha8Rng>(&mut g, &vars, x, None);
    Ok(g.value(y).clone().into_dimensionality().expect("3-d"))
}

fn rows_for(
    assignment: &DomainAssignment,
    weights: DomainWeights,
    n: usize,
    heads: usize,
    per_class: bool,
) -> Result<(Vec<usize>, Vec<HeadRow>)> {
    let mut src_rows = Vec::with_capacity(assignment.len());
    let mut rows = Vec::with_capacity(assignment.len());
    for p in assignment.pixels() {
        if p.pixel >= n {
            return Err(Error::IndexOutOfRange {
                context: "domain loss pixel",
                index: p.pixel,
                len: n,
            });
        }
        let head = if per_class { p.class } else { 0 };
        if head >= heads {
            return Err(Error::IndexOutOfRange {
                context: "domain loss head",
                index: head,
                len: heads,
            });
        }
        src_rows.push(p.pixel);
        rows.push(HeadRow {
            head,
            domain: p.domain as usize,
            weight: weights.get(p.domain),
        });
    }
    Ok((src_rows, rows))
}

fn select_rows(logits: &Array3<f64>, rows: &[usize]) -> Tensor {
    let (_, h, k) = logits.dim();
    let mut out = Array3::<f64>::zeros((rows.len(), h, k));
    for (i, &r) in rows.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&logits.index_axis(ndarray::Axis(0), r));
    }
    out.into_dyn()
}

/// Disentangled domain loss: each listed pixel is scored only by the head of
/// its assigned class,
/// `(1 / (|D_s| + |D_t|)) * sum_i w(d_i) * CE(softmax(logits[i, c_i, :]), d_i)`.
///
/// `logits` is `[N, C, 2]` over all `N` grid pixels. Empty assignments give 0.
pub fn uda_loss_multihead(logits: &Array3<f64>, assignment: &DomainAssignment, weights: DomainWeights) -> Result<f64> {
    let (n, heads, k) = logits.dim();
    if k != 2 {
        return Err(Error::shape("uda_loss_multihead", "[N, C, 2]", format!("{:?}", logits.dim())));
    }
    let (idx, rows) = rows_for(assignment, weights, n, heads, true)?;
    if rows.is_empty() {
        return Ok(0.0);
    }
    let sel = select_rows(logits, &idx);
    Ok(autograd::head_cross_entropy_kernel(&sel, &rows, rows.len() as f64).0)
}

/// Global binary domain loss over `[N, 2]` logits, ignoring pixel classes.
pub fn uda_loss_global(logits: &Array2<f64>, assignment: &DomainAssignment, weights: DomainWeights) -> Result<f64> {
    let (n, k) = logits.dim();
    if k != 2 {
        return Err(Error::shape("uda_loss_global", "[N, 2]", format!("{:?}", logits.dim())));
    }
    let (idx, rows) = rows_for(assignment, weights, n, 1, false)?;
    if rows.is_empty() {
        return Ok(0.0);
    }
    let l3 = logits.clone().into_shape_with_order((n, 1, 2)).expect("reshape");
    let sel = select_rows(&l3, &idx);
    Ok(autograd::head_cross_entropy_kernel(&sel, &rows, rows.len() as f64).0)
}

/// Batched rows for the training graph: `(batch, pixel)` gather indices and
/// head rows over all images, with inverse-frequency weights computed on the
/// batch totals.
pub fn batch_rows(assignments: &[DomainAssignment], per_class: bool, weighted: bool) -> (Vec<(usize, usize)>, Vec<HeadRow>) {
    let ns: usize = assignments.iter().map(|a| a.source_idx.len()).sum();
    let nt: usize = assignments.iter().map(|a| a.target_idx.len()).sum();
    let weights = if weighted {
        DomainWeights::inverse_frequency(ns, nt)
    } else {
        DomainWeights::unit()
    };
    let mut index = Vec::with_capacity(ns + nt);
    let mut rows = Vec::with_capacity(ns + nt);
    for (b, a) in assignments.iter().enumerate() {
        for p in a.pixels() {
            index.push((b, p.pixel));
            rows.push(HeadRow {
                head: if per_class { p.class } else { 0 },
                domain: p.domain as usize,
                weight: weights.get(p.domain),
            });
        }
    }
    (index, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64, d: usize, h: usize) -> DomainClassifierParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DomainClassifierParams::new(d, h, 0.5, &mut rng).unwrap()
    }

    #[test]
    fn empty_input_gives_empty_logits() {
        let p = params(0, 8, 3);
        let out = domain_logits(&Array2::zeros((0, 8)), &p).unwrap();
        assert_eq!(out.dim(), (0, 3, 2));
        assert!(matches!(domain_logits(&Array2::zeros((2, 7)), &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_base_gives_head_biases() {
        let mut p = params(1, 4, 2);
        p.base1_weight.fill(0.0);
        p.base2_weight.fill(0.0);
        p.head_bias = Tensor::from_shape_vec(IxDyn(&[2, 2]), vec![0.3, -0.7, 0.3, -0.7]).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64 - 3.0);
        let out = domain_logits(&x, &p).unwrap();
        for v in out.outer_iter() {
            for head in v.outer_iter() {
                assert_eq!(head.to_vec(), vec![0.3, -0.7]);
            }
        }
    }

    #[test]
    fn heads_are_independent() {
        let p = params(2, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((7, 6), |_| rng.random_range(-1.0..1.0));
        let before = domain_logits(&x, &p).unwrap();
        let mut q = p.clone();
        for j in 0..2 {
            for d in 0..6 {
                q.head_weight[[2, j, d]] += 0.25;
            }
        }
        let after = domain_logits(&x, &q).unwrap();
        for i in 0..7 {
            for h in 0..3 {
                for j in 0..2 {
                    let diff = after[[i, h, j]] - before[[i, h, j]];
                    if h == 2 {
                        assert!(diff.abs() > 0.0);
                    } else {
                        assert_eq!(diff, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn loss_degenerate_cases() {
        let logits = Array3::zeros((4, 2, 2));
        let empty = DomainAssignment::default();
        assert_eq!(uda_loss_multihead(&logits, &empty, DomainWeights::unit()).unwrap(), 0.0);
        assert_eq!(uda_loss_global(&Array2::zeros((4, 2)), &empty, DomainWeights::unit()).unwrap(), 0.0);
        let a = DomainAssignment {
            source_idx: vec![0, 1],
            source_class: vec![0, 1],
            target_idx: vec![2, 3],
            target_class: vec![1, 0],
        };
        let ln2 = std::f64::consts::LN_2;
        assert!((uda_loss_multihead(&logits, &a, DomainWeights::unit()).unwrap() - ln2).abs() < 1e-15);
        assert!((uda_loss_global(&Array2::zeros((4, 2)), &a, DomainWeights::unit()).unwrap() - ln2).abs() < 1e-15);
        let bad = DomainAssignment {
            source_idx: vec![9],
            source_class: vec![0],
            ..DomainAssignment::default()
        };
        assert!(matches!(
            uda_loss_multihead(&logits, &bad, DomainWeights::unit()),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn two_pixel_hand_instance() {
        // A: class 0, source, head0 logits (2, 0); B: class 1, target, head1 logits (0, 1)
        let mut logits = Array3::zeros((2, 2, 2));
        logits[[0, 0, 0]] = 2.0;
        logits[[1, 1, 1]] = 1.0;
        // non-selected heads must not matter
        logits[[0, 1, 0]] = -5.0;
        logits[[1, 0, 1]] = 7.0;
        let a = DomainAssignment {
            source_idx: vec![0],
            source_class: vec![0],
            target_idx: vec![1],
            target_class: vec![1],
        };
        let ce_a = -(2.0f64.exp() / (2.0f64.exp() + 1.0)).ln();
        let ce_b = -(1.0f64.exp() / (1.0 + 1.0f64.exp())).ln();
        let got = uda_loss_multihead(&logits, &a, DomainWeights::unit()).unwrap();
        assert!((got - (ce_a + ce_b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_frequency_balances_domains() {
        let w = DomainWeights::inverse_frequency(30, 10);
        assert!((w.source * 30.0 - w.target * 10.0).abs() < 1e-12);
        assert!((w.source * 30.0 + w.target * 10.0 - 40.0).abs() < 1e-12);
        assert_eq!(DomainWeights::inverse_frequency(5, 0).target, 0.0);
    }

    #[test]
    fn one_hot_labels() {
        assert_eq!(Domain::Source.one_hot(), [1, 0]);
        assert_eq!(Domain::Target.one_hot(), [0, 1]);
    }
}
