//! Minimal tape-based reverse-mode differentiation over `f64` tensors.
//!
//! Every forward call appends a node holding its value and whatever the
//! backward rule needs. Nodes are topologically ordered by construction, so
//! [`Graph::backward`] is a single reverse sweep. Only the operators the
//! training pipeline uses are provided; the fused loss operators carry their
//! own hand-derived backward rules and are unit-tested against central finite
//! differences below.

use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One supervised pixel for [`Graph::masked_cross_entropy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelTarget {
    pub batch: usize,
    pub pixel: usize,
    pub class: usize,
}

/// One row of [`Graph::head_cross_entropy`]: which head scores the row, the
/// domain index it should predict, and its loss weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadRow {
    pub head: usize,
    pub domain: usize,
    pub weight: f64,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    ChannelMatmul {
        x: Var,
        w: Var,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Relu(Var),
    Grl {
        x: Var,
        lambda: f64,
    },
    MulConst {
        x: Var,
        mask: Tensor,
    },
    Gather {
        x: Var,
        index: Vec<(usize, usize)>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    ConcatRows(Var, Var),
    PrependChannel(Var),
    SpatialMean(Var),
    BceLogits {
        x: Var,
        targets: Tensor,
    },
    CamNormalize {
        x: Var,
        active: Vec<bool>,
        argmax: Vec<usize>,
        max: Vec<f64>,
        detach_max: bool,
    },
    BackgroundLogits {
        x: Var,
        scale: f64,
        power: f64,
        argmax: Vec<usize>,
    },
    MaskedCrossEntropy {
        logits: Var,
        allowed: Vec<bool>,
        targets: Vec<PixelTarget>,
        probs: Vec<f64>,
    },
    HeadCrossEntropy {
        logits: Var,
        rows: Vec<HeadRow>,
        normalizer: f64,
        probs: Vec<[f64; 2]>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Scale {
        x: Var,
        s: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.raw_dim()))
    }
}

pub fn scalar(v: f64) -> Tensor {
    Tensor::from_elem(IxDyn(&[]), v)
}

fn contiguous(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn dims4(t: &Tensor, what: &str) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "{what}: expected a 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_shape_vec(IxDyn(shape), data).expect("shape/data length agree")
}

// ---------------------------------------------------------------------------
// Kernels shared by graph ops and the single-image inference paths.
// ---------------------------------------------------------------------------

pub(crate) fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let ncols = b * ho * wo;
    let rows = cin * k * k;
    let mut cols = vec![0.0; rows * ncols];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for bi in 0..b {
                    let plane = &x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, ncols), cols).expect("im2col shape")
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: ArrayView2<f64>,
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let ncols = b * ho * wo;
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("contiguous");
    let mut x = vec![0.0; b * cin * h * w];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for bi in 0..b {
                    let plane = &mut x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &row[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[B,Cout,P]`-ordered data to a `[Cout, B*P]` matrix.
fn batch_to_mat(data: &[f64], b: usize, c: usize, p: usize) -> Array2<f64> {
    let mut m = vec![0.0; c * b * p];
    for bi in 0..b {
        for ci in 0..c {
            let src = &data[(bi * c + ci) * p..(bi * c + ci + 1) * p];
            m[ci * b * p + bi * p..ci * b * p + (bi + 1) * p].copy_from_slice(src);
        }
    }
    Array2::from_shape_vec((c, b * p), m).expect("shape")
}

fn mat_to_batch(m: &Array2<f64>, b: usize, c: usize, p: usize) -> Vec<f64> {
    let m = m.as_standard_layout();
    let s = m.as_slice().expect("contiguous");
    let mut out = vec![0.0; b * c * p];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * p..(bi * c + ci + 1) * p]
                .copy_from_slice(&s[ci * b * p + bi * p..ci * b * p + (bi + 1) * p]);
        }
    }
    out
}

const NORM_EPS: f64 = 1e-5;

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: contiguous(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: contiguous(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 0-d node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        debug_assert_eq!(t.len(), 1);
        t.iter().copied().next().unwrap_or(0.0)
    }

    /// 2-d convolution, NCHW, square kernel, zero "same" padding of `k/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Var {
        let (b, cin, h, wd) = dims4(self.value(x), "conv2d input");
        let (cout, cin_w, k, k2) = dims4(self.value(w), "conv2d weight");
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d expects square kernels");
        let pad = k / 2;
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);
        let cols = im2col(
            self.value(x).as_slice().expect("contiguous"),
            b,
            cin,
            h,
            wd,
            k,
            stride,
            pad,
        );
        let w2 = self
            .value(w)
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("weight reshape");
        let out = w2.dot(&cols);
        let value = tensor(&[b, cout, ho, wo], mat_to_batch(&out, b, cout, ho * wo));
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            },
            &[x, w],
        )
    }

    /// 1x1 convolution without bias: `[B,Cin,h,w] x [Cout,Cin] -> [B,Cout,h,w]`.
    pub fn channel_matmul(&mut self, x: Var, w: Var) -> Var {
        let value = channel_matmul_kernel(self.value(x), self.value(w));
        self.push(value, Op::ChannelMatmul { x, w }, &[x, w])
    }

    /// Per-pixel normalization across channels with a per-channel affine map.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (b, c, h, w) = dims4(self.value(x), "channel_norm");
        let p = h * w;
        let xs = self.value(x).as_slice().expect("contiguous");
        let g = self.value(gamma).as_slice().expect("contiguous");
        let be = self.value(beta).as_slice().expect("contiguous");
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; b * p];
        for bi in 0..b {
            let base = bi * c * p;
            for pi in 0..p {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += xs[base + ci * p + pi];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = xs[base + ci * p + pi] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[bi * p + pi] = is;
                for ci in 0..c {
                    let idx = base + ci * p + pi;
                    let xh = (xs[idx] - mean) * is;
                    xhat[idx] = xh;
                    out[idx] = g[ci] * xh + be[ci];
                }
            }
        }
        let shape = [b, c, h, w];
        self.push(
            tensor(&shape, out),
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat: tensor(&shape, xhat),
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// `x[b,c,:,:] + bias[c]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (_, c, h, w) = dims4(self.value(x), "channel_bias");
        assert_eq!(self.value(b).len(), c, "channel_bias length");
        let p = h * w;
        let bias = self.value(b).as_slice().expect("contiguous").to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.as_slice_mut().expect("contiguous").iter_mut().enumerate() {
            *v += bias[(i / p) % c];
        }
        self.push(value, Op::ChannelBias { x, b }, &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Grl { x, lambda }, &[x])
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), mask.shape(), "mul_const shape");
        let value = self.value(x) * &mask;
        self.push(value, Op::MulConst { x, mask }, &[x])
    }

    /// Collects feature vectors `x[b, :, pixel]` into an `[N, D]` matrix.
    pub fn gather_pixels(&mut self, x: Var, index: Vec<(usize, usize)>) -> Var {
        let (b, d, h, w) = dims4(self.value(x), "gather_pixels");
        let p = h * w;
        let xs = self.value(x).as_slice().expect("contiguous");
        let mut out = vec![0.0; index.len() * d];
        for (row, &(bi, pi)) in index.iter().enumerate() {
            assert!(bi < b && pi < p, "gather index out of range");
            for di in 0..d {
                out[row * d + di] = xs[(bi * d + di) * p + pi];
            }
        }
        let value = tensor(&[index.len(), d], out);
        self.push(value, Op::Gather { x, index }, &[x])
    }

    /// `[N,Din] x [Dout,Din]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let value = linear_kernel(self.value(x), self.value(w), self.value(b));
        self.push(value, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Stacks `[N1, ...]` and `[N2, ...]` along the first axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(ndarray::Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows trailing shapes");
        self.push(value, Op::ConcatRows(a, b), &[a, b])
    }

    /// `[B,C,h,w] -> [B,C]` global average pooling.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let (b, c, h, w) = dims4(self.value(x), "spatial_mean");
        let p = h * w;
        let xs = self.value(x).as_slice().expect("contiguous");
        let out: Vec<f64> = (0..b * c)
            .map(|i| xs[i * p..(i + 1) * p].iter().sum::<f64>() / p as f64)
            .collect();
        self.push(tensor(&[b, c], out), Op::SpatialMean(x), &[x])
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `targets` over all elements.
    pub fn bce_with_logits(&mut self, x: Var, targets: Tensor) -> Var {
        let xs = self.value(x);
        assert_eq!(xs.shape(), targets.shape(), "bce target shape");
        let n = xs.len().max(1) as f64;
        let total: f64 = xs
            .iter()
            .zip(targets.iter())
            .map(|(&l, &y)| y * softplus(-l) + (1.0 - y) * softplus(l))
            .sum();
        self.push(scalar(total / n), Op::BceLogits { x, targets }, &[x])
    }

    /// Per-(image, class) spatial max normalization of a nonnegative map.
    /// Channels flagged inactive, or with an all-zero map, become zero.
    pub fn cam_normalize(&mut self, x: Var, active: Vec<bool>) -> Var {
        self.cam_normalize_impl(x, active, false)
    }

    /// As [`Graph::cam_normalize`], but the backward pass treats each map's
    /// max as a constant, so the gradient is `g / max` elementwise.
    pub fn cam_normalize_detached(&mut self, x: Var, active: Vec<bool>) -> Var {
        self.cam_normalize_impl(x, active, true)
    }

    fn cam_normalize_impl(&mut self, x: Var, active: Vec<bool>, detach_max: bool) -> Var {
        let (b, c, h, w) = dims4(self.value(x), "cam_normalize");
        assert_eq!(active.len(), b * c, "cam_normalize mask length");
        let p = h * w;
        let xs = self.value(x).as_slice().expect("contiguous");
        let mut out = vec![0.0; xs.len()];
        let mut argmax = vec![0; b * c];
        let mut max = vec![0.0; b * c];
        for i in 0..b * c {
            let plane = &xs[i * p..(i + 1) * p];
            let (k, m) = plane_argmax(plane);
            argmax[i] = k;
            max[i] = m;
            if active[i] && m > 0.0 {
                for (o, v) in out[i * p..(i + 1) * p].iter_mut().zip(plane) {
                    *o = v / m;
                }
            }
        }
        self.push(
            tensor(&[b, c, h, w], out),
            Op::CamNormalize {
                x,
                active,
                argmax,
                max,
                detach_max,
            },
            &[x],
        )
    }

    /// Builds `[B, C+1, h, w]` pixel logits from normalized maps `[B,C,h,w]`:
    /// channel 0 is `scale * (1 - max_c n_c)^power`, channel `c+1` is `scale * n_c`.
    pub fn background_logits(&mut self, x: Var, scale: f64, power: f64) -> Var {
        let (b, c, h, w) = dims4(self.value(x), "background_logits");
        let p = h * w;
        let xs = self.value(x).as_slice().expect("contiguous");
        let mut out = vec![0.0; b * (c + 1) * p];
        let mut argmax = vec![0; b * p];
        for bi in 0..b {
            for pi in 0..p {
                let mut best = 0;
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    let v = xs[(bi * c + ci) * p + pi];
                    if v > m {
                        m = v;
                        best = ci;
                    }
                    out[(bi * (c + 1) + ci + 1) * p + pi] = scale * v;
                }
                let m = if c == 0 { 0.0 } else { m };
                argmax[bi * p + pi] = best;
                out[(bi * (c + 1)) * p + pi] = scale * (1.0 - m).max(0.0).powf(power);
            }
        }
        self.push(
            tensor(&[b, c + 1, h, w], out),
            Op::BackgroundLogits {
                x,
                scale,
                power,
                argmax,
            },
            &[x],
        )
    }

    /// `[B,C,h,w] -> [B,C+1,h,w]` with the constant `first` (`[B,h,w]`) as channel 0.
    pub fn prepend_channel(&mut self, x: Var, first: &Tensor) -> Var {
        let (b, c, h, w) = dims4(self.value(x), "prepend_channel");
        assert_eq!(first.shape(), &[b, h, w], "prepend_channel constant shape");
        let p = h * w;
        let xs = self.value(x).as_slice().expect("contiguous");
        let fs = first.as_standard_layout();
        let fs = fs.as_slice().expect("contiguous");
        let mut out = Vec::with_capacity(b * (c + 1) * p);
        for bi in 0..b {
            out.extend_from_slice(&fs[bi * p..(bi + 1) * p]);
            out.extend_from_slice(&xs[bi * c * p..(bi + 1) * c * p]);
        }
        self.push(tensor(&[b, c + 1, h, w], out), Op::PrependChannel(x), &[x])
    }

    /// Mean cross-entropy over `targets` of a softmax restricted to the
    /// channels marked in `allowed` (`[B*K]`). Zero when `targets` is empty.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        allowed: Vec<bool>,
        targets: Vec<PixelTarget>,
    ) -> Var {
        let (b, k, h, w) = dims4(self.value(logits), "masked_cross_entropy");
        assert_eq!(allowed.len(), b * k, "allowed mask length");
        let p = h * w;
        let ls = self.value(logits).as_slice().expect("contiguous");
        let mut probs = vec![0.0; targets.len() * k];
        let mut total = 0.0;
        let mut row = vec![0.0; k];
        for (t, tg) in targets.iter().enumerate() {
            assert!(tg.batch < b && tg.pixel < p && tg.class < k, "target out of range");
            assert!(allowed[tg.batch * k + tg.class], "target class not allowed");
            for (ki, r) in row.iter_mut().enumerate() {
                *r = ls[(tg.batch * k + ki) * p + tg.pixel];
            }
            let pr = masked_softmax(&row, &allowed[tg.batch * k..(tg.batch + 1) * k]);
            total -= pr[tg.class].ln();
            probs[t * k..(t + 1) * k].copy_from_slice(&pr);
        }
        let loss = if targets.is_empty() {
            0.0
        } else {
            total / targets.len() as f64
        };
        self.push(
            scalar(loss),
            Op::MaskedCrossEntropy {
                logits,
                allowed,
                targets,
                probs,
            },
            &[logits],
        )
    }

    /// `(1/normalizer) * sum_i weight_i * CE(softmax(logits[i, head_i, :]), domain_i)`
    /// for `[N, H, 2]` logits. Zero when `rows` is empty.
    pub fn head_cross_entropy(&mut self, logits: Var, rows: Vec<HeadRow>, normalizer: f64) -> Var {
        let s = self.value(logits).shape().to_vec();
        assert!(s.len() == 3 && s[2] == 2, "head_cross_entropy expects [N,H,2]");
        assert_eq!(s[0], rows.len(), "one row spec per logit row");
        let (loss, probs) = head_cross_entropy_kernel(self.value(logits), &rows, normalizer);
        self.push(
            scalar(loss),
            Op::HeadCrossEntropy {
                logits,
                rows,
                normalizer,
                probs,
            },
            &[logits],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x) * s;
        self.push(value, Op::Scale { x, s }, &[x])
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let (b, cin, h, wd) = dims4(self.value(*x), "conv2d input");
                let (cout, _, k, _) = dims4(self.value(*w), "conv2d weight");
                let (_, _, ho, wo) = dims4(g, "conv2d grad");
                let g = contiguous(g.clone());
                let gm = batch_to_mat(g.as_slice().expect("contiguous"), b, cout, ho * wo);
                if self.needs(*w) {
                    let dw = gm.dot(&cols.t());
                    let dw = dw
                        .into_shape_with_order(IxDyn(&[cout, cin, k, k]))
                        .expect("dw shape");
                    accumulate(grads, *w, dw);
                }
                if self.needs(*x) {
                    let w2 = self
                        .value(*w)
                        .view()
                        .into_shape_with_order((cout, cin * k * k))
                        .expect("weight reshape");
                    let dcols = w2.t().dot(&gm);
                    let dx = col2im(dcols.view(), b, cin, h, wd, k, *stride, *pad);
                    accumulate(grads, *x, tensor(&[b, cin, h, wd], dx));
                }
            }
            Op::ChannelMatmul { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (b, cin, h, wd) = dims4(xv, "channel_matmul");
                let cout = wv.shape()[0];
                let p = h * wd;
                let g = contiguous(g.clone());
                let gs = g.as_slice().expect("contiguous");
                let xs = xv.as_slice().expect("contiguous");
                let w2 = wv.view().into_shape_with_order((cout, cin)).expect("2-d");
                let mut dw = Array2::<f64>::zeros((cout, cin));
                let mut dx = vec![0.0; b * cin * p];
                for bi in 0..b {
                    let gb = ArrayView2::from_shape((cout, p), &gs[bi * cout * p..(bi + 1) * cout * p])
                        .expect("view");
                    let xb = ArrayView2::from_shape((cin, p), &xs[bi * cin * p..(bi + 1) * cin * p])
                        .expect("view");
                    if self.needs(*w) {
                        dw += &gb.dot(&xb.t());
                    }
                    if self.needs(*x) {
                        let d = w2.t().dot(&gb);
                        dx[bi * cin * p..(bi + 1) * cin * p]
                            .copy_from_slice(d.as_standard_layout().as_slice().expect("contiguous"));
                    }
                }
                if self.needs(*w) {
                    accumulate(grads, *w, dw.into_dyn());
                }
                if self.needs(*x) {
                    accumulate(grads, *x, tensor(&[b, cin, h, wd], dx));
                }
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, h, w) = dims4(xhat, "channel_norm");
                let p = h * w;
                let g = contiguous(g.clone());
                let gs = g.as_slice().expect("contiguous");
                let xh = xhat.as_slice().expect("contiguous");
                let gam = self.value(*gamma).as_slice().expect("contiguous");
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; gs.len()];
                for bi in 0..b {
                    let base = bi * c * p;
                    for pi in 0..p {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for ci in 0..c {
                            let idx = base + ci * p + pi;
                            dgamma[ci] += gs[idx] * xh[idx];
                            dbeta[ci] += gs[idx];
                            let dxh = gs[idx] * gam[ci];
                            sum_d += dxh;
                            sum_dx += dxh * xh[idx];
                        }
                        let is = inv_std[bi * p + pi];
                        let cf = c as f64;
                        for ci in 0..c {
                            let idx = base + ci * p + pi;
                            let dxh = gs[idx] * gam[ci];
                            dx[idx] = is / cf * (cf * dxh - sum_d - xh[idx] * sum_dx);
                        }
                    }
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, tensor(&[c], dgamma));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, tensor(&[c], dbeta));
                }
                if self.needs(*x) {
                    accumulate(grads, *x, tensor(&[b, c, h, w], dx));
                }
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*x))
                    .for_each(|d, &v| {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    });
                accumulate(grads, *x, d);
            }
            Op::Grl { x, lambda } => {
                accumulate(grads, *x, g.mapv(|v| -lambda * v));
            }
            Op::MulConst { x, mask } => {
                accumulate(grads, *x, g * mask);
            }
            Op::Gather { x, index } => {
                let shape = self.value(*x).shape().to_vec();
                let (d, p) = (shape[1], shape[2] * shape[3]);
                let g = contiguous(g.clone());
                let gs = g.as_slice().expect("contiguous");
                let mut dx = vec![0.0; self.value(*x).len()];
                for (row, &(bi, pi)) in index.iter().enumerate() {
                    for di in 0..d {
                        dx[(bi * d + di) * p + pi] += gs[row * d + di];
                    }
                }
                accumulate(grads, *x, tensor(&shape, dx));
            }
            Op::Linear { x, w, b } => {
                let g2 = g
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("linear grad is 2-d");
                if self.needs(*w) {
                    let xv = self
                        .value(*x)
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("2-d");
                    accumulate(grads, *w, g2.t().dot(&xv).into_dyn());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g2.sum_axis(ndarray::Axis(0)).into_dyn());
                }
                if self.needs(*x) {
                    let wv = self
                        .value(*w)
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("2-d");
                    accumulate(grads, *x, g2.dot(&wv).into_dyn());
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).raw_dim();
                let d = contiguous(g.clone())
                    .into_shape_with_order(shape)
                    .expect("reshape back");
                accumulate(grads, *x, d);
            }
            Op::ConcatRows(a, b) => {
                let n = self.value(*a).shape()[0];
                if self.needs(*a) {
                    accumulate(grads, *a, g.slice_axis(ndarray::Axis(0), (..n).into()).to_owned());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.slice_axis(ndarray::Axis(0), (n..).into()).to_owned());
                }
            }
            Op::PrependChannel(x) => {
                let (b, c, h, w) = dims4(self.value(*x), "prepend_channel");
                let p = h * w;
                let g = contiguous(g.clone());
                let gs = g.as_slice().expect("contiguous");
                let mut dx = Vec::with_capacity(b * c * p);
                for bi in 0..b {
                    dx.extend_from_slice(&gs[(bi * (c + 1) + 1) * p..(bi + 1) * (c + 1) * p]);
                }
                accumulate(grads, *x, tensor(&[b, c, h, w], dx));
            }
            Op::ChannelBias { x, b } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.needs(*b) {
                    let (_, c, h, w) = dims4(self.value(*x), "channel_bias");
                    let p = h * w;
                    let mut db = vec![0.0; c];
                    for (i, v) in contiguous(g.clone()).iter().enumerate() {
                        db[(i / p) % c] += v;
                    }
                    accumulate(grads, *b, tensor(&[c], db));
                }
            }
            Op::SpatialMean(x) => {
                let (b, c, h, w) = dims4(self.value(*x), "spatial_mean");
                let p = h * w;
                let gs: Vec<f64> = g.iter().copied().collect();
                let mut dx = vec![0.0; b * c * p];
                for i in 0..b * c {
                    let v = gs[i] / p as f64;
                    dx[i * p..(i + 1) * p].iter_mut().for_each(|d| *d = v);
                }
                accumulate(grads, *x, tensor(&[b, c, h, w], dx));
            }
            Op::BceLogits { x, targets } => {
                let go = g.iter().copied().next().unwrap_or(0.0);
                let xv = self.value(*x);
                let n = xv.len().max(1) as f64;
                let mut d = xv.clone();
                ndarray::Zip::from(&mut d)
                    .and(targets)
                    .for_each(|d, &y| *d = go * (sigmoid(*d) - y) / n);
                accumulate(grads, *x, d);
            }
            Op::CamNormalize {
                x,
                active,
                argmax,
                max,
                detach_max,
            } => {
                let (b, c, h, w) = dims4(self.value(*x), "cam_normalize");
                let p = h * w;
                let xs = self.value(*x).as_slice().expect("contiguous");
                let g = contiguous(g.clone());
                let gs = g.as_slice().expect("contiguous");
                let mut dx = vec![0.0; xs.len()];
                for i in 0..b * c {
                    let m = max[i];
                    if !active[i] || m <= 0.0 {
                        continue;
                    }
                    let gp = &gs[i * p..(i + 1) * p];
                    let xp = &xs[i * p..(i + 1) * p];
                    let mut dot = 0.0;
                    for (j, d) in dx[i * p..(i + 1) * p].iter_mut().enumerate() {
                        *d = gp[j] / m;
                        dot += gp[j] * xp[j];
                    }
                    if !*detach_max {
                        dx[i * p + argmax[i]] -= dot / (m * m);
                    }
                }
                accumulate(grads, *x, tensor(&[b, c, h, w], dx));
            }
            Op::BackgroundLogits {
                x,
                scale,
                power,
                argmax,
            } => {
                let (b, c, h, w) = dims4(self.value(*x), "background_logits");
                let p = h * w;
                let xs = self.value(*x).as_slice().expect("contiguous");
                let g = contiguous(g.clone());
                let gs = g.as_slice().expect("contiguous");
                let mut dx = vec![0.0; xs.len()];
                for bi in 0..b {
                    for pi in 0..p {
                        for ci in 0..c {
                            dx[(bi * c + ci) * p + pi] = scale * gs[(bi * (c + 1) + ci + 1) * p + pi];
                        }
                        if c > 0 {
                            let k = argmax[bi * p + pi];
                            let m = xs[(bi * c + k) * p + pi];
                            let base = (1.0 - m).max(0.0);
                            if base > 0.0 || *power < 1.0 {
                                let deriv = -scale * power * base.powf(power - 1.0);
                                if deriv.is_finite() {
                                    dx[(bi * c + k) * p + pi] += gs[(bi * (c + 1)) * p + pi] * deriv;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, tensor(&[b, c, h, w], dx));
            }
            Op::MaskedCrossEntropy {
                logits,
                allowed,
                targets,
                probs,
            } => {
                if targets.is_empty() {
                    return;
                }
                let (b, k, h, w) = dims4(self.value(*logits), "masked_cross_entropy");
                let p = h * w;
                let go = g.iter().copied().next().unwrap_or(0.0) / targets.len() as f64;
                let mut dl = vec![0.0; b * k * p];
                for (t, tg) in targets.iter().enumerate() {
                    for ki in 0..k {
                        if !allowed[tg.batch * k + ki] {
                            continue;
                        }
                        let onehot = if ki == tg.class { 1.0 } else { 0.0 };
                        dl[(tg.batch * k + ki) * p + tg.pixel] += go * (probs[t * k + ki] - onehot);
                    }
                }
                accumulate(grads, *logits, tensor(&[b, k, h, w], dl));
            }
            Op::HeadCrossEntropy {
                logits,
                rows,
                normalizer,
                probs,
            } => {
                if rows.is_empty() {
                    return;
                }
                let s = self.value(*logits).shape().to_vec();
                let heads = s[1];
                let go = g.iter().copied().next().unwrap_or(0.0) / normalizer;
                let mut dl = vec![0.0; s[0] * heads * 2];
                for (i, r) in rows.iter().enumerate() {
                    for j in 0..2 {
                        let onehot = if j == r.domain { 1.0 } else { 0.0 };
                        dl[(i * heads + r.head) * 2 + j] = go * r.weight * (probs[i][j] - onehot);
                    }
                }
                accumulate(grads, *logits, tensor(&s, dl));
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g * self.value(*b));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Sum(x) => {
                let go = g.iter().copied().next().unwrap_or(0.0);
                accumulate(grads, *x, Tensor::from_elem(self.value(*x).raw_dim(), go));
            }
            Op::Scale { x, s } => {
                accumulate(grads, *x, g * *s);
            }
        }
    }
}

/// Lowest index of the maximum (ties resolve to the first occurrence).
pub(crate) fn plane_argmax(plane: &[f64]) -> (usize, f64) {
    let mut k = 0;
    let mut m = f64::NEG_INFINITY;
    for (j, &v) in plane.iter().enumerate() {
        if v > m {
            m = v;
            k = j;
        }
    }
    (k, if plane.is_empty() { 0.0 } else { m })
}

pub(crate) fn masked_softmax(row: &[f64], allowed: &[bool]) -> Vec<f64> {
    let m = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row
        .iter()
        .zip(allowed)
        .map(|(&v, &a)| if a { (v - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

pub(crate) fn channel_matmul_kernel(x: &Tensor, w: &Tensor) -> Tensor {
    let (b, cin, h, wd) = dims4(x, "channel_matmul");
    let cout = w.shape()[0];
    assert_eq!(w.shape(), &[cout, cin], "channel_matmul weight");
    let p = h * wd;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous");
    let w2 = w.view().into_shape_with_order((cout, cin)).expect("2-d");
    let mut out = vec![0.0; b * cout * p];
    for bi in 0..b {
        let xb = ArrayView2::from_shape((cin, p), &xs[bi * cin * p..(bi + 1) * cin * p]).expect("view");
        let o = w2.dot(&xb);
        out[bi * cout * p..(bi + 1) * cout * p]
            .copy_from_slice(o.as_standard_layout().as_slice().expect("contiguous"));
    }
    tensor(&[b, cout, h, wd], out)
}

pub(crate) fn linear_kernel(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let xv = x.view().into_dimensionality::<ndarray::Ix2>().expect("linear input is 2-d");
    let wv = w.view().into_dimensionality::<ndarray::Ix2>().expect("linear weight is 2-d");
    let bv = b.view().into_dimensionality::<ndarray::Ix1>().expect("linear bias is 1-d");
    assert_eq!(xv.ncols(), wv.ncols(), "linear input width");
    let mut y = xv.dot(&wv.t());
    y += &bv;
    y.into_dyn()
}

/// Shared by the graph op and the public domain losses.
pub(crate) fn head_cross_entropy_kernel(
    logits: &Tensor,
    rows: &[HeadRow],
    normalizer: f64,
) -> (f64, Vec<[f64; 2]>) {
    if rows.is_empty() {
        return (0.0, Vec::new());
    }
    let s = logits.shape();
    let heads = s[1];
    let ls = logits.as_standard_layout();
    let ls = ls.as_slice().expect("contiguous");
    let mut probs = Vec::with_capacity(rows.len());
    let mut total = 0.0;
    for (i, r) in rows.iter().enumerate() {
        assert!(r.head < heads && r.domain < 2, "head row out of range");
        let a = ls[(i * heads + r.head) * 2];
        let b = ls[(i * heads + r.head) * 2 + 1];
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        let pr = [(a - lse).exp(), (b - lse).exp()];
        total += r.weight * (lse - if r.domain == 0 { a } else { b });
        probs.push(pr);
    }
    (total / normalizer, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        tensor(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(loss)/d(input) against central differences on every element.
    fn check<F>(inputs: Vec<Tensor>, build: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let eps = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], t);
            for idx in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, u)| {
                            let mut u = u.clone();
                            if j == k {
                                u.as_slice_mut().unwrap()[idx] += delta;
                            }
                            g.param(u)
                        })
                        .collect();
                    let o = build(&mut g, &vs);
                    g.scalar(o)
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = analytic.as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "input {k} element {idx}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let x = rand_tensor(&mut rng, &[2, 2, 5, 6]);
            let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
            let probe = rand_tensor(&mut rng, &[2, 3, conv_out_size(5, 3, stride, 1), conv_out_size(6, 3, stride, 1)]);
            check(
                vec![x, w],
                move |g, v| {
                    let y = g.conv2d(v[0], v[1], stride);
                    let c = g.constant(probe.clone());
                    let m = g.mul(y, c);
                    g.sum(m)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, 2);
        let y = g.value(y).clone();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        for oy in 0..2 {
            for ox in 0..2 {
                let mut acc = 0.0;
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                acc += x[[0, ci, iy as usize, ix as usize]] * w[[0, ci, ky, kx]];
                            }
                        }
                    }
                }
                assert!((acc - y[[0, 0, oy, ox]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let b = rand_tensor(&mut rng, &[3]);
        let probe = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        check(
            vec![x, b],
            move |g, v| {
                let y = g.channel_bias(v[0], v[1]);
                let y = g.relu(y);
                let c = g.constant(probe.clone());
                let m = g.mul(y, c);
                g.sum(m)
            },
            1e-6,
        );
    }

    #[test]
    fn concat_rows_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[1, 3]);
        let probe = rand_tensor(&mut rng, &[3, 3]);
        check(
            vec![a, b],
            move |g, v| {
                let y = g.concat_rows(v[0], v[1]);
                let c = g.constant(probe.clone());
                let m = g.mul(y, c);
                g.sum(m)
            },
            1e-8,
        );
    }

    #[test]
    fn channel_norm_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 4, 3, 3]);
        let gamma = rand_tensor(&mut rng, &[4]);
        let beta = rand_tensor(&mut rng, &[4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let probe = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        check(
            vec![x, gamma, beta, w],
            move |g, v| {
                let n = g.channel_norm(v[0], v[1], v[2]);
                let y = g.channel_matmul(n, v[3]);
                let c = g.constant(probe.clone());
                let m = g.mul(y, c);
                g.sum(m)
            },
            1e-5,
        );
    }

    #[test]
    fn linear_gather_and_head_ce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        let rows = vec![
            HeadRow { head: 0, domain: 0, weight: 1.5 },
            HeadRow { head: 1, domain: 1, weight: 0.5 },
            HeadRow { head: 1, domain: 0, weight: 1.5 },
        ];
        check(
            vec![x, w, b],
            move |g, v| {
                let f = g.gather_pixels(v[0], vec![(0, 1), (1, 3), (0, 1)]);
                let y = g.linear(f, v[1], v[2]);
                let y = g.reshape(y, &[3, 2, 2]);
                g.head_cross_entropy(y, rows.clone(), 3.0)
            },
            1e-6,
        );
    }

    #[test]
    fn cam_pipeline_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // positive maps keep the max well separated from ties
        let x = rand_tensor(&mut rng, &[2, 2, 3, 3]).mapv(|v| v + 1.2);
        let allowed = vec![true, true, false, true, true, false];
        let targets = vec![
            PixelTarget { batch: 0, pixel: 0, class: 1 },
            PixelTarget { batch: 0, pixel: 4, class: 0 },
            PixelTarget { batch: 1, pixel: 8, class: 1 },
        ];
        check(
            vec![x],
            move |g, v| {
                let r = g.relu(v[0]);
                let n = g.cam_normalize(r, vec![true, false, true, true]);
                let l = g.background_logits(n, 4.0, 3.0);
                g.masked_cross_entropy(l, allowed.clone(), targets.clone())
            },
            1e-5,
        );
    }

    #[test]
    fn raw_map_logits_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[2, 2, 2, 2]);
        let bg = rand_tensor(&mut rng, &[2, 2, 2]);
        let allowed = vec![true; 6];
        let targets = vec![
            PixelTarget { batch: 0, pixel: 1, class: 0 },
            PixelTarget { batch: 1, pixel: 2, class: 2 },
            PixelTarget { batch: 1, pixel: 3, class: 1 },
        ];
        check(
            vec![x],
            move |g, v| {
                let l = g.prepend_channel(v[0], &bg);
                g.masked_cross_entropy(l, allowed.clone(), targets.clone())
            },
            1e-6,
        );
    }

    #[test]
    fn prepend_channel_layout() {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.prepend_channel(x, &tensor(&[1, 1, 2], vec![-1.0, -2.0]));
        assert_eq!(g.value(y).shape(), &[1, 3, 1, 2]);
        assert_eq!(g.value(y).as_slice().unwrap(), &[-1.0, -2.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn detached_normalization_divides_the_upstream_gradient() {
        let x = tensor(&[1, 2, 1, 3], vec![1.0, 4.0, 2.0, 0.5, 0.25, 0.0]);
        let probe = tensor(&[1, 2, 1, 3], vec![0.3, -0.7, 1.1, 2.0, -1.0, 0.5]);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let n = g.cam_normalize_detached(v, vec![true, true]);
        assert_eq!(g.value(n).as_slice().unwrap(), &[0.25, 1.0, 0.5, 1.0, 0.5, 0.0]);
        let c = g.constant(probe.clone());
        let m = g.mul(n, c);
        let s = g.sum(m);
        let grads = g.backward(s);
        let got = grads.get(v).unwrap();
        let max = [4.0, 4.0, 4.0, 0.5, 0.5, 0.5];
        for i in 0..6 {
            assert!((got.as_slice().unwrap()[i] - probe.as_slice().unwrap()[i] / max[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_and_spatial_mean_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let y = tensor(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        check(
            vec![x],
            move |g, v| {
                let s = g.spatial_mean(v[0]);
                let s = g.scale(s, 3.0);
                g.bce_with_logits(s, y.clone())
            },
            1e-6,
        );
    }

    #[test]
    fn empty_cross_entropies_are_zero_without_gradient() {
        let mut g = Graph::new();
        let l = g.param(Tensor::zeros(IxDyn(&[1, 2, 2, 2])));
        let ce = g.masked_cross_entropy(l, vec![true, true], Vec::new());
        assert_eq!(g.scalar(ce), 0.0);
        let grads = g.backward(ce);
        assert!(grads.get(l).is_none());
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut g = Graph::new();
        let a = g.constant(scalar(2.0));
        let b = g.param(scalar(3.0));
        let m = g.mul(a, b);
        let grads = g.backward(m);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().sum(), 2.0);
    }
}
