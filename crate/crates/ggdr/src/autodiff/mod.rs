//! Define-by-run reverse-mode automatic differentiation on f64 tensors.
//!
//! Values are computed eagerly as nodes are pushed onto a [`Graph`]. Backward
//! rules emit new graph nodes instead of raw tensors, so `grad` output is
//! itself differentiable: `grad(grad(..))` works, which the R1 gradient
//! penalty relies on (its loss contains the discriminator's input gradient).

pub mod kernels;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

pub use kernels::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    StopGrad,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Sqrt,
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu(f64),
    /// Derivative mask of leaky ReLU; treated as locally constant (its own
    /// derivative is zero almost everywhere).
    LeakyMask(f64),
    SumAll,
    BroadcastScalar(Vec<usize>),
    /// [N,C,H,W] -> [N,1,H,W]
    ChannelSum,
    /// [N,1,H,W] -> [N,C,H,W]
    BroadcastChannel(usize),
    /// x [N,C,H,W] + b [C]
    AddBias,
    /// [N,C,H,W] -> [C], summing over batch and space
    BiasGrad,
    /// [C] -> [N,C,H,W]
    BroadcastBias {
        n: usize,
        h: usize,
        w: usize,
    },
    /// [N,C,H,W] -> [N,1,H,W], log(sum_c exp(x))
    LogSumExpC,
    Reshape(Vec<usize>),
    ConcatChannels,
    SliceChannels {
        start: usize,
        len: usize,
    },
    PadChannels {
        before: usize,
        after: usize,
    },
    ConvFwd {
        stride: usize,
        pad: usize,
    },
    ConvDInput {
        stride: usize,
        pad: usize,
    },
    ConvDWeight {
        stride: usize,
        pad: usize,
    },
    UpsampleNearest2x,
    SumPool2x,
    AffineResample {
        mat: [f64; 6],
        out_h: usize,
        out_w: usize,
        src_h: usize,
        src_w: usize,
        adjoint: bool,
    },
    /// Per-sample affine resampling (one matrix per batch element).
    AffineResamplePerSample {
        mats: std::sync::Arc<Vec<[f64; 6]>>,
        out_h: usize,
        out_w: usize,
        src_h: usize,
        src_w: usize,
        adjoint: bool,
    },
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
}

/// A tape of eagerly evaluated tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn nchw(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected NCHW tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_val(&self, v: Var) -> f64 {
        let t = self.val(v);
        assert_eq!(t.len(), 1, "scalar_val on non-scalar node");
        *t.iter().next().unwrap()
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves ----

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, vec![], t)
    }

    pub fn scalar(&mut self, c: f64) -> Var {
        self.push(Op::Leaf, vec![], ArrayD::from_elem(IxDyn(&[]), c))
    }

    pub fn zeros_like(&mut self, v: Var) -> Var {
        let t = Tensor::zeros(self.val(v).raw_dim());
        self.leaf(t)
    }

    /// Identity in value; blocks gradient flow entirely.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let v = self.val(x).clone();
        self.push(Op::StopGrad, vec![x], v)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.val(a) + self.val(b);
        self.push(Op::Add, vec![a, b], v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.val(a) - self.val(b);
        self.push(Op::Sub, vec![a, b], v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.val(a) * self.val(b);
        self.push(Op::Mul, vec![a, b], v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let v = self.val(a) / self.val(b);
        self.push(Op::Div, vec![a, b], v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| -x);
        self.push(Op::Neg, vec![a], v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).mapv(|x| c * x);
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a).mapv(|x| x + c);
        self.push(Op::AddScalar(c), vec![a], v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(f64::exp);
        self.push(Op::Exp, vec![a], v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(f64::sqrt);
        self.push(Op::Sqrt, vec![a], v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(f64::tanh);
        self.push(Op::Tanh, vec![a], v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(sigmoid_scalar);
        self.push(Op::Sigmoid, vec![a], v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(softplus_scalar);
        self.push(Op::Softplus, vec![a], v)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.val(a).mapv(|x| if x >= 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(slope), vec![a], v)
    }

    fn leaky_mask(&mut self, a: Var, slope: f64) -> Var {
        let v = self.val(a).mapv(|x| if x >= 0.0 { 1.0 } else { slope });
        self.push(Op::LeakyMask(slope), vec![a], v)
    }

    // ---- reductions & broadcasts ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.val(a).sum());
        self.push(Op::SumAll, vec![a], v)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).len();
        assert!(n > 0, "mean of empty tensor");
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Var {
        let c = self.scalar_val(a);
        let v = ArrayD::from_elem(IxDyn(shape), c);
        self.push(Op::BroadcastScalar(shape.to_vec()), vec![a], v)
    }

    pub fn channel_sum(&mut self, a: Var) -> Var {
        let (n, _c, h, w) = nchw(self.shape(a));
        let v = self
            .val(a)
            .sum_axis(Axis(1))
            .into_shape_with_order(IxDyn(&[n, 1, h, w]))
            .unwrap();
        self.push(Op::ChannelSum, vec![a], v)
    }

    pub fn broadcast_channel(&mut self, a: Var, channels: usize) -> Var {
        let (n, c, h, w) = nchw(self.shape(a));
        assert_eq!(c, 1, "broadcast_channel expects single-channel input");
        let src = self.val(a);
        let mut v = Tensor::zeros(IxDyn(&[n, channels, h, w]));
        for i in 0..n {
            let plane = src.index_axis(Axis(0), i);
            for ch in 0..channels {
                v.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), ch)
                    .assign(&plane.index_axis(Axis(0), 0));
            }
        }
        self.push(Op::BroadcastChannel(channels), vec![a], v)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (_, c, _, _) = nchw(self.shape(x));
        assert_eq!(self.shape(b), &[c], "bias shape mismatch");
        let mut v = self.val(x).clone();
        let bv = self.val(b).clone();
        for (ch, mut lane) in v.axis_iter_mut(Axis(1)).enumerate() {
            lane += bv[[ch]];
        }
        self.push(Op::AddBias, vec![x, b], v)
    }

    fn bias_grad(&mut self, g: Var) -> Var {
        let (_, c, _, _) = nchw(self.shape(g));
        let mut v = Tensor::zeros(IxDyn(&[c]));
        for (ch, lane) in self.val(g).axis_iter(Axis(1)).enumerate() {
            v[[ch]] = lane.sum();
        }
        self.push(Op::BiasGrad, vec![g], v)
    }

    fn broadcast_bias(&mut self, b: Var, n: usize, h: usize, w: usize) -> Var {
        let c = self.shape(b)[0];
        let bv = self.val(b).clone();
        let mut v = Tensor::zeros(IxDyn(&[n, c, h, w]));
        for (ch, mut lane) in v.axis_iter_mut(Axis(1)).enumerate() {
            lane.fill(bv[[ch]]);
        }
        self.push(Op::BroadcastBias { n, h, w }, vec![b], v)
    }

    pub fn logsumexp_c(&mut self, a: Var) -> Var {
        let (n, c, h, w) = nchw(self.shape(a));
        let src = self.val(a);
        let mut v = Tensor::zeros(IxDyn(&[n, 1, h, w]));
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut m = f64::NEG_INFINITY;
                    for ch in 0..c {
                        m = m.max(src[[i, ch, y, x]]);
                    }
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += (src[[i, ch, y, x]] - m).exp();
                    }
                    v[[i, 0, y, x]] = m + s.ln();
                }
            }
        }
        self.push(Op::LogSumExpC, vec![a], v)
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .val(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        self.push(Op::Reshape(shape.to_vec()), vec![a], v)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[0], sb[0]);
        assert_eq!(&sa[2..], &sb[2..], "concat spatial mismatch");
        let v = ndarray::concatenate(Axis(1), &[self.val(a).view(), self.val(b).view()])
            .unwrap()
            .as_standard_layout()
            .to_owned();
        self.push(Op::ConcatChannels, vec![a, b], v)
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self
            .val(a)
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        self.push(Op::SliceChannels { start, len }, vec![a], v)
    }

    fn pad_channels(&mut self, a: Var, before: usize, after: usize) -> Var {
        let (n, c, h, w) = nchw(self.shape(a));
        let mut v = Tensor::zeros(IxDyn(&[n, before + c + after, h, w]));
        v.slice_axis_mut(Axis(1), Slice::from(before..before + c))
            .assign(self.val(a));
        self.push(Op::PadChannels { before, after }, vec![a], v)
    }

    // ---- conv family ----

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let v = kernels::conv2d_fwd(self.val(x), self.val(w), stride, pad);
        self.push(Op::ConvFwd { stride, pad }, vec![x, w], v)
    }

    pub fn conv2d_dinput(
        &mut self,
        gy: Var,
        w: Var,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
    ) -> Var {
        let v = kernels::conv2d_dinput(self.val(gy), self.val(w), stride, pad, in_h, in_w);
        self.push(Op::ConvDInput { stride, pad }, vec![gy, w], v)
    }

    pub fn conv2d_dweight(
        &mut self,
        x: Var,
        gy: Var,
        stride: usize,
        pad: usize,
        kernel: usize,
    ) -> Var {
        let v = kernels::conv2d_dweight(self.val(x), self.val(gy), stride, pad, kernel);
        self.push(Op::ConvDWeight { stride, pad }, vec![x, gy], v)
    }

    // ---- resampling ----

    pub fn upsample_nearest2x(&mut self, a: Var) -> Var {
        let v = kernels::upsample_nearest2x(self.val(a));
        self.push(Op::UpsampleNearest2x, vec![a], v)
    }

    pub fn sum_pool2x(&mut self, a: Var) -> Var {
        let v = kernels::sum_pool2x(self.val(a));
        self.push(Op::SumPool2x, vec![a], v)
    }

    pub fn avg_pool2x(&mut self, a: Var) -> Var {
        let s = self.sum_pool2x(a);
        self.scale(s, 0.25)
    }

    /// Resample `a` through an affine map of normalized coordinates; see
    /// [`kernels::affine_taps`] for the convention.
    pub fn affine_resample(&mut self, a: Var, mat: [f64; 6], out_h: usize, out_w: usize) -> Var {
        let (_, _, src_h, src_w) = nchw(self.shape(a));
        let taps = kernels::affine_taps(&mat, out_h, out_w, src_h, src_w);
        let v = kernels::affine_resample_fwd(self.val(a), &taps, out_h, out_w);
        self.push(
            Op::AffineResample {
                mat,
                out_h,
                out_w,
                src_h,
                src_w,
                adjoint: false,
            },
            vec![a],
            v,
        )
    }

    /// Per-sample affine resampling: `mats[i]` applies to batch element `i`.
    pub fn affine_resample_per_sample(
        &mut self,
        a: Var,
        mats: std::sync::Arc<Vec<[f64; 6]>>,
        out_h: usize,
        out_w: usize,
    ) -> Var {
        let (n, _, src_h, src_w) = nchw(self.shape(a));
        assert_eq!(mats.len(), n, "one matrix per sample");
        let v = kernels::affine_resample_per_sample_fwd(self.val(a), &mats, out_h, out_w);
        self.push(
            Op::AffineResamplePerSample {
                mats,
                out_h,
                out_w,
                src_h,
                src_w,
                adjoint: false,
            },
            vec![a],
            v,
        )
    }

    /// Bilinear 2x upsampling (identity affine map onto a doubled grid).
    pub fn upsample_bilinear2x(&mut self, a: Var) -> Var {
        let (_, _, h, w) = nchw(self.shape(a));
        self.affine_resample(a, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 2 * h, 2 * w)
    }

    // ---- autodiff ----

    /// Vector-Jacobian product of one node: returns per-input gradient nodes.
    /// `want[i]` is false when input `i` needs no gradient; expensive rules
    /// (the conv family) skip that work.
    fn vjp(&mut self, op: &Op, inputs: &[Var], out: Var, g: Var, want: &[bool]) -> Vec<Option<Var>> {
        match op {
            Op::Leaf => vec![],
            Op::StopGrad => vec![None],
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => vec![Some(g), Some(self.neg(g))],
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                vec![Some(self.mul(g, b)), Some(self.mul(g, a))]
            }
            Op::Div => {
                let b = inputs[1];
                let ga = self.div(g, b);
                let g_out = self.mul(g, out);
                let gb_pos = self.div(g_out, b);
                vec![Some(ga), Some(self.neg(gb_pos))]
            }
            Op::Neg => vec![Some(self.neg(g))],
            Op::Scale(c) => vec![Some(self.scale(g, *c))],
            Op::AddScalar(_) => vec![Some(g)],
            Op::Exp => vec![Some(self.mul(g, out))],
            Op::Sqrt => {
                let r = self.div(g, out);
                vec![Some(self.scale(r, 0.5))]
            }
            Op::Tanh => {
                let t2 = self.mul(out, out);
                let n = self.neg(t2);
                let one_minus = self.add_scalar(n, 1.0);
                vec![Some(self.mul(g, one_minus))]
            }
            Op::Sigmoid => {
                let n = self.neg(out);
                let one_minus = self.add_scalar(n, 1.0);
                let d = self.mul(out, one_minus);
                vec![Some(self.mul(g, d))]
            }
            Op::Softplus => {
                let s = self.sigmoid(inputs[0]);
                vec![Some(self.mul(g, s))]
            }
            Op::LeakyRelu(slope) => {
                let m = self.leaky_mask(inputs[0], *slope);
                vec![Some(self.mul(g, m))]
            }
            Op::LeakyMask(_) => vec![None],
            Op::SumAll => {
                let shape = self.shape(inputs[0]).to_vec();
                vec![Some(self.broadcast_scalar(g, &shape))]
            }
            Op::BroadcastScalar(_) => vec![Some(self.sum_all(g))],
            Op::ChannelSum => {
                let (_, c, _, _) = nchw(self.shape(inputs[0]));
                vec![Some(self.broadcast_channel(g, c))]
            }
            Op::BroadcastChannel(_) => vec![Some(self.channel_sum(g))],
            Op::AddBias => vec![Some(g), Some(self.bias_grad(g))],
            Op::BiasGrad => {
                let (n, _, h, w) = nchw(self.shape(inputs[0]));
                vec![Some(self.broadcast_bias(g, n, h, w))]
            }
            Op::BroadcastBias { .. } => vec![Some(self.bias_grad(g))],
            Op::LogSumExpC => {
                let (_, c, _, _) = nchw(self.shape(inputs[0]));
                let lse_b = self.broadcast_channel(out, c);
                let shifted = self.sub(inputs[0], lse_b);
                let sm = self.exp(shifted);
                let gb = self.broadcast_channel(g, c);
                vec![Some(self.mul(gb, sm))]
            }
            Op::Reshape(_) => {
                let shape = self.shape(inputs[0]).to_vec();
                vec![Some(self.reshape(g, &shape))]
            }
            Op::ConcatChannels => {
                let ca = self.shape(inputs[0])[1];
                let cb = self.shape(inputs[1])[1];
                let ga = self.slice_channels(g, 0, ca);
                let gb = self.slice_channels(g, ca, cb);
                vec![Some(ga), Some(gb)]
            }
            Op::SliceChannels { start, len } => {
                let c = self.shape(inputs[0])[1];
                vec![Some(self.pad_channels(g, *start, c - start - len))]
            }
            Op::PadChannels { before, .. } => {
                let c = self.shape(inputs[0])[1];
                vec![Some(self.slice_channels(g, *before, c))]
            }
            Op::ConvFwd { stride, pad } => {
                let (x, w) = (inputs[0], inputs[1]);
                let gx = want[0].then(|| {
                    let (_, _, h, wd) = nchw(self.shape(x));
                    self.conv2d_dinput(g, w, *stride, *pad, h, wd)
                });
                let gw = want[1].then(|| {
                    let k = self.shape(w)[2];
                    self.conv2d_dweight(x, g, *stride, *pad, k)
                });
                vec![gx, gw]
            }
            Op::ConvDInput { stride, pad } => {
                // out = adjoint_x(gy; w). d/dgy -> conv_fwd(g, w); d/dw -> conv_dweight(g, gy).
                let (gy, w) = (inputs[0], inputs[1]);
                let ggy = want[0].then(|| self.conv2d(g, w, *stride, *pad));
                let gw = want[1].then(|| {
                    let k = self.shape(w)[2];
                    self.conv2d_dweight(g, gy, *stride, *pad, k)
                });
                vec![ggy, gw]
            }
            Op::ConvDWeight { stride, pad } => {
                // out = gw(x, gy). d/dx -> conv_dinput(gy, g); d/dgy -> conv_fwd(x, g).
                let (x, gy) = (inputs[0], inputs[1]);
                let gx = want[0].then(|| {
                    let (_, _, h, wd) = nchw(self.shape(x));
                    self.conv2d_dinput(gy, g, *stride, *pad, h, wd)
                });
                let ggy = want[1].then(|| self.conv2d(x, g, *stride, *pad));
                vec![gx, ggy]
            }
            Op::UpsampleNearest2x => vec![Some(self.sum_pool2x(g))],
            Op::SumPool2x => vec![Some(self.upsample_nearest2x(g))],
            Op::AffineResample {
                mat,
                out_h,
                out_w,
                src_h,
                src_w,
                adjoint,
            } => {
                let node = if *adjoint {
                    // forward was the scatter; its adjoint is the gather
                    let taps = kernels::affine_taps(mat, *out_h, *out_w, *src_h, *src_w);
                    let v = kernels::affine_resample_fwd(self.val(g), &taps, *out_h, *out_w);
                    self.push(
                        Op::AffineResample {
                            mat: *mat,
                            out_h: *out_h,
                            out_w: *out_w,
                            src_h: *src_h,
                            src_w: *src_w,
                            adjoint: false,
                        },
                        vec![g],
                        v,
                    )
                } else {
                    let taps = kernels::affine_taps(mat, *out_h, *out_w, *src_h, *src_w);
                    let v = kernels::affine_resample_adj(self.val(g), &taps, *src_h, *src_w);
                    self.push(
                        Op::AffineResample {
                            mat: *mat,
                            out_h: *out_h,
                            out_w: *out_w,
                            src_h: *src_h,
                            src_w: *src_w,
                            adjoint: true,
                        },
                        vec![g],
                        v,
                    )
                };
                vec![Some(node)]
            }
            Op::AffineResamplePerSample {
                mats,
                out_h,
                out_w,
                src_h,
                src_w,
                adjoint,
            } => {
                let (mats, out_h, out_w, src_h, src_w, adjoint) =
                    (mats.clone(), *out_h, *out_w, *src_h, *src_w, *adjoint);
                let v = if adjoint {
                    kernels::affine_resample_per_sample_fwd(self.val(g), &mats, out_h, out_w)
                } else {
                    kernels::affine_resample_per_sample_adj(self.val(g), &mats, out_h, out_w, src_h, src_w)
                };
                let node = self.push(
                    Op::AffineResamplePerSample {
                        mats,
                        out_h,
                        out_w,
                        src_h,
                        src_w,
                        adjoint: !adjoint,
                    },
                    vec![g],
                    v,
                );
                vec![Some(node)]
            }
        }
    }

    /// Reverse-mode gradient of scalar `y` with respect to each var in `wrt`.
    ///
    /// Vars not reachable from `y` get a zero gradient. The returned vars live
    /// in this graph and can be differentiated again. Backward work is pruned
    /// to the subgraph between `wrt` and `y`: nodes that do not depend on any
    /// `wrt` var never receive a gradient, so e.g. differentiating a GAN loss
    /// w.r.t. one network's parameters skips the other network's weight
    /// gradients entirely.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(
            self.val(y).len(),
            1,
            "grad target must be scalar, got shape {:?}",
            self.shape(y)
        );
        let horizon = self.nodes.len();
        let mut needed = vec![false; horizon];
        for v in wrt {
            needed[v.0] = true;
        }
        for id in 0..=y.0 {
            if !needed[id] && self.nodes[id].inputs.iter().any(|i| needed[i.0]) {
                needed[id] = true;
            }
        }
        let mut gmap: Vec<Option<Var>> = vec![None; horizon];
        let seed = self.scalar(1.0);
        gmap[y.0] = Some(if self.shape(y).is_empty() {
            seed
        } else {
            let shape = self.shape(y).to_vec();
            self.broadcast_scalar(seed, &shape)
        });
        for id in (0..=y.0).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = gmap[id] else { continue };
            if self.nodes[id].inputs.is_empty() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let inputs = self.nodes[id].inputs.clone();
            let want: Vec<bool> = inputs.iter().map(|i| needed[i.0]).collect();
            let vjps = self.vjp(&op, &inputs, Var(id), g, &want);
            debug_assert_eq!(vjps.len(), inputs.len());
            for ((inp, gi), w) in inputs.iter().zip(vjps).zip(&want) {
                if let (Some(gi), true) = (gi, *w) {
                    debug_assert_eq!(
                        self.shape(*inp),
                        self.shape(gi),
                        "vjp shape mismatch for {op:?}"
                    );
                    gmap[inp.0] = Some(match gmap[inp.0] {
                        None => gi,
                        Some(prev) => self.add(prev, gi),
                    });
                }
            }
        }
        wrt.iter()
            .map(|x| gmap[x.0].unwrap_or_else(|| self.zeros_like(*x)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central finite differences of `f` w.r.t. the leaf tensor `x0`, checked
    /// against an analytic gradient produced by the same closure via `grad`.
    fn gradcheck<F>(x0: &Tensor, f: F, tol: f64)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = f(&mut g, x);
        let gx = g.grad(y, &[x])[0];
        let analytic = g.val(gx).clone();

        let eps = 1e-6;
        let mut max_rel = 0.0_f64;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            let mut gp = Graph::new();
            let vp = gp.leaf(xp);
            let rp = f(&mut gp, vp);
            let yp = gp.scalar_val(rp);

            let mut xm = x0.clone();
            xm.as_slice_mut().unwrap()[i] -= eps;
            let mut gm = Graph::new();
            let vm = gm.leaf(xm);
            let rm = f(&mut gm, vm);
            let ym = gm.scalar_val(rm);

            let fd = (yp - ym) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[i];
            let denom = fd.abs().max(an.abs()).max(1e-4);
            max_rel = max_rel.max((fd - an).abs() / denom);
        }
        assert!(max_rel < tol, "gradcheck failed: max rel err {max_rel}");
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(&mut rng, &[2, 3]);
        gradcheck(
            &x0,
            |g, x| {
                let t = g.tanh(x);
                let s = g.sigmoid(t);
                let e = g.exp(s);
                let sp = g.softplus(e);
                g.mean_all(sp)
            },
            1e-6,
        );
        let pos = x0.mapv(|v| v.abs() + 0.5);
        gradcheck(
            &pos,
            |g, x| {
                let r = g.sqrt(x);
                let d = g.div(x, r);
                g.sum_all(d)
            },
            1e-6,
        );
    }

    #[test]
    fn leaky_relu_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_tensor(&mut rng, &[4, 4]);
        gradcheck(
            &x0,
            |g, x| {
                let y = g.leaky_relu(x, 0.2);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_tensor(&mut rng, &[2, 3, 5, 5]);
        let w0 = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        // d/dx with random weights folded in via mul to exercise both vjps
        for (stride, pad) in [(1usize, 1usize), (2, 1)] {
            let w0c = w0.clone();
            gradcheck(
                &x0,
                move |g, x| {
                    let w = g.leaf(w0c.clone());
                    let y = g.conv2d(x, w, stride, pad);
                    let sq = g.mul(y, y);
                    g.sum_all(sq)
                },
                1e-5,
            );
            let x0c = x0.clone();
            gradcheck(
                &w0,
                move |g, w| {
                    let x = g.leaf(x0c.clone());
                    let y = g.conv2d(x, w, stride, pad);
                    let sq = g.mul(y, y);
                    g.sum_all(sq)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn conv_trilinear_identity() {
        // <gy, conv(x,w)> == <w, dweight(x,gy)> == <x, dinput(gy,w)>
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for (stride, pad, k) in [(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
            let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
            let w = rand_tensor(&mut rng, &[4, 3, k, k]);
            let oh = kernels::conv_out_size(6, k, stride, pad);
            let gy = rand_tensor(&mut rng, &[2, 4, oh, oh]);
            let y = kernels::conv2d_fwd(&x, &w, stride, pad);
            let gw = kernels::conv2d_dweight(&x, &gy, stride, pad, k);
            let gx = kernels::conv2d_dinput(&gy, &w, stride, pad, 6, 6);
            let a: f64 = (&y * &gy).sum();
            let b: f64 = (&w * &gw).sum();
            let c: f64 = (&x * &gx).sum();
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
            assert!((a - c).abs() < 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn pooling_and_resample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x0 = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        gradcheck(
            &x0,
            |g, x| {
                let u = g.upsample_nearest2x(x);
                let sq = g.mul(u, u);
                g.sum_all(sq)
            },
            1e-6,
        );
        gradcheck(
            &x0,
            |g, x| {
                let p = g.avg_pool2x(x);
                let sq = g.mul(p, p);
                g.sum_all(sq)
            },
            1e-6,
        );
        // a mildly shearing affine map
        let mat = [0.9, 0.1, 0.05, -0.08, 1.1, -0.02];
        gradcheck(
            &x0,
            move |g, x| {
                let r = g.affine_resample(x, mat, 4, 4);
                let sq = g.mul(r, r);
                g.sum_all(sq)
            },
            1e-6,
        );
        gradcheck(
            &x0,
            |g, x| {
                let r = g.upsample_bilinear2x(x);
                let sq = g.mul(r, r);
                g.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x0 = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        gradcheck(
            &x0,
            |g, x| {
                let b = g.leaf(Tensor::from_shape_fn(IxDyn(&[2, 2, 2, 2]), |_| 0.5));
                let cat = g.concat_channels(x, b);
                let sl = g.slice_channels(cat, 1, 3);
                let cs = g.channel_sum(sl);
                let bc = g.broadcast_channel(cs, 4);
                let sq = g.mul(bc, bc);
                g.sum_all(sq)
            },
            1e-6,
        );
        gradcheck(
            &x0,
            |g, x| {
                let r = g.reshape(x, &[2, 12]);
                let sq = g.mul(r, r);
                g.mean_all(sq)
            },
            1e-6,
        );
        gradcheck(
            &x0,
            |g, x| {
                let lse = g.logsumexp_c(x);
                g.sum_all(lse)
            },
            1e-6,
        );
        let b0 = rand_tensor(&mut rng, &[3]);
        gradcheck(
            &b0,
            move |g, b| {
                let x = g.leaf(Tensor::from_elem(IxDyn(&[2, 3, 2, 2]), 0.3));
                let y = g.add_bias(x, b);
                let sq = g.mul(y, y);
                g.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_elem(IxDyn(&[3]), 2.0));
        let s = g.stop_grad(x);
        let y0 = g.mul(x, s);
        let y = g.sum_all(y0);
        let gx = g.grad(y, &[x])[0];
        // d/dx (x * const) = const = 2, not 2x = 4
        assert_eq!(g.val(gx), &Tensor::from_elem(IxDyn(&[3]), 2.0));
    }

    #[test]
    fn unreachable_var_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_elem(IxDyn(&[2]), 1.0));
        let z = g.leaf(Tensor::from_elem(IxDyn(&[2]), 5.0));
        let y = g.sum_all(x);
        let gz = g.grad(y, &[z])[0];
        assert_eq!(g.val(gz), &Tensor::zeros(IxDyn(&[2])));
    }

    #[test]
    fn second_order_gradient_matches_finite_differences() {
        // phi(x) = sum_i (d/dx_i sum(tanh(conv(x,w)))^2), the same structure R1 uses.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w0 = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let x0 = rand_tensor(&mut rng, &[1, 2, 4, 4]);

        let phi = |g: &mut Graph, w: Var, x_t: &Tensor| -> Var {
            let x = g.leaf(x_t.clone());
            let c = g.conv2d(x, w, 1, 1);
            let t = g.tanh(c);
            let s = g.sum_all(t);
            let gx = g.grad(s, &[x])[0];
            let sq = g.mul(gx, gx);
            g.sum_all(sq)
        };

        let mut g = Graph::new();
        let w = g.leaf(w0.clone());
        let p = phi(&mut g, w, &x0);
        let gw = g.grad(p, &[w])[0];
        let analytic = g.val(gw).clone();

        let eps = 1e-6;
        for i in 0..w0.len() {
            let mut wp = w0.clone();
            wp.as_slice_mut().unwrap()[i] += eps;
            let mut gp = Graph::new();
            let wv = gp.leaf(wp);
            let pp = phi(&mut gp, wv, &x0);
            let yp = gp.scalar_val(pp);

            let mut wm = w0.clone();
            wm.as_slice_mut().unwrap()[i] -= eps;
            let mut gm = Graph::new();
            let wv = gm.leaf(wm);
            let pm = phi(&mut gm, wv, &x0);
            let ym = gm.scalar_val(pm);

            let fd = (yp - ym) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[i];
            let denom = fd.abs().max(an.abs()).max(1e-4);
            assert!(
                (fd - an).abs() / denom < 1e-5,
                "second-order gradcheck failed at {i}: fd={fd} analytic={an}"
            );
        }
    }
}
