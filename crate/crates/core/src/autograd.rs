//! A small reverse-mode automatic differentiation tape over `f64` arrays.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and accumulates gradients only through nodes
//! that (transitively) depend on a trainable leaf. All arithmetic is
//! single-threaded and evaluated in a fixed order, so results are
//! bit-reproducible.

use ndarray::{concatenate, linalg::general_mat_mul, s, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, Ix3, IxDyn, Slice};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    Silu,
    Gelu,
    Softplus,
    Sigmoid,
    Abs,
    Exp,
    Square,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    BatchNorm(Var, Vec<f64>),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Upsample2x(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on a tensor of shape {:?}", t.shape());
        *t.iter().next().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let v = self.value(a).mapv(|x| unary_fwd(f, x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Unary(a, f), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// `(M, K) x (K, N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `(B, M, K) x (B, K, N)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let v = bmm_raw(self.value(a), false, self.value(b), false);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::BatchMatMul(a, b), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = self.value(a);
        assert_eq!(
            src.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            src.shape(),
            shape
        );
        let v = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::Permute(a, axes.to_vec()), rg)
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Var {
        let nd = self.shape(a).len();
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shapes");
        let rg = self.rg(parts);
        self.push(v, Op::Concat(parts.to_vec(), axis), rg)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::Slice(a, axis, start), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAxis(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let last = v.ndim() - 1;
        for mut row in v.lanes_mut(Axis(last)) {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Normalize along the last axis (no affine transform).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let last = v.ndim() - 1;
        let mut inv = Vec::with_capacity(v.len() / v.shape()[last].max(1));
        for mut row in v.lanes_mut(Axis(last)) {
            let n = row.len() as f64;
            let mu = row.sum() / n;
            let var = row.fold(0.0, |acc, &x| acc + (x - mu) * (x - mu)) / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mu) * is);
            inv.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LayerNorm(a, inv), rg)
    }

    /// Batch-statistics normalization of an `(N, C, H, W)` tensor, per channel.
    pub fn batch_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let hw: usize = x.shape()[2..].iter().product();
        let m = (n * hw) as f64;
        let mut v = x.as_standard_layout().into_owned();
        let mut inv = vec![0.0; c];
        {
            let data = v.as_slice_mut().unwrap();
            for ch in 0..c {
                let mut sum = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    sum += data[off..off + hw].iter().sum::<f64>();
                }
                let mu = sum / m;
                let mut ss = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    ss += data[off..off + hw].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
                }
                let is = 1.0 / (ss / m + eps).sqrt();
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    for x in &mut data[off..off + hw] {
                        *x = (*x - mu) * is;
                    }
                }
                inv[ch] = is;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::BatchNorm(a, inv), rg)
    }

    /// 2-D convolution, `x: (N, C, H, W)`, `w: (Co, C, kh, kw)`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (co, ci, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(c, ci, "conv2d channel mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let xs = xv.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let w2 = as2_reshaped(wv, co, c * kh * kw);
        let (chw, plane) = (c * h * wd, ho * wo);
        let mut v = Tensor::zeros(IxDyn(&[n, co, ho, wo]));
        {
            let dst = v.as_slice_mut().unwrap();
            for b in 0..n {
                let cols = im2col(&xs[b * chw..(b + 1) * chw], &geom);
                let mut ob = ArrayViewMut2::from_shape((co, plane), &mut dst[b * co * plane..(b + 1) * co * plane]).unwrap();
                general_mat_mul(1.0, &w2, &cols, 0.0, &mut ob);
            }
        }
        let rg = self.rg(&[x, w]);
        self.push(v, Op::Conv2d { x, w, geom }, rg)
    }

    /// Nearest-neighbour 2x upsampling of an `(N, C, H, W)` tensor.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let xs = x.as_standard_layout();
        let mut out = Vec::with_capacity(4 * xs.len());
        for row in xs.as_slice().unwrap().chunks(w) {
            let start = out.len();
            out.extend(row.iter().flat_map(|v| [*v, *v]));
            out.extend_from_within(start..);
        }
        let v = Tensor::from_shape_vec(IxDyn(&[n, c, 2 * h, 2 * w]), out).unwrap();
        let rg = self.rg(&[a]);
        self.push(v, Op::Upsample2x(a), rg)
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).raw_dim()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || sum_to_shape(g.clone(), self.shape(*a)));
                self.acc(grads, *b, || sum_to_shape(g.clone(), self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || sum_to_shape(g.clone(), self.shape(*a)));
                self.acc(grads, *b, || sum_to_shape(-g, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || sum_to_shape(zip_bcast(g, bv, |x, y| x * y), av.shape()));
                self.acc(grads, *b, || sum_to_shape(zip_bcast(g, av, |x, y| x * y), bv.shape()));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || sum_to_shape(zip_bcast(g, bv, |x, y| x / y), av.shape()));
                self.acc(grads, *b, || {
                    let t = zip_bcast(&zip_bcast(g, av, |x, y| x * y), bv, |x, y| -x / (y * y));
                    sum_to_shape(t, bv.shape())
                });
            }
            Op::Scale(a, k) => self.acc(grads, *a, || g * *k),
            Op::Unary(a, f) => {
                let xv = self.value(*a);
                let yv = &node.value;
                self.acc(grads, *a, || {
                    let mut out = g.clone();
                    ndarray::Zip::from(&mut out)
                        .and(xv)
                        .and(yv)
                        .for_each(|o, &x, &y| *o *= unary_grad(*f, x, y));
                    out
                });
            }
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                self.acc(grads, *a, || g2.dot(&as2(self.value(*b)).t()).into_dyn());
                self.acc(grads, *b, || as2(self.value(*a)).t().dot(&g2).into_dyn());
            }
            Op::BatchMatMul(a, b) => {
                self.acc(grads, *a, || bmm_raw(g, false, self.value(*b), true));
                self.acc(grads, *b, || bmm_raw(self.value(*a), true, g, false));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, || {
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&shape))
                        .unwrap()
                });
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inv[ax] = k;
                }
                self.acc(grads, *a, || {
                    g.view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .into_owned()
                });
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    self.acc(grads, *p, || {
                        g.slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .to_owned()
                    });
                    start += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let len = node.value.shape()[*axis];
                self.acc(grads, *a, || {
                    let mut z = Tensor::zeros(self.value(*a).raw_dim());
                    z.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                        .assign(g);
                    z
                });
            }
            Op::SumAll(a) => {
                let gs = *g.iter().next().unwrap();
                self.acc(grads, *a, || Tensor::from_elem(self.value(*a).raw_dim(), gs));
            }
            Op::SumAxis(a, axis) => {
                let shape = self.value(*a).raw_dim();
                let _ = axis;
                self.acc(grads, *a, || g.broadcast(shape.clone()).unwrap().to_owned());
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let last = y.ndim() - 1;
                self.acc(grads, *a, || {
                    let mut out = g * y;
                    let dots = out.sum_axis(Axis(last)).insert_axis(Axis(last));
                    out -= &(y * &dots);
                    out
                });
            }
            Op::LayerNorm(a, inv) => {
                let y = &node.value;
                let last = y.ndim() - 1;
                self.acc(grads, *a, || {
                    let mut out = Tensor::zeros(y.raw_dim());
                    for (k, ((mut o, yr), gr)) in out
                        .lanes_mut(Axis(last))
                        .into_iter()
                        .zip(y.lanes(Axis(last)))
                        .zip(g.lanes(Axis(last)))
                        .enumerate()
                    {
                        let n = yr.len() as f64;
                        let mg = gr.sum() / n;
                        let mgy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, &gy), &yy) in o.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                            *o = inv[k] * (gy - mg - yy * mgy);
                        }
                    }
                    out
                });
            }
            Op::BatchNorm(a, inv) => {
                let y = node.value.as_standard_layout();
                let gs = g.as_standard_layout();
                let (n, c) = (y.shape()[0], y.shape()[1]);
                let hw: usize = y.shape()[2..].iter().product();
                let m = (n * hw) as f64;
                self.acc(grads, *a, || {
                    let mut out = Tensor::zeros(y.raw_dim());
                    let (yd, gd) = (y.as_slice().unwrap(), gs.as_slice().unwrap());
                    let od = out.as_slice_mut().unwrap();
                    for ch in 0..c {
                        let (mut sg, mut sgy) = (0.0, 0.0);
                        for b in 0..n {
                            let off = (b * c + ch) * hw;
                            for k in off..off + hw {
                                sg += gd[k];
                                sgy += gd[k] * yd[k];
                            }
                        }
                        let (mg, mgy) = (sg / m, sgy / m);
                        for b in 0..n {
                            let off = (b * c + ch) * hw;
                            for k in off..off + hw {
                                od[k] = inv[ch] * (gd[k] - mg - yd[k] * mgy);
                            }
                        }
                    }
                    out
                });
            }
            Op::Conv2d { x, w, geom } => {
                let ConvGeom {
                    n,
                    c,
                    h,
                    w: wd,
                    kh,
                    kw,
                    ho,
                    wo,
                    ..
                } = *geom;
                let co = self.shape(*w)[0];
                let (chw, plane, k) = (c * h * wd, ho * wo, c * kh * kw);
                let gs = g.as_standard_layout();
                let gsl = gs.as_slice().unwrap();
                let xs = self.value(*x).as_standard_layout();
                let xs = xs.as_slice().unwrap();
                let w2 = as2_reshaped(self.value(*w), co, k);
                let (need_w, need_x) = (self.requires_grad(*w), self.requires_grad(*x));
                let mut gw = Array2::<f64>::zeros((if need_w { co } else { 0 }, k));
                let mut gx = vec![0.0; if need_x { n * chw } else { 0 }];
                for b in 0..n {
                    let gb = ArrayView2::from_shape((co, plane), &gsl[b * co * plane..(b + 1) * co * plane]).unwrap();
                    if need_w {
                        let cols = im2col(&xs[b * chw..(b + 1) * chw], geom);
                        general_mat_mul(1.0, &gb, &cols.t(), 1.0, &mut gw);
                    }
                    if need_x {
                        let gcols = w2.t().dot(&gb);
                        col2im(&gcols, geom, &mut gx[b * chw..(b + 1) * chw]);
                    }
                }
                self.acc(grads, *w, || gw.into_shape_with_order(IxDyn(&[co, c, kh, kw])).unwrap());
                self.acc(grads, *x, || Tensor::from_shape_vec(IxDyn(&[n, c, h, wd]), gx).unwrap());
            }
            Op::Upsample2x(a) => {
                self.acc(grads, *a, || {
                    let sh = self.shape(*a);
                    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let gs = g.as_standard_layout();
                    let gs = gs.as_slice().unwrap();
                    let mut out = vec![0.0; n * c * h * w];
                    for (r, o) in out.chunks_mut(w).enumerate() {
                        let top = &gs[2 * r * 2 * w..(2 * r + 1) * 2 * w];
                        let bottom = &gs[(2 * r + 1) * 2 * w..(2 * r + 2) * 2 * w];
                        for (j, v) in o.iter_mut().enumerate() {
                            *v = top[2 * j] + top[2 * j + 1] + bottom[2 * j] + bottom[2 * j + 1];
                        }
                    }
                    Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap()
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let t = f();
        debug_assert_eq!(t.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(existing) => *existing += &t,
            slot @ None => *slot = Some(t),
        }
    }
}

fn unary_fwd(f: Unary, x: f64) -> f64 {
    match f {
        Unary::Relu => x.max(0.0),
        Unary::Silu => x * sigmoid(x),
        Unary::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        Unary::Softplus => softplus(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Abs => x.abs(),
        Unary::Exp => x.exp(),
        Unary::Square => x * x,
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn unary_grad(f: Unary, x: f64, y: f64) -> f64 {
    match f {
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        Unary::Softplus => sigmoid(x),
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Exp => y,
        Unary::Square => 2.0 * x,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected a 2-D tensor")
}

fn as2_reshaped(t: &Tensor, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    t.as_slice()
        .map(|s| ArrayView2::from_shape((rows, cols), s).unwrap())
        .expect("weight tensor must be contiguous")
}

/// Batched matrix product with optional transposition of either operand.
fn bmm_raw(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs must be 3-D");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs must be 3-D");
    assert_eq!(a3.shape()[0], b3.shape()[0], "bmm batch mismatch");
    let batch = a3.shape()[0];
    let (m, k) = if ta {
        (a3.shape()[2], a3.shape()[1])
    } else {
        (a3.shape()[1], a3.shape()[2])
    };
    let (k2, n) = if tb {
        (b3.shape()[2], b3.shape()[1])
    } else {
        (b3.shape()[1], b3.shape()[2])
    };
    assert_eq!(k, k2, "bmm inner dims");
    let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
    for i in 0..batch {
        let av = a3.slice(s![i, .., ..]);
        let bv = b3.slice(s![i, .., ..]);
        let av = if ta { av.reversed_axes() } else { av };
        let bv = if tb { bv.reversed_axes() } else { bv };
        let mut ov = out.slice_mut(s![i, .., ..]);
        general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
    }
    out.into_dyn()
}

/// Reduce a broadcast gradient back to `shape`.
/// When `small` broadcasts against `full` by varying along a single
/// contiguous run of axes, returns `(mid, inner)` such that element `i` of
/// `full` pairs with element `(i / inner) % mid` of `small`.
fn bcast_layout(full: &[usize], small: &[usize]) -> Option<(usize, usize)> {
    if small.len() > full.len() {
        return None;
    }
    let pad = full.len() - small.len();
    let dim = |i: usize| if i < pad { 1 } else { small[i - pad] };
    let mut varying = (0..full.len()).filter(|&i| dim(i) != 1);
    let first = varying.next();
    let last = varying.last().or(first);
    for i in 0..full.len() {
        let d = dim(i);
        let inside = matches!((first, last), (Some(p), Some(q)) if p <= i && i <= q);
        if d != 1 && d != full[i] || inside && d != full[i] {
            return None;
        }
    }
    let inner = last.map_or(full.iter().product(), |q| full[q + 1..].iter().product());
    Some((small.iter().product(), inner))
}

/// Elementwise `f(a, b)` with numpy broadcasting; contiguous inputs and
/// single-run broadcasts take a flat loop.
fn zip_bcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        if let (Some(x), Some(y)) = (a.as_slice(), b.as_slice()) {
            let v = x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect();
            return Tensor::from_shape_vec(a.raw_dim(), v).unwrap();
        }
    }
    if a.len() >= b.len() && a.ndim() >= b.ndim() {
        if let (Some(x), Some(y), Some((mid, inner))) = (a.as_slice(), b.as_slice(), bcast_layout(a.shape(), b.shape())) {
            let mut v = Vec::with_capacity(x.len());
            for (k, chunk) in x.chunks(inner.max(1)).enumerate() {
                let q = y[k % mid];
                v.extend(chunk.iter().map(|p| f(*p, q)));
            }
            return Tensor::from_shape_vec(a.raw_dim(), v).unwrap();
        }
    }
    if b.len() >= a.len() && b.ndim() >= a.ndim() {
        if let (Some(x), Some(y), Some((mid, inner))) = (a.as_slice(), b.as_slice(), bcast_layout(b.shape(), a.shape())) {
            let mut v = Vec::with_capacity(y.len());
            for (k, chunk) in y.chunks(inner.max(1)).enumerate() {
                let p = x[k % mid];
                v.extend(chunk.iter().map(|q| f(p, *q)));
            }
            return Tensor::from_shape_vec(b.raw_dim(), v).unwrap();
        }
    }
    let n = a.ndim().max(b.ndim());
    let dim = |t: &Tensor, i: usize| if i < n - t.ndim() { 1 } else { t.shape()[i - (n - t.ndim())] };
    let shape: Vec<usize> = (0..n).map(|i| dim(a, i).max(dim(b, i))).collect();
    let (av, bv) = (a.broadcast(IxDyn(&shape)), b.broadcast(IxDyn(&shape)));
    let (av, bv) = (av.expect("operands broadcast"), bv.expect("operands broadcast"));
    ndarray::Zip::from(&av).and(&bv).map_collect(|p, q| f(*p, *q))
}

/// Reduce a broadcast gradient back to `shape`.
fn sum_to_shape(mut g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    if let (Some(x), Some((mid, inner))) = (g.as_slice(), bcast_layout(g.shape(), shape)) {
        let mut out = vec![0.0; mid];
        for (k, chunk) in x.chunks(inner.max(1)).enumerate() {
            out[k % mid] += chunk.iter().sum::<f64>();
        }
        return Tensor::from_shape_vec(IxDyn(shape), out).unwrap();
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies
/// inside `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> std::ops::Range<usize> {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Columns of one `(C, H, W)` image: `(C * kh * kw, Ho * Wo)`.
fn im2col(x: &[f64], g: &ConvGeom) -> Array2<f64> {
    let rows = g.c * g.kh * g.kw;
    let plane = g.ho * g.wo;
    let mut cols = Array2::<f64>::zeros((rows, plane));
    let dst = cols.as_slice_mut().unwrap();
    for ch in 0..g.c {
        let src = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ch * g.kh + ki) * g.kw + kj;
                let row = &mut dst[r * plane..(r + 1) * plane];
                let oxs = valid_cols(g, kj);
                if oxs.is_empty() {
                    continue;
                }
                let ix0 = oxs.start * g.stride + kj - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let s_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let d = &mut row[oy * g.wo..(oy + 1) * g.wo][oxs.clone()];
                    if g.stride == 1 {
                        d.copy_from_slice(&s_row[ix0..ix0 + d.len()]);
                    } else {
                        for (o, v) in d.iter_mut().zip(s_row[ix0..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add columns of one image back into its `(C, H, W)` buffer.
fn col2im(cols: &Array2<f64>, g: &ConvGeom, out: &mut [f64]) {
    let plane = g.ho * g.wo;
    let src = cols.as_slice().expect("columns are contiguous");
    for ch in 0..g.c {
        let dst = &mut out[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ch * g.kh + ki) * g.kw + kj;
                let row = &src[r * plane..(r + 1) * plane];
                let oxs = valid_cols(g, kj);
                if oxs.is_empty() {
                    continue;
                }
                let ix0 = oxs.start * g.stride + kj - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let d_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &row[oy * g.wo..(oy + 1) * g.wo][oxs.clone()];
                    for (o, v) in d_row[ix0..].iter_mut().step_by(g.stride).zip(s) {
                        *o += *v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Check d(sum(f(x) * probe))/dx against central differences.
    fn check<F>(inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let run = |ins: &[Tensor], probe: Option<&Tensor>| -> (f64, Option<Tensor>, Graph, Vec<Var>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let out = f(&mut g, &vars);
            let probe = probe.cloned().unwrap_or_else(|| Tensor::ones(g.value(out).raw_dim()));
            let pv = g.constant(probe.clone());
            let prod = g.mul(out, pv);
            let loss = g.sum(prod);
            (g.scalar(loss), Some(probe), g, vars)
        };
        let (_, probe0, _, _) = run(&inputs, None);
        let probe = probe0.unwrap().mapv(|_| rng.random_range(-1.0..1.0));
        let (_, _, g, vars) = run(&inputs, Some(&probe));
        // the loss is the last node pushed
        let loss = Var(g.len() - 1);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.raw_dim()));
            for idx in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let fp = run(&plus, Some(&probe)).0;
                let fm = run(&minus, Some(&probe)).0;
                let num = (fp - fm) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let denom = a.abs().max(num.abs()).max(1e-4);
                assert!(
                    (a - num).abs() / denom < 1e-5,
                    "input {k} elem {idx}: analytic {a} numeric {num}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[3, 1]);
        let c = rand_tensor(&mut rng, &[2, 3, 4]).mapv(|x| x.abs() + 0.5);
        check(vec![a, b, c], |g, v| {
            let s = g.add(v[0], v[1]);
            let m = g.mul(s, v[1]);
            let d = g.div(m, v[2]);
            let e = g.sub(d, v[0]);
            g.scale(e, 0.7)
        });
    }

    #[test]
    fn unary_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[5, 4]).mapv(|x| x * 3.0 + 0.01);
        for f in [
            Unary::Silu,
            Unary::Gelu,
            Unary::Softplus,
            Unary::Sigmoid,
            Unary::Exp,
            Unary::Square,
            Unary::Abs,
            Unary::Relu,
        ] {
            check(vec![a.clone()], |g, v| g.unary(v[0], f));
        }
    }

    #[test]
    fn matmul_and_bmm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        check(vec![a, b], |g, v| g.matmul(v[0], v[1]));
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 4, 5]);
        check(vec![a, b], |g, v| g.bmm(v[0], v[1]));
    }

    #[test]
    fn shape_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 2, 4]);
        check(vec![a, b], |g, v| {
            let p = g.permute(v[0], &[2, 0, 1]);
            let r = g.reshape(p, &[4, 6]);
            let r = g.reshape(r, &[4, 2, 3]);
            let r = g.permute(r, &[1, 2, 0]);
            let c = g.concat(&[r, v[1]], 1);
            let s = g.slice(c, 1, 1, 3);
            let t = g.sum_axis(s, 2);
            let u = g.mean_axis(s, 0);
            let st = g.sum(t);
            let su = g.sum(u);
            let total = g.add(st, su);
            g.mul(total, total)
        });
    }

    #[test]
    fn normalization_and_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[3, 5]);
        check(vec![a.clone()], |g, v| g.softmax(v[0]));
        check(vec![a], |g, v| g.layer_norm(v[0], 1e-5));
        let x = rand_tensor(&mut rng, &[3, 2, 2, 3]);
        check(vec![x], |g, v| g.batch_norm(v[0], 1e-5));
    }

    #[test]
    fn conv_and_upsample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 4]);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        check(vec![x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], 1, 1));
        check(vec![x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], 2, 1));
        check(vec![x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], 2, 2));
        check(vec![x.clone(), w], |g, v| g.conv2d(v[0], v[1], 1, 0));
        check(vec![x], |g, v| g.upsample2x(v[0]));
    }

    #[test]
    fn flat_broadcasting_matches_ndarray() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (full, small) in [
            (vec![2, 3, 4, 5], vec![1, 3, 1, 1]),
            (vec![2, 3, 4], vec![4]),
            (vec![2, 3, 4], vec![2, 3, 1]),
            (vec![2, 3, 4], vec![2, 1, 4]),
            (vec![2, 3, 4], vec![1]),
            (vec![3, 4], vec![3, 4]),
        ] {
            let a = rand_tensor(&mut rng, &full);
            let b = rand_tensor(&mut rng, &small);
            assert_eq!(zip_bcast(&a, &b, |x, y| x - y), &a - &b);
            assert_eq!(zip_bcast(&b, &a, |x, y| x / y), &b / &a);
            let g = sum_to_shape(a.clone(), &small);
            let mut expect = a.clone();
            for ax in (0..full.len()).rev() {
                let off = full.len() - small.len();
                if ax < off {
                    expect = expect.sum_axis(Axis(ax));
                } else if small[ax - off] == 1 && full[ax] != 1 {
                    expect = expect.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                }
            }
            assert!((&g - &expect).iter().all(|d| d.abs() < 1e-12), "{full:?} {small:?}");
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // (h, w, k, stride, pad)
        for (h, wd, k, stride, pad) in [(4, 4, 3, 2, 1), (5, 7, 3, 1, 1), (6, 5, 3, 1, 0), (8, 8, 4, 4, 0), (5, 6, 3, 2, 2), (3, 3, 1, 1, 0)] {
            let x = rand_tensor(&mut rng, &[2, 2, h, wd]);
            let w = rand_tensor(&mut rng, &[3, 2, k, k]);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, stride, pad);
            let y = g.value(y).clone();
            let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
            assert_eq!(y.shape(), &[2, 3, ho, wo]);
            for b in 0..2 {
                for o in 0..3 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = 0.0;
                            for c in 0..2 {
                                for i in 0..k {
                                    for j in 0..k {
                                        let iy = (oy * stride + i) as isize - pad as isize;
                                        let ix = (ox * stride + j) as isize - pad as isize;
                                        if (0..h as isize).contains(&iy) && (0..wd as isize).contains(&ix) {
                                            acc += x[[b, c, iy as usize, ix as usize]] * w[[o, c, i, j]];
                                        }
                                    }
                                }
                            }
                            assert!((acc - y[[b, o, oy, ox]]).abs() < 1e-12, "{h}x{wd} k{k} s{stride} p{pad}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(IxDyn(&[2])));
        let b = g.param(Tensor::ones(IxDyn(&[2])));
        let c = g.mul(a, b);
        let l = g.sum(c);
        let grads = g.backward(l);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().as_slice().unwrap(), &[1.0, 1.0]);
    }
}
