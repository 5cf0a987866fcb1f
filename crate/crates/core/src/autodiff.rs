//! Reverse-mode differentiation over a recorded tape.
//!
//! Every forward op appends a node holding its output value and the ids of
//! its inputs. [`Tape::backward`] walks the nodes in reverse insertion order,
//! which is a valid reverse topological order since inputs always precede
//! their consumers.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{dims4, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    DwXcorr {
        search: usize,
        template: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        x: usize,
    },
    SoftmaxLast {
        x: usize,
    },
    Gap {
        x: usize,
    },
    Gmp {
        x: usize,
        argmax: Vec<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    Minimum {
        a: usize,
        b: usize,
    },
    Maximum {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        s: usize,
    },
    Affine {
        x: usize,
        mul: f64,
    },
    Sigmoid {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Exp {
        x: usize,
    },
    Log {
        x: usize,
    },
    Softplus {
        x: usize,
    },
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    MulChannelwise {
        x: usize,
        w: usize,
    },
    Reshape {
        x: usize,
    },
    SliceChannels {
        x: usize,
        start: usize,
    },
    Sum {
        x: usize,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not
    /// influence the loss or was not marked as requiring gradients.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients, one entry per parameter leaf on the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(move |&(id, idx)| self.grads[idx].as_ref().map(|g| (id, g)))
    }

    /// Add all parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.params() {
            store.accumulate_grad(id, g);
        }
    }
}

/// Records one forward pass. Single-threaded; build one tape per worker.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(v.idx)
    }

    fn node(&self, idx: usize) -> &Node {
        &self.nodes[idx]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        if cfg!(debug_assertions) && !matches!(op, Op::Exp { .. } | Op::Log { .. } | Op::Div { .. })
        {
            let inputs_finite = inputs.iter().all(|&i| self.nodes[i].value.all_finite());
            debug_assert!(
                !inputs_finite || value.all_finite(),
                "non-finite output from {op:?}"
            );
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    /// A constant leaf. Its gradient is not tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    /// Copy a parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        Var { tape: self.id, idx }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let xs = self.node(xi).value.shape();
        let ws = self.node(wi).value.shape();
        let (n, cin, h, wd) = dims4(xs, "conv2d")?;
        let (cout, wcin, kh, kw) = dims4(ws, "conv2d")?;
        if wcin != cin {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if self.node(bi).value.shape() != [cout] {
            return Err(Error::shape("conv2d bias", ws, self.node(bi).value.shape()));
        }
        let out_h = kernels::conv_out_len(h, kh, stride, pad);
        let out_w = kernels::conv_out_len(wd, kw, stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::invalid_shape(
                "conv2d",
                format!("kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit input {h}x{wd}"),
            ));
        };
        let geom = ConvGeom {
            channels: cin,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let xd = self.node(xi).value.data();
        let wdat = self.node(wi).value.data();
        let bias = self.node(bi).value.data();
        let mut out = vec![0.0; n * cout * cols];
        let mut col = vec![0.0; rows * cols];
        for s in 0..n {
            kernels::im2col(&xd[s * cin * h * wd..(s + 1) * cin * h * wd], &geom, &mut col);
            let dst = &mut out[s * cout * cols..(s + 1) * cout * cols];
            for (o, &bv) in bias.iter().enumerate() {
                dst[o * cols..(o + 1) * cols].fill(bv);
            }
            kernels::gemm(cout, rows, cols, wdat, false, &col, false, 1.0, dst);
        }
        let value = Tensor::from_parts(vec![n, cout, out_h, out_w], out);
        Ok(self.push(value, Op::Conv2d { x: xi, w: wi, b: bi, geom }, &[xi, wi, bi]))
    }

    /// Max pooling without padding; ties resolve to the first cell in
    /// row-major window order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = dims4(self.node(xi).value.shape(), "max_pool2d")?;
        let (Some(oh), Some(ow)) = (
            kernels::conv_out_len(h, kernel, stride, 0),
            kernels::conv_out_len(w, kernel, stride, 0),
        ) else {
            return Err(Error::invalid_shape(
                "max_pool2d",
                format!("window {kernel} (stride {stride}) does not fit input {h}x{w}"),
            ));
        };
        let xd = self.node(xi).value.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, Op::MaxPool2d { x: xi, argmax }, &[xi]))
    }

    /// Depth-wise cross-correlation: channel `c` of `search` is correlated
    /// with channel `c` of `template` of the same batch element.
    pub fn dwxcorr(&mut self, search: Var, template: Var) -> Result<Var> {
        let (si, ti) = (self.idx(search)?, self.idx(template)?);
        let ss = self.node(si).value.shape();
        let ts = self.node(ti).value.shape();
        let (n, c, sh, sw) = dims4(ss, "dwxcorr")?;
        let (tn, tc, th, tw) = dims4(ts, "dwxcorr")?;
        if tn != n || tc != c {
            return Err(Error::shape("dwxcorr", ss, ts));
        }
        if th > sh || tw > sw || th == 0 || tw == 0 {
            return Err(Error::invalid_shape(
                "dwxcorr",
                format!("template {th}x{tw} larger than search {sh}x{sw}"),
            ));
        }
        let (oh, ow) = (sh - th + 1, sw - tw + 1);
        let sd = self.node(si).value.data();
        let td = self.node(ti).value.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            kernels::xcorr_plane(
                &sd[p * sh * sw..(p + 1) * sh * sw],
                sh,
                sw,
                &td[p * th * tw..(p + 1) * th * tw],
                th,
                tw,
                &mut out[p * oh * ow..(p + 1) * oh * ow],
            );
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, Op::DwXcorr { search: si, template: ti }, &[si, ti]))
    }

    /// `[M,K] x [K,P]`, or batched `[B,M,K] x [B,K,P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let ashape = self.node(ai).value.shape().to_vec();
        let bshape = self.node(bi).value.shape().to_vec();
        let (batch, m, k, k2, p) = match (ashape.as_slice(), bshape.as_slice()) {
            ([m, k], [k2, p]) => (1, *m, *k, *k2, *p),
            ([ba, m, k], [bb, k2, p]) if ba == bb => (*ba, *m, *k, *k2, *p),
            _ => return Err(Error::shape("matmul", &ashape, &bshape)),
        };
        if k != k2 {
            return Err(Error::shape("matmul", &ashape, &bshape));
        }
        let ad = self.node(ai).value.data();
        let bd = self.node(bi).value.data();
        let mut out = vec![0.0; batch * m * p];
        for s in 0..batch {
            kernels::gemm(
                m,
                k,
                p,
                &ad[s * m * k..(s + 1) * m * k],
                false,
                &bd[s * k * p..(s + 1) * k * p],
                false,
                0.0,
                &mut out[s * m * p..(s + 1) * m * p],
            );
        }
        let shape = if ashape.len() == 2 { vec![m, p] } else { vec![batch, m, p] };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a: ai, b: bi }, &[ai, bi]))
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.node(xi).value.shape().to_vec();
        let (batch, r, c) = match shape.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => {
                return Err(Error::invalid_shape(
                    "transpose",
                    format!("expected rank 2 or 3, got {shape:?}"),
                ))
            }
        };
        let out = transpose_data(self.node(xi).value.data(), batch, r, c);
        let mut out_shape = shape.clone();
        let len = out_shape.len();
        out_shape.swap(len - 2, len - 1);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Transpose { x: xi }, &[xi]))
    }

    pub fn softmax_lastaxis(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.node(xi).value;
        let k = *t.shape().last().unwrap_or(&0);
        if k == 0 {
            return Err(Error::invalid_shape("softmax", "empty last axis"));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(value, Op::SoftmaxLast { x: xi }, &[xi]))
    }

    /// Global average pooling to `[N,C,1,1]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = dims4(self.node(xi).value.shape(), "gap")?;
        if h * w == 0 {
            return Err(Error::invalid_shape("gap", "empty spatial extent"));
        }
        let out = self
            .node(xi)
            .value
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c, 1, 1], out), Op::Gap { x: xi }, &[xi]))
    }

    /// Global max pooling to `[N,C,1,1]`; backward routes to the first argmax.
    pub fn gmp(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = dims4(self.node(xi).value.shape(), "gmp")?;
        if h * w == 0 {
            return Err(Error::invalid_shape("gmp", "empty spatial extent"));
        }
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (p, plane) in self.node(xi).value.data().chunks(h * w).enumerate() {
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            argmax.push(p * h * w + best);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, 1, 1], out),
            Op::Gmp { x: xi, argmax },
            &[xi],
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let at = &self.node(ai).value;
        let bt = &self.node(bi).value;
        if at.shape() != bt.shape() {
            return Err(Error::shape(name, at.shape(), bt.shape()));
        }
        let out = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(at.shape().to_vec(), out);
        Ok(self.push(value, op(ai, bi), &[ai, bi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, |a, b| Op::Div { a, b })
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", |x, y| if y < x { y } else { x }, |a, b| Op::Minimum { a, b })
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", |x, y| if y > x { y } else { x }, |a, b| Op::Maximum { a, b })
    }

    /// Multiply by a one-element tensor (typically a scalar parameter).
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.idx(x)?, self.idx(s)?);
        let st = &self.node(si).value;
        if !st.is_scalar() {
            return Err(Error::shape("scale", self.node(xi).value.shape(), st.shape()));
        }
        let sv = st.item();
        let xt = &self.node(xi).value;
        let out = xt.data().iter().map(|v| v * sv).collect();
        let value = Tensor::from_parts(xt.shape().to_vec(), out);
        Ok(self.push(value, Op::Scale { x: xi, s: si }, &[xi, si]))
    }

    /// `mul * x + add` with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let xt = &self.node(xi).value;
        let out = xt.data().iter().map(|v| mul * v + add).collect();
        let value = Tensor::from_parts(xt.shape().to_vec(), out);
        Ok(self.push(value, Op::Affine { x: xi, mul }, &[xi]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let xi = self.idx(x)?;
        let xt = &self.node(xi).value;
        let out = xt.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(xt.shape().to_vec(), out);
        Ok(self.push(value, op(xi), &[xi]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, |x| Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), |x| Op::Relu { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, |x| Op::Exp { x })
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, |x| Op::Log { x })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::softplus, |x| Op::Softplus { x })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(x, |v| v.clamp(lo, hi), |x| Op::Clamp { x, lo, hi })
    }

    /// Channel concatenation: `[N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let ashape = self.node(ai).value.shape();
        let bshape = self.node(bi).value.shape();
        let (n, ca, h, w) = dims4(ashape, "concat_channels")?;
        let (nb, cb, hb, wb) = dims4(bshape, "concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", ashape, bshape));
        }
        let ad = self.node(ai).value.data();
        let bd = self.node(bi).value.data();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&ad[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bd[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::from_parts(vec![n, ca + cb, h, w], out);
        Ok(self.push(value, Op::ConcatChannels { a: ai, b: bi }, &[ai, bi]))
    }

    /// `x[N,C,H,W] * w[N,C,1,1]`, broadcasting `w` over space.
    pub fn mul_channelwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let xs = self.node(xi).value.shape();
        let ws = self.node(wi).value.shape();
        let (n, c, h, wd) = dims4(xs, "mul_channelwise")?;
        if ws != [n, c, 1, 1] {
            return Err(Error::shape("mul_channelwise", xs, ws));
        }
        let hw = h * wd;
        let wdat = self.node(wi).value.data();
        let out = self
            .node(xi)
            .value
            .data()
            .chunks(hw.max(1))
            .zip(wdat)
            .flat_map(|(plane, &s)| plane.iter().map(move |v| v * s))
            .collect();
        let value = Tensor::from_parts(vec![n, c, h, wd], out);
        Ok(self.push(value, Op::MulChannelwise { x: xi, w: wi }, &[xi, wi]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.node(xi).value.reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x: xi }, &[xi]))
    }

    /// Channels `start..start+len` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = dims4(self.node(xi).value.shape(), "slice_channels")?;
        if start + len > c || len == 0 {
            return Err(Error::invalid_shape(
                "slice_channels",
                format!("channels {start}..{} out of range for {c}", start + len),
            ));
        }
        let hw = h * w;
        let xd = self.node(xi).value.data();
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            let base = (s * c + start) * hw;
            out.extend_from_slice(&xd[base..base + len * hw]);
        }
        let value = Tensor::from_parts(vec![n, len, h, w], out);
        Ok(self.push(value, Op::SliceChannels { x: xi, start }, &[xi]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.node(xi).value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: xi }, &[xi]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Allow another [`Tape::backward`] call on this tape.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = &self.nodes[li].value;
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; li + 1];
        grads[li] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(li + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let xt = &self.nodes[*x].value;
                let wt = &self.nodes[*w].value;
                let n = xt.shape()[0];
                let cout = wt.shape()[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_plane = geom.channels * geom.height * geom.width;
                let need_x = self.nodes[*x].requires_grad;
                let need_w = self.nodes[*w].requires_grad;
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; cout];
                    for s in 0..n {
                        for (o, d) in db.iter_mut().enumerate() {
                            let base = (s * cout + o) * cols;
                            *d += gd[base..base + cols].iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, *b, &[cout], &db);
                }
                let mut dw = if need_w { vec![0.0; wt.len()] } else { Vec::new() };
                let mut dx = if need_x { vec![0.0; xt.len()] } else { Vec::new() };
                let mut col = vec![0.0; rows * cols];
                for s in 0..n {
                    let gs = &gd[s * cout * cols..(s + 1) * cout * cols];
                    if need_w {
                        kernels::im2col(&xt.data()[s * in_plane..(s + 1) * in_plane], geom, &mut col);
                        kernels::gemm(cout, cols, rows, gs, false, &col, true, 1.0, &mut dw);
                    }
                    if need_x {
                        kernels::gemm(rows, cout, cols, wt.data(), true, gs, false, 0.0, &mut col);
                        kernels::col2im(&col, geom, &mut dx[s * in_plane..(s + 1) * in_plane]);
                    }
                }
                if need_w {
                    accumulate(grads, *w, wt.shape(), &dw);
                }
                if need_x {
                    accumulate(grads, *x, xt.shape(), &dx);
                }
            }
            Op::MaxPool2d { x, argmax } | Op::Gmp { x, argmax } => {
                let xt = &self.nodes[*x].value;
                let mut dx = vec![0.0; xt.len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                accumulate(grads, *x, xt.shape(), &dx);
            }
            Op::DwXcorr { search, template } => {
                let st = &self.nodes[*search].value;
                let tt = &self.nodes[*template].value;
                let (n, c, sh, sw) = dims(st);
                let (_, _, th, tw) = dims(tt);
                let (oh, ow) = (sh - th + 1, sw - tw + 1);
                let need_s = self.nodes[*search].requires_grad;
                let need_t = self.nodes[*template].requires_grad;
                let mut ds = vec![0.0; if need_s { st.len() } else { 0 }];
                let mut dt = vec![0.0; if need_t { tt.len() } else { 0 }];
                let (sd, td) = (st.data(), tt.data());
                for p in 0..n * c {
                    let (so, to, oo) = (p * sh * sw, p * th * tw, p * oh * ow);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[oo + oy * ow + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            for u in 0..th {
                                let srow = so + (oy + u) * sw + ox;
                                let trow = to + u * tw;
                                for v in 0..tw {
                                    if need_s {
                                        ds[srow + v] += gv * td[trow + v];
                                    }
                                    if need_t {
                                        dt[trow + v] += gv * sd[srow + v];
                                    }
                                }
                            }
                        }
                    }
                }
                if need_s {
                    accumulate(grads, *search, st.shape(), &ds);
                }
                if need_t {
                    accumulate(grads, *template, tt.shape(), &dt);
                }
            }
            Op::MatMul { a, b } => {
                let at = &self.nodes[*a].value;
                let bt = &self.nodes[*b].value;
                let (batch, m, k) = mat_dims(at.shape());
                let (_, _, p) = mat_dims(bt.shape());
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; at.len()];
                    for s in 0..batch {
                        kernels::gemm(
                            m,
                            p,
                            k,
                            &gd[s * m * p..(s + 1) * m * p],
                            false,
                            &bt.data()[s * k * p..(s + 1) * k * p],
                            true,
                            0.0,
                            &mut da[s * m * k..(s + 1) * m * k],
                        );
                    }
                    accumulate(grads, *a, at.shape(), &da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; bt.len()];
                    for s in 0..batch {
                        kernels::gemm(
                            k,
                            m,
                            p,
                            &at.data()[s * m * k..(s + 1) * m * k],
                            true,
                            &gd[s * m * p..(s + 1) * m * p],
                            false,
                            0.0,
                            &mut db[s * k * p..(s + 1) * k * p],
                        );
                    }
                    accumulate(grads, *b, bt.shape(), &db);
                }
            }
            Op::Transpose { x } => {
                let (batch, r, c) = mat_dims(node.value.shape());
                let dx = transpose_data(gd, batch, r, c);
                accumulate(grads, *x, self.nodes[*x].value.shape(), &dx);
            }
            Op::SoftmaxLast { x } => {
                let k = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; out.len()];
                for ((y, dy), d) in out.chunks(k).zip(gd.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        d[j] = y[j] * (dy[j] - dot);
                    }
                }
                accumulate(grads, *x, node.value.shape(), &dx);
            }
            Op::Gap { x } => {
                let xt = &self.nodes[*x].value;
                let (_, _, h, w) = dims(xt);
                let hw = h * w;
                let dx: Vec<f64> = gd
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / hw as f64, hw))
                    .collect();
                accumulate(grads, *x, xt.shape(), &dx);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.shape(), gd);
                accumulate(grads, *b, g.shape(), gd);
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g.shape(), gd);
                let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                accumulate(grads, *b, g.shape(), &neg);
            }
            Op::Mul { a, b } => {
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                let da: Vec<f64> = gd.iter().zip(bd).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = gd.iter().zip(ad).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, g.shape(), &da);
                accumulate(grads, *b, g.shape(), &db);
            }
            Op::Div { a, b } => {
                let bd = self.nodes[*b].value.data();
                let da: Vec<f64> = gd.iter().zip(bd).map(|(g, y)| g / y).collect();
                let db: Vec<f64> = gd
                    .iter()
                    .zip(out)
                    .zip(bd)
                    .map(|((g, q), y)| -g * q / y)
                    .collect();
                accumulate(grads, *a, g.shape(), &da);
                accumulate(grads, *b, g.shape(), &db);
            }
            Op::Minimum { a, b } | Op::Maximum { a, b } => {
                let ad = self.nodes[*a].value.data();
                let mut da = vec![0.0; gd.len()];
                let mut db = vec![0.0; gd.len()];
                for i in 0..gd.len() {
                    if out[i] == ad[i] {
                        da[i] = gd[i];
                    } else {
                        db[i] = gd[i];
                    }
                }
                accumulate(grads, *a, g.shape(), &da);
                accumulate(grads, *b, g.shape(), &db);
            }
            Op::Scale { x, s } => {
                let sv = self.nodes[*s].value.item();
                let xd = self.nodes[*x].value.data();
                let dx: Vec<f64> = gd.iter().map(|v| v * sv).collect();
                let ds: f64 = gd.iter().zip(xd).map(|(g, x)| g * x).sum();
                accumulate(grads, *x, g.shape(), &dx);
                accumulate(grads, *s, self.nodes[*s].value.shape(), &[ds]);
            }
            Op::Affine { x, mul } => {
                let dx: Vec<f64> = gd.iter().map(|v| v * mul).collect();
                accumulate(grads, *x, g.shape(), &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = gd.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *x, g.shape(), &dx);
            }
            Op::Relu { x } => {
                let xd = self.nodes[*x].value.data();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(xd)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, g.shape(), &dx);
            }
            Op::Exp { x } => {
                let dx: Vec<f64> = gd.iter().zip(out).map(|(g, y)| g * y).collect();
                accumulate(grads, *x, g.shape(), &dx);
            }
            Op::Log { x } => {
                let xd = self.nodes[*x].value.data();
                let dx: Vec<f64> = gd.iter().zip(xd).map(|(g, v)| g / v).collect();
                accumulate(grads, *x, g.shape(), &dx);
            }
            Op::Softplus { x } => {
                let xd = self.nodes[*x].value.data();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(xd)
                    .map(|(g, v)| g * kernels::sigmoid(*v))
                    .collect();
                accumulate(grads, *x, g.shape(), &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.nodes[*x].value.data();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(xd)
                    .map(|(g, v)| if v > lo && v < hi { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, g.shape(), &dx);
            }
            Op::ConcatChannels { a, b } => {
                let ashape = self.nodes[*a].value.shape();
                let bshape = self.nodes[*b].value.shape();
                let (n, ca, h, w) = (ashape[0], ashape[1], ashape[2], ashape[3]);
                let cb = bshape[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&gd[base..base + ca * hw]);
                    db.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
                }
                accumulate(grads, *a, ashape, &da);
                accumulate(grads, *b, bshape, &db);
            }
            Op::MulChannelwise { x, w } => {
                let xt = &self.nodes[*x].value;
                let wt = &self.nodes[*w].value;
                let (_, _, h, wd) = dims(xt);
                let hw = (h * wd).max(1);
                let mut dx = Vec::with_capacity(xt.len());
                let mut dw = Vec::with_capacity(wt.len());
                for ((gp, xp), &s) in gd.chunks(hw).zip(xt.data().chunks(hw)).zip(wt.data()) {
                    dx.extend(gp.iter().map(|v| v * s));
                    dw.push(gp.iter().zip(xp).map(|(a, b)| a * b).sum());
                }
                accumulate(grads, *x, xt.shape(), &dx);
                accumulate(grads, *w, wt.shape(), &dw);
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, self.nodes[*x].value.shape(), gd);
            }
            Op::SliceChannels { x, start } => {
                let xshape = self.nodes[*x].value.shape();
                let (n, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for s in 0..n {
                    let dst = (s * c + start) * hw;
                    dx[dst..dst + len * hw].copy_from_slice(&gd[s * len * hw..(s + 1) * len * hw]);
                }
                accumulate(grads, *x, xshape, &dx);
            }
            Op::Sum { x } => {
                let xt = &self.nodes[*x].value;
                accumulate(grads, *x, xt.shape(), &vec![gd[0]; xt.len()]);
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        _ => unreachable!("matrix op on rank {}", shape.len()),
    }
}

fn transpose_data(x: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..batch {
        let src = &x[s * r * c..(s + 1) * r * c];
        let dst = &mut out[s * r * c..(s + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, shape: &[usize], delta: &[f64]) {
    match &mut grads[idx] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta.to_vec())),
    }
}
