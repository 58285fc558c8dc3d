//! Reverse-mode autodiff over [`TensorGrid`] values.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`] walks the
//! record in reverse and produces gradients for every node; parameter leaves can then be
//! flushed into their [`ParamStore`].
//!
//! Shape violations inside an operation are programming errors and panic with a message
//! naming the operation.

use std::sync::Arc;

use crate::tensor::{ParamId, ParamStore, Scalar, TensorGrid};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Normalization of the partial cross-entropy over the labeled set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PceReduction {
    #[default]
    Mean,
    Sum,
}

/// Label value marking a pixel without annotation.
pub const UNLABELED: u8 = 255;

const NORM_EPS: f64 = 1e-5;
const LOG_CLAMP: f64 = 1e-12;
pub const DICE_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GroupNorm {
        x: Var,
        g: Var,
        b: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(Var),
    Silu(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    MaxPool2x {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    Gather {
        x: Var,
        index: Arc<Vec<u32>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    SelectiveScan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        states: Vec<T>,
    },
    SoftmaxChannels(Var),
    Pce {
        probs: Var,
        labels: Arc<Vec<u8>>,
        norm: T,
    },
    Dice {
        probs: Var,
        target: Arc<TensorGrid<T>>,
    },
    WeightedSum {
        x: Var,
        weights: Arc<TensorGrid<T>>,
    },
}

struct Node<T> {
    value: TensorGrid<T>,
    op: Op<T>,
}

/// Gradients for every node of a tape, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<TensorGrid<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&TensorGrid<T>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
}

fn dims4(t: &[usize], op: &str) -> (usize, usize, usize, usize) {
    assert_eq!(t.len(), 4, "{op}: expected NCHW input, got {t:?}");
    (t[0], t[1], t[2], t[3])
}

fn dims3(t: &[usize], op: &str) -> (usize, usize, usize) {
    assert_eq!(t.len(), 3, "{op}: expected rank-3 input, got {t:?}");
    (t[0], t[1], t[2])
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// tanh-approximated GELU and its derivative.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (y, dy)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let p = ho * wo;
    for c in 0..c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source index and weights of a half-pixel-centred 2x bilinear upsample along one axis.
fn upsample_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: TensorGrid<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &TensorGrid<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant or differentiable input leaf.
    pub fn input(&mut self, value: TensorGrid<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params.push((id, v));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = TensorGrid::from_vec(va.shape(), data);
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = TensorGrid::from_vec(va.shape(), data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// 2-D convolution of an NCHW batch with an `(out, in, k, k)` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c_in, h, wd) = dims4(self.shape(x), "conv2d");
        let (c_out, wc, kh, kw) = dims4(self.shape(w), "conv2d kernel");
        assert_eq!(wc, c_in, "conv2d: kernel expects {wc} input channels, got {c_in}");
        assert!(kh == kw && kh % 2 == 1, "conv2d: kernel must be square and odd");
        assert!(stride >= 1, "conv2d: stride must be positive");
        if let Some(b) = b {
            assert_eq!(self.shape(b), [c_out], "conv2d: bias shape");
        }
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: input smaller than kernel");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let (p, ck) = (ho * wo, c_in * kh * kw);
        let mut out = vec![T::zero(); n * c_out * p];
        let mut cols = vec![T::zero(); ck * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            im2col(&xv[i * c_in * h * wd..], c_in, h, wd, kh, stride, pad, ho, wo, &mut cols);
            let dst = &mut out[i * c_out * p..(i + 1) * c_out * p];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (co, row) in dst.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[co]);
                }
            }
            T::gemm(c_out, ck, p, wv, false, &cols, false, T::one(), dst);
        }
        let out = TensorGrid::from_vec(&[n, c_out, ho, wo], out);
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Per-channel convolution with a `(C, 1, k, k)` kernel, stride 1.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let (n, c, h, wd) = dims4(self.shape(x), "depthwise_conv2d");
        let (wc, one, k, k2) = dims4(self.shape(w), "depthwise_conv2d kernel");
        assert!(wc == c && one == 1 && k == k2, "depthwise_conv2d: kernel shape");
        let ho = h + 2 * pad - k + 1;
        let wo = wd + 2 * pad - k + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * c * ho * wo];
        for i in 0..n {
            for ch in 0..c {
                let plane = &xv[(i * c + ch) * h * wd..][..h * wd];
                let ker = &wv[ch * k * k..][..k * k];
                let dst = &mut out[(i * c + ch) * ho * wo..][..ho * wo];
                let bias = bv.map_or(T::zero(), |b| b[ch]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias;
                        for ki in 0..k {
                            let iy = (oy + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let ix = (ox + kj) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    acc += ker[ki * k + kj] * plane[iy as usize * wd + ix as usize];
                                }
                            }
                        }
                        dst[oy * wo + ox] = acc;
                    }
                }
            }
        }
        let out = TensorGrid::from_vec(&[n, c, ho, wo], out);
        self.push(out, Op::DepthwiseConv2d { x, w, b, pad })
    }

    /// `y = x W^T + b` over the last dimension; `w` is `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "linear: weight must be (out, in)");
        let (d_out, d_in) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), d_in, "linear: input dim {xs:?} vs weight {ws:?}");
        let rows = self.value(x).len() / d_in;
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), d_out, "linear: bias shape");
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            rows,
            d_in,
            d_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::one(),
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        self.push(TensorGrid::from_vec(&shape, out), Op::Linear { x, w, b })
    }

    /// Normalization over the last dimension with affine `g`, `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(g).data(), self.value(b).data());
        assert!(gv.len() == d && bv.len() == d, "layer_norm: affine shape");
        let rows = xv.len() / d;
        let dt = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + T::lit(NORM_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        let out = TensorGrid::from_vec(xv.shape(), out);
        self.push(out, Op::LayerNorm { x, g, b, xhat, rstd })
    }

    /// Group normalization of an NCHW tensor with per-channel affine.
    pub fn group_norm(&mut self, x: Var, g: Var, b: Var, groups: usize) -> Var {
        let (n, c, h, w) = dims4(self.shape(x), "group_norm");
        assert!(groups >= 1 && c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
        let (gv, bv) = (self.value(g).data(), self.value(b).data());
        assert!(gv.len() == c && bv.len() == c, "group_norm: affine shape");
        let xv = self.value(x).data();
        let per = c / groups * h * w;
        let hw = h * w;
        let mt = T::from_usize(per).unwrap();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); n * groups];
        let mut out = vec![T::zero(); xv.len()];
        for gi in 0..n * groups {
            let seg = &xv[gi * per..(gi + 1) * per];
            let mean = seg.iter().copied().sum::<T>() / mt;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mt;
            let rs = T::one() / (var + T::lit(NORM_EPS)).sqrt();
            rstd[gi] = rs;
            for (j, &v) in seg.iter().enumerate() {
                let idx = gi * per + j;
                let ch = (idx / hw) % c;
                let xh = (v - mean) * rs;
                xhat[idx] = xh;
                out[idx] = xh * gv[ch] + bv[ch];
            }
        }
        let out = TensorGrid::from_vec(&[n, c, h, w], out);
        self.push(out, Op::GroupNorm { x, g, b, groups, xhat, rstd })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu(v).0);
        self.push(out, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        self.push(out, Op::Exp(x))
    }

    /// 2x2 max pooling with stride 2; H and W must be even.
    pub fn maxpool2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.shape(x), "maxpool2x");
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2x: odd spatial size {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    out[o] = xv[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let out = TensorGrid::from_vec(&[n, c, ho, wo], out);
        self.push(out, Op::MaxPool2x { x, argmax })
    }

    /// Bilinear 2x upsampling with half-pixel centres and edge clamping.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.shape(x), "upsample2x");
        let (ho, wo) = (2 * h, 2 * w);
        let ty = upsample_taps(ho, h);
        let tx = upsample_taps(wo, w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..][..h * w];
            let dst = &mut out[plane * ho * wo..][..ho * wo];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let (ly, my) = (T::lit(ly), T::lit(1.0 - ly));
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let (lx, mx) = (T::lit(lx), T::lit(1.0 - lx));
                    dst[oy * wo + ox] = my * (mx * src[y0 * w + x0] + lx * src[y0 * w + x1])
                        + ly * (mx * src[y1 * w + x0] + lx * src[y1 * w + x1]);
                }
            }
        }
        let out = TensorGrid::from_vec(&[n, c, ho, wo], out);
        self.push(out, Op::Upsample2x(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = dims4(self.shape(a), "concat_channels");
        let (nb, cb, hb, wb) = dims4(self.shape(b), "concat_channels");
        assert!(n == nb && h == hb && w == wb, "concat_channels: batch/spatial mismatch");
        let hw = h * w;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&va[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&vb[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = TensorGrid::from_vec(&[n, ca + cb, h, w], out);
        self.push(out, Op::ConcatChannels(a, b))
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`; covers permutes, slices and shifts.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<u32>>, shape: &[usize]) -> Var {
        let xv = self.value(x).data();
        let data = index.iter().map(|&i| xv[i as usize]).collect();
        let out = TensorGrid::from_vec(shape, data);
        self.push(out, Op::Gather { x, index })
    }

    /// Multi-head scaled dot-product attention, independently per leading index.
    ///
    /// `q`, `k`, `v` are `(groups, len, dim)`; returns the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (g, l, d) = dims3(self.shape(q), "attention");
        assert_eq!(self.shape(k), [g, l, d], "attention: key shape");
        assert_eq!(self.shape(v), [g, l, d], "attention: value shape");
        assert!(heads >= 1 && d % heads == 0, "attention: dim {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); g * heads * l * l];
        let mut out = vec![T::zero(); g * l * d];
        for gi in 0..g {
            let base = gi * l * d;
            for hd in 0..heads {
                let off = hd * dh;
                let p = &mut probs[(gi * heads + hd) * l * l..][..l * l];
                for i in 0..l {
                    let qi = &qv[base + i * d + off..][..dh];
                    let row = &mut p[i * l..(i + 1) * l];
                    let mut mx = T::neg_infinity();
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kv[base + j * d + off..][..dh];
                        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        *r = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::zero();
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for r in row.iter_mut() {
                        *r /= z;
                    }
                    let oi = &mut out[base + i * d + off..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vv[base + j * d + off..][..dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
            }
        }
        let out = TensorGrid::from_vec(&[g, l, d], out);
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Diagonal selective state-space recurrence, run sequentially per sequence.
    ///
    /// Shapes: `x`, `delta` are `(S, L, d)`, `a` is `(d, n)`, `b`, `c` are `(S, L, n)` and
    /// `d` is `(d,)`. With `h_0 = 0`:
    /// `h_t = exp(delta_t * a) * h_{t-1} + delta_t * b_t * x_t` and
    /// `y_t = <c_t, h_t> + d * x_t`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Var {
        let (s, l, di) = dims3(self.shape(x), "selective_scan");
        assert_eq!(self.shape(delta), [s, l, di], "selective_scan: delta shape");
        let ash = self.shape(a);
        assert!(ash.len() == 2 && ash[0] == di, "selective_scan: A must be (d_inner, d_state)");
        let n = ash[1];
        assert_eq!(self.shape(b), [s, l, n], "selective_scan: B shape");
        assert_eq!(self.shape(c), [s, l, n], "selective_scan: C shape");
        assert_eq!(self.shape(d), [di], "selective_scan: D shape");
        let (xv, dv, av) = (self.value(x).data(), self.value(delta).data(), self.value(a).data());
        let (bv, cv, skip) = (self.value(b).data(), self.value(c).data(), self.value(d).data());
        assert!(
            dv.iter().all(|&v| v >= T::zero()),
            "selective_scan: delta must be non-negative"
        );
        let mut states = vec![T::zero(); s * l * di * n];
        let mut out = vec![T::zero(); s * l * di];
        let mut h = vec![T::zero(); di * n];
        for si in 0..s {
            h.iter_mut().for_each(|v| *v = T::zero());
            for t in 0..l {
                let row = (si * l + t) * di;
                let bt = &bv[(si * l + t) * n..][..n];
                let ct = &cv[(si * l + t) * n..][..n];
                for i in 0..di {
                    let (xi, dti) = (xv[row + i], dv[row + i]);
                    let hi = &mut h[i * n..(i + 1) * n];
                    let mut y = skip[i] * xi;
                    for j in 0..n {
                        hi[j] = (dti * av[i * n + j]).exp() * hi[j] + dti * bt[j] * xi;
                        y += ct[j] * hi[j];
                    }
                    out[row + i] = y;
                }
                states[(si * l + t) * di * n..][..di * n].copy_from_slice(&h);
            }
        }
        let out = TensorGrid::from_vec(&[s, l, di], out);
        self.push(out, Op::SelectiveScan { x, delta, a, b, c, d, states })
    }

    /// Max-shifted softmax over the channel axis of an `(N, K, H, W)` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let (n, k, h, w) = dims4(self.shape(x), "softmax_channels");
        let xv = self.value(x).data();
        assert!(xv.iter().all(|v| !v.is_nan()), "softmax_channels: NaN logits");
        let hw = h * w;
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            let base = i * k * hw;
            for p in 0..hw {
                let mx = (0..k).map(|c| xv[base + c * hw + p]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..k {
                    let e = (xv[base + c * hw + p] - mx).exp();
                    out[base + c * hw + p] = e;
                    z += e;
                }
                for c in 0..k {
                    out[base + c * hw + p] /= z;
                }
            }
        }
        let out = TensorGrid::from_vec(&[n, k, h, w], out);
        self.push(out, Op::SoftmaxChannels(x))
    }

    /// Partial cross-entropy of `(N, K, H, W)` probabilities against per-pixel labels,
    /// skipping [`UNLABELED`]. Returns a one-element tensor; 0 when nothing is labeled.
    pub fn pce(&mut self, probs: Var, labels: Arc<Vec<u8>>, reduction: PceReduction) -> Var {
        let (n, k, h, w) = dims4(self.shape(probs), "pce");
        let hw = h * w;
        assert_eq!(labels.len(), n * hw, "pce: label count");
        let pv = self.value(probs).data();
        let mut total = T::zero();
        let mut count = 0usize;
        for (idx, &lab) in labels.iter().enumerate() {
            if lab == UNLABELED {
                continue;
            }
            assert!((lab as usize) < k, "pce: label {lab} out of range for {k} classes");
            let (i, p) = (idx / hw, idx % hw);
            let prob = pv[(i * k + lab as usize) * hw + p].max(T::lit(LOG_CLAMP));
            total -= prob.ln();
            count += 1;
        }
        let norm = match (reduction, count) {
            (_, 0) => T::zero(),
            (PceReduction::Mean, c) => T::one() / T::from_usize(c).unwrap(),
            (PceReduction::Sum, _) => T::one(),
        };
        let out = TensorGrid::from_vec(&[1], vec![total * norm]);
        self.push(out, Op::Pce { probs, labels, norm })
    }

    /// Soft dice loss averaged over classes against a constant target of the same shape.
    pub fn dice(&mut self, probs: Var, target: Arc<TensorGrid<T>>) -> Var {
        let (n, k, h, w) = dims4(self.shape(probs), "dice");
        assert_eq!(target.shape(), [n, k, h, w], "dice: target shape");
        let hw = h * w;
        let (pv, gv) = (self.value(probs).data(), target.data());
        let eps = T::lit(DICE_EPS);
        let mut loss = T::zero();
        for c in 0..k {
            let (mut inter, mut ps, mut gs) = (T::zero(), T::zero(), T::zero());
            for i in 0..n {
                let off = (i * k + c) * hw;
                for p in off..off + hw {
                    inter += pv[p] * gv[p];
                    ps += pv[p];
                    gs += gv[p];
                }
            }
            loss += T::one() - (T::lit(2.0) * inter + eps) / (ps + gs + eps);
        }
        let out = TensorGrid::from_vec(&[1], vec![loss / T::from_usize(k).unwrap()]);
        self.push(out, Op::Dice { probs, target })
    }

    /// `sum(x * weights)`; turns any tensor output into a scalar for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Arc<TensorGrid<T>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape(), "weighted_sum: shape mismatch");
        let s = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let out = TensorGrid::from_vec(&[1], vec![s]);
        self.push(out, Op::WeightedSum { x, weights })
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<TensorGrid<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(TensorGrid::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    fn backprop_node(&self, idx: usize, gy: &TensorGrid<T>, grads: &mut [Option<TensorGrid<T>>]) {
        let acc = |grads: &mut [Option<TensorGrid<T>>], v: Var, g: TensorGrid<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let node = &self.nodes[idx];
        let gyd = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = TensorGrid::from_vec(
                    va.shape(),
                    gyd.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect(),
                );
                let gb = TensorGrid::from_vec(
                    vb.shape(),
                    gyd.iter().zip(va.data()).map(|(&g, &x)| g * x).collect(),
                );
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, s) => acc(grads, *a, gy.map(|g| g * *s)),
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, c_in, h, wd) = dims4(self.shape(*x), "conv2d");
                let (c_out, _, k, _) = dims4(self.shape(*w), "conv2d");
                let (_, _, ho, wo) = dims4(gy.shape(), "conv2d");
                let (p, ck) = (ho * wo, c_in * k * k);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gw = vec![T::zero(); c_out * ck];
                let mut gx = vec![T::zero(); n * c_in * h * wd];
                let mut cols = vec![T::zero(); ck * p];
                let mut dcols = vec![T::zero(); ck * p];
                for i in 0..n {
                    let gyi = &gyd[i * c_out * p..(i + 1) * c_out * p];
                    im2col(&xv[i * c_in * h * wd..], c_in, h, wd, k, *stride, *pad, ho, wo, &mut cols);
                    T::gemm(c_out, p, ck, gyi, false, &cols, true, T::one(), &mut gw);
                    T::gemm(ck, c_out, p, wv, true, gyi, false, T::zero(), &mut dcols);
                    col2im(
                        &dcols,
                        c_in,
                        h,
                        wd,
                        k,
                        *stride,
                        *pad,
                        ho,
                        wo,
                        &mut gx[i * c_in * h * wd..(i + 1) * c_in * h * wd],
                    );
                }
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); c_out];
                    for (r, row) in gyd.chunks(p).enumerate() {
                        gb[r % c_out] += row.iter().copied().sum::<T>();
                    }
                    acc(grads, *b, TensorGrid::from_vec(&[c_out], gb));
                }
                acc(grads, *w, TensorGrid::from_vec(self.shape(*w), gw));
                acc(grads, *x, TensorGrid::from_vec(self.shape(*x), gx));
            }
            Op::DepthwiseConv2d { x, w, b, pad } => {
                let (n, c, h, wd) = dims4(self.shape(*x), "depthwise_conv2d");
                let k = self.shape(*w)[2];
                let (_, _, ho, wo) = dims4(gy.shape(), "depthwise_conv2d");
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gx = vec![T::zero(); xv.len()];
                let mut gw = vec![T::zero(); wv.len()];
                let mut gb = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let poff = (i * c + ch) * h * wd;
                        let goff = (i * c + ch) * ho * wo;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = gyd[goff + oy * wo + ox];
                                gb[ch] += g;
                                for ki in 0..k {
                                    let iy = (oy + ki) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..k {
                                        let ix = (ox + kj) as isize - *pad as isize;
                                        if ix >= 0 && ix < wd as isize {
                                            let xi = poff + iy as usize * wd + ix as usize;
                                            gw[(ch * k + ki) * k + kj] += g * xv[xi];
                                            gx[xi] += g * wv[(ch * k + ki) * k + kj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    acc(grads, *b, TensorGrid::from_vec(&[c], gb));
                }
                acc(grads, *w, TensorGrid::from_vec(self.shape(*w), gw));
                acc(grads, *x, TensorGrid::from_vec(self.shape(*x), gx));
            }
            Op::Linear { x, w, b } => {
                let (d_out, d_in) = (self.shape(*w)[0], self.shape(*w)[1]);
                let xv = self.value(*x).data();
                let rows = xv.len() / d_in;
                let mut gx = vec![T::zero(); xv.len()];
                T::gemm(rows, d_out, d_in, gyd, false, self.value(*w).data(), false, T::zero(), &mut gx);
                let mut gw = vec![T::zero(); d_out * d_in];
                T::gemm(d_out, rows, d_in, gyd, true, xv, false, T::zero(), &mut gw);
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); d_out];
                    for row in gyd.chunks(d_out) {
                        for (a, &g) in gb.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    acc(grads, *b, TensorGrid::from_vec(&[d_out], gb));
                }
                acc(grads, *w, TensorGrid::from_vec(&[d_out, d_in], gw));
                acc(grads, *x, TensorGrid::from_vec(self.shape(*x), gx));
            }
            Op::LayerNorm { x, g, b, xhat, rstd } => {
                let d = self.value(*x).last_dim();
                let gv = self.value(*g).data();
                let dt = T::from_usize(d).unwrap();
                let mut gx = vec![T::zero(); xhat.len()];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let mut dxh = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for j in 0..d {
                        let i = r * d + j;
                        gg[j] += gyd[i] * xhat[i];
                        gb[j] += gyd[i];
                        dxh[j] = gyd[i] * gv[j];
                        s1 += dxh[j];
                        s2 += dxh[j] * xhat[i];
                    }
                    for j in 0..d {
                        let i = r * d + j;
                        gx[i] = rs / dt * (dt * dxh[j] - s1 - xhat[i] * s2);
                    }
                }
                acc(grads, *g, TensorGrid::from_vec(&[d], gg));
                acc(grads, *b, TensorGrid::from_vec(&[d], gb));
                acc(grads, *x, TensorGrid::from_vec(self.shape(*x), gx));
            }
            Op::GroupNorm { x, g, b, groups, xhat, rstd } => {
                let (_, c, h, w) = dims4(self.shape(*x), "group_norm");
                let hw = h * w;
                let per = c / groups * hw;
                let gv = self.value(*g).data();
                let mt = T::from_usize(per).unwrap();
                let mut gx = vec![T::zero(); xhat.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for (gi, &rs) in rstd.iter().enumerate() {
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for j in 0..per {
                        let idx = gi * per + j;
                        let ch = (idx / hw) % c;
                        gg[ch] += gyd[idx] * xhat[idx];
                        gb[ch] += gyd[idx];
                        let dxh = gyd[idx] * gv[ch];
                        s1 += dxh;
                        s2 += dxh * xhat[idx];
                    }
                    for j in 0..per {
                        let idx = gi * per + j;
                        let ch = (idx / hw) % c;
                        let dxh = gyd[idx] * gv[ch];
                        gx[idx] = rs / mt * (mt * dxh - s1 - xhat[idx] * s2);
                    }
                }
                acc(grads, *g, TensorGrid::from_vec(&[c], gg));
                acc(grads, *b, TensorGrid::from_vec(&[c], gb));
                acc(grads, *x, TensorGrid::from_vec(self.shape(*x), gx));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let g = gyd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                acc(grads, *x, TensorGrid::from_vec(gy.shape(), g));
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let g = gyd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (T::one() - s))
                    })
                    .collect();
                acc(grads, *x, TensorGrid::from_vec(gy.shape(), g));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let g = gyd.iter().zip(xv).map(|(&g, &v)| g * gelu(v).1).collect();
                acc(grads, *x, TensorGrid::from_vec(gy.shape(), g));
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let g = gyd.iter().zip(xv).map(|(&g, &v)| g * sigmoid(v)).collect();
                acc(grads, *x, TensorGrid::from_vec(gy.shape(), g));
            }
            Op::Exp(x) => {
                let g = gyd.iter().zip(node.value.data()).map(|(&g, &y)| g * y).collect();
                acc(grads, *x, TensorGrid::from_vec(gy.shape(), g));
            }
            Op::MaxPool2x { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (&src, &g) in argmax.iter().zip(gyd) {
                    gx[src as usize] += g;
                }
                acc(grads, *x, TensorGrid::from_vec(self.shape(*x), gx));
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = dims4(self.shape(*x), "upsample2x");
                let (ho, wo) = (2 * h, 2 * w);
                let ty = upsample_taps(ho, h);
                let tx = upsample_taps(wo, w);
                let mut gx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let g = &gyd[plane * ho * wo..][..ho * wo];
                    let dst = &mut gx[plane * h * w..][..h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        let (ly, my) = (T::lit(ly), T::lit(1.0 - ly));
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let (lx, mx) = (T::lit(lx), T::lit(1.0 - lx));
                            let gv = g[oy * wo + ox];
                            dst[y0 * w + x0] += gv * my * mx;
                            dst[y0 * w + x1] += gv * my * lx;
                            dst[y1 * w + x0] += gv * ly * mx;
                            dst[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                acc(grads, *x, TensorGrid::from_vec(&[n, c, h, w], gx));
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = dims4(self.shape(*a), "concat_channels");
                let cb = self.shape(*b)[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    ga.extend_from_slice(&gyd[base..base + ca * hw]);
                    gb.extend_from_slice(&gyd[base + ca * hw..base + (ca + cb) * hw]);
                }
                acc(grads, *a, TensorGrid::from_vec(&[n, ca, h, w], ga));
                acc(grads, *b, TensorGrid::from_vec(&[n, cb, h, w], gb));
            }
            Op::Gather { x, index } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (&src, &g) in index.iter().zip(gyd) {
                    gx[src as usize] += g;
                }
                acc(grads, *x, TensorGrid::from_vec(self.shape(*x), gx));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (g, l, d) = dims3(self.shape(*q), "attention");
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![T::zero(); qv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                let mut gv = vec![T::zero(); vv.len()];
                let mut dp = vec![T::zero(); l];
                for gi in 0..g {
                    let base = gi * l * d;
                    for hd in 0..*heads {
                        let off = hd * dh;
                        let p = &probs[(gi * heads + hd) * l * l..][..l * l];
                        for i in 0..l {
                            let go = &gyd[base + i * d + off..][..dh];
                            let row = &p[i * l..(i + 1) * l];
                            let mut dot = T::zero();
                            for j in 0..l {
                                let vj = &vv[base + j * d + off..][..dh];
                                dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                                dot += dp[j] * row[j];
                                let gvj = &mut gv[base + j * d + off..][..dh];
                                for (a, &b) in gvj.iter_mut().zip(go) {
                                    *a += row[j] * b;
                                }
                            }
                            for j in 0..l {
                                let ds = row[j] * (dp[j] - dot) * scale;
                                for e in 0..dh {
                                    gq[base + i * d + off + e] += ds * kv[base + j * d + off + e];
                                    gk[base + j * d + off + e] += ds * qv[base + i * d + off + e];
                                }
                            }
                        }
                    }
                }
                acc(grads, *q, TensorGrid::from_vec(&[g, l, d], gq));
                acc(grads, *k, TensorGrid::from_vec(&[g, l, d], gk));
                acc(grads, *v, TensorGrid::from_vec(&[g, l, d], gv));
            }
            Op::SelectiveScan { x, delta, a, b, c, d, states } => {
                let (s, l, di) = dims3(self.shape(*x), "selective_scan");
                let n = self.shape(*a)[1];
                let (xv, dv, av) = (self.value(*x).data(), self.value(*delta).data(), self.value(*a).data());
                let (bv, cv, skip) = (self.value(*b).data(), self.value(*c).data(), self.value(*d).data());
                let mut gx = vec![T::zero(); xv.len()];
                let mut gdelta = vec![T::zero(); dv.len()];
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                let mut gc = vec![T::zero(); cv.len()];
                let mut gd = vec![T::zero(); di];
                let mut dh = vec![T::zero(); di * n];
                for si in 0..s {
                    dh.iter_mut().for_each(|v| *v = T::zero());
                    for t in (0..l).rev() {
                        let row = (si * l + t) * di;
                        let bc = (si * l + t) * n;
                        let h_t = &states[(si * l + t) * di * n..][..di * n];
                        for i in 0..di {
                            let (xi, dti, gyi) = (xv[row + i], dv[row + i], gyd[row + i]);
                            gd[i] += gyi * xi;
                            gx[row + i] += gyi * skip[i];
                            for j in 0..n {
                                let hij = h_t[i * n + j];
                                gc[bc + j] += gyi * hij;
                                let dhij = dh[i * n + j] + gyi * cv[bc + j];
                                let aij = av[i * n + j];
                                let decay = (dti * aij).exp();
                                let h_prev = if t > 0 {
                                    states[((si * l + t - 1) * di + i) * n + j]
                                } else {
                                    T::zero()
                                };
                                let ddecay = dhij * h_prev * decay;
                                gdelta[row + i] += ddecay * aij + dhij * bv[bc + j] * xi;
                                ga[i * n + j] += ddecay * dti;
                                gb[bc + j] += dhij * dti * xi;
                                gx[row + i] += dhij * dti * bv[bc + j];
                                dh[i * n + j] = dhij * decay;
                            }
                        }
                    }
                }
                acc(grads, *x, TensorGrid::from_vec(&[s, l, di], gx));
                acc(grads, *delta, TensorGrid::from_vec(&[s, l, di], gdelta));
                acc(grads, *a, TensorGrid::from_vec(&[di, n], ga));
                acc(grads, *b, TensorGrid::from_vec(&[s, l, n], gb));
                acc(grads, *c, TensorGrid::from_vec(&[s, l, n], gc));
                acc(grads, *d, TensorGrid::from_vec(&[di], gd));
            }
            Op::SoftmaxChannels(x) => {
                let (n, k, h, w) = dims4(self.shape(*x), "softmax_channels");
                let hw = h * w;
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for i in 0..n {
                    let base = i * k * hw;
                    for p in 0..hw {
                        let dot: T = (0..k).map(|c| y[base + c * hw + p] * gyd[base + c * hw + p]).sum();
                        for c in 0..k {
                            let idx = base + c * hw + p;
                            gx[idx] = y[idx] * (gyd[idx] - dot);
                        }
                    }
                }
                acc(grads, *x, TensorGrid::from_vec(&[n, k, h, w], gx));
            }
            Op::Pce { probs, labels, norm } => {
                let (_, k, h, w) = dims4(self.shape(*probs), "pce");
                let hw = h * w;
                let pv = self.value(*probs).data();
                let mut gp = vec![T::zero(); pv.len()];
                let scale = gyd[0] * *norm;
                for (idx, &lab) in labels.iter().enumerate() {
                    if lab == UNLABELED {
                        continue;
                    }
                    let (i, p) = (idx / hw, idx % hw);
                    let at = (i * k + lab as usize) * hw + p;
                    if pv[at] > T::lit(LOG_CLAMP) {
                        gp[at] -= scale / pv[at];
                    }
                }
                acc(grads, *probs, TensorGrid::from_vec(self.shape(*probs), gp));
            }
            Op::Dice { probs, target } => {
                let (n, k, h, w) = dims4(self.shape(*probs), "dice");
                let hw = h * w;
                let (pv, gv) = (self.value(*probs).data(), target.data());
                let eps = T::lit(DICE_EPS);
                let two = T::lit(2.0);
                let scale = gyd[0] / T::from_usize(k).unwrap();
                let mut gp = vec![T::zero(); pv.len()];
                for c in 0..k {
                    let (mut inter, mut ps, mut gs) = (T::zero(), T::zero(), T::zero());
                    for i in 0..n {
                        let off = (i * k + c) * hw;
                        for p in off..off + hw {
                            inter += pv[p] * gv[p];
                            ps += pv[p];
                            gs += gv[p];
                        }
                    }
                    let den = ps + gs + eps;
                    let num = two * inter + eps;
                    for i in 0..n {
                        let off = (i * k + c) * hw;
                        for p in off..off + hw {
                            gp[p] = -scale * (two * gv[p] * den - num) / (den * den);
                        }
                    }
                }
                acc(grads, *probs, TensorGrid::from_vec(self.shape(*probs), gp));
            }
            Op::WeightedSum { x, weights } => {
                let g = weights.map(|w| w * gyd[0]);
                acc(grads, *x, g);
            }
        }
    }
}
