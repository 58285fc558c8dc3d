//! Building blocks of the three backbones: convolutional stages, shifted-window
//! transformer pairs, visual state-space pairs, and token resolution changes.
//!
//! Blocks only hold [`ParamId`]s; values live in the network's [`ParamStore`], so the same
//! block runs in `f32` for training and `f64` for gradient checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WmuError};
use crate::layout::{self, ScanOrder};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Scalar, TensorGrid};

/// Hyperparameters shared by token blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub dim: usize,
    pub window: usize,
    pub d_state: usize,
    pub heads: usize,
}

impl BlockConfig {
    pub fn validate(&self, side: usize) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(WmuError::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.window == 0 || side % self.window != 0 {
            return Err(WmuError::Config(format!(
                "window {} does not divide feature-map side {side}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Seeded parameter factory writing into a [`ParamStore`].
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.random_range(-bound..=bound)))
            .collect();
        self.store.add(name, TensorGrid::from_vec(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, TensorGrid::full(shape, T::lit(value)))
    }

    pub fn tensor(&mut self, name: &str, value: TensorGrid<T>) -> ParamId {
        self.store.add(name, value)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = init.uniform(&format!("{name}.weight"), &[d_out, d_in], bound);
        let b = bias.then(|| init.constant(&format!("{name}.bias"), &[d_out], 0.0));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Var {
        let w = t.param(s, self.w);
        let b = self.b.map(|b| t.param(s, b));
        t.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize) -> Self {
        Self {
            g: init.constant(&format!("{name}.weight"), &[d], 1.0),
            b: init.constant(&format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Var {
        let (g, b) = (t.param(s, self.g), t.param(s, self.b));
        t.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv {
    /// He-uniform kernel, zero bias, "same" padding.
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        Self {
            w: init.uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], bound),
            b: init.constant(&format!("{name}.bias"), &[c_out], 0.0),
            pad: k / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Var {
        let (w, b) = (t.param(s, self.w), t.param(s, self.b));
        t.conv2d(x, w, Some(b), 1, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub g: ParamId,
    pub b: ParamId,
    pub groups: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl GroupNorm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c: usize) -> Self {
        Self {
            g: init.constant(&format!("{name}.weight"), &[c], 1.0),
            b: init.constant(&format!("{name}.bias"), &[c], 0.0),
            groups: gcd(c, 8),
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Var {
        let (g, b) = (t.param(s, self.g), t.param(s, self.b));
        t.group_norm(x, g, b, self.groups)
    }
}

/// Two `conv3x3 -> group norm -> ReLU` stages.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    stages: [(Conv, GroupNorm); 2],
}

impl ConvBlock {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c_in: usize, c_out: usize) -> Self {
        let s1 = (
            Conv::new(init, &format!("{name}.conv1"), c_in, c_out, 3),
            GroupNorm::new(init, &format!("{name}.norm1"), c_out),
        );
        let s2 = (
            Conv::new(init, &format!("{name}.conv2"), c_out, c_out, 3),
            GroupNorm::new(init, &format!("{name}.norm2"), c_out),
        );
        Self { stages: [s1, s2] }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, mut x: Var) -> Var {
        for (conv, norm) in &self.stages {
            x = conv.forward(t, s, x);
            x = norm.forward(t, s, x);
            x = t.relu(x);
        }
        x
    }
}

/// Multi-head self-attention inside windows with q/k/v/o projections.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl WindowAttention {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(init, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(init, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(init, &format!("{name}.o"), dim, dim, true),
            heads,
        }
    }

    /// `tokens` is `(num_windows, window_len, dim)`.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, tokens: Var) -> Var {
        let q = self.q.forward(t, s, tokens);
        let k = self.k.forward(t, s, tokens);
        let v = self.v.forward(t, s, tokens);
        let a = t.attention(q, k, v, self.heads);
        self.o.forward(t, s, a)
    }
}

/// Pre-norm transformer block over (optionally shifted) windows.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shifted: bool,
}

const MLP_RATIO: usize = 4;

impl SwinBlock {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, cfg: &BlockConfig, shifted: bool) -> Self {
        Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), cfg.dim),
            attn: WindowAttention::new(init, &format!("{name}.attn"), cfg.dim, cfg.heads),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), cfg.dim),
            fc1: Linear::new(init, &format!("{name}.fc1"), cfg.dim, MLP_RATIO * cfg.dim, true),
            fc2: Linear::new(init, &format!("{name}.fc2"), MLP_RATIO * cfg.dim, cfg.dim, true),
            shifted,
        }
    }

    /// `x` is `(N, side*side, dim)`.
    pub fn forward<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        x: Var,
        side: usize,
        window: usize,
    ) -> Var {
        let (n, l, c) = {
            let sh = t.shape(x);
            (sh[0], sh[1], sh[2])
        };
        assert_eq!(l, side * side, "swin block: token count vs map side");
        // No shift when a single window covers the map.
        let shift = if self.shifted && window < side { window / 2 } else { 0 };
        let part = layout::window_partition(n, side, side, c, window, shift);
        let unpart = layout::invert(&part);
        let h = self.norm1.forward(t, s, x);
        let win = t.gather(h, part, &[n * (side / window).pow(2), window * window, c]);
        let a = self.attn.forward(t, s, win);
        let a = t.gather(a, unpart, &[n, l, c]);
        let x = t.add(x, a);
        let h = self.norm2.forward(t, s, x);
        let h = self.fc1.forward(t, s, h);
        let h = t.gelu(h);
        let h = self.fc2.forward(t, s, h);
        t.add(x, h)
    }
}

/// Regular-window block followed by a shifted-window block.
#[derive(Clone, Debug)]
pub struct SwinBlockPair {
    pub blocks: [SwinBlock; 2],
    pub window: usize,
}

impl SwinBlockPair {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, cfg: &BlockConfig) -> Self {
        Self {
            blocks: [
                SwinBlock::new(init, &format!("{name}.0"), cfg, false),
                SwinBlock::new(init, &format!("{name}.1"), cfg, true),
            ],
            window: cfg.window,
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var, side: usize) -> Var {
        assert!(side % self.window == 0, "swin pair: window {} does not divide side {side}", self.window);
        let x = self.blocks[0].forward(t, s, x, side, self.window);
        self.blocks[1].forward(t, s, x, side, self.window)
    }
}

/// Parameters of one scan direction of the 2-D selective scan.
#[derive(Clone, Debug)]
pub struct ScanBranch {
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d: ParamId,
    pub dt_rank: usize,
    pub d_state: usize,
}

impl ScanBranch {
    fn new<T: Scalar>(init: &mut Init<T>, name: &str, d_inner: usize, d_state: usize, dt_rank: usize) -> Self {
        let x_proj = Linear::new(init, &format!("{name}.x_proj"), d_inner, dt_rank + 2 * d_state, false);
        let w = init.uniform(&format!("{name}.dt_proj.weight"), &[d_inner, dt_rank], 1.0 / (dt_rank as f64).sqrt());
        // Initial step sizes log-uniform in [1e-3, 1e-1], stored through inverse softplus.
        let bias: Vec<T> = (0..d_inner)
            .map(|_| {
                let dt = (init.rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                T::lit(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let b = init.tensor(&format!("{name}.dt_proj.bias"), TensorGrid::from_vec(&[d_inner], bias));
        let a_log: Vec<T> = (0..d_inner)
            .flat_map(|_| (1..=d_state).map(|j| T::lit((j as f64).ln())))
            .collect();
        let a_log = init.tensor(&format!("{name}.a_log"), TensorGrid::from_vec(&[d_inner, d_state], a_log));
        let d = init.constant(&format!("{name}.d"), &[d_inner], 1.0);
        Self {
            x_proj,
            dt_proj: Linear { w, b: Some(b) },
            a_log,
            d,
            dt_rank,
            d_state,
        }
    }

    /// Runs the selective scan over `xc` (`(N, side*side, d_inner)`) in `order` and returns
    /// the outputs mapped back to row-major token positions.
    pub fn forward<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        s: &ParamStore<T>,
        xc: Var,
        side: usize,
        order: ScanOrder,
    ) -> Var {
        let (n, l, di) = {
            let sh = t.shape(xc);
            (sh[0], sh[1], sh[2])
        };
        let perm = order.gather_index(n, side, side, di);
        let unperm = layout::invert(&perm);
        let seq = t.gather(xc, perm, &[n, l, di]);
        let proj = self.x_proj.forward(t, s, seq);
        let width = self.dt_rank + 2 * self.d_state;
        let rows = n * l;
        let dt_in = t.gather(proj, layout::slice_last(rows, width, 0, self.dt_rank), &[n, l, self.dt_rank]);
        let b = t.gather(proj, layout::slice_last(rows, width, self.dt_rank, self.d_state), &[n, l, self.d_state]);
        let c = t.gather(
            proj,
            layout::slice_last(rows, width, self.dt_rank + self.d_state, self.d_state),
            &[n, l, self.d_state],
        );
        let dt = self.dt_proj.forward(t, s, dt_in);
        let delta = t.softplus(dt);
        let a_log = t.param(s, self.a_log);
        let a = t.exp(a_log);
        let a = t.scale(a, -T::one());
        let d = t.param(s, self.d);
        let y = t.selective_scan(seq, delta, a, b, c, d);
        t.gather(y, unperm, &[n, l, di])
    }
}

/// Visual state-space block: norm, gated 4-direction selective scan, residual.
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub branches: Vec<ScanBranch>,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
    pub d_inner: usize,
}

impl VssBlock {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, cfg: &BlockConfig) -> Self {
        let d_inner = 2 * cfg.dim;
        let dt_rank = cfg.dim.div_ceil(16);
        Self {
            norm: LayerNorm::new(init, &format!("{name}.norm"), cfg.dim),
            in_proj: Linear::new(init, &format!("{name}.in_proj"), cfg.dim, 2 * d_inner, false),
            dw_w: init.uniform(&format!("{name}.dwconv.weight"), &[d_inner, 1, 3, 3], 1.0 / 3.0),
            dw_b: init.constant(&format!("{name}.dwconv.bias"), &[d_inner], 0.0),
            branches: ScanOrder::ALL
                .iter()
                .enumerate()
                .map(|(k, _)| ScanBranch::new(init, &format!("{name}.scan{k}"), d_inner, cfg.d_state, dt_rank))
                .collect(),
            out_norm: LayerNorm::new(init, &format!("{name}.out_norm"), d_inner),
            out_proj: Linear::new(init, &format!("{name}.out_proj"), d_inner, cfg.dim, false),
            d_inner,
        }
    }

    /// Depthwise 3x3 conv + SiLU on the token map: the scan input.
    pub fn scan_input<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, xi: Var, side: usize) -> Var {
        let (n, l) = (t.shape(xi)[0], t.shape(xi)[1]);
        let di = self.d_inner;
        let map = t.gather(xi, layout::tokens_to_nchw(n, di, side, side), &[n, di, side, side]);
        let (w, b) = (t.param(s, self.dw_w), t.param(s, self.dw_b));
        let map = t.depthwise_conv2d(map, w, Some(b), 1);
        let map = t.silu(map);
        t.gather(map, layout::nchw_to_tokens(n, di, side, side), &[n, l, di])
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var, side: usize) -> Var {
        let (n, l) = (t.shape(x)[0], t.shape(x)[1]);
        assert_eq!(l, side * side, "vss block: token count vs map side");
        let di = self.d_inner;
        let h = self.norm.forward(t, s, x);
        let xz = self.in_proj.forward(t, s, h);
        let rows = n * l;
        let xi = t.gather(xz, layout::slice_last(rows, 2 * di, 0, di), &[n, l, di]);
        let z = t.gather(xz, layout::slice_last(rows, 2 * di, di, di), &[n, l, di]);
        let xc = self.scan_input(t, s, xi, side);
        let mut y: Option<Var> = None;
        for (branch, order) in self.branches.iter().zip(ScanOrder::ALL) {
            let yk = branch.forward(t, s, xc, side, order);
            y = Some(match y {
                None => yk,
                Some(acc) => t.add(acc, yk),
            });
        }
        let y = self.out_norm.forward(t, s, y.expect("four branches"));
        let gate = t.silu(z);
        let y = t.mul(y, gate);
        let y = self.out_proj.forward(t, s, y);
        t.add(x, y)
    }
}

#[derive(Clone, Debug)]
pub struct VssBlockPair {
    pub blocks: [VssBlock; 2],
}

impl VssBlockPair {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, cfg: &BlockConfig) -> Self {
        Self {
            blocks: [
                VssBlock::new(init, &format!("{name}.0"), cfg),
                VssBlock::new(init, &format!("{name}.1"), cfg),
            ],
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var, side: usize) -> Var {
        let x = self.blocks[0].forward(t, s, x, side);
        self.blocks[1].forward(t, s, x, side)
    }
}

/// Non-overlapping patch flattening, linear projection and norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, patch: usize, dim: usize) -> Self {
        Self {
            proj: Linear::new(init, &format!("{name}.proj"), patch * patch, dim, true),
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim),
            patch,
        }
    }

    /// `image` is `(N, 1, H, W)`; returns `(N, (H/p)*(W/p), dim)`.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, image: Var) -> Var {
        let (n, c, h, w) = {
            let sh = t.shape(image);
            assert_eq!(sh.len(), 4, "patch_embed: expected (N,1,H,W)");
            (sh[0], sh[1], sh[2], sh[3])
        };
        assert_eq!(c, 1, "patch_embed: single-channel images only");
        assert!(h % self.patch == 0 && w % self.patch == 0, "patch_embed: {h}x{w} not divisible by patch {}", self.patch);
        let p = self.patch;
        let patches = t.gather(image, layout::patchify(n, h, w, p), &[n, (h / p) * (w / p), p * p]);
        let x = self.proj.forward(t, s, patches);
        self.norm.forward(t, s, x)
    }
}

/// 2x2 neighbourhood concatenation followed by norm and a `4C -> 2C` projection.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(init, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(init, &format!("{name}.reduction"), 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var, side: usize) -> Var {
        let (n, l, c) = {
            let sh = t.shape(x);
            (sh[0], sh[1], sh[2])
        };
        assert_eq!(l, side * side, "patch_merge: token count vs map side");
        assert!(side % 2 == 0, "patch_merge: odd map side {side}");
        let cat = t.gather(x, layout::merge_2x2(n, side, side, c), &[n, l / 4, 4 * c]);
        let cat = self.norm.forward(t, s, cat);
        self.reduction.forward(t, s, cat)
    }
}

/// Linear `C -> f*f*C_out` followed by sub-pixel unfolding into an `f`-times larger map.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub expand: Linear,
    pub norm: LayerNorm,
    pub factor: usize,
    pub out_dim: usize,
}

impl PatchExpand {
    /// The 2x expansion that halves channels.
    pub fn halving<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize) -> Self {
        assert!(dim % 2 == 0, "patch_expand: odd dim {dim}");
        Self::new(init, name, dim, 2, dim / 2)
    }

    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize, factor: usize, out_dim: usize) -> Self {
        Self {
            expand: Linear::new(init, &format!("{name}.expand"), dim, factor * factor * out_dim, false),
            norm: LayerNorm::new(init, &format!("{name}.norm"), out_dim),
            factor,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var, side: usize) -> Var {
        let n = t.shape(x)[0];
        assert_eq!(t.shape(x)[1], side * side, "patch_expand: token count vs map side");
        let f = self.factor;
        let e = self.expand.forward(t, s, x);
        let idx = layout::expand_subpixels(n, side, side, f, self.out_dim);
        let up = t.gather(e, idx, &[n, side * side * f * f, self.out_dim]);
        self.norm.forward(t, s, up)
    }
}
