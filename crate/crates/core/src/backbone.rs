//! The three segmentation networks behind one interface: a convolutional U-Net, a
//! shifted-window transformer U-Net and a visual state-space U-Net. Each maps an
//! `(N, 1, H, W)` image batch to `(N, K, H, W)` logits.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    BlockConfig, Conv, ConvBlock, Init, Linear, PatchEmbed, PatchExpand, PatchMerge,
    SwinBlockPair, VssBlockPair,
};
use crate::error::{Result, WmuError};
use crate::layout;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Scalar, TensorGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Cnn,
    Attn,
    Ssm,
}

impl BackboneKind {
    pub fn code(self) -> u8 {
        match self {
            BackboneKind::Cnn => 0,
            BackboneKind::Attn => 1,
            BackboneKind::Ssm => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BackboneKind::Cnn),
            1 => Some(BackboneKind::Attn),
            2 => Some(BackboneKind::Ssm),
            _ => None,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Cnn => "cnn",
            BackboneKind::Attn => "attn",
            BackboneKind::Ssm => "ssm",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = WmuError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cnn" | "unet" => Ok(BackboneKind::Cnn),
            "attn" | "swin" | "vit" => Ok(BackboneKind::Attn),
            "ssm" | "mamba" => Ok(BackboneKind::Ssm),
            other => Err(WmuError::Config(format!(
                "unknown backbone {other:?} (expected cnn, attn or ssm)"
            ))),
        }
    }
}

/// Parses a comma-separated backbone list such as `cnn,attn,ssm`.
pub fn parse_backbones(s: &str) -> Result<Vec<BackboneKind>> {
    s.split(',').map(str::parse).collect()
}

pub const CNN_LEVELS: usize = 4;
pub const TOKEN_LEVELS: usize = 3;

/// Architecture hyperparameters shared by all kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub width: usize,
    pub patch: usize,
    pub window: usize,
    pub d_state: usize,
}

impl ArchConfig {
    pub fn new(image_size: usize, num_classes: usize, width: usize) -> Self {
        Self {
            image_size,
            num_classes,
            width,
            patch: 4,
            window: 4,
            d_state: 8,
        }
    }

    fn validate(&self, kind: BackboneKind) -> Result<()> {
        if self.num_classes < 2 || self.width == 0 {
            return Err(WmuError::Config(format!(
                "need >= 2 classes and positive width, got {} / {}",
                self.num_classes, self.width
            )));
        }
        let need = match kind {
            BackboneKind::Cnn => 1 << CNN_LEVELS,
            BackboneKind::Attn | BackboneKind::Ssm => self.patch << TOKEN_LEVELS,
        };
        if self.image_size == 0 || self.image_size % need != 0 {
            return Err(WmuError::Config(format!(
                "image size {} must be divisible by {need} for the {kind} backbone",
                self.image_size
            )));
        }
        if kind != BackboneKind::Cnn && self.width % 2 != 0 {
            return Err(WmuError::Config(format!(
                "token backbones need an even width, got {}",
                self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct UNet {
    enc: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
    head: Conv,
}

impl UNet {
    fn new<T: Scalar>(init: &mut Init<T>, arch: &ArchConfig) -> Self {
        let w = arch.width;
        let widths: Vec<usize> = (0..=CNN_LEVELS).map(|l| w << l).collect();
        let mut enc = vec![ConvBlock::new(init, "enc0", 1, widths[0])];
        for l in 1..=CNN_LEVELS {
            enc.push(ConvBlock::new(init, &format!("enc{l}"), widths[l - 1], widths[l]));
        }
        let dec = (0..CNN_LEVELS)
            .rev()
            .map(|l| ConvBlock::new(init, &format!("dec{l}"), widths[l + 1] + widths[l], widths[l]))
            .collect();
        let head = Conv::new(init, "head", widths[0], arch.num_classes, 1);
        Self { enc, dec, head }
    }

    fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Var {
        let mut skips = Vec::with_capacity(CNN_LEVELS);
        let mut h = self.enc[0].forward(t, s, x);
        for block in &self.enc[1..] {
            skips.push(h);
            let p = t.maxpool2x(h);
            h = block.forward(t, s, p);
        }
        for block in &self.dec {
            let up = t.upsample2x(h);
            let skip = skips.pop().expect("one skip per level");
            let cat = t.concat_channels(up, skip);
            h = block.forward(t, s, cat);
        }
        self.head.forward(t, s, h)
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Swin(SwinBlockPair),
    Vss(VssBlockPair),
}

impl Stage {
    fn new<T: Scalar>(init: &mut Init<T>, kind: BackboneKind, name: &str, cfg: &BlockConfig) -> Self {
        match kind {
            BackboneKind::Attn => Stage::Swin(SwinBlockPair::new(init, name, cfg)),
            _ => Stage::Vss(VssBlockPair::new(init, name, cfg)),
        }
    }

    fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var, side: usize) -> Var {
        match self {
            Stage::Swin(p) => p.forward(t, s, x, side),
            Stage::Vss(p) => p.forward(t, s, x, side),
        }
    }
}

#[derive(Clone, Debug)]
struct TokenUNet {
    embed: PatchEmbed,
    enc: Vec<(Stage, PatchMerge)>,
    bottleneck: Stage,
    dec: Vec<(PatchExpand, Stage)>,
    final_expand: PatchExpand,
    head: Linear,
}

impl TokenUNet {
    fn stage_cfg(arch: &ArchConfig, level: usize) -> BlockConfig {
        let dim = arch.width << level;
        let side = arch.image_size / arch.patch >> level;
        BlockConfig {
            dim,
            window: arch.window.min(side),
            d_state: arch.d_state,
            heads: (dim / 8).max(1),
        }
    }

    fn new<T: Scalar>(init: &mut Init<T>, kind: BackboneKind, arch: &ArchConfig) -> Self {
        let embed = PatchEmbed::new(init, "embed", arch.patch, arch.width);
        let enc = (0..TOKEN_LEVELS)
            .map(|l| {
                let cfg = Self::stage_cfg(arch, l);
                (
                    Stage::new(init, kind, &format!("enc{l}"), &cfg),
                    PatchMerge::new(init, &format!("merge{l}"), cfg.dim),
                )
            })
            .collect();
        let bottleneck = Stage::new(init, kind, "bottleneck", &Self::stage_cfg(arch, TOKEN_LEVELS));
        let dec = (0..TOKEN_LEVELS)
            .rev()
            .map(|l| {
                let cfg = Self::stage_cfg(arch, l);
                (
                    PatchExpand::halving(init, &format!("expand{l}"), 2 * cfg.dim),
                    Stage::new(init, kind, &format!("dec{l}"), &cfg),
                )
            })
            .collect();
        let final_expand = PatchExpand::new(init, "final_expand", arch.width, arch.patch, arch.width);
        let head = Linear::new(init, "head", arch.width, arch.num_classes, true);
        Self {
            embed,
            enc,
            bottleneck,
            dec,
            final_expand,
            head,
        }
    }

    fn forward<T: Scalar>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var, arch: &ArchConfig) -> Var {
        let n = t.shape(x)[0];
        let mut side = arch.image_size / arch.patch;
        let mut h = self.embed.forward(t, s, x);
        let mut skips = Vec::with_capacity(TOKEN_LEVELS);
        for (stage, merge) in &self.enc {
            h = stage.forward(t, s, h, side);
            skips.push(h);
            h = merge.forward(t, s, h, side);
            side /= 2;
        }
        h = self.bottleneck.forward(t, s, h, side);
        for (expand, stage) in &self.dec {
            h = expand.forward(t, s, h, side);
            side *= 2;
            let skip = skips.pop().expect("one skip per level");
            h = t.add(h, skip);
            h = stage.forward(t, s, h, side);
        }
        h = self.final_expand.forward(t, s, h, side);
        side *= arch.patch;
        let logits = self.head.forward(t, s, h);
        let k = arch.num_classes;
        t.gather(logits, layout::tokens_to_nchw(n, k, side, side), &[n, k, side, side])
    }
}

#[derive(Clone, Debug)]
enum Body {
    Cnn(UNet),
    Token(TokenUNet),
}

/// One segmentation network with its parameters.
#[derive(Clone, Debug)]
pub struct SegNetwork<T = f32> {
    pub kind: BackboneKind,
    pub arch: ArchConfig,
    pub params: ParamStore<T>,
    body: Body,
}

impl<T: Scalar> SegNetwork<T> {
    /// Builds a freshly initialised network; identical seeds give identical parameters.
    pub fn build(kind: BackboneKind, arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate(kind)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let body = match kind {
            BackboneKind::Cnn => Body::Cnn(UNet::new(&mut init, &arch)),
            _ => Body::Token(TokenUNet::new(&mut init, kind, &arch)),
        };
        Ok(Self {
            kind,
            arch,
            params,
            body,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.arch.image_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(WmuError::Shape(format!(
                "{} network expects (N, 1, {s}, {s}) input, got {shape:?}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` using `params` (normally `self.params`).
    pub fn forward_with(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        Ok(match &self.body {
            Body::Cnn(u) => u.forward(tape, params, x),
            Body::Token(u) => u.forward(tape, params, x, &self.arch),
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.forward_with(tape, &self.params, x)
    }

    /// Logits for a batch without keeping the tape.
    pub fn predict_logits(&self, batch: &TensorGrid<T>) -> Result<TensorGrid<T>> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> SegNetwork<U> {
        SegNetwork {
            kind: self.kind,
            arch: self.arch,
            params: self.params.cast(),
            body: self.body.clone(),
        }
    }
}
