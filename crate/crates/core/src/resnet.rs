//! CIFAR-style residual networks with selectable shortcut modes.
//!
//! Layout: a 3×3 stem (3→16), three stages of `n` basic blocks at widths
//! 16/32/64, global average pooling and a fully connected classifier, with
//! `depth = 6n + 2`. The first block of stages 2 and 3 halves the spatial
//! extent and carries the configured shortcut; every other block uses a
//! plain identity shortcut.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::hexconv::{subsample2, subsample2_backward};
use crate::layers::{BatchNorm2d, Conv2d, GlobalAvgPool, HexConv2d, Layer, Linear, Mode, Param, Relu};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const STAGE_WIDTHS: [usize; 3] = [16, 32, 64];
pub const STANDARD_DEPTHS: [usize; 4] = [20, 32, 44, 56];
pub const INPUT_SHAPE: [usize; 3] = [3, 32, 32];

/// Published parameter counts `(baseline, hex-shortcut)` for the standard
/// depths. The baseline uses 1×1 projection shortcuts.
pub fn published_param_counts(depth: usize) -> Option<(usize, usize)> {
    match depth {
        20 => Some((272_474, 287_130)),
        32 => Some((466_906, 481_114)),
        44 => Some((661_338, 675_098)),
        56 => Some((855_770, 869_082)),
        _ => None,
    }
}

/// Shortcut used by the two dimension-changing blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutMode {
    /// Stride-2 subsampling plus zero-filled extra channels. No parameters.
    IdentityPad,
    /// Stride-2 1×1 convolution followed by batch norm.
    #[serde(rename = "projection_1x1")]
    Projection1x1,
    /// Size-1 hexagonal convolution, stride-2 subsampling, batch norm.
    HexProjection,
}

impl ShortcutMode {
    pub const ALL: [ShortcutMode; 3] = [
        ShortcutMode::IdentityPad,
        ShortcutMode::Projection1x1,
        ShortcutMode::HexProjection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShortcutMode::IdentityPad => "identity_pad",
            ShortcutMode::Projection1x1 => "projection_1x1",
            ShortcutMode::HexProjection => "hex_projection",
        }
    }
}

impl fmt::Display for ShortcutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShortcutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShortcutMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown shortcut mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub depth: usize,
    pub shortcut: ShortcutMode,
    pub num_classes: usize,
}

impl ArchConfig {
    pub fn new(depth: usize, shortcut: ShortcutMode) -> Result<Self> {
        let cfg = Self {
            depth,
            shortcut,
            num_classes: 10,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Accepts any `depth = 6n + 2` with `n ≥ 1`; the standard depths are
    /// 20, 32, 44 and 56.
    pub fn validate(&self) -> Result<()> {
        if self.depth < 8 || (self.depth - 2) % 6 != 0 {
            return Err(Error::InvalidConfig(format!(
                "depth {} is not of the form 6n+2 with n ≥ 1",
                self.depth
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn blocks_per_stage(&self) -> usize {
        (self.depth - 2) / 6
    }
}

enum Shortcut<T> {
    Identity,
    PadIdentity {
        in_channels: usize,
        out_channels: usize,
        input_shape: Option<[usize; 4]>,
    },
    Projection {
        conv: Conv2d<T>,
        bn: BatchNorm2d<T>,
    },
    Hex {
        conv: HexConv2d<T>,
        bn: BatchNorm2d<T>,
    },
}

impl<T: Scalar> Shortcut<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Shortcut::Identity => Ok(x.clone()),
            Shortcut::PadIdentity {
                in_channels,
                out_channels,
                input_shape,
            } => {
                *input_shape = (mode == Mode::Train).then(|| x.shape());
                let s = subsample2(x);
                let [n, _, h, w] = s.shape();
                let front = (*out_channels - *in_channels) / 2;
                let ic = *in_channels;
                Ok(Tensor::from_fn([n, *out_channels, h, w], |ni, c, r, col| {
                    if c >= front && c < front + ic {
                        s.at(ni, c - front, r, col)
                    } else {
                        T::zero()
                    }
                }))
            }
            Shortcut::Projection { conv, bn } => {
                let y = conv.forward(x, mode)?;
                bn.forward(&y, mode)
            }
            Shortcut::Hex { conv, bn } => {
                let y = conv.forward(x, mode)?;
                bn.forward(&y, mode)
            }
        }
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Shortcut::Identity => Ok(g.clone()),
            Shortcut::PadIdentity {
                in_channels,
                out_channels,
                input_shape,
            } => {
                let shape = input_shape.ok_or(Error::NoForwardCache("identity_pad shortcut"))?;
                let front = (*out_channels - *in_channels) / 2;
                let [n, _, h, w] = g.shape();
                let sliced = Tensor::from_fn([n, *in_channels, h, w], |ni, c, r, col| g.at(ni, c + front, r, col));
                subsample2_backward(&sliced, shape)
            }
            Shortcut::Projection { conv, bn } => conv.backward(&bn.backward(g)?),
            Shortcut::Hex { conv, bn } => conv.backward(&bn.backward(g)?),
        }
    }

    fn output_shape(&self, [n, c, h, w]: [usize; 4]) -> [usize; 4] {
        match self {
            Shortcut::Identity => [n, c, h, w],
            Shortcut::PadIdentity { out_channels, .. } => [n, *out_channels, h.div_ceil(2), w.div_ceil(2)],
            Shortcut::Projection { conv, .. } => {
                let (oh, ow) = conv.spec.output_extent(h, w);
                [n, conv.spec.out_channels, oh, ow]
            }
            Shortcut::Hex { conv, .. } => {
                let out = conv.side.value.shape()[0];
                if conv.stride == 2 {
                    [n, out, h.div_ceil(2), w.div_ceil(2)]
                } else {
                    [n, out, h, w]
                }
            }
        }
    }

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        match self {
            Shortcut::Identity | Shortcut::PadIdentity { .. } => Vec::new(),
            Shortcut::Projection { conv, bn } => prefixed("conv", conv.params())
                .into_iter()
                .chain(prefixed("bn", bn.params()))
                .collect(),
            Shortcut::Hex { conv, bn } => prefixed("hex", conv.params())
                .into_iter()
                .chain(prefixed("bn", bn.params()))
                .collect(),
        }
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        match self {
            Shortcut::Identity | Shortcut::PadIdentity { .. } => Vec::new(),
            Shortcut::Projection { conv, bn } => prefixed("conv", conv.params_mut())
                .into_iter()
                .chain(prefixed("bn", bn.params_mut()))
                .collect(),
            Shortcut::Hex { conv, bn } => prefixed("hex", conv.params_mut())
                .into_iter()
                .chain(prefixed("bn", bn.params_mut()))
                .collect(),
        }
    }

    fn bn(&self) -> Option<&BatchNorm2d<T>> {
        match self {
            Shortcut::Projection { bn, .. } | Shortcut::Hex { bn, .. } => Some(bn),
            _ => None,
        }
    }

    fn bn_mut(&mut self) -> Option<&mut BatchNorm2d<T>> {
        match self {
            Shortcut::Projection { bn, .. } | Shortcut::Hex { bn, .. } => Some(bn),
            _ => None,
        }
    }
}

fn prefixed<P>(prefix: &str, items: Vec<(&'static str, P)>) -> Vec<(String, P)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

/// `ReLU(F(x) + shortcut(x))` with `F = conv3×3 → BN → ReLU → conv3×3 → BN`.
pub struct ResidualBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    shortcut: Shortcut<T>,
    out_relu: Relu<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(in_c: usize, out_c: usize, stride: usize, mode: ShortcutMode, rng: &mut Rng) -> Result<Self> {
        let conv1 = Conv2d::new(ConvSpec::square(in_c, out_c, 3, stride, 1), rng)?;
        let conv2 = Conv2d::new(ConvSpec::square(out_c, out_c, 3, 1, 1), rng)?;
        let shortcut = if stride == 1 && in_c == out_c {
            Shortcut::Identity
        } else {
            match mode {
                ShortcutMode::IdentityPad => Shortcut::PadIdentity {
                    in_channels: in_c,
                    out_channels: out_c,
                    input_shape: None,
                },
                ShortcutMode::Projection1x1 => Shortcut::Projection {
                    conv: Conv2d::new(ConvSpec::square(in_c, out_c, 1, stride, 0), rng)?,
                    bn: BatchNorm2d::new(out_c),
                },
                ShortcutMode::HexProjection => Shortcut::Hex {
                    conv: HexConv2d::new(in_c, out_c, stride, false, rng)?,
                    bn: BatchNorm2d::new(out_c),
                },
            }
        };
        Ok(Self {
            conv1,
            bn1: BatchNorm2d::new(out_c),
            relu1: Relu::new(),
            conv2,
            bn2: BatchNorm2d::new(out_c),
            shortcut,
            out_relu: Relu::new(),
        })
    }

    /// `(main path, shortcut)` output shapes for a given input shape.
    pub fn output_shapes(&self, [n, _, h, w]: [usize; 4]) -> ([usize; 4], [usize; 4]) {
        let (h1, w1) = self.conv1.spec.output_extent(h, w);
        let (h2, w2) = self.conv2.spec.output_extent(h1, w1);
        let main = [n, self.conv2.spec.out_channels, h2, w2];
        let sc = self.shortcut.output_shape([n, self.conv1.spec.in_channels, h, w]);
        (main, sc)
    }

    pub fn has_hex_shortcut(&self) -> bool {
        matches!(self.shortcut, Shortcut::Hex { .. })
    }

    pub fn has_projection_shortcut(&self) -> bool {
        matches!(self.shortcut, Shortcut::Projection { .. })
    }

    /// The hexagonal shortcut convolution, if this block has one.
    pub fn hex_shortcut_mut(&mut self) -> Option<&mut HexConv2d<T>> {
        match &mut self.shortcut {
            Shortcut::Hex { conv, .. } => Some(conv),
            _ => None,
        }
    }

    /// The 1×1 projection shortcut convolution, if this block has one.
    pub fn projection_shortcut(&self) -> Option<&Conv2d<T>> {
        match &self.shortcut {
            Shortcut::Projection { conv, .. } => Some(conv),
            _ => None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv1.forward(x, mode)?;
        let y = self.bn1.forward(&y, mode)?;
        let y = self.relu1.forward(&y, mode)?;
        let y = self.conv2.forward(&y, mode)?;
        let mut y = self.bn2.forward(&y, mode)?;
        let s = self.shortcut.forward(x, mode)?;
        y.add_assign(&s)
            .map_err(|_| Error::shape("residual add", format!("main {:?} vs shortcut {:?}", y.shape(), s.shape())))?;
        self.out_relu.forward(&y, mode)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.out_relu.backward(g)?;
        let gm = self.bn2.backward(&g)?;
        let gm = self.conv2.backward(&gm)?;
        let gm = self.relu1.backward(&gm)?;
        let gm = self.bn1.backward(&gm)?;
        let mut dx = self.conv1.backward(&gm)?;
        dx.add_assign(&self.shortcut.backward(&g)?)?;
        Ok(dx)
    }

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = prefixed("conv1", self.conv1.params());
        out.extend(prefixed("bn1", self.bn1.params()));
        out.extend(prefixed("conv2", self.conv2.params()));
        out.extend(prefixed("bn2", self.bn2.params()));
        out.extend(self.shortcut.named_params().into_iter().map(|(n, p)| (format!("shortcut.{n}"), p)));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = prefixed("conv1", self.conv1.params_mut());
        out.extend(prefixed("bn1", self.bn1.params_mut()));
        out.extend(prefixed("conv2", self.conv2.params_mut()));
        out.extend(prefixed("bn2", self.bn2.params_mut()));
        out.extend(
            self.shortcut
                .named_params_mut()
                .into_iter()
                .map(|(n, p)| (format!("shortcut.{n}"), p)),
        );
        out
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("bn1", self.bn1.buffers());
        out.extend(prefixed("bn2", self.bn2.buffers()));
        if let Some(bn) = self.shortcut.bn() {
            out.extend(prefixed("shortcut.bn", bn.buffers()));
        }
        out
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = prefixed("bn1", self.bn1.buffers_mut());
        out.extend(prefixed("bn2", self.bn2.buffers_mut()));
        if let Some(bn) = self.shortcut.bn_mut() {
            out.extend(prefixed("shortcut.bn", bn.buffers_mut()));
        }
        out
    }
}

pub struct Network<T> {
    pub cfg: ArchConfig,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stem_relu: Relu<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pool: GlobalAvgPool,
    pub fc: Linear<T>,
}

pub fn build_network<T: Scalar>(cfg: &ArchConfig, rng: &mut Rng) -> Result<Network<T>> {
    cfg.validate()?;
    let stem_conv = Conv2d::new(ConvSpec::square(INPUT_SHAPE[0], STAGE_WIDTHS[0], 3, 1, 1), rng)?;
    let mut blocks = Vec::with_capacity(3 * cfg.blocks_per_stage());
    let mut in_c = STAGE_WIDTHS[0];
    let mut shape = [1, in_c, INPUT_SHAPE[1], INPUT_SHAPE[2]];
    for (stage, &width) in STAGE_WIDTHS.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage() {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let block = ResidualBlock::new(in_c, width, stride, cfg.shortcut, rng)?;
            let (main, sc) = block.output_shapes(shape);
            if main != sc {
                return Err(Error::shape(
                    "build_network",
                    format!("stage {stage} block {b}: main {main:?} vs shortcut {sc:?}"),
                ));
            }
            shape = main;
            in_c = width;
            blocks.push(block);
        }
    }
    let fc = Linear::new(in_c, cfg.num_classes, rng)?;
    Ok(Network {
        cfg: *cfg,
        stem_conv,
        stem_bn: BatchNorm2d::new(STAGE_WIDTHS[0]),
        stem_relu: Relu::new(),
        blocks,
        pool: GlobalAvgPool::default(),
        fc,
    })
}

/// Number of trainable scalars.
pub fn count_parameters<T: Scalar>(model: &Network<T>) -> usize {
    model.named_params().iter().map(|(_, p)| p.value.len()).sum()
}

impl<T: Scalar> Network<T> {
    /// `(N, 3, 32, 32)` images to `(N, num_classes, 1, 1)` scores.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [_, c, h, w] = x.shape();
        if [c, h, w] != INPUT_SHAPE {
            return Err(Error::shape(
                "network forward",
                format!("expected (N, 3, 32, 32), got {:?}", x.shape()),
            ));
        }
        let y = self.stem_conv.forward(x, mode)?;
        let y = self.stem_bn.forward(&y, mode)?;
        let mut y = self.stem_relu.forward(&y, mode)?;
        for block in &mut self.blocks {
            y = block.forward(&y, mode)?;
        }
        let y = self.pool.forward(&y, mode)?;
        self.fc.forward(&y, mode)
    }

    /// Backpropagates score gradients, accumulating into every parameter's
    /// gradient. Returns the gradient w.r.t. the input images.
    pub fn backward(&mut self, grad_scores: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.fc.backward(grad_scores)?;
        let mut g = Layer::<T>::backward(&mut self.pool, &g)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        let g = self.stem_relu.backward(&g)?;
        let g = self.stem_bn.backward(&g)?;
        self.stem_conv.backward(&g)
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Sets the classifier weights and bias to zero, so every input scores
    /// uniformly.
    pub fn zero_classifier(&mut self) {
        self.fc.weight.value.data_mut().fill(T::zero());
        self.fc.bias.value.data_mut().fill(T::zero());
    }

    pub fn hex_layer_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.has_hex_shortcut()).count()
    }

    fn stage_block_names(&self) -> Vec<String> {
        let per = self.cfg.blocks_per_stage();
        (0..self.blocks.len())
            .map(|i| format!("stage{}.block{}", i / per + 1, i % per))
            .collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = prefixed("stem.conv", self.stem_conv.params());
        out.extend(prefixed("stem.bn", self.stem_bn.params()));
        for (name, block) in self.stage_block_names().iter().zip(&self.blocks) {
            out.extend(block.named_params().into_iter().map(|(n, p)| (format!("{name}.{n}"), p)));
        }
        out.extend(prefixed("fc", self.fc.params()));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let names = self.stage_block_names();
        let mut out = prefixed("stem.conv", self.stem_conv.params_mut());
        out.extend(prefixed("stem.bn", self.stem_bn.params_mut()));
        for (name, block) in names.iter().zip(self.blocks.iter_mut()) {
            out.extend(block.named_params_mut().into_iter().map(|(n, p)| (format!("{name}.{n}"), p)));
        }
        out.extend(prefixed("fc", self.fc.params_mut()));
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("stem.bn", self.stem_bn.buffers());
        for (name, block) in self.stage_block_names().iter().zip(&self.blocks) {
            out.extend(block.named_buffers().into_iter().map(|(n, t)| (format!("{name}.{n}"), t)));
        }
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names = self.stage_block_names();
        let mut out = prefixed("stem.bn", self.stem_bn.buffers_mut());
        for (name, block) in names.iter().zip(self.blocks.iter_mut()) {
            out.extend(block.named_buffers_mut().into_iter().map(|(n, t)| (format!("{name}.{n}"), t)));
        }
        out
    }
}
