//! Input blocks per modality and residual convolutional blocks.
//!
//! A convolutional block alternates 2-D residual modules (1x1 -> 3x3 -> 1x1)
//! and (2+1)D residual modules (temporal 3-tap -> 3x3 -> 1x1), three conv
//! layers per module. At depth scale 1 the levels 1..=4 use 3, 4, 6 and 3
//! modules. The block's spatial stride is applied by the 3x3 conv of the
//! first module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{he_normal, stream_rng, ParamClass, ParamId, ParamStore, Ratio};
use crate::tape::{same_extent, ConvGeometry, CostKind, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Gain applied to the last conv of every residual branch at init.
const RESIDUAL_BRANCH_GAIN: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Rgb,
    Flow,
    Object,
    Conv,
}

impl BlockKind {
    pub fn is_input(self) -> bool {
        !matches!(self, BlockKind::Conv)
    }

    /// Channels of the raw modality fed to an input block.
    pub fn raw_channels(self, object_channels: usize) -> Option<usize> {
        match self {
            BlockKind::Rgb => Some(3),
            BlockKind::Flow => Some(2),
            BlockKind::Object => Some(object_channels),
            BlockKind::Conv => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Rgb => "rgb",
            BlockKind::Flow => "flow",
            BlockKind::Object => "object",
            BlockKind::Conv => "conv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub index: usize,
    pub level: usize,
    pub channels: usize,
    pub temporal_dilation: usize,
    pub spatial_stride: usize,
    pub kind: BlockKind,
    /// Residual modules in a conv block (0 for input blocks).
    pub repeats: usize,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Block(format!("block {}: {m}", self.index)));
        if self.kind.is_input() != (self.level == 0) {
            return bad("input blocks sit at level 0 and conv blocks above it");
        }
        if self.channels == 0 {
            return bad("channels must be positive");
        }
        if self.temporal_dilation == 0 || self.spatial_stride == 0 {
            return bad("dilation and stride must be positive");
        }
        Ok(())
    }

    /// Spatial extent of the block output for an input of extent `input`.
    pub fn output_extent(&self, input: usize) -> usize {
        match self.kind {
            BlockKind::Rgb | BlockKind::Flow => same_extent(same_extent(input, 2), 2),
            BlockKind::Object => same_extent(input, 4),
            BlockKind::Conv => same_extent(input, self.spatial_stride),
        }
    }
}

/// Residual modules per level at depth scale 1.
pub fn base_modules(level: usize) -> Option<usize> {
    match level {
        1 => Some(3),
        2 => Some(4),
        3 => Some(6),
        4 => Some(3),
        _ => None,
    }
}

pub fn modules_for(level: usize, depth_scale: Ratio) -> Result<usize> {
    let base = base_modules(level).ok_or_else(|| Error::Block(format!("no conv block layout for level {level}")))?;
    Ok(depth_scale.ceil(base).max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualModuleKind {
    Spatial2d,
    Spatiotemporal2Plus1d,
}

/// One convolution with its parameters.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeometry,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        class: ParamClass,
        kernel: [usize; 3],
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        gain: f64,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let [kt, kh, kw] = kernel;
        let shape = Shape::new(kt, kh, kw, in_channels, out_channels);
        let fan_in = kt * kh * kw * in_channels;
        let weight = store.add(format!("{name}.w"), class, he_normal(shape, fan_in, gain, rng));
        let bias = store.add(format!("{name}.b"), class, Tensor::zeros(Shape::vector(out_channels)));
        ConvLayer { weight, bias, kernel, in_channels, out_channels, geom }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(self.weight.index(), store.value(self.weight))?;
        let b = tape.param(self.bias.index(), store.value(self.bias))?;
        tape.conv(x, w, b, self.geom)
    }

    pub fn param_count(&self) -> usize {
        let [kt, kh, kw] = self.kernel;
        kt * kh * kw * self.in_channels * self.out_channels + self.out_channels
    }

    /// FLOPs for one sample producing `t x h_out x w_out` outputs.
    pub fn flops(&self, t: usize, h_out: usize, w_out: usize) -> u64 {
        let [kt, kh, kw] = self.kernel;
        2 * (kt * kh * kw * self.in_channels * self.out_channels) as u64 * (t * h_out * w_out) as u64
    }
}

#[derive(Clone, Debug)]
pub struct ResidualModule {
    pub kind: ResidualModuleKind,
    pub layers: [ConvLayer; 3],
    pub shortcut: Option<ConvLayer>,
}

impl ResidualModule {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let [a, b, c] = &self.layers;
        let h = a.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = b.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let h = c.forward(tape, store, h)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(tape, store, x)?,
            None => x,
        };
        let sum = tape.add(skip, h)?;
        tape.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub enum BlockBody {
    Rgb { spatial: ConvLayer, temporal: ConvLayer },
    Flow { spatial: ConvLayer },
    Object,
    Conv { modules: Vec<ResidualModule> },
}

/// A block with its parameters registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Block {
    pub spec: BlockSpec,
    pub in_channels: usize,
    pub body: BlockBody,
}

/// Builds an input block. `in_channels` is the raw modality width.
pub fn make_input_block(spec: &BlockSpec, in_channels: usize, store: &mut ParamStore, seed: u64) -> Result<Block> {
    spec.validate()?;
    let mut rng = stream_rng(seed, &[0xb10c, spec.index as u64]);
    let name = format!("block{}", spec.index);
    let c = spec.channels;
    let s2 = ConvGeometry { dilation: 1, stride: 2 };
    let body = match spec.kind {
        BlockKind::Rgb => {
            let spatial =
                ConvLayer::new(store, &format!("{name}.spatial"), ParamClass::Conv, [1, 7, 7], in_channels, c, s2, 1.0, &mut rng);
            let temporal = ConvLayer::new(
                store,
                &format!("{name}.temporal"),
                ParamClass::Conv,
                [5, 1, 1],
                c,
                c,
                ConvGeometry { dilation: spec.temporal_dilation, stride: 1 },
                1.0,
                &mut rng,
            );
            BlockBody::Rgb { spatial, temporal }
        }
        BlockKind::Flow => {
            let spatial =
                ConvLayer::new(store, &format!("{name}.spatial"), ParamClass::Conv, [1, 7, 7], in_channels, c, s2, 1.0, &mut rng);
            BlockBody::Flow { spatial }
        }
        BlockKind::Object => {
            if in_channels != c {
                return Err(Error::Block(format!(
                    "object block {} has {c} channels but receives {in_channels}",
                    spec.index
                )));
            }
            BlockBody::Object
        }
        BlockKind::Conv => return Err(Error::Block(format!("block {} is not an input block", spec.index))),
    };
    Ok(Block { spec: spec.clone(), in_channels, body })
}

/// Builds a residual conv block whose input has `in_channels` channels.
pub fn make_conv_block(
    spec: &BlockSpec,
    in_channels: usize,
    depth_scale: Ratio,
    store: &mut ParamStore,
    seed: u64,
) -> Result<Block> {
    spec.validate()?;
    if spec.kind != BlockKind::Conv {
        return Err(Error::Block(format!("block {} is an input block", spec.index)));
    }
    let count = modules_for(spec.level, depth_scale)?;
    let mut rng = stream_rng(seed, &[0xb10c, spec.index as u64]);
    let c = spec.channels;
    let mut modules = Vec::with_capacity(count);
    let mut width = in_channels;
    for m in 0..count {
        let kind = if m % 2 == 0 { ResidualModuleKind::Spatial2d } else { ResidualModuleKind::Spatiotemporal2Plus1d };
        let stride = if m == 0 { spec.spatial_stride } else { 1 };
        let name = format!("block{}.m{m}", spec.index);
        let first = match kind {
            ResidualModuleKind::Spatial2d => ([1, 1, 1], ConvGeometry::UNIT),
            ResidualModuleKind::Spatiotemporal2Plus1d => {
                ([3, 1, 1], ConvGeometry { dilation: spec.temporal_dilation, stride: 1 })
            }
        };
        let layers = [
            ConvLayer::new(store, &format!("{name}.a"), ParamClass::Conv, first.0, width, c, first.1, 1.0, &mut rng),
            ConvLayer::new(
                store,
                &format!("{name}.b"),
                ParamClass::Conv,
                [1, 3, 3],
                c,
                c,
                ConvGeometry { dilation: 1, stride },
                1.0,
                &mut rng,
            ),
            ConvLayer::new(
                store,
                &format!("{name}.c"),
                ParamClass::Conv,
                [1, 1, 1],
                c,
                c,
                ConvGeometry::UNIT,
                RESIDUAL_BRANCH_GAIN,
                &mut rng,
            ),
        ];
        let shortcut = (width != c || stride != 1).then(|| {
            ConvLayer::new(
                store,
                &format!("{name}.proj"),
                ParamClass::Conv,
                [1, 1, 1],
                width,
                c,
                ConvGeometry { dilation: 1, stride },
                1.0,
                &mut rng,
            )
        });
        modules.push(ResidualModule { kind, layers, shortcut });
        width = c;
    }
    Ok(Block { spec: BlockSpec { repeats: count, ..spec.clone() }, in_channels, body: BlockBody::Conv { modules } })
}

impl Block {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.c() != self.in_channels {
            return Err(Error::Shape {
                op: "block_forward",
                detail: format!("block {} expects {} channels, got {shape:?}", self.spec.index, self.in_channels),
            });
        }
        let prev = tape.set_cost_kind(Some(CostKind::Conv));
        let out = self.forward_inner(tape, store, x);
        tape.set_cost_kind(prev);
        out
    }

    fn forward_inner(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match &self.body {
            BlockBody::Rgb { spatial, temporal } => {
                let h = spatial.forward(tape, store, x)?;
                let h = tape.relu(h)?;
                let h = temporal.forward(tape, store, h)?;
                let h = tape.relu(h)?;
                tape.max_pool(h, 2)
            }
            BlockBody::Flow { spatial } => {
                let h = spatial.forward(tape, store, x)?;
                let h = tape.relu(h)?;
                tape.max_pool(h, 2)
            }
            BlockBody::Object => tape.max_pool(x, 4),
            BlockBody::Conv { modules } => {
                let mut h = x;
                for m in modules {
                    h = m.forward(tape, store, h)?;
                }
                Ok(h)
            }
        }
    }

    /// Every conv layer in the block, shortcut projections included.
    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        match &self.body {
            BlockBody::Rgb { spatial, temporal } => vec![spatial, temporal],
            BlockBody::Flow { spatial } => vec![spatial],
            BlockBody::Object => vec![],
            BlockBody::Conv { modules } => {
                modules.iter().flat_map(|m| m.layers.iter().chain(m.shortcut.iter())).collect()
            }
        }
    }

    /// Residual-branch conv layers (what the per-level layer counts refer to).
    pub fn residual_layer_count(&self) -> usize {
        match &self.body {
            BlockBody::Conv { modules } => modules.len() * 3,
            _ => self.conv_layers().len(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv_layers().iter().map(|l| l.param_count()).sum()
    }

    /// Analytic FLOPs for one sample of `t` frames at input extent `(h, w)`.
    pub fn flops(&self, t: usize, h: usize, w: usize) -> u64 {
        match &self.body {
            BlockBody::Rgb { spatial, temporal } => {
                let (ho, wo) = (same_extent(h, 2), same_extent(w, 2));
                spatial.flops(t, ho, wo) + temporal.flops(t, ho, wo)
            }
            BlockBody::Flow { spatial } => spatial.flops(t, same_extent(h, 2), same_extent(w, 2)),
            BlockBody::Object => 0,
            BlockBody::Conv { modules } => {
                let (ho, wo) = (same_extent(h, self.spec.spatial_stride), same_extent(w, self.spec.spatial_stride));
                let mut total = 0;
                for (i, m) in modules.iter().enumerate() {
                    let (hi, wi) = if i == 0 { (h, w) } else { (ho, wo) };
                    let [a, b, c] = &m.layers;
                    total += a.flops(t, hi, wi) + b.flops(t, ho, wo) + c.flops(t, ho, wo);
                    if let Some(p) = &m.shortcut {
                        total += p.flops(t, ho, wo);
                    }
                }
                total
            }
        }
    }
}
