//! The block-partitioned residual encoder.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, BnMode, Conv2d};
use super::params::{ParamId, ParamStore, Session};
use crate::error::{Error, Result};
use crate::noise::{noise_tensor, NoiseConfig};
use crate::rng::Rng;
use crate::tensor::{Element, Var};

pub const MAX_BLOCKS: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub width: usize,
    #[serde(default = "one")]
    pub units: usize,
    pub stride: usize,
    /// Train this block together with the next one under a single loss.
    #[serde(default)]
    pub merge_with_next: bool,
}

fn one() -> usize {
    1
}

impl BlockSpec {
    pub fn new(width: usize, units: usize, stride: usize) -> Self {
        Self {
            width,
            units,
            stride,
            merge_with_next: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    #[serde(default = "three")]
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
}

fn three() -> usize {
    3
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderSpec {
    /// Four blocks of widths 16/32/64/128 with strides 2/2/2/1.
    pub fn desk() -> Self {
        Self::with_blocks(&[(16, 2), (32, 2), (64, 2), (128, 1)])
    }

    /// One residual unit per `(width, stride)` block, RGB input.
    pub fn with_blocks(blocks: &[(usize, usize)]) -> Self {
        Self {
            in_channels: 3,
            blocks: blocks.iter().map(|&(w, s)| BlockSpec::new(w, 1, s)).collect(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.blocks.len();
        if !(1..=MAX_BLOCKS).contains(&b) {
            return Err(Error::config(format!("encoder needs 1..={MAX_BLOCKS} blocks, got {b}")));
        }
        if self.in_channels == 0 {
            return Err(Error::config("encoder input needs at least one channel"));
        }
        for (k, blk) in self.blocks.iter().enumerate() {
            if blk.width == 0 || blk.units == 0 || blk.stride == 0 {
                return Err(Error::config(format!(
                    "block {} needs positive width, units and stride",
                    k + 1
                )));
            }
        }
        if self.blocks[b - 1].merge_with_next {
            return Err(Error::config("the last block has no successor to merge with"));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    /// Output `[C, H, W]` of each block for an `h x w` input.
    pub fn block_shapes(&self, h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
        let (mut h, mut w) = (h, w);
        let mut out = Vec::with_capacity(self.blocks.len());
        for (k, blk) in self.blocks.iter().enumerate() {
            // 3x3, padding 1: (h + 2 - 3) / s + 1
            if h == 0 || w == 0 {
                return Err(Error::config(format!("spatial dims collapse before block {}", k + 1)));
            }
            h = (h - 1) / blk.stride + 1;
            w = (w - 1) / blk.stride + 1;
            out.push([blk.width, h, w]);
        }
        Ok(out)
    }

    /// Encoder blocks grouped into training blocks by the merge flags.
    pub fn training_groups(&self) -> Vec<Range<usize>> {
        let mut groups = Vec::new();
        let mut start = 0;
        for (k, blk) in self.blocks.iter().enumerate() {
            if !blk.merge_with_next {
                groups.push(start..k + 1);
                start = k + 1;
            }
        }
        groups
    }

    /// Sets merge flags so that the first `m` blocks form one training block.
    pub fn merge_first(&mut self, m: usize) -> Result<()> {
        if m == 0 || m > self.blocks.len() {
            return Err(Error::config(format!(
                "cannot merge the first {m} of {} blocks",
                self.blocks.len()
            )));
        }
        for blk in &mut self.blocks[..m - 1] {
            blk.merge_with_next = true;
        }
        Ok(())
    }
}

/// Two 3x3 convolution stages with a residual connection.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl ResidualUnit {
    fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let shortcut = (cin != cout || stride != 1).then(|| {
            (
                Conv2d::new(store, &format!("{name}/shortcut_conv"), cin, cout, 1, stride, 1, rng),
                BatchNorm::new(store, &format!("{name}/shortcut_bn"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(store, &format!("{name}/conv1"), cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm::new(store, &format!("{name}/bn1"), cout),
            conv2: Conv2d::new(store, &format!("{name}/conv2"), cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm::new(store, &format!("{name}/bn2"), cout),
            shortcut,
        }
    }

    pub fn has_projection_shortcut(&self) -> bool {
        self.shortcut.is_some()
    }

    fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var, bn: BnMode) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.bn1.forward(s, h, bn)?;
        let h = s.tape.relu(h);
        let h = self.conv2.forward(s, h)?;
        let h = self.bn2.forward(s, h, bn)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let p = conv.forward(s, x)?;
                norm.forward(s, p, bn)?
            }
            None => x,
        };
        let y = s.tape.add(h, skip)?;
        Ok(s.tape.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    stem: Option<(Conv2d, BatchNorm)>,
    units: Vec<ResidualUnit>,
    params: Vec<ParamId>,
}

impl EncoderBlock {
    pub fn units(&self) -> &[ResidualUnit] {
        &self.units
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    fn forward<E: Element>(&self, s: &mut Session<'_, E>, mut x: Var, bn: BnMode) -> Result<Var> {
        if let Some((conv, norm)) = &self.stem {
            let h = conv.forward(s, x)?;
            let h = norm.forward(s, h, bn)?;
            x = s.tape.relu(h);
        }
        for unit in &self.units {
            x = unit.forward(s, x, bn)?;
        }
        Ok(x)
    }
}

/// How one block is evaluated within a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPass {
    pub bn: BnMode,
    /// Wrap the block input in `stop_gradient`.
    pub isolate: bool,
}

/// Per-block evaluation settings for [`Encoder::forward`].
pub struct ForwardPlan<'r> {
    pub passes: Vec<BlockPass>,
    /// Additive input noise for every block; training only.
    pub noise: Option<(NoiseConfig, &'r mut Rng)>,
}

impl<'r> ForwardPlan<'r> {
    /// Every block in `bn` mode; `isolate` inserts stop-gradient at every
    /// block boundary.
    pub fn uniform(blocks: usize, bn: BnMode, isolate: bool) -> Self {
        Self {
            passes: (0..blocks)
                .map(|k| BlockPass {
                    bn,
                    isolate: isolate && k > 0,
                })
                .collect(),
            noise: None,
        }
    }

    pub fn eval(blocks: usize) -> Self {
        Self::uniform(blocks, BnMode::Eval, false)
    }

    pub fn with_noise(mut self, cfg: NoiseConfig, rng: &'r mut Rng) -> Self {
        if cfg.is_active() {
            self.noise = Some((cfg, rng));
        }
        self
    }
}

/// Residual encoder split into blocks; block 1 starts with the strided stem
/// convolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new<E: Element>(store: &mut ParamStore<E>, spec: &EncoderSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut cin = spec.in_channels;
        for (k, bs) in spec.blocks.iter().enumerate() {
            let first = store.len();
            let name = format!("block{}", k + 1);
            let (stem, mut stride) = if k == 0 {
                let conv = Conv2d::new(
                    store,
                    &format!("{name}/unit0/conv"),
                    cin,
                    bs.width,
                    3,
                    bs.stride,
                    1,
                    rng,
                );
                let bn = BatchNorm::new(store, &format!("{name}/unit0/bn"), bs.width);
                cin = bs.width;
                (Some((conv, bn)), 1)
            } else {
                (None, bs.stride)
            };
            let mut units = Vec::with_capacity(bs.units);
            for u in 0..bs.units {
                units.push(ResidualUnit::new(
                    store,
                    &format!("{name}/unit{}", u + 1),
                    cin,
                    bs.width,
                    stride,
                    rng,
                ));
                cin = bs.width;
                stride = 1;
            }
            let params = (first..store.len()).map(ParamId).collect();
            blocks.push(EncoderBlock { stem, units, params });
        }
        Ok(Self {
            spec: spec.clone(),
            blocks,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_params(&self, k: usize) -> &[ParamId] {
        &self.blocks[k].params
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.params.iter().copied()).collect()
    }

    /// Runs the first `plan.passes.len()` blocks and returns each block's
    /// output activation.
    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var, plan: &mut ForwardPlan<'_>) -> Result<Vec<Var>> {
        if plan.passes.len() > self.blocks.len() {
            return Err(Error::config(format!(
                "plan covers {} blocks, encoder has {}",
                plan.passes.len(),
                self.blocks.len()
            )));
        }
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::shape(format!(
                "encoder expects [N, {}, H, W], got {shape:?}",
                self.spec.in_channels
            )));
        }
        self.spec.block_shapes(shape[2], shape[3])?;
        let mut outs = Vec::with_capacity(plan.passes.len());
        let mut h = x;
        for (block, pass) in self.blocks.iter().zip(&plan.passes) {
            if pass.isolate {
                h = s.tape.stop_gradient(h);
            }
            if let Some((cfg, rng)) = plan.noise.as_mut() {
                let n = noise_tensor(s.tape.shape(h), cfg, rng);
                let n = s.tape.constant(n);
                h = s.tape.add(h, n)?;
            }
            h = block.forward(s, h, pass.bn)?;
            outs.push(h);
        }
        Ok(outs)
    }
}
