//! VGG-style per-instance feature extractor.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Ctx};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of each pooling stage.
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub in_channels: usize,
    /// 1×1 conv blocks after the last stage.
    pub post_blocks: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    pub fn full_scale() -> Self {
        Self { channels: vec![64, 128, 256, 512], blocks_per_stage: 2, in_channels: 3, post_blocks: 2 }
    }

    pub fn desk() -> Self {
        Self { channels: vec![8, 16, 32], ..Self::full_scale() }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config(format!("channel plan {:?} must be non-empty and positive", self.channels)));
        }
        if self.in_channels == 0 || self.blocks_per_stage == 0 {
            return Err(Error::config("input channels and blocks per stage must be positive"));
        }
        Ok(())
    }

    /// Spatial output size for an `[h, w]` input.
    pub fn output_size(&self, input: [usize; 2]) -> Result<[usize; 2]> {
        let f = 1usize << self.stages();
        if input.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::config(format!(
                "input size {input:?} not divisible by 2^{} = {f}",
                self.stages()
            )));
        }
        Ok(input.map(|d| d / f))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub input_size: [usize; 2],
    pub name: String,
    stages: Vec<Vec<ConvBlock>>,
    post: Vec<ConvBlock>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &BackboneConfig,
        input_size: [usize; 2],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        cfg.output_size(input_size)?;
        let mut in_ch = cfg.in_channels;
        let mut stages = Vec::new();
        for (s, &out) in cfg.channels.iter().enumerate() {
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| {
                    let blk = ConvBlock::new(store, &format!("{name}.stage{s}.block{b}"), in_ch, out, 3, rng);
                    in_ch = out;
                    blk
                })
                .collect();
            stages.push(blocks);
        }
        let post =
            (0..cfg.post_blocks).map(|b| ConvBlock::new(store, &format!("{name}.post{b}"), in_ch, in_ch, 1, rng)).collect();
        Ok(Self { cfg: cfg.clone(), input_size, name: name.to_string(), stages, post })
    }

    pub fn output_size(&self) -> [usize; 2] {
        self.cfg.output_size(self.input_size).expect("validated at build")
    }

    /// `[N, m, H, W]` to `[N, C, H', W']`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.value(x).shape().to_vec();
        let expected = [self.cfg.in_channels, self.input_size[0], self.input_size[1]];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::shape(format!("[N, {}, {}, {}]", expected[0], expected[1], expected[2]), shape));
        }
        let mut h = x;
        for stage in &self.stages {
            for blk in stage {
                h = blk.forward(ctx, h);
            }
            h = ctx.tape.max_pool2(h);
        }
        for blk in &self.post {
            h = blk.forward(ctx, h);
        }
        Ok(h)
    }

    /// Overwrites named backbone tensors (e.g. from a pretrained model).
    /// Names are relative to the backbone, e.g. `stage0.block1.conv.weight`.
    pub fn load_weights(&self, store: &mut ParamStore, weights: &[(String, Tensor)]) -> Result<()> {
        for (rel, t) in weights {
            let full = format!("{}.{rel}", self.name);
            if store.id(&full).is_none() {
                return Err(Error::config(format!("backbone has no tensor named {rel:?}")));
            }
            store.set(&full, t.clone()).map_err(|msg| Error::shape(rel, msg))?;
        }
        Ok(())
    }
}
