use rand::{Rng, RngCore};

use super::UNetSpec;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{join, Conv2d, ConvTranspose2d};
use crate::params::ParamStore;

/// Two 3×3 convolutions (padding 1), each followed by ReLU, with the second
/// wrapped in an identity skip: `y = a + relu(conv2(a))`, `a = relu(conv1(x))`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvBlock {
            conv1: Conv2d::new(store, &join(prefix, "conv1"), cin, cout, 3, 1, 1, rng)?,
            conv2: Conv2d::new(store, &join(prefix, "conv2"), cout, cout, 3, 1, 1, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let a = self.conv1.forward(g, x)?;
        let a = g.relu(a);
        let b = self.conv2.forward(g, a)?;
        let b = g.relu(b);
        g.add(a, b)
    }
}

/// Dropout applied to decoder stages (the cGAN generator's noise source).
pub struct DecoderDropout<'r> {
    pub p: f64,
    pub rng: &'r mut dyn RngCore,
}

/// Encoder–decoder with skip concatenation between matching resolutions.
///
/// For a channel plan `[c0, c1, .., cL]` the encoder runs `L` blocks
/// `c(k) → c(k+1)`, each followed by 2×2 max pooling, and a bottleneck block
/// at `1/2^L` resolution. Decoder stage `k` up-convolves to `c(k+1)`,
/// concatenates the stage-`k` encoder features and reduces `2·c(k+1) → c(k+1)`.
/// A 1×1 head maps `c1` to the output channels.
#[derive(Clone, Debug)]
pub struct UNet {
    pub spec: UNetSpec,
    pub down: Vec<ConvBlock>,
    pub bottleneck: ConvBlock,
    pub up: Vec<ConvTranspose2d>,
    pub dec: Vec<ConvBlock>,
    pub head: Conv2d,
}

/// Output and intermediate activations of a UNet pass.
pub struct UNetTrace {
    pub output: Var,
    /// Pooled encoder outputs, shallowest first.
    pub encoder: Vec<Var>,
    /// Pre-pooling encoder features that feed the skip connections.
    pub skips: Vec<Var>,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, spec: &UNetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let plan = &spec.channel_plan;
        let levels = plan.len() - 1;
        let mut down = Vec::with_capacity(levels);
        for k in 0..levels {
            down.push(ConvBlock::new(store, &join(prefix, &format!("down{k}")), plan[k], plan[k + 1], rng)?);
        }
        let bottleneck = ConvBlock::new(store, &join(prefix, "bottleneck"), plan[levels], plan[levels], rng)?;
        let mut up = Vec::with_capacity(levels);
        let mut dec = Vec::with_capacity(levels);
        for k in 0..levels {
            let c_prev = plan[(k + 2).min(levels)];
            up.push(ConvTranspose2d::new(store, &join(prefix, &format!("up{k}")), c_prev, plan[k + 1], 2, 2, rng)?);
            dec.push(ConvBlock::new(store, &join(prefix, &format!("dec{k}")), 2 * plan[k + 1], plan[k + 1], rng)?);
        }
        let head = Conv2d::new(store, &join(prefix, "head"), plan[1], spec.out_channels, 1, 1, 0, rng)?;
        Ok(UNet { spec: spec.clone(), down, bottleneck, up, dec, head })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, x, None)?.output)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        mut dropout: Option<DecoderDropout<'_>>,
    ) -> Result<UNetTrace> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.spec.in_frames {
            return Err(Error::shape("unet", format!("expected [N,{},H,W], got {:?}", self.spec.in_frames, s)));
        }
        self.spec.check_extent(s[2], s[3])?;
        let mut skips = Vec::with_capacity(self.down.len());
        let mut encoder = Vec::with_capacity(self.down.len());
        let mut h = x;
        for block in &self.down {
            h = block.forward(g, h)?;
            skips.push(h);
            h = g.maxpool2d(h, 2, 2)?;
            encoder.push(h);
        }
        h = self.bottleneck.forward(g, h)?;
        for k in (0..self.dec.len()).rev() {
            let u = self.up[k].forward(g, h)?;
            // Padding 1 keeps extents, so skip and upsampled maps already agree.
            let cat = g.concat(u, skips[k], 1)?;
            h = self.dec[k].forward(g, cat)?;
            if k > 0 {
                if let Some(d) = dropout.as_mut() {
                    h = g.dropout(h, d.p, &mut *d.rng)?;
                }
            }
        }
        let output = self.head.forward(g, h)?;
        Ok(UNetTrace { output, encoder, skips })
    }
}
