use rand::Rng;

use super::{AxialUNetSpec, UNet};
use crate::attention::{DecoderConfig, OuterDecoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Conv2d;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// UNet feature extractor, 1×1 temporal merge, raster-causal axial decoder
/// and a per-pixel categorical head over intensity bins.
#[derive(Clone, Debug)]
pub struct AxialUNet {
    pub spec: AxialUNetSpec,
    pub unet: UNet,
    pub merge: Conv2d,
    pub decoder: OuterDecoder,
    pub head: Conv2d,
}

impl AxialUNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: &AxialUNetSpec,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let unet = UNet::new(store, "unet", &spec.unet, rng)?;
        let merge = Conv2d::new(store, "merge", spec.unet.out_channels, spec.attn_channels, 1, 1, 0, rng)?;
        let cfg = DecoderConfig { channels: spec.attn_channels, heads: spec.heads, height, width };
        let decoder = OuterDecoder::new(store, "outer", cfg, spec.l_upper, spec.l_row, rng)?;
        let head = Conv2d::new(store, "head", spec.attn_channels, spec.bins, 1, 1, 0, rng)?;
        Ok(AxialUNet { spec: spec.clone(), unet, merge, decoder, head })
    }

    /// Per-pixel bin logits `[N,bins,H,W]`.
    pub fn logits(&self, g: &mut Graph<'_>, frames: Var) -> Result<Var> {
        let feats = self.unet.forward(g, frames)?;
        let h = self.merge.forward(g, feats)?;
        let h = self.decoder.forward(g, h)?;
        self.head.forward(g, h)
    }

    /// Expected intensity `[N,1,H,W]` under the bin distribution.
    pub fn predict(&self, g: &mut Graph<'_>, frames: Var) -> Result<Var> {
        let logits = self.logits(g, frames)?;
        head_mean(g, logits)
    }
}

/// Softmax over the bin axis followed by the expectation over bin centers
/// `k / (bins - 1)`.
pub fn head_mean(g: &mut Graph<'_>, logits: Var) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 4 || s[1] < 2 {
        return Err(Error::shape("head_mean", format!("expected [N,bins>=2,H,W], got {:?}", s)));
    }
    let bins = s[1];
    let centers = Tensor::from_fn(&[bins, 1, 1], |k| k as f64 / (bins - 1) as f64);
    let centers = g.input(centers);
    let p = g.softmax(logits, 1)?;
    let weighted = g.mul(p, centers)?;
    g.sum_axis(weighted, 1)
}
