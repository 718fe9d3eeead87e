//! Architectures and their serializable specifications.

mod axial_unet;
mod cgan;
mod convlstm;
mod unet;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

pub use axial_unet::{head_mean, AxialUNet};
pub use cgan::{CGan, Discriminator, Generator, Noise};
pub use convlstm::{ConvLstm, ConvLstmCell, LstmState};
pub use unet::{ConvBlock, DecoderDropout, UNet, UNetTrace};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_frames: usize,
    pub channel_plan: Vec<usize>,
    pub out_channels: usize,
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        let plan = &self.channel_plan;
        if plan.len() < 2 {
            return Err(Error::Config("channel plan needs at least two entries".into()));
        }
        if plan[0] != self.in_frames {
            return Err(Error::Config(format!(
                "channel plan starts at {} but in_frames is {}",
                plan[0], self.in_frames
            )));
        }
        if plan.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("channel plan {:?} is not strictly increasing", plan)));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("out_channels must be positive".into()));
        }
        Ok(())
    }

    /// Spatial extents must survive `len(plan) - 1` halvings.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let k = 1usize << (self.channel_plan.len() - 1);
        if h % k != 0 || w % k != 0 || h == 0 || w == 0 {
            return Err(Error::shape("unet", format!("extent {h}x{w} is not divisible by {k}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxialUNetSpec {
    /// Feature extractor; its output channels are grouped per input frame
    /// and merged down to `attn_channels` by a learned 1×1 convolution.
    pub unet: UNetSpec,
    pub attn_channels: usize,
    pub l_upper: usize,
    pub l_row: usize,
    pub heads: usize,
    pub bins: usize,
}

impl AxialUNetSpec {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.bins < 2 {
            return Err(Error::Config(format!("bins must be >= 2, got {}", self.bins)));
        }
        if self.heads == 0 || self.attn_channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "attn_channels {} not divisible by heads {}",
                self.attn_channels, self.heads
            )));
        }
        if self.unet.out_channels % self.unet.in_frames != 0 {
            return Err(Error::Config(format!(
                "feature channels {} are not a whole number per frame ({} frames)",
                self.unet.out_channels, self.unet.in_frames
            )));
        }
        if self.l_upper % 2 != 0 || self.l_row == 0 {
            return Err(Error::Config(format!(
                "need even L_upper and L_row >= 1, got {} and {}",
                self.l_upper, self.l_row
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLstmSpec {
    pub input_frames: usize,
    pub layers: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
}

impl ConvLstmSpec {
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.layers == 0 || self.hidden_channels == 0 || self.input_frames == 0 {
            return Err(Error::Config("layers, hidden_channels and input_frames must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CGanSpec {
    pub generator: UNetSpec,
    pub disc_filters: Vec<usize>,
    pub disc_kernel: usize,
    pub lambda_l1: f64,
    pub dropout: f64,
}

impl CGanSpec {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.disc_filters.is_empty() {
            return Err(Error::Config("discriminator needs at least one block".into()));
        }
        if self.lambda_l1 < 0.0 {
            return Err(Error::Config("lambda_l1 must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Unet(UNetSpec),
    AxialUnet(AxialUNetSpec),
    ConvLstm(ConvLstmSpec),
    Cgan(CGanSpec),
}

/// Architecture plus the frame size it was built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub height: usize,
    pub width: usize,
    pub arch: Architecture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Unet,
    AxialUnet,
    ConvLstm,
    Cgan,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::ConvLstm, ModelKind::Cgan, ModelKind::Unet, ModelKind::AxialUnet];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Unet => "unet",
            ModelKind::AxialUnet => "axial-unet",
            ModelKind::ConvLstm => "convlstm",
            ModelKind::Cgan => "cgan",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Unet => "UNet",
            ModelKind::AxialUnet => "Axial-UNet",
            ModelKind::ConvLstm => "ConvLSTM",
            ModelKind::Cgan => "cGANs",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected unet, axial-unet, convlstm or cgan)")))
    }
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self.arch {
            Architecture::Unet(_) => ModelKind::Unet,
            Architecture::AxialUnet(_) => ModelKind::AxialUnet,
            Architecture::ConvLstm(_) => ModelKind::ConvLstm,
            Architecture::Cgan(_) => ModelKind::Cgan,
        }
    }

    /// Number of past frames the model consumes.
    pub fn input_frames(&self) -> usize {
        match &self.arch {
            Architecture::Unet(s) => s.in_frames,
            Architecture::AxialUnet(s) => s.unet.in_frames,
            Architecture::ConvLstm(s) => s.input_frames,
            Architecture::Cgan(s) => s.generator.in_frames,
        }
    }

    /// Full-size configuration at 128×128: channel plan `[16,64,128,256]`,
    /// 128 bins, 64 ConvLSTM channels, discriminator filters `[64,128,256,512]`.
    pub fn full(kind: ModelKind) -> Self {
        let arch = match kind {
            ModelKind::Unet => {
                Architecture::Unet(UNetSpec { in_frames: 16, channel_plan: vec![16, 64, 128, 256], out_channels: 1 })
            }
            ModelKind::AxialUnet => Architecture::AxialUnet(AxialUNetSpec {
                unet: UNetSpec { in_frames: 16, channel_plan: vec![16, 64, 128, 256], out_channels: 16 * 32 },
                attn_channels: 32,
                l_upper: 2,
                l_row: 2,
                heads: 4,
                bins: 128,
            }),
            ModelKind::ConvLstm => {
                Architecture::ConvLstm(ConvLstmSpec { input_frames: 15, layers: 3, hidden_channels: 64, kernel: 3 })
            }
            ModelKind::Cgan => Architecture::Cgan(CGanSpec {
                generator: UNetSpec { in_frames: 4, channel_plan: vec![4, 64, 128, 256], out_channels: 4 },
                disc_filters: vec![64, 128, 256, 512],
                disc_kernel: 4,
                lambda_l1: 100.0,
                dropout: 0.5,
            }),
        };
        ModelSpec { height: 128, width: 128, arch }
    }

    /// Reduced widths for CPU-scale experiments at `size × size`.
    pub fn desk(kind: ModelKind, size: usize) -> Self {
        let arch = match kind {
            ModelKind::Unet => {
                Architecture::Unet(UNetSpec { in_frames: 16, channel_plan: vec![16, 32, 48, 64], out_channels: 1 })
            }
            ModelKind::AxialUnet => Architecture::AxialUnet(AxialUNetSpec {
                unet: UNetSpec { in_frames: 16, channel_plan: vec![16, 32, 48, 64], out_channels: 16 * 16 },
                attn_channels: 16,
                l_upper: 2,
                l_row: 2,
                heads: 4,
                bins: 16,
            }),
            ModelKind::ConvLstm => {
                Architecture::ConvLstm(ConvLstmSpec { input_frames: 15, layers: 3, hidden_channels: 8, kernel: 3 })
            }
            ModelKind::Cgan => Architecture::Cgan(CGanSpec {
                generator: UNetSpec { in_frames: 4, channel_plan: vec![4, 16, 32, 64], out_channels: 4 },
                disc_filters: vec![16, 32, 64, 128],
                disc_kernel: 4,
                lambda_l1: 100.0,
                dropout: 0.5,
            }),
        };
        ModelSpec { height: size, width: size, arch }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.arch {
            Architecture::Unet(s) => {
                s.validate()?;
                s.check_extent(self.height, self.width)
            }
            Architecture::AxialUnet(s) => {
                s.validate()?;
                s.unet.check_extent(self.height, self.width)
            }
            Architecture::ConvLstm(s) => s.validate(),
            Architecture::Cgan(s) => {
                s.validate()?;
                s.generator.check_extent(self.height, self.width)?;
                let k = 1usize << s.disc_filters.len();
                if self.height % k != 0 || self.width % k != 0 {
                    return Err(Error::Config(format!(
                        "discriminator needs extents divisible by {k}, got {}x{}",
                        self.height, self.width
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model spec is always representable as TOML")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Format { kind: "model spec", detail: e.to_string() })
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Net {
    Unet(UNet),
    AxialUnet(AxialUNet),
    ConvLstm(ConvLstm),
    Cgan(CGan),
}

/// A built model: specification, parameters, and the layer structure that
/// indexes into them.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    pub(crate) store: ParamStore,
    pub(crate) net: Net,
}

impl Model {
    /// Builds the architecture with parameters drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SplitMix64::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = match &spec.arch {
            Architecture::Unet(s) => Net::Unet(UNet::new(&mut store, "unet", s, &mut rng)?),
            Architecture::AxialUnet(s) => {
                Net::AxialUnet(AxialUNet::new(&mut store, s, spec.height, spec.width, &mut rng)?)
            }
            Architecture::ConvLstm(s) => Net::ConvLstm(ConvLstm::new(&mut store, s, &mut rng)?),
            Architecture::Cgan(s) => Net::Cgan(CGan::new(&mut store, s, spec.height, spec.width, &mut rng)?),
        };
        Ok(Model { spec, store, net })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn unet(&self) -> Option<&UNet> {
        match &self.net {
            Net::Unet(u) => Some(u),
            _ => None,
        }
    }

    pub fn axial_unet(&self) -> Option<&AxialUNet> {
        match &self.net {
            Net::AxialUnet(a) => Some(a),
            _ => None,
        }
    }

    pub fn convlstm(&self) -> Option<&ConvLstm> {
        match &self.net {
            Net::ConvLstm(c) => Some(c),
            _ => None,
        }
    }

    pub fn cgan(&self) -> Option<&CGan> {
        match &self.net {
            Net::Cgan(c) => Some(c),
            _ => None,
        }
    }

    /// Next-frame prediction for a batch of windows `[N,M,H,W]`, recorded on
    /// `g`. Returns `[N,1,H,W]`. The cGAN returns its first predicted frame.
    pub fn predict_batch(&self, g: &mut Graph<'_>, windows: crate::graph::Var) -> Result<crate::graph::Var> {
        let s = g.shape(windows).to_vec();
        let m = self.spec.input_frames();
        if s.len() != 4 || s[1] != m || s[2] != self.spec.height || s[3] != self.spec.width {
            return Err(Error::shape(
                "predict",
                format!("model expects [N,{m},{},{}], got {:?}", self.spec.height, self.spec.width, s),
            ));
        }
        match &self.net {
            Net::Unet(u) => u.forward(g, windows),
            Net::AxialUnet(a) => a.predict(g, windows),
            Net::ConvLstm(c) => {
                let frames = g.reshape(windows, &[s[0], m, 1, s[2], s[3]])?;
                c.forecast(g, frames)
            }
            Net::Cgan(c) => {
                let out = c.generator.forward(g, windows, Noise::Off)?;
                g.slice(out, 1, 0, 1)
            }
        }
    }

    /// Eval-mode next-frame prediction from one window `[M,H,W]`.
    pub fn predict_next(&self, window: &Tensor) -> Result<Tensor> {
        let s = window.shape();
        if s.len() != 3 {
            return Err(Error::shape("predict_next", format!("expected [M,H,W], got {:?}", s)));
        }
        let batch = window.clone().reshape(&[1, s[0], s[1], s[2]])?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let x = g.input(batch);
        let y = self.predict_batch(&mut g, x)?;
        g.value(y).clone().reshape(&[s[1], s[2]])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: self.spec.to_toml(),
            tensors: self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Rebuilds the architecture named in the checkpoint header and loads
    /// every parameter by name.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec = ModelSpec::from_toml(&ckpt.header)?;
        let mut model = Model::new(spec, 0)?;
        if ckpt.tensors.len() != model.store.len() {
            return Err(Error::Format {
                kind: "checkpoint",
                detail: format!("{} tensors for a model with {}", ckpt.tensors.len(), model.store.len()),
            });
        }
        for (name, t) in &ckpt.tensors {
            let id = model.store.id(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            model.store.set_value(id, t.clone())?;
        }
        Ok(model)
    }
}
