use rand::{Rng, RngCore};

use super::{CGanSpec, DecoderDropout, UNet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{join, BatchNorm2d, Conv2d, Linear, LinearInit};
use crate::params::ParamStore;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Generator noise source. The generator has no explicit noise input;
/// stochasticity comes from dropout in the decoder while training.
pub enum Noise<'r> {
    Off,
    Dropout(&'r mut dyn RngCore),
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub unet: UNet,
    pub dropout: f64,
}

impl Generator {
    /// Maps conditioning frames `[N,C,H,W]` to the same number of future
    /// frames in `[0,1]`.
    pub fn forward(&self, g: &mut Graph<'_>, cond: Var, noise: Noise<'_>) -> Result<Var> {
        let dropout = match noise {
            Noise::Off => None,
            Noise::Dropout(rng) => Some(DecoderDropout { p: self.dropout, rng }),
        };
        let y = self.unet.forward_traced(g, cond, dropout)?.output;
        Ok(g.sigmoid(y))
    }
}

/// Strided conv blocks (kernel 4, stride 2, padding 1) with LeakyReLU and
/// batch normalization on all but the first, then a linear score.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    pub norms: Vec<Option<BatchNorm2d>>,
    pub score: Linear,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Discriminator {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        filters: &[usize],
        kernel: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(filters.len());
        let mut norms = Vec::with_capacity(filters.len());
        let mut cin = in_channels;
        for (k, &f) in filters.iter().enumerate() {
            let p = join(prefix, &format!("block{k}"));
            convs.push(Conv2d::new(store, &join(&p, "conv"), cin, f, kernel, 2, 1, rng)?);
            norms.push(if k == 0 { None } else { Some(BatchNorm2d::new(store, &join(&p, "bn"), f)?) });
            cin = f;
        }
        let (h, w) = Self::final_extent(height, width, filters.len(), kernel)?;
        let score = Linear::new(store, &join(prefix, "score"), cin * h * w, 1, LinearInit::HeUniform, rng)?;
        Ok(Discriminator { convs, norms, score, in_channels, height, width })
    }

    fn final_extent(mut h: usize, mut w: usize, blocks: usize, kernel: usize) -> Result<(usize, usize)> {
        for _ in 0..blocks {
            if h + 2 < kernel || w + 2 < kernel {
                return Err(Error::shape("discriminator", format!("extent {h}x{w} too small for kernel {kernel}")));
            }
            h = (h + 2 - kernel) / 2 + 1;
            w = (w + 2 - kernel) / 2 + 1;
        }
        Ok((h, w))
    }

    /// Real/fake logit `[N,1]` for each (condition, candidate) pair.
    pub fn forward(&self, g: &mut Graph<'_>, cond: Var, candidate: Var) -> Result<Var> {
        let x = g.concat(cond, candidate, 1)?;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_channels || s[2] != self.height || s[3] != self.width {
            return Err(Error::shape(
                "discriminator",
                format!(
                    "expected [N,{},{},{}] after concatenation, got {:?}",
                    self.in_channels, self.height, self.width, s
                ),
            ));
        }
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(g, h)?;
            if let Some(bn) = norm {
                h = bn.forward(g, h)?;
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let flat: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[s[0], flat])?;
        self.score.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct CGan {
    pub spec: CGanSpec,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl CGan {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: &CGanSpec,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let unet = UNet::new(store, "generator", &spec.generator, rng)?;
        let generator = Generator { unet, dropout: spec.dropout };
        let in_channels = spec.generator.in_frames + spec.generator.out_channels;
        let discriminator = Discriminator::new(
            store,
            "discriminator",
            in_channels,
            &spec.disc_filters,
            spec.disc_kernel,
            height,
            width,
            rng,
        )?;
        Ok(CGan { spec: spec.clone(), generator, discriminator })
    }

    /// Parameters owned by the generator, by name prefix.
    pub fn generator_params(&self, store: &ParamStore) -> Vec<crate::params::ParamId> {
        prefixed(store, "generator.")
    }

    pub fn discriminator_params(&self, store: &ParamStore) -> Vec<crate::params::ParamId> {
        prefixed(store, "discriminator.")
    }
}

fn prefixed(store: &ParamStore, prefix: &str) -> Vec<crate::params::ParamId> {
    store.iter().filter(|(_, p)| p.trainable && p.name.starts_with(prefix)).map(|(id, _)| id).collect()
}
