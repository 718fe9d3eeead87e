//! Axial self-attention and the row/column decoder stacks built from it.
//!
//! Public entry points take feature maps in `[N,C,H,W]` layout. Internally the
//! stacks run channels-last (`[N,H,W,C]`) so that layer norm, projections and
//! the feed-forward act on the trailing axis without repeated transposes.

use std::cell::Cell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{join, LayerNorm, Linear, LinearInit};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive logit penalty for positions a masked layer may not see.
pub const MASK_PENALTY: f64 = -1e9;

/// Axis a layer attends along: `Row` mixes pixels sharing a row (tokens run
/// along W), `Column` mixes pixels sharing a column (tokens run along H).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxialAttentionConfig {
    pub channels: usize,
    pub heads: usize,
    pub axis: Axis,
    /// Causal along the attended axis.
    pub masked: bool,
}

impl AxialAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

thread_local! {
    static SCORE_ELEMENTS: Cell<usize> = const { Cell::new(0) };
}

/// Number of attention-score entries materialized on this thread since the
/// last [`reset_score_counter`].
pub fn score_elements() -> usize {
    SCORE_ELEMENTS.with(|c| c.get())
}

pub fn reset_score_counter() {
    SCORE_ELEMENTS.with(|c| c.set(0));
}

/// Multi-head scaled dot-product attention restricted to one axis.
#[derive(Clone, Debug)]
pub struct AxialAttention {
    pub cfg: AxialAttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AxialAttention {
    /// Q/K/V weights are `U(-1/√C, 1/√C)`; the output projection starts at
    /// zero so the residual path is an exact identity at init.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: AxialAttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let a = 1.0 / (c as f64).sqrt();
        Ok(AxialAttention {
            cfg,
            query: Linear::new(store, &join(prefix, "query"), c, c, LinearInit::Uniform(a), rng)?,
            key: Linear::new(store, &join(prefix, "key"), c, c, LinearInit::Uniform(a), rng)?,
            value: Linear::new(store, &join(prefix, "value"), c, c, LinearInit::Uniform(a), rng)?,
            output: Linear::new(store, &join(prefix, "output"), c, c, LinearInit::Zeros, rng)?,
        })
    }

    /// `x + attention(x)` for `x: [N,C,H,W]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.channels {
            return Err(Error::shape(
                "axial_attention",
                format!("expected [N,{},H,W], got {:?}", self.cfg.channels, s),
            ));
        }
        let nhwc = g.permute(x, &[0, 2, 3, 1])?;
        let delta = self.attend_nhwc(g, nhwc)?;
        let delta = g.permute(delta, &[0, 3, 1, 2])?;
        g.add(x, delta)
    }

    /// Attention output (no residual) for channels-last `x: [N,H,W,C]`.
    pub(crate) fn attend_nhwc(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self.cfg.axis {
            Axis::Row => self.attend_tokens(g, x),
            Axis::Column => {
                let t = g.permute(x, &[0, 2, 1, 3])?;
                let y = self.attend_tokens(g, t)?;
                g.permute(y, &[0, 2, 1, 3])
            }
        }
    }

    /// Self-attention along axis 2 of `x: [N,A,L,C]`, independently for
    /// every `(n, a)`.
    fn attend_tokens(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, a, l, c) = (s[0], s[1], s[2], s[3]);
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let batch = n * a * heads;
        let split = |g: &mut Graph<'_>, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[n * a, l, heads, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[batch, l, dh])
        };
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);

        let scores = g.matmul(q, k, true)?;
        SCORE_ELEMENTS.with(|cnt| cnt.set(cnt.get() + batch * l * l));
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if self.cfg.masked {
            let mask = g.input(causal_mask(l));
            scores = g.add(scores, mask)?;
        }
        let weights = g.softmax(scores, 2)?;
        let o = g.matmul(weights, v, false)?;
        let o = g.reshape(o, &[n * a, heads, l, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[n, a, l, c])?;
        self.output.forward(g, o)
    }
}

/// `[L,L]` additive mask: 0 where key index ≤ query index, penalty above.
pub fn causal_mask(l: usize) -> Tensor {
    Tensor::from_fn(&[l, l], |i| if i % l > i / l { MASK_PENALTY } else { 0.0 })
}

/// Pre-norm transformer block: `y = x + Attn(LN(x))`, `z = y + FF(LN(y))`
/// with a two-layer ReLU feed-forward of hidden width `2·C`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: AxialAttention,
    pub norm2: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: AxialAttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.channels;
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, &join(prefix, "norm1"), c)?,
            attention: AxialAttention::new(store, &join(prefix, "attention"), cfg, rng)?,
            norm2: LayerNorm::new(store, &join(prefix, "norm2"), c)?,
            ff_in: Linear::new(store, &join(prefix, "ff_in"), c, 2 * c, LinearInit::HeUniform, rng)?,
            ff_out: Linear::new(store, &join(prefix, "ff_out"), 2 * c, c, LinearInit::HeUniform, rng)?,
        })
    }

    /// Output projections of both sublayers (attention and feed-forward).
    pub fn output_projections(&self) -> [ParamId; 4] {
        [self.attention.output.weight, self.attention.output.bias, self.ff_out.weight, self.ff_out.bias]
    }

    pub(crate) fn forward_nhwc(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n1 = self.norm1.forward(g, x)?;
        let a = self.attention.attend_nhwc(g, n1)?;
        let y = g.add(x, a)?;
        let n2 = self.norm2.forward(g, y)?;
        let f = self.ff_in.forward(g, n2)?;
        let f = g.relu(f);
        let f = self.ff_out.forward(g, f)?;
        g.add(y, f)
    }

    /// Block applied to `x: [N,C,H,W]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let t = g.permute(x, &[0, 2, 3, 1])?;
        let t = self.forward_nhwc(g, t)?;
        g.permute(t, &[0, 3, 1, 2])
    }
}

/// Learned additive embeddings factorized per axis.
#[derive(Clone, Debug)]
pub struct PositionEmbeddings {
    /// `[H, C]`
    pub row: ParamId,
    /// `[W, C]`
    pub col: ParamId,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl PositionEmbeddings {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        height: usize,
        width: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        const SCALE: f64 = 0.02;
        Ok(PositionEmbeddings {
            row: store.add(join(prefix, "row"), Tensor::uniform(&[height, channels], -SCALE, SCALE, rng), true)?,
            col: store.add(join(prefix, "col"), Tensor::uniform(&[width, channels], -SCALE, SCALE, rng), true)?,
            height,
            width,
            channels,
        })
    }

    /// Adds both tables to channels-last `x: [N,H,W,C]`.
    pub(crate) fn add_nhwc(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s[1..] != [self.height, self.width, self.channels] {
            return Err(Error::shape(
                "position embeddings",
                format!("tables are {}x{}x{}, feature map is {:?}", self.height, self.width, self.channels, s),
            ));
        }
        let row = g.param(self.row)?;
        let row = g.reshape(row, &[self.height, 1, self.channels])?;
        let col = g.param(self.col)?;
        let x = g.add(x, row)?;
        g.add(x, col)
    }

    /// Embedding tensor `[C,H,W]` (row + column) as a plain value.
    pub fn dense(&self, store: &ParamStore) -> Tensor {
        let (row, col) = (store.value(self.row), store.value(self.col));
        let (h, w, c) = (self.height, self.width, self.channels);
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
            row.data()[y * c + ch] + col.data()[x * c + ch]
        })
    }
}

/// Shapes and depths of a decoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub channels: usize,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
}

impl DecoderConfig {
    fn attn(&self, axis: Axis, masked: bool) -> AxialAttentionConfig {
        AxialAttentionConfig { channels: self.channels, heads: self.heads, axis, masked }
    }
}

/// Row-wise causal stack: `h ← ShiftRight(h) + Pos`, then `L_row` masked row
/// blocks. Output pixel `(i, j)` sees only `(i, j' < j)` of the input.
#[derive(Clone, Debug)]
pub struct InnerDecoder {
    pub pos: PositionEmbeddings,
    pub blocks: Vec<TransformerBlock>,
}

impl InnerDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: DecoderConfig,
        l_row: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if l_row == 0 {
            return Err(Error::Config("inner decoder needs L_row >= 1".into()));
        }
        let pos = PositionEmbeddings::new(store, &join(prefix, "pos"), cfg.height, cfg.width, cfg.channels, rng)?;
        let blocks = (0..l_row)
            .map(|i| TransformerBlock::new(store, &join(prefix, &format!("row{i}")), cfg.attn(Axis::Row, true), rng))
            .collect::<Result<_>>()?;
        Ok(InnerDecoder { pos, blocks })
    }

    pub fn forward(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let t = g.permute(h, &[0, 2, 3, 1])?;
        let t = g.shift(t, 2)?;
        let mut t = self.pos.add_nhwc(g, t)?;
        for b in &self.blocks {
            t = b.forward_nhwc(g, t)?;
        }
        g.permute(t, &[0, 3, 1, 2])
    }
}

/// Raster-causal stack. Context from rows above is built by `L_upper/2`
/// pairs of (unmasked row block, masked column block), shifted down one row,
/// merged with the right-shifted input, then refined by `L_row` masked row
/// blocks. Output pixel `(i, j)` sees only input pixels strictly earlier in
/// raster order.
#[derive(Clone, Debug)]
pub struct OuterDecoder {
    pub pos: PositionEmbeddings,
    pub upper: Vec<(TransformerBlock, TransformerBlock)>,
    pub rows: Vec<TransformerBlock>,
}

impl OuterDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: DecoderConfig,
        l_upper: usize,
        l_row: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if l_upper % 2 != 0 {
            return Err(Error::Config(format!("L_upper must be even, got {l_upper}")));
        }
        if l_row == 0 {
            return Err(Error::Config("outer decoder needs L_row >= 1".into()));
        }
        let pos = PositionEmbeddings::new(store, &join(prefix, "pos"), cfg.height, cfg.width, cfg.channels, rng)?;
        let mut upper = Vec::with_capacity(l_upper / 2);
        for i in 0..l_upper / 2 {
            let row =
                TransformerBlock::new(store, &join(prefix, &format!("upper{i}.row")), cfg.attn(Axis::Row, false), rng)?;
            let col = TransformerBlock::new(
                store,
                &join(prefix, &format!("upper{i}.col")),
                cfg.attn(Axis::Column, true),
                rng,
            )?;
            upper.push((row, col));
        }
        let rows = (0..l_row)
            .map(|i| TransformerBlock::new(store, &join(prefix, &format!("row{i}")), cfg.attn(Axis::Row, true), rng))
            .collect::<Result<_>>()?;
        Ok(OuterDecoder { pos, upper, rows })
    }

    /// All blocks, in application order.
    pub fn blocks(&self) -> impl Iterator<Item = &TransformerBlock> {
        self.upper.iter().flat_map(|(r, c)| [r, c]).chain(&self.rows)
    }

    pub fn forward(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let h = g.permute(h, &[0, 2, 3, 1])?;
        let mut u = self.pos.add_nhwc(g, h)?;
        for (row, col) in &self.upper {
            u = row.forward_nhwc(g, u)?;
            u = col.forward_nhwc(g, u)?;
        }
        let down = g.shift(u, 1)?;
        let right = g.shift(h, 2)?;
        let t = g.add(down, right)?;
        let mut t = self.pos.add_nhwc(g, t)?;
        for b in &self.rows {
            t = b.forward_nhwc(g, t)?;
        }
        g.permute(t, &[0, 3, 1, 2])
    }
}
