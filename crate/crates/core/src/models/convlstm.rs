use rand::Rng;

use super::ConvLstmSpec;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{join, Conv2d};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Hidden and cell state of one ConvLSTM layer, both `[N,hidden,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// One convolutional LSTM layer. A single convolution over `[x, h]` yields
/// the four gate pre-activations, stacked in the order `i, f, o, g`.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub gates: Conv2d,
    pub input_channels: usize,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_channels: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let gates = Conv2d::new(
            store,
            &join(prefix, "gates"),
            input_channels + hidden,
            4 * hidden,
            kernel,
            1,
            (kernel - 1) / 2,
            rng,
        )?;
        Ok(ConvLstmCell { gates, input_channels, hidden })
    }

    pub fn zero_state(&self, g: &mut Graph<'_>, n: usize, h: usize, w: usize) -> LstmState {
        let shape = [n, self.hidden, h, w];
        LstmState { h: g.input(Tensor::zeros(&shape)), c: g.input(Tensor::zeros(&shape)) }
    }

    pub fn step(&self, g: &mut Graph<'_>, x: Var, state: LstmState) -> Result<LstmState> {
        let xs = g.shape(x).to_vec();
        let hs = g.shape(state.h).to_vec();
        if xs.len() != 4
            || xs[1] != self.input_channels
            || hs != [xs[0], self.hidden, xs[2], xs[3]]
            || g.shape(state.c) != hs.as_slice()
        {
            return Err(Error::shape(
                "convlstm_step",
                format!(
                    "input {:?} (expects {} channels) vs state h {:?}, c {:?}",
                    xs,
                    self.input_channels,
                    hs,
                    g.shape(state.c)
                ),
            ));
        }
        let xh = g.concat(x, state.h, 1)?;
        let z = self.gates.forward(g, xh)?;
        let k = self.hidden;
        let i = g.slice(z, 1, 0, k)?;
        let f = g.slice(z, 1, k, k)?;
        let o = g.slice(z, 1, 2 * k, k)?;
        let gg = g.slice(z, 1, 3 * k, k)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let o = g.sigmoid(o);
        let gg = g.tanh(gg);
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, gg)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// Stacked ConvLSTM unrolled over the input window; the top layer's last
/// hidden state goes through a 1×1 convolution and a sigmoid.
#[derive(Clone, Debug)]
pub struct ConvLstm {
    pub spec: ConvLstmSpec,
    pub cells: Vec<ConvLstmCell>,
    pub head: Conv2d,
}

impl ConvLstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: &ConvLstmSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut cells = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let cin = if l == 0 { 1 } else { spec.hidden_channels };
            cells.push(ConvLstmCell::new(store, &format!("lstm{l}"), cin, spec.hidden_channels, spec.kernel, rng)?);
        }
        let head = Conv2d::new(store, "head", spec.hidden_channels, 1, 1, 1, 0, rng)?;
        Ok(ConvLstm { spec: spec.clone(), cells, head })
    }

    /// `frames` is `[N,T,1,H,W]` with `T == input_frames`; returns `[N,1,H,W]`.
    pub fn forecast(&self, g: &mut Graph<'_>, frames: Var) -> Result<Var> {
        let s = g.shape(frames).to_vec();
        if s.len() != 5 || s[1] != self.spec.input_frames || s[2] != 1 {
            return Err(Error::shape(
                "convlstm_forecast",
                format!("expected [N,{},1,H,W], got {:?}", self.spec.input_frames, s),
            ));
        }
        let (n, t, h, w) = (s[0], s[1], s[3], s[4]);
        let mut states: Vec<LstmState> = self.cells.iter().map(|c| c.zero_state(g, n, h, w)).collect();
        for step in 0..t {
            let x = g.slice(frames, 1, step, 1)?;
            let mut x = g.reshape(x, &[n, 1, h, w])?;
            for (cell, state) in self.cells.iter().zip(states.iter_mut()) {
                *state = cell.step(g, x, *state)?;
                x = state.h;
            }
        }
        let top = states.last().expect("at least one layer").h;
        let y = self.head.forward(g, top)?;
        Ok(g.sigmoid(y))
    }
}
