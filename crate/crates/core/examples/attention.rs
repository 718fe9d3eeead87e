//! Axial self-attention along rows and columns, and the raster-causal
//! outer decoder built from it.

use axial_nowcast::attention::{
    reset_score_counter, score_elements, AxialAttention, AxialAttentionConfig, Axis, DecoderConfig, OuterDecoder,
};
use axial_nowcast::{Graph, Mode, ParamStore, Tensor};
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

fn main() -> axial_nowcast::Result<()> {
    let mut rng = SplitMix64::seed_from_u64(4);
    let (c, hw) = (16, 24);
    let x = Tensor::uniform(&[1, c, hw, hw], -1.0, 1.0, &mut rng);

    let mut store = ParamStore::new();
    let row = AxialAttentionConfig { channels: c, heads: 4, axis: Axis::Row, masked: false };
    let col = AxialAttentionConfig { axis: Axis::Column, ..row };
    let row_attn = AxialAttention::new(&mut store, "row", row, &mut rng)?;
    let col_attn = AxialAttention::new(&mut store, "col", col, &mut rng)?;

    reset_score_counter();
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.input(x.clone());
    let y = row_attn.forward(&mut g, xv)?;
    let y = col_attn.forward(&mut g, y)?;
    println!("row then column attention: {:?} -> {:?}", x.shape(), g.value(y).shape());
    let full = 4 * (hw * hw) * (hw * hw);
    println!("attention scores held: {} (full attention would hold {full})", score_elements());

    // Editing one pixel may only move pixels after it in raster order.
    let cfg = DecoderConfig { channels: c, heads: 4, height: 8, width: 8 };
    let mut store = ParamStore::new();
    let dec = OuterDecoder::new(&mut store, "outer", cfg, 2, 1, &mut rng)?;
    for b in dec.blocks() {
        for id in b.output_projections() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::uniform(&shape, -0.3, 0.3, &mut rng))?;
        }
    }
    let run = |input: &Tensor| -> axial_nowcast::Result<Tensor> {
        let mut g = Graph::new(&store, Mode::Eval);
        let v = g.input(input.clone());
        let out = dec.forward(&mut g, v)?;
        Ok(g.value(out).clone())
    };
    let x = Tensor::uniform(&[1, c, 8, 8], -1.0, 1.0, &mut rng);
    let mut edited = x.clone();
    for ch in 0..c {
        edited.set(&[0, ch, 3, 4], 5.0);
    }
    let (a, b) = (run(&x)?, run(&edited)?);
    let moved: Vec<usize> =
        (0..64).filter(|&p| (0..c).any(|ch| a.at(&[0, ch, p / 8, p % 8]) != b.at(&[0, ch, p / 8, p % 8]))).collect();
    let first = moved.first().map(|p| (p / 8, p % 8));
    println!("editing pixel (3,4) moved {} pixels, the earliest at {first:?}", moved.len());
    Ok(())
}
