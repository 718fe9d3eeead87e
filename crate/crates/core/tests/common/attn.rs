//! Attention oracles and causality probes.

use axial_nowcast::attention::{AxialAttention, AxialAttentionConfig, Axis, DecoderConfig, InnerDecoder, OuterDecoder};
use axial_nowcast::{Graph, Mode, ParamStore, Tensor};

use super::*;

pub fn build(cfg: AxialAttentionConfig, seed: u64, random_output: bool) -> (ParamStore, AxialAttention) {
    let mut store = ParamStore::new();
    let attn = AxialAttention::new(&mut store, "attn", cfg, &mut rng(seed)).unwrap();
    if random_output {
        let c = cfg.channels;
        store.set_value(attn.output.weight, random(&[c, c], seed + 1)).unwrap();
        store.set_value(attn.output.bias, random(&[c], seed + 2)).unwrap();
        store.set_value(attn.query.bias, random(&[c], seed + 3)).unwrap();
        store.set_value(attn.value.bias, random(&[c], seed + 4)).unwrap();
    }
    (store, attn)
}

pub fn apply(store: &ParamStore, attn: &AxialAttention, x: &Tensor) -> Tensor {
    let mut g = Graph::new(store, Mode::Eval);
    let xv = g.input(x.clone());
    let y = attn.forward(&mut g, xv).unwrap();
    g.value(y).clone()
}

pub fn affine(store: &ParamStore, w: axial_nowcast::ParamId, b: axial_nowcast::ParamId, x: &[f64]) -> Vec<f64> {
    let (w, b) = (store.value(w), store.value(b));
    let c = x.len();
    (0..c).map(|o| b.data()[o] + (0..c).map(|k| w.data()[o * c + k] * x[k]).sum::<f64>()).collect()
}

/// Plain multi-head self-attention over a token list, written out with loops.
pub fn dense_attention(store: &ParamStore, attn: &AxialAttention, tokens: &[Vec<f64>], causal: bool) -> Vec<Vec<f64>> {
    let c = tokens[0].len();
    let heads = attn.cfg.heads;
    let dh = c / heads;
    let q: Vec<_> = tokens.iter().map(|t| affine(store, attn.query.weight, attn.query.bias, t)).collect();
    let k: Vec<_> = tokens.iter().map(|t| affine(store, attn.key.weight, attn.key.bias, t)).collect();
    let v: Vec<_> = tokens.iter().map(|t| affine(store, attn.value.weight, attn.value.bias, t)).collect();
    let l = tokens.len();
    let mut out = Vec::with_capacity(l);
    for i in 0..l {
        let mut mixed = vec![0.0; c];
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            let visible = if causal { i + 1 } else { l };
            let logits: Vec<f64> =
                (0..visible).map(|j| r.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for d in r.clone() {
                    mixed[d] += ej / z * v[j][d];
                }
            }
        }
        let o = affine(store, attn.output.weight, attn.output.bias, &mixed);
        out.push(tokens[i].iter().zip(&o).map(|(a, b)| a + b).collect());
    }
    out
}

pub fn single_row_matches_dense_attention_oracle() {
    for masked in [false, true] {
        let cfg = AxialAttentionConfig { channels: 4, heads: 2, axis: Axis::Row, masked };
        let (store, attn) = build(cfg, 10, true);
        let x = random(&[1, 4, 1, 4], 11);
        let y = apply(&store, &attn, &x);
        let tokens: Vec<Vec<f64>> = (0..4).map(|j| (0..4).map(|c| x.at(&[0, c, 0, j])).collect()).collect();
        let oracle = dense_attention(&store, &attn, &tokens, masked);
        for j in 0..4 {
            for c in 0..4 {
                assert!((y.at(&[0, c, 0, j]) - oracle[j][c]).abs() < 1e-10, "masked={masked}");
            }
        }
    }
}

pub fn single_column_matches_dense_attention_oracle() {
    let cfg = AxialAttentionConfig { channels: 4, heads: 4, axis: Axis::Column, masked: false };
    let (store, attn) = build(cfg, 12, true);
    let x = random(&[1, 4, 5, 1], 13);
    let y = apply(&store, &attn, &x);
    let tokens: Vec<Vec<f64>> = (0..5).map(|i| (0..4).map(|c| x.at(&[0, c, i, 0])).collect()).collect();
    let oracle = dense_attention(&store, &attn, &tokens, false);
    for i in 0..5 {
        for c in 0..4 {
            assert!((y.at(&[0, c, i, 0]) - oracle[i][c]).abs() < 1e-10);
        }
    }
}

pub fn masked_row_is_causal_for_every_column() {
    let cfg = AxialAttentionConfig { channels: 1, heads: 1, axis: Axis::Row, masked: true };
    let (store, attn) = build(cfg, 20, true);
    let x = random(&[1, 1, 2, 6], 21);
    let base = apply(&store, &attn, &x);
    for jp in 0..6 {
        let mut p = x.clone();
        for i in 0..2 {
            p.set(&[0, 0, i, jp], p.at(&[0, 0, i, jp]) + 3.0);
        }
        let y = apply(&store, &attn, &p);
        for i in 0..2 {
            for j in 0..jp {
                assert_eq!(y.at(&[0, 0, i, j]), base.at(&[0, 0, i, j]), "column {j} saw column {jp}");
            }
        }
    }
}

pub fn zero_projections(store: &mut ParamStore, blocks: &[&axial_nowcast::attention::TransformerBlock]) {
    for b in blocks {
        for id in b.output_projections() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
    }
}

pub fn run_inner(store: &ParamStore, d: &InnerDecoder, x: &Tensor) -> Tensor {
    let mut g = Graph::new(store, Mode::Eval);
    let xv = g.input(x.clone());
    let y = d.forward(&mut g, xv).unwrap();
    g.value(y).clone()
}

pub fn run_outer(store: &ParamStore, d: &OuterDecoder, x: &Tensor) -> Tensor {
    let mut g = Graph::new(store, Mode::Eval);
    let xv = g.input(x.clone());
    let y = d.forward(&mut g, xv).unwrap();
    g.value(y).clone()
}

pub fn shift(x: &Tensor, di: usize, dj: usize) -> Tensor {
    let s = x.shape().to_vec();
    Tensor::from_fn(&s, |k| {
        let (i, j) = ((k / s[3]) % s[2], k % s[3]);
        if i < di || j < dj {
            0.0
        } else {
            x.data()[k - di * s[3] - dj]
        }
    })
}

pub fn plus(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |k| a.data()[k] + b.data()[k])
}

pub fn inner_decoder_shape_identity_and_causality() {
    let cfg = DecoderConfig { channels: 4, heads: 2, height: 4, width: 4 };
    let mut store = ParamStore::new();
    let d = InnerDecoder::new(&mut store, "inner", cfg, 2, &mut rng(30)).unwrap();
    let x = random(&[2, 4, 4, 4], 31);
    let y = run_inner(&store, &d, &x);
    assert_eq!(y.shape(), x.shape());

    // Raster causality along rows: output (i, j) ignores input (i, j' >= j)
    // and every other row.
    for ip in 0..4 {
        for jp in 0..4 {
            let mut p = x.clone();
            for c in 0..4 {
                p.set(&[0, c, ip, jp], p.at(&[0, c, ip, jp]) + 1.0);
            }
            let yp = run_inner(&store, &d, &p);
            for i in 0..4 {
                for j in 0..4 {
                    if i != ip || j <= jp {
                        for c in 0..4 {
                            assert_eq!(yp.at(&[0, c, i, j]), y.at(&[0, c, i, j]), "({i},{j}) saw ({ip},{jp})");
                        }
                    }
                }
            }
        }
    }

    let blocks: Vec<_> = d.blocks.iter().collect();
    zero_projections(&mut store, &blocks);
    let pos = Tensor::stack(&[d.pos.dense(&store), d.pos.dense(&store)]).unwrap();
    let expect = plus(&shift(&x, 0, 1), &pos);
    assert!(run_inner(&store, &d, &x).max_abs_diff(&expect) < 1e-15);
}

pub fn outer_decoder_is_raster_causal_exhaustively() {
    let cfg = DecoderConfig { channels: 4, heads: 2, height: 4, width: 4 };
    let mut store = ParamStore::new();
    let d = OuterDecoder::new(&mut store, "outer", cfg, 2, 2, &mut rng(34)).unwrap();
    // Non-zero output projections so every sublayer actually mixes.
    for b in d.blocks() {
        for id in b.output_projections() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, random(&shape, id.index() as u64)).unwrap();
        }
    }
    let x = random(&[1, 4, 4, 4], 35);
    let y = run_outer(&store, &d, &x);
    let mut influenced = 0;
    for ip in 0..4 {
        for jp in 0..4 {
            let mut p = x.clone();
            for c in 0..4 {
                p.set(&[0, c, ip, jp], p.at(&[0, c, ip, jp]) - 2.0);
            }
            let yp = run_outer(&store, &d, &p);
            for i in 0..4 {
                for j in 0..4 {
                    let later = ip > i || (ip == i && jp >= j);
                    let same = (0..4).all(|c| yp.at(&[0, c, i, j]) == y.at(&[0, c, i, j]));
                    if later {
                        assert!(same, "({i},{j}) saw raster-later ({ip},{jp})");
                    } else if !same {
                        influenced += 1;
                    }
                }
            }
        }
    }
    // The causal mask should not also disconnect earlier pixels.
    assert!(influenced > 100, "only {influenced} earlier-pixel influences observed");
}
