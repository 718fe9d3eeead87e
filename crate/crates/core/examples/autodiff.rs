//! Reverse-mode gradients through conv, rectifier, pooling and tanh,
//! compared against central differences.

use axial_nowcast::{Graph, Tensor};
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

fn forward(x: &Tensor, w: &Tensor) -> (f64, Tensor) {
    let mut g = Graph::standalone();
    let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
    let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
    let y = g.relu(y);
    let y = g.maxpool2d(y, 2, 2).unwrap();
    let y = g.tanh(y);
    let l = g.mean(y);
    let grads = g.backward(l).unwrap();
    (g.value(l).item(), grads.wrt(wv).unwrap().clone())
}

fn main() {
    let mut rng = SplitMix64::seed_from_u64(1);
    let x = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
    let (loss, grad) = forward(&x, &w);
    println!("loss {loss:.6}, dL/dw has shape {:?}", grad.shape());

    let h = 1e-5;
    println!("{:>5} {:>14} {:>14}", "coord", "analytic", "numeric");
    for k in (0..w.numel()).step_by(17) {
        let mut up = w.clone();
        up.data_mut()[k] += h;
        let mut down = w.clone();
        down.data_mut()[k] -= h;
        let numeric = (forward(&x, &up).0 - forward(&x, &down).0) / (2.0 * h);
        println!("{k:>5} {:>14.8e} {numeric:>14.8e}", grad.data()[k]);
    }
}
