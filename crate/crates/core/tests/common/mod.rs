#![allow(dead_code)]

pub mod attn;
pub mod gradsuite;
pub mod metric;
pub mod pipe;
pub mod rollout;

use axial_nowcast::{Graph, Mode, ParamId, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a floor on the denominator so that two gradients
/// that are both numerically zero compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

pub fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

pub fn random_unit(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.0, 1.0, &mut rng(seed))
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    /// Out-of-tolerance coordinates whose `±h` evaluations took different
    /// piecewise branches. A central difference across a kink is not an
    /// oracle for the derivative, so these are replaced by fresh samples;
    /// a mismatch on a single smooth piece always fails.
    pub straddled: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradCheck {
    fn new() -> Self {
        GradCheck { checked: 0, straddled: 0, max_rel: 0.0, worst: String::new() }
    }

    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(e);
            self.worst = format!("{what}: analytic {analytic:e} numeric {numeric:e}");
        }
    }

    pub fn assert_ok(&self, min_coords: usize) {
        eprintln!("gradcheck: {} coordinates, {} straddled, max rel {:e}", self.checked, self.straddled, self.max_rel);
        assert!(self.checked >= min_coords, "only {} coordinates checked", self.checked);
        assert!(self.straddled <= self.checked, "{} of {} coordinates straddled a kink", self.straddled, self.checked);
        assert!(self.max_rel < FD_TOL, "max relative error {:e} at {}", self.max_rel, self.worst);
    }
}

/// Projects an output onto a fixed random direction so that every output
/// element carries a distinct weight in the scalar loss.
pub fn project(g: &mut Graph<'_>, y: Var, seed: u64) -> Var {
    let w = random(g.shape(y), seed ^ 0x9e37);
    let w = g.input(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

fn eval_loss(store: &ParamStore, mode: Mode, f: &dyn Fn(&mut Graph<'_>) -> Result<Var>) -> (f64, u64) {
    let mut g = Graph::new(store, mode);
    let l = f(&mut g).unwrap();
    (g.value(l).item(), g.branch_signature())
}

const RETRIES: usize = 20;

/// Central-difference check on `coords` sampled parameter coordinates.
/// Every trainable tensor contributes at least one coordinate.
pub fn check_params(
    store: &ParamStore,
    mode: Mode,
    coords: usize,
    seed: u64,
    f: &dyn Fn(&mut Graph<'_>) -> Result<Var>,
) -> GradCheck {
    let mut store = store.clone();
    let grads = {
        let mut g = Graph::new(&store, mode);
        let l = f(&mut g).unwrap();
        g.backward(l).unwrap()
    };
    grads.write_to(&mut store);
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut r = rng(seed);
    let mut picks: Vec<(ParamId, usize)> =
        ids.iter().map(|&id| (id, r.random_range(0..store.get(id).value.numel()))).collect();
    while picks.len() < coords {
        let id = ids[r.random_range(0..ids.len())];
        picks.push((id, r.random_range(0..store.get(id).value.numel())));
    }
    let mut out = GradCheck::new();
    for (id, mut k) in picks {
        let n = store.get(id).value.numel();
        let mut tries = 0;
        loop {
            let analytic = store.get(id).grad.data()[k];
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + FD_STEP;
            let (up, sig_up) = eval_loss(&store, mode, f);
            store.get_mut(id).value.data_mut()[k] = orig - FD_STEP;
            let (down, sig_down) = eval_loss(&store, mode, f);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            if sig_up == sig_down || rel_err(analytic, numeric) < FD_TOL {
                out.record(format!("{}[{k}]", store.get(id).name), analytic, numeric);
                break;
            }
            out.straddled += 1;
            tries += 1;
            assert!(tries < RETRIES, "no smooth coordinate found in {}", store.get(id).name);
            k = r.random_range(0..n);
        }
    }
    out
}

/// Central-difference check on every coordinate of every input tensor.
pub fn check_inputs(inputs: &[Tensor], f: &dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>) -> GradCheck {
    let run = |ts: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
        let mut g = Graph::standalone();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vars).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).item(), vars.iter().map(|&v| grads.wrt(v).cloned()).collect())
    };
    let (_, analytic) = run(inputs);
    let value = |ts: &[Tensor]| -> (f64, u64) {
        let mut g = Graph::standalone();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vars).unwrap();
        (g.value(l).item(), g.branch_signature())
    };
    let mut out = GradCheck::new();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for k in 0..inputs[i].numel() {
            let a = analytic[i].as_ref().map_or(0.0, |t| t.data()[k]);
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + FD_STEP;
            let (up, sig_up) = value(&work);
            work[i].data_mut()[k] = orig - FD_STEP;
            let (down, sig_down) = value(&work);
            work[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            if sig_up != sig_down && rel_err(a, numeric) >= FD_TOL {
                out.straddled += 1;
                continue;
            }
            out.record(format!("input {i}[{k}]"), a, numeric);
        }
    }
    out
}
