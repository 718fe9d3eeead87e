//! Rollout stub and future-independence check.

use std::cell::RefCell;

use axial_nowcast::data::FrameSequence;
use axial_nowcast::metrics::SsimMode;
use axial_nowcast::models::{Architecture, UNetSpec};
use axial_nowcast::training::{evaluate, rollout, Forecaster};
use axial_nowcast::{Model, ModelSpec, Tensor};

use super::*;

/// Returns the last frame, optionally scaled, and logs every window it sees.
pub struct Stub {
    pub m: usize,
    pub gain: f64,
    pub seen: RefCell<Vec<Tensor>>,
}

impl Stub {
    pub fn new(m: usize, gain: f64) -> Self {
        Stub { m, gain, seen: RefCell::new(vec![]) }
    }
}

impl Forecaster for Stub {
    fn input_frames(&self) -> usize {
        self.m
    }
    fn predict_next(&self, window: &Tensor) -> axial_nowcast::Result<Tensor> {
        self.seen.borrow_mut().push(window.clone());
        Ok(window.index_first(self.m - 1).map(|v| v * self.gain))
    }
    fn label(&self) -> String {
        "stub".into()
    }
}

pub fn sequence(frames: Tensor, source: u32) -> FrameSequence {
    FrameSequence::new(frames, source, 0).unwrap()
}

pub fn evaluation_never_reads_the_future() {
    let clean = random_unit(&[7, 4, 4], 6);
    let mut garbage = clean.clone();
    for v in &mut garbage.data_mut()[3 * 16..] {
        *v = 1.0 - *v;
    }
    let model = Model::new(
        ModelSpec {
            height: 4,
            width: 4,
            arch: Architecture::Unet(UNetSpec { in_frames: 3, channel_plan: vec![3, 4, 5], out_channels: 1 }),
        },
        7,
    )
    .unwrap();
    let seqs = [sequence(clean.clone(), 0), sequence(garbage, 1)];
    let a = rollout(&model, &seqs[0].window(0, 3), 4).unwrap();
    let b = rollout(&model, &seqs[1].window(0, 3), 4).unwrap();
    assert_eq!(a, b);

    let stub = Stub::new(3, 0.9);
    evaluate(&stub, &seqs, 4, SsimMode::Global).unwrap();
    let seen = stub.seen.borrow();
    assert_eq!(seen.len(), 8);
    for t in 0..4 {
        assert_eq!(seen[t], seen[4 + t], "window {t} differs between clean and garbage futures");
    }
}
