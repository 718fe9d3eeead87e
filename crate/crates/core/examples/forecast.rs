//! Trains a small ConvLSTM, round-trips it through a checkpoint file and
//! rolls a five-frame forecast forward from a fifteen-frame window.

use axial_nowcast::data::{split, synth_generate, SplitSizes, SynthConfig};
use axial_nowcast::metrics::{frame_metrics, SsimMode};
use axial_nowcast::training::{rollout, train, TrainConfig};
use axial_nowcast::{Checkpoint, Model, ModelKind, ModelSpec};

fn main() -> axial_nowcast::Result<()> {
    let seqs = synth_generate(&SynthConfig::new(40, 20, 16, 9))?;
    let data = split(seqs, 2, SplitSizes { train: 30, val: 5, test: 5 })?;
    let kind = ModelKind::ConvLstm;
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::defaults(kind) };
    let (model, curve) = train(Model::new(ModelSpec::desk(kind, 16), 5)?, cfg, &data, |_, _| Ok(()))?;
    println!("val loss {:.5} -> {:.5}", curve.rows[0].val_loss, curve.rows.last().unwrap().val_loss);

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("convlstm.axnw");
    model.to_checkpoint().save(&path)?;
    let model = Model::from_checkpoint(&Checkpoint::load(&path)?)?;
    println!("reloaded {} with {} parameters", model.kind(), model.params().trainable_count());

    let seq = &data.test[0];
    let m = model.spec().input_frames();
    let pred = rollout(&model, &seq.window(0, m), seq.len() - m)?;
    for t in 0..pred.shape()[0] {
        let r = frame_metrics(&pred.index_first(t), &seq.frame(m + t), SsimMode::Global)?;
        println!("t+{}  psnr {:>7.3}  ssim {:.4}", t + 1, r.psnr, r.ssim);
    }
    Ok(())
}
