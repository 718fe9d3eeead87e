//! Trains a desk-size UNet on synthetic advection and compares it with
//! persistence on held-out sequences.

use axial_nowcast::data::{split, synth_generate, SplitSizes, SynthConfig};
use axial_nowcast::metrics::SsimMode;
use axial_nowcast::training::{comparison_table, evaluate, train, Persistence, TrainConfig};
use axial_nowcast::{Model, ModelKind, ModelSpec};

fn main() -> axial_nowcast::Result<()> {
    let seqs = synth_generate(&SynthConfig::new(120, 20, 16, 7))?;
    let data = split(seqs, 1, SplitSizes { train: 90, val: 15, test: 15 })?;

    let kind = ModelKind::Unet;
    let cfg = TrainConfig { epochs: 12, lr: 3e-3, seed: 3, ..TrainConfig::defaults(kind) };
    let model = Model::new(ModelSpec::desk(kind, 16), 3)?;
    let (model, _) = train(model, cfg, &data, |row, _| {
        println!("epoch {:>2}  train {:.6}  val {:.6}", row.epoch, row.train_loss, row.val_loss);
        Ok(())
    })?;

    let steps = 4;
    let ours = evaluate(&model, &data.test, steps, SsimMode::Global)?;
    let base = evaluate(&Persistence { input_frames: 16 }, &data.test, steps, SsimMode::Global)?;
    print!("\n{}", comparison_table(&[&base, &ours]));
    Ok(())
}
