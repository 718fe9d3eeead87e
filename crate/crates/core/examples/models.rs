//! Builds every forecaster at desk and full size and runs one prediction.

use axial_nowcast::{Model, ModelKind, ModelSpec, Tensor};
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

fn main() -> axial_nowcast::Result<()> {
    let mut rng = SplitMix64::seed_from_u64(2);
    println!("{:<12} {:>8} {:>12} {:>12}", "model", "frames", "desk params", "full params");
    for kind in [ModelKind::Unet, ModelKind::AxialUnet, ModelKind::ConvLstm, ModelKind::Cgan] {
        let desk = Model::new(ModelSpec::desk(kind, 32), 0)?;
        let full = Model::new(ModelSpec::full(kind), 0)?;
        let m = desk.spec().input_frames();
        let window = Tensor::uniform(&[m, 32, 32], 0.0, 1.0, &mut rng);
        let next = desk.predict_next(&window)?;
        assert_eq!(next.shape(), &[32, 32]);
        println!(
            "{:<12} {m:>8} {:>12} {:>12}",
            kind.label(),
            desk.params().trainable_count(),
            full.params().trainable_count()
        );
    }
    println!("\ndesk Axial-UNet spec:\n{}", ModelSpec::desk(ModelKind::AxialUnet, 32).to_toml());
    Ok(())
}
