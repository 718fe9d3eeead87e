//! PSNR and SSIM for a few degradations of one frame.

use axial_nowcast::metrics::{frame_metrics, SsimMode};
use axial_nowcast::Tensor;

fn main() -> axial_nowcast::Result<()> {
    let n = 32;
    let blob = |cx: f64, cy: f64| {
        Tensor::from_fn(&[n, n], |k| {
            let (i, j) = ((k / n) as f64, (k % n) as f64);
            (-((i - cy).powi(2) + (j - cx).powi(2)) / 40.0).exp()
        })
    };
    let target = blob(15.0, 15.0);
    let cases = [
        ("identical", target.clone()),
        ("dimmed 10%", target.map(|v| 0.9 * v)),
        ("shifted 1px", blob(16.0, 15.0)),
        ("shifted 4px", blob(19.0, 15.0)),
        ("blank", Tensor::zeros(&[n, n])),
    ];
    println!("{:<12} {:>10} {:>9} {:>9} {:>12}", "prediction", "mse", "psnr", "ssim", "ssim (7x7)");
    for (name, pred) in cases {
        let g = frame_metrics(&pred, &target, SsimMode::Global)?;
        let w = frame_metrics(&pred, &target, SsimMode::Windowed(7))?;
        println!("{name:<12} {:>10.2e} {:>9.3} {:>9.5} {:>12.5}", g.mse, g.psnr, g.ssim, w.ssim);
    }
    Ok(())
}
