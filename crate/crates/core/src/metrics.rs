//! Image-quality metrics and the composite cGAN objective.
//!
//! All metrics assume unit-peak images in `[0, 1]`. The squared-error
//! criterion is the ordinary mean of squares.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `(0.01 · 1)²`, luminance stabilizer for unit dynamic range.
pub const SSIM_C1: f64 = 1e-4;
/// `(0.03 · 1)²`, contrast stabilizer for unit dynamic range.
pub const SSIM_C2: f64 = 9e-4;

/// Scores for one predicted frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricResult {
    pub mse: f64,
    /// Decibels; `f64::INFINITY` when `mse == 0`.
    pub psnr: f64,
    pub ssim: f64,
}

/// How SSIM statistics are gathered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SsimMode {
    /// One window covering the whole image.
    #[default]
    Global,
    /// Mean over all `k × k` windows at stride 1.
    Windowed(usize),
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::arg(op, "empty image"));
    }
    Ok(())
}

fn check_unit_range(op: &'static str, t: &Tensor) -> Result<()> {
    match t.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::arg(op, format!("value {} at index {i} is outside [0, 1]", t.data()[i]))),
        None => Ok(()),
    }
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("mse", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

pub fn l1(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("l1", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

/// `-10 log10(mse)` with peak 1, or `+inf` for a perfect match.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_unit_range("psnr", pred)?;
    check_unit_range("psnr", target)?;
    Ok(psnr_from_mse(mse(pred, target)?))
}

fn ssim_stats(x: &[f64], y: &[f64], c1: f64, c2: f64) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cxy += da * db;
    }
    let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Structural similarity from whole-image statistics with population
/// variances. Symmetric in its arguments, bit for bit.
pub fn ssim(x: &Tensor, y: &Tensor, c1: f64, c2: f64) -> Result<f64> {
    same_shape("ssim", x, y)?;
    Ok(ssim_stats(x.data(), y.data(), c1, c2))
}

/// Mean SSIM over every `k × k` window of two `[H,W]` images.
pub fn ssim_windowed(x: &Tensor, y: &Tensor, k: usize, c1: f64, c2: f64) -> Result<f64> {
    same_shape("ssim_windowed", x, y)?;
    if x.rank() != 2 {
        return Err(Error::shape("ssim_windowed", format!("expected [H,W], got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if k == 0 || k > h || k > w {
        return Err(Error::arg("ssim_windowed", format!("window {k} does not fit {h}x{w}")));
    }
    let mut bx = Vec::with_capacity(k * k);
    let mut by = Vec::with_capacity(k * k);
    let mut total = 0.0;
    for i in 0..=h - k {
        for j in 0..=w - k {
            bx.clear();
            by.clear();
            for r in i..i + k {
                bx.extend_from_slice(&x.data()[r * w + j..r * w + j + k]);
                by.extend_from_slice(&y.data()[r * w + j..r * w + j + k]);
            }
            total += ssim_stats(&bx, &by, c1, c2);
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// MSE, PSNR and SSIM (default constants) for one frame.
pub fn frame_metrics(pred: &Tensor, target: &Tensor, mode: SsimMode) -> Result<MetricResult> {
    let m = mse(pred, target)?;
    check_unit_range("psnr", pred)?;
    check_unit_range("psnr", target)?;
    let s = match mode {
        SsimMode::Global => ssim(pred, target, SSIM_C1, SSIM_C2)?,
        SsimMode::Windowed(k) => ssim_windowed(pred, target, k, SSIM_C1, SSIM_C2)?,
    };
    Ok(MetricResult { mse: m, psnr: psnr_from_mse(m), ssim: s })
}

/// Terms of the conditional adversarial objective, recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct CGanLosses {
    /// `BCE(D(real), 1) + BCE(D(fake), 0)`.
    pub discriminator: Var,
    /// `BCE(D(fake), 1) + λ · L1(pred, target)`.
    pub generator: Var,
    pub adversarial: Var,
    pub l1: Var,
}

/// Discriminator scores are logits; the sigmoid lives inside the BCE.
pub fn cgan_losses(
    g: &mut Graph<'_>,
    d_real: Var,
    d_fake: Var,
    pred: Var,
    target: Var,
    lambda: f64,
) -> Result<CGanLosses> {
    if lambda < 0.0 {
        return Err(Error::arg("cgan_losses", format!("lambda must be >= 0, got {lambda}")));
    }
    let real = g.bce_with_logits(d_real, 1.0);
    let fake = g.bce_with_logits(d_fake, 0.0);
    let discriminator = g.add(real, fake)?;
    let adversarial = g.bce_with_logits(d_fake, 1.0);
    let l1 = g.l1_loss(pred, target)?;
    let weighted = g.scale(l1, lambda);
    let generator = g.add(adversarial, weighted)?;
    Ok(CGanLosses { discriminator, generator, adversarial, l1 })
}
