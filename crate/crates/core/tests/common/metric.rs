//! Metric examples and properties.

use axial_nowcast::metrics::{mse, psnr, psnr_from_mse, ssim, SSIM_C1, SSIM_C2};
use axial_nowcast::Tensor;
use proptest::prelude::*;

use super::*;

pub fn t(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).unwrap()
}

pub fn psnr_examples() {
    assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
    let x = t(&[0.1, 0.7]);
    assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
    let db = psnr(&t(&[0.5, 0.5]), &t(&[0.0, 1.0])).unwrap();
    assert!((db - 6.020599913279624).abs() < 1e-12);
    assert!(psnr(&t(&[1.2, 0.5]), &t(&[0.0, 1.0])).is_err());
    assert!(psnr(&t(&[0.2, 0.5]), &t(&[-0.1, 1.0])).is_err());
}

pub fn ssim_examples() {
    let zeros = Tensor::zeros(&[8, 8]);
    let ones = Tensor::ones(&[8, 8]);
    let s = ssim(&zeros, &ones, SSIM_C1, SSIM_C2).unwrap();
    assert!((s - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-15);
    assert!((s - 9.999e-5).abs() < 1e-8);
    let x = random_unit(&[8, 8], 5);
    assert_eq!(ssim(&x, &x, SSIM_C1, SSIM_C2).unwrap(), 1.0);
    assert!(ssim(&x, &Tensor::zeros(&[8, 7]), SSIM_C1, SSIM_C2).is_err());
}

pub fn pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(0.0f64..=1.0, n), prop::collection::vec(0.0f64..=1.0, n))
}

/// PSNR ranks two prediction/target pairs in the opposite order to MSE.
pub fn psnr_orders_against_mse(a: (Vec<f64>, Vec<f64>), b: (Vec<f64>, Vec<f64>)) -> Result<(), TestCaseError> {
    let (x1, y1, x2, y2) = (t(&a.0), t(&a.1), t(&b.0), t(&b.1));
    let (m1, m2) = (mse(&x1, &y1).unwrap(), mse(&x2, &y2).unwrap());
    let (p1, p2) = (psnr(&x1, &y1).unwrap(), psnr(&x2, &y2).unwrap());
    if m1 < m2 {
        prop_assert!(p1 > p2);
    } else if m2 < m1 {
        prop_assert!(p2 > p1);
    }
    Ok(())
}
