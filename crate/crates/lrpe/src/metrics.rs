//! Reconstruction quality metrics.

use crate::error::{Error, Result};
use crate::image::Image;

/// Peak signal-to-noise ratio in dB: 10 log10(peak^2 / MSE).
/// Identical images report +infinity.
pub fn psnr(x: &Image, reference: &Image, peak: f64) -> Result<f64> {
    if x.side != reference.side {
        return Err(Error::DimensionMismatch(format!(
            "psnr image sides {} vs {}",
            x.side, reference.side
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::Parameter("psnr peak must be positive".into()));
    }
    let n = x.data.len() as f64;
    let mse: f64 = x
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

/// Windowed structural similarity: Gaussian-weighted moments over every
/// fully interior window position, averaged.
pub fn ssim(x: &Image, reference: &Image, params: &SsimParams) -> Result<f64> {
    if x.side != reference.side {
        return Err(Error::DimensionMismatch(format!(
            "ssim image sides {} vs {}",
            x.side, reference.side
        )));
    }
    let win = params.window;
    if x.side < win {
        return Err(Error::Parameter(format!(
            "image side {} smaller than ssim window {}",
            x.side, win
        )));
    }
    let weights = gaussian_window(win, params.sigma);
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let n = x.side;
    let positions = n - win + 1;
    let mut acc = 0.0;
    for r0 in 0..positions {
        for c0 in 0..positions {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            for wr in 0..win {
                let row = (r0 + wr) * n + c0;
                let wrow = &weights[wr * win..(wr + 1) * win];
                for (wc, &wgt) in wrow.iter().enumerate() {
                    mu_x += wgt * x.data[row + wc];
                    mu_y += wgt * reference.data[row + wc];
                }
            }
            let mut var_x = 0.0;
            let mut var_y = 0.0;
            let mut cov = 0.0;
            for wr in 0..win {
                let row = (r0 + wr) * n + c0;
                let wrow = &weights[wr * win..(wr + 1) * win];
                for (wc, &wgt) in wrow.iter().enumerate() {
                    let dx = x.data[row + wc] - mu_x;
                    let dy = reference.data[row + wc] - mu_y;
                    var_x += wgt * dx * dx;
                    var_y += wgt * dy * dy;
                    cov += wgt * dx * dy;
                }
            }
            acc += ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
        }
    }
    Ok(acc / (positions * positions) as f64)
}

fn gaussian_window(win: usize, sigma: f64) -> Vec<f64> {
    let half = (win as f64 - 1.0) / 2.0;
    let mut w = vec![0.0; win * win];
    let mut sum = 0.0;
    for r in 0..win {
        for c in 0..win {
            let dr = r as f64 - half;
            let dc = c as f64 - half;
            let v = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
            w[r * win + c] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(side: usize, data: Vec<f64>) -> Image {
        Image::from_data(side, 1.0, data).unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = img(2, vec![0.1, 0.2, 0.3, 0.4]);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_constant_offset_twenty_db() {
        // peak 1, constant difference 0.1: MSE = 0.01, 10 log10(1/0.01) = 20.
        let a = img(4, vec![0.5; 16]);
        let b = img(4, vec![0.6; 16]);
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "psnr {v}");
    }

    #[test]
    fn psnr_halving_error_adds_six_db() {
        let a = img(4, vec![0.5; 16]);
        let b = img(4, vec![0.6; 16]);
        let c = img(4, vec![0.55; 16]);
        let v1 = psnr(&a, &b, 1.0).unwrap();
        let v2 = psnr(&a, &c, 1.0).unwrap();
        // Halving the error raises PSNR by 10 log10(4) = 6.0206 dB.
        let expected = 10.0 * 4.0f64.log10();
        assert!(((v2 - v1) - expected).abs() < 1e-9);
        assert!(((v2 - v1) - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn ssim_identical_is_one() {
        let data: Vec<f64> = (0..144).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let a = img(12, data);
        let v = ssim(&a, &a, &SsimParams::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "ssim {v}");
    }

    #[test]
    fn ssim_symmetric() {
        let d1: Vec<f64> = (0..144).map(|i| (i as f64 * 0.13).cos().abs()).collect();
        let d2: Vec<f64> = (0..144).map(|i| ((i % 12) as f64 / 12.0)).collect();
        let a = img(12, d1);
        let b = img(12, d2);
        let p = SsimParams::default();
        assert_eq!(ssim(&a, &b, &p).unwrap(), ssim(&b, &a, &p).unwrap());
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = img(8, vec![0.0; 64]);
        assert!(ssim(&a, &a, &SsimParams::default()).is_err());
    }

    #[test]
    fn psnr_rejects_mismatched() {
        let a = img(2, vec![0.0; 4]);
        let b = img(3, vec![0.0; 9]);
        assert!(psnr(&a, &b, 1.0).is_err());
    }
}
