//! Reconstruction quality metrics: PSNR and SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tomo::Image;

/// PSNR reported for identical images (MSE = 0).
pub const PSNR_CAP_DB: f64 = 200.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub data_range: f64,
}

/// Evaluates both metrics with a shared data range. When `data_range` is
/// `None` it defaults to the reference image's max - min.
pub fn evaluate<S: Scalar>(
    x: &Image<S>,
    reference: &Image<S>,
    data_range: Option<f64>,
) -> Result<MetricReport> {
    let range = match data_range {
        Some(r) => r,
        None => {
            let (lo, hi) = reference.min_max();
            (hi - lo).as_f64()
        }
    };
    Ok(MetricReport {
        psnr: psnr(x, reference, range)?,
        ssim: ssim(x, reference, range)?,
        data_range: range,
    })
}

/// Peak signal-to-noise ratio in dB: `10 log10(range^2 / MSE)`, capped at
/// [`PSNR_CAP_DB`] for identical inputs.
pub fn psnr<S: Scalar>(x: &Image<S>, reference: &Image<S>, data_range: f64) -> Result<f64> {
    check_pair(x, reference)?;
    if !(data_range > 0.0) {
        return Err(Error::invalid("data_range must be > 0"));
    }
    let n = x.values().len() as f64;
    let mse: f64 = x
        .values()
        .iter()
        .zip(reference.values())
        .map(|(a, b)| {
            let d = (*a - *b).as_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean local SSIM over all fully-interior 11x11 Gaussian windows
/// (std 1.5), with the standard constants `C1 = (0.01 r)^2`,
/// `C2 = (0.03 r)^2`.
pub fn ssim<S: Scalar>(x: &Image<S>, reference: &Image<S>, data_range: f64) -> Result<f64> {
    check_pair(x, reference)?;
    if !(data_range > 0.0) {
        return Err(Error::invalid("data_range must be > 0"));
    }
    let n = x.size();
    if n < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image side {n} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }

    let window = gaussian_window();
    let c1 = (0.01 * data_range) * (0.01 * data_range);
    let c2 = (0.03 * data_range) * (0.03 * data_range);

    let positions = n - SSIM_WINDOW + 1;
    let mut total = 0.0f64;
    for wr in 0..positions {
        for wc in 0..positions {
            let mut mu_x = 0.0f64;
            let mut mu_y = 0.0f64;
            let mut xx = 0.0f64;
            let mut yy = 0.0f64;
            let mut xy = 0.0f64;
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let w = window[i * SSIM_WINDOW + j];
                    let a = x.get(wr + i, wc + j).as_f64();
                    let b = reference.get(wr + i, wc + j).as_f64();
                    mu_x += w * a;
                    mu_y += w * b;
                    xx += w * a * a;
                    yy += w * b * b;
                    xy += w * a * b;
                }
            }
            let var_x = xx - mu_x * mu_x;
            let var_y = yy - mu_y * mu_y;
            let cov = xy - mu_x * mu_y;
            let numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
            let denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
            total += numerator / denominator;
        }
    }
    Ok(total / (positions * positions) as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in -half..=half {
        for j in -half..=half {
            let r2 = (i * i + j * j) as f64;
            w.push((-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn check_pair<S: Scalar>(x: &Image<S>, reference: &Image<S>) -> Result<()> {
    if x.size() != reference.size() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} px", reference.size()),
            got: format!("{} px", x.size()),
        });
    }
    Ok(())
}
