//! Adam optimizer over the flat parameter vector.

use rayon::prelude::*;

use super::NetworkParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One Adam update with bias correction. The epsilon enters the
/// bias-corrected denominator scaled by `sqrt(1 - beta2^t)`, so the first
/// step on gradient `g` is exactly `-lr * g / (|g| + eps * sqrt(1 - beta2))`.
///
/// Non-finite gradients abort before any state is touched.
pub fn adam_step<S: Scalar>(
    params: &mut NetworkParams<S>,
    grads: &[S],
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
) -> Result<()> {
    if grads.len() != params.param_count() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} gradients", params.param_count()),
            got: format!("{}", grads.len()),
        });
    }
    if !grads.par_chunks(1 << 16).all(|c| c.iter().all(|g| g.is_finite())) {
        return Err(Error::NonFinite { context: "gradients in adam_step".into() });
    }

    params.step += 1;
    let t = params.step as i32;
    let bc1 = S::one() - beta1.powi(t);
    let sqrt_bc2 = (S::one() - beta2.powi(t)).sqrt();
    let one_m_b1 = S::one() - beta1;
    let one_m_b2 = S::one() - beta2;

    const CHUNK: usize = 1 << 14;
    params
        .data
        .par_chunks_mut(CHUNK)
        .zip(params.moment1.par_chunks_mut(CHUNK))
        .zip(params.moment2.par_chunks_mut(CHUNK))
        .zip(grads.par_chunks(CHUNK))
        .for_each(|(((data, m1), m2), g)| {
            for i in 0..data.len() {
                let gi = g[i];
                let m = beta1 * m1[i] + one_m_b1 * gi;
                let v = beta2 * m2[i] + one_m_b2 * gi * gi;
                m1[i] = m;
                m2[i] = v;
                let denom = v.sqrt() / sqrt_bc2 + eps * sqrt_bc2;
                data[i] = data[i] - lr * (m / bc1) / denom;
            }
        });

    params.refresh_transposes();
    Ok(())
}
