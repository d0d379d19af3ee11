//! Inner data-fidelity solve: seeded epoch permutations over all rays,
//! batched forward/backward through the network renderer, regularization
//! toward the prior at sampled pixel centers, and Adam updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{pixel_norm_coord, SpenerConfig};
use crate::error::{Error, Result};
use crate::geometry::{sample_points_into, FanBeamGeometry};
use crate::nn::{
    adam_step, backward_points, encode_image, encoder_backward, features_from_prior,
    forward_points, scatter_input_grads, EncoderActivations, FeatureMap, GradAccumulator,
    NetworkParams, ShardBuffer, NSHARDS_DEFAULT,
};
use crate::scalar::Scalar;
use crate::simulate::mix_seed;
use crate::tomo::{Image, Sinogram};

/// Per-epoch mean losses of one inner solve.
#[derive(Debug, Clone)]
pub struct SolveStats {
    pub epoch_loss_dc: Vec<f64>,
    pub epoch_loss_reg: Vec<f64>,
}

/// Points per MLP batch flush inside a shard.
const GROUP_CAP: usize = 4096;

/// Dense per-shard gradient buffers above this parameter count get too
/// large; fall back to fewer shards.
const SHARD_PARAM_LIMIT: usize = 8 << 20;

/// Trains the network against the measured sinogram, warm-starting from
/// the given parameters: `epochs_first` epochs at the first outer
/// iteration, `epochs_rest` afterwards; every epoch is one seeded random
/// permutation over all rays in `rays_per_batch` batches; each step
/// minimizes the data-consistency loss plus `lambda` times the
/// regularization loss at freshly sampled prior pixels. Encoder features
/// are computed from the prior once at entry.
pub fn solve_data_fidelity<S: Scalar>(
    mut params: NetworkParams<S>,
    prior: &Image<S>,
    measured: &Sinogram<S>,
    cfg: &SpenerConfig,
    iteration: usize,
) -> Result<(NetworkParams<S>, SolveStats)> {
    let geom = measured.geometry().clone();
    if prior.size() != geom.image_size {
        return Err(Error::DimensionMismatch {
            expected: format!("prior of {} px", geom.image_size),
            got: format!("{} px", prior.size()),
        });
    }
    let epochs = if iteration <= 1 { cfg.hqs.epochs_first } else { cfg.hqs.epochs_rest };
    let lr = S::of(cfg.optimizer.lr_at(iteration));
    let beta1 = S::of(cfg.optimizer.beta1);
    let beta2 = S::of(cfg.optimizer.beta2);
    let eps = S::of(cfg.optimizer.eps);
    let lambda = cfg.hqs.lambda;

    let delta_p = match cfg.hqs.delta_p {
        Some(d) => S::of(d),
        None => geom.pixel_size / S::of(2.0),
    };
    let extent = geom.fov_radius * S::of(2.0);

    // The prior is constant within the solve, so the feature map only
    // changes through the encoder weights: recompute it after each
    // optimizer step (not per ray batch) so that the cached features, the
    // gradients flowing through them, and the extraction all see the same
    // current parameters.
    let encoder_mode = params.config.encoder.is_some();
    let (mut features, mut acts): (FeatureMap<S>, Option<EncoderActivations<S>>) = if encoder_mode
    {
        let (fm, acts) = encode_image(prior, &params);
        (fm, Some(acts))
    } else {
        (features_from_prior(prior), None)
    };
    let fm_grad_len = if encoder_mode { features.data().len() } else { 0 };

    let n_shards = if params.param_count() <= SHARD_PARAM_LIMIT { NSHARDS_DEFAULT } else { 2 };
    let mut accum = GradAccumulator::new(&params, n_shards, fm_grad_len);
    let mut grads = vec![S::zero(); params.param_count()];
    let mut dfm = vec![S::zero(); fm_grad_len];

    let n_rays = geom.n_rays();
    let mut ray_order: Vec<u32> = (0..n_rays as u32).collect();
    let n_pixels = prior.size() * prior.size();
    let reg_per_step = cfg
        .hqs
        .reg_points_per_batch
        .unwrap_or(cfg.hqs.rays_per_batch)
        .min(n_pixels);

    let mut stats = SolveStats { epoch_loss_dc: Vec::with_capacity(epochs), epoch_loss_reg: Vec::with_capacity(epochs) };

    // TODO remove instrumentation
    let timing = std::env::var("SPENER_TIMING").is_ok();
    let mut t_rays = 0.0f64;
    let mut t_reg = 0.0f64;
    let mut t_merge = 0.0f64;
    let mut t_enc = 0.0f64;
    let mut t_adam = 0.0f64;

    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            cfg.seed,
            0xE70C,
            iteration as u64,
            epoch as u64,
        ]));
        shuffle(&mut ray_order, &mut rng);

        let mut dc_sum = 0.0f64;
        let mut reg_sum = 0.0f64;
        let mut steps = 0usize;
        for (step, batch) in ray_order.chunks(cfg.hqs.rays_per_batch).enumerate() {
            // Data-consistency term over the ray batch.
            let t0 = std::time::Instant::now();
            let inv_batch = S::one() / S::from_usize(batch.len()).unwrap();
            let ranges = shard_ranges(batch.len(), n_shards);
            let dc_parts: Vec<f64> = accum
                .shards
                .par_iter_mut()
                .zip(&ranges)
                .map(|(shard, range)| {
                    process_ray_shard(
                        shard,
                        &batch[range.clone()],
                        &geom,
                        measured,
                        &features,
                        &params,
                        delta_p,
                        extent,
                        inv_batch,
                        encoder_mode,
                    )
                })
                .collect();
            let step_dc = dc_parts.iter().sum::<f64>() / batch.len() as f64;
            t_rays += t0.elapsed().as_secs_f64();

            // Regularization term at freshly sampled prior pixels.
            let t0 = std::time::Instant::now();
            let mut reg_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                cfg.seed,
                0x4E67,
                iteration as u64,
                epoch as u64,
                step as u64,
            ]));
            let reg_indices = sample_without_replacement(n_pixels, reg_per_step, &mut reg_rng);
            let reg_ranges = shard_ranges(reg_indices.len(), n_shards);
            let reg_parts: Vec<f64> = accum
                .shards
                .par_iter_mut()
                .zip(&reg_ranges)
                .map(|(shard, range)| {
                    process_reg_shard(
                        shard,
                        &reg_indices[range.clone()],
                        prior,
                        &features,
                        &params,
                        lambda,
                        reg_indices.len(),
                        encoder_mode,
                    )
                })
                .collect();
            let step_reg = reg_parts.iter().sum::<f64>() / reg_indices.len() as f64;
            t_reg += t0.elapsed().as_secs_f64();

            let total = step_dc + lambda * step_reg;
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!(
                        "training loss at iteration {iteration}, epoch {epoch}, step {step}"
                    ),
                });
            }

            let t0 = std::time::Instant::now();
            grads.fill(S::zero());
            dfm.fill(S::zero());
            accum.merge_and_reset(&mut grads, &mut dfm);
            t_merge += t0.elapsed().as_secs_f64();
            let t0 = std::time::Instant::now();
            if let Some(acts) = &acts {
                encoder_backward(&dfm, acts, prior, &params, &mut grads);
            }
            t_enc += t0.elapsed().as_secs_f64();
            let t0 = std::time::Instant::now();
            adam_step(&mut params, &grads, lr, beta1, beta2, eps)?;
            if encoder_mode {
                let (fm, a) = encode_image(prior, &params);
                features = fm;
                acts = Some(a);
            }
            t_adam += t0.elapsed().as_secs_f64();

            dc_sum += step_dc;
            reg_sum += step_reg;
            steps += 1;
        }
        stats.epoch_loss_dc.push(dc_sum / steps as f64);
        stats.epoch_loss_reg.push(reg_sum / steps as f64);
    }

    if timing {
        eprintln!(
            "timing per epoch: rays {:.3}s reg {:.3}s merge {:.3}s enc {:.3}s adam {:.3}s",
            t_rays / epochs as f64,
            t_reg / epochs as f64,
            t_merge / epochs as f64,
            t_enc / epochs as f64,
            t_adam / epochs as f64
        );
    }

    Ok((params, stats))
}

/// Single evaluation of the training objective
/// `mean|y - render| + lambda * mean((F - prior)^2)` with its full analytic
/// gradient, computed through the same code path as the inner solve.
/// Features are derived from the given parameters, so the value is a pure
/// function of `params` (the property the gradient-check oracles rely on).
pub fn loss_and_grad<S: Scalar>(
    params: &NetworkParams<S>,
    prior: &Image<S>,
    measured: &Sinogram<S>,
    rays: &[(usize, usize)],
    reg_points: &[usize],
    lambda: f64,
    delta_p: S,
) -> Result<(f64, Vec<S>)> {
    let geom = measured.geometry();
    let extent = geom.fov_radius * S::of(2.0);
    let encoder_mode = params.config.encoder.is_some();
    let (features, acts) = if encoder_mode {
        let (fm, acts) = encode_image(prior, params);
        (fm, Some(acts))
    } else {
        (features_from_prior(prior), None)
    };
    let fm_grad_len = if encoder_mode { features.data().len() } else { 0 };
    let mut accum = GradAccumulator::new(params, 1, fm_grad_len);
    let mut loss = 0.0;

    if !rays.is_empty() {
        let ids: Vec<u32> = rays
            .iter()
            .map(|&(v, d)| (v * geom.n_detectors + d) as u32)
            .collect();
        let inv_batch = S::one() / S::from_usize(ids.len()).unwrap();
        let dc_sum = process_ray_shard(
            &mut accum.shards[0],
            &ids,
            geom,
            measured,
            &features,
            params,
            delta_p,
            extent,
            inv_batch,
            encoder_mode,
        );
        loss += dc_sum / ids.len() as f64;
    }
    if !reg_points.is_empty() {
        let indices: Vec<u32> = reg_points.iter().map(|&i| i as u32).collect();
        let reg_sum = process_reg_shard(
            &mut accum.shards[0],
            &indices,
            prior,
            &features,
            params,
            lambda,
            indices.len(),
            encoder_mode,
        );
        loss += lambda * reg_sum / indices.len() as f64;
    }

    let mut grads = vec![S::zero(); params.param_count()];
    let mut dfm = vec![S::zero(); fm_grad_len];
    accum.merge_and_reset(&mut grads, &mut dfm);
    if let Some(acts) = &acts {
        encoder_backward(&dfm, acts, prior, params, &mut grads);
    }
    Ok((loss, grads))
}

fn shard_ranges(len: usize, n_shards: usize) -> Vec<std::ops::Range<usize>> {
    let chunk = len.div_ceil(n_shards).max(1);
    (0..n_shards)
        .map(|s| {
            let lo = (s * chunk).min(len);
            let hi = ((s + 1) * chunk).min(len);
            lo..hi
        })
        .collect()
}

fn shuffle(values: &mut [u32], rng: &mut ChaCha8Rng) {
    for i in (1..values.len()).rev() {
        let j = rng.gen_range(0..=i);
        values.swap(i, j);
    }
}

fn sample_without_replacement(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut pool: Vec<u32> = (0..n as u32).collect();
    for i in 0..k.min(n) {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k.min(n));
    pool
}

/// Renders and differentiates a contiguous slice of the ray batch inside
/// one shard; returns the shard's summed absolute residual.
#[allow(clippy::too_many_arguments)]
fn process_ray_shard<S: Scalar>(
    shard: &mut ShardBuffer<S>,
    ids: &[u32],
    geom: &FanBeamGeometry<S>,
    measured: &Sinogram<S>,
    features: &FeatureMap<S>,
    params: &NetworkParams<S>,
    delta_p: S,
    extent: S,
    inv_batch: S,
    encoder_mode: bool,
) -> f64 {
    let n_d = geom.n_detectors as u32;
    let mut ray_pts: Vec<[S; 2]> = Vec::with_capacity(512);
    let mut spans: Vec<(S, usize, usize)> = Vec::with_capacity(64);
    let mut loss = 0.0f64;
    shard.coords.clear();

    for &id in ids {
        let v = (id / n_d) as usize;
        let d = (id % n_d) as usize;
        let ray = geom.ray_for(v, d).expect("in-range ray id");
        sample_points_into(&ray, delta_p, &mut ray_pts).expect("positive delta_p");
        if !shard.coords.is_empty() && shard.coords.len() + ray_pts.len() > GROUP_CAP {
            loss += flush_ray_group(shard, &mut spans, features, params, delta_p, inv_batch, encoder_mode);
        }
        let start = shard.coords.len();
        for p in &ray_pts {
            shard.coords.push([p[0] / extent, p[1] / extent]);
        }
        spans.push((measured.get(v, d), start, ray_pts.len()));
    }
    loss += flush_ray_group(shard, &mut spans, features, params, delta_p, inv_batch, encoder_mode);
    loss
}

fn flush_ray_group<S: Scalar>(
    shard: &mut ShardBuffer<S>,
    spans: &mut Vec<(S, usize, usize)>,
    features: &FeatureMap<S>,
    params: &NetworkParams<S>,
    delta_p: S,
    inv_batch: S,
    encoder_mode: bool,
) -> f64 {
    if spans.is_empty() {
        shard.coords.clear();
        return 0.0;
    }
    let m = shard.coords.len();
    let mut loss = 0.0f64;
    if m > 0 {
        forward_points(params, features, &shard.coords, &mut shard.scratch);
    }
    shard.d_out.resize(m.max(1), S::zero());
    for &(y, start, len) in spans.iter() {
        let mut rendered = S::zero();
        for &o in &shard.scratch.out[start..start + len] {
            rendered += o;
        }
        rendered = rendered * delta_p;
        let residual = rendered - y;
        loss += residual.abs().as_f64();
        // Subgradient of |r| at zero taken as zero.
        let sign = if residual > S::zero() {
            S::one()
        } else if residual < S::zero() {
            -S::one()
        } else {
            S::zero()
        };
        let g = sign * delta_p * inv_batch;
        for slot in &mut shard.d_out[start..start + len] {
            *slot = g;
        }
    }
    if m > 0 {
        backward_points(params, m, &shard.d_out, &mut shard.scratch, &mut shard.grads);
        let dfm = encoder_mode.then_some(&mut shard.d_feature_map).map(|v| v.as_mut_slice());
        scatter_input_grads(params, features, &shard.coords, &shard.scratch, &mut shard.grads, dfm);
    }
    shard.coords.clear();
    spans.clear();
    loss
}

/// Forward/backward over a slice of regularization points; returns the
/// shard's summed squared deviation from the prior.
#[allow(clippy::too_many_arguments)]
fn process_reg_shard<S: Scalar>(
    shard: &mut ShardBuffer<S>,
    indices: &[u32],
    prior: &Image<S>,
    features: &FeatureMap<S>,
    params: &NetworkParams<S>,
    lambda: f64,
    n_total: usize,
    encoder_mode: bool,
) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let n = prior.size();
    shard.coords.clear();
    for &idx in indices {
        shard.coords.push(pixel_norm_coord(idx as usize, n));
    }
    let m = shard.coords.len();
    forward_points(params, features, &shard.coords, &mut shard.scratch);
    let mut loss = 0.0f64;
    shard.d_out.resize(m, S::zero());
    let weight = S::of(2.0 * lambda / n_total as f64);
    for (k, &idx) in indices.iter().enumerate() {
        let diff = shard.scratch.out[k] - prior.values()[idx as usize];
        loss += (diff * diff).as_f64();
        shard.d_out[k] = weight * diff;
    }
    if lambda != 0.0 {
        backward_points(params, m, &shard.d_out, &mut shard.scratch, &mut shard.grads);
        let dfm = encoder_mode.then_some(&mut shard.d_feature_map).map(|v| v.as_mut_slice());
        scatter_input_grads(params, features, &shard.coords, &shard.scratch, &mut shard.grads, dfm);
    }
    shard.coords.clear();
    loss
}
