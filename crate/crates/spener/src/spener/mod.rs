//! The reconstruction method core: differentiable ray rendering through the
//! coordinate network, the data-consistency and regularization losses, the
//! inner data-fidelity solve, image extraction, and the outer splitting loop
//! that alternates network fitting with a denoiser update of the prior.

mod train;

pub use train::{loss_and_grad, solve_data_fidelity, SolveStats};

use serde::{Deserialize, Serialize};

use crate::denoise::{denoise, DenoiserSpec};
use crate::error::{Error, Result};
use crate::geometry::{sample_points_into, Ray};
use crate::metrics;
use crate::nn::{
    encode_image, features_from_prior, forward_points, FeatureMap, MlpScratch, NetConfig,
    NetworkParams,
};
use crate::scalar::Scalar;
use crate::simulate::mix_seed;
use crate::tomo::{fbp, Image, Sinogram};

/// Optimizer hyperparameters for the inner solves. The learning rate decays
/// by `lr_decay` at each outer-iteration boundary down to `lr_floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            lr_decay: 0.5,
            lr_floor: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate used at outer iteration `t` (1-based).
    pub fn lr_at(&self, iteration: usize) -> f64 {
        (self.lr * self.lr_decay.powi(iteration.saturating_sub(1) as i32)).max(self.lr_floor)
    }
}

/// Ablation arms. All arms share the same code path; the flags only swap
/// the prior-feature source or freeze parts of the outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Keep the initial prior for every iteration.
    NoIteration,
    /// Replace encoder features by interpolated prior intensity.
    NoEncoder,
    /// Skip the denoiser: the prior is the extracted image itself.
    NoDenoiser,
}

/// Outer-loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HqsConfig {
    /// Regularization-loss weight.
    pub lambda: f64,
    pub outer_iterations: usize,
    /// Epochs of the first inner solve.
    pub epochs_first: usize,
    /// Epochs of every later inner solve.
    pub epochs_rest: usize,
    pub rays_per_batch: usize,
    /// Prior points sampled per optimizer step; `None` matches
    /// `rays_per_batch`.
    pub reg_points_per_batch: Option<usize>,
    /// Ray quadrature step; `None` means half a pixel.
    pub delta_p: Option<f64>,
    pub denoiser: DenoiserSpec,
    /// Re-initialize the network at every outer iteration instead of
    /// warm-starting.
    pub cold_restart: bool,
}

impl Default for HqsConfig {
    fn default() -> Self {
        HqsConfig {
            lambda: 2.5,
            outer_iterations: 10,
            epochs_first: 200,
            epochs_rest: 50,
            rays_per_batch: 2048,
            reg_points_per_batch: None,
            delta_p: None,
            denoiser: DenoiserSpec::default(),
            cold_restart: false,
        }
    }
}

impl HqsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.outer_iterations < 1 {
            return Err(Error::InvalidConfig("outer_iterations must be >= 1".into()));
        }
        if self.epochs_rest < 1 || self.epochs_first < self.epochs_rest {
            return Err(Error::InvalidConfig(
                "epoch schedule must satisfy epochs_first >= epochs_rest >= 1".into(),
            ));
        }
        if self.rays_per_batch < 1 {
            return Err(Error::InvalidConfig("rays_per_batch must be >= 1".into()));
        }
        if let Some(d) = self.delta_p {
            if !(d > 0.0) {
                return Err(Error::InvalidConfig("delta_p must be > 0".into()));
            }
        }
        self.denoiser.validate()
    }
}

/// Everything the reconstruction needs besides the measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpenerConfig {
    pub net: NetConfig,
    pub optimizer: OptimizerConfig,
    pub hqs: HqsConfig,
    pub seed: u64,
    #[serde(default)]
    pub ablation: Ablation,
}

impl SpenerConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.hqs.validate()
    }

    /// Network shape after applying the ablation flags.
    pub fn effective_net(&self) -> NetConfig {
        let mut net = self.net.clone();
        if self.ablation == Ablation::NoEncoder {
            net.encoder = None;
        }
        net
    }

    pub(crate) fn effective_denoiser(&self) -> DenoiserSpec {
        if self.ablation == Ablation::NoDenoiser {
            DenoiserSpec::identity()
        } else {
            self.hqs.denoiser
        }
    }
}

/// Per-iteration record: epoch-mean losses of the final inner epoch and
/// optional quality metrics against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loss_dc: f64,
    pub loss_reg: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

/// Reconstruction state after an outer iteration (or the full run).
#[derive(Debug, Clone)]
pub struct ReconState<S> {
    /// Completed outer iterations.
    pub iteration: usize,
    /// Current prior image `z_t`.
    pub prior: Image<S>,
    /// Latest extracted image `x_t`.
    pub extracted: Image<S>,
    pub params: NetworkParams<S>,
    pub trace: Vec<TraceRecord>,
}

/// Artifacts handed to the per-iteration observer during [`reconstruct_observed`].
pub struct IterationArtifacts<'a, S> {
    pub iteration: usize,
    pub extracted: &'a Image<S>,
    pub prior: &'a Image<S>,
    pub initial_prior: &'a Image<S>,
    pub params: &'a NetworkParams<S>,
    pub record: &'a TraceRecord,
}

/// Renders one measurement: the midpoint-rule integral of the network
/// output along the ray's FOV chord. Rays that miss contribute zero.
/// `extent` is the physical side length of the reconstruction square, used
/// to map physical coordinates onto the network's normalized domain.
pub fn render_ray<S: Scalar>(
    ray: &Ray<S>,
    features: &FeatureMap<S>,
    params: &NetworkParams<S>,
    delta_p: S,
    extent: S,
) -> S {
    let mut pts = Vec::new();
    sample_points_into(ray, delta_p, &mut pts).expect("positive delta_p");
    if pts.is_empty() {
        return S::zero();
    }
    for p in &mut pts {
        p[0] = p[0] / extent;
        p[1] = p[1] / extent;
    }
    let mut scratch = MlpScratch::new(params);
    forward_points(params, features, &pts, &mut scratch);
    let mut acc = S::zero();
    for &v in &scratch.out[..pts.len()] {
        acc += v;
    }
    acc * delta_p
}

/// Mean absolute error between measured and rendered values over a batch of
/// `(view, detector)` indices.
pub fn loss_dc<S: Scalar>(
    rays: &[(usize, usize)],
    measured: &Sinogram<S>,
    features: &FeatureMap<S>,
    params: &NetworkParams<S>,
    delta_p: S,
) -> Result<S> {
    if rays.is_empty() {
        return Err(Error::invalid("loss_dc needs a non-empty ray batch"));
    }
    let geom = measured.geometry();
    let extent = geom.fov_radius * S::of(2.0);
    let mut acc = S::zero();
    for &(v, d) in rays {
        let ray = geom.ray_for(v, d)?;
        let rendered = render_ray(&ray, features, params, delta_p, extent);
        acc += (measured.get(v, d) - rendered).abs();
    }
    Ok(acc / S::from_usize(rays.len()).unwrap())
}

/// Mean squared deviation of the network output from the prior at a batch
/// of prior pixel centers (given as flat pixel indices).
pub fn loss_reg<S: Scalar>(
    pixel_indices: &[usize],
    prior: &Image<S>,
    features: &FeatureMap<S>,
    params: &NetworkParams<S>,
) -> Result<S> {
    if pixel_indices.is_empty() {
        return Err(Error::invalid("loss_reg needs a non-empty point batch"));
    }
    let n = prior.size();
    let mut coords = Vec::with_capacity(pixel_indices.len());
    for &idx in pixel_indices {
        coords.push(pixel_norm_coord::<S>(idx, n));
    }
    let mut scratch = MlpScratch::new(params);
    forward_points(params, features, &coords, &mut scratch);
    let mut acc = S::zero();
    for (k, &idx) in pixel_indices.iter().enumerate() {
        let d = scratch.out[k] - prior.values()[idx];
        acc = d.mul_add(d, acc);
    }
    Ok(acc / S::from_usize(pixel_indices.len()).unwrap())
}

/// Normalized coordinate of a flat pixel index on an `n x n` grid.
#[inline]
pub(crate) fn pixel_norm_coord<S: Scalar>(idx: usize, n: usize) -> [S; 2] {
    let r = idx / n;
    let c = idx % n;
    let nf = S::from_usize(n).unwrap();
    [
        (S::from_usize(c).unwrap() + S::of(0.5)) / nf - S::of(0.5),
        (S::from_usize(r).unwrap() + S::of(0.5)) / nf - S::of(0.5),
    ]
}

/// Feature source for the current prior under the network's configuration:
/// encoder features, or the prior's own intensities when the encoder is
/// disabled.
pub fn prior_features<S: Scalar>(params: &NetworkParams<S>, prior: &Image<S>) -> FeatureMap<S> {
    if params.config.encoder.is_some() {
        encode_image(prior, params).0
    } else {
        features_from_prior(prior)
    }
}

/// Evaluates the network at every pixel center of the prior's grid and
/// clamps to nonnegative attenuation. Features are recomputed from the
/// prior with the current parameters.
pub fn extract_image<S: Scalar>(params: &NetworkParams<S>, prior: &Image<S>) -> Image<S> {
    use rayon::prelude::*;
    let features = prior_features(params, prior);
    let n = prior.size();
    let mut values = vec![S::zero(); n * n];
    values
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(r, row)| {
            let mut scratch = MlpScratch::new(params);
            let coords: Vec<[S; 2]> = (0..n).map(|c| pixel_norm_coord(r * n + c, n)).collect();
            forward_points(params, &features, &coords, &mut scratch);
            for (c, out) in row.iter_mut().enumerate() {
                *out = scratch.out[c].max(S::zero());
            }
        });
    Image::new(n, prior.pixel_size(), values).expect("finite extraction")
}

/// Full reconstruction: initialize the prior from filtered backprojection,
/// then alternate inner data-fidelity solves with denoiser updates of the
/// prior. Returns the state after the last iteration; per-iteration
/// artifacts stream through [`reconstruct_observed`]'s observer.
pub fn reconstruct<S: Scalar>(
    measured: &Sinogram<S>,
    cfg: &SpenerConfig,
    ground_truth: Option<&Image<S>>,
) -> Result<ReconState<S>> {
    reconstruct_observed(measured, cfg, ground_truth, |_| Ok(()))
}

pub fn reconstruct_observed<S: Scalar>(
    measured: &Sinogram<S>,
    cfg: &SpenerConfig,
    ground_truth: Option<&Image<S>>,
    mut observer: impl FnMut(IterationArtifacts<'_, S>) -> Result<()>,
) -> Result<ReconState<S>> {
    cfg.validate()?;
    let net = cfg.effective_net();
    let denoiser = cfg.effective_denoiser();

    let initial_prior = fbp(measured)?;
    let mut prior = initial_prior.clone();
    let mut params = NetworkParams::<S>::init(&net, mix_seed(&[cfg.seed, 0x1217]))?;
    let mut trace = Vec::with_capacity(cfg.hqs.outer_iterations);
    let mut extracted = prior.clone();

    for t in 1..=cfg.hqs.outer_iterations {
        if cfg.hqs.cold_restart && t > 1 {
            params = NetworkParams::<S>::init(&net, mix_seed(&[cfg.seed, 0x1217, t as u64]))?;
        }
        let (updated, stats) = solve_data_fidelity(params, &prior, measured, cfg, t)?;
        params = updated;
        extracted = extract_image(&params, &prior);

        let (psnr, ssim) = match ground_truth {
            Some(gt) => {
                let report = metrics::evaluate(&extracted, gt, None)?;
                (Some(report.psnr), Some(report.ssim))
            }
            None => (None, None),
        };
        let record = TraceRecord {
            iteration: t,
            loss_dc: *stats.epoch_loss_dc.last().unwrap_or(&f64::NAN),
            loss_reg: *stats.epoch_loss_reg.last().unwrap_or(&f64::NAN),
            psnr,
            ssim,
        };
        trace.push(record);

        // Prior update: denoised extraction, or frozen initial prior.
        let next_prior = if cfg.ablation == Ablation::NoIteration {
            initial_prior.clone()
        } else {
            denoise(&extracted, &denoiser)?
        };
        observer(IterationArtifacts {
            iteration: t,
            extracted: &extracted,
            prior: &next_prior,
            initial_prior: &initial_prior,
            params: &params,
            record: &record,
        })?;
        prior = next_prior;
    }

    Ok(ReconState {
        iteration: cfg.hqs.outer_iterations,
        prior,
        extracted,
        params,
        trace,
    })
}
