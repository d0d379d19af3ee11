//! Discrete fan-beam forward projector, its exact adjoint, and filtered
//! backprojection.
//!
//! The projector integrates a bilinearly-interpolated pixel grid along each
//! ray with midpoint quadrature at a fixed step of half a pixel. The adjoint
//! replays the same quadrature points and splats with the transposed bilinear
//! weights, so `<Ax, y> == <x, A^T y>` holds to rounding.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::geometry::{sample_points_into, FanBeamGeometry};
use crate::scalar::Scalar;

/// Square grid of attenuation values centered at the isocenter.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<S> {
    size: usize,
    pixel_size: S,
    values: Vec<S>,
}

impl<S: Scalar> Image<S> {
    pub fn new(size: usize, pixel_size: S, values: Vec<S>) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!("image size must be >= 2, got {size}")));
        }
        if values.len() != size * size {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", size * size),
                got: format!("{}", values.len()),
            });
        }
        if !(pixel_size > S::zero()) {
            return Err(Error::invalid("pixel_size must be > 0"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "image values".into() });
        }
        Ok(Image { size, pixel_size, values })
    }

    pub fn zeros(size: usize, pixel_size: S) -> Self {
        Image { size, pixel_size, values: vec![S::zero(); size * size] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixel_size(&self) -> S {
        self.pixel_size
    }

    /// Physical side length of the grid.
    pub fn extent(&self) -> S {
        S::from_usize(self.size).unwrap() * self.pixel_size
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> S {
        self.values[row * self.size + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: S) {
        self.values[row * self.size + col] = v;
    }

    /// Physical coordinate of a pixel center; `col` maps to x, `row` to y.
    #[inline]
    pub fn pixel_center(&self, row: usize, col: usize) -> [S; 2] {
        let half = S::from_usize(self.size).unwrap() / S::of(2.0);
        [
            (S::from_usize(col).unwrap() + S::of(0.5) - half) * self.pixel_size,
            (S::from_usize(row).unwrap() + S::of(0.5) - half) * self.pixel_size,
        ]
    }

    /// Bilinear interpolation weights of the four pixels around a physical
    /// point. Pixels outside the grid get weight zero (zero padding), which
    /// keeps the gather and the transposed splat exactly adjoint.
    #[inline]
    pub fn bilinear_weights(&self, p: [S; 2]) -> ([usize; 4], [S; 4]) {
        let n = self.size;
        let half = S::from_usize(n).unwrap() / S::of(2.0);
        let gx = p[0] / self.pixel_size + half - S::of(0.5);
        let gy = p[1] / self.pixel_size + half - S::of(0.5);
        let x0 = gx.floor();
        let y0 = gy.floor();
        let fx = gx - x0;
        let fy = gy - y0;
        let ix = x0.to_isize().unwrap_or(isize::MIN);
        let iy = y0.to_isize().unwrap_or(isize::MIN);
        let one = S::one();
        let w = [
            (one - fx) * (one - fy),
            fx * (one - fy),
            (one - fx) * fy,
            fx * fy,
        ];
        let mut idx = [usize::MAX; 4];
        let mut wgt = [S::zero(); 4];
        let offsets = [(0isize, 0isize), (1, 0), (0, 1), (1, 1)];
        for (k, (dx, dy)) in offsets.iter().enumerate() {
            let cx = ix + dx;
            let cy = iy + dy;
            if cx >= 0 && cy >= 0 && (cx as usize) < n && (cy as usize) < n {
                idx[k] = cy as usize * n + cx as usize;
                wgt[k] = w[k];
            }
        }
        (idx, wgt)
    }

    /// Bilinear sample at a physical point, zero outside the grid.
    #[inline]
    pub fn bilinear_at(&self, p: [S; 2]) -> S {
        let (idx, w) = self.bilinear_weights(p);
        let mut acc = S::zero();
        for k in 0..4 {
            if idx[k] != usize::MAX {
                acc += w[k] * self.values[idx[k]];
            }
        }
        acc
    }

    pub fn min_max(&self) -> (S, S) {
        let mut lo = S::infinity();
        let mut hi = S::neg_infinity();
        for &v in &self.values {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }
}

/// Measured line integrals, `n_views x n_detectors`, post-log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram<S> {
    geometry: FanBeamGeometry<S>,
    values: Vec<S>,
}

impl<S: Scalar> Sinogram<S> {
    pub fn new(geometry: FanBeamGeometry<S>, values: Vec<S>) -> Result<Self> {
        if values.len() != geometry.n_rays() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} sinogram entries", geometry.n_rays()),
                got: format!("{}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "sinogram values".into() });
        }
        Ok(Sinogram { geometry, values })
    }

    pub fn zeros(geometry: FanBeamGeometry<S>) -> Self {
        let n = geometry.n_rays();
        Sinogram { geometry, values: vec![S::zero(); n] }
    }

    pub fn geometry(&self) -> &FanBeamGeometry<S> {
        &self.geometry
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, view: usize, detector: usize) -> S {
        self.values[view * self.geometry.n_detectors + detector]
    }

    #[inline]
    pub fn set(&mut self, view: usize, detector: usize, v: S) {
        self.values[view * self.geometry.n_detectors + detector] = v;
    }
}

/// Quadrature step used by the discrete projector: half a pixel,
/// independent of the renderer's `delta_p`.
pub fn projector_step<S: Scalar>(geom: &FanBeamGeometry<S>) -> S {
    geom.pixel_size / S::of(2.0)
}

/// Forward projection `A x`: line integral of the bilinear interpolant
/// along every ray, midpoint rule at half-pixel steps. Linear in the image.
pub fn forward_project<S: Scalar>(img: &Image<S>, geom: &FanBeamGeometry<S>) -> Result<Sinogram<S>> {
    check_grid(img, geom)?;
    let step = projector_step(geom);
    let n_d = geom.n_detectors;
    let mut values = vec![S::zero(); geom.n_rays()];
    values
        .par_chunks_mut(n_d)
        .enumerate()
        .for_each(|(v, row)| {
            let mut pts = Vec::new();
            for (d, out) in row.iter_mut().enumerate() {
                let ray = geom.ray_for(v, d).expect("in-range ray");
                sample_points_into(&ray, step, &mut pts).expect("positive step");
                let mut acc = S::zero();
                for &p in &pts {
                    acc += img.bilinear_at(p);
                }
                *out = acc * step;
            }
        });
    Sinogram::new(geom.clone(), values)
}

/// Exact adjoint `A^T y`: replays the projector's quadrature points and
/// splats with transposed bilinear weights.
pub fn backproject<S: Scalar>(sino: &Sinogram<S>) -> Result<Image<S>> {
    let geom = sino.geometry();
    let step = projector_step(geom);
    let n = geom.image_size;
    let n_d = geom.n_detectors;

    // Deterministic parallelism: contiguous view shards accumulate into
    // private buffers, merged in shard order.
    let shards = 8.min(geom.n_views).max(1);
    let chunk = geom.n_views.div_ceil(shards);
    let partials: Vec<Vec<S>> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut buf = vec![S::zero(); n * n];
            let mut pts = Vec::new();
            let lo = s * chunk;
            let hi = ((s + 1) * chunk).min(geom.n_views);
            let img = Image::zeros(n, geom.pixel_size); // weight helper only
            for v in lo..hi {
                for d in 0..n_d {
                    let y = sino.get(v, d) * step;
                    if y == S::zero() {
                        continue;
                    }
                    let ray = geom.ray_for(v, d).expect("in-range ray");
                    sample_points_into(&ray, step, &mut pts).expect("positive step");
                    for &p in &pts {
                        let (idx, w) = img.bilinear_weights(p);
                        for k in 0..4 {
                            if idx[k] != usize::MAX {
                                buf[idx[k]] += w[k] * y;
                            }
                        }
                    }
                }
            }
            buf
        })
        .collect();

    let mut values = vec![S::zero(); n * n];
    for buf in &partials {
        for (o, &b) in values.iter_mut().zip(buf.iter()) {
            *o += b;
        }
    }
    Image::new(n, geom.pixel_size, values)
}

/// Reconstruction filter for [`fbp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FbpFilter {
    /// Plain band-limited ramp.
    #[default]
    RamLak,
    /// Ramp apodized by a Hann window.
    Hann,
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Ramp-filters one detector row (in virtual-detector coordinates with
/// spacing `ds`), via FFT with zero padding to the next power of two at or
/// above twice the row length. Returns the filtered row, units of
/// `input / length`.
pub fn ramp_filter_row<S: Scalar>(row: &[S], ds: S, filter: FbpFilter) -> Vec<S> {
    let mut out = ramp_filter_row_padded(row, ds, filter);
    out.truncate(row.len());
    out
}

/// As [`ramp_filter_row`], but returns the full padded period of the
/// circular convolution (the filter's complete support).
pub fn ramp_filter_row_padded<S: Scalar>(row: &[S], ds: S, filter: FbpFilter) -> Vec<S> {
    let n = row.len();
    let p = next_pow2(2 * n);
    let mut planner = FftPlanner::<S>::new();
    let fwd = planner.plan_fft_forward(p);
    let inv = planner.plan_fft_inverse(p);

    let response = ramp_response(&mut planner, p, ds, filter);
    let mut buf: Vec<Complex<S>> = row
        .iter()
        .map(|&v| Complex::new(v, S::zero()))
        .chain(std::iter::repeat(Complex::new(S::zero(), S::zero())))
        .take(p)
        .collect();
    fwd.process(&mut buf);
    for (c, h) in buf.iter_mut().zip(&response) {
        *c = *c * *h;
    }
    inv.process(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

/// Frequency response of the band-limited ramp on a period of `p` samples,
/// folded with the convolution's `ds / p` quadrature and normalization
/// factors. Built from the spatial-domain kernel (`1/(4 ds^2)` at zero,
/// `-1/(pi n ds)^2` at odd lags) rather than by sampling `|f|`, which would
/// bias the reconstruction's DC level; the residual zero-frequency leak of
/// the truncated kernel is removed so the response is exactly zero at DC.
fn ramp_response<S: Scalar>(
    planner: &mut FftPlanner<S>,
    p: usize,
    ds: S,
    filter: FbpFilter,
) -> Vec<S> {
    let mut kernel = vec![Complex::new(S::zero(), S::zero()); p];
    let inv_ds2 = S::one() / (ds * ds);
    kernel[0] = Complex::new(inv_ds2 / S::of(4.0), S::zero());
    for m in (1..=p / 2).step_by(2) {
        let pi_m = S::of(std::f64::consts::PI) * S::from_usize(m).unwrap();
        let v = -inv_ds2 / (pi_m * pi_m);
        kernel[m] = Complex::new(v, S::zero());
        kernel[p - m] = Complex::new(v, S::zero());
    }
    let fwd = planner.plan_fft_forward(p);
    fwd.process(&mut kernel);

    // Fold in ds (quadrature step of the convolution) and 1/p (unnormalized
    // inverse FFT) so callers can multiply spectra directly.
    let scale = ds / S::from_usize(p).unwrap();
    let nyq = p / 2;
    kernel
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mut h = c.re * scale;
            if filter == FbpFilter::Hann {
                let kappa = k.min(p - k);
                let x = S::of(std::f64::consts::PI) * S::from_usize(kappa).unwrap()
                    / S::from_usize(nyq).unwrap();
                h = h * S::of(0.5) * (S::one() + x.cos());
            }
            h
        })
        .collect()
}

/// Fan-beam filtered backprojection for a flat detector: cosine
/// pre-weighting, ramp filtering along the detector axis, and
/// distance-weighted backprojection over the full scan. The output is
/// clamped to be nonnegative and masked to the FOV disk.
pub fn fbp<S: Scalar>(sino: &Sinogram<S>) -> Result<Image<S>> {
    fbp_with(sino, FbpFilter::RamLak)
}

pub fn fbp_with<S: Scalar>(sino: &Sinogram<S>, filter: FbpFilter) -> Result<Image<S>> {
    let geom = sino.geometry();
    let n = geom.image_size;
    let n_d = geom.n_detectors;
    let sd = geom.source_distance;
    let dd = geom.detector_distance;

    // Rescale detector offsets onto the virtual detector through the
    // isocenter; cosine-weight, then ramp-filter every view.
    let rescale = sd / (sd + dd);
    let ds = geom.detector_spacing * rescale;
    let s_coords: Vec<S> = (0..n_d)
        .map(|d| geom.detector_offset(d) * rescale)
        .collect();
    let weights: Vec<S> = s_coords
        .iter()
        .map(|&s| sd / (sd * sd + s * s).sqrt())
        .collect();

    let filtered: Vec<Vec<S>> = (0..geom.n_views)
        .into_par_iter()
        .map(|v| {
            let row: Vec<S> = (0..n_d).map(|d| sino.get(v, d) * weights[d]).collect();
            ramp_filter_row(&row, ds, filter)
        })
        .collect();

    // Pixel-driven backprojection: f(x) = (db/2) * sum_v U^2 q_v(s'(x)).
    let db = S::of(std::f64::consts::TAU) / S::from_usize(geom.n_views).unwrap();
    let half_db = db / S::of(2.0);
    let trig: Vec<(S, S)> = geom.angles.iter().map(|&b| (b.sin(), b.cos())).collect();
    let center = (S::from_usize(n_d).unwrap() - S::one()) / S::of(2.0);
    let fov2 = geom.fov_radius * geom.fov_radius;

    let out = Image::zeros(n, geom.pixel_size);
    let mut values = vec![S::zero(); n * n];
    values
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(r, row_out)| {
            for (c, pix) in row_out.iter_mut().enumerate() {
                let p = out.pixel_center(r, c);
                if p[0] * p[0] + p[1] * p[1] > fov2 {
                    continue;
                }
                let mut acc = S::zero();
                for (v, &(sin_b, cos_b)) in trig.iter().enumerate() {
                    // Axial distance from the source plane and lateral
                    // coordinate on the virtual detector.
                    let axial = sd - (p[0] * cos_b + p[1] * sin_b);
                    let lateral = -p[0] * sin_b + p[1] * cos_b;
                    let s = sd * lateral / axial;
                    let gi = s / ds + center;
                    let i0 = gi.floor();
                    let frac = gi - i0;
                    let i = i0.to_isize().unwrap_or(-1);
                    let q = &filtered[v];
                    let mut qv = S::zero();
                    if i >= 0 && (i as usize) + 1 < n_d {
                        let i = i as usize;
                        qv = q[i] * (S::one() - frac) + q[i + 1] * frac;
                    }
                    let u = sd / axial;
                    acc += u * u * qv;
                }
                *pix = (acc * half_db).max(S::zero());
            }
        });

    Image::new(n, geom.pixel_size, values)
}

fn check_grid<S: Scalar>(img: &Image<S>, geom: &FanBeamGeometry<S>) -> Result<()> {
    if img.size() != geom.image_size || img.pixel_size() != geom.pixel_size {
        return Err(Error::DimensionMismatch {
            expected: format!("{} px grid at {}", geom.image_size, geom.pixel_size),
            got: format!("{} px grid at {}", img.size(), img.pixel_size()),
        });
    }
    Ok(())
}
