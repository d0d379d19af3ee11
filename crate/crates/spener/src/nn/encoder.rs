//! Prior-image encoder: two 3x3 convolutions (ReLU between, linear after)
//! producing a per-pixel feature map, plus continuous bilinear sampling of
//! that map and the backward passes for both.
//!
//! Feature maps are stored channel-last (`[row][col][channel]`) so that the
//! per-point gather/scatter and the convolution inner loops run over
//! contiguous memory.

use rayon::prelude::*;

use super::NetworkParams;
use crate::scalar::Scalar;
use crate::tomo::Image;

/// Dense per-pixel feature vectors over the prior grid, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<S> {
    size: usize,
    channels: usize,
    data: Vec<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(size: usize, channels: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), size * size * channels);
        FeatureMap { size, channels, data }
    }

    pub fn zeros(size: usize, channels: usize) -> Self {
        FeatureMap { size, channels, data: vec![S::zero(); size * size * channels] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[S] {
        let base = (row * self.size + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    /// Bilinear cell of a normalized coordinate with pixel-center
    /// alignment and edge clamping: base indices of the four pixels plus
    /// their weights.
    #[inline]
    pub(crate) fn sample_cell(&self, p_norm: [S; 2]) -> ([usize; 4], [S; 4]) {
        let n = self.size;
        let nf = n as f64;
        let gx = ((p_norm[0].as_f64() + 0.5) * nf - 0.5).clamp(0.0, nf - 1.0);
        let gy = ((p_norm[1].as_f64() + 0.5) * nf - 0.5).clamp(0.0, nf - 1.0);
        let x0 = (gx.floor() as usize).min(n.saturating_sub(2));
        let y0 = (gy.floor() as usize).min(n.saturating_sub(2));
        let fx = gx - x0 as f64;
        let fy = gy - y0 as f64;
        let c = self.channels;
        let base = |r: usize, col: usize| (r * n + col) * c;
        (
            [base(y0, x0), base(y0, x0 + 1), base(y0 + 1, x0), base(y0 + 1, x0 + 1)],
            [
                S::of((1.0 - fx) * (1.0 - fy)),
                S::of(fx * (1.0 - fy)),
                S::of((1.0 - fx) * fy),
                S::of(fx * fy),
            ],
        )
    }

    /// Samples the feature vector at a continuous location into `out`.
    #[inline]
    pub fn sample_into(&self, p_norm: [S; 2], out: &mut [S]) {
        let (bases, w) = self.sample_cell(p_norm);
        let c = self.channels;
        let c0 = &self.data[bases[0]..bases[0] + c];
        let c1 = &self.data[bases[1]..bases[1] + c];
        let c2 = &self.data[bases[2]..bases[2] + c];
        let c3 = &self.data[bases[3]..bases[3] + c];
        for ((((o, &v0), &v1), &v2), &v3) in
            out.iter_mut().zip(c0).zip(c1).zip(c2).zip(c3)
        {
            *o = v3.mul_add(w[3], v2.mul_add(w[2], v1.mul_add(w[1], v0 * w[0])));
        }
    }

    pub fn sample(&self, p_norm: [S; 2]) -> Vec<S> {
        let mut out = vec![S::zero(); self.channels];
        self.sample_into(p_norm, &mut out);
        out
    }

    /// Transposed sampling: splats a per-channel gradient back onto the
    /// map's gradient buffer.
    #[inline]
    pub fn scatter_into(&self, p_norm: [S; 2], d_features: &[S], grad: &mut [S]) {
        let (bases, w) = self.sample_cell(p_norm);
        for k in 0..4 {
            let dst = &mut grad[bases[k]..bases[k] + self.channels];
            for (o, &d) in dst.iter_mut().zip(d_features) {
                *o = d.mul_add(w[k], *o);
            }
        }
    }
}

/// Post-ReLU activations of the first convolution, cached for the backward
/// pass.
#[derive(Debug, Clone)]
pub struct EncoderActivations<S> {
    pub relu1: Vec<S>,
}

/// Runs the two-layer encoder on the prior image: conv3x3 -> ReLU ->
/// conv3x3, zero padding, spatial size preserved.
pub fn encode_image<S: Scalar>(
    z: &Image<S>,
    params: &NetworkParams<S>,
) -> (FeatureMap<S>, EncoderActivations<S>) {
    let ch = params
        .config
        .encoder
        .expect("encode_image requires an encoder-enabled network")
        .channels;
    let n = z.size();
    let mut relu1 = vec![S::zero(); n * n * ch];
    conv3x3(
        z.values(),
        1,
        n,
        params.tensor(&params.layout.enc1_w),
        params.tensor(&params.layout.enc1_b),
        ch,
        true,
        &mut relu1,
    );
    let mut features = vec![S::zero(); n * n * ch];
    conv3x3(
        &relu1,
        ch,
        n,
        params.tensor(&params.layout.enc2_w),
        params.tensor(&params.layout.enc2_b),
        ch,
        false,
        &mut features,
    );
    (FeatureMap::new(n, ch, features), EncoderActivations { relu1 })
}

/// 3x3 convolution with zero padding, channel-last layout, kernel layout
/// `[c_out][tap][c_in]`.
fn conv3x3<S: Scalar>(
    input: &[S],
    in_ch: usize,
    n: usize,
    kernel: &[S],
    bias: &[S],
    out_ch: usize,
    relu: bool,
    out: &mut [S],
) {
    out.par_chunks_mut(n * out_ch)
        .enumerate()
        .for_each(|(r, out_row)| {
            for c in 0..n {
                let dst = &mut out_row[c * out_ch..(c + 1) * out_ch];
                dst.copy_from_slice(bias);
                for dy in 0..3usize {
                    let rr = r + dy;
                    if rr < 1 || rr > n {
                        continue;
                    }
                    let rr = rr - 1;
                    for dx in 0..3usize {
                        let cc = c + dx;
                        if cc < 1 || cc > n {
                            continue;
                        }
                        let cc = cc - 1;
                        let src = &input[(rr * n + cc) * in_ch..(rr * n + cc + 1) * in_ch];
                        let tap = dy * 3 + dx;
                        for (co, o) in dst.iter_mut().enumerate() {
                            let krow = &kernel[(co * 9 + tap) * in_ch..(co * 9 + tap + 1) * in_ch];
                            let mut acc = *o;
                            for (k, &s) in krow.iter().zip(src) {
                                acc = k.mul_add(s, acc);
                            }
                            *o = acc;
                        }
                    }
                }
                if relu {
                    for o in dst.iter_mut() {
                        *o = o.max(S::zero());
                    }
                }
            }
        });
}

/// Accumulates encoder kernel/bias gradients into the flat gradient vector
/// given the loss gradient with respect to the feature map. Uses the
/// activations cached at the entry of the current outer iteration.
pub fn encoder_backward<S: Scalar>(
    d_features: &[S],
    acts: &EncoderActivations<S>,
    z: &Image<S>,
    params: &NetworkParams<S>,
    grads: &mut [S],
) {
    let ch = params
        .config
        .encoder
        .expect("encoder_backward requires an encoder-enabled network")
        .channels;
    let n = z.size();
    debug_assert_eq!(d_features.len(), n * n * ch);

    // Second layer: kernel and bias gradients, parallel over output
    // channels (disjoint writes, deterministic).
    {
        let k2_grad = &mut grads[params.layout.enc2_w.clone()];
        let chunk = 9 * ch;
        k2_grad
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(co, gk)| {
                for r in 0..n {
                    for c in 0..n {
                        let d = d_features[(r * n + c) * ch + co];
                        if d == S::zero() {
                            continue;
                        }
                        for dy in 0..3usize {
                            let rr = r + dy;
                            if rr < 1 || rr > n {
                                continue;
                            }
                            let rr = rr - 1;
                            for dx in 0..3usize {
                                let cc = c + dx;
                                if cc < 1 || cc > n {
                                    continue;
                                }
                                let cc = cc - 1;
                                let src = &acts.relu1[(rr * n + cc) * ch..(rr * n + cc + 1) * ch];
                                let dst = &mut gk[(dy * 3 + dx) * ch..(dy * 3 + dx + 1) * ch];
                                for (o, &s) in dst.iter_mut().zip(src) {
                                    *o = s.mul_add(d, *o);
                                }
                            }
                        }
                    }
                }
            });
    }
    {
        let b2_grad = &mut grads[params.layout.enc2_b.clone()];
        for p in 0..n * n {
            for (co, g) in b2_grad.iter_mut().enumerate() {
                *g += d_features[p * ch + co];
            }
        }
    }

    // Gradient flowing into the first layer's post-ReLU activations.
    let k2 = params.tensor(&params.layout.enc2_w);
    let mut d_act1 = vec![S::zero(); n * n * ch];
    d_act1
        .par_chunks_mut(n * ch)
        .enumerate()
        .for_each(|(r, row)| {
            for c in 0..n {
                let dst = &mut row[c * ch..(c + 1) * ch];
                for dy in 0..3usize {
                    // Output position that consumed this input via tap dy,dx.
                    let or = r + 1;
                    if or < dy || or - dy >= n {
                        continue;
                    }
                    let orr = or - dy;
                    for dx in 0..3usize {
                        let oc = c + 1;
                        if oc < dx || oc - dx >= n {
                            continue;
                        }
                        let occ = oc - dx;
                        let dout = &d_features[(orr * n + occ) * ch..(orr * n + occ + 1) * ch];
                        let tap = dy * 3 + dx;
                        for (co, &d) in dout.iter().enumerate() {
                            if d == S::zero() {
                                continue;
                            }
                            let krow = &k2[(co * 9 + tap) * ch..(co * 9 + tap + 1) * ch];
                            for (o, &k) in dst.iter_mut().zip(krow) {
                                *o = k.mul_add(d, *o);
                            }
                        }
                    }
                }
                // ReLU mask from the cached post-activation.
                let act = &acts.relu1[(r * n + c) * ch..(r * n + c + 1) * ch];
                for (o, &a) in dst.iter_mut().zip(act) {
                    if a <= S::zero() {
                        *o = S::zero();
                    }
                }
            }
        });

    // First layer: single input channel (the prior image itself).
    {
        let k1_grad = &mut grads[params.layout.enc1_w.clone()];
        let b1_grad_range = params.layout.enc1_b.clone();
        for r in 0..n {
            for c in 0..n {
                let dd = &d_act1[(r * n + c) * ch..(r * n + c + 1) * ch];
                for dy in 0..3usize {
                    let rr = r + dy;
                    if rr < 1 || rr > n {
                        continue;
                    }
                    let rr = rr - 1;
                    for dx in 0..3usize {
                        let cc = c + dx;
                        if cc < 1 || cc > n {
                            continue;
                        }
                        let cc = cc - 1;
                        let s = z.values()[rr * n + cc];
                        let tap = dy * 3 + dx;
                        for (co, &d) in dd.iter().enumerate() {
                            k1_grad[co * 9 + tap] = s.mul_add(d, k1_grad[co * 9 + tap]);
                        }
                    }
                }
            }
        }
        let b1_grad = &mut grads[b1_grad_range];
        for p in 0..n * n {
            for (co, g) in b1_grad.iter_mut().enumerate() {
                *g += d_act1[p * ch + co];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{EncoderConfig, HashEncodingConfig, MlpConfig, NetConfig};

    fn params(channels: usize) -> NetworkParams<f64> {
        let cfg = NetConfig {
            hash: HashEncodingConfig {
                levels: 2,
                features_per_level: 2,
                table_size_log2: 10,
                base_resolution: 2,
                growth: 2.0,
            },
            encoder: Some(EncoderConfig { channels }),
            mlp: MlpConfig { hidden_width: 8 },
        };
        NetworkParams::init(&cfg, 5).unwrap()
    }

    fn test_image(n: usize) -> Image<f64> {
        let values = (0..n * n).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect();
        Image::new(n, 1.0 / n as f64, values).unwrap()
    }

    #[test]
    fn output_shape_matches_config() {
        let p = params(48);
        let z = test_image(16);
        let (fm, _) = encode_image(&z, &p);
        assert_eq!(fm.channels(), 48);
        assert_eq!(fm.size(), 16);
    }

    #[test]
    fn zero_parameters_give_a_zero_feature_map() {
        let mut p = params(8);
        for v in p.data.iter_mut() {
            *v = 0.0;
        }
        let z = test_image(12);
        let (fm, _) = encode_image(&z, &p);
        assert!(fm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let mut p = params(4);
        let z = test_image(10);

        // Scalar probe: weighted sum of the feature map.
        let probe_w: Vec<f64> = (0..10 * 10 * 4).map(|i| ((i * 31 % 17) as f64 - 8.0) / 8.0).collect();
        let probe = |params: &NetworkParams<f64>| -> f64 {
            let (fm, _) = encode_image(&z, params);
            fm.data().iter().zip(&probe_w).map(|(a, b)| a * b).sum()
        };

        let (_, acts) = encode_image(&z, &p);
        let mut grads = vec![0.0; p.param_count()];
        encoder_backward(&probe_w, &acts, &z, &p, &mut grads);

        let step = 1e-5;
        let ranges = [
            p.layout.enc1_w.clone(),
            p.layout.enc1_b.clone(),
            p.layout.enc2_w.clone(),
            p.layout.enc2_b.clone(),
        ];
        let mut checked = 0;
        for range in ranges {
            for idx in range.step_by(7) {
                let orig = p.data[idx];
                p.data[idx] = orig + step;
                let up = probe(&p);
                p.data[idx] = orig - step;
                let down = probe(&p);
                p.data[idx] = orig;
                let fd = (up - down) / (2.0 * step);
                let g = grads[idx];
                assert!(
                    (fd - g).abs() <= 1e-5 * fd.abs().max(1e-3),
                    "idx {idx}: fd {fd}, analytic {g}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn pixel_center_sampling_is_exact() {
        let fm = FeatureMap::new(
            8,
            3,
            (0..8 * 8 * 3).map(|i| i as f64 * 0.01).collect(),
        );
        for (r, c) in [(0usize, 0usize), (3, 5), (7, 7)] {
            // Normalized coordinate of the pixel center (n = 8).
            let p = [
                (c as f64 + 0.5) / 8.0 - 0.5,
                (r as f64 + 0.5) / 8.0 - 0.5,
            ];
            assert_eq!(fm.sample(p), fm.pixel(r, c));
        }
    }

    #[test]
    fn sampled_features_stay_within_the_neighbor_hull() {
        let fm = FeatureMap::new(
            6,
            2,
            (0..6 * 6 * 2).map(|i| ((i * 7 % 23) as f64) / 23.0).collect(),
        );
        for &p in &[[0.13f64, -0.21], [-0.49, 0.49], [0.02, 0.37]] {
            let (bases, _) = fm.sample_cell(p);
            let v = fm.sample(p);
            for ch in 0..2 {
                let corners: Vec<f64> = bases.iter().map(|&b| fm.data()[b + ch]).collect();
                let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(v[ch] >= lo - 1e-12 && v[ch] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn sampling_gradient_matches_finite_differences() {
        let mut data: Vec<f64> = (0..5 * 5 * 2).map(|i| (i as f64 * 0.13).cos()).collect();
        let p = [0.11, -0.27];
        let d_features = [0.6, -1.2];

        let fm = FeatureMap::new(5, 2, data.clone());
        let mut grad = vec![0.0; data.len()];
        fm.scatter_into(p, &d_features, &mut grad);

        let step = 1e-6;
        for idx in (0..data.len()).step_by(3) {
            let orig = data[idx];
            data[idx] = orig + step;
            let up: f64 = FeatureMap::new(5, 2, data.clone())
                .sample(p)
                .iter()
                .zip(&d_features)
                .map(|(a, b)| a * b)
                .sum();
            data[idx] = orig - step;
            let down: f64 = FeatureMap::new(5, 2, data.clone())
                .sample(p)
                .iter()
                .zip(&d_features)
                .map(|(a, b)| a * b)
                .sum();
            data[idx] = orig;
            let fd = (up - down) / (2.0 * step);
            assert!((fd - grad[idx]).abs() <= 1e-6 * fd.abs().max(1e-6));
        }
    }
}
