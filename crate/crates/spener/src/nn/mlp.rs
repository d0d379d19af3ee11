//! Batched fusion-MLP forward/backward over point sets.
//!
//! The MLP is two ReLU hidden layers and a linear scalar output. Batches of
//! points are processed through register-tiled matmul kernels built on
//! `mul_add`; the same kernels serve single-point evaluation (a batch of
//! one), so batched and pointwise results agree bitwise. Accumulation order
//! is fixed, which the reproducibility guarantees rely on.

use super::{hash_encode_into, hash_scatter_grad, FeatureMap, NetworkParams};
use crate::scalar::Scalar;

/// Fixed shard count for deterministic parallel gradient accumulation.
pub const NSHARDS_DEFAULT: usize = 2;

const TILE: usize = 16;

/// Reusable batch buffers; row-major `[point][dim]`.
#[derive(Debug, Clone)]
pub struct MlpScratch<S> {
    pub x: Vec<S>,
    pub h1: Vec<S>,
    pub h2: Vec<S>,
    pub out: Vec<S>,
    pub dh1: Vec<S>,
    pub dh2: Vec<S>,
    pub dx: Vec<S>,
    capacity: usize,
    input: usize,
    hidden: usize,
}

impl<S: Scalar> MlpScratch<S> {
    pub fn new(params: &NetworkParams<S>) -> Self {
        MlpScratch {
            x: Vec::new(),
            h1: Vec::new(),
            h2: Vec::new(),
            out: Vec::new(),
            dh1: Vec::new(),
            dh2: Vec::new(),
            dx: Vec::new(),
            capacity: 0,
            input: params.input_dim(),
            hidden: params.hidden_width(),
        }
    }

    fn ensure(&mut self, m: usize) {
        if m <= self.capacity {
            return;
        }
        self.x.resize(m * self.input, S::zero());
        self.h1.resize(m * self.hidden, S::zero());
        self.h2.resize(m * self.hidden, S::zero());
        self.out.resize(m, S::zero());
        self.dh1.resize(m * self.hidden, S::zero());
        self.dh2.resize(m * self.hidden, S::zero());
        self.dx.resize(m * self.input, S::zero());
        self.capacity = m;
    }
}

/// `C[m][n] += A[m][k] * B[k][n]`, row-major everywhere. `C` carries its
/// initial contents (bias prefill or zeros).
fn gemm_rr<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, n: usize, k: usize) {
    let full = n - n % TILE;
    let mut i = 0;
    while i + 2 <= m {
        let (arow0, arow1) = (&a[i * k..(i + 1) * k], &a[(i + 1) * k..(i + 2) * k]);
        let mut t = 0;
        while t < full {
            let mut acc0 = [S::zero(); TILE];
            let mut acc1 = [S::zero(); TILE];
            acc0.copy_from_slice(&c[i * n + t..i * n + t + TILE]);
            acc1.copy_from_slice(&c[(i + 1) * n + t..(i + 1) * n + t + TILE]);
            for kk in 0..k {
                let a0 = arow0[kk];
                let a1 = arow1[kk];
                let brow: &[S; TILE] = b[kk * n + t..kk * n + t + TILE].try_into().unwrap();
                for j in 0..TILE {
                    acc0[j] = brow[j].mul_add(a0, acc0[j]);
                    acc1[j] = brow[j].mul_add(a1, acc1[j]);
                }
            }
            c[i * n + t..i * n + t + TILE].copy_from_slice(&acc0);
            c[(i + 1) * n + t..(i + 1) * n + t + TILE].copy_from_slice(&acc1);
            t += TILE;
        }
        for j in full..n {
            let mut acc0 = c[i * n + j];
            let mut acc1 = c[(i + 1) * n + j];
            for kk in 0..k {
                acc0 = b[kk * n + j].mul_add(arow0[kk], acc0);
                acc1 = b[kk * n + j].mul_add(arow1[kk], acc1);
            }
            c[i * n + j] = acc0;
            c[(i + 1) * n + j] = acc1;
        }
        i += 2;
    }
    if i < m {
        let arow = &a[i * k..(i + 1) * k];
        let mut t = 0;
        while t < full {
            let mut acc = [S::zero(); TILE];
            acc.copy_from_slice(&c[i * n + t..i * n + t + TILE]);
            for kk in 0..k {
                let av = arow[kk];
                let brow: &[S; TILE] = b[kk * n + t..kk * n + t + TILE].try_into().unwrap();
                for j in 0..TILE {
                    acc[j] = brow[j].mul_add(av, acc[j]);
                }
            }
            c[i * n + t..i * n + t + TILE].copy_from_slice(&acc);
            t += TILE;
        }
        for j in full..n {
            let mut acc = c[i * n + j];
            for kk in 0..k {
                acc = b[kk * n + j].mul_add(arow[kk], acc);
            }
            c[i * n + j] = acc;
        }
    }
}

#[inline]
fn axpy<S: Scalar>(dst: &mut [S], scale: S, src: &[S]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o = s.mul_add(scale, *o);
    }
}

/// Builds the MLP input rows (hash encoding concatenated with sampled
/// prior features) for a batch of normalized coordinates.
pub fn build_inputs<S: Scalar>(
    params: &NetworkParams<S>,
    features: &FeatureMap<S>,
    coords: &[[S; 2]],
    x: &mut [S],
) {
    let input = params.input_dim();
    let lf = params.config.hash.output_dim();
    for (i, &p) in coords.iter().enumerate() {
        let row = &mut x[i * input..(i + 1) * input];
        hash_encode_into(p, params, &mut row[..lf]);
        features.sample_into(p, &mut row[lf..]);
    }
}

/// Forward pass over a batch of coordinates; leaves activations in the
/// scratch for a subsequent backward pass.
pub fn forward_points<S: Scalar>(
    params: &NetworkParams<S>,
    features: &FeatureMap<S>,
    coords: &[[S; 2]],
    scratch: &mut MlpScratch<S>,
) {
    let m = coords.len();
    scratch.ensure(m);
    build_inputs(params, features, coords, &mut scratch.x);
    forward_prepared(params, m, scratch);
}

/// Forward pass when `scratch.x` already holds the input rows.
pub fn forward_prepared<S: Scalar>(params: &NetworkParams<S>, m: usize, scratch: &mut MlpScratch<S>) {
    scratch.ensure(m);
    let h = params.hidden_width();
    let input = params.input_dim();
    let b1 = params.tensor(&params.layout.b1);
    let b2 = params.tensor(&params.layout.b2);
    let w3 = params.tensor(&params.layout.w3);
    let b3 = params.tensor(&params.layout.b3)[0];

    for i in 0..m {
        scratch.h1[i * h..(i + 1) * h].copy_from_slice(b1);
    }
    gemm_rr(&mut scratch.h1[..m * h], &scratch.x[..m * input], &params.w1t, m, h, input);
    for v in &mut scratch.h1[..m * h] {
        *v = v.max(S::zero());
    }

    for i in 0..m {
        scratch.h2[i * h..(i + 1) * h].copy_from_slice(b2);
    }
    gemm_rr(&mut scratch.h2[..m * h], &scratch.h1[..m * h], &params.w2t, m, h, h);
    for v in &mut scratch.h2[..m * h] {
        *v = v.max(S::zero());
    }

    for i in 0..m {
        let row = &scratch.h2[i * h..(i + 1) * h];
        let mut acc = b3;
        for (j, &v) in row.iter().enumerate() {
            acc = v.mul_add(w3[j], acc);
        }
        scratch.out[i] = acc;
    }
}

/// Backward pass for a batch whose forward activations are in `scratch`.
/// `d_out[i]` is the loss gradient of point `i`'s output. MLP weight and
/// bias gradients are accumulated into the flat `grads` vector; the input
/// gradients are left in `scratch.dx` for the caller to scatter into the
/// hash tables and the feature map.
pub fn backward_points<S: Scalar>(
    params: &NetworkParams<S>,
    m: usize,
    d_out: &[S],
    scratch: &mut MlpScratch<S>,
    grads: &mut [S],
) {
    let h = params.hidden_width();
    let input = params.input_dim();
    let w3 = params.tensor(&params.layout.w3).to_vec();
    let w2_range = params.layout.w2.clone();
    let w1_range = params.layout.w1.clone();

    // Output layer.
    {
        let mut gb3 = S::zero();
        for &d in &d_out[..m] {
            gb3 += d;
        }
        grads[params.layout.b3.start] += gb3;
    }
    for i in 0..m {
        let d = d_out[i];
        let h2row = &scratch.h2[i * h..(i + 1) * h];
        let dh2row = &mut scratch.dh2[i * h..(i + 1) * h];
        if d == S::zero() {
            for v in dh2row.iter_mut() {
                *v = S::zero();
            }
            continue;
        }
        let gw3 = &mut grads[params.layout.w3.clone()];
        axpy(gw3, d, h2row);
        for j in 0..h {
            dh2row[j] = if h2row[j] > S::zero() { d * w3[j] } else { S::zero() };
        }
    }

    // Hidden layer 2.
    {
        let gb2 = &mut grads[params.layout.b2.clone()];
        for i in 0..m {
            axpy(gb2, S::one(), &scratch.dh2[i * h..(i + 1) * h]);
        }
    }
    {
        let gw2 = &mut grads[w2_range];
        for i in 0..m {
            let drow = &scratch.dh2[i * h..(i + 1) * h];
            let h1row = &scratch.h1[i * h..(i + 1) * h];
            for j in 0..h {
                let d = drow[j];
                if d != S::zero() {
                    axpy(&mut gw2[j * h..(j + 1) * h], d, h1row);
                }
            }
        }
    }
    let w2 = params.tensor(&params.layout.w2);
    scratch.dh1[..m * h].fill(S::zero());
    gemm_rr(&mut scratch.dh1[..m * h], &scratch.dh2[..m * h], w2, m, h, h);
    for i in 0..m * h {
        if scratch.h1[i] <= S::zero() {
            scratch.dh1[i] = S::zero();
        }
    }

    // Hidden layer 1.
    {
        let gb1 = &mut grads[params.layout.b1.clone()];
        for i in 0..m {
            axpy(gb1, S::one(), &scratch.dh1[i * h..(i + 1) * h]);
        }
    }
    {
        let gw1 = &mut grads[w1_range];
        for i in 0..m {
            let drow = &scratch.dh1[i * h..(i + 1) * h];
            let xrow = &scratch.x[i * input..(i + 1) * input];
            for j in 0..h {
                let d = drow[j];
                if d != S::zero() {
                    axpy(&mut gw1[j * input..(j + 1) * input], d, xrow);
                }
            }
        }
    }
    let w1 = params.tensor(&params.layout.w1);
    scratch.dx[..m * input].fill(S::zero());
    gemm_rr(&mut scratch.dx[..m * input], &scratch.dh1[..m * h], w1, m, input, h);
}

/// Scatters the per-point input gradients (`scratch.dx`) into the hash
/// table region of `grads` and, when a gradient buffer is supplied, into
/// the feature-map gradient.
pub fn scatter_input_grads<S: Scalar>(
    params: &NetworkParams<S>,
    features: &FeatureMap<S>,
    coords: &[[S; 2]],
    scratch: &MlpScratch<S>,
    grads: &mut [S],
    d_feature_map: Option<&mut [S]>,
) {
    let input = params.input_dim();
    let lf = params.config.hash.output_dim();
    match d_feature_map {
        Some(dfm) => {
            for (i, &p) in coords.iter().enumerate() {
                let dxrow = &scratch.dx[i * input..(i + 1) * input];
                hash_scatter_grad(p, params, &dxrow[..lf], grads);
                features.scatter_into(p, &dxrow[lf..], dfm);
            }
        }
        None => {
            for (i, &p) in coords.iter().enumerate() {
                let dxrow = &scratch.dx[i * input..(i + 1) * input];
                hash_scatter_grad(p, params, &dxrow[..lf], grads);
            }
        }
    }
}
