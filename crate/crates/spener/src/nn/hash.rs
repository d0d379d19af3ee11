//! Multiresolution hash grid encoding of 2D coordinates.
//!
//! Coordinates live in the normalized square `[-0.5, 0.5]^2` (clamped
//! otherwise). Per level the containing cell of the `N x N` grid is located,
//! the four corner features are fetched (direct index when the dense corner
//! grid fits the table, spatial hash otherwise), and bilinearly blended.

use super::NetworkParams;
use crate::scalar::Scalar;

const HASH_PRIME_Y: u64 = 2_654_435_761;

/// Per-level cell lookup shared by the forward pass, the gradient scatter,
/// and the coordinate derivative.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CellLookup {
    /// Table entry index of each corner (00, 10, 01, 11).
    pub corners: [usize; 4],
    /// Bilinear corner weights in the same order.
    pub weights: [S4; 4],
    pub fx: S4,
    pub fy: S4,
}

// Weights are computed in f64 regardless of the parameter scalar: cheap,
// and keeps cell arithmetic identical across instantiations.
type S4 = f64;

#[inline]
pub(crate) fn locate<S: Scalar>(p_norm: [S; 2], resolution: usize, table_len: usize) -> CellLookup {
    let x = clamp_unit(p_norm[0].as_f64()) + 0.5;
    let y = clamp_unit(p_norm[1].as_f64()) + 0.5;
    locate_prepared(x, y, resolution, table_len)
}

/// `x`/`y` pre-shifted to `[0, 1]`.
#[inline]
fn locate_prepared(x: f64, y: f64, resolution: usize, table_len: usize) -> CellLookup {
    let n = resolution as f64;
    let x = x * n;
    let y = y * n;
    let ix = (x.floor() as usize).min(resolution - 1);
    let iy = (y.floor() as usize).min(resolution - 1);
    let fx = x - ix as f64;
    let fy = y - iy as f64;

    let side = resolution + 1;
    let dense = side * side;
    let index = |cx: usize, cy: usize| -> usize {
        if dense <= table_len {
            cy * side + cx
        } else {
            let h = (cx as u64) ^ (cy as u64).wrapping_mul(HASH_PRIME_Y);
            (h & (table_len as u64 - 1)) as usize
        }
    };
    CellLookup {
        corners: [
            index(ix, iy),
            index(ix + 1, iy),
            index(ix, iy + 1),
            index(ix + 1, iy + 1),
        ],
        weights: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        fx,
        fy,
    }
}

#[inline]
fn clamp_unit(v: f64) -> f64 {
    v.clamp(-0.5, 0.5)
}

/// Writes the concatenated per-level features of one coordinate into `out`
/// (length `levels * features_per_level`).
#[inline]
pub fn hash_encode_into<S: Scalar>(p_norm: [S; 2], params: &NetworkParams<S>, out: &mut [S]) {
    let f = params.config.hash.features_per_level;
    let x = (clamp_unit(p_norm[0].as_f64()) + 0.5) as f64;
    let y = (clamp_unit(p_norm[1].as_f64()) + 0.5) as f64;
    for (level, chunk) in out.chunks_exact_mut(f).enumerate() {
        let cell = locate_prepared(x, y, params.resolutions[level], params.table_lens[level]);
        let table = params.hash_level(level);
        let w = [
            S::of(cell.weights[0]),
            S::of(cell.weights[1]),
            S::of(cell.weights[2]),
            S::of(cell.weights[3]),
        ];
        if f == 2 {
            // Hot path: blend both features of each corner together.
            let c0 = &table[cell.corners[0] * 2..cell.corners[0] * 2 + 2];
            let c1 = &table[cell.corners[1] * 2..cell.corners[1] * 2 + 2];
            let c2 = &table[cell.corners[2] * 2..cell.corners[2] * 2 + 2];
            let c3 = &table[cell.corners[3] * 2..cell.corners[3] * 2 + 2];
            chunk[0] = c3[0].mul_add(w[3], c2[0].mul_add(w[2], c1[0].mul_add(w[1], c0[0] * w[0])));
            chunk[1] = c3[1].mul_add(w[3], c2[1].mul_add(w[2], c1[1].mul_add(w[1], c0[1] * w[0])));
        } else {
            for (fi, o) in chunk.iter_mut().enumerate() {
                let mut acc = S::zero();
                for k in 0..4 {
                    acc = table[cell.corners[k] * f + fi].mul_add(w[k], acc);
                }
                *o = acc;
            }
        }
    }
}

/// Convenience allocation variant of [`hash_encode_into`].
pub fn hash_encode<S: Scalar>(p_norm: [S; 2], params: &NetworkParams<S>) -> Vec<S> {
    let mut out = vec![S::zero(); params.config.hash.output_dim()];
    hash_encode_into(p_norm, params, &mut out);
    out
}

/// Scatters the encoding gradient of one coordinate back into the flat
/// gradient vector (hash-table region).
#[inline]
pub fn hash_scatter_grad<S: Scalar>(
    p_norm: [S; 2],
    params: &NetworkParams<S>,
    d_encoding: &[S],
    grads: &mut [S],
) {
    let f = params.config.hash.features_per_level;
    let x = clamp_unit(p_norm[0].as_f64()) + 0.5;
    let y = clamp_unit(p_norm[1].as_f64()) + 0.5;
    for (level, chunk) in d_encoding.chunks_exact(f).enumerate() {
        let cell = locate_prepared(x, y, params.resolutions[level], params.table_lens[level]);
        let base = params.layout.hash_levels[level].start;
        if f == 2 {
            let d0 = chunk[0];
            let d1 = chunk[1];
            for k in 0..4 {
                let w = S::of(cell.weights[k]);
                let offset = base + cell.corners[k] * 2;
                let slot = &mut grads[offset..offset + 2];
                slot[0] = d0.mul_add(w, slot[0]);
                slot[1] = d1.mul_add(w, slot[1]);
            }
        } else {
            for k in 0..4 {
                let w = S::of(cell.weights[k]);
                let offset = base + cell.corners[k] * f;
                for (fi, &d) in chunk.iter().enumerate() {
                    grads[offset + fi] = d.mul_add(w, grads[offset + fi]);
                }
            }
        }
    }
}

/// Derivative of the encoding with respect to the normalized coordinate,
/// contracted with `d_encoding`: returns `sum_l sum_f d_encoding[l,f] *
/// d(gamma[l,f])/dp`. Only valid away from cell boundaries (the encoding is
/// piecewise-bilinear).
pub fn hash_input_grad<S: Scalar>(
    p_norm: [S; 2],
    params: &NetworkParams<S>,
    d_encoding: &[S],
) -> [S; 2] {
    let f = params.config.hash.features_per_level;
    let mut gx = 0.0f64;
    let mut gy = 0.0f64;
    for (level, chunk) in d_encoding.chunks_exact(f).enumerate() {
        let res = params.resolutions[level];
        let cell = locate(p_norm, res, params.table_lens[level]);
        let table = params.hash_level(level);
        let scale = res as f64;
        for (fi, &d) in chunk.iter().enumerate() {
            let v00 = table[cell.corners[0] * f + fi].as_f64();
            let v10 = table[cell.corners[1] * f + fi].as_f64();
            let v01 = table[cell.corners[2] * f + fi].as_f64();
            let v11 = table[cell.corners[3] * f + fi].as_f64();
            let dfx = (v10 - v00) * (1.0 - cell.fy) + (v11 - v01) * cell.fy;
            let dfy = (v01 - v00) * (1.0 - cell.fx) + (v11 - v10) * cell.fx;
            gx += d.as_f64() * dfx * scale;
            gy += d.as_f64() * dfy * scale;
        }
    }
    [S::of(gx), S::of(gy)]
}
