//! Deterministic parallel gradient accumulation.
//!
//! A training batch is split into a fixed number of contiguous shards; each
//! shard accumulates into its own flat gradient buffer (and feature-map
//! gradient) sequentially, and the buffers are merged in shard order. The
//! result is bit-identical regardless of how many worker threads execute
//! the shards.

use rayon::prelude::*;

use super::{MlpScratch, NetworkParams};
use crate::scalar::Scalar;

#[derive(Debug)]
pub struct ShardBuffer<S> {
    pub grads: Vec<S>,
    pub d_feature_map: Vec<S>,
    pub scratch: MlpScratch<S>,
    /// Point coordinate staging for the current group.
    pub coords: Vec<[S; 2]>,
    pub d_out: Vec<S>,
}

#[derive(Debug)]
pub struct GradAccumulator<S> {
    pub shards: Vec<ShardBuffer<S>>,
}

impl<S: Scalar> GradAccumulator<S> {
    pub fn new(params: &NetworkParams<S>, n_shards: usize, feature_map_len: usize) -> Self {
        let shards = (0..n_shards)
            .map(|_| ShardBuffer {
                grads: vec![S::zero(); params.param_count()],
                d_feature_map: vec![S::zero(); feature_map_len],
                scratch: MlpScratch::new(params),
                coords: Vec::new(),
                d_out: Vec::new(),
            })
            .collect();
        GradAccumulator { shards }
    }

    /// Sums shard buffers into the destination vectors (in shard order) and
    /// clears them for the next step. Parallel over output ranges, additions
    /// per element always in shard order.
    pub fn merge_and_reset(&mut self, grads_out: &mut [S], dfm_out: &mut [S]) {
        const CHUNK: usize = 1 << 14;
        let shards = &self.shards;
        grads_out
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(ci, chunk)| {
                let base = ci * CHUNK;
                for shard in shards.iter() {
                    let src = &shard.grads[base..base + chunk.len()];
                    for (o, &s) in chunk.iter_mut().zip(src) {
                        *o += s;
                    }
                }
            });
        if !dfm_out.is_empty() {
            dfm_out
                .par_chunks_mut(CHUNK)
                .enumerate()
                .for_each(|(ci, chunk)| {
                    let base = ci * CHUNK;
                    for shard in shards.iter() {
                        let src = &shard.d_feature_map[base..base + chunk.len()];
                        for (o, &s) in chunk.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                });
        }
        self.shards.par_iter_mut().for_each(|shard| {
            shard.grads.fill(S::zero());
            shard.d_feature_map.fill(S::zero());
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{EncoderConfig, HashEncodingConfig, MlpConfig, NetConfig};

    #[test]
    fn merge_sums_in_shard_order_and_resets() {
        let cfg = NetConfig {
            hash: HashEncodingConfig {
                levels: 1,
                features_per_level: 2,
                table_size_log2: 4,
                base_resolution: 2,
                growth: 2.0,
            },
            encoder: Some(EncoderConfig { channels: 2 }),
            mlp: MlpConfig { hidden_width: 8 },
        };
        let params = NetworkParams::<f64>::init(&cfg, 0).unwrap();
        let mut acc = GradAccumulator::new(&params, 3, 4);
        for (s, shard) in acc.shards.iter_mut().enumerate() {
            shard.grads[1] = (s + 1) as f64;
            shard.d_feature_map[2] = 0.5 * (s + 1) as f64;
        }
        let mut grads = vec![0.0; params.param_count()];
        let mut dfm = vec![0.0; 4];
        acc.merge_and_reset(&mut grads, &mut dfm);
        assert_eq!(grads[1], 6.0);
        assert_eq!(dfm[2], 3.0);
        assert!(acc.shards.iter().all(|s| s.grads.iter().all(|&g| g == 0.0)));
    }
}
