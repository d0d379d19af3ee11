//! The trainable image representation: multiresolution hash encoding of
//! coordinates, convolutional encoder of the prior image with continuous
//! feature sampling, and a small fusion MLP, together with reverse-mode
//! gradients for every part and an Adam optimizer.
//!
//! All trainable state lives in one flat parameter vector with a fixed
//! tensor layout (hash tables per level, encoder kernels and biases, MLP
//! weights and biases, in that order). Gradients mirror the layout, which
//! keeps the optimizer, the accumulation buffers, and the checkpoint format
//! trivially consistent.

mod adam;
mod encoder;
mod grads;
mod hash;
mod mlp;

pub use adam::adam_step;
pub use encoder::{encode_image, encoder_backward, EncoderActivations, FeatureMap};
pub use grads::{GradAccumulator, ShardBuffer};
pub use hash::{hash_encode, hash_encode_into, hash_input_grad, hash_scatter_grad};
pub use mlp::{
    backward_points, build_inputs, forward_points, forward_prepared, scatter_input_grads,
    MlpScratch, NSHARDS_DEFAULT,
};

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tomo::Image;

/// Multiresolution hash grid hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashEncodingConfig {
    /// Number of resolution levels L.
    pub levels: usize,
    /// Features per level F.
    pub features_per_level: usize,
    /// Hash table capacity exponent; each level holds at most
    /// `2^table_size_log2` entries.
    pub table_size_log2: u32,
    /// Coarsest grid resolution.
    pub base_resolution: usize,
    /// Per-level geometric growth factor of the grid resolution.
    pub growth: f64,
}

impl Default for HashEncodingConfig {
    fn default() -> Self {
        HashEncodingConfig {
            levels: 16,
            features_per_level: 2,
            table_size_log2: 24,
            base_resolution: 2,
            growth: 1.95,
        }
    }
}

impl HashEncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.features_per_level < 1 || self.base_resolution < 1 {
            return Err(Error::InvalidConfig(
                "hash levels, features_per_level and base_resolution must be >= 1".into(),
            ));
        }
        if !(self.growth >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "hash growth must be >= 1 for non-decreasing resolutions, got {}",
                self.growth
            )));
        }
        if self.table_size_log2 < 2 || self.table_size_log2 > 30 {
            return Err(Error::InvalidConfig(format!(
                "table_size_log2 out of range: {}",
                self.table_size_log2
            )));
        }
        Ok(())
    }

    /// Grid resolution per level: `floor(base * growth^level)`.
    pub fn level_resolutions(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|l| (self.base_resolution as f64 * self.growth.powi(l as i32)).floor() as usize)
            .collect()
    }

    /// Entries in the level's table: `2^min(table_size_log2, bits needed
    /// for the dense (N+1)^2 corner grid)`.
    pub fn table_len(&self, resolution: usize) -> usize {
        let dense = (resolution + 1) * (resolution + 1);
        let bits = usize::BITS - (dense - 1).leading_zeros();
        1usize << bits.min(self.table_size_log2)
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }
}

/// Prior-image encoder shape: two 3x3 convolutions with `channels` outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { channels: 48 }
    }
}

/// Fusion MLP shape: two ReLU hidden layers of `hidden_width`, linear
/// scalar output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden_width: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden_width: 64 }
    }
}

/// Complete network shape. `encoder: None` replaces the learned feature
/// map by direct interpolation of the prior image (one feature channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hash: HashEncodingConfig,
    pub encoder: Option<EncoderConfig>,
    pub mlp: MlpConfig,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.hash.validate()?;
        if let Some(e) = &self.encoder {
            if e.channels < 1 {
                return Err(Error::InvalidConfig("encoder channels must be >= 1".into()));
            }
        }
        if self.mlp.hidden_width < 1 {
            return Err(Error::InvalidConfig("mlp hidden_width must be >= 1".into()));
        }
        Ok(())
    }

    /// Feature channels consumed by the MLP next to the hash encoding.
    pub fn feature_channels(&self) -> usize {
        self.encoder.map(|e| e.channels).unwrap_or(1)
    }

    /// MLP input dimension: hash output plus sampled feature channels.
    pub fn input_dim(&self) -> usize {
        self.hash.output_dim() + self.feature_channels()
    }
}

/// Byte/element offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub hash_levels: Vec<Range<usize>>,
    pub enc1_w: Range<usize>,
    pub enc1_b: Range<usize>,
    pub enc2_w: Range<usize>,
    pub enc2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub w3: Range<usize>,
    pub b3: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    fn new(config: &NetConfig) -> ParamLayout {
        let mut cursor = 0usize;
        let mut take = |len: usize| {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        let f = config.hash.features_per_level;
        let hash_levels = config
            .hash
            .level_resolutions()
            .iter()
            .map(|&n| take(config.hash.table_len(n) * f))
            .collect();
        let (c1w, c1b, c2w, c2b) = match config.encoder {
            Some(e) => {
                let ch = e.channels;
                (take(ch * 9), take(ch), take(ch * 9 * ch), take(ch))
            }
            None => (take(0), take(0), take(0), take(0)),
        };
        let h = config.mlp.hidden_width;
        let input = config.input_dim();
        let w1 = take(h * input);
        let b1 = take(h);
        let w2 = take(h * h);
        let b2 = take(h);
        let w3 = take(h);
        let b3 = take(1);
        ParamLayout {
            hash_levels,
            enc1_w: c1w,
            enc1_b: c1b,
            enc2_w: c2w,
            enc2_b: c2b,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            total: cursor,
        }
    }
}

/// All trainable state: flat parameter vector, Adam moments, and cached
/// transposed MLP weight copies for the forward kernels.
#[derive(Debug, Clone)]
pub struct NetworkParams<S> {
    pub config: NetConfig,
    pub layout: ParamLayout,
    /// Grid resolution per hash level.
    pub resolutions: Vec<usize>,
    /// Table entries per hash level.
    pub table_lens: Vec<usize>,
    pub data: Vec<S>,
    /// Adam first moments.
    pub moment1: Vec<S>,
    /// Adam second moments.
    pub moment2: Vec<S>,
    /// Adam step counter.
    pub step: u64,
    /// `w1` transposed to `[input][hidden]`, kept in sync by the optimizer.
    pub w1t: Vec<S>,
    /// `w2` transposed to `[hidden][hidden]`.
    pub w2t: Vec<S>,
}

impl<S: Scalar> NetworkParams<S> {
    /// Deterministic seeded initialization: hash tables uniform in
    /// `[-1e-4, 1e-4]`, encoder and MLP weights fan-in-scaled uniform.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let resolutions = config.hash.level_resolutions();
        for w in resolutions.windows(2) {
            debug_assert!(w[1] >= w[0]);
        }
        let table_lens: Vec<usize> = resolutions.iter().map(|&n| config.hash.table_len(n)).collect();
        let mut data = vec![S::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        for range in &layout.hash_levels {
            for v in &mut data[range.clone()] {
                *v = S::of(rng.gen_range(-1e-4..1e-4));
            }
        }
        let ch = config.feature_channels();
        if config.encoder.is_some() {
            fill_fan_in(&mut data[layout.enc1_w.clone()], 9, &mut rng);
            fill_fan_in(&mut data[layout.enc1_b.clone()], 9, &mut rng);
            fill_fan_in(&mut data[layout.enc2_w.clone()], 9 * ch, &mut rng);
            fill_fan_in(&mut data[layout.enc2_b.clone()], 9 * ch, &mut rng);
        }
        let input = config.input_dim();
        let h = config.mlp.hidden_width;
        fill_fan_in(&mut data[layout.w1.clone()], input, &mut rng);
        fill_fan_in(&mut data[layout.b1.clone()], input, &mut rng);
        fill_fan_in(&mut data[layout.w2.clone()], h, &mut rng);
        fill_fan_in(&mut data[layout.b2.clone()], h, &mut rng);
        fill_fan_in(&mut data[layout.w3.clone()], h, &mut rng);
        fill_fan_in(&mut data[layout.b3.clone()], h, &mut rng);

        let total = layout.total;
        let mut params = NetworkParams {
            config: config.clone(),
            layout,
            resolutions,
            table_lens,
            data,
            moment1: vec![S::zero(); total],
            moment2: vec![S::zero(); total],
            step: 0,
            w1t: Vec::new(),
            w2t: Vec::new(),
        };
        params.refresh_transposes();
        Ok(params)
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn hidden_width(&self) -> usize {
        self.config.mlp.hidden_width
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    #[inline]
    pub fn hash_level(&self, level: usize) -> &[S] {
        &self.data[self.layout.hash_levels[level].clone()]
    }

    pub fn tensor(&self, range: &Range<usize>) -> &[S] {
        &self.data[range.clone()]
    }

    /// Rebuilds the transposed MLP weight caches; must be called after any
    /// direct mutation of the parameter vector.
    pub fn refresh_transposes(&mut self) {
        let h = self.hidden_width();
        let input = self.input_dim();
        let w1 = &self.data[self.layout.w1.clone()];
        self.w1t = vec![S::zero(); input * h];
        for j in 0..h {
            for k in 0..input {
                self.w1t[k * h + j] = w1[j * input + k];
            }
        }
        let w2 = &self.data[self.layout.w2.clone()];
        self.w2t = vec![S::zero(); h * h];
        for j in 0..h {
            for k in 0..h {
                self.w2t[k * h + j] = w2[j * h + k];
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Evaluates the network at one normalized coordinate, given sampled
    /// prior features. Goes through the same kernels as the batched path,
    /// so single-point and batched evaluation agree bitwise.
    pub fn forward_point(&self, features: &FeatureMap<S>, p_norm: [S; 2]) -> S {
        let mut scratch = MlpScratch::new(self);
        mlp::forward_points(self, features, &[p_norm], &mut scratch);
        scratch.out[0]
    }

    // ---- checkpoint format -------------------------------------------

    /// Writes the versioned checkpoint: magic, config echo, step counter,
    /// then parameters and both Adam moments as little-endian f32 in layout
    /// order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let config = serde_json::to_vec(&self.config)?;
        file.write_all(&(config.len() as u32).to_le_bytes())?;
        file.write_all(&config)?;
        file.write_all(&self.step.to_le_bytes())?;
        for tensor in [&self.data, &self.moment1, &self.moment2] {
            for v in tensor.iter() {
                file.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        file.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        file.read_exact(&mut u32buf)?;
        let config_len = u32::from_le_bytes(u32buf) as usize;
        let mut config_buf = vec![0u8; config_len];
        file.read_exact(&mut config_buf)?;
        let config: NetConfig = serde_json::from_slice(&config_buf)?;
        let mut u64buf = [0u8; 8];
        file.read_exact(&mut u64buf)?;
        let step = u64::from_le_bytes(u64buf);

        let mut params = NetworkParams::init(&config, 0)?;
        params.step = step;
        let total = params.layout.total;
        let mut read_tensor = |out: &mut Vec<S>| -> Result<()> {
            let mut bytes = vec![0u8; total * 4];
            file.read_exact(&mut bytes)?;
            for (i, chunk) in bytes.chunks_exact(4).enumerate() {
                out[i] = S::of(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
            Ok(())
        };
        read_tensor(&mut params.data)?;
        read_tensor(&mut params.moment1)?;
        read_tensor(&mut params.moment2)?;
        params.refresh_transposes();
        Ok(params)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SPNRCKP1";
const CHECKPOINT_VERSION: u32 = 1;

fn fill_fan_in<S: Scalar>(slice: &mut [S], fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in slice {
        *v = S::of(rng.gen_range(-bound..bound));
    }
}

/// Builds a one-channel feature map that directly exposes the prior image's
/// intensities (the encoder-free mode).
pub fn features_from_prior<S: Scalar>(prior: &Image<S>) -> FeatureMap<S> {
    FeatureMap::new(prior.size(), 1, prior.values().to_vec())
}

/// Evaluates the network at one normalized coordinate: hash-encode the
/// coordinate, sample the feature map, run the MLP.
pub fn network_forward<S: Scalar>(
    features: &FeatureMap<S>,
    p_norm: [S; 2],
    params: &NetworkParams<S>,
) -> S {
    params.forward_point(features, p_norm)
}
