//! The JSON experiment configuration: one document aggregating every
//! module's settings plus paths and seeds. Unknown keys are rejected, and
//! every run embeds its resolved config in the output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{default_detector_spacing, make_geometry, FanBeamGeometry};
use crate::nn::{EncoderConfig, HashEncodingConfig, MlpConfig, NetConfig};
use crate::scalar::Scalar;
use crate::spener::{Ablation, HqsConfig, OptimizerConfig, SpenerConfig};
use crate::tomo::FbpFilter;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub n_views: usize,
    pub n_detectors: usize,
    pub source_distance: f64,
    pub detector_distance: f64,
    /// Bin width; `null` picks the width that covers the FOV with a 5%
    /// margin.
    pub detector_spacing: Option<f64>,
    pub image_size: usize,
    pub pixel_size: f64,
}

impl GeometryConfig {
    pub fn build<S: Scalar>(&self) -> Result<FanBeamGeometry<S>> {
        let fov = self.image_size as f64 * self.pixel_size / 2.0;
        let spacing = self.detector_spacing.unwrap_or_else(|| {
            default_detector_spacing(
                self.n_detectors,
                self.source_distance,
                self.detector_distance,
                fov,
            )
        });
        make_geometry(
            self.n_views,
            self.n_detectors,
            S::of(self.source_distance),
            S::of(self.detector_distance),
            S::of(spacing),
            self.image_size,
            S::of(self.pixel_size),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// Incident photon counts to simulate, one noisy sinogram each.
    pub doses: Vec<f64>,
    pub background: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { doses: vec![1e6, 5e5], background: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub train: u64,
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { train: 42, noise: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Output directory of the current command.
    pub out_dir: Option<String>,
    /// Phantom stem (without extension) for simulate.
    pub phantom: Option<String>,
    /// Input sinogram stem for reconstruct.
    pub sinogram: Option<String>,
    /// Ground-truth stem for trace metrics.
    pub reference: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterChoice {
    #[default]
    RamLak,
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Fbp,
    #[default]
    Spener,
}

/// Reconstruction mode: kept inside the config so a run is reproducible
/// from the copy embedded in its output directory; the CLI flags override
/// these fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub method: MethodChoice,
    pub ablate: Ablation,
}

impl From<FilterChoice> for FbpFilter {
    fn from(f: FilterChoice) -> FbpFilter {
        match f {
            FilterChoice::RamLak => FbpFilter::RamLak,
            FilterChoice::Hann => FbpFilter::Hann,
        }
    }
}

/// The whole experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub hash: HashEncodingConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub mlp: MlpConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub hqs: HqsConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub fbp_filter: FilterChoice,
    #[serde(default)]
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.hash.validate()?;
        self.hqs.validate()?;
        for &dose in &self.noise.doses {
            if !(dose > 0.0) {
                return Err(Error::InvalidConfig(format!("dose must be > 0, got {dose}")));
            }
        }
        if !(self.noise.background >= 0.0) {
            return Err(Error::InvalidConfig("noise background must be >= 0".into()));
        }
        // Geometry parameters are validated by construction.
        self.geometry.build::<f64>()?;
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            hash: self.hash,
            encoder: Some(self.encoder),
            mlp: self.mlp,
        }
    }

    /// Assembles the reconstruction config, applying CLI overrides.
    pub fn spener_config(
        &self,
        ablation: Ablation,
        lambda_override: Option<f64>,
        seed_override: Option<u64>,
    ) -> SpenerConfig {
        let mut hqs = self.hqs.clone();
        if let Some(l) = lambda_override {
            hqs.lambda = l;
        }
        SpenerConfig {
            net: self.net_config(),
            optimizer: self.optimizer,
            hqs,
            seed: seed_override.unwrap_or(self.seeds.train),
            ablation,
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Built-in experiment presets.
///
/// `desk-60` / `desk-90`: 128 px grid, bench-scale schedule (10 outer
/// iterations, 200/50 epochs, 2^16-entry hash tables) sized so a full run
/// fits a desktop CPU budget.
///
/// `paper-60` / `paper-90`: 256 px grid with the published-scale schedule
/// (20 outer iterations, 1000/250 epochs, 2^24-entry hash tables).
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (views, desk) = match name {
        "desk-60" => (60, true),
        "desk-90" => (90, true),
        "paper-60" => (60, false),
        "paper-90" => (90, false),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown preset '{other}' (expected desk-60, desk-90, paper-60, paper-90)"
            )))
        }
    };
    let image_size = if desk { 128 } else { 256 };
    let cfg = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        geometry: GeometryConfig {
            n_views: views,
            n_detectors: 2 * image_size,
            source_distance: 3.0,
            detector_distance: 3.0,
            detector_spacing: None,
            image_size,
            pixel_size: 1.0 / image_size as f64,
        },
        noise: NoiseSection::default(),
        hash: HashEncodingConfig {
            table_size_log2: if desk { 15 } else { 24 },
            ..HashEncodingConfig::default()
        },
        encoder: EncoderConfig::default(),
        mlp: MlpConfig::default(),
        optimizer: OptimizerConfig::default(),
        hqs: HqsConfig {
            outer_iterations: if desk { 10 } else { 20 },
            epochs_first: if desk { 200 } else { 1000 },
            epochs_rest: if desk { 50 } else { 250 },
            // One-pixel ray quadrature keeps the bench-scale run inside its
            // CPU budget; the config default stays at half a pixel.
            delta_p: if desk { Some(1.0 / image_size as f64) } else { None },
            ..HqsConfig::default()
        },
        seeds: Seeds::default(),
        paths: Paths::default(),
        precision: Precision::default(),
        fbp_filter: FilterChoice::default(),
        run: RunSection::default(),
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_build_valid_geometry() {
        for name in ["desk-60", "desk-90", "paper-60", "paper-90"] {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            let geom = cfg.geometry.build::<f64>().unwrap();
            assert_eq!(geom.n_views, if name.ends_with("60") { 60 } else { 90 });
        }
        assert!(preset("bogus").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = preset("desk-60").unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&cfg.to_json_pretty().unwrap()).unwrap();
        value["geometry"]["detector_tilt"] = serde_json::json!(0.3);
        let text = serde_json::to_string(&value).unwrap();
        let parsed: std::result::Result<ExperimentConfig, _> = serde_json::from_str(&text);
        assert!(parsed.is_err());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let mut cfg = preset("desk-60").unwrap();
        cfg.schema_version = 99;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_roundtrip_preserves_the_config() {
        let cfg = preset("desk-90").unwrap();
        let text = cfg.to_json_pretty().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn lambda_and_seed_overrides_apply() {
        let cfg = preset("desk-60").unwrap();
        let sp = cfg.spener_config(Ablation::NoEncoder, Some(0.5), Some(99));
        assert_eq!(sp.hqs.lambda, 0.5);
        assert_eq!(sp.seed, 99);
        assert!(sp.effective_net().encoder.is_none());
    }
}
