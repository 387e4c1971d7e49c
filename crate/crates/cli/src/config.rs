//! Pipeline configuration, read from TOML or JSON.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use facegeom_core::align::AlignConfig;
use facegeom_core::parametrize::FeatureRegion;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightPreset {
    /// Uniform edge weights (Tutte embedding).
    #[default]
    Uniform,
    /// Extra parametric area around `feature_regions`.
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub template: Option<PathBuf>,
    pub scans: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Optional `[[a, b], ...]` symmetry pairs of the template.
    pub symmetry: Option<PathBuf>,
    /// Boundary vertex mapped to the start of the square's perimeter.
    pub anchor: Option<usize>,
    pub image_width: usize,
    pub k_texture: usize,
    pub k_geometry: usize,
    pub k_joint: usize,
    pub k_expression: usize,
    pub seed: u64,
    /// Worker threads for per-scan processing; 0 picks the core count.
    pub workers: usize,
    pub weight_preset: WeightPreset,
    pub feature_regions: Vec<FeatureRegion>,
    pub feature_gain: f64,
    pub augment: bool,
    pub masks: bool,
    pub texture_bit_depth: u8,
    #[serde(flatten)]
    pub align: AlignConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            template: None,
            scans: None,
            output: None,
            symmetry: None,
            anchor: None,
            image_width: 256,
            k_texture: 200,
            k_geometry: 200,
            k_joint: 200,
            k_expression: 10,
            seed: 0,
            workers: 0,
            weight_preset: WeightPreset::Uniform,
            feature_regions: Vec::new(),
            feature_gain: 4.0,
            augment: true,
            masks: true,
            texture_bit_depth: 8,
            align: AlignConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// `.toml` files are TOML, anything else JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.align.validate().map_err(|e| UsageError(e.to_string()))?;
        if self.image_width == 0 {
            return Err(UsageError("image_width must be positive".into()).into());
        }
        if ![8, 16].contains(&self.texture_bit_depth) {
            return Err(UsageError("texture_bit_depth must be 8 or 16".into()).into());
        }
        for p in [&self.template, &self.scans, &self.symmetry].into_iter().flatten() {
            if !p.exists() {
                return Err(UsageError(format!("{} does not exist", p.display())).into());
            }
        }
        Ok(())
    }

    /// Hash of the settings that determine outputs. Paths and the worker
    /// count are excluded; input files are hashed into the manifest instead.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.template = None;
        c.scans = None;
        c.output = None;
        c.symmetry = None;
        c.workers = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn required<'a>(value: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| UsageError(format!("missing {name} (flag or config key)")).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_align_keys_and_formats() {
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("a.json");
        fs::write(&j, r#"{"smooth_weight": 2.5, "max_iters": 10}"#).unwrap();
        let c = PipelineConfig::load(&j).unwrap();
        assert_eq!(c.align.smooth_weight, 2.5);
        assert_eq!(c.align.max_iters, 10);
        assert_eq!(c.image_width, 256);
        let t = dir.path().join("a.toml");
        fs::write(&t, "image_width = 64\nseed = 3\nweight_preset = \"feature\"\n").unwrap();
        let c = PipelineConfig::load(&t).unwrap();
        assert_eq!((c.image_width, c.seed, c.weight_preset), (64, 3, WeightPreset::Feature));
        fs::write(&t, "image_width = \"x\"").unwrap();
        assert!(PipelineConfig::load(&t).is_err());
    }

    #[test]
    fn hash_ignores_paths() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.output = Some("/tmp/x".into());
        b.template = Some("/tmp/t.obj".into());
        b.workers = 3;
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed = 1;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
