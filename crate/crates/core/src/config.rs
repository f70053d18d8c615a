//! The declarative run configuration: one TOML document with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heatmap::HeatmapConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::synthgen::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapSection {
    pub radius_frac: f64,
    /// Blob edge smoothing in input pixels; defaults to `max(1, r / 4)`.
    pub smoothing_sigma: Option<f64>,
}

impl Default for HeatmapSection {
    fn default() -> Self {
        Self {
            radius_frac: 0.05,
            smoothing_sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Images per test identity moved into the gallery for real-data splits.
    pub per_id_gallery: usize,
    pub sweep_radii: Vec<f64>,
    /// Training seeds per sweep setting; the median top-1 is reported.
    pub sweep_seeds: Vec<u64>,
    /// Fraction of samples with one hidden landmark in the MLA sweep dataset.
    pub mla_hide_prob: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            per_id_gallery: 2,
            sweep_radii: vec![0.05, 0.10, 0.20],
            sweep_seeds: vec![0],
            mla_hide_prob: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_root: PathBuf,
    /// Dataset location; generated synthetic data goes here.
    pub data_root: PathBuf,
    pub synth: SynthConfig,
    pub heatmap: HeatmapSection,
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub trainer: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_root: PathBuf::from("runs"),
            data_root: PathBuf::from("data/synthetic"),
            synth: SynthConfig::default(),
            heatmap: HeatmapSection::default(),
            model: ModelConfig::default(),
            losses: LossWeights::default(),
            trainer: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML, rejecting unknown keys with the full field path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.message().to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<document>".into() } else { path }, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.heatmap().validate()?;
        self.model.validate()?;
        self.losses.validate()?;
        self.trainer.validate()?;
        for &r in &self.eval.sweep_radii {
            if !(r > 0.0 && r <= 0.5) {
                return Err(Error::config("eval.sweep_radii", "entries must be in (0, 0.5]"));
            }
        }
        if self.eval.sweep_seeds.is_empty() {
            return Err(Error::config("eval.sweep_seeds", "needs at least one seed"));
        }
        if !(0.0..=1.0).contains(&self.eval.mla_hide_prob) {
            return Err(Error::config("eval.mla_hide_prob", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Heatmap geometry at the network input size.
    pub fn heatmap(&self) -> HeatmapConfig {
        let mut hm = HeatmapConfig::new(self.heatmap.radius_frac, self.trainer.input_size);
        if let Some(s) = self.heatmap.smoothing_sigma {
            hm.smoothing_sigma = s;
        }
        hm
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = RunConfig::from_toml("[trainer]\nbase_lr = 0.1\nbogus = 3\n").unwrap_err();
        match err {
            Error::Config { field, reason } => {
                assert_eq!(field, "trainer.bogus");
                assert!(reason.contains("bogus"), "{reason}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn invalid_value_names_its_field() {
        let err = RunConfig::from_toml("[losses]\nsmooth_eps = 1.5\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "losses.smooth_eps"), "{err}");
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.trainer.epochs.s1b = 7;
        c.heatmap.smoothing_sigma = Some(2.0);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
