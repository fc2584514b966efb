//! Run configuration: one TOML file layered over a built-in profile.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acoustics::{default_arrays, AcousticsConfig, Environment, MicArray};
use crate::datagen::{DatasetConfig, SplitConfig};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::models::{ArchKind, ModelSpec, OutputHead};
use crate::represent::{LossConfig, Repr, RetrievalConfig};
use crate::tensornet::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-width network, full dataset sizes, 200 epochs of batch 128.
    #[default]
    Paper,
    /// Quarter-width network and small datasets for a single workstation.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::config("profile", format!("unknown profile `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub environment: Environment,
    pub acoustics: AcousticsConfig,
    pub arrays: Vec<MicArray>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let environment = Environment::default();
        Self {
            arrays: default_arrays(&environment),
            environment,
            acoustics: AcousticsConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn layout(&self) -> Vec<usize> {
        self.arrays.iter().map(MicArray::n_mics).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.environment.validate()?;
        self.acoustics.validate()?;
        if self.arrays.is_empty() {
            return Err(Error::config("scene.arrays", "at least one array is required"));
        }
        for (i, a) in self.arrays.iter().enumerate() {
            a.validate()?;
            if a.n_mics() != self.arrays[0].n_mics() {
                return Err(Error::config(format!("scene.arrays[{i}]"), "all arrays must have the same microphone count"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    pub repr: Repr,
    /// Hidden widths are divided by this factor.
    pub width_divisor: usize,
    #[serde(default)]
    pub head: OutputHead,
    /// Leaky activations between the decoder's refinement convolutions.
    #[serde(default)]
    pub leaky_tail: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub train_split: String,
    pub validation_split: String,
    /// Checkpoint selection: best validation F1 at this resolution.
    pub selection_resolution: f64,
    /// Worker threads; 0 uses every core (capped by `SSL2D_THREADS`).
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub retrieval: RetrievalConfig,
    pub metrics: MetricConfig,
    pub training: TrainingConfig,
    pub dataset: DatasetConfig,
}

fn splits(train: usize, validate: usize, test: usize) -> Vec<SplitConfig> {
    [("train", train), ("validate", validate), ("test", test)]
        .into_iter()
        .map(|(name, n)| SplitConfig {
            name: name.to_string(),
            n_samples: n,
            source_counts: vec![1, 2],
            audio_dir: None,
        })
        .collect()
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        let (divisor, epochs, batch_size, lr, sizes) = match p {
            Profile::Paper => (1, 200, 128, 1e-4, (100_000, 5_000, 5_000)),
            Profile::Desk => (4, 30, 16, 1e-3, (2_000, 200, 500)),
        };
        // The narrow desk network only trains reliably with bounded outputs,
        // leaky refinement layers and level-normalized features.
        let desk = p == Profile::Desk;
        Self {
            scene: SceneConfig::default(),
            stft: StftConfig {
                normalize: desk,
                ..StftConfig::default()
            },
            model: ModelConfig {
                arch: ArchKind::Combined,
                repr: Repr::Hm,
                width_divisor: divisor,
                head: if desk { OutputHead::Sigmoid } else { OutputHead::Relu },
                leaky_tail: desk,
            },
            loss: LossConfig::default(),
            retrieval: RetrievalConfig::default(),
            metrics: MetricConfig::default(),
            training: TrainingConfig {
                epochs,
                batch_size,
                adam: AdamConfig {
                    lr,
                    ..AdamConfig::default()
                },
                seed: 0,
                train_split: "train".to_string(),
                validation_split: "validate".to_string(),
                selection_resolution: 1.0,
                threads: 0,
            },
            dataset: DatasetConfig {
                splits: splits(sizes.0, sizes.1, sizes.2),
                ..DatasetConfig::default()
            },
        }
    }

    /// Parses `text` as overrides on top of profile `p`. Tables merge key by
    /// key; any other value replaces the profile's.
    pub fn from_toml_str(text: &str, p: Profile) -> Result<Self> {
        let overrides: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        let mut base = toml::Table::try_from(Self::profile(p)).map_err(|e| Error::config("config", e.to_string()))?;
        merge(&mut base, overrides);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, p: Profile) -> Result<Self> {
        match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Self::from_toml_str(&text, p)
            }
            None => {
                let cfg = Self::profile(p);
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec =
            ModelSpec::scaled(self.model.arch, self.model.repr, self.model.width_divisor).with_head(self.model.head);
        if self.model.leaky_tail {
            spec = spec.with_leaky_tail();
        }
        spec.n_arrays = self.scene.arrays.len();
        spec.n_mics = self.scene.arrays.first().map_or(0, MicArray::n_mics);
        spec.n_frames = self.stft.n_frames(self.scene.acoustics.sample_len);
        spec.n_freqs = self.stft.n_freqs();
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.stft.validate()?;
        if self.scene.acoustics.sample_len < self.stft.window_len {
            return Err(Error::config("scene.acoustics.sample_len", "shorter than the STFT window"));
        }
        if self.model.width_divisor == 0 {
            return Err(Error::config("model.width_divisor", "must be at least 1"));
        }
        self.model_spec()
            .validate()
            .map_err(|e| Error::config("model", format!("inconsistent with scene and stft: {e}")))?;
        self.loss.validate()?;
        self.retrieval.validate()?;
        self.metrics.validate()?;
        let t = &self.training;
        if t.epochs == 0 {
            return Err(Error::config("training.epochs", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        t.adam
            .validate()
            .map_err(|e| Error::config("training.adam", e.to_string()))?;
        if !(t.selection_resolution > 0.0) {
            return Err(Error::config("training.selection_resolution", "must be positive"));
        }
        self.dataset.validate(&self.scene)?;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for p in [Profile::Paper, Profile::Desk] {
            let cfg = RunConfig::profile(p);
            cfg.validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(RunConfig::from_toml_str(&text, p).unwrap(), cfg);
            // An empty override reproduces the profile.
            assert_eq!(RunConfig::from_toml_str("", p).unwrap(), cfg);
        }
    }

    #[test]
    fn paper_defaults() {
        let c = RunConfig::profile(Profile::Paper);
        assert_eq!(c.training.epochs, 200);
        assert_eq!(c.training.batch_size, 128);
        assert_eq!(c.training.adam.lr, 1e-4);
        assert_eq!((c.training.adam.beta1, c.training.adam.beta2), (0.5, 0.999));
        assert_eq!(c.model_spec(), ModelSpec::new(ArchKind::Combined, Repr::Hm));
    }

    #[test]
    fn overrides_merge() {
        let c = RunConfig::from_toml_str(
            "[model]\nrepr = \"rg\"\n[training]\nepochs = 3\n[training.adam]\nlr = 0.01\n",
            Profile::Desk,
        )
        .unwrap();
        assert_eq!(c.model.repr, Repr::Rg);
        assert_eq!(c.model.width_divisor, 4);
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.training.adam.lr, 0.01);
        assert_eq!(c.training.adam.beta1, 0.5);
    }

    #[test]
    fn errors_name_fields() {
        let e = RunConfig::from_toml_str("[dataset]\nmin_separation = -1.0\n", Profile::Desk).unwrap_err();
        assert!(e.to_string().contains("dataset.min_separation"), "{e}");
        let e = RunConfig::from_toml_str("[training]\nepochs = 0\n", Profile::Desk).unwrap_err();
        assert!(e.to_string().contains("training.epochs"), "{e}");
        let e = RunConfig::from_toml_str("[training]\nepoch = 3\n", Profile::Desk).unwrap_err();
        assert!(e.to_string().contains("epoch"), "{e}");
        assert_eq!(e.code(), "E_CONFIG");
        let e = RunConfig::from_toml_str("[stft]\nwindow_len = 256\n", Profile::Desk).unwrap_err();
        assert!(e.to_string().contains("model"), "{e}");
    }
}
