//! JSON configuration files for the commands.
//!
//! Relative paths inside a config file are resolved against the directory
//! that holds the file.

use std::fs;
use std::path::{Path, PathBuf};

use cmfusion::data::DatasetHeader;
use cmfusion::model::{ModelConfig, PAPER_AUDIO_BOTTLENECK_DIM, PAPER_AUDIO_LLD_DIM};
use cmfusion::synth::SyntheticSpec;
use cmfusion::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::variants::Variant;

/// Architecture settings. Input widths and the class count default to the
/// dataset header; when given they must agree with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_sca_layers: usize,
    pub ff_inner: Option<usize>,
    pub share_encoders: bool,
    pub d_audio_in: Option<usize>,
    pub d_text_in: Option<usize>,
    pub n_classes: Option<usize>,
    /// Leading handcrafted audio columns; defaults to the same share of the
    /// audio width as in the full-size feature layout.
    pub audio_lld_dim: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            d_model: d.d_model,
            n_sca_layers: d.n_sca_layers,
            ff_inner: None,
            share_encoders: false,
            d_audio_in: None,
            d_text_in: None,
            n_classes: None,
            audio_lld_dim: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// Settings for the finite-difference check on a tiny network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub eps: f64,
    pub tolerance: f64,
    pub d_audio_in: usize,
    pub d_text_in: usize,
    pub n_classes: usize,
    /// Upper bound on the model width used for the check.
    pub max_d_model: usize,
    /// Upper bound on the dialogue length used for the check.
    pub max_utterances: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tolerance: 1e-4,
            d_audio_in: 6,
            d_text_in: 8,
            n_classes: 7,
            max_d_model: 8,
            max_utterances: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataPaths,
    pub variant: Variant,
    pub out_dir: PathBuf,
    /// Seeds model initialisation and batch shuffling; overrides `train.seed`.
    pub seed: Option<u64>,
    /// Number of consecutive seeds an ablation trains per variant.
    pub n_seeds: usize,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
            variant: Variant::Full,
            out_dir: PathBuf::from("runs"),
            seed: None,
            n_seeds: 5,
            gradcheck: GradcheckSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.val, &mut cfg.data.test].into_iter().flatten() {
            *p = base.join(&*p);
        }
        cfg.out_dir = base.join(&cfg.out_dir);
        Ok(cfg)
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    /// The model for `variant`, with dimensions checked against `header`.
    pub fn model_config(&self, header: &DatasetHeader, variant: Variant, seed: u64) -> CliResult<ModelConfig> {
        let m = &self.model;
        let pick = |name: &str, given: Option<usize>, found: usize| -> CliResult<usize> {
            match given {
                Some(g) if g != found => Err(CliError::data(format!(
                    "model {name} is {g} but the dataset has {found}"
                ))),
                _ => Ok(found),
            }
        };
        let d_audio_in = pick("d_audio_in", m.d_audio_in, header.d_audio_in)?;
        let base = ModelConfig {
            d_audio_in,
            d_text_in: pick("d_text_in", m.d_text_in, header.d_text_in)?,
            d_model: m.d_model,
            n_sca_layers: m.n_sca_layers,
            ff_inner: m.ff_inner,
            n_classes: pick("n_classes", m.n_classes, header.n_classes)?,
            audio_lld_dim: m.audio_lld_dim.unwrap_or_else(|| default_lld_dim(d_audio_in)),
            share_encoders: m.share_encoders,
            seed,
            ..ModelConfig::default()
        };
        let cfg = variant.apply(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, seed: u64) -> CliResult<TrainConfig> {
        let cfg = TrainConfig {
            seed,
            ..self.train.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Handcrafted-descriptor share of an audio vector of width `d_audio_in`.
pub fn default_lld_dim(d_audio_in: usize) -> usize {
    let total = PAPER_AUDIO_LLD_DIM + PAPER_AUDIO_BOTTLENECK_DIM;
    (d_audio_in * PAPER_AUDIO_LLD_DIM + total / 2) / total
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub spec: SyntheticSpec,
    /// Dialogues per split; defaults to `n_dialogues` for training and a
    /// quarter of that for validation and test.
    pub splits: Option<SplitSizes>,
}

impl SynthConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        read_json(path)
    }

    pub fn sizes(&self) -> SplitSizes {
        self.splits.unwrap_or(SplitSizes {
            train: self.spec.n_dialogues,
            val: self.spec.n_dialogues / 4,
            test: self.spec.n_dialogues / 4,
        })
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lld_share_matches_full_layout() {
        assert_eq!(default_lld_dim(PAPER_AUDIO_LLD_DIM + PAPER_AUDIO_BOTTLENECK_DIM), PAPER_AUDIO_LLD_DIM);
        // 24 * 6552 / 12696 = 12.39
        assert_eq!(default_lld_dim(24), 12);
    }

    #[test]
    fn dimension_conflicts_name_both_sides() {
        let cfg = RunConfig {
            model: ModelSection {
                d_text_in: Some(4096),
                ..ModelSection::default()
            },
            ..RunConfig::default()
        };
        let err = cfg
            .model_config(&DatasetHeader::new(24, 4095, 7), Variant::Full, 0)
            .unwrap_err();
        assert!(err.message.contains("4096") && err.message.contains("4095"), "{err}");
        assert_eq!(err.exit, crate::ExitCode::Data);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).unwrap_err();
        assert!(err.to_string().contains("modle"));
        let ok: RunConfig = serde_json::from_str(r#"{"variant": "no-sca", "seed": 4}"#).unwrap();
        assert_eq!((ok.variant, ok.effective_seed()), (Variant::NoSca, 4));
    }

    #[test]
    fn split_sizes_default_from_spec() {
        let s = SynthConfig::default();
        assert_eq!(s.sizes(), SplitSizes { train: 200, val: 50, test: 50 });
    }
}
