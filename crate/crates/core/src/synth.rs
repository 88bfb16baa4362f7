//! Synthetic multimodal dialogues with controllable label semantics.
//!
//! In unimodal-separable mode each class owns a Gaussian prototype per
//! modality, so the label can be read off either modality (or only the
//! informative one). In cross-modal-interaction mode each utterance carries
//! independent latent codes `a` and `t`, one per modality, and the label is
//! `(a + t) mod C`; for two classes this is the XOR of two sign bits and
//! neither modality alone says anything about the label.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetHeader, DatasetSplit, Dialogue};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    UnimodalSeparable,
    CrossModalInteraction,
}

/// Modalities that carry class prototypes in unimodal-separable mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Informative {
    Both,
    AudioOnly,
    TextOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_dialogues: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub d_audio: usize,
    pub d_text: usize,
    pub n_classes: usize,
    /// Standard deviation of prototype coordinates.
    pub mean_scale: f64,
    /// Standard deviation of per-utterance noise.
    pub noise_scale: f64,
    pub mode: SynthMode,
    pub informative: Informative,
    /// Relative class frequencies (unimodal mode only); uniform when absent.
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_dialogues: 200,
            min_utterances: 3,
            max_utterances: 8,
            d_audio: 24,
            d_text: 16,
            n_classes: 7,
            mean_scale: 1.0,
            noise_scale: 1.0,
            mode: SynthMode::UnimodalSeparable,
            informative: Informative::Both,
            class_weights: None,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return fail(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.d_audio == 0 || self.d_text == 0 {
            return fail("feature dimensions must be positive".into());
        }
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return fail(format!(
                "utterance range {}..={} is empty or starts at 0",
                self.min_utterances, self.max_utterances
            ));
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite())
            || !(self.noise_scale > 0.0 && self.noise_scale.is_finite())
        {
            return fail("mean_scale and noise_scale must be positive".into());
        }
        if let Some(w) = &self.class_weights {
            if self.mode == SynthMode::CrossModalInteraction {
                return fail("class_weights apply only to unimodal-separable mode".into());
            }
            if w.len() != self.n_classes || w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return fail(format!(
                    "class_weights needs {} non-negative entries with a positive sum",
                    self.n_classes
                ));
            }
        }
        Ok(())
    }

    /// Probability of each class under this spec.
    pub fn class_distribution(&self) -> Vec<f64> {
        match (&self.class_weights, self.mode) {
            (Some(w), SynthMode::UnimodalSeparable) => {
                let total: f64 = w.iter().sum();
                w.iter().map(|x| x / total).collect()
            }
            _ => vec![1.0 / self.n_classes as f64; self.n_classes],
        }
    }
}

/// Shared prototypes plus independent random streams per split.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    spec: SyntheticSpec,
    audio_protos: Vec<Vec<f64>>,
    text_protos: Vec<Vec<f64>>,
}

impl Synthesizer {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(spec.seed, 0);
        let protos = |d: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..spec.n_classes)
                .map(|_| (0..d).map(|_| spec.mean_scale * gauss(rng)).collect())
                .collect()
        };
        let audio_protos = protos(spec.d_audio, &mut rng);
        let text_protos = protos(spec.d_text, &mut rng);
        Ok(Self {
            spec,
            audio_protos,
            text_protos,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader::new(self.spec.d_audio, self.spec.d_text, self.spec.n_classes)
    }

    /// Split number `index` with `n_dialogues` dialogues; splits with
    /// different indices use disjoint random streams.
    pub fn split(&self, index: u64, n_dialogues: usize) -> Result<DatasetSplit> {
        let s = &self.spec;
        let mut rng = stream(s.seed, index + 1);
        let classes = WeightedIndex::new(self.spec.class_distribution())
            .map_err(|e| Error::Config(format!("class weights: {e}")))?;
        let mut split = DatasetSplit::new(self.header())?;
        for i in 0..n_dialogues {
            let t = rng.random_range(s.min_utterances..=s.max_utterances);
            let mut audio = Vec::with_capacity(t * s.d_audio);
            let mut text = Vec::with_capacity(t * s.d_text);
            let mut labels = Vec::with_capacity(t);
            for _ in 0..t {
                let (label, a_code, t_code) = match s.mode {
                    SynthMode::UnimodalSeparable => {
                        let y = classes.sample(&mut rng);
                        let a = matches!(s.informative, Informative::Both | Informative::AudioOnly).then_some(y);
                        let tx = matches!(s.informative, Informative::Both | Informative::TextOnly).then_some(y);
                        (y, a, tx)
                    }
                    SynthMode::CrossModalInteraction => {
                        let a = rng.random_range(0..s.n_classes);
                        let tx = rng.random_range(0..s.n_classes);
                        ((a + tx) % s.n_classes, Some(a), Some(tx))
                    }
                };
                self.emit(&mut audio, &self.audio_protos, a_code, &mut rng);
                self.emit(&mut text, &self.text_protos, t_code, &mut rng);
                labels.push(label);
            }
            split.push(Dialogue::new(
                format!("dlg{i:05}"),
                Tensor::matrix(t, s.d_audio, audio)?,
                Tensor::matrix(t, s.d_text, text)?,
                labels,
            )?)?;
        }
        Ok(split)
    }

    fn emit(&self, out: &mut Vec<f64>, protos: &[Vec<f64>], code: Option<usize>, rng: &mut ChaCha8Rng) {
        let d = protos[0].len();
        for j in 0..d {
            let mean = code.map_or(0.0, |c| protos[c][j]);
            out.push(mean + self.spec.noise_scale * gauss(rng));
        }
    }
}

/// The split produced by `spec` alone (`n_dialogues` dialogues, first stream).
pub fn synthesize(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    Synthesizer::new(spec.clone())?.split(0, spec.n_dialogues)
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: SynthMode) -> SyntheticSpec {
        SyntheticSpec {
            n_dialogues: 40,
            mode,
            seed: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn determinism_and_split_independence() {
        let spec = small(SynthMode::UnimodalSeparable);
        assert_eq!(synthesize(&spec).unwrap(), synthesize(&spec).unwrap());
        let s = Synthesizer::new(spec).unwrap();
        let a = s.split(0, 10).unwrap();
        let b = s.split(1, 10).unwrap();
        assert_ne!(a.dialogues[0].audio, b.dialogues[0].audio);
        assert_eq!(a, s.split(0, 10).unwrap());
    }

    #[test]
    fn shapes_and_lengths() {
        let split = synthesize(&small(SynthMode::CrossModalInteraction)).unwrap();
        assert_eq!(split.len(), 40);
        for d in &split.dialogues {
            assert!((3..=8).contains(&d.len()));
            assert_eq!(d.audio.shape(), &[d.len(), 24]);
            assert_eq!(d.text.shape(), &[d.len(), 16]);
        }
    }

    #[test]
    fn validation() {
        let bad = [
            SyntheticSpec { n_classes: 1, ..SyntheticSpec::default() },
            SyntheticSpec { noise_scale: 0.0, ..SyntheticSpec::default() },
            SyntheticSpec { min_utterances: 5, max_utterances: 4, ..SyntheticSpec::default() },
            SyntheticSpec { class_weights: Some(vec![1.0; 3]), ..SyntheticSpec::default() },
            SyntheticSpec {
                class_weights: Some(vec![1.0; 7]),
                mode: SynthMode::CrossModalInteraction,
                ..SyntheticSpec::default()
            },
        ];
        for spec in bad {
            assert!(matches!(synthesize(&spec), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn uninformative_modality_is_pure_noise() {
        let spec = SyntheticSpec {
            informative: Informative::TextOnly,
            noise_scale: 1e-9,
            ..small(SynthMode::UnimodalSeparable)
        };
        let split = synthesize(&spec).unwrap();
        for d in &split.dialogues {
            assert!(d.audio.data().iter().all(|v| v.abs() < 1e-7));
            assert!(d.text.data().iter().any(|v| v.abs() > 1e-3));
        }
    }
}
