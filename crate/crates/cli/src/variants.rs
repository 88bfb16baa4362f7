//! Ablation variants as model-surgery rules on a base [`ModelConfig`].

use std::fmt;
use std::str::FromStr;

use cmfusion::model::{ModelConfig, Stream};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoSca,
    AudioOnly,
    TextOnly,
    NoMid,
    NoResidual,
    AudioNoLld,
    AudioNoOpenl3,
}

impl Variant {
    /// Registry order, which is also the output order of ablation tables.
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoSca,
        Variant::AudioOnly,
        Variant::TextOnly,
        Variant::NoMid,
        Variant::NoResidual,
        Variant::AudioNoLld,
        Variant::AudioNoOpenl3,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSca => "no-sca",
            Variant::AudioOnly => "audio-only",
            Variant::TextOnly => "text-only",
            Variant::NoMid => "no-mid",
            Variant::NoResidual => "no-residual",
            Variant::AudioNoLld => "audio-no-lld",
            Variant::AudioNoOpenl3 => "audio-no-openl3",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::Full => "all seven streams",
            Variant::NoSca => "attention streams removed; mid-level fusion and residual branches only",
            Variant::AudioOnly => "audio self-attention and audio residual streams",
            Variant::TextOnly => "text self-attention and text residual streams",
            Variant::NoMid => "mid-level fusion stream removed",
            Variant::NoResidual => "both residual branches removed",
            Variant::AudioNoLld => "handcrafted audio descriptor columns zeroed",
            Variant::AudioNoOpenl3 => "audio bottleneck embedding columns zeroed",
        }
    }

    /// Applies the surgery rule to `base`, which must describe the full model.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        use Stream::*;
        let mut cfg = base.clone();
        cfg.streams = Stream::ALL.to_vec();
        cfg.zeroed_audio_columns = None;
        let keep = |cfg: &mut ModelConfig, s: &[Stream]| cfg.streams = s.to_vec();
        match self {
            Variant::Full => {}
            Variant::NoSca => keep(&mut cfg, &[Mid, ResidualAudio, ResidualText]),
            Variant::AudioOnly => keep(&mut cfg, &[SelfAudio, ResidualAudio]),
            Variant::TextOnly => keep(&mut cfg, &[SelfText, ResidualText]),
            Variant::NoMid => cfg.streams.retain(|s| *s != Mid),
            Variant::NoResidual => cfg.streams.retain(|s| !matches!(s, ResidualAudio | ResidualText)),
            Variant::AudioNoLld => cfg.zeroed_audio_columns = Some([0, base.audio_lld_dim]),
            Variant::AudioNoOpenl3 => cfg.zeroed_audio_columns = Some([base.audio_lld_dim, base.d_audio_in]),
        }
        cfg
    }

    /// Parses a comma-separated list, dropping duplicates and sorting into
    /// registry order.
    pub fn parse_list(list: &str) -> Result<Vec<Variant>, CliError> {
        let mut out: Vec<Variant> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Variant::from_str)
            .collect::<Result<_, _>>()?;
        if out.is_empty() {
            return Err(CliError::config("no variants requested"));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.id() == s).ok_or_else(|| {
            let known: Vec<_> = Variant::ALL.iter().map(|v| v.id()).collect();
            CliError::config(format!("unknown variant {s:?}; known: {}", known.join(", ")))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig {
            d_audio_in: 24,
            d_text_in: 16,
            d_model: 8,
            audio_lld_dim: 12,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn every_variant_yields_a_valid_config() {
        for v in Variant::ALL {
            let cfg = v.apply(&base());
            cfg.validate().unwrap();
            assert_eq!(v.id().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn surgery_rules() {
        assert_eq!(Variant::NoSca.apply(&base()).aggregation_width(), 3 * 8);
        assert_eq!(Variant::NoMid.apply(&base()).aggregation_width(), 6 * 8);
        assert_eq!(Variant::NoResidual.apply(&base()).aggregation_width(), 5 * 8);
        assert_eq!(Variant::AudioNoLld.apply(&base()).zeroed_audio_columns, Some([0, 12]));
        assert_eq!(Variant::AudioNoOpenl3.apply(&base()).zeroed_audio_columns, Some([12, 24]));
        let text = Variant::TextOnly.apply(&base());
        assert_eq!(text.active_streams(), vec![Stream::SelfText, Stream::ResidualText]);
    }

    #[test]
    fn list_parsing() {
        let v = Variant::parse_list("no-sca, full,no-sca").unwrap();
        assert_eq!(v, vec![Variant::Full, Variant::NoSca]);
        assert!(Variant::parse_list("full,bogus").is_err());
        assert!(Variant::parse_list(" , ").is_err());
    }
}
