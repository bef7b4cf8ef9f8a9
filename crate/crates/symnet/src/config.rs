//! Run configuration: a single TOML document with nested sections for the
//! model, the sharing setup, training, data, beam search, and output.
//! Parsing is strict (unknown keys are rejected) and the resolved config
//! round-trips losslessly.

use serde::{Deserialize, Serialize};

use crate::data::SyntheticTaskSpec;
use crate::decode::BeamConfig;
use crate::error::{Error, Result};
use crate::model::{ModelDims, NormStyle};
use crate::symbiosis::{LayerMapStrategy, SymbiosisSpec};
use crate::train::{ModelSetup, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub norm_style: NormStyle,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelDims::default();
        ModelSection {
            d_model: d.d_model,
            n_heads: d.n_heads,
            d_ffn: d.d_ffn,
            max_len: d.max_len,
            dropout_p: d.dropout_p,
            norm_style: d.norm_style,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymbiosisSection {
    /// When false the run trains a single network of depth (m, d) with
    /// the full step budget in one stage.
    pub enabled: bool,
    pub m: usize,
    pub o: usize,
    pub d: usize,
    pub strategy: LayerMapStrategy,
}

impl Default for SymbiosisSection {
    fn default() -> Self {
        SymbiosisSection {
            enabled: true,
            m: 4,
            o: 2,
            d: 2,
            strategy: LayerMapStrategy::Bottom,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "runs/run".to_string(),
        }
    }
}

/// Depth sweep settings for the `compare` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// (m, o) encoder depth pairs; the decoder depth comes from
    /// `symbiosis.d`.
    pub depths: Vec<(usize, usize)>,
    pub seeds: Vec<u64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            depths: vec![(2, 1), (4, 2), (6, 3)],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub symbiosis: SymbiosisSection,
    pub train: TrainConfig,
    pub data: SyntheticTaskSpec,
    pub beam: BeamConfig,
    pub output: OutputSection,
    pub compare: Option<CompareSection>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = RunConfig::from_toml_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model dimensions with the vocabulary taken from the data section.
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            d_ffn: self.model.d_ffn,
            vocab_size: self.data.vocab_size,
            max_len: self.model.max_len,
            dropout_p: self.model.dropout_p,
            norm_style: self.model.norm_style,
        }
    }

    pub fn symbiosis_spec(&self) -> Option<SymbiosisSpec> {
        if self.symbiosis.enabled {
            Some(SymbiosisSpec {
                m: self.symbiosis.m,
                o: self.symbiosis.o,
                d: self.symbiosis.d,
                strategy: self.symbiosis.strategy,
            })
        } else {
            None
        }
    }

    /// Training setup: symbiosis when enabled, otherwise a classic single
    /// network of depth (m, d) trained with the full budget in one stage.
    pub fn setup(&self) -> ModelSetup {
        match self.symbiosis_spec() {
            Some(spec) => ModelSetup::Symbiosis(spec),
            None => ModelSetup::Classic {
                enc_depth: self.symbiosis.m,
                dec_depth: self.symbiosis.d,
            },
        }
    }

    /// Train config adjusted for the setup: a classic run gets the whole
    /// stage-1 + stage-2 budget as one stage (matched total budget).
    pub fn effective_train(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        if !self.symbiosis.enabled {
            cfg.stage1_steps += cfg.stage2_steps;
            cfg.stage2_steps = 0;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model.dropout_p", self.model.dropout_p),
            ("train.tau", self.train.tau),
            ("train.alpha", self.train.alpha),
            ("train.lr_peak", self.train.lr_peak),
            ("train.lr_floor", self.train.lr_floor),
            ("train.label_eps", self.train.label_eps),
            ("beam.length_penalty_exp", self.beam.length_penalty_exp),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        self.dims().validate()?;
        if let Some(spec) = self.symbiosis_spec() {
            spec.validate()?;
        } else if self.symbiosis.m == 0 || self.symbiosis.d == 0 {
            return Err(Error::Config(
                "classic mode still needs positive symbiosis.m and symbiosis.d depths".into(),
            ));
        }
        self.train.validate()?;
        self.data
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.beam.validate()?;
        if self.data.len_max + 1 > self.model.max_len {
            return Err(Error::Config(format!(
                "data.len_max {} does not fit model.max_len {} (one slot is needed for EOS)",
                self.data.len_max, self.model.max_len
            )));
        }
        if self.data.vocab_size > u32::MAX as usize {
            return Err(Error::Config("data.vocab_size too large".into()));
        }
        if let Some(c) = &self.compare {
            if c.depths.is_empty() {
                return Err(Error::Config("compare.depths must not be empty".into()));
            }
            if c.seeds.is_empty() {
                return Err(Error::Config("compare.seeds must not be empty".into()));
            }
            for &(m, o) in &c.depths {
                if o == 0 || o >= m {
                    return Err(Error::Config(format!(
                        "compare depth pair ({m}, {o}) needs 0 < o < m"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_losslessly() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        // and a second serialization is stable
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn compare_section_round_trips() {
        let mut cfg = RunConfig {
            compare: Some(CompareSection {
                depths: vec![(4, 2)],
                seeds: vec![7, 8],
            }),
            ..RunConfig::default()
        };
        cfg.train.patience = Some(3);
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[model]\nd_model = 64\nnot_a_field = 3\n";
        let err = RunConfig::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("not_a_field"), "{err}");
        let err = RunConfig::from_toml_str("[nonsense]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("nonsense"), "{err}");
    }

    #[test]
    fn field_level_validation_messages() {
        let mut cfg = RunConfig::default();
        cfg.train.tau = -0.5;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("tau"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.symbiosis.o = cfg.symbiosis.m;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("o < m"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.model.d_model = 30; // not divisible by n_heads = 4
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn classic_mode_merges_budgets() {
        let mut cfg = RunConfig::default();
        cfg.symbiosis.enabled = false;
        cfg.train.stage1_steps = 500;
        cfg.train.stage2_steps = 100;
        let eff = cfg.effective_train();
        assert_eq!(eff.stage1_steps, 600);
        assert_eq!(eff.stage2_steps, 0);
        assert!(matches!(
            cfg.setup(),
            ModelSetup::Classic {
                enc_depth: 4,
                dec_depth: 2
            }
        ));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml_str("[train]\nseed = 9\n").unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.tau, 0.1);
        assert_eq!(cfg.model.d_model, 64);
        cfg.validate().unwrap();
    }
}
