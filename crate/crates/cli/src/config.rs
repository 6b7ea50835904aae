//! TOML run configuration. Every field is optional; unset fields keep the
//! library defaults.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use retgen::bench::Scenario;
use retgen::model::ModelConfig;
use retgen::objectives::{HyperParams, LossVariant};
use retgen::reconstruct::Granularity;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub reconstruct: ReconstructSection,
    #[serde(default)]
    pub infer: InferSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_seq_len: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lambda_g: Option<f64>,
    pub lambda_r: Option<f64>,
    pub temperature: Option<f64>,
    pub negatives_per_positive: Option<usize>,
    pub learning_rate: Option<f64>,
    pub grad_accum_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub variant: Option<LossVariant>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructSection {
    pub granularity: Option<Granularity>,
    pub negatives_per_anchor: Option<usize>,
    pub window: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    pub top_k: Option<usize>,
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    /// Secondary model layer count for PIPELINE; defaults to half the main.
    pub secondary_layers: Option<usize>,
    pub repeats: Option<usize>,
    pub warmup: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        let mut c = ModelConfig::with_vocab(vocab_size);
        let m = &self.model;
        c.d_model = m.d_model.unwrap_or(c.d_model);
        c.n_layers = m.n_layers.unwrap_or(c.n_layers);
        c.n_heads = m.n_heads.unwrap_or(c.n_heads);
        c.d_ff = m.d_ff.unwrap_or(c.d_ff);
        c.max_seq_len = m.max_seq_len.unwrap_or(c.max_seq_len);
        c.seed = seed;
        c
    }

    pub fn hyper(&self) -> HyperParams {
        let d = HyperParams::default();
        let t = &self.train;
        HyperParams {
            lambda_g: t.lambda_g.unwrap_or(d.lambda_g),
            lambda_r: t.lambda_r.unwrap_or(d.lambda_r),
            temperature: t.temperature.unwrap_or(d.temperature),
            negatives_per_positive: t.negatives_per_positive.unwrap_or(d.negatives_per_positive),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            grad_accum_steps: t.grad_accum_steps.unwrap_or(d.grad_accum_steps),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            epochs: t.epochs.unwrap_or(d.epochs),
        }
    }
}

/// Scenario file for `bench`: one `[[scenario]]` table per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenario: Vec<Scenario>,
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing scenarios {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let c: RunConfig = toml::from_str("seed = 7\n[train]\nepochs = 3\nvariant = \"infonce\"\n").unwrap();
        assert_eq!(c.seed, Some(7));
        let h = c.hyper();
        assert_eq!(h.epochs, 3);
        assert_eq!(h.lambda_g, 1.0);
        assert_eq!(c.train.variant, Some(LossVariant::InfoNce));
        assert_eq!(c.model_config(30, 7).d_model, 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3\n").is_err());
    }

    #[test]
    fn scenarios_parse() {
        let s: ScenarioFile = toml::from_str(
            "[[scenario]]\nrounds = 5\nquery_len = 100\ndoc_len = 30\noutput_len = 10\nretrievals_per_round = 1\n",
        )
        .unwrap();
        assert_eq!(s.scenario[0].query_len, 100);
    }
}
