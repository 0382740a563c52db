//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scones_core::decode::DEFAULT_MAX_STATES;
use scones_core::losses::{Head, LossSpec, DEFAULT_CLAMP_FLOOR};
use scones_core::model::ModelConfig;
use scones_core::synthlang::RandomParamsOptions;
use scones_core::train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Corpus directory used by `train` and `sweep-alpha` when `--data` is absent.
    pub data_dir: Option<PathBuf>,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: None,
            data_dir: None,
            synth: SynthSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            train: TrainConfig::default(),
            decode: DecodeSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf: f64,
    pub gammas: Vec<f64>,
    /// Load tables from this file instead of drawing random ones.
    pub params_file: Option<PathBuf>,
    /// Read source sentences (`s<i>` words) from this file instead of generating them.
    pub source_file: Option<PathBuf>,
    pub params: RandomParamsOptions,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            source_vocab: 200,
            target_vocab: 200,
            train_pairs: 50_000,
            dev_pairs: 500,
            test_pairs: 200,
            min_len: 3,
            max_len: 12,
            zipf: 1.0,
            gammas: vec![0.1, 0.2, 0.3, 0.5, 0.7],
            params_file: None,
            source_file: None,
            params: RandomParamsOptions {
                concentration: 0.01,
                fertility_base: vec![0.1, 0.7, 0.15, 0.04, 0.01],
                distortion_locality: 3.0,
                ..RandomParamsOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub tie_output_embedding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(4, 4);
        Self {
            num_layers: d.num_layers,
            num_heads: d.num_heads,
            d_model: d.d_model,
            d_ff: d.d_ff,
            max_positions: d.max_positions,
            dropout_rate: d.dropout_rate,
            tie_output_embedding: d.tie_output_embedding,
        }
    }
}

impl ModelSection {
    pub fn to_model(&self, source_vocab_size: usize, target_vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            source_vocab_size,
            target_vocab_size,
            max_positions: self.max_positions,
            dropout_rate: self.dropout_rate,
            seed,
            tie_output_embedding: self.tie_output_embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub head: Head,
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            head: Head::Softmax,
            alpha: 1.0,
            lambda: 0.0,
        }
    }
}

impl LossSection {
    pub fn spec(&self) -> LossSpec {
        LossSpec {
            head: self.head,
            alpha: self.alpha,
            lambda: self.lambda,
            clamp_floor: DEFAULT_CLAMP_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Greedy,
    Beam,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub mode: ModeName,
    pub beam_size: usize,
    pub beam_sizes: Vec<usize>,
    /// Fixed output length bound; unset means `2 * |source| + 10`.
    pub max_len: Option<usize>,
    pub max_states: u64,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            mode: ModeName::Greedy,
            beam_size: 4,
            beam_sizes: vec![1, 4, 16, 64],
            max_len: None,
            max_states: DEFAULT_MAX_STATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bootstrap_resamples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            bootstrap_resamples: scones_core::eval::DEFAULT_RESAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
    /// Also train and evaluate a softmax baseline.
    pub include_softmax: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            alphas: vec![0.2, 0.5, 0.7, 0.9, 1.0],
            include_softmax: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let s = &self.synth;
        if s.gammas.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return bad("synth.gammas must be positive".into());
        }
        if s.min_len == 0 || s.min_len > s.max_len {
            return bad("synth.min_len must be in 1..=max_len".into());
        }
        if s.train_pairs == 0 || s.dev_pairs == 0 || s.test_pairs == 0 {
            return bad("synth pair counts must be positive".into());
        }
        for p in [&s.params_file, &s.source_file].into_iter().flatten() {
            if !p.exists() {
                return bad(format!("referenced file {} does not exist", p.display()));
            }
        }
        if !(self.loss.alpha > 0.0) {
            return bad("loss.alpha must be positive".into());
        }
        self.loss.spec().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sweep.alphas.iter().any(|a| !(*a > 0.0)) {
            return bad("sweep.alphas must be positive".into());
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model
            .to_model(4, 4, 0)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let d = &self.decode;
        if d.beam_size == 0 || d.beam_sizes.is_empty() || d.beam_sizes.contains(&0) {
            return bad("beam sizes must be positive".into());
        }
        if d.beam_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decode.beam_sizes must be strictly ascending".into());
        }
        if d.max_states == 0 || d.max_len == Some(0) {
            return bad("decode.max_states and decode.max_len must be positive".into());
        }
        if self.eval.bootstrap_resamples < 100 {
            return bad("eval.bootstrap_resamples must be at least 100".into());
        }
        Ok(())
    }
}
