use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::error::{Error, Result};
use crate::selector::{Budget, ContextMode, SelectorConfig};
use crate::synthdata::ActivitySpec;

/// Which pipeline to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Selector with its own light head, then a separate heavy classifier.
    Standalone,
    /// Context-conditioned selector and classifier trained jointly.
    E2e,
    /// Like `e2e` but without the attention layer.
    FrameConditioned,
    /// Segment-only saliency scorer, then a classifier on its top-k.
    Scsampler,
    Uniform,
    Random,
}

impl TrainMode {
    pub fn uses_selector(self) -> bool {
        matches!(self, Self::Standalone | Self::E2e | Self::FrameConditioned)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Standalone => "standalone",
            Self::E2e => "e2e",
            Self::FrameConditioned => "frame_conditioned",
            Self::Scsampler => "scsampler",
            Self::Uniform => "uniform",
            Self::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `train.tgds` and `test.tgds`; generated from `spec`
    /// when absent.
    pub path: Option<PathBuf>,
    pub spec: ActivitySpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Generation seed; the experiment seed when absent.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            spec: ActivitySpec::default(),
            n_train: 2000,
            n_test: 500,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs of the first stage of two-stage modes; `epochs` when absent.
    pub selector_epochs: Option<usize>,
    pub lr: f64,
    pub eps: f64,
    /// Weight of the expected-open-gate penalty.
    pub lambda: f64,
    /// Epochs over which the penalty weight ramps linearly from 0 to `lambda`.
    pub lambda_warmup_epochs: usize,
    /// Learning-rate multiplier for selector parameters.
    pub selector_lr_scale: f64,
    /// Timesteps kept by the sampler baselines.
    pub sampler_k: usize,
    pub light_head_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 40,
            selector_epochs: None,
            lr: 1e-3,
            eps: 1e-4,
            lambda: 0.3,
            lambda_warmup_epochs: 0,
            selector_lr_scale: 0.1,
            sampler_k: 4,
            light_head_hidden: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    GateCount,
    Topk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub selection: SelectionMode,
    /// Timestep budgets for top-k evaluation.
    pub budgets: Vec<usize>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            selection: SelectionMode::GateCount,
            budgets: vec![1, 2, 4, 8, 16],
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: TrainMode,
    pub data: DataConfig,
    pub selector: SelectorConfig,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: TrainMode::E2e,
            data: DataConfig::default(),
            selector: SelectorConfig::default(),
            classifier: ClassifierConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The long schedule: 100 epochs over the full default dataset.
    pub fn full_schedule() -> Self {
        let mut c = Self::default();
        c.train.epochs = 100;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    /// Selector settings with the context mode implied by `mode`.
    pub fn effective_selector(&self) -> SelectorConfig {
        let mut s = self.selector.clone();
        match self.mode {
            TrainMode::FrameConditioned => s.context_mode = ContextMode::Frame,
            TrainMode::E2e => s.context_mode = ContextMode::Context,
            _ => {}
        }
        s
    }

    /// Budgets evaluated by [`crate::harness::evaluate`].
    pub fn budgets(&self) -> Vec<Budget> {
        match (self.eval.selection, self.mode.uses_selector()) {
            (SelectionMode::GateCount, true) => vec![Budget::GateCount],
            (SelectionMode::GateCount, false) => vec![Budget::TopK(self.train.sampler_k)],
            (SelectionMode::Topk, _) => self.eval.budgets.iter().map(|&k| Budget::TopK(k)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let t = &self.train;
        if t.batch_size == 0 || self.eval.batch_size == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(t.lr > 0.0) || !(t.eps > 0.0) || !(t.lambda >= 0.0) || !(t.selector_lr_scale > 0.0) {
            return bad("lr, eps and selector_lr_scale must be > 0 and lambda >= 0");
        }
        let steps = self.data.spec.timesteps;
        if t.sampler_k == 0 || t.sampler_k > steps {
            return bad("sampler_k must lie in [1, T]");
        }
        if self.eval.budgets.iter().any(|&k| k == 0 || k > steps) {
            return bad("every eval budget must lie in [1, T]");
        }
        let mut sorted = self.eval.budgets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.eval.budgets.len() {
            return bad("eval budgets must be distinct");
        }
        if self.classifier.segment_len > self.data.spec.frames_per_timestep {
            return bad("classifier.segment_len exceeds data.spec.frames_per_timestep");
        }
        if self.selector.light_channels == 0 || self.selector.concepts == 0 {
            return bad("selector needs light_channels >= 1 and concepts >= 1");
        }
        self.data.spec.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(ExperimentConfig::full_schedule().train.epochs, 100);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = ExperimentConfig::from_json(r#"{"seed": 7, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, 1e-3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [r#"{"sede": 1}"#, r#"{"train": {"epoch": 3}}"#, r#"{"data": {"spec": {"noise": 1}}}"#] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            r#"{"train": {"lambda": -1}}"#,
            r#"{"eval": {"budgets": [2, 2]}}"#,
            r#"{"eval": {"budgets": [64]}}"#,
            r#"{"classifier": {"segment_len": 8}}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }
}
