//! Experiment configuration, stored as JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{CorpusSpec, ExponentDist, Grammar};
use crate::error::{Error, Result};
use crate::evalanalysis::tsne::TsneConfig;
use crate::evalanalysis::LnRmseMode;
use crate::model::ModelConfig;
use crate::training::{log_grid, OptConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArithData {
    pub n: usize,
    pub dist: ExponentDist,
    pub seed: u64,
}

impl Default for ArithData {
    fn default() -> Self {
        ArithData {
            n: 2000,
            dist: ExponentDist::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Arithmetic training set.
    pub arith: ArithData,
    /// Arithmetic evaluation set.
    pub arith_eval: ArithData,
    /// General-task training corpora, one per grammar.
    pub corpora: Vec<CorpusSpec>,
    /// Held-out corpora for measuring forgetting.
    pub heldout: Vec<CorpusSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let corpus = |grammar, n_sentences, seed| CorpusSpec {
            grammar,
            n_sentences,
            seed,
            ..CorpusSpec::default()
        };
        DataConfig {
            arith: ArithData::default(),
            arith_eval: ArithData {
                n: 300,
                seed: 2,
                ..ArithData::default()
            },
            corpora: vec![corpus(Grammar::A, 2000, 11), corpus(Grammar::B, 2000, 12)],
            heldout: vec![corpus(Grammar::A, 800, 21), corpus(Grammar::B, 800, 22)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EwcSettings {
    /// Fixed λ; when absent the sweep picks it.
    pub lambda: Option<f64>,
    pub fisher_samples: usize,
    /// Sweep grid, largest first.
    pub grid: Vec<f64>,
}

impl Default for EwcSettings {
    fn default() -> Self {
        EwcSettings {
            lambda: None,
            fisher_samples: 300,
            grid: log_grid(1e9, 1e2, 8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Encoder block used for vital parameters and t-SNE.
    pub layer: usize,
    pub vital_n: usize,
    pub ln_rmse_mode: LnRmseMode,
    pub tsne: TsneConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            layer: 0,
            vital_n: 800,
            ln_rmse_mode: LnRmseMode::LogOfRmse,
            tsne: TsneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    pub model: ModelConfig,
    /// Optimizer for general-task pretraining.
    pub pretrain: OptConfig,
    /// Optimizer for arithmetic training, plain and EWC.
    pub opt: OptConfig,
    pub data: DataConfig,
    pub ewc: EwcSettings,
    pub analysis: AnalysisConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_name: "default".into(),
            model: ModelConfig::default(),
            pretrain: OptConfig {
                epochs: 20,
                ..OptConfig::default()
            },
            opt: OptConfig {
                epochs: 10,
                ..OptConfig::default()
            },
            data: DataConfig::default(),
            ewc: EwcSettings::default(),
            analysis: AnalysisConfig::default(),
            seeds: vec![0, 1],
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.opt.validate()?;
        self.data.arith.dist.validate()?;
        self.data.arith_eval.dist.validate()?;
        if self.data.arith.n == 0 || self.data.arith_eval.n == 0 {
            return Err(Error::Config("arithmetic datasets must be nonempty".into()));
        }
        if self.data.corpora.is_empty() {
            return Err(Error::Config("at least one general-task corpus is required".into()));
        }
        for spec in self.data.corpora.iter().chain(&self.data.heldout) {
            spec.validate()?;
        }
        for spec in &self.data.heldout {
            if !self.data.corpora.iter().any(|c| c.grammar == spec.grammar) {
                return Err(Error::Config(format!(
                    "held-out corpus for {} has no training corpus",
                    spec.grammar.label()
                )));
            }
        }
        if let Some(l) = self.ewc.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda must be finite and nonnegative, got {l}")));
            }
        }
        if self.ewc.lambda.is_none() && self.ewc.grid.is_empty() {
            return Err(Error::Config("no lambda given and the sweep grid is empty".into()));
        }
        if let Some(l) = self.ewc.grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("invalid grid lambda {l}")));
        }
        if self.ewc.fisher_samples == 0 {
            return Err(Error::Config("fisher_samples must be positive".into()));
        }
        if self.analysis.layer >= self.model.n_layers {
            return Err(Error::Config(format!(
                "analysis layer {} but the model has {} layers",
                self.analysis.layer, self.model.n_layers
            )));
        }
        self.analysis.tsne.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"seeds": [7], "opt": {"lr": 0.01}}"#).unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.opt.lr, 0.01);
        assert_eq!(cfg.opt.batch_size, 32);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn schema_violations_are_config_errors() {
        for text in [
            r#"{"seeds": []}"#,
            r#"{"sedes": [1]}"#,
            r#"{"ewc": {"lambda": -1.0}}"#,
            r#"{"analysis": {"layer": 5}}"#,
            r#"{"ewc": {"grid": []}}"#,
            "not json",
        ] {
            let err = RunConfig::from_json(text).unwrap_err();
            assert_eq!(err.kind(), "config", "{text}");
        }
    }

    #[test]
    fn default_grid_spans_eight_decades() {
        let g = EwcSettings::default().grid;
        assert_eq!(g.len(), 8);
        assert_eq!(g[0], 1e9);
        assert_eq!(g[7], 1e2);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }
}
