//! Experiment configuration: one TOML file, unknown keys rejected.

use std::path::{Path, PathBuf};

use relprox_core::gradcheck::GradCheckPlan;
use relprox_core::synth::SyntheticCorpusSpec;
use relprox_core::train::{EvalConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every output. Relative paths resolve against the working directory.
    pub out_dir: PathBuf,
    /// Corpus location; defaults to `<out_dir>/corpus`.
    pub corpus_dir: Option<PathBuf>,
    pub deterministic: bool,
    pub corpus: SyntheticCorpusSpec,
    pub train: TrainConfig,
    /// Pair sampling for `eval` and `ablate`.
    pub eval: EvalConfig,
    pub gradcheck: GradCheckPlan,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            corpus_dir: None,
            deterministic: true,
            corpus: SyntheticCorpusSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradCheckPlan::default(),
            ablate: AblateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Training seeds; every row uses all of them.
    pub seeds: Vec<u64>,
    /// Weight of every active term in the ablation rows.
    pub term_weight: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3], term_weight: 1.0 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.eval.n_pos == 0 || self.eval.n_neg == 0 {
            return Err(CliError::Config("eval pair counts must be positive".into()));
        }
        if self.ablate.seeds.is_empty() {
            return Err(CliError::Config("ablate.seeds must not be empty".into()));
        }
        if !(self.ablate.term_weight > 0.0 && self.ablate.term_weight.is_finite()) {
            return Err(CliError::Config("ablate.term_weight must be positive".into()));
        }
        Ok(())
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| self.out_dir.join("corpus"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.contains("learning_rate"), "{err}");
        let err = ExperimentConfig::parse("[train.loss.weights]\nrpl_x = 1.0\n").unwrap_err();
        assert!(err.contains("rpl_x"), "{err}");
    }

    #[test]
    fn nested_values_parse() {
        let cfg = ExperimentConfig::parse(
            r#"
out_dir = "x"
[corpus]
num_classes = 20
dev_classes = 2
test_classes = 4
[train]
epochs = 3
[train.loss]
p2p_variant = "asyp-fixed"
tuple_sampling = { mode = "seeded-subsample", count = 50, seed = 4 }
[train.loss.weights]
p2p = 1.0
rpl_d = 0.5
"#,
        )
        .unwrap();
        assert_eq!(cfg.corpus.num_classes, 20);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.loss.weights.rpl_d, 0.5);
        assert_eq!(cfg.corpus_dir(), PathBuf::from("x/corpus"));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(ExperimentConfig::parse("[train]\nclasses_per_batch = 1\n").is_err());
        assert!(ExperimentConfig::parse("[train.loss.weights]\np2p = 0.0\n").is_err());
    }
}
