//! The run configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::matching::CostWeights;
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::objective::{LossWeights, OptimConfig};
use crate::{Error, Result};

pub const SEED_ENV: &str = "GTR_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory written by `gtr generate`.
    pub dir: PathBuf,
    pub train_split: String,
    /// Split used to pick the best checkpoint; skipped when absent or missing.
    pub val_split: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: Some("val".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub run_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-epoch checkpoints kept on disk; `last` and `best` are always kept.
    pub keep_checkpoints: usize,
    /// Run validation every this many epochs (and after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            epochs: 100,
            batch_size: 16,
            keep_checkpoints: 3,
            eval_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Pins every thread pool to one thread so runs are bitwise repeatable
    /// on any machine.
    pub deterministic: bool,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub optim: OptimConfig,
    pub cost: CostWeights,
    pub loss: LossWeights,
    pub eval: EvalConfig,
    pub generate: GenConfig,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let to_error = |e: toml::de::Error, key: Option<String>| {
            let location = e
                .span()
                .map(|s| {
                    let (l, c) = line_col(text, s.start);
                    format!("line {l}, column {c}")
                })
                .unwrap_or_else(|| "top level".into());
            let message = match key {
                Some(k) if k != "." => format!("{k}: {}", e.message()),
                _ => e.message().to_string(),
            };
            Error::Parse {
                path: path.to_path_buf(),
                location,
                message,
            }
        };
        let de = toml::Deserializer::parse(text).map_err(|e| to_error(e, None))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            to_error(e.into_inner(), Some(key))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the seed with `GTR_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Some(seed) = seed_from_env()? {
            self.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.generate.validate()?;
        self.cost.validate()?;
        self.loss.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.train.epochs == 0 || self.train.batch_size == 0 || self.train.eval_every == 0 {
            return bad("train.epochs, train.batch_size and train.eval_every must be positive".into());
        }
        let o = &self.optim;
        if [o.lr_backbone, o.lr_rest, o.weight_decay, o.eps].iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.lr_decay > 0.0)
        {
            return bad("optimizer settings out of range".into());
        }
        if !(0.0..=1.0).contains(&self.eval.score_threshold) {
            return bad(format!("eval.score_threshold {} is outside [0, 1]", self.eval.score_threshold));
        }
        if self.generate.num_categories != self.model.num_categories {
            return bad(format!(
                "generate.num_categories = {} but model.num_categories = {}",
                self.generate.num_categories, self.model.num_categories
            ));
        }
        if (self.generate.width, self.generate.height) != (self.model.input_width, self.model.input_height) {
            return bad(format!(
                "generate canvas {}x{} differs from the model input {}x{}",
                self.generate.width, self.generate.height, self.model.input_width, self.model.input_height
            ));
        }
        Ok(())
    }
}

pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn optimizer_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.optim.lr_backbone, 1e-5);
        assert_eq!(cfg.optim.lr_rest, 1e-4);
        assert_eq!(cfg.optim.weight_decay, 1e-4);
        assert_eq!((cfg.optim.lr_milestone, cfg.train.epochs, cfg.train.batch_size), (80, 100, 16));
        assert_eq!(cfg.loss.eta, [2.5, 1.0, 1.0, 2.0]);
        assert_eq!(cfg.cost.sigma, [2.0, 1.0, 1.0]);
    }

    #[test]
    fn unknown_keys_report_their_location() {
        let err = RunConfig::from_toml("seed = 1\n[train]\nepochz = 3\n", Path::new("r.toml")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("r.toml") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn width_constraint_is_checked() {
        let err = RunConfig::from_toml("[model]\nd_model = 32\n", Path::new("r.toml")).unwrap_err();
        assert!(err.to_string().contains("token count"), "{err}");
    }
}
