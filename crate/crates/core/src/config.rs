//! Flat `key = value` run configuration.
//!
//! Every key has a default and a one-line description in [`KEYS`]. Files may
//! contain blank lines and `#` comments; unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ccr::{AggregatorKind, CounterfactualStrategy};
use crate::data::SynthConfig;
use crate::error::{CcrError, Result};
use crate::fusion::FusionConfig;
use crate::losses::Margins;
use crate::model::{CcrConfig, ModelConfig};
use crate::pipeline::ObjectiveConfig;
use crate::proposals::NegativeMining;
use crate::trainer::TrainConfig;

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "seed for initialisation, batching, masking and evaluation"),
    ("manifest", "data/manifest.jsonl", "dataset manifest (JSONL)"),
    ("vocab", "", "vocabulary file; empty means vocab.txt next to the manifest"),
    ("out_dir", "runs/default", "directory for checkpoints, logs, predictions and reports"),
    ("checkpoint", "", "checkpoint path; empty means model.ckpt in out_dir"),
    ("resume", "false", "continue training from the checkpoint if it exists"),
    ("synth_pairs", "50", "synthetic corpus: number of video-query pairs"),
    ("synth_frames", "32", "synthetic corpus: frames per video"),
    ("synth_feature_dim", "16", "synthetic corpus: feature dimension"),
    ("synth_vocab_size", "40", "synthetic corpus: vocabulary size including reserved tokens"),
    ("synth_query_len", "5", "synthetic corpus: tokens per query"),
    ("synth_bias", "0.0", "synthetic corpus: probability that the verb is the noun's partner"),
    ("hidden_dim", "32", "model width"),
    ("layers", "1", "layers per encoder and decoder stack"),
    ("heads", "4", "attention heads"),
    ("ff_dim", "64", "feed-forward width"),
    ("dropout", "0.0", "dropout rate"),
    ("max_frames", "256", "longest accepted video in frames"),
    ("max_query_len", "32", "longest accepted query in tokens"),
    ("num_positives", "2", "positive proposals per pair"),
    ("sigma_min", "0.01", "lower bound on proposal width"),
    ("sigma_max", "1.0", "upper bound on proposal width"),
    ("init_width", "0.15", "proposal width before training"),
    ("p_mask", "0.3333333333333333", "per-token masking probability"),
    ("lambda", "0.15", "target self-similarity of the diversity loss"),
    ("alpha_p", "0.2", "margin between positive and reference reconstruction"),
    ("alpha_n", "0.1", "margin between positive and negative reconstruction"),
    ("delta", "3.0", "negative offset in proposal widths"),
    ("eps", "0.01", "negative centers stay this far inside (0, 1)"),
    ("min_width", "0.1", "width floor used when placing negatives"),
    ("gamma", "1.0", "segment half-length in proposal widths"),
    ("ccr", "true", "subtract the counterfactual reconstruction"),
    ("strategy", "uniform", "counterfactual knowledge: uniform, average or random_selected"),
    ("aggregator", "sigmoid_gate", "branch aggregation: sigmoid_gate, sum_sigmoid or learned_concat"),
    ("lr_main", "0.0004", "learning rate of everything except mu"),
    ("lr_mu", "0.001", "learning rate of mu"),
    ("batch_size", "8", "pairs per step"),
    ("steps", "2000", "training steps"),
    ("clip_norm", "5.0", "gradient-norm bound per parameter group"),
    ("checkpoint_every", "0", "steps between checkpoints; 0 saves only at the end"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: PathBuf,
    pub vocab: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub resume: bool,
    pub synth: SynthConfig,
    pub fusion: FusionConfig,
    pub objective: ObjectiveConfig,
    pub mining: NegativeMining,
    pub gamma: f64,
    pub ccr: CcrConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            manifest: PathBuf::new(),
            vocab: None,
            out_dir: PathBuf::new(),
            checkpoint: None,
            resume: false,
            synth: SynthConfig::default(),
            fusion: FusionConfig::default(),
            objective: ObjectiveConfig::default(),
            mining: NegativeMining::default(),
            gamma: 1.0,
            ccr: CcrConfig::default(),
            train: TrainConfig::default(),
        };
        for (k, v, _) in KEYS {
            cfg.set(k, v).expect("defaults parse");
        }
        cfg
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| CcrError::Config(format!("{key} = {value:?}: {e}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "manifest" => self.manifest = PathBuf::from(v),
            "vocab" => self.vocab = opt_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "resume" => self.resume = parse(key, v)?,
            "synth_pairs" => self.synth.n_pairs = parse(key, v)?,
            "synth_frames" => self.synth.frames = parse(key, v)?,
            "synth_feature_dim" => self.synth.feature_dim = parse(key, v)?,
            "synth_vocab_size" => self.synth.vocab_size = parse(key, v)?,
            "synth_query_len" => self.synth.query_len = parse(key, v)?,
            "synth_bias" => self.synth.bias_strength = parse(key, v)?,
            "hidden_dim" => self.fusion.hidden_dim = parse(key, v)?,
            "layers" => self.fusion.layers = parse(key, v)?,
            "heads" => self.fusion.heads = parse(key, v)?,
            "ff_dim" => self.fusion.ff_dim = parse(key, v)?,
            "dropout" => self.fusion.dropout = parse(key, v)?,
            "max_frames" => self.fusion.max_frames = parse(key, v)?,
            "max_query_len" => self.fusion.max_query_len = parse(key, v)?,
            "num_positives" => self.fusion.num_positives = parse(key, v)?,
            "sigma_min" => self.fusion.sigma_min = parse(key, v)?,
            "sigma_max" => self.fusion.sigma_max = parse(key, v)?,
            "init_width" => self.fusion.init_width = parse(key, v)?,
            "p_mask" => self.train.p_mask = parse(key, v)?,
            "lambda" => self.objective.lambda = parse(key, v)?,
            "alpha_p" => self.objective.margins.alpha_p = parse(key, v)?,
            "alpha_n" => self.objective.margins.alpha_n = parse(key, v)?,
            "delta" => self.mining.delta = parse(key, v)?,
            "eps" => self.mining.eps = parse(key, v)?,
            "min_width" => self.mining.min_width = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "ccr" => self.ccr.enabled = parse(key, v)?,
            "strategy" => self.ccr.strategy = v.parse::<CounterfactualStrategy>()?,
            "aggregator" => self.ccr.aggregator = v.parse::<AggregatorKind>()?,
            "lr_main" => self.train.lr_main = parse(key, v)?,
            "lr_mu" => self.train.lr_mu = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "steps" => self.train.steps = parse(key, v)?,
            "clip_norm" => self.train.clip_norm = parse(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            _ => return Err(CcrError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// The current value of `key`, formatted so that [`RunConfig::set`]
    /// reads it back unchanged.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "seed" => self.seed.to_string(),
            "manifest" => self.manifest.display().to_string(),
            "vocab" => path(&self.vocab),
            "out_dir" => self.out_dir.display().to_string(),
            "checkpoint" => path(&self.checkpoint),
            "resume" => self.resume.to_string(),
            "synth_pairs" => self.synth.n_pairs.to_string(),
            "synth_frames" => self.synth.frames.to_string(),
            "synth_feature_dim" => self.synth.feature_dim.to_string(),
            "synth_vocab_size" => self.synth.vocab_size.to_string(),
            "synth_query_len" => self.synth.query_len.to_string(),
            "synth_bias" => self.synth.bias_strength.to_string(),
            "hidden_dim" => self.fusion.hidden_dim.to_string(),
            "layers" => self.fusion.layers.to_string(),
            "heads" => self.fusion.heads.to_string(),
            "ff_dim" => self.fusion.ff_dim.to_string(),
            "dropout" => self.fusion.dropout.to_string(),
            "max_frames" => self.fusion.max_frames.to_string(),
            "max_query_len" => self.fusion.max_query_len.to_string(),
            "num_positives" => self.fusion.num_positives.to_string(),
            "sigma_min" => self.fusion.sigma_min.to_string(),
            "sigma_max" => self.fusion.sigma_max.to_string(),
            "init_width" => self.fusion.init_width.to_string(),
            "p_mask" => self.train.p_mask.to_string(),
            "lambda" => self.objective.lambda.to_string(),
            "alpha_p" => self.objective.margins.alpha_p.to_string(),
            "alpha_n" => self.objective.margins.alpha_n.to_string(),
            "delta" => self.mining.delta.to_string(),
            "eps" => self.mining.eps.to_string(),
            "min_width" => self.mining.min_width.to_string(),
            "gamma" => self.gamma.to_string(),
            "ccr" => self.ccr.enabled.to_string(),
            "strategy" => self.ccr.strategy.to_string(),
            "aggregator" => self.ccr.aggregator.to_string(),
            "lr_main" => self.train.lr_main.to_string(),
            "lr_mu" => self.train.lr_mu.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "steps" => self.train.steps.to_string(),
            "clip_norm" => self.train.clip_norm.to_string(),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CcrError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                CcrError::Config(m) => CcrError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CcrError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every key with its description, in file syntax.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{k} = {}\n", self.get(k).expect("listed key")));
        }
        out
    }

    /// Rebases relative data paths onto `root`.
    pub fn with_data_root(mut self, root: &Path) -> Self {
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        rebase(&mut self.manifest);
        if let Some(v) = self.vocab.as_mut() {
            rebase(v);
        }
        self
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .map(|d| d.join("vocab.txt"))
                .unwrap_or_else(|| PathBuf::from("vocab.txt"))
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    /// Model configuration for a vocabulary of `vocab_size` and features of
    /// width `feature_dim`.
    pub fn model_config(&self, feature_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            fusion: FusionConfig {
                feature_dim,
                vocab_size,
                ..self.fusion.clone()
            },
            mining: self.mining,
            ccr: self.ccr,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            objective: self.objective,
            ..self.train.clone()
        }
    }

    pub fn margins(&self) -> Margins {
        self.objective.margins
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.model_config(1, 8).validate()?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(CcrError::Config(format!("gamma {} must be positive", self.gamma)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        for (k, default, doc) in KEYS {
            assert!(!doc.is_empty());
            let v = cfg.get(k).unwrap();
            let mut other = RunConfig::default();
            other.set(k, &v).unwrap();
            assert_eq!(other, cfg, "{k}");
            assert_eq!(RunConfig::default().get(k).unwrap(), {
                let mut c = RunConfig::default();
                c.set(k, default).unwrap();
                c.get(k).unwrap()
            });
        }
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn keys_are_unique_and_defaults_match_components() {
        let mut names: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), KEYS.len());
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.lr_main, TrainConfig::default().lr_main);
        assert_eq!(cfg.objective, ObjectiveConfig::default());
        assert_eq!(cfg.mining, NegativeMining::default());
        assert_eq!(cfg.ccr, CcrConfig::default());
        assert_eq!(cfg.fusion, FusionConfig::default());
        assert_eq!(cfg.train.p_mask, 1.0 / 3.0);
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("no_such_key = 1").is_err());
        assert!(cfg.apply_text("seed 4").is_err());
        assert!(cfg.apply_text("steps = many").is_err());
        assert!(cfg.apply_text("strategy = mean").is_err());
        cfg.apply_text("# comment\n\nsteps = 7  # trailing\naggregator = learned_concat\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.ccr.aggregator, AggregatorKind::LearnedConcat);
    }

    #[test]
    fn data_root_rebases_relative_paths_only() {
        let mut cfg = RunConfig::default();
        let root = Path::new("/data");
        assert_eq!(cfg.clone().with_data_root(root).manifest, Path::new("/data/data/manifest.jsonl"));
        cfg.set("manifest", "/abs/m.jsonl").unwrap();
        assert_eq!(cfg.with_data_root(root).manifest, Path::new("/abs/m.jsonl"));
    }
}
