//! Flat dotted-key configuration: one `key = value` per line, `#`
//! comments, CLI overrides of the form `--key.path=value`. Defaults match
//! the shipped training setup; validation rejects negative or non-finite
//! numbers.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ModelDims;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Malformed { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {key}: cannot parse {value:?}: {message}")]
    BadValue { key: String, value: String, message: String },
    #[error("key {key}: {message}")]
    Invalid { key: String, message: String },
}

/// Which generation backend the pipeline talks to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendKind {
    /// Deterministic offline mock.
    Mock,
    /// Generic HTTP endpoint.
    Http,
    /// No generation: sequence-model answers only.
    None,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendKind::Mock => write!(f, "mock"),
            BackendKind::Http => write!(f, "http"),
            BackendKind::None => write!(f, "none"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub catalog_path: PathBuf,
    pub interactions_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub out_dir: PathBuf,
    pub min_interactions: usize,
    pub binary_graph_edges: bool,
    pub d_item: usize,
    pub d_attr: usize,
    pub gnn_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub proj_bias: bool,
    pub lambda: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub contrastive_literal: bool,
    pub retrieval_k: usize,
    pub refine_m: usize,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub ground_attributes: bool,
    pub backend_kind: BackendKind,
    pub backend_url: String,
    pub max_tokens: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            catalog_path: PathBuf::from("catalog.jsonl"),
            interactions_path: PathBuf::from("interactions.jsonl"),
            checkpoint_path: PathBuf::from("model.ckpt"),
            out_dir: PathBuf::from("out"),
            min_interactions: 3,
            binary_graph_edges: false,
            d_item: 128,
            d_attr: 32,
            gnn_layers: 2,
            width: 64,
            heads: 2,
            blocks: 1,
            max_len: 50,
            proj_bias: true,
            lambda: 0.3,
            gamma: 0.3,
            epsilon: 0.1,
            rho: 0.3,
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 32,
            seed: 7,
            contrastive_literal: false,
            retrieval_k: 1,
            refine_m: 5,
            bm25_k1: crate::grounding::DEFAULT_K1,
            bm25_b: crate::grounding::DEFAULT_B,
            ground_attributes: false,
            backend_kind: BackendKind::Mock,
            backend_url: String::new(),
            max_tokens: 64,
        }
    }
}

macro_rules! keys {
    ($($key:literal => $field:ident : $kind:tt),+ $(,)?) => {
        fn apply(cfg: &mut Config, key: &str, value: &str) -> Result<(), ConfigError> {
            match key {
                $($key => { cfg.$field = parse_value!($kind, key, value)?; Ok(()) })+
                _ => Err(ConfigError::UnknownKey(key.to_string())),
            }
        }

        fn render(cfg: &Config) -> String {
            let mut out = String::new();
            $(out.push_str(&format!("{} = {}\n", $key, render_value!($kind, &cfg.$field)));)+
            out
        }
    };
}

macro_rules! parse_value {
    (path, $key:expr, $value:expr) => { Ok::<PathBuf, ConfigError>(PathBuf::from($value)) };
    (string, $key:expr, $value:expr) => { Ok::<String, ConfigError>($value.to_string()) };
    (usize, $key:expr, $value:expr) => {
        $value.parse::<usize>().map_err(|e| ConfigError::BadValue {
            key: $key.to_string(), value: $value.to_string(), message: e.to_string(),
        })
    };
    (u64, $key:expr, $value:expr) => {
        $value.parse::<u64>().map_err(|e| ConfigError::BadValue {
            key: $key.to_string(), value: $value.to_string(), message: e.to_string(),
        })
    };
    (f64, $key:expr, $value:expr) => {
        $value.parse::<f64>().map_err(|e| ConfigError::BadValue {
            key: $key.to_string(), value: $value.to_string(), message: e.to_string(),
        })
    };
    (bool, $key:expr, $value:expr) => {
        $value.parse::<bool>().map_err(|e| ConfigError::BadValue {
            key: $key.to_string(), value: $value.to_string(), message: e.to_string(),
        })
    };
    (backend, $key:expr, $value:expr) => {
        match $value {
            "mock" => Ok(BackendKind::Mock),
            "http" => Ok(BackendKind::Http),
            "none" => Ok(BackendKind::None),
            other => Err(ConfigError::BadValue {
                key: $key.to_string(),
                value: other.to_string(),
                message: "expected mock, http, or none".to_string(),
            }),
        }
    };
}

macro_rules! render_value {
    (path, $v:expr) => { $v.display().to_string() };
    (string, $v:expr) => { $v.to_string() };
    (usize, $v:expr) => { $v.to_string() };
    (u64, $v:expr) => { $v.to_string() };
    (f64, $v:expr) => { format!("{}", $v) };
    (bool, $v:expr) => { $v.to_string() };
    (backend, $v:expr) => { $v.to_string() };
}

keys! {
    "paths.catalog" => catalog_path: path,
    "paths.interactions" => interactions_path: path,
    "paths.checkpoint" => checkpoint_path: path,
    "paths.out_dir" => out_dir: path,
    "data.min_interactions" => min_interactions: usize,
    "graphs.binary_edges" => binary_graph_edges: bool,
    "dims.d" => d_item: usize,
    "dims.d_a" => d_attr: usize,
    "gnn.layers" => gnn_layers: usize,
    "model.width" => width: usize,
    "model.heads" => heads: usize,
    "model.blocks" => blocks: usize,
    "model.max_len" => max_len: usize,
    "model.proj_bias" => proj_bias: bool,
    "train.lambda" => lambda: f64,
    "train.gamma" => gamma: f64,
    "train.epsilon" => epsilon: f64,
    "train.rho" => rho: f64,
    "train.lr" => learning_rate: f64,
    "train.epochs" => epochs: usize,
    "train.batch" => batch_size: usize,
    "train.seed" => seed: u64,
    "train.contrastive_literal" => contrastive_literal: bool,
    "retrieval.k" => retrieval_k: usize,
    "refine.m" => refine_m: usize,
    "ground.k1" => bm25_k1: f64,
    "ground.b" => bm25_b: f64,
    "ground.attributes" => ground_attributes: bool,
    "backend.kind" => backend_kind: backend,
    "backend.url" => backend_url: string,
    "backend.max_tokens" => max_tokens: usize,
}

impl Config {
    /// Parses a config file and applies it over the defaults.
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let body = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Config::default();
        cfg.apply_text(&body)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, body: &str) -> Result<(), ConfigError> {
        for (no, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed { line: no + 1, text: raw.to_string() });
            };
            apply(self, key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override (the CLI strips the leading `--`).
    pub fn apply_override(&mut self, pair: &str) -> Result<(), ConfigError> {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(ConfigError::Malformed { line: 0, text: pair.to_string() });
        };
        apply(self, key.trim(), value.trim())
    }

    /// Renders every key in declaration order; `load(save(c)) == c`.
    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, render(self))
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })
    }

    pub fn to_text(&self) -> String {
        render(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |key: &str, message: &str| {
            Err(ConfigError::Invalid { key: key.to_string(), message: message.to_string() })
        };
        for (key, v) in [
            ("train.lambda", self.lambda),
            ("train.gamma", self.gamma),
            ("train.epsilon", self.epsilon),
            ("train.rho", self.rho),
            ("train.lr", self.learning_rate),
            ("ground.k1", self.bm25_k1),
            ("ground.b", self.bm25_b),
        ] {
            if !v.is_finite() {
                return err(key, "must be finite");
            }
            if v < 0.0 {
                return err(key, "must be non-negative");
            }
        }
        if self.rho > 1.0 {
            return err("train.rho", "is a probability (at most 1)");
        }
        if self.bm25_b > 1.0 {
            return err("ground.b", "must be at most 1");
        }
        for (key, v) in [
            ("dims.d", self.d_item),
            ("dims.d_a", self.d_attr),
            ("gnn.layers", self.gnn_layers),
            ("model.width", self.width),
            ("model.heads", self.heads),
            ("model.blocks", self.blocks),
            ("model.max_len", self.max_len),
            ("refine.m", self.refine_m),
            ("data.min_interactions", self.min_interactions),
            ("backend.max_tokens", self.max_tokens),
        ] {
            if v == 0 {
                return err(key, "must be positive");
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return err("model.heads", "must divide model.width");
        }
        if self.backend_kind == BackendKind::Http && self.backend_url.is_empty() {
            return err("backend.url", "required for the http backend");
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            d_attr: self.d_attr,
            d_item: self.d_item,
            width: self.width,
            heads: self.heads,
            blocks: self.blocks,
            max_len: self.max_len,
            layers: self.gnn_layers,
            proj_bias: self.proj_bias,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            gamma: self.gamma,
            epsilon: self.epsilon,
            rho: self.rho,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            contrastive_literal: self.contrastive_literal,
        }
    }

    /// Known keys, for error messages.
    pub fn known_keys() -> BTreeSet<String> {
        render(&Config::default())
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, _)| k.to_string()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_shipped_hyperparameters() {
        let c = Config::default();
        assert_eq!(c.d_item, 128);
        assert_eq!(c.d_attr, 32);
        assert_eq!(c.gnn_layers, 2);
        assert_eq!(c.lambda, 0.3);
        assert_eq!(c.gamma, 0.3);
        assert_eq!(c.epsilon, 0.1);
        assert_eq!(c.rho, 0.3);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.retrieval_k, 1);
        assert_eq!(c.refine_m, 5);
        assert_eq!(c.bm25_k1, 1.2);
        assert_eq!(c.bm25_b, 0.75);
        c.validate().unwrap();
    }

    #[test]
    fn roundtrip_through_save_and_load() {
        let c = Config {
            lambda: 0.45,
            epochs: 3,
            backend_kind: BackendKind::None,
            catalog_path: PathBuf::from("data/cat.jsonl"),
            ..Config::default()
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        c.save(f.path()).unwrap();
        let back = Config::load(f.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parses_comments_and_blank_lines() {
        let mut c = Config::default();
        c.apply_text("# a comment\n\ntrain.lambda = 0.5 # trailing\n").unwrap();
        assert_eq!(c.lambda, 0.5);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = Config::default();
        assert!(matches!(c.apply_text("nope.key = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.apply_text("train.lambda = abc"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(c.apply_text("train.lambda 0.5"), Err(ConfigError::Malformed { line: 1, .. })));
    }

    #[test]
    fn validation_rejects_bad_numbers() {
        let c = Config { lambda: -0.1, ..Config::default() };
        assert!(matches!(c.validate(), Err(ConfigError::Invalid { .. })));
        let c = Config { rho: 1.5, ..Config::default() };
        assert!(c.validate().is_err());
        let c = Config { learning_rate: f64::NAN, ..Config::default() };
        assert!(c.validate().is_err());
        let c = Config { heads: 3, ..Config::default() }; // does not divide 64
        assert!(c.validate().is_err());
        let c = Config { backend_kind: BackendKind::Http, ..Config::default() };
        assert!(c.validate().is_err(), "http backend needs a url");
    }

    #[test]
    fn overrides_propagate() {
        let mut c = Config::default();
        c.apply_override("train.lambda=0").unwrap();
        assert_eq!(c.lambda, 0.0);
        assert_eq!(c.train_config().lambda, 0.0);
        c.apply_override("backend.kind=none").unwrap();
        assert_eq!(c.backend_kind, BackendKind::None);
        assert!(c.apply_override("no-equals-sign").is_err());
    }
}
