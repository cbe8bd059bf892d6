//! Run configuration: one TOML document with `model`, `train`, `data`,
//! `graph` and `eval` tables. Every key is optional and falls back to the
//! value in [`Config::default`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Sentinel, SplitPolicy, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_HORIZONS;
use crate::generator::{FilterMode, HyperKind};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Speed file (CSV or binary); synthetic data is generated when absent.
    pub speed: Option<PathBuf>,
    /// Distance CSV `from,to,distance`; synthetic network when absent.
    pub distances: Option<PathBuf>,
    pub sentinel: Sentinel,
    pub split: SplitPolicy,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub kappa: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { kappa: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: DEFAULT_HORIZONS.to_vec(),
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub graph: GraphConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            graph: GraphConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.graph.kappa > 0.0 && self.graph.kappa < 1.0) {
            return Err(Error::Config(format!("graph.kappa must lie in (0, 1), got {}", self.graph.kappa)));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be >= 1".into()));
        }
        validate_horizons(&self.eval.horizons, self.model.output_len)
    }

    /// Every leaf key with its default, as `section.key = value` lines.
    pub fn documented_defaults() -> Vec<(String, String)> {
        let value = toml::Value::try_from(Config::default()).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        // Unset paths are skipped by the serializer.
        for key in ["data.speed", "data.distances"] {
            out.push((key.to_string(), "unset (synthetic)".to_string()));
        }
        out.sort();
        out
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

pub fn validate_horizons(horizons: &[usize], q: usize) -> Result<()> {
    if horizons.is_empty() {
        return Err(Error::Config("at least one evaluation horizon is required".into()));
    }
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > q) {
        return Err(Error::Config(format!("horizon {h} outside 1..={q}")));
    }
    Ok(())
}

/// Component ablations, named after the variants they reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// No dynamic graph in the recurrent convolutions.
    NoDynamicGraph,
    /// No pre-defined graph in the recurrent convolutions.
    NoPredefinedGraph,
    /// Hyper-network reduced to one affine map.
    NoHyperNet,
    /// Filters frozen to one: a step-invariant adaptive graph.
    DynamicToStatic,
    /// No curriculum over the decoder horizon.
    NoCurriculum,
    /// Filters act on embeddings by matrix product.
    HyperNetMatMul,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoDynamicGraph,
        Ablation::NoPredefinedGraph,
        Ablation::NoHyperNet,
        Ablation::DynamicToStatic,
        Ablation::NoCurriculum,
        Ablation::HyperNetMatMul,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoDynamicGraph => "w/o-dg",
            Ablation::NoPredefinedGraph => "w/o-preA",
            Ablation::NoHyperNet => "w/o-hypernet",
            Ablation::DynamicToStatic => "dg2sg",
            Ablation::NoCurriculum => "w/o-cl",
            Ablation::HyperNetMatMul => "hypernet-mul2matmul",
        }
    }

    pub fn apply(self, cfg: &mut Config) {
        match self {
            Ablation::NoDynamicGraph => cfg.model.beta_mix = 0.0,
            Ablation::NoPredefinedGraph => cfg.model.gamma_mix = 0.0,
            Ablation::NoHyperNet => cfg.model.hyper = HyperKind::Linear,
            Ablation::DynamicToStatic => cfg.model.filter = FilterMode::Constant,
            Ablation::NoCurriculum => cfg.train.curriculum = false,
            Ablation::HyperNetMatMul => cfg.model.filter = FilterMode::MatMul,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // Accept `w/o-dg`, `w/o dg` and `wo-dg` alike.
        let key = s.trim().to_ascii_lowercase().replace(' ', "-").replace("w/o", "wo");
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().to_ascii_lowercase().replace("w/o", "wo") == key)
            .ok_or_else(|| {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(Config::from_toml("").unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("[model]\nhidden = 3\n").is_err());
        let cfg = Config::from_toml("seed = 9\n[model]\nhidden_dim = 8\n").unwrap();
        assert_eq!((cfg.seed, cfg.model.hidden_dim), (9, 8));
    }

    #[test]
    fn defaults_listing_covers_published_values() {
        let keys: std::collections::HashMap<_, _> = Config::documented_defaults().into_iter().collect();
        assert_eq!(keys["train.learning_rate"], "0.001");
        assert_eq!(keys["train.batch_size"], "64");
        assert_eq!(keys["model.hidden_dim"], "64");
        assert_eq!(keys["model.emb_dim"], "40");
        assert_eq!(keys["model.alpha_mix"], "0.05");
        assert_eq!(keys["model.beta_mix"], "0.95");
        assert_eq!(keys["graph.kappa"], "0.1");
    }

    #[test]
    fn ablation_names_parse_and_apply() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("w/o dg".parse::<Ablation>().unwrap(), Ablation::NoDynamicGraph);
        assert!("nope".parse::<Ablation>().is_err());
        let mut cfg = Config::default();
        Ablation::NoDynamicGraph.apply(&mut cfg);
        assert_eq!(cfg.model.beta_mix, 0.0);
        Ablation::NoCurriculum.apply(&mut cfg);
        assert!(!cfg.train.curriculum);
    }

    #[test]
    fn horizons_must_fit_the_decoder() {
        assert!(validate_horizons(&[3, 6, 12], 12).is_ok());
        assert!(validate_horizons(&[13], 12).is_err());
        assert!(validate_horizons(&[], 12).is_err());
    }
}
