use std::path::{Path, PathBuf};

use dgcrn_core::config::validate_horizons;
use dgcrn_core::data::{read_speed, synth_generate, RoadNetwork, SpeedSeries};
use dgcrn_core::graph::{build_adjacency, read_distance_csv, StaticGraph};
use dgcrn_core::numerics::Tensor;
use dgcrn_core::{Config, Error, Result};

use crate::{Common, Precision};

pub const THREADS_VAR: &str = "DGCRN_THREADS";

/// Config file (or defaults) with command-line overrides applied, plus the
/// directory relative data paths resolve against.
pub fn resolve_config(common: &Common) -> Result<(Config, Option<PathBuf>)> {
    let (mut cfg, dir) = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Config(format!("config file {} not found", path.display())));
            }
            let dir = path.parent().map(Path::to_path_buf);
            (Config::load(path)?, dir)
        }
        None => (Config::default(), None),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for a in &common.ablation {
        a.apply(&mut cfg);
    }
    if let Some(h) = &common.horizons {
        cfg.eval.horizons = h.clone();
    }
    if common.precision == Precision::F32 {
        cfg.train.f32_params = true;
    }
    cfg.validate()?;
    validate_horizons(&cfg.eval.horizons, cfg.model.output_len)?;
    Ok((cfg, dir))
}

/// Worker-thread cap from the environment; 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_VAR}={v:?} is not a positive integer"))),
        },
    }
}

pub(crate) fn resolve_path(dir: &Option<PathBuf>, p: &Path) -> PathBuf {
    match dir {
        Some(d) if p.is_relative() => d.join(p),
        _ => p.to_path_buf(),
    }
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Config(format!("{what} file {} not found", path.display())))
    }
}

/// Speed series and distance matrix named by the config, or the synthetic
/// pair when no speed file is set.
pub(crate) struct Inputs {
    pub series: SpeedSeries,
    pub distances: Tensor,
    pub network: Option<RoadNetwork>,
    pub files: Vec<PathBuf>,
}

pub(crate) fn load_inputs(cfg: &Config, dir: &Option<PathBuf>) -> Result<Inputs> {
    let data = &cfg.data;
    match &data.speed {
        None => {
            let synth = &data.synth;
            let net = RoadNetwork::generate(synth.n_nodes, synth.seed)?;
            let series = synth_generate(&net, synth, synth.seed)?;
            let (distances, files) = match &data.distances {
                Some(p) => {
                    let p = existing(resolve_path(dir, p), "distance")?;
                    (read_distance_csv(&p, Some(synth.n_nodes))?, vec![p])
                }
                None => (net.distances(), Vec::new()),
            };
            Ok(Inputs {
                series,
                distances,
                network: Some(net),
                files,
            })
        }
        Some(p) => {
            let speed = existing(resolve_path(dir, p), "speed")?;
            let series = read_speed(&speed, data.sentinel)?;
            let dist = data
                .distances
                .as_ref()
                .ok_or_else(|| Error::Config("data.distances is required when data.speed is set".into()))?;
            let dist = existing(resolve_path(dir, dist), "distance")?;
            let distances = read_distance_csv(&dist, Some(series.n_nodes))?;
            Ok(Inputs {
                series,
                distances,
                network: None,
                files: vec![speed, dist],
            })
        }
    }
}

pub(crate) fn build_graph(cfg: &Config, distances: &Tensor) -> Result<StaticGraph> {
    build_adjacency(distances, cfg.graph.kappa)
}
