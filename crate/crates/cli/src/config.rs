//! Run configuration: a preset, overridden by a TOML file, overridden by
//! command-line flags.

use std::path::{Path, PathBuf};

use flatvae::nets::Architecture;
use flatvae::riemann::{DISTANCE_STENCIL, GRAPH_NEIGHBOURS, GRAPH_NODES, PATH_SEGMENTS};
use flatvae::flatloss::ANALYSIS_STEP;
use flatvae::trainer::{preset, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated on the fly, or read from `path` if set.
    Pendulum,
    /// IDX files in the directory `path`.
    Mnist,
    /// Delimited text at `path`.
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub count: usize,
    pub noise_std: f64,
    pub delimiter: char,
    /// Header name of a column to keep as metadata. Defaults to a trailing
    /// column whose name is not of the form `x<index>`.
    pub metadata_column: Option<String>,
    pub threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Pendulum,
            path: None,
            count: 15_000,
            noise_std: 0.05,
            delimiter: ',',
            metadata_column: None,
            threshold: flatvae::data::MNIST_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Prior samples for condition-number and MF statistics.
    pub samples: usize,
    /// Endpoint pairs for the ratio table and smoothness.
    pub pairs: usize,
    pub graph_nodes: usize,
    pub graph_neighbours: usize,
    pub segments: usize,
    /// Grid side for field exports; 0 disables them.
    pub grid_resolution: usize,
    /// Distance-field centres in latent coordinates.
    pub centres: Vec<Vec<f64>>,
    pub stencil_radius: usize,
    pub jacobian_step: f64,
    /// Bounding-box margin as a fraction of the encoded extent.
    pub margin: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            samples: 1000,
            pairs: 100,
            graph_nodes: GRAPH_NODES,
            graph_neighbours: GRAPH_NEIGHBOURS,
            segments: PATH_SEGMENTS,
            grid_resolution: 0,
            centres: Vec::new(),
            stencil_radius: DISTANCE_STENCIL,
            jacobian_step: ANALYSIS_STEP,
            margin: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    /// Seeds data generation, initialisation, batching and analysis.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self, CliError> {
        let p = preset(name)?;
        Ok(RunConfig {
            preset: name.to_string(),
            seed: p.train.seed,
            out: PathBuf::from("."),
            data: DataConfig::default(),
            architecture: p.architecture,
            train: p.train,
            analysis: AnalysisConfig::default(),
        })
    }

    /// Resolves `preset ← file ← preset_override`. The preset named in the
    /// file (or `pendulum`) supplies every key the file leaves out.
    pub fn resolve(file: Option<&Path>, preset_override: Option<&str>) -> Result<Self, CliError> {
        let user = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        let name = match (preset_override, user.get("preset")) {
            (Some(p), _) => p.to_string(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(other)) => {
                return Err(CliError::Usage(format!("config key `preset` must be a string, got {other}")))
            }
            (None, None) => "pendulum".to_string(),
        };
        let base = toml::Table::try_from(RunConfig::from_preset(&name)?)
            .map_err(|e| CliError::Usage(format!("preset {name}: {e}")))?;
        let mut merged = base;
        merge(&mut merged, user);
        merged.insert("preset".into(), toml::Value::String(name));
        let config: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
        config.train.validate()?;
        Ok(config)
    }

    /// Sets the single run seed everywhere it is consumed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }
}

/// Recursively overlays `over` onto `base`; tables merge, other values replace.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
