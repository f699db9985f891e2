//! TOML run configuration. Every field has a default, so an empty file (or
//! none at all) is valid; command-line flags override the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vrel::candidates::CandidateConfig;
use vrel::eval::EvalConfig;
use vrel::features::{DEFAULT_GMM_COMPONENTS, DEFAULT_PCA_DIM};
use vrel::gmm::GmmConfig;
use vrel::scoring::{PredictionConfig, WeightGrid};
use vrel::synth::PlantedBagsConfig;
use vrel::train_full::DEFAULT_LAMBDA;
use vrel::weak::FwConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gmm_components: usize,
    pub gmm: GmmConfig,
    pub pca_dim: usize,
    pub candidates: CandidateConfig,
    /// Detections are already filtered (e.g. shared detector output):
    /// every detection of an image becomes a candidate.
    pub prefiltered: bool,
    pub lambda: f64,
    /// Fraction of bag-free pairs clamped to the no-relation class during
    /// training; zero disables the class.
    pub negative_sampling_rate: f64,
    pub frank_wolfe: FwConfig,
    pub prediction: PredictionConfig,
    pub eval: EvalConfig,
    pub grid: WeightGrid,
    pub synth: PlantedBagsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            gmm_components: DEFAULT_GMM_COMPONENTS,
            gmm: GmmConfig::default(),
            pca_dim: DEFAULT_PCA_DIM,
            candidates: CandidateConfig::default(),
            prefiltered: false,
            lambda: DEFAULT_LAMBDA,
            negative_sampling_rate: 0.5,
            frank_wolfe: FwConfig::default(),
            prediction: PredictionConfig::default(),
            eval: EvalConfig::default(),
            grid: WeightGrid::default(),
            synth: PlantedBagsConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Pushes the global seed into every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gmm.seed = seed;
        self.frank_wolfe.seed = seed;
        self.synth.seed = seed;
        self
    }
}
