//! TOML configuration. Every key is optional; command-line flags override
//! the matching key.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use epistasis::interaction::Method;
use epistasis::screen_clean::DetectConfig;
use epistasis::simulation::{PhenotypeModel, Study};
use epistasis::study::StudyConfig;

use crate::InputError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub output: Option<PathBuf>,
    pub force: Option<bool>,
    pub workers: Option<usize>,
    pub simulate: SimulateSection,
    pub analyze: AnalyzeSection,
    pub detect: DetectConfig,
    pub study: StudySection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub study: Study,
    pub setting: u8,
    pub model: PhenotypeModel,
    pub r2: f64,
    pub coefficient: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            study: Study::Simplified,
            setting: 1,
            model: PhenotypeModel::WangPathway,
            r2: 0.7,
            coefficient: 2.0,
        }
    }
}

/// Dataset location: a directory with the standard file names, or
/// individual paths that take precedence.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub data: Option<PathBuf>,
    pub genotypes: Option<PathBuf>,
    pub gene_map: Option<PathBuf>,
    pub phenotype: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub study: Study,
    pub settings: Vec<u8>,
    pub models: Vec<PhenotypeModel>,
    pub methods: Vec<Method>,
    pub r2_grid: Vec<f64>,
    pub iterations: usize,
    pub coefficient: f64,
}

impl Default for StudySection {
    fn default() -> Self {
        let d = StudyConfig::default();
        StudySection {
            study: d.study,
            settings: d.settings,
            models: d.models,
            methods: d.methods,
            r2_grid: d.r2_grid,
            iterations: d.iterations,
            coefficient: d.coefficient,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Directory of replicate JSON files; defaults to `<output>/replicates`.
    pub replicates: Option<PathBuf>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, InputError> {
        let text = std::fs::read_to_string(path).map_err(|e| InputError(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))
    }

    pub fn study_config(&self, seed: u64) -> StudyConfig {
        let s = &self.study;
        StudyConfig {
            study: s.study,
            settings: s.settings.clone(),
            models: s.models.clone(),
            methods: s.methods.clone(),
            r2_grid: s.r2_grid.clone(),
            iterations: s.iterations,
            seed,
            coefficient: s.coefficient,
            detect: self.detect.clone(),
        }
    }
}
