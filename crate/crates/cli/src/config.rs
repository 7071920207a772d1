//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use hipandas::degrade::{NoiseSpec, SpectralResponse};
use hipandas::nets::ArchConfig;
use hipandas::train::{AblationFlags, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::phantom::PhantomSpec;
use crate::CliError;

fn default_scale() -> usize {
    4
}

/// Phantom source, as an alternative to an HR cube file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub rank: usize,
    pub seed: u64,
}

impl From<PhantomConfig> for PhantomSpec {
    fn from(c: PhantomConfig) -> Self {
        PhantomSpec {
            height: c.height,
            width: c.width,
            bands: c.bands,
            rank: c.rank,
            seed: c.seed,
        }
    }
}

/// Pre-simulated observation files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPaths {
    pub n: PathBuf,
    pub p: PathBuf,
    pub q: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub noise: Vec<NoiseSpec>,
    #[serde(default = "full_only")]
    pub ablations: Vec<AblationFlags>,
}

fn full_only() -> Vec<AblationFlags> {
    vec![AblationFlags::default()]
}

/// One JSON document drives every command; command-line flags override keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Clean high-resolution cube (HICUBE).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<ObservationPaths>,
    #[serde(default = "default_scale")]
    pub scale: usize,
    /// Per-band PAN weights; the uniform average when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral_response: Option<SpectralResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Bands shown as red, green, blue in PNG previews.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preview_bands: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            hr: None,
            phantom: None,
            observation: None,
            scale: default_scale(),
            spectral_response: None,
            noise: None,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            preview_bands: None,
            grid: None,
            out: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.hr.as_mut() {
            fix(p);
        }
        if let Some(o) = self.observation.as_mut() {
            fix(&mut o.n);
            fix(&mut o.p);
            fix(&mut o.q);
        }
        if let Some(p) = self.out.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.scale < 2 {
            return Err(CliError::Validation(format!("scale must be >= 2, got {}", self.scale)));
        }
        if self.hr.is_some() && self.phantom.is_some() {
            return Err(CliError::Validation("give either `hr` or `phantom`, not both".into()));
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        self.train.validate()?;
        for p in self.referenced_files() {
            if !p.is_file() {
                return Err(CliError::Validation(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn referenced_files(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = self.hr.iter().map(PathBuf::as_path).collect();
        if let Some(o) = &self.observation {
            out.extend([o.n.as_path(), o.p.as_path(), o.q.as_path()]);
        }
        out
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
