//! Settings merged from flags, `CARIMORPH_*` environment variables and an
//! optional TOML file, in that order of precedence.
//!
//! ```toml
//! alpha1 = 0.01
//! alpha2 = 1.0
//! max_iters = 50
//! tolerance = 1e-6
//! silhouette_update = true
//! components = 500
//! seed = 0
//! workers = 4
//! ```

use std::path::Path;

use carimorph::io::read_string;
use carimorph::FitConfig;
use serde::Deserialize;

use crate::CliError;

/// Contents of the settings file; every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub max_iters: Option<usize>,
    pub tolerance: Option<f64>,
    pub silhouette_update: Option<bool>,
    pub components: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::validation(format!("config file: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                if !p.exists() {
                    return Err(CliError::validation(format!("config file {} does not exist", p.display())));
                }
                Self::parse(&read_string(p)?)
            }
        }
    }
}

/// Values after precedence has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub components: usize,
    pub seed: u64,
    pub workers: usize,
}

/// Per-setting overrides from flags or the environment (clap resolves those
/// two before this point).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub max_iters: Option<usize>,
    pub tolerance: Option<f64>,
    pub silhouette_update: Option<bool>,
    pub components: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn resolve(over: &Overrides, file: &FileConfig) -> Result<Self, CliError> {
        let d = FitConfig::default();
        let fit = FitConfig {
            alpha1: over.alpha1.or(file.alpha1).unwrap_or(d.alpha1),
            alpha2: over.alpha2.or(file.alpha2).unwrap_or(d.alpha2),
            max_outer_iters: over.max_iters.or(file.max_iters).unwrap_or(d.max_outer_iters),
            rel_energy_tol: over.tolerance.or(file.tolerance).unwrap_or(d.rel_energy_tol),
            update_silhouette: over
                .silhouette_update
                .or(file.silhouette_update)
                .unwrap_or(d.update_silhouette),
        };
        fit.validate().map_err(|e| CliError::validation(e.to_string()))?;
        let workers = over
            .workers
            .or(file.workers)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if workers == 0 {
            return Err(CliError::validation("workers must be at least 1"));
        }
        let components = over.components.or(file.components).unwrap_or(500);
        if components == 0 {
            return Err(CliError::validation("at least one principal component is required"));
        }
        Ok(Self {
            fit,
            components,
            seed: over.seed.or(file.seed).unwrap_or(0),
            workers,
        })
    }
}
