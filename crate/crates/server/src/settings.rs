//! Process settings: the core config file plus env overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use coachme_core::config::ConfigError;
use coachme_core::CoachConfig;

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone)]
pub struct Settings {
    pub core: CoachConfig,
    pub port: u16,
    pub data_dir: PathBuf,
    /// Catalog directory; the built-in starter catalog when absent.
    pub catalog_dir: Option<PathBuf>,
    /// Static caregiver bearer token; no auth when absent.
    pub token: Option<String>,
}

impl Settings {
    /// Reads `config` (JSON or TOML) if given, then applies `COACHME_*`
    /// overrides from `var`.
    pub fn load(
        config: Option<&Path>,
        var: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let mut core = match config {
            Some(path) => CoachConfig::load(path)?,
            None => CoachConfig::default(),
        };
        core.apply_env(&var)?;
        let port = match var("COACHME_PORT") {
            Some(raw) => raw
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("COACHME_PORT={raw:?}")))?,
            None => DEFAULT_PORT,
        };
        Ok(Settings {
            core,
            port,
            data_dir: var("COACHME_DATA_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("data")),
            catalog_dir: var("COACHME_CATALOG_DIR").map(PathBuf::from),
            token: var("COACHME_TOKEN").filter(|t| !t.is_empty()),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], self.port))
    }
}
