//! Service configuration and the caregiver-curated catalog (activity pool,
//! plan templates, vocabularies, bot replies).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adherence::AdherenceConfig;
use crate::bot::ResponseCorpus;
use crate::domain::{ActivityPool, Vocabulary, DEFAULT_SLOTS_PER_DAY};
use crate::iml::{ImlConfig, ModelRegistry};
use crate::planning::{PlanTemplate, PlanningConfig};
use crate::scheduling::TriggerRules;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::Invalid(_) => "ConfigInvalid",
            ConfigError::Parse { .. } => "ConfigInvalid",
            ConfigError::Io { .. } => "StorageFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingOrder {
    /// Lowest compliance first.
    #[default]
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoachConfig {
    pub slots_per_day: u8,
    /// Root of every seeded random choice the service makes.
    pub seed: u64,
    pub ranking_order: RankingOrder,
    /// fsync after every appended event. Batch jobs may turn this off and
    /// rely on the final flush.
    pub sync_every_append: bool,
    pub adherence: AdherenceConfig,
    pub planning: PlanningConfig,
    pub iml: ImlConfig,
    pub triggers: TriggerRules,
}

impl Default for CoachConfig {
    fn default() -> Self {
        CoachConfig {
            slots_per_day: DEFAULT_SLOTS_PER_DAY,
            seed: 0,
            ranking_order: RankingOrder::Asc,
            sync_every_append: true,
            adherence: AdherenceConfig::default(),
            planning: PlanningConfig::default(),
            iml: ImlConfig::default(),
            triggers: TriggerRules::default(),
        }
    }
}

fn unit(name: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!(
            "{name} must be in [0, 1], got {v}"
        )))
    }
}

impl CoachConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.slots_per_day == 0 {
            return Err(ConfigError::Invalid(
                "slots_per_day must be at least 1".into(),
            ));
        }
        let a = &self.adherence;
        unit("adherence.active_threshold", a.active_threshold)?;
        unit("adherence.neutral_threshold", a.neutral_threshold)?;
        if a.neutral_threshold > a.active_threshold {
            return Err(ConfigError::Invalid(
                "adherence.neutral_threshold exceeds active_threshold".into(),
            ));
        }
        if !(1..=28).contains(&a.window_days) {
            return Err(ConfigError::Invalid(format!(
                "adherence.window_days must be in 1..=28, got {}",
                a.window_days
            )));
        }
        if !(a.trend_band >= 0.0) {
            return Err(ConfigError::Invalid(
                "adherence.trend_band must be >= 0".into(),
            ));
        }
        unit("planning.frequent_share", self.planning.frequent_share)?;
        unit("planning.epsilon", self.planning.epsilon)?;
        unit(
            "planning.cluster_threshold",
            self.planning.cluster_threshold,
        )?;
        self.triggers
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        ModelRegistry::new(&self.iml).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        let config: CoachConfig = serde_json::from_str(json).map_err(|e| ConfigError::Parse {
            path: "<json>".into(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: CoachConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<toml>".into(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a `.toml` or `.json` file, chosen by extension.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        let parsed = if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        };
        parsed.map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    /// Applies `COACHME_K`, `COACHME_EPSILON`, `COACHME_ACTIVE_THRESHOLD`,
    /// `COACHME_NEUTRAL_THRESHOLD` and `COACHME_SEED` from `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(name: &str, raw: String) -> Result<T, ConfigError> {
            raw.trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{name}={raw:?} does not parse")))
        }
        if let Some(raw) = var("COACHME_K") {
            let k: usize = parse("COACHME_K", raw)?;
            self.iml.pre.k = k;
            self.iml.post.k = k;
        }
        if let Some(raw) = var("COACHME_EPSILON") {
            self.planning.epsilon = parse("COACHME_EPSILON", raw)?;
        }
        if let Some(raw) = var("COACHME_ACTIVE_THRESHOLD") {
            self.adherence.active_threshold = parse("COACHME_ACTIVE_THRESHOLD", raw)?;
        }
        if let Some(raw) = var("COACHME_NEUTRAL_THRESHOLD") {
            self.adherence.neutral_threshold = parse("COACHME_NEUTRAL_THRESHOLD", raw)?;
        }
        if let Some(raw) = var("COACHME_SEED") {
            self.seed = parse("COACHME_SEED", raw)?;
        }
        self.validate()
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &str, text: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_string(),
        message: e.to_string(),
    })
}

const STARTER_POOL: &str = include_str!("../data/pool.json");
const STARTER_TEMPLATES: &str = include_str!("../data/templates.json");

/// Static content the caregiver curates outside the event log.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub pool: ActivityPool,
    pub templates: BTreeMap<String, PlanTemplate>,
    pub vocabulary: Vocabulary,
    pub corpus: ResponseCorpus,
}

impl Catalog {
    pub fn new(
        pool: ActivityPool,
        templates: impl IntoIterator<Item = PlanTemplate>,
        vocabulary: Vocabulary,
        corpus: ResponseCorpus,
    ) -> Result<Self, ConfigError> {
        let mut by_id = BTreeMap::new();
        for t in templates {
            if t.template_id.is_empty() {
                return Err(ConfigError::Invalid("template with empty id".into()));
            }
            let id = t.template_id.clone();
            if by_id.insert(id.clone(), t).is_some() {
                return Err(ConfigError::Invalid(format!("duplicate template {id}")));
            }
        }
        if pool.is_empty() {
            return Err(ConfigError::Invalid("activity pool is empty".into()));
        }
        Ok(Catalog {
            pool,
            templates: by_id,
            vocabulary,
            corpus,
        })
    }

    /// The bundled activity pool and templates with default vocabulary and
    /// replies.
    pub fn starter() -> Self {
        let pool = ActivityPool::from_json(STARTER_POOL).expect("bundled pool is valid");
        let templates: Vec<PlanTemplate> =
            serde_json::from_str(STARTER_TEMPLATES).expect("bundled templates are valid");
        Catalog::new(
            pool,
            templates,
            Vocabulary::default(),
            ResponseCorpus::default(),
        )
        .expect("bundled catalog is valid")
    }

    /// Loads `pool.json`, `templates.json`, `vocabulary.json` and
    /// `corpus.json` from `dir`; missing files fall back to the starter set.
    pub fn load_dir(dir: &Path) -> Result<Self, ConfigError> {
        let starter = Catalog::starter();
        let file = |name: &str| -> Result<Option<(String, String)>, ConfigError> {
            let path = dir.join(name);
            if path.exists() {
                Ok(Some((path.display().to_string(), read(&path)?)))
            } else {
                Ok(None)
            }
        };
        let pool = match file("pool.json")? {
            Some((path, text)) => {
                ActivityPool::from_json(&text).map_err(|e| ConfigError::Parse {
                    path,
                    message: e.to_string(),
                })?
            }
            None => starter.pool,
        };
        let templates: Vec<PlanTemplate> = match file("templates.json")? {
            Some((path, text)) => parse_json(&path, &text)?,
            None => starter.templates.into_values().collect(),
        };
        let vocabulary = match file("vocabulary.json")? {
            Some((path, text)) => parse_json(&path, &text)?,
            None => starter.vocabulary,
        };
        let corpus = match file("corpus.json")? {
            Some((path, text)) => parse_json(&path, &text)?,
            None => starter.corpus,
        };
        Catalog::new(pool, templates, vocabulary, corpus)
    }

    /// Checks every template fits `slots_per_day` and references only
    /// activity kinds present in the pool.
    pub fn validate_for(&self, config: &CoachConfig) -> Result<(), ConfigError> {
        for t in self.templates.values() {
            if t.slots_per_day() != config.slots_per_day {
                return Err(ConfigError::Invalid(format!(
                    "template {} has {} slots per day, expected {}",
                    t.template_id,
                    t.slots_per_day(),
                    config.slots_per_day
                )));
            }
        }
        if !self.templates.contains_key(&config.iml.default_template) {
            return Err(ConfigError::Invalid(format!(
                "default template {} is not in the catalog",
                config.iml.default_template
            )));
        }
        Ok(())
    }
}
