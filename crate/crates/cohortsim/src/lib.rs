//! Synthetic-cohort simulator for CoachMe.
//!
//! Simulated users talk to the service only through bot wire updates, and
//! the simulated caregiver only through the caregiver operations.

pub mod cohort;
pub mod experiment;

pub use cohort::{
    synth_cohort, synth_cohort_with, BehaviorParams, Cohort, LatentBehavior, SimUser, TypeMix,
};
pub use experiment::{run_cohort, run_experiment, ExperimentConfig, Outcome, Report};

use coachme_core::ServiceError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("bad type mix: {0}")]
    BadMix(String),
    #[error("invalid experiment config: {0}")]
    ConfigInvalid(String),
    #[error("simulation went off the rails: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::BadMix(_) => "BadMix",
            SimError::ConfigInvalid(_) => "ConfigInvalid",
            SimError::Inconsistent(_) => "Inconsistent",
            SimError::Service(e) => e.code(),
            SimError::Io(_) => "StorageFailure",
        }
    }
}

impl From<coachme_core::config::ConfigError> for SimError {
    fn from(e: coachme_core::config::ConfigError) -> Self {
        SimError::ConfigInvalid(e.to_string())
    }
}
