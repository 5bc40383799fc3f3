//! The two incremental KNN models driven by caregiver labels.
//!
//! The pre-model maps a registration profile to a plan template. The
//! post-model maps profile plus recent performance to a [`UserType`].

mod features;
mod knn;

pub use features::{encode_performance, encode_profile, FeatureVector, Schema, EMOTION_WINDOW};
pub use knn::{
    distance, fit_normalizer, knn_predict, ImlError, KnnModel, LabelSource, LabeledInstance,
    ModelParams, NormStats, NumericRange, Prediction, PredictionStatus, MODEL_EXPORT_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::adherence::ComplianceWindow;
use crate::domain::{
    validate_profile, Education, Gender, ProfileInput, UserProfile, UserType, Vocabulary,
};
use crate::ids::UserId;

pub const PRE_SCHEMA_ID: &str = "pre-profile-v1";
pub const POST_SCHEMA_ID: &str = "post-performance-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImlConfig {
    pub pre: ModelParams,
    pub post: ModelParams,
    pub default_template: String,
    pub default_type: UserType,
}

impl Default for ImlConfig {
    fn default() -> Self {
        ImlConfig {
            pre: ModelParams::default(),
            post: ModelParams::default(),
            default_template: "baseline-v1".into(),
            default_type: UserType::Neutral,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Pre,
    Post,
}

fn schema_probe() -> UserProfile {
    let raw = ProfileInput {
        display_name: String::new(),
        age: 40,
        gender: Gender::Other,
        height_m: 1.7,
        weight_kg: 70.0,
        education: Education::Primary,
        health_condition: "none".into(),
        preferred_activities: Default::default(),
        preferred_foods: Default::default(),
        resources: Default::default(),
    };
    let mut vocab = Vocabulary::default();
    vocab.health_conditions.insert("none".into());
    validate_profile(UserId(0), &raw, &vocab).expect("probe profile is valid")
}

pub fn profile_schema() -> Schema {
    encode_profile(&schema_probe()).schema()
}

pub fn performance_schema() -> Schema {
    let probe = schema_probe();
    let window = ComplianceWindow::build(
        probe.user_id,
        chrono::NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
        1,
        &[],
        [],
    );
    encode_performance(&probe, &window, &[]).schema()
}

/// Both models, versioned together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub pre: KnnModel,
    pub post: KnnModel,
}

impl ModelRegistry {
    pub fn new(config: &ImlConfig) -> Result<Self, ImlError> {
        Ok(ModelRegistry {
            pre: KnnModel::new(
                PRE_SCHEMA_ID,
                profile_schema(),
                &config.pre,
                &config.default_template,
            )?,
            post: KnnModel::new(
                POST_SCHEMA_ID,
                performance_schema(),
                &config.post,
                config.default_type.as_str(),
            )?,
        })
    }

    pub fn model(&self, kind: ModelKind) -> &KnnModel {
        match kind {
            ModelKind::Pre => &self.pre,
            ModelKind::Post => &self.post,
        }
    }

    pub fn model_mut(&mut self, kind: ModelKind) -> &mut KnnModel {
        match kind {
            ModelKind::Pre => &mut self.pre,
            ModelKind::Post => &mut self.post,
        }
    }
}

/// Suggested plan template for a (new) user.
pub fn pre_predict(
    registry: &ModelRegistry,
    profile: &UserProfile,
) -> Result<Prediction, ImlError> {
    registry.pre.predict(&encode_profile(profile))
}

/// User type from already-encoded performance features.
pub fn post_predict(
    registry: &ModelRegistry,
    features: &FeatureVector,
) -> Result<Prediction, ImlError> {
    registry.post.predict(features)
}
