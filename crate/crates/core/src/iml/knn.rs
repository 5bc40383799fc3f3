//! Instance-based classifier over mixed-type features.
//!
//! Distances are Gower-style: each field contributes a term in `[0, 1]`
//! (range-normalised absolute difference for numeric fields, mismatch for
//! categorical fields, Jaccard distance for tag sets) and the result is the
//! weighted mean of the terms.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::features::{FeatureVector, Schema};
use crate::ids::UserId;

pub const MODEL_EXPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ImlError {
    #[error("feature vector does not match the model schema")]
    SchemaMismatch,
    #[error("normalizer needs at least one instance")]
    EmptyTrainingSet,
    #[error("k must be odd and positive, got {0}")]
    InvalidK(usize),
    #[error("invalid field weights: {0}")]
    InvalidWeights(String),
    #[error("label must be nonempty")]
    EmptyLabel,
    #[error("numeric features must be finite")]
    NonFinite,
    #[error("model import: {0}")]
    Import(String),
}

impl ImlError {
    pub fn code(&self) -> &'static str {
        match self {
            ImlError::SchemaMismatch => "SchemaMismatch",
            ImlError::EmptyTrainingSet => "EmptyTrainingSet",
            ImlError::InvalidK(_) => "InvalidK",
            ImlError::InvalidWeights(_) => "InvalidWeights",
            ImlError::EmptyLabel => "EmptyLabel",
            ImlError::NonFinite => "NonFinite",
            ImlError::Import(_) => "Import",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl NumericRange {
    pub fn degenerate(&self) -> bool {
        self.min == self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub ranges: Vec<NumericRange>,
}

impl NormStats {
    fn seed(v: &FeatureVector) -> Self {
        NormStats {
            ranges: v
                .numeric
                .iter()
                .map(|(name, x)| NumericRange {
                    name: name.clone(),
                    min: *x,
                    max: *x,
                })
                .collect(),
        }
    }

    fn extend(&mut self, v: &FeatureVector) {
        for (r, (_, x)) in self.ranges.iter_mut().zip(&v.numeric) {
            r.min = r.min.min(*x);
            r.max = r.max.max(*x);
        }
    }

    pub fn degenerate_fields(&self) -> impl Iterator<Item = &str> {
        self.ranges
            .iter()
            .filter(|r| r.degenerate())
            .map(|r| r.name.as_str())
    }
}

/// Per-field min/max over a training set.
pub fn fit_normalizer<'a>(
    instances: impl IntoIterator<Item = &'a FeatureVector>,
) -> Result<NormStats, ImlError> {
    let mut iter = instances.into_iter();
    let first = iter.next().ok_or(ImlError::EmptyTrainingSet)?;
    let schema = first.schema();
    let mut norm = NormStats::seed(first);
    for v in iter {
        if !schema.matches(v) {
            return Err(ImlError::SchemaMismatch);
        }
        norm.extend(v);
    }
    Ok(norm)
}

fn jaccard_distance(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    1.0 - inter as f64 / union as f64
}

/// Assumes both vectors match the schema the normalizer and weights were
/// built for.
fn distance_unchecked(
    a: &FeatureVector,
    b: &FeatureVector,
    norm: &NormStats,
    weights: &[f64],
) -> f64 {
    let mut w = weights.iter();
    let mut num = 0.0;
    let mut den = 0.0;
    for (((_, x), (_, y)), r) in a.numeric.iter().zip(&b.numeric).zip(&norm.ranges) {
        let wi = *w.next().unwrap();
        let d = if r.degenerate() {
            0.0
        } else {
            ((x - y).abs() / (r.max - r.min)).clamp(0.0, 1.0)
        };
        num += wi * d;
        den += wi;
    }
    for ((_, x), (_, y)) in a.categorical.iter().zip(&b.categorical) {
        let wi = *w.next().unwrap();
        num += wi * if x == y { 0.0 } else { 1.0 };
        den += wi;
    }
    for ((_, x), (_, y)) in a.setvalued.iter().zip(&b.setvalued) {
        let wi = *w.next().unwrap();
        num += wi * jaccard_distance(x, y);
        den += wi;
    }
    num / den
}

/// Weighted mixed-type distance in `[0, 1]`.
///
/// `weights` is aligned with the schema's field order (numeric, categorical,
/// set-valued).
pub fn distance(
    a: &FeatureVector,
    b: &FeatureVector,
    norm: &NormStats,
    weights: &[f64],
) -> Result<f64, ImlError> {
    let schema = a.schema();
    if !schema.matches(b)
        || norm.ranges.len() != schema.numeric.len()
        || norm
            .ranges
            .iter()
            .zip(&schema.numeric)
            .any(|(r, n)| r.name != *n)
    {
        return Err(ImlError::SchemaMismatch);
    }
    check_weights(weights, schema.len())?;
    Ok(distance_unchecked(a, b, norm, weights))
}

fn check_weights(weights: &[f64], fields: usize) -> Result<(), ImlError> {
    if weights.len() != fields {
        return Err(ImlError::InvalidWeights(format!(
            "expected {fields} weights, got {}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(ImlError::InvalidWeights(
            "weights must be finite and >= 0".into(),
        ));
    }
    if !weights.iter().any(|w| *w > 0.0) {
        return Err(ImlError::InvalidWeights(
            "at least one weight must be > 0".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSource {
    CaregiverAssignment,
    CaregiverRefinement,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub instance_id: u64,
    pub features: FeatureVector,
    pub label: String,
    pub source: LabelSource,
    pub created_at: DateTime<Utc>,
    /// The user the instance describes, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<UserId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictionStatus {
    Ok,
    ColdStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub confidence: f64,
    pub neighbor_ids: Vec<u64>,
    pub status: PredictionStatus,
}

/// Model hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub k: usize,
    /// Per-field weight overrides by field name; unlisted fields weigh 1.0.
    pub weights: BTreeMap<String, f64>,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            k: 5,
            weights: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub schema_id: String,
    pub schema: Schema,
    pub k: usize,
    pub weights: Vec<f64>,
    pub default_label: String,
    pub version: u64,
    pub norm: Option<NormStats>,
    pub instances: Vec<LabeledInstance>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    schema_version: u32,
    #[serde(flatten)]
    model: KnnModel,
}

impl KnnModel {
    pub fn new(
        schema_id: &str,
        schema: Schema,
        params: &ModelParams,
        default_label: &str,
    ) -> Result<Self, ImlError> {
        if params.k == 0 || params.k.is_multiple_of(2) {
            return Err(ImlError::InvalidK(params.k));
        }
        if let Some(unknown) = params
            .weights
            .keys()
            .find(|name| !schema.field_names().any(|f| f == name.as_str()))
        {
            return Err(ImlError::InvalidWeights(format!("unknown field {unknown}")));
        }
        let weights: Vec<f64> = schema
            .field_names()
            .map(|f| params.weights.get(f).copied().unwrap_or(1.0))
            .collect();
        check_weights(&weights, schema.len())?;
        Ok(KnnModel {
            schema_id: schema_id.to_string(),
            schema,
            k: params.k,
            weights,
            default_label: default_label.to_string(),
            version: 0,
            norm: None,
            instances: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Appends a labelled instance and refits the normalizer. Returns the new
    /// instance id.
    pub fn add_labeled_instance(
        &mut self,
        features: FeatureVector,
        label: &str,
        source: LabelSource,
        created_at: DateTime<Utc>,
        subject: Option<UserId>,
    ) -> Result<u64, ImlError> {
        if !self.schema.matches(&features) {
            return Err(ImlError::SchemaMismatch);
        }
        if !features.is_finite() {
            return Err(ImlError::NonFinite);
        }
        if label.is_empty() {
            return Err(ImlError::EmptyLabel);
        }
        match &mut self.norm {
            Some(norm) => norm.extend(&features),
            None => self.norm = Some(NormStats::seed(&features)),
        }
        let instance_id = self.instances.len() as u64 + 1;
        self.instances.push(LabeledInstance {
            instance_id,
            features,
            label: label.to_string(),
            source,
            created_at,
            subject,
        });
        self.version += 1;
        Ok(instance_id)
    }

    /// Non-mutating variant of [`KnnModel::add_labeled_instance`]: returns the
    /// next model snapshot.
    pub fn with_instance(
        &self,
        features: FeatureVector,
        label: &str,
        source: LabelSource,
        created_at: DateTime<Utc>,
        subject: Option<UserId>,
    ) -> Result<KnnModel, ImlError> {
        let mut next = self.clone();
        next.add_labeled_instance(features, label, source, created_at, subject)?;
        Ok(next)
    }

    pub fn predict(&self, query: &FeatureVector) -> Result<Prediction, ImlError> {
        if !self.schema.matches(query) {
            return Err(ImlError::SchemaMismatch);
        }
        let Some(norm) = &self.norm else {
            return Ok(Prediction {
                label: self.default_label.clone(),
                confidence: 0.0,
                neighbor_ids: Vec::new(),
                status: PredictionStatus::ColdStart,
            });
        };

        let mut scored: Vec<(f64, u64, usize)> = self
            .instances
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                (
                    distance_unchecked(query, &inst.features, norm, &self.weights),
                    inst.instance_id,
                    i,
                )
            })
            .collect();
        let k = self.k.min(scored.len());
        let order =
            |a: &(f64, u64, usize), b: &(f64, u64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);

        // label -> (votes, rank of its nearest neighbour)
        let mut votes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for (rank, &(_, _, i)) in scored.iter().enumerate() {
            votes
                .entry(self.instances[i].label.as_str())
                .and_modify(|v| v.0 += 1)
                .or_insert((1, rank));
        }
        let (label, (count, _)) = votes
            .into_iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
            .expect("k >= 1");

        Ok(Prediction {
            label: label.to_string(),
            confidence: count as f64 / k as f64,
            neighbor_ids: scored.iter().map(|s| s.1).collect(),
            status: PredictionStatus::Ok,
        })
    }

    pub fn export_json(&self) -> String {
        serde_json::to_string(&ModelDoc {
            schema_version: MODEL_EXPORT_VERSION,
            model: self.clone(),
        })
        .expect("model serializes")
    }

    /// Parses and validates an exported model document.
    pub fn import_json(json: &str) -> Result<Self, ImlError> {
        let doc: ModelDoc =
            serde_json::from_str(json).map_err(|e| ImlError::Import(e.to_string()))?;
        if doc.schema_version != MODEL_EXPORT_VERSION {
            return Err(ImlError::Import(format!(
                "unsupported schema_version {}",
                doc.schema_version
            )));
        }
        let m = doc.model;
        if m.k == 0 || m.k.is_multiple_of(2) {
            return Err(ImlError::InvalidK(m.k));
        }
        check_weights(&m.weights, m.schema.len())?;
        for (i, inst) in m.instances.iter().enumerate() {
            if inst.instance_id != i as u64 + 1 {
                return Err(ImlError::Import("instance ids must be 1..=n".into()));
            }
            if !m.schema.matches(&inst.features) {
                return Err(ImlError::SchemaMismatch);
            }
        }
        let refit = if m.instances.is_empty() {
            None
        } else {
            Some(fit_normalizer(m.instances.iter().map(|i| &i.features))?)
        };
        if refit != m.norm {
            return Err(ImlError::Import("norm inconsistent with instances".into()));
        }
        Ok(m)
    }
}

/// Free-function form of [`KnnModel::predict`].
pub fn knn_predict(model: &KnnModel, query: &FeatureVector) -> Result<Prediction, ImlError> {
    model.predict(query)
}
