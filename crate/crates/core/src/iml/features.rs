//! Mixed-type feature vectors and the profile / performance encoders.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adherence::{compliance_score, daily_points, ols_slope, ComplianceWindow};
use crate::domain::{Emotion, EmotionReport, UserProfile};

/// Number of most recent emotion reports summarised in performance features.
pub const EMOTION_WINDOW: usize = 7;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub numeric: Vec<(String, f64)>,
    pub categorical: Vec<(String, String)>,
    pub setvalued: Vec<(String, BTreeSet<String>)>,
}

/// Ordered field names of a feature vector.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub numeric: Vec<String>,
    pub categorical: Vec<String>,
    pub setvalued: Vec<String>,
}

impl Schema {
    pub fn len(&self) -> usize {
        self.numeric.len() + self.categorical.len() + self.setvalued.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All field names in distance order: numeric, categorical, set-valued.
    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.numeric
            .iter()
            .chain(&self.categorical)
            .chain(&self.setvalued)
            .map(String::as_str)
    }

    pub fn matches(&self, v: &FeatureVector) -> bool {
        self.numeric.len() == v.numeric.len()
            && self.categorical.len() == v.categorical.len()
            && self.setvalued.len() == v.setvalued.len()
            && self.numeric.iter().zip(&v.numeric).all(|(a, b)| *a == b.0)
            && self
                .categorical
                .iter()
                .zip(&v.categorical)
                .all(|(a, b)| *a == b.0)
            && self
                .setvalued
                .iter()
                .zip(&v.setvalued)
                .all(|(a, b)| *a == b.0)
    }
}

impl FeatureVector {
    pub fn schema(&self) -> Schema {
        Schema {
            numeric: self.numeric.iter().map(|f| f.0.clone()).collect(),
            categorical: self.categorical.iter().map(|f| f.0.clone()).collect(),
            setvalued: self.setvalued.iter().map(|f| f.0.clone()).collect(),
        }
    }

    pub fn numeric_value(&self, name: &str) -> Option<f64> {
        self.numeric.iter().find(|f| f.0 == name).map(|f| f.1)
    }

    pub fn numeric_value_mut(&mut self, name: &str) -> Option<&mut f64> {
        self.numeric
            .iter_mut()
            .find(|f| f.0 == name)
            .map(|f| &mut f.1)
    }

    pub fn is_finite(&self) -> bool {
        self.numeric.iter().all(|f| f.1.is_finite())
    }
}

fn num(name: &str, v: f64) -> (String, f64) {
    (name.to_string(), v)
}

pub fn encode_profile(profile: &UserProfile) -> FeatureVector {
    FeatureVector {
        numeric: vec![
            num("age", profile.age as f64),
            num("bmi", profile.bmi),
            num("height_m", profile.height_m),
            num("weight_kg", profile.weight_kg),
            num("education", profile.education.ordinal() as f64),
        ],
        categorical: vec![
            ("gender".into(), profile.gender.as_str().into()),
            ("health_condition".into(), profile.health_condition.clone()),
        ],
        setvalued: vec![
            (
                "preferred_activities".into(),
                profile.preferred_activities.clone(),
            ),
            ("preferred_foods".into(), profile.preferred_foods.clone()),
        ],
    }
}

/// Profile features extended with compliance and mood over a window.
///
/// `emotions` must be in chronological order and already restricted to the
/// window's end; only the last [`EMOTION_WINDOW`] are used.
pub fn encode_performance(
    profile: &UserProfile,
    window: &ComplianceWindow,
    emotions: &[EmotionReport],
) -> FeatureVector {
    let mut v = encode_profile(profile);

    let points = daily_points(window);
    let slope = if points.len() >= 2 {
        ols_slope(&points)
    } else {
        0.0
    };
    v.numeric.push(num(
        "compliance_score",
        compliance_score(window).unwrap_or(0.0),
    ));
    v.numeric.push(num("trend_slope", slope));
    v.numeric
        .push(num("report_count", window.report_count as f64));

    let recent = &emotions[emotions.len().saturating_sub(EMOTION_WINDOW)..];
    for e in Emotion::ALL {
        let frac = if recent.is_empty() {
            0.0
        } else {
            recent.iter().filter(|r| r.emotion == e).count() as f64 / recent.len() as f64
        };
        v.numeric
            .push(num(&format!("{}_fraction", e.as_str()), frac));
    }
    v.numeric.push(num(
        "has_emotion",
        if recent.is_empty() { 0.0 } else { 1.0 },
    ));
    v
}
