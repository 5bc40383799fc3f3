//! Shared domain types and their validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::ids::{PlanId, UserId};

pub const DAYS_PER_PLAN: usize = 7;
pub const DEFAULT_SLOTS_PER_DAY: u8 = 3;

const AGE_RANGE: (i64, i64) = (10, 120);
const HEIGHT_RANGE: (f64, f64) = (0.5, 2.5);
const WEIGHT_RANGE: (f64, f64) = (20.0, 300.0);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("field out of range: {0}")]
    FieldOutOfRange(&'static str),
    #[error("unknown tag {tag:?} in {field}")]
    UnknownTag { field: &'static str, tag: String },
    #[error("malformed week: {0}")]
    MalformedWeek(String),
    #[error("unknown activity: {0}")]
    UnknownActivity(String),
    #[error("invalid activity {id}: {reason}")]
    InvalidActivity { id: String, reason: &'static str },
}

impl DomainError {
    pub fn code(&self) -> &'static str {
        match self {
            DomainError::FieldOutOfRange(_) => "FieldOutOfRange",
            DomainError::UnknownTag { .. } => "UnknownTag",
            DomainError::MalformedWeek(_) => "MalformedWeek",
            DomainError::UnknownActivity(_) => "UnknownActivity",
            DomainError::InvalidActivity { .. } => "InvalidActivity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
    Other,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "Male",
            Gender::Female => "Female",
            Gender::Other => "Other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Education {
    Primary,
    Secondary,
    Tertiary,
    Postgraduate,
}

impl Education {
    pub fn ordinal(self) -> u8 {
        self as u8
    }
}

/// Closed vocabularies for profile tags. Configurable; [`Vocabulary::default`]
/// is a starter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub health_conditions: BTreeSet<String>,
    pub activity_tags: BTreeSet<String>,
    pub food_tags: BTreeSet<String>,
    pub resources: BTreeSet<String>,
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            health_conditions: set(&[
                "none",
                "hypertension",
                "prediabetes",
                "type2-diabetes",
                "obesity",
                "high-cholesterol",
            ]),
            activity_tags: set(&[
                "walking",
                "hiking",
                "cycling",
                "running",
                "swimming",
                "yoga",
                "gym",
                "dancing",
                "stretching",
                "meditation",
            ]),
            food_tags: set(&[
                "fruit",
                "vegetables",
                "fish",
                "legumes",
                "whole-grains",
                "nuts",
                "dairy",
                "lean-meat",
                "salad",
                "soup",
            ]),
            resources: set(&[
                "bicycle",
                "gym-access",
                "pool-access",
                "yoga-mat",
                "kitchen",
                "park-nearby",
            ]),
        }
    }
}

/// Registration attributes as submitted. BMI is never accepted from clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileInput {
    #[serde(default)]
    pub display_name: String,
    pub age: i64,
    pub gender: Gender,
    pub height_m: f64,
    pub weight_kg: f64,
    pub education: Education,
    pub health_condition: String,
    #[serde(default)]
    pub preferred_activities: BTreeSet<String>,
    #[serde(default)]
    pub preferred_foods: BTreeSet<String>,
    #[serde(default)]
    pub resources: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    pub display_name: String,
    pub age: i64,
    pub gender: Gender,
    pub height_m: f64,
    pub weight_kg: f64,
    pub bmi: f64,
    pub education: Education,
    pub health_condition: String,
    pub preferred_activities: BTreeSet<String>,
    pub preferred_foods: BTreeSet<String>,
    pub resources: BTreeSet<String>,
}

impl UserProfile {
    /// The submitted form of this profile (drops the derived BMI).
    pub fn input(&self) -> ProfileInput {
        ProfileInput {
            display_name: self.display_name.clone(),
            age: self.age,
            gender: self.gender,
            height_m: self.height_m,
            weight_kg: self.weight_kg,
            education: self.education,
            health_condition: self.health_condition.clone(),
            preferred_activities: self.preferred_activities.clone(),
            preferred_foods: self.preferred_foods.clone(),
            resources: self.resources.clone(),
        }
    }
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    v.is_finite() && v >= lo && v <= hi
}

fn check_tags(
    field: &'static str,
    tags: &BTreeSet<String>,
    vocab: &BTreeSet<String>,
) -> Result<(), DomainError> {
    match tags.iter().find(|t| !vocab.contains(*t)) {
        Some(tag) => Err(DomainError::UnknownTag {
            field,
            tag: tag.clone(),
        }),
        None => Ok(()),
    }
}

/// Validates a registration record and derives BMI.
pub fn validate_profile(
    user_id: UserId,
    raw: &ProfileInput,
    vocab: &Vocabulary,
) -> Result<UserProfile, DomainError> {
    if raw.age < AGE_RANGE.0 || raw.age > AGE_RANGE.1 {
        return Err(DomainError::FieldOutOfRange("age"));
    }
    if !in_range(raw.height_m, HEIGHT_RANGE) {
        return Err(DomainError::FieldOutOfRange("height_m"));
    }
    if !in_range(raw.weight_kg, WEIGHT_RANGE) {
        return Err(DomainError::FieldOutOfRange("weight_kg"));
    }
    if !vocab.health_conditions.contains(&raw.health_condition) {
        return Err(DomainError::UnknownTag {
            field: "health_condition",
            tag: raw.health_condition.clone(),
        });
    }
    check_tags(
        "preferred_activities",
        &raw.preferred_activities,
        &vocab.activity_tags,
    )?;
    check_tags("preferred_foods", &raw.preferred_foods, &vocab.food_tags)?;
    check_tags("resources", &raw.resources, &vocab.resources)?;

    Ok(UserProfile {
        user_id,
        display_name: raw.display_name.clone(),
        age: raw.age,
        gender: raw.gender,
        height_m: raw.height_m,
        weight_kg: raw.weight_kg,
        bmi: raw.weight_kg / (raw.height_m * raw.height_m),
        education: raw.education,
        health_condition: raw.health_condition.clone(),
        preferred_activities: raw.preferred_activities.clone(),
        preferred_foods: raw.preferred_foods.clone(),
        resources: raw.resources.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActivityKind {
    Diet,
    Physical,
    Wellness,
}

impl ActivityKind {
    pub const ALL: [ActivityKind; 3] = [
        ActivityKind::Diet,
        ActivityKind::Physical,
        ActivityKind::Wellness,
    ];
}

impl fmt::Display for ActivityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ActivityKind::Diet => "Diet",
            ActivityKind::Physical => "Physical",
            ActivityKind::Wellness => "Wellness",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activity {
    pub activity_id: String,
    pub kind: ActivityKind,
    pub title: String,
    pub tags: BTreeSet<String>,
    #[serde(default)]
    pub required_resources: BTreeSet<String>,
    pub importance: u8,
}

impl Activity {
    pub fn validate(&self) -> Result<(), DomainError> {
        let invalid = |reason| DomainError::InvalidActivity {
            id: self.activity_id.clone(),
            reason,
        };
        if self.activity_id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.tags.is_empty() {
            return Err(invalid("tags must be nonempty"));
        }
        if !(1..=5).contains(&self.importance) {
            return Err(invalid("importance must be in 1..=5"));
        }
        Ok(())
    }
}

/// The caregiver-curated activity pool, keyed by activity id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Activity>", try_from = "Vec<Activity>")]
pub struct ActivityPool {
    activities: BTreeMap<String, Activity>,
}

impl ActivityPool {
    pub fn new(activities: impl IntoIterator<Item = Activity>) -> Result<Self, DomainError> {
        let mut map = BTreeMap::new();
        for a in activities {
            a.validate()?;
            if map.contains_key(&a.activity_id) {
                return Err(DomainError::InvalidActivity {
                    id: a.activity_id,
                    reason: "duplicate id",
                });
            }
            map.insert(a.activity_id.clone(), a);
        }
        Ok(ActivityPool { activities: map })
    }

    /// Parses the pool ingestion document: a JSON list of activities.
    pub fn from_json(json: &str) -> Result<Self, PoolLoadError> {
        let list: Vec<Activity> = serde_json::from_str(json)?;
        Ok(Self::new(list)?)
    }

    pub fn get(&self, id: &str) -> Option<&Activity> {
        self.activities.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.activities.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Activity> {
        self.activities.values()
    }

    pub fn len(&self) -> usize {
        self.activities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activities.is_empty()
    }
}

impl From<ActivityPool> for Vec<Activity> {
    fn from(pool: ActivityPool) -> Self {
        pool.activities.into_values().collect()
    }
}

impl TryFrom<Vec<Activity>> for ActivityPool {
    type Error = DomainError;

    fn try_from(list: Vec<Activity>) -> Result<Self, Self::Error> {
        ActivityPool::new(list)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PoolLoadError {
    #[error("activity pool JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityCluster {
    pub cluster_id: String,
    pub member_ids: BTreeSet<String>,
    pub confirmed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotOrigin {
    Frequent,
    Infrequent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanSlot {
    pub date: NaiveDate,
    pub slot_index: u8,
    pub activity_id: String,
    pub origin: SlotOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub plan_id: PlanId,
    pub user_id: UserId,
    pub template_id: String,
    pub week_start: NaiveDate,
    pub slots_per_day: u8,
    /// Ordered by (date, slot_index).
    pub slots: Vec<PlanSlot>,
}

impl Plan {
    pub fn week_end(&self) -> NaiveDate {
        self.week_start + Duration::days(DAYS_PER_PLAN as i64 - 1)
    }

    pub fn covers(&self, date: NaiveDate) -> bool {
        date >= self.week_start && date <= self.week_end()
    }

    pub fn slot(&self, date: NaiveDate, slot_index: u8) -> Option<&PlanSlot> {
        if !self.covers(date) || slot_index >= self.slots_per_day {
            return None;
        }
        let day = (date - self.week_start).num_days() as usize;
        self.slots
            .get(day * self.slots_per_day as usize + slot_index as usize)
    }

    pub fn day(&self, date: NaiveDate) -> &[PlanSlot] {
        if !self.covers(date) {
            return &[];
        }
        let s = self.slots_per_day as usize;
        let day = (date - self.week_start).num_days() as usize;
        &self.slots[day * s..(day + 1) * s]
    }

    /// Re-checks the structural invariants of an already-built plan.
    pub fn check_structure(&self) -> Result<(), DomainError> {
        check_week(self.week_start, self.slots_per_day, &self.slots)
    }
}

fn check_week(
    week_start: NaiveDate,
    slots_per_day: u8,
    slots: &[PlanSlot],
) -> Result<(), DomainError> {
    if slots_per_day == 0 {
        return Err(DomainError::MalformedWeek("zero slots per day".into()));
    }
    let expected = DAYS_PER_PLAN * slots_per_day as usize;
    if slots.len() != expected {
        return Err(DomainError::MalformedWeek(format!(
            "expected {expected} slots, got {}",
            slots.len()
        )));
    }
    let s = slots_per_day as usize;
    for (i, slot) in slots.iter().enumerate() {
        let date = week_start + Duration::days((i / s) as i64);
        if slot.date != date || slot.slot_index as usize != i % s {
            return Err(DomainError::MalformedWeek(format!(
                "missing {date} slot {}",
                i % s
            )));
        }
    }
    Ok(())
}

/// Builds a validated plan from an unordered slot list covering 7 consecutive
/// days × `slots_per_day` slot indices.
pub fn new_plan(
    plan_id: PlanId,
    user_id: UserId,
    template_id: &str,
    week_start: NaiveDate,
    slots_per_day: u8,
    mut slots: Vec<PlanSlot>,
    pool: &ActivityPool,
) -> Result<Plan, DomainError> {
    slots.sort_by_key(|a| (a.date, a.slot_index));
    if let Some(w) = slots
        .windows(2)
        .find(|w| (w[0].date, w[0].slot_index) == (w[1].date, w[1].slot_index))
    {
        return Err(DomainError::MalformedWeek(format!(
            "duplicate {} slot {}",
            w[0].date, w[0].slot_index
        )));
    }
    check_week(week_start, slots_per_day, &slots)?;
    if let Some(slot) = slots.iter().find(|s| !pool.contains(&s.activity_id)) {
        return Err(DomainError::UnknownActivity(slot.activity_id.clone()));
    }
    Ok(Plan {
        plan_id,
        user_id,
        template_id: template_id.to_string(),
        week_start,
        slots_per_day,
        slots,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub user_id: UserId,
    pub plan_id: PlanId,
    pub date: NaiveDate,
    pub slot_index: u8,
    pub complied: bool,
    pub reported_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Emotion {
    Happy,
    Sad,
    Angry,
    Neutral,
}

impl Emotion {
    pub const ALL: [Emotion; 4] = [
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Angry,
        Emotion::Neutral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Angry => "angry",
            Emotion::Neutral => "neutral",
        }
    }
}

impl FromStr for Emotion {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Emotion::ALL.into_iter().find(|e| e.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionReport {
    pub user_id: UserId,
    pub emotion: Emotion,
    pub reported_at: DateTime<Utc>,
}

/// Performance class. Ordered `Passive < Neutral < Active`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UserType {
    Passive,
    Neutral,
    Active,
}

impl UserType {
    pub const ALL: [UserType; 3] = [UserType::Active, UserType::Neutral, UserType::Passive];

    pub fn as_str(self) -> &'static str {
        match self {
            UserType::Active => "Active",
            UserType::Neutral => "Neutral",
            UserType::Passive => "Passive",
        }
    }
}

impl fmt::Display for UserType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UserType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        UserType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or(())
    }
}
