//! Activity clustering, feasibility filtering, weekly plan composition and
//! suggestion generation.

mod cluster;

pub use cluster::{confirm_clusters, jaccard_similarity, propose_clusters, ClusterEdit};

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, NaiveDate, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adherence::FrequencyTable;
use crate::domain::{
    new_plan, Activity, ActivityCluster, ActivityKind, ActivityPool, DomainError, Plan, PlanSlot,
    SlotOrigin, UserProfile, DAYS_PER_PLAN,
};
use crate::ids::{PlanId, UserId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanningError {
    #[error("no feasible activity{}", .0.map(|k| format!(" of kind {k}")).unwrap_or_default())]
    NoFeasibleActivity(Option<ActivityKind>),
    #[error("activity {0} placed in more than one cluster")]
    OverlapViolation(String),
    #[error("unknown activity: {0}")]
    UnknownActivity(String),
    #[error("unknown cluster: {0}")]
    UnknownCluster(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("suggestion count must be at least 1")]
    InvalidCount,
    #[error(transparent)]
    Domain(#[from] DomainError),
}

impl PlanningError {
    pub fn code(&self) -> &'static str {
        match self {
            PlanningError::NoFeasibleActivity(_) => "NoFeasibleActivity",
            PlanningError::OverlapViolation(_) => "OverlapViolation",
            PlanningError::UnknownActivity(_) => "UnknownActivity",
            PlanningError::UnknownCluster(_) => "UnknownCluster",
            PlanningError::InvalidTemplate(_) => "InvalidTemplate",
            PlanningError::InvalidCount => "InvalidCount",
            PlanningError::Domain(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanningConfig {
    /// Share of weekly slots drawn from frequent activities when possible.
    pub frequent_share: f64,
    /// Exploration probability for suggestions.
    pub epsilon: f64,
    pub cluster_threshold: f64,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        PlanningConfig {
            frequent_share: 0.7,
            epsilon: 0.3,
            cluster_threshold: 0.5,
        }
    }
}

/// A caregiver-defined weekly plan skeleton.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanTemplate {
    pub template_id: String,
    /// Slots per day for each activity kind.
    pub kind_mix: BTreeMap<ActivityKind, u8>,
    /// Clusters new behaviours are drawn from; empty means the whole pool.
    #[serde(default)]
    pub target_clusters: BTreeSet<String>,
    #[serde(default)]
    pub notes: String,
}

impl PlanTemplate {
    pub fn slots_per_day(&self) -> u8 {
        self.kind_mix.values().sum()
    }

    /// Activity kind of each slot index within a day.
    pub fn slot_kinds(&self) -> Vec<ActivityKind> {
        self.kind_mix
            .iter()
            .flat_map(|(k, n)| std::iter::repeat_n(*k, *n as usize))
            .collect()
    }

    pub fn validate(
        &self,
        slots_per_day: u8,
        clusters: &[ActivityCluster],
    ) -> Result<(), PlanningError> {
        if self.slots_per_day() != slots_per_day {
            return Err(PlanningError::InvalidTemplate(format!(
                "{}: kind mix sums to {}, expected {slots_per_day}",
                self.template_id,
                self.slots_per_day()
            )));
        }
        for target in &self.target_clusters {
            if !clusters
                .iter()
                .any(|c| c.confirmed && &c.cluster_id == target)
            {
                return Err(PlanningError::InvalidTemplate(format!(
                    "{}: target cluster {target} is not confirmed",
                    self.template_id
                )));
            }
        }
        Ok(())
    }
}

/// Whether `profile` can be expected to perform `activity`: either they hold
/// every required resource or they already do it frequently.
pub fn feasible(activity: &Activity, profile: &UserProfile, freq: &FrequencyTable) -> bool {
    activity.required_resources.is_subset(&profile.resources)
        || freq.is_frequent(&activity.activity_id)
}

/// Lower bound on frequent slots: `ceil(share * total)`.
pub fn frequent_target(share: f64, total: usize) -> usize {
    ((share * total as f64) - 1e-9).ceil().max(0.0) as usize
}

pub struct CompositionInput<'a> {
    pub profile: &'a UserProfile,
    pub template: &'a PlanTemplate,
    pub pool: &'a ActivityPool,
    pub clusters: &'a [ActivityCluster],
    pub freq: &'a FrequencyTable,
    pub week_start: NaiveDate,
    pub frequent_share: f64,
}

struct KindCandidates<'a> {
    frequent: Vec<&'a Activity>,
    infrequent: Vec<&'a Activity>,
}

/// Fills 7 × S slots. Up to `ceil(share · 7 · S)` slots (more only when a kind
/// has no new behaviours available) come from the user's frequent activities;
/// the rest are drawn uniformly from feasible infrequent activities in the
/// template's target clusters.
pub fn compose_weekly_plan(
    plan_id: PlanId,
    input: &CompositionInput<'_>,
    seed: u64,
) -> Result<Plan, PlanningError> {
    let template = input.template;
    let kinds = template.slot_kinds();
    let s = kinds.len();
    if s == 0 {
        return Err(PlanningError::InvalidTemplate(format!(
            "{}: empty kind mix",
            template.template_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let in_targets = |a: &Activity| {
        template.target_clusters.is_empty()
            || input.clusters.iter().any(|c| {
                c.confirmed
                    && template.target_clusters.contains(&c.cluster_id)
                    && c.member_ids.contains(&a.activity_id)
            })
    };
    let mut candidates: BTreeMap<ActivityKind, KindCandidates> = BTreeMap::new();
    for &kind in template.kind_mix.keys() {
        let mut frequent = Vec::new();
        let mut infrequent = Vec::new();
        for a in input.pool.iter().filter(|a| a.kind == kind) {
            if input.freq.is_frequent(&a.activity_id) {
                frequent.push(a);
            } else if feasible(a, input.profile, input.freq) && in_targets(a) {
                infrequent.push(a);
            }
        }
        if frequent.is_empty() && infrequent.is_empty() {
            return Err(PlanningError::NoFeasibleActivity(Some(kind)));
        }
        frequent.shuffle(&mut rng);
        candidates.insert(
            kind,
            KindCandidates {
                frequent,
                infrequent,
            },
        );
    }

    // slot positions as (day, slot_index)
    let total = DAYS_PER_PLAN * s;
    let target = frequent_target(input.frequent_share, total);
    let mut is_frequent = vec![false; total];
    let mut flexible = Vec::new();
    let mut forced = 0;
    for pos in 0..total {
        let c = &candidates[&kinds[pos % s]];
        match (c.frequent.is_empty(), c.infrequent.is_empty()) {
            (false, true) => {
                is_frequent[pos] = true;
                forced += 1;
            }
            (false, false) => flexible.push(pos),
            _ => {}
        }
    }
    flexible.shuffle(&mut rng);
    for &pos in flexible.iter().take(target.saturating_sub(forced)) {
        is_frequent[pos] = true;
    }

    let mut cursor: BTreeMap<ActivityKind, usize> = BTreeMap::new();
    let mut slots = Vec::with_capacity(total);
    for (pos, &frequent) in is_frequent.iter().enumerate() {
        let kind = kinds[pos % s];
        let c = &candidates[&kind];
        let (activity, origin) = if frequent {
            let i = cursor.entry(kind).or_default();
            let a = c.frequent[*i % c.frequent.len()];
            *i += 1;
            (a, SlotOrigin::Frequent)
        } else {
            (
                c.infrequent[rng.random_range(0..c.infrequent.len())],
                SlotOrigin::Infrequent,
            )
        };
        slots.push(PlanSlot {
            date: input.week_start + Duration::days((pos / s) as i64),
            slot_index: (pos % s) as u8,
            activity_id: activity.activity_id.clone(),
            origin,
        });
    }

    Ok(new_plan(
        plan_id,
        input.profile.user_id,
        &template.template_id,
        input.week_start,
        s as u8,
        slots,
        input.pool,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rationale {
    FrequentHabit,
    NewBehavior,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub user_id: UserId,
    pub activity_id: String,
    pub rationale: Rationale,
    pub created_at: DateTime<Utc>,
}

/// ε-greedy mix of habits and new behaviours, uniform within each arm, with
/// no repeats in one batch. Returns fewer than `n` only when both arms run
/// out.
pub fn generate_suggestions(
    profile: &UserProfile,
    pool: &ActivityPool,
    freq: &FrequencyTable,
    n: usize,
    epsilon: f64,
    seed: u64,
    now: DateTime<Utc>,
) -> Result<Vec<Suggestion>, PlanningError> {
    if n == 0 {
        return Err(PlanningError::InvalidCount);
    }
    let (mut habits, mut fresh): (Vec<&Activity>, Vec<&Activity>) = pool
        .iter()
        .filter(|a| feasible(a, profile, freq))
        .partition(|a| freq.is_frequent(&a.activity_id));
    if habits.is_empty() && fresh.is_empty() {
        return Err(PlanningError::NoFeasibleActivity(None));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n && !(habits.is_empty() && fresh.is_empty()) {
        let explore = rng.random::<f64>() < epsilon;
        let (arm, rationale) = match (explore, habits.is_empty(), fresh.is_empty()) {
            (true, _, false) | (false, true, false) => (&mut fresh, Rationale::NewBehavior),
            _ => (&mut habits, Rationale::FrequentHabit),
        };
        let pick = arm.swap_remove(rng.random_range(0..arm.len()));
        out.push(Suggestion {
            user_id: profile.user_id,
            activity_id: pick.activity_id.clone(),
            rationale,
            created_at: now,
        });
    }
    Ok(out)
}
