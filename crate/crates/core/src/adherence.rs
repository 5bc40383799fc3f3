//! Compliance scores, trends, user-type ground truth, feedback summaries and
//! activity-frequency statistics.

use std::collections::{BTreeMap, HashMap};

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::domain::{ActivityKind, ActivityPool, ComplianceReport, Plan, UserType};
use crate::ids::{PlanId, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdherenceConfig {
    pub active_threshold: f64,
    pub neutral_threshold: f64,
    pub frequent_count: u32,
    pub window_days: u32,
    pub trend_band: f64,
}

impl Default for AdherenceConfig {
    fn default() -> Self {
        AdherenceConfig {
            active_threshold: 0.7,
            neutral_threshold: 0.4,
            frequent_count: 3,
            window_days: 28,
            trend_band: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdherenceError {
    #[error("trend needs at least two days with assigned slots")]
    InsufficientDays,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyScore {
    pub date: NaiveDate,
    pub assigned: u32,
    pub complied: u32,
    pub reported: u32,
}

impl DailyScore {
    pub fn score(&self) -> f64 {
        self.complied as f64 / self.assigned as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceWindow {
    pub user_id: UserId,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub assigned_count: u32,
    pub complied_count: u32,
    pub report_count: u32,
    /// Days with at least one assigned slot, ascending.
    pub daily_scores: Vec<DailyScore>,
}

type SlotKey = (PlanId, NaiveDate, u8);

fn index_reports<'a>(
    reports: impl IntoIterator<Item = &'a ComplianceReport>,
) -> HashMap<SlotKey, bool> {
    reports
        .into_iter()
        .map(|r| ((r.plan_id, r.date, r.slot_index), r.complied))
        .collect()
}

/// The plan in force on `date`: the newest plan covering it.
pub fn plan_in_force<'a>(plans: &[&'a Plan], date: NaiveDate) -> Option<&'a Plan> {
    plans
        .iter()
        .filter(|p| p.covers(date))
        .max_by_key(|p| p.plan_id)
        .copied()
}

impl ComplianceWindow {
    /// Builds the `days`-day window ending at `end` (inclusive). Unreported
    /// slots count as assigned but not complied.
    pub fn build<'a>(
        user_id: UserId,
        end: NaiveDate,
        days: u32,
        plans: &[&Plan],
        reports: impl IntoIterator<Item = &'a ComplianceReport>,
    ) -> Self {
        let start = end - Duration::days(days.max(1) as i64 - 1);
        let outcomes = index_reports(reports);
        let mut window = ComplianceWindow {
            user_id,
            start,
            end,
            assigned_count: 0,
            complied_count: 0,
            report_count: 0,
            daily_scores: Vec::new(),
        };
        let mut date = start;
        while date <= end {
            if let Some(plan) = plan_in_force(plans, date) {
                let mut day = DailyScore {
                    date,
                    assigned: 0,
                    complied: 0,
                    reported: 0,
                };
                for slot in plan.day(date) {
                    day.assigned += 1;
                    if let Some(&complied) = outcomes.get(&(plan.plan_id, date, slot.slot_index)) {
                        day.reported += 1;
                        day.complied += complied as u32;
                    }
                }
                if day.assigned > 0 {
                    window.assigned_count += day.assigned;
                    window.complied_count += day.complied;
                    window.report_count += day.reported;
                    window.daily_scores.push(day);
                }
            }
            date += Duration::days(1);
        }
        window
    }
}

/// Fraction of assigned slots complied with; `None` when nothing was assigned.
pub fn compliance_score(window: &ComplianceWindow) -> Option<f64> {
    if window.assigned_count == 0 {
        None
    } else {
        Some(window.complied_count as f64 / window.assigned_count as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrendDirection {
    Improving,
    Stable,
    Declining,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub direction: TrendDirection,
    /// Change in daily score per day.
    pub slope: f64,
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub(crate) fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in points {
        sxy += (x - mean_x) * (y - mean_y);
        sxx += (x - mean_x) * (x - mean_x);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

pub fn daily_points(window: &ComplianceWindow) -> Vec<(f64, f64)> {
    window
        .daily_scores
        .iter()
        .map(|d| ((d.date - window.start).num_days() as f64, d.score()))
        .collect()
}

pub fn trend(window: &ComplianceWindow, config: &AdherenceConfig) -> Result<Trend, AdherenceError> {
    let points = daily_points(window);
    if points.len() < 2 {
        return Err(AdherenceError::InsufficientDays);
    }
    Ok(classify_slope(ols_slope(&points), config.trend_band))
}

pub fn classify_slope(slope: f64, band: f64) -> Trend {
    let direction = if slope > band {
        TrendDirection::Improving
    } else if slope < -band {
        TrendDirection::Declining
    } else {
        TrendDirection::Stable
    };
    Trend { direction, slope }
}

/// Threshold rule mapping an observed score to a user type. `None` (nothing
/// assigned) is unjudgeable and maps to Neutral.
pub fn ground_truth_type(score: Option<f64>, config: &AdherenceConfig) -> UserType {
    match score {
        None => UserType::Neutral,
        Some(s) if s >= config.active_threshold => UserType::Active,
        Some(s) if s >= config.neutral_threshold => UserType::Neutral,
        Some(_) => UserType::Passive,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotStatus {
    Complied,
    Declined,
    Unreported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRow {
    pub date: NaiveDate,
    pub slot_index: u8,
    pub activity_id: String,
    pub kind: Option<ActivityKind>,
    pub status: SlotStatus,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub complied: u32,
    pub declined: u32,
    pub unreported: u32,
}

impl Tally {
    fn add(&mut self, status: SlotStatus) {
        match status {
            SlotStatus::Complied => self.complied += 1,
            SlotStatus::Declined => self.declined += 1,
            SlotStatus::Unreported => self.unreported += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSummary {
    pub user_id: UserId,
    pub plan_id: PlanId,
    pub rows: Vec<FeedbackRow>,
    pub by_kind: BTreeMap<ActivityKind, Tally>,
    pub total: Tally,
}

/// Per-slot performance of one plan, aggregated by activity kind.
pub fn feedback_summary<'a>(
    plan: &Plan,
    reports: impl IntoIterator<Item = &'a ComplianceReport>,
    pool: &ActivityPool,
) -> FeedbackSummary {
    let outcomes = index_reports(reports);
    let mut summary = FeedbackSummary {
        user_id: plan.user_id,
        plan_id: plan.plan_id,
        rows: Vec::with_capacity(plan.slots.len()),
        by_kind: BTreeMap::new(),
        total: Tally::default(),
    };
    for slot in &plan.slots {
        let status = match outcomes.get(&(plan.plan_id, slot.date, slot.slot_index)) {
            Some(true) => SlotStatus::Complied,
            Some(false) => SlotStatus::Declined,
            None => SlotStatus::Unreported,
        };
        let kind = pool.get(&slot.activity_id).map(|a| a.kind);
        if let Some(kind) = kind {
            summary.by_kind.entry(kind).or_default().add(status);
        }
        summary.total.add(status);
        summary.rows.push(FeedbackRow {
            date: slot.date,
            slot_index: slot.slot_index,
            activity_id: slot.activity_id.clone(),
            kind,
            status,
        });
    }
    summary
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyEntry {
    pub count: u32,
    pub frequent: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub entries: BTreeMap<String, FrequencyEntry>,
}

impl FrequencyTable {
    /// Builds a table from raw counts, applying the frequent-count rule.
    pub fn from_counts(
        counts: impl IntoIterator<Item = (String, u32)>,
        frequent_count: u32,
    ) -> Self {
        FrequencyTable {
            entries: counts
                .into_iter()
                .map(|(id, count)| {
                    (
                        id,
                        FrequencyEntry {
                            count,
                            frequent: count >= frequent_count,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn is_frequent(&self, activity_id: &str) -> bool {
        self.entries.get(activity_id).is_some_and(|e| e.frequent)
    }

    pub fn count(&self, activity_id: &str) -> u32 {
        self.entries.get(activity_id).map_or(0, |e| e.count)
    }
}

/// Counts complied occurrences per activity over the trailing window ending
/// at `as_of` (inclusive).
pub fn frequency_stats<'a>(
    as_of: NaiveDate,
    plans: &[&Plan],
    reports: impl IntoIterator<Item = &'a ComplianceReport>,
    config: &AdherenceConfig,
) -> FrequencyTable {
    let start = as_of - Duration::days(config.window_days as i64 - 1);
    let by_id: HashMap<PlanId, &Plan> = plans.iter().map(|p| (p.plan_id, *p)).collect();
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    for r in reports {
        if !r.complied || r.date < start || r.date > as_of {
            continue;
        }
        let slot = by_id
            .get(&r.plan_id)
            .and_then(|p| p.slot(r.date, r.slot_index));
        if let Some(slot) = slot {
            *counts.entry(slot.activity_id.clone()).or_default() += 1;
        }
    }
    FrequencyTable::from_counts(counts, config.frequent_count)
}
