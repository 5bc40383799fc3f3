//! Trigger timing and the due-notification queue.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{ActivityKind, ActivityPool, Plan};
use crate::ids::{NotificationId, PlanId, UserId};

/// Pending notifications this far past their fire time expire instead of
/// being dispatched.
pub const EXPIRY_HOURS: i64 = 24;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchedulingError {
    #[error("plan {0} already enqueued")]
    DuplicateEnqueue(PlanId),
    #[error("invalid trigger rule: {0}")]
    InvalidRule(String),
    #[error("illegal notification transition for {0}")]
    IllegalTransition(NotificationId),
    #[error("unknown notification {0}")]
    UnknownNotification(NotificationId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerPolicy {
    FixedOffsetBeforeMeal { minutes: u32 },
    HistoricalBestHour { fallback_hour: u32 },
    FixedHour { hour: u32 },
}

impl TriggerPolicy {
    fn validate(&self) -> Result<(), SchedulingError> {
        match *self {
            TriggerPolicy::FixedOffsetBeforeMeal { minutes } if minutes > 240 => Err(
                SchedulingError::InvalidRule(format!("offset {minutes} min exceeds 240")),
            ),
            TriggerPolicy::HistoricalBestHour { fallback_hour: h }
            | TriggerPolicy::FixedHour { hour: h }
                if h > 23 =>
            {
                Err(SchedulingError::InvalidRule(format!(
                    "hour {h} out of range"
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MealTimes {
    pub breakfast: NaiveTime,
    pub lunch: NaiveTime,
    pub dinner: NaiveTime,
}

impl Default for MealTimes {
    fn default() -> Self {
        MealTimes {
            breakfast: NaiveTime::from_hms_opt(8, 0, 0).unwrap(),
            lunch: NaiveTime::from_hms_opt(12, 30, 0).unwrap(),
            dinner: NaiveTime::from_hms_opt(19, 0, 0).unwrap(),
        }
    }
}

impl MealTimes {
    /// Slot 0 is breakfast, 1 lunch, 2 dinner, repeating.
    pub fn for_slot(&self, slot_index: u8) -> NaiveTime {
        match slot_index % 3 {
            0 => self.breakfast,
            1 => self.lunch,
            _ => self.dinner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerRules {
    pub by_kind: BTreeMap<ActivityKind, TriggerPolicy>,
    pub meals: MealTimes,
    /// Offset of users' local time from UTC.
    pub utc_offset_minutes: i32,
}

impl Default for TriggerRules {
    fn default() -> Self {
        TriggerRules {
            by_kind: [
                (
                    ActivityKind::Diet,
                    TriggerPolicy::FixedOffsetBeforeMeal { minutes: 60 },
                ),
                (
                    ActivityKind::Physical,
                    TriggerPolicy::HistoricalBestHour { fallback_hour: 18 },
                ),
                (
                    ActivityKind::Wellness,
                    TriggerPolicy::HistoricalBestHour { fallback_hour: 18 },
                ),
            ]
            .into(),
            meals: MealTimes::default(),
            utc_offset_minutes: 0,
        }
    }
}

impl TriggerRules {
    pub fn validate(&self) -> Result<(), SchedulingError> {
        self.by_kind.values().try_for_each(TriggerPolicy::validate)
    }

    pub fn policy(&self, kind: ActivityKind) -> TriggerPolicy {
        self.by_kind
            .get(&kind)
            .copied()
            .unwrap_or(TriggerPolicy::FixedHour { hour: 18 })
    }

    pub fn local_to_utc(&self, date: NaiveDate, time: NaiveTime) -> DateTime<Utc> {
        (date.and_time(time) - Duration::minutes(self.utc_offset_minutes as i64)).and_utc()
    }

    pub fn utc_to_local(&self, at: DateTime<Utc>) -> chrono::NaiveDateTime {
        at.naive_utc() + Duration::minutes(self.utc_offset_minutes as i64)
    }
}

/// Most common hour, earliest on ties.
pub fn mode_hour(hours: &[u32]) -> Option<u32> {
    let mut counts = [0usize; 24];
    for &h in hours.iter().filter(|h| **h < 24) {
        counts[h as usize] += 1;
    }
    let (hour, &count) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (count > 0).then_some(hour as u32)
}

/// Local time of day to trigger a slot. `history_hours` are the local hours
/// of the user's past complied reports for activities of `kind`.
pub fn trigger_time(
    kind: ActivityKind,
    slot_index: u8,
    history_hours: &[u32],
    rules: &TriggerRules,
) -> NaiveTime {
    let hour = |h: u32| NaiveTime::from_hms_opt(h.min(23), 0, 0).unwrap();
    match rules.policy(kind) {
        TriggerPolicy::FixedOffsetBeforeMeal { minutes } => {
            let meal = rules.meals.for_slot(slot_index);
            let (t, wrapped) = meal.overflowing_sub_signed(Duration::minutes(minutes as i64));
            if wrapped != 0 {
                NaiveTime::MIN
            } else {
                t
            }
        }
        TriggerPolicy::HistoricalBestHour { fallback_hour } => {
            hour(mode_hour(history_hours).unwrap_or(fallback_hour))
        }
        TriggerPolicy::FixedHour { hour: h } => hour(h),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotificationState {
    Pending,
    Dispatched,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledNotification {
    pub notification_id: NotificationId,
    pub user_id: UserId,
    pub plan_id: PlanId,
    pub date: NaiveDate,
    pub slot_index: u8,
    pub fire_at: DateTime<Utc>,
    pub state: NotificationState,
}

/// One pending notification per plan slot, numbered from `first_id`.
pub fn schedule_plan(
    plan: &Plan,
    pool: &ActivityPool,
    history_hours: &BTreeMap<ActivityKind, Vec<u32>>,
    rules: &TriggerRules,
    first_id: u64,
) -> Vec<ScheduledNotification> {
    plan.slots
        .iter()
        .enumerate()
        .map(|(i, slot)| {
            let kind = pool
                .get(&slot.activity_id)
                .map(|a| a.kind)
                .unwrap_or(ActivityKind::Wellness);
            let history = history_hours.get(&kind).map(Vec::as_slice).unwrap_or(&[]);
            let local = trigger_time(kind, slot.slot_index, history, rules);
            ScheduledNotification {
                notification_id: NotificationId(first_id + i as u64),
                user_id: plan.user_id,
                plan_id: plan.plan_id,
                date: slot.date,
                slot_index: slot.slot_index,
                fire_at: rules.local_to_utc(slot.date, local),
                state: NotificationState::Pending,
            }
        })
        .collect()
}

/// Pending notifications split by what should happen to them at `now`.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct DueSet {
    pub dispatch: Vec<NotificationId>,
    pub expire: Vec<NotificationId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NotificationQueue {
    pub notifications: BTreeMap<NotificationId, ScheduledNotification>,
    pub enqueued_plans: BTreeSet<PlanId>,
}

impl NotificationQueue {
    pub fn next_id(&self) -> u64 {
        self.notifications
            .keys()
            .next_back()
            .map_or(1, |id| id.0 + 1)
    }

    pub fn check_enqueue(&self, plan_id: PlanId) -> Result<(), SchedulingError> {
        if self.enqueued_plans.contains(&plan_id) {
            Err(SchedulingError::DuplicateEnqueue(plan_id))
        } else {
            Ok(())
        }
    }

    pub fn enqueue(
        &mut self,
        plan_id: PlanId,
        notifications: Vec<ScheduledNotification>,
    ) -> Result<(), SchedulingError> {
        self.check_enqueue(plan_id)?;
        self.enqueued_plans.insert(plan_id);
        for n in notifications {
            self.notifications.insert(n.notification_id, n);
        }
        Ok(())
    }

    /// Schedules every slot of `plan`.
    pub fn enqueue_plan(
        &mut self,
        plan: &Plan,
        pool: &ActivityPool,
        history_hours: &BTreeMap<ActivityKind, Vec<u32>>,
        rules: &TriggerRules,
    ) -> Result<Vec<ScheduledNotification>, SchedulingError> {
        self.check_enqueue(plan.plan_id)?;
        let scheduled = schedule_plan(plan, pool, history_hours, rules, self.next_id());
        self.enqueue(plan.plan_id, scheduled.clone())?;
        Ok(scheduled)
    }

    pub fn due(&self, now: DateTime<Utc>) -> DueSet {
        let mut set = DueSet::default();
        for n in self.notifications.values() {
            if n.state != NotificationState::Pending || n.fire_at > now {
                continue;
            }
            if now - n.fire_at > Duration::hours(EXPIRY_HOURS) {
                set.expire.push(n.notification_id);
            } else {
                set.dispatch.push(n.notification_id);
            }
        }
        set
    }

    pub fn transition(
        &mut self,
        id: NotificationId,
        to: NotificationState,
    ) -> Result<&ScheduledNotification, SchedulingError> {
        let n = self
            .notifications
            .get_mut(&id)
            .ok_or(SchedulingError::UnknownNotification(id))?;
        if n.state != NotificationState::Pending || to == NotificationState::Pending {
            return Err(SchedulingError::IllegalTransition(id));
        }
        n.state = to;
        Ok(n)
    }

    /// Marks due notifications dispatched (returning them) or expired.
    pub fn collect_due(&mut self, now: DateTime<Utc>) -> Vec<ScheduledNotification> {
        let due = self.due(now);
        for id in due.expire {
            self.transition(id, NotificationState::Expired)
                .expect("pending");
        }
        due.dispatch
            .into_iter()
            .map(|id| {
                self.transition(id, NotificationState::Dispatched)
                    .expect("pending")
                    .clone()
            })
            .collect()
    }
}

/// Local hour of a timestamp.
pub fn local_hour(at: DateTime<Utc>, rules: &TriggerRules) -> u32 {
    rules.utc_to_local(at).hour()
}
