//! Materialized state: a fold over the event log.

use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{
    ActivityCluster, ComplianceReport, DomainError, EmotionReport, Plan, UserProfile, UserType,
};
use crate::ids::{ChatId, NotificationId, PlanId, UserId};
use crate::iml::{ImlConfig, ImlError, ModelKind, ModelRegistry};
use crate::persistence::EventBody;
use crate::scheduling::{NotificationQueue, NotificationState, SchedulingError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApplyError {
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown plan {0}")]
    UnknownPlan(PlanId),
    #[error("user {0} already exists")]
    DuplicateUser(UserId),
    #[error("chat {0} is already bound to a user")]
    DuplicateChat(ChatId),
    #[error("plan {0} already exists")]
    DuplicatePlan(PlanId),
    #[error("plan {plan_id} has no slot {slot_index} on {date}")]
    UnknownSlot {
        plan_id: PlanId,
        date: NaiveDate,
        slot_index: u8,
    },
    #[error("slot {slot_index} on {date} of plan {plan_id} is already reported")]
    DuplicateReport {
        plan_id: PlanId,
        date: NaiveDate,
        slot_index: u8,
    },
    #[error("update {update_id} for chat {chat_id} is not newer than the last one")]
    StaleUpdate { chat_id: ChatId, update_id: u64 },
    #[error("{0}")]
    Inconsistent(String),
    #[error("activity {0} is in more than one cluster")]
    OverlapViolation(String),
    #[error("broadcast text is empty")]
    EmptyBroadcast,
    #[error(transparent)]
    Scheduling(#[from] SchedulingError),
    #[error(transparent)]
    Iml(#[from] ImlError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub profile: UserProfile,
    pub chat_id: ChatId,
    pub registered_at: DateTime<Utc>,
    /// Pre-model suggestion shown at registration.
    pub suggested_template: String,
    /// Template of the user's latest pre-model label, if any.
    pub labeled_template: Option<String>,
    pub plan_ids: Vec<PlanId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub plan: Plan,
    pub assigned_at: DateTime<Utc>,
    /// In arrival order.
    pub reports: Vec<ComplianceReport>,
}

impl PlanRecord {
    pub fn reported(&self, date: NaiveDate, slot_index: u8) -> bool {
        self.reports
            .iter()
            .any(|r| r.date == date && r.slot_index == slot_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub user_id: UserId,
    pub previous_plan: PlanId,
    pub refined_template: String,
    pub as_of: NaiveDate,
    pub compliance_score: Option<f64>,
    pub observed_type: UserType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BroadcastRecord {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub text: String,
    pub filter: String,
    pub recipients: Vec<UserId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub last_seq: u64,
    pub users: BTreeMap<UserId, UserRecord>,
    pub chats: BTreeMap<ChatId, UserId>,
    pub plans: BTreeMap<PlanId, PlanRecord>,
    /// Per user, in arrival order.
    pub emotions: BTreeMap<UserId, Vec<EmotionReport>>,
    /// Highest update id that produced an event, per chat.
    pub chat_cursors: BTreeMap<ChatId, u64>,
    pub queue: NotificationQueue,
    /// Confirmed clusters, sorted by id.
    pub clusters: Vec<ActivityCluster>,
    pub refinements: Vec<RefinementRecord>,
    pub broadcasts: Vec<BroadcastRecord>,
    pub models: ModelRegistry,
}

impl State {
    pub fn new(iml: &ImlConfig) -> Result<Self, ApplyError> {
        Ok(State {
            last_seq: 0,
            users: BTreeMap::new(),
            chats: BTreeMap::new(),
            plans: BTreeMap::new(),
            emotions: BTreeMap::new(),
            chat_cursors: BTreeMap::new(),
            queue: NotificationQueue::default(),
            clusters: Vec::new(),
            refinements: Vec::new(),
            broadcasts: Vec::new(),
            models: ModelRegistry::new(iml)?,
        })
    }

    pub fn next_user_id(&self) -> UserId {
        UserId(self.users.keys().next_back().map_or(1, |u| u.0 + 1))
    }

    pub fn next_plan_id(&self) -> PlanId {
        PlanId(self.plans.keys().next_back().map_or(1, |p| p.0 + 1))
    }

    pub fn user(&self, user_id: UserId) -> Option<&UserRecord> {
        self.users.get(&user_id)
    }

    pub fn user_by_chat(&self, chat_id: ChatId) -> Option<&UserRecord> {
        self.chats.get(&chat_id).and_then(|u| self.users.get(u))
    }

    pub fn user_plans(&self, user_id: UserId) -> Vec<&Plan> {
        self.users
            .get(&user_id)
            .map(|u| u.plan_ids.iter().map(|p| &self.plans[p].plan).collect())
            .unwrap_or_default()
    }

    pub fn latest_plan(&self, user_id: UserId) -> Option<&PlanRecord> {
        self.users
            .get(&user_id)
            .and_then(|u| u.plan_ids.last())
            .map(|p| &self.plans[p])
    }

    pub fn user_reports(&self, user_id: UserId) -> impl Iterator<Item = &ComplianceReport> {
        self.users
            .get(&user_id)
            .into_iter()
            .flat_map(|u| u.plan_ids.iter())
            .flat_map(|p| self.plans[p].reports.iter())
    }

    pub fn user_emotions(&self, user_id: UserId) -> &[EmotionReport] {
        self.emotions.get(&user_id).map_or(&[], Vec::as_slice)
    }

    fn check_cursor(
        &self,
        chat_id: Option<ChatId>,
        update_id: Option<u64>,
    ) -> Result<(), ApplyError> {
        if let (Some(chat_id), Some(update_id)) = (chat_id, update_id) {
            if self
                .chat_cursors
                .get(&chat_id)
                .is_some_and(|c| update_id <= *c)
            {
                return Err(ApplyError::StaleUpdate { chat_id, update_id });
            }
        }
        Ok(())
    }

    fn check_pending(&self, id: NotificationId) -> Result<(), ApplyError> {
        match self.queue.notifications.get(&id) {
            None => Err(SchedulingError::UnknownNotification(id).into()),
            Some(n) if n.state != NotificationState::Pending => {
                Err(SchedulingError::IllegalTransition(id).into())
            }
            Some(_) => Ok(()),
        }
    }

    /// Whether `body` can be applied to the current state.
    pub fn check(&self, body: &EventBody) -> Result<(), ApplyError> {
        match body {
            EventBody::UserRegistered {
                profile, chat_id, ..
            } => {
                if self.users.contains_key(&profile.user_id) {
                    return Err(ApplyError::DuplicateUser(profile.user_id));
                }
                if profile.user_id != self.next_user_id() {
                    return Err(ApplyError::Inconsistent(format!(
                        "user id {} out of sequence",
                        profile.user_id
                    )));
                }
                if self.chats.contains_key(chat_id) {
                    return Err(ApplyError::DuplicateChat(*chat_id));
                }
                Ok(())
            }
            EventBody::PlanAssigned { plan } => {
                if !self.users.contains_key(&plan.user_id) {
                    return Err(ApplyError::UnknownUser(plan.user_id));
                }
                if self.plans.contains_key(&plan.plan_id) {
                    return Err(ApplyError::DuplicatePlan(plan.plan_id));
                }
                plan.check_structure()?;
                Ok(())
            }
            EventBody::PlanRefined {
                user_id,
                previous_plan,
                ..
            } => {
                let user = self
                    .users
                    .get(user_id)
                    .ok_or(ApplyError::UnknownUser(*user_id))?;
                if !user.plan_ids.contains(previous_plan) {
                    return Err(ApplyError::UnknownPlan(*previous_plan));
                }
                Ok(())
            }
            EventBody::ComplianceReported {
                report,
                chat_id,
                update_id,
            } => {
                let rec = self
                    .plans
                    .get(&report.plan_id)
                    .ok_or(ApplyError::UnknownPlan(report.plan_id))?;
                if rec.plan.user_id != report.user_id {
                    return Err(ApplyError::Inconsistent(format!(
                        "plan {} does not belong to {}",
                        report.plan_id, report.user_id
                    )));
                }
                if rec.plan.slot(report.date, report.slot_index).is_none() {
                    return Err(ApplyError::UnknownSlot {
                        plan_id: report.plan_id,
                        date: report.date,
                        slot_index: report.slot_index,
                    });
                }
                if rec.reported(report.date, report.slot_index) {
                    return Err(ApplyError::DuplicateReport {
                        plan_id: report.plan_id,
                        date: report.date,
                        slot_index: report.slot_index,
                    });
                }
                self.check_cursor(*chat_id, *update_id)
            }
            EventBody::EmotionReported {
                report,
                chat_id,
                update_id,
            } => {
                if !self.users.contains_key(&report.user_id) {
                    return Err(ApplyError::UnknownUser(report.user_id));
                }
                self.check_cursor(*chat_id, *update_id)
            }
            EventBody::NotificationScheduled {
                plan_id,
                notifications,
            } => {
                if !self.plans.contains_key(plan_id) {
                    return Err(ApplyError::UnknownPlan(*plan_id));
                }
                self.queue.check_enqueue(*plan_id)?;
                let first = self.queue.next_id();
                for (i, n) in notifications.iter().enumerate() {
                    if n.notification_id != NotificationId(first + i as u64)
                        || n.plan_id != *plan_id
                        || n.state != NotificationState::Pending
                    {
                        return Err(ApplyError::Inconsistent(format!(
                            "notification {} does not fit plan {plan_id}",
                            n.notification_id
                        )));
                    }
                }
                Ok(())
            }
            EventBody::NotificationDispatched { notification_id }
            | EventBody::NotificationExpired { notification_id } => {
                self.check_pending(*notification_id)
            }
            EventBody::ClusterConfirmed { clusters } => {
                let mut seen = std::collections::BTreeSet::new();
                for c in clusters {
                    if !c.confirmed || c.member_ids.is_empty() {
                        return Err(ApplyError::Inconsistent(format!(
                            "cluster {} is empty or unconfirmed",
                            c.cluster_id
                        )));
                    }
                    for m in &c.member_ids {
                        if !seen.insert(m) {
                            return Err(ApplyError::OverlapViolation(m.clone()));
                        }
                    }
                }
                Ok(())
            }
            EventBody::BroadcastSent {
                text, recipients, ..
            } => {
                if text.trim().is_empty() {
                    return Err(ApplyError::EmptyBroadcast);
                }
                match recipients.iter().find(|u| !self.users.contains_key(u)) {
                    Some(u) => Err(ApplyError::UnknownUser(*u)),
                    None => Ok(()),
                }
            }
            EventBody::ModelLabelAdded { model, instance } => {
                let m = self.models.model(*model);
                if !m.schema.matches(&instance.features) {
                    return Err(ImlError::SchemaMismatch.into());
                }
                if !instance.features.is_finite() {
                    return Err(ImlError::NonFinite.into());
                }
                if instance.label.is_empty() {
                    return Err(ImlError::EmptyLabel.into());
                }
                if instance.instance_id != m.len() as u64 + 1 {
                    return Err(ApplyError::Inconsistent(format!(
                        "instance id {} out of sequence",
                        instance.instance_id
                    )));
                }
                if let Some(u) = instance.subject {
                    if !self.users.contains_key(&u) {
                        return Err(ApplyError::UnknownUser(u));
                    }
                }
                Ok(())
            }
        }
    }

    fn advance_cursor(&mut self, chat_id: Option<ChatId>, update_id: Option<u64>) {
        if let (Some(chat_id), Some(update_id)) = (chat_id, update_id) {
            self.chat_cursors.insert(chat_id, update_id);
        }
    }

    /// Applies an event that passed [`State::check`].
    pub fn apply(&mut self, seq: u64, ts: DateTime<Utc>, body: EventBody) {
        debug_assert_eq!(self.check(&body), Ok(()));
        self.last_seq = seq;
        match body {
            EventBody::UserRegistered {
                profile,
                chat_id,
                suggested_template,
            } => {
                self.chats.insert(chat_id, profile.user_id);
                self.users.insert(
                    profile.user_id,
                    UserRecord {
                        profile,
                        chat_id,
                        registered_at: ts,
                        suggested_template,
                        labeled_template: None,
                        plan_ids: Vec::new(),
                    },
                );
            }
            EventBody::PlanAssigned { plan } => {
                self.users
                    .get_mut(&plan.user_id)
                    .expect("checked")
                    .plan_ids
                    .push(plan.plan_id);
                self.plans.insert(
                    plan.plan_id,
                    PlanRecord {
                        plan,
                        assigned_at: ts,
                        reports: Vec::new(),
                    },
                );
            }
            EventBody::PlanRefined {
                user_id,
                previous_plan,
                refined_template,
                as_of,
                compliance_score,
                observed_type,
            } => self.refinements.push(RefinementRecord {
                seq,
                at: ts,
                user_id,
                previous_plan,
                refined_template,
                as_of,
                compliance_score,
                observed_type,
            }),
            EventBody::ComplianceReported {
                report,
                chat_id,
                update_id,
            } => {
                self.advance_cursor(chat_id, update_id);
                self.plans
                    .get_mut(&report.plan_id)
                    .expect("checked")
                    .reports
                    .push(report);
            }
            EventBody::EmotionReported {
                report,
                chat_id,
                update_id,
            } => {
                self.advance_cursor(chat_id, update_id);
                self.emotions
                    .entry(report.user_id)
                    .or_default()
                    .push(report);
            }
            EventBody::NotificationScheduled {
                plan_id,
                notifications,
            } => self.queue.enqueue(plan_id, notifications).expect("checked"),
            EventBody::NotificationDispatched { notification_id } => {
                self.queue
                    .transition(notification_id, NotificationState::Dispatched)
                    .expect("checked");
            }
            EventBody::NotificationExpired { notification_id } => {
                self.queue
                    .transition(notification_id, NotificationState::Expired)
                    .expect("checked");
            }
            EventBody::ClusterConfirmed { clusters } => {
                let mut clusters = clusters;
                clusters.sort_by(|a, b| a.cluster_id.cmp(&b.cluster_id));
                self.clusters = clusters;
            }
            EventBody::BroadcastSent {
                text,
                filter,
                recipients,
            } => self.broadcasts.push(BroadcastRecord {
                seq,
                at: ts,
                text,
                filter,
                recipients,
            }),
            EventBody::ModelLabelAdded { model, instance } => {
                if model == ModelKind::Pre {
                    if let Some(user) = instance.subject.and_then(|u| self.users.get_mut(&u)) {
                        user.labeled_template = Some(instance.label.clone());
                    }
                }
                let id = self
                    .models
                    .model_mut(model)
                    .add_labeled_instance(
                        instance.features,
                        &instance.label,
                        instance.source,
                        instance.created_at,
                        instance.subject,
                    )
                    .expect("checked");
                debug_assert_eq!(id, instance.instance_id);
            }
        }
    }
}
