//! The CoachMe service: every caregiver action and bot update goes through
//! here, and every state change is an appended event.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::adherence::{
    compliance_score, feedback_summary, frequency_stats, ground_truth_type, plan_in_force, trend,
    ComplianceWindow, DailyScore, FeedbackSummary, FrequencyTable, Trend,
};
use crate::bot::{
    parse_update, render_mood_keyboard, render_plan_day, render_reminder, BotError, CallbackData,
    Command, Intent, OutboundMessage, UpdatePayload,
};
use crate::clock::Clock;
use crate::config::{Catalog, CoachConfig, ConfigError, RankingOrder};
use crate::domain::{
    validate_profile, ActivityCluster, ActivityKind, ComplianceReport, DomainError, EmotionReport,
    Plan, ProfileInput, UserProfile, UserType,
};
use crate::ids::{ChatId, PlanId, UserId};
use crate::iml::{
    encode_performance, encode_profile, pre_predict, FeatureVector, ImlError, LabelSource,
    LabeledInstance, ModelKind, Prediction,
};
use crate::persistence::{self, EventBody, EventLog, PersistError};
use crate::planning::{
    self, compose_weekly_plan, generate_suggestions, ClusterEdit, CompositionInput, PlanningError,
    Suggestion,
};
use crate::scheduling::{local_hour, schedule_plan, ScheduledNotification};
use crate::state::{ApplyError, State, UserRecord};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown plan {0}")]
    UnknownPlan(PlanId),
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("chat {0} is already registered")]
    DuplicateChat(ChatId),
    #[error("user {0} has no assigned plan")]
    NoAssignedPlan(UserId),
    #[error("broadcast text is empty")]
    EmptyBroadcast,
    #[error("invalid cohort filter {0:?}")]
    InvalidFilter(String),
    #[error("invalid profile: {0}")]
    Validation(#[from] DomainError),
    #[error(transparent)]
    Planning(#[from] PlanningError),
    #[error(transparent)]
    Bot(#[from] BotError),
    #[error(transparent)]
    Iml(#[from] ImlError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl ServiceError {
    /// Stable error code for API responses.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownUser(_) => "UnknownUser",
            ServiceError::UnknownPlan(_) => "UnknownPlan",
            ServiceError::UnknownTemplate(_) => "UnknownTemplate",
            ServiceError::DuplicateChat(_) => "DuplicateChat",
            ServiceError::NoAssignedPlan(_) => "NoAssignedPlan",
            ServiceError::EmptyBroadcast => "EmptyBroadcast",
            ServiceError::InvalidFilter(_) => "InvalidFilter",
            ServiceError::Validation(_) => "ValidationError",
            ServiceError::Planning(e) => e.code(),
            ServiceError::Bot(e) => e.code(),
            ServiceError::Iml(e) => e.code(),
            ServiceError::Persist(e) => e.code(),
            ServiceError::Config(e) => e.code(),
        }
    }
}

impl From<ApplyError> for ServiceError {
    fn from(e: ApplyError) -> Self {
        ServiceError::Persist(PersistError::PayloadInvalid(e))
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub user_id: UserId,
    pub profile: UserProfile,
    pub chat_id: ChatId,
    pub suggestion: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub previous_plan: PlanId,
    pub plan: Plan,
    pub compliance_score: Option<f64>,
    pub observed_type: UserType,
    pub pre_instance_id: u64,
    pub post_instance_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub user_id: UserId,
    pub display_name: String,
    pub compliance_score: Option<f64>,
    pub predicted_type: String,
    pub confidence: f64,
    pub prediction_status: crate::iml::PredictionStatus,
    pub trend: Option<Trend>,
    pub last_report_at: Option<DateTime<Utc>>,
}

/// Which users a broadcast reaches: `all`, `type:<Active|Neutral|Passive>`
/// or a single `user:<id>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CohortFilter {
    All,
    Type(UserType),
    User(UserId),
}

impl std::str::FromStr for CohortFilter {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CohortFilter::All),
            _ => {
                let ty = s
                    .strip_prefix("type:")
                    .and_then(|t| t.parse().ok())
                    .map(CohortFilter::Type);
                let user = || {
                    let raw = s.strip_prefix("user:")?;
                    raw.parse()
                        .ok()
                        .or_else(|| raw.parse().ok().map(UserId))
                        .map(CohortFilter::User)
                };
                ty.or_else(user)
                    .ok_or_else(|| ServiceError::InvalidFilter(s.to_string()))
            }
        }
    }
}

impl std::fmt::Display for CohortFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CohortFilter::All => f.write_str("all"),
            CohortFilter::Type(t) => write!(f, "type:{t}"),
            CohortFilter::User(u) => write!(f, "user:{u}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTrailEntry {
    pub model: ModelKind,
    pub instance_id: u64,
    pub label: String,
    pub source: LabelSource,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserDetail {
    pub profile: UserProfile,
    pub chat_id: ChatId,
    pub registered_at: DateTime<Utc>,
    pub suggested_template: String,
    pub plan_ids: Vec<PlanId>,
    pub current_plan: Option<Plan>,
    /// Slot outcomes of the latest plan.
    pub feedback: Option<FeedbackSummary>,
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
    pub daily_scores: Vec<DailyScore>,
    pub compliance_score: Option<f64>,
    pub trend: Option<Trend>,
    pub emotions: Vec<EmotionReport>,
    pub prediction: Prediction,
    pub label_trail: Vec<LabelTrailEntry>,
}

/// Result of one bot update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Effects {
    /// Seqs of appended events.
    pub events: Vec<u64>,
    pub messages: Vec<OutboundMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub notification: ScheduledNotification,
    pub message: OutboundMessage,
}

fn mix_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct CoachMe {
    config: CoachConfig,
    catalog: Catalog,
    state: State,
    log: EventLog,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for CoachMe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoachMe")
            .field("log", &self.log)
            .field("users", &self.state.users.len())
            .finish()
    }
}

impl CoachMe {
    /// A fresh service writing to `log`.
    pub fn new(
        config: CoachConfig,
        catalog: Catalog,
        log: EventLog,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        config.validate()?;
        catalog.validate_for(&config)?;
        let state = State::new(&config.iml)?;
        if log.last_seq() != 0 {
            return Err(ConfigError::Invalid("a new service needs an empty log".into()).into());
        }
        Ok(CoachMe {
            config,
            catalog,
            state,
            log,
            clock,
        })
    }

    pub fn in_memory(config: CoachConfig, catalog: Catalog, clock: Arc<dyn Clock>) -> Result<Self> {
        Self::new(config, catalog, EventLog::in_memory(), clock)
    }

    /// Opens (or creates) a data directory, replaying its log. A torn last
    /// line is truncated and reported as the second value.
    pub fn open(
        config: CoachConfig,
        catalog: Catalog,
        data_dir: &Path,
        clock: Arc<dyn Clock>,
    ) -> Result<(Self, Option<PersistError>)> {
        config.validate()?;
        catalog.validate_for(&config)?;
        let (state, log, recovered) =
            persistence::open_data_dir(data_dir, &config.iml, config.sync_every_append)?;
        Ok((
            CoachMe {
                config,
                catalog,
                state,
                log,
                clock,
            },
            recovered,
        ))
    }

    pub fn config(&self) -> &CoachConfig {
        &self.config
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    /// The users' local calendar date right now.
    pub fn today(&self) -> NaiveDate {
        self.config.triggers.utc_to_local(self.now()).date()
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.log.flush()?)
    }

    pub fn write_snapshot(&self, data_dir: &Path) -> Result<std::path::PathBuf> {
        Ok(persistence::write_snapshot(data_dir, &self.state)?)
    }

    fn emit(&mut self, body: EventBody) -> Result<u64> {
        let ts = self.clock.now();
        Ok(self.log.append(&mut self.state, ts, body)?)
    }

    fn user(&self, user_id: UserId) -> Result<&UserRecord> {
        self.state
            .user(user_id)
            .ok_or(ServiceError::UnknownUser(user_id))
    }

    // ---- caregiver actions ----

    pub fn register_user(&mut self, input: &ProfileInput, chat_id: ChatId) -> Result<Registration> {
        let user_id = self.state.next_user_id();
        let profile = validate_profile(user_id, input, &self.catalog.vocabulary)?;
        if self.state.chats.contains_key(&chat_id) {
            return Err(ServiceError::DuplicateChat(chat_id));
        }
        let suggestion = pre_predict(&self.state.models, &profile)?;
        self.emit(EventBody::UserRegistered {
            profile: profile.clone(),
            chat_id,
            suggested_template: suggestion.label.clone(),
        })?;
        Ok(Registration {
            user_id,
            profile,
            chat_id,
            suggestion,
        })
    }

    fn template(&self, template_id: &str) -> Result<&planning::PlanTemplate> {
        self.catalog
            .templates
            .get(template_id)
            .ok_or_else(|| ServiceError::UnknownTemplate(template_id.to_string()))
    }

    /// Local hours of the user's complied reports, by activity kind.
    fn history_hours(&self, user_id: UserId) -> BTreeMap<ActivityKind, Vec<u32>> {
        let mut hours: BTreeMap<ActivityKind, Vec<u32>> = BTreeMap::new();
        for r in self.state.user_reports(user_id).filter(|r| r.complied) {
            let kind = self.state.plans[&r.plan_id]
                .plan
                .slot(r.date, r.slot_index)
                .and_then(|s| self.catalog.pool.get(&s.activity_id))
                .map(|a| a.kind);
            if let Some(kind) = kind {
                hours
                    .entry(kind)
                    .or_default()
                    .push(local_hour(r.reported_at, &self.config.triggers));
            }
        }
        hours
    }

    /// Composes and schedules a plan without touching state.
    fn prepare_plan(
        &self,
        user_id: UserId,
        template_id: &str,
        week_start: NaiveDate,
    ) -> Result<(Plan, Vec<ScheduledNotification>)> {
        let user = self.user(user_id)?;
        let template = self.template(template_id)?;
        template.validate(self.config.slots_per_day, &self.state.clusters)?;
        let freq = self.frequency_table(user_id, week_start - Duration::days(1));
        let plan_id = self.state.next_plan_id();
        let input = CompositionInput {
            profile: &user.profile,
            template,
            pool: &self.catalog.pool,
            clusters: &self.state.clusters,
            freq: &freq,
            week_start,
            frequent_share: self.config.planning.frequent_share,
        };
        let plan = compose_weekly_plan(plan_id, &input, mix_seed(self.config.seed, plan_id.0))?;
        let notifications = schedule_plan(
            &plan,
            &self.catalog.pool,
            &self.history_hours(user_id),
            &self.config.triggers,
            self.state.queue.next_id(),
        );
        Ok((plan, notifications))
    }

    fn pre_label(
        &self,
        profile: &UserProfile,
        template_id: &str,
        source: LabelSource,
    ) -> LabeledInstance {
        LabeledInstance {
            instance_id: self.state.models.pre.len() as u64 + 1,
            features: encode_profile(profile),
            label: template_id.to_string(),
            source,
            created_at: self.now(),
            subject: Some(profile.user_id),
        }
    }

    /// Composes the week starting `week_start` from `template_id`, schedules
    /// its notifications and, when the caregiver's choice differs from the
    /// user's last pre-model label (or there is none), records it as one.
    pub fn assign_plan(
        &mut self,
        user_id: UserId,
        template_id: &str,
        week_start: NaiveDate,
    ) -> Result<Plan> {
        let (plan, notifications) = self.prepare_plan(user_id, template_id, week_start)?;
        let user = self.user(user_id)?;
        let label = (user.labeled_template.as_deref() != Some(template_id))
            .then(|| self.pre_label(&user.profile, template_id, LabelSource::CaregiverAssignment));
        self.commit_plan(plan.clone(), notifications)?;
        if let Some(instance) = label {
            self.emit(EventBody::ModelLabelAdded {
                model: ModelKind::Pre,
                instance,
            })?;
        }
        Ok(plan)
    }

    fn commit_plan(&mut self, plan: Plan, notifications: Vec<ScheduledNotification>) -> Result<()> {
        let plan_id = plan.plan_id;
        self.emit(EventBody::PlanAssigned { plan })?;
        self.emit(EventBody::NotificationScheduled {
            plan_id,
            notifications,
        })?;
        Ok(())
    }

    fn window(&self, user_id: UserId, as_of: NaiveDate) -> ComplianceWindow {
        let plans = self.state.user_plans(user_id);
        ComplianceWindow::build(
            user_id,
            as_of,
            self.config.adherence.window_days,
            &plans,
            self.state.user_reports(user_id),
        )
    }

    fn emotions_until(&self, user_id: UserId, as_of: NaiveDate) -> Vec<EmotionReport> {
        self.state
            .user_emotions(user_id)
            .iter()
            .filter(|e| self.config.triggers.utc_to_local(e.reported_at).date() <= as_of)
            .cloned()
            .collect()
    }

    /// Post-model features for the window ending `as_of`.
    pub fn performance_features(&self, user_id: UserId, as_of: NaiveDate) -> Result<FeatureVector> {
        let user = self.user(user_id)?;
        Ok(encode_performance(
            &user.profile,
            &self.window(user_id, as_of),
            &self.emotions_until(user_id, as_of),
        ))
    }

    pub fn post_predict(&self, user_id: UserId, as_of: NaiveDate) -> Result<Prediction> {
        let features = self.performance_features(user_id, as_of)?;
        Ok(crate::iml::post_predict(&self.state.models, &features)?)
    }

    /// The caregiver's refine action. Labels the pre-model with the refined
    /// template and the post-model with the user type observed over the
    /// window ending `as_of`, then assigns the refined plan from the next day.
    pub fn refine_plan(
        &mut self,
        user_id: UserId,
        template_id: &str,
        as_of: NaiveDate,
    ) -> Result<Refinement> {
        let user = self.user(user_id)?;
        let previous_plan = *user
            .plan_ids
            .last()
            .ok_or(ServiceError::NoAssignedPlan(user_id))?;
        let profile = user.profile.clone();
        self.template(template_id)?;

        let window = self.window(user_id, as_of);
        let score = compliance_score(&window);
        let observed_type = ground_truth_type(score, &self.config.adherence);
        let features = encode_performance(&profile, &window, &self.emotions_until(user_id, as_of));
        let pre = self.pre_label(&profile, template_id, LabelSource::CaregiverRefinement);
        let post = LabeledInstance {
            instance_id: self.state.models.post.len() as u64 + 1,
            features,
            label: observed_type.as_str().to_string(),
            source: LabelSource::CaregiverRefinement,
            created_at: self.now(),
            subject: Some(user_id),
        };
        // compose first so a planning error leaves no trace
        let (plan, notifications) =
            self.prepare_plan(user_id, template_id, as_of + Duration::days(1))?;
        let (pre_instance_id, post_instance_id) = (pre.instance_id, post.instance_id);

        self.emit(EventBody::PlanRefined {
            user_id,
            previous_plan,
            refined_template: template_id.to_string(),
            as_of,
            compliance_score: score,
            observed_type,
        })?;
        self.emit(EventBody::ModelLabelAdded {
            model: ModelKind::Pre,
            instance: pre,
        })?;
        self.emit(EventBody::ModelLabelAdded {
            model: ModelKind::Post,
            instance: post,
        })?;
        self.commit_plan(plan.clone(), notifications)?;
        Ok(Refinement {
            previous_plan,
            plan,
            compliance_score: score,
            observed_type,
            pre_instance_id,
            post_instance_id,
        })
    }

    fn frequency_table(&self, user_id: UserId, as_of: NaiveDate) -> FrequencyTable {
        let plans = self.state.user_plans(user_id);
        frequency_stats(
            as_of,
            &plans,
            self.state.user_reports(user_id),
            &self.config.adherence,
        )
    }

    pub fn frequency_stats(&self, user_id: UserId, as_of: NaiveDate) -> Result<FrequencyTable> {
        self.user(user_id)?;
        Ok(self.frequency_table(user_id, as_of))
    }

    pub fn suggestions(
        &self,
        user_id: UserId,
        n: usize,
        as_of: NaiveDate,
    ) -> Result<Vec<Suggestion>> {
        let user = self.user(user_id)?;
        let freq = self.frequency_table(user_id, as_of);
        let seed = mix_seed(self.config.seed ^ user_id.0, as_of.to_epoch_days() as u64);
        Ok(generate_suggestions(
            &user.profile,
            &self.catalog.pool,
            &freq,
            n,
            self.config.planning.epsilon,
            seed,
            self.now(),
        )?)
    }

    /// One row per registered user, lowest compliance first (configurable),
    /// ties by user id. Users without data sort after everyone else.
    pub fn ranking(&self, as_of: NaiveDate) -> Result<Vec<RankingRow>> {
        let mut rows = Vec::with_capacity(self.state.users.len());
        for (user_id, user) in &self.state.users {
            let window = self.window(*user_id, as_of);
            let prediction = self.post_predict(*user_id, as_of)?;
            rows.push(RankingRow {
                user_id: *user_id,
                display_name: user.profile.display_name.clone(),
                compliance_score: compliance_score(&window),
                predicted_type: prediction.label,
                confidence: prediction.confidence,
                prediction_status: prediction.status,
                trend: trend(&window, &self.config.adherence).ok(),
                last_report_at: self
                    .state
                    .user_reports(*user_id)
                    .map(|r| r.reported_at)
                    .max(),
            });
        }
        let order = self.config.ranking_order;
        rows.sort_by(|a, b| {
            let by_score = match (a.compliance_score, b.compliance_score) {
                (Some(x), Some(y)) => match order {
                    RankingOrder::Asc => x.total_cmp(&y),
                    RankingOrder::Desc => y.total_cmp(&x),
                },
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => std::cmp::Ordering::Equal,
            };
            by_score.then(a.user_id.cmp(&b.user_id))
        });
        Ok(rows)
    }

    /// Sends `text` to every registered chat matching `filter`, judged by
    /// each user's post-model prediction as of today.
    pub fn broadcast(&mut self, text: &str, filter: CohortFilter) -> Result<Vec<OutboundMessage>> {
        if text.trim().is_empty() {
            return Err(ServiceError::EmptyBroadcast);
        }
        if let CohortFilter::User(u) = filter {
            self.user(u)?;
        }
        let today = self.today();
        let mut recipients = Vec::new();
        for user_id in self.state.users.keys() {
            let keep = match filter {
                CohortFilter::All => true,
                CohortFilter::Type(t) => self.post_predict(*user_id, today)?.label == t.as_str(),
                CohortFilter::User(u) => *user_id == u,
            };
            if keep {
                recipients.push(*user_id);
            }
        }
        let messages = recipients
            .iter()
            .map(|u| OutboundMessage::text(self.state.users[u].chat_id, text))
            .collect();
        self.emit(EventBody::BroadcastSent {
            text: text.to_string(),
            filter: filter.to_string(),
            recipients,
        })?;
        Ok(messages)
    }

    pub fn user_detail(&self, user_id: UserId, as_of: NaiveDate) -> Result<UserDetail> {
        let user = self.user(user_id)?;
        let window = self.window(user_id, as_of);
        let latest = self.state.latest_plan(user_id);
        let feedback =
            latest.map(|rec| feedback_summary(&rec.plan, &rec.reports, &self.catalog.pool));
        let mut label_trail = Vec::new();
        for kind in [ModelKind::Pre, ModelKind::Post] {
            label_trail.extend(
                self.state
                    .models
                    .model(kind)
                    .instances
                    .iter()
                    .filter(|i| i.subject == Some(user_id))
                    .map(|i| LabelTrailEntry {
                        model: kind,
                        instance_id: i.instance_id,
                        label: i.label.clone(),
                        source: i.source,
                        created_at: i.created_at,
                    }),
            );
        }
        label_trail.sort_by_key(|e| e.created_at);
        Ok(UserDetail {
            profile: user.profile.clone(),
            chat_id: user.chat_id,
            registered_at: user.registered_at,
            suggested_template: user.suggested_template.clone(),
            plan_ids: user.plan_ids.clone(),
            current_plan: latest.map(|r| r.plan.clone()),
            feedback,
            window_start: window.start,
            window_end: window.end,
            compliance_score: compliance_score(&window),
            trend: trend(&window, &self.config.adherence).ok(),
            daily_scores: window.daily_scores,
            emotions: self.state.user_emotions(user_id).to_vec(),
            prediction: self.post_predict(user_id, as_of)?,
            label_trail,
        })
    }

    pub fn feedback(&self, plan_id: PlanId) -> Result<FeedbackSummary> {
        let rec = self
            .state
            .plans
            .get(&plan_id)
            .ok_or(ServiceError::UnknownPlan(plan_id))?;
        Ok(feedback_summary(
            &rec.plan,
            &rec.reports,
            &self.catalog.pool,
        ))
    }

    pub fn propose_clusters(&self) -> Vec<ActivityCluster> {
        planning::propose_clusters(&self.catalog.pool, self.config.planning.cluster_threshold)
    }

    pub fn confirm_clusters(
        &mut self,
        proposed: &[ActivityCluster],
        edits: &[ClusterEdit],
    ) -> Result<Vec<ActivityCluster>> {
        let clusters = planning::confirm_clusters(proposed, edits, &self.catalog.pool)?;
        self.emit(EventBody::ClusterConfirmed {
            clusters: clusters.clone(),
        })?;
        Ok(self.state.clusters.clone())
    }

    pub fn export_model(&self, kind: ModelKind) -> String {
        self.state.models.model(kind).export_json()
    }

    // ---- bot channel ----

    /// Handles one inbound update in wire form.
    pub fn handle_update(&mut self, wire: &[u8]) -> Result<Effects> {
        let update = parse_update(wire, self.config.slots_per_day)?;
        let chat_id = update.chat_id;
        let corpus = &self.catalog.corpus;
        let reply = |intent: Intent| OutboundMessage::text(chat_id, corpus.reply(intent));
        let Some(user) = self.state.user_by_chat(chat_id) else {
            return match update.payload {
                UpdatePayload::Message(Command::Start) => Ok(Effects {
                    events: Vec::new(),
                    messages: vec![reply(Intent::Start)],
                }),
                _ => Err(BotError::UnknownChat(chat_id).into()),
            };
        };
        let user_id = user.profile.user_id;
        let stale = self
            .state
            .chat_cursors
            .get(&chat_id)
            .is_some_and(|c| update.update_id <= *c);

        let mut effects = Effects::default();
        match update.payload {
            UpdatePayload::Message(cmd) => {
                let message = match cmd {
                    Command::Start => reply(Intent::Start),
                    Command::Help => reply(Intent::Help),
                    Command::Mood => render_mood_keyboard(chat_id, corpus),
                    Command::NewPlan => {
                        let today = self.today();
                        let plans = self.state.user_plans(user_id);
                        match plan_in_force(&plans, today) {
                            Some(plan) => {
                                render_plan_day(chat_id, plan, today, &self.catalog.pool, corpus)?
                            }
                            None => reply(Intent::NoPlanYet),
                        }
                    }
                    Command::Other(_) => reply(Intent::Fallback),
                };
                effects.messages.push(message);
            }
            UpdatePayload::Callback(_) if stale => {
                effects.messages.push(reply(Intent::AlreadyRecorded));
            }
            UpdatePayload::Callback(CallbackData::Comply {
                plan_id,
                date,
                slot_index,
                complied,
            }) => {
                let slot_known = self
                    .state
                    .plans
                    .get(&plan_id)
                    .filter(|r| r.plan.user_id == user_id)
                    .map(|r| {
                        (
                            r.plan.slot(date, slot_index).is_some(),
                            r.reported(date, slot_index),
                        )
                    });
                let message = match slot_known {
                    None | Some((false, _)) => reply(Intent::UnknownSlot),
                    Some((true, true)) => reply(Intent::AlreadyRecorded),
                    Some((true, false)) => {
                        let seq = self.emit(EventBody::ComplianceReported {
                            report: ComplianceReport {
                                user_id,
                                plan_id,
                                date,
                                slot_index,
                                complied,
                                reported_at: self.now(),
                            },
                            chat_id: Some(chat_id),
                            update_id: Some(update.update_id),
                        })?;
                        effects.events.push(seq);
                        let corpus = &self.catalog.corpus;
                        OutboundMessage::text(
                            chat_id,
                            corpus.reply(if complied {
                                Intent::ComplianceRecorded
                            } else {
                                Intent::SkipRecorded
                            }),
                        )
                    }
                };
                effects.messages.push(message);
            }
            UpdatePayload::Callback(CallbackData::Emotion(emotion)) => {
                let seq = self.emit(EventBody::EmotionReported {
                    report: EmotionReport {
                        user_id,
                        emotion,
                        reported_at: self.now(),
                    },
                    chat_id: Some(chat_id),
                    update_id: Some(update.update_id),
                })?;
                effects.events.push(seq);
                effects.messages.push(OutboundMessage::text(
                    chat_id,
                    self.catalog.corpus.reply(Intent::EmotionRecorded),
                ));
            }
        }
        Ok(effects)
    }

    /// Dispatches every pending notification due now, once. Notifications
    /// more than a day late, or whose plan has been superseded for that
    /// date, expire instead.
    pub fn collect_due(&mut self) -> Result<Vec<Dispatch>> {
        let now = self.now();
        let due = self.state.queue.due(now);
        for id in due.expire {
            self.emit(EventBody::NotificationExpired {
                notification_id: id,
            })?;
        }
        let mut out = Vec::with_capacity(due.dispatch.len());
        for id in due.dispatch {
            let n = self.state.queue.notifications[&id].clone();
            let plans = self.state.user_plans(n.user_id);
            let in_force = plan_in_force(&plans, n.date).map(|p| p.plan_id) == Some(n.plan_id);
            if !in_force {
                self.emit(EventBody::NotificationExpired {
                    notification_id: id,
                })?;
                continue;
            }
            let chat_id = self.state.users[&n.user_id].chat_id;
            let plan = &self.state.plans[&n.plan_id].plan;
            let message = render_reminder(
                chat_id,
                plan,
                n.date,
                n.slot_index,
                &self.catalog.pool,
                &self.catalog.corpus,
            )?;
            self.emit(EventBody::NotificationDispatched {
                notification_id: id,
            })?;
            out.push(Dispatch {
                notification: self.state.queue.notifications[&id].clone(),
                message,
            });
        }
        Ok(out)
    }
}
