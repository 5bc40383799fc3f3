//! Closed-loop experiment: register a cohort, run weeks of plans through the
//! bot wire path, let the simulated caregiver refine the training users, then
//! score the post-model on the held-out users.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, Utc};
use coachme_core::adherence::AdherenceConfig;
use coachme_core::bot::{callback_update, message_update, CallbackData, OutboundMessage};
use coachme_core::domain::{UserType, Vocabulary};
use coachme_core::ids::{ChatId, UserId};
use coachme_core::{Catalog, CoachConfig, CoachMe, SimClock};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{synth_cohort_with, BehaviorParams, Cohort, SimUser, TypeMix};
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Assertions {
    /// Post-model accuracy floor against latent types.
    pub min_accuracy: Option<f64>,
    /// Largest allowed shortfall below the threshold-rule oracle.
    pub oracle_margin: Option<f64>,
    /// Observed mean compliance per type must sit within this many binomial
    /// standard deviations of the mean probability.
    pub convergence_sigmas: Option<f64>,
}

impl Default for Assertions {
    fn default() -> Self {
        Assertions {
            min_accuracy: Some(0.80),
            oracle_margin: Some(0.05),
            convergence_sigmas: Some(3.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_users: usize,
    pub mix: TypeMix,
    /// Share of users the caregiver refines. At 1.0 the held-out set is the
    /// training set itself.
    pub train_fraction: f64,
    pub weeks: u32,
    pub seed: u64,
    /// First plan day.
    pub start: NaiveDate,
    pub behavior: BehaviorParams,
    /// Replaces every user's compliance probability, unclamped.
    pub force_comply_prob: Option<f64>,
    /// Daily chance that a user reports a mood.
    pub mood_prob: f64,
    /// Dispatcher polls per simulated day, at random minutes.
    pub polls_per_day: u32,
    /// Service configuration: k, weights, thresholds, S.
    pub service: CoachConfig,
    pub assertions: Assertions,
}

/// Post-model weight of `compliance_score` in the default experiment: as much
/// as the other fifteen post-model fields together.
pub const POST_SCORE_WEIGHT: f64 = 15.0;

fn default_service() -> CoachConfig {
    let mut service = CoachConfig {
        sync_every_append: false,
        ..CoachConfig::default()
    };
    service
        .iml
        .post
        .weights
        .insert("compliance_score".into(), POST_SCORE_WEIGHT);
    service
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_users: 150,
            mix: TypeMix::default(),
            train_fraction: 1.0 / 3.0,
            weeks: 4,
            seed: 42,
            start: NaiveDate::from_ymd_opt(2025, 3, 3).expect("valid date"),
            behavior: BehaviorParams::default(),
            force_comply_prob: None,
            mood_prob: 0.3,
            polls_per_day: 4,
            service: default_service(),
            assertions: Assertions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config document; `seed` must be given explicitly.
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        if raw.get("seed").is_none() {
            return Err(SimError::ConfigInvalid("seed is mandatory".into()));
        }
        let config: ExperimentConfig =
            serde_json::from_value(raw).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::ConfigInvalid(m.to_string()));
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must be in (0, 1]");
        }
        if self.weeks == 0 {
            return bad("weeks must be positive");
        }
        if !(0.0..=1.0).contains(&self.mood_prob) {
            return bad("mood_prob must be in [0, 1]");
        }
        if let Some(p) = self.force_comply_prob {
            if !(0.0..=1.0).contains(&p) {
                return bad("force_comply_prob must be in [0, 1]");
            }
        }
        let b = &self.behavior;
        if [b.active, b.neutral, b.passive]
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return bad("behavior probabilities must be in [0, 1]");
        }
        self.service.validate()?;
        if self.n_train() == 0 {
            return bad("train split is empty");
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        ((self.n_users as f64 * self.train_fraction).round() as usize).min(self.n_users)
    }

    pub fn days(&self) -> u32 {
        self.weeks * 7
    }

    /// Last simulated day; the date every window is judged at.
    pub fn as_of(&self) -> NaiveDate {
        self.start + Duration::days(self.days() as i64 - 1)
    }
}

/// Template the simulated caregiver picks at registration.
pub fn caregiver_template(profile: &coachme_core::domain::ProfileInput) -> &'static str {
    let bmi = profile.weight_kg / (profile.height_m * profile.height_m);
    let metabolic = ["obesity", "prediabetes", "type2-diabetes"];
    let sporty = ["cycling", "dancing", "gym", "hiking", "running", "swimming"];
    if bmi >= 30.0 || metabolic.contains(&profile.health_condition.as_str()) {
        "diet-focus-v1"
    } else if profile.age >= 65 {
        "gentle-start-v1"
    } else if profile
        .preferred_activities
        .iter()
        .any(|a| sporty.contains(&a.as_str()))
    {
        "move-more-v1"
    } else {
        "baseline-v1"
    }
}

/// Template the simulated caregiver refines to, given the observed type.
pub fn refinement_template(observed: UserType) -> &'static str {
    match observed {
        UserType::Active => "move-more-v1",
        UserType::Neutral => "baseline-v1",
        UserType::Passive => "gentle-start-v1",
    }
}

/// The threshold rule applied to a score the simulator tallied itself.
pub fn threshold_oracle(score: Option<f64>, cfg: &AdherenceConfig) -> UserType {
    match score {
        None => UserType::Neutral,
        Some(s) if s >= cfg.active_threshold => UserType::Active,
        Some(s) if s >= cfg.neutral_threshold => UserType::Neutral,
        Some(_) => UserType::Passive,
    }
}

/// Rows are latent types, columns predictions, both in Active, Neutral,
/// Passive order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u32>>,
}

impl Confusion {
    pub fn new() -> Self {
        Confusion {
            labels: UserType::ALL
                .iter()
                .map(|t| t.as_str().to_string())
                .collect(),
            counts: vec![vec![0; 3]; 3],
        }
    }

    fn index(t: UserType) -> usize {
        UserType::ALL.iter().position(|&x| x == t).expect("listed")
    }

    pub fn add(&mut self, actual: UserType, predicted: UserType) {
        self.counts[Self::index(actual)][Self::index(predicted)] += 1;
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u32 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<16}", "latent\\predicted");
        for l in &self.labels {
            out += &format!("{l:>9}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out += &format!("{l:<16}");
            for c in row {
                out += &format!("{c:>9}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub accuracy: f64,
    pub correct: u32,
    pub total: u32,
    pub confusion: Confusion,
}

impl From<Confusion> for ModelScore {
    fn from(confusion: Confusion) -> Self {
        ModelScore {
            accuracy: confusion.accuracy(),
            correct: confusion.correct(),
            total: confusion.total(),
            confusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub users: usize,
    pub slots: u64,
    pub mean_probability: f64,
    pub observed: f64,
    /// Binomial standard deviation of `observed` around `mean_probability`.
    pub sigma: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub updates: u64,
    pub complied: u64,
    pub skipped: u64,
    pub emotions: u64,
    pub reminders: u64,
    pub events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub as_of: NaiveDate,
    /// Post-model predictions against latent types.
    pub post_model: ModelScore,
    /// Post-model predictions against the threshold rule on observed scores,
    /// i.e. against the label a caregiver would give.
    pub post_rule_agreement: f64,
    /// Threshold rule on the simulator's own tallies against latent types.
    pub oracle: ModelScore,
    /// Registration suggestions matching the caregiver's first template,
    /// over every user after the first.
    pub pre_model_agreement: f64,
    pub post_labels: BTreeMap<String, u32>,
    pub convergence: BTreeMap<String, Convergence>,
    pub delivery: Delivery,
    pub assertions: Vec<AssertionResult>,
    pub passed: bool,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub report: Report,
    /// The event log as NDJSON.
    pub events: String,
    pub service: CoachMe,
}

/// Per-user tallies kept by the simulator, independent of the service.
#[derive(Debug, Clone, Default)]
struct Tally {
    /// (assigned, complied) per day index.
    days: Vec<(u32, u32)>,
}

impl Tally {
    fn score(&self, window_days: usize) -> Option<f64> {
        let from = self.days.len().saturating_sub(window_days);
        let (a, c) = self.days[from..]
            .iter()
            .fold((0u32, 0u32), |(a, c), &(x, y)| (a + x, c + y));
        (a > 0).then(|| c as f64 / a as f64)
    }
}

struct Sim<'a> {
    cfg: &'a ExperimentConfig,
    svc: CoachMe,
    clock: Arc<SimClock>,
    rng: ChaCha8Rng,
    next_update: u64,
    delivery: Delivery,
}

impl Sim<'_> {
    fn local(&self, date: NaiveDate, minutes: u32) -> DateTime<Utc> {
        let t =
            NaiveTime::from_num_seconds_from_midnight_opt(minutes * 60, 0).expect("minute of day");
        self.svc.config().triggers.local_to_utc(date, t)
    }

    fn send(&mut self, wire: Vec<u8>) -> Result<coachme_core::service::Effects, SimError> {
        self.delivery.updates += 1;
        Ok(self.svc.handle_update(&wire)?)
    }

    fn text(&mut self, chat: ChatId, text: &str) -> Result<Vec<OutboundMessage>, SimError> {
        let id = self.bump();
        Ok(self.send(message_update(id, chat, text))?.messages)
    }

    fn press(&mut self, chat: ChatId, data: &str) -> Result<(), SimError> {
        let id = self.bump();
        let effects = self.send(callback_update(id, chat, data))?;
        if effects.events.len() != 1 {
            return Err(SimError::Inconsistent(format!(
                "press {data:?} from chat {chat} appended {} events",
                effects.events.len()
            )));
        }
        Ok(())
    }

    fn bump(&mut self) -> u64 {
        self.next_update += 1;
        self.next_update
    }

    fn poll(&mut self) -> Result<(), SimError> {
        self.delivery.reminders += self.svc.collect_due()?.len() as u64;
        Ok(())
    }

    /// One evening check-in: open today's plan, answer every slot, maybe
    /// report a mood. Returns (assigned, complied).
    fn check_in(&mut self, user: &SimUser, p: f64) -> Result<(u32, u32), SimError> {
        let s = self.svc.config().slots_per_day;
        let msgs = self.text(user.chat_id, "/newplan")?;
        let mut answers = Vec::new();
        for row in msgs.iter().flat_map(|m| &m.keyboard) {
            let mut yes = None;
            let mut no = None;
            for b in row {
                if let Ok(CallbackData::Comply { complied, .. }) = CallbackData::parse(&b.data, s) {
                    if complied {
                        yes = Some(b.data.clone());
                    } else {
                        no = Some(b.data.clone());
                    }
                }
            }
            if let (Some(yes), Some(no)) = (yes, no) {
                answers.push((yes, no));
            }
        }
        let mut complied = 0;
        for (yes, no) in &answers {
            if self.rng.random_bool(p) {
                complied += 1;
                self.delivery.complied += 1;
                self.press(user.chat_id, yes)?;
            } else {
                self.delivery.skipped += 1;
                self.press(user.chat_id, no)?;
            }
        }
        if self.rng.random_bool(self.cfg.mood_prob) {
            let msgs = self.text(user.chat_id, "/mood")?;
            let buttons: Vec<String> = msgs
                .iter()
                .flat_map(|m| m.buttons())
                .map(|b| b.data.clone())
                .collect();
            if let Some(data) = buttons.choose(&mut self.rng).cloned() {
                self.delivery.emotions += 1;
                self.press(user.chat_id, &data)?;
            }
        }
        Ok((answers.len() as u32, complied))
    }
}

/// Runs the experiment against an in-memory service, or against `data_dir`
/// when given (which must not already hold a log).
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data_dir: Option<&Path>,
) -> Result<Outcome, SimError> {
    cfg.validate()?;
    let catalog = Catalog::starter();
    let cohort = synth_cohort_with(
        cfg.n_users,
        cfg.mix,
        &cfg.behavior,
        &catalog.vocabulary,
        cfg.seed,
    )?;
    run_cohort(cfg, catalog, &cohort, data_dir)
}

pub fn run_cohort(
    cfg: &ExperimentConfig,
    catalog: Catalog,
    cohort: &Cohort,
    data_dir: Option<&Path>,
) -> Result<Outcome, SimError> {
    cfg.validate()?;
    let start_at = cfg.service.triggers.local_to_utc(
        cfg.start - Duration::days(1),
        NaiveTime::from_hms_opt(9, 0, 0).expect("time"),
    );
    let clock = Arc::new(SimClock::new(start_at));
    let svc = match data_dir {
        Some(dir) => {
            if dir.join(coachme_core::persistence::EVENTS_FILE).exists() {
                return Err(SimError::ConfigInvalid(format!(
                    "{} already holds an event log",
                    dir.display()
                )));
            }
            std::fs::create_dir_all(dir)?;
            let (svc, _) = CoachMe::open(cfg.service.clone(), catalog, dir, clock.clone())?;
            svc
        }
        None => CoachMe::in_memory(cfg.service.clone(), catalog, clock.clone())?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut sim = Sim {
        cfg,
        svc,
        clock,
        rng,
        next_update: 0,
        delivery: Delivery::default(),
    };

    // registration; the caregiver accepts or overrides each suggestion
    let mut users: Vec<(UserId, &SimUser, &'static str)> = Vec::new();
    let mut pre_agree = 0u32;
    for (i, u) in cohort.users.iter().enumerate() {
        let reg = sim.svc.register_user(&u.profile, u.chat_id)?;
        let chosen = caregiver_template(&u.profile);
        if i > 0 && reg.suggestion.label == chosen {
            pre_agree += 1;
        }
        users.push((reg.user_id, u, chosen));
    }
    let prob = |u: &SimUser| {
        cfg.force_comply_prob
            .unwrap_or_else(|| u.behavior.probability())
    };

    let mut tallies = vec![Tally::default(); users.len()];
    for week in 0..cfg.weeks {
        let week_start = cfg.start + Duration::days(7 * week as i64);
        sim.clock
            .set(sim.local(week_start - Duration::days(1), 18 * 60));
        for &(uid, _, template) in &users {
            sim.svc.assign_plan(uid, template, week_start)?;
        }
        for day in 0..7 {
            let date = week_start + Duration::days(day);
            let mut polls: Vec<u32> = (0..cfg.polls_per_day)
                .map(|_| sim.rng.random_range(0..24 * 60))
                .collect();
            polls.sort_unstable();
            let evening = 20 * 60;
            for &m in polls.iter().filter(|&&m| m < evening) {
                sim.clock.set(sim.local(date, m));
                sim.poll()?;
            }
            for (i, &(_, u, _)) in users.iter().enumerate() {
                sim.clock
                    .set(sim.local(date, evening) + Duration::seconds(i as i64));
                let day_tally = sim.check_in(u, prob(u))?;
                tallies[i].days.push(day_tally);
            }
            for &m in polls.iter().filter(|&&m| m >= evening) {
                sim.clock.set(sim.local(date, m).max(sim.clock_now()));
                sim.poll()?;
            }
        }
    }

    // the caregiver reviews the training users and refines their plans
    let as_of = cfg.as_of();
    sim.clock.set(sim.local(as_of + Duration::days(1), 9 * 60));
    let n_train = cfg.n_train();
    let mut post_labels: BTreeMap<String, u32> = BTreeMap::new();
    for &(uid, _, _) in &users[..n_train] {
        let observed = sim.svc.user_detail(uid, as_of)?.compliance_score;
        let observed = threshold_oracle(observed, &cfg.service.adherence);
        let r = sim
            .svc
            .refine_plan(uid, refinement_template(observed), as_of)?;
        *post_labels.entry(r.observed_type.to_string()).or_default() += 1;
    }

    let test: Vec<usize> = if n_train == users.len() {
        (0..users.len()).collect()
    } else {
        (n_train..users.len()).collect()
    };
    let window = cfg.service.adherence.window_days as usize;
    let mut post = Confusion::new();
    let mut oracle = Confusion::new();
    let mut rule_agree = 0u32;
    for &i in &test {
        let (uid, u, _) = users[i];
        let latent = u.behavior.latent_type;
        let predicted: UserType = sim
            .svc
            .post_predict(uid, as_of)?
            .label
            .parse()
            .map_err(|_| SimError::Inconsistent("post-model label is not a user type".into()))?;
        let rule = threshold_oracle(tallies[i].score(window), &cfg.service.adherence);
        post.add(latent, predicted);
        oracle.add(latent, rule);
        if predicted == rule {
            rule_agree += 1;
        }
    }

    let mut convergence = BTreeMap::new();
    for t in UserType::ALL {
        let members: Vec<usize> = (0..users.len())
            .filter(|&i| users[i].1.behavior.latent_type == t)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut slots = 0u64;
        let mut complied = 0u64;
        let mut expected = 0.0;
        let mut variance = 0.0;
        for &i in &members {
            let p = prob(users[i].1);
            for &(a, c) in &tallies[i].days {
                slots += a as u64;
                complied += c as u64;
                expected += a as f64 * p;
                variance += a as f64 * p * (1.0 - p);
            }
        }
        if slots == 0 {
            continue;
        }
        convergence.insert(
            t.to_string(),
            Convergence {
                users: members.len(),
                slots,
                mean_probability: expected / slots as f64,
                observed: complied as f64 / slots as f64,
                sigma: variance.sqrt() / slots as f64,
            },
        );
    }

    sim.svc.flush()?;
    sim.delivery.events = sim.svc.log().last_seq();
    let post: ModelScore = post.into();
    let oracle: ModelScore = oracle.into();
    let assertions = check(&cfg.assertions, &post, &oracle, &convergence);
    let report = Report {
        config: cfg.clone(),
        n_train,
        n_test: test.len(),
        as_of,
        post_rule_agreement: ratio(rule_agree, test.len()),
        post_model: post,
        oracle,
        pre_model_agreement: ratio(pre_agree, users.len() - 1),
        post_labels,
        convergence,
        delivery: sim.delivery.clone(),
        passed: assertions.iter().all(|a| a.passed),
        assertions,
    };
    let events = match sim.svc.log().memory_lines() {
        Some(lines) => lines.iter().map(|l| format!("{l}\n")).collect(),
        None => std::fs::read_to_string(sim.svc.log().path().expect("file log"))?,
    };
    Ok(Outcome {
        report,
        events,
        service: sim.svc,
    })
}

impl Sim<'_> {
    fn clock_now(&self) -> DateTime<Utc> {
        use coachme_core::Clock;
        self.clock.now()
    }
}

fn ratio(n: u32, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn check(
    a: &Assertions,
    post: &ModelScore,
    oracle: &ModelScore,
    convergence: &BTreeMap<String, Convergence>,
) -> Vec<AssertionResult> {
    let mut out = Vec::new();
    if let Some(min) = a.min_accuracy {
        out.push(AssertionResult {
            name: "min_accuracy".into(),
            passed: post.accuracy >= min,
            detail: format!("accuracy {:.4} vs floor {min}", post.accuracy),
        });
    }
    if let Some(margin) = a.oracle_margin {
        let floor = oracle.accuracy - margin;
        out.push(AssertionResult {
            name: "oracle_margin".into(),
            passed: post.accuracy >= floor - 1e-12,
            detail: format!(
                "accuracy {:.4} vs oracle {:.4} - {margin}",
                post.accuracy, oracle.accuracy
            ),
        });
    }
    if let Some(k) = a.convergence_sigmas {
        for (t, c) in convergence {
            let gap = (c.observed - c.mean_probability).abs();
            out.push(AssertionResult {
                name: format!("convergence_{t}"),
                passed: gap <= k * c.sigma + 1e-12,
                detail: format!(
                    "observed {:.4} vs p {:.4}, gap {gap:.4}, {k} sigma {:.4}",
                    c.observed,
                    c.mean_probability,
                    k * c.sigma
                ),
            });
        }
    }
    out
}

/// Cohort generation for the `gen` subcommand, with the starter vocabulary.
pub fn gen_cohort(n: usize, mix: TypeMix, seed: u64) -> Result<Cohort, SimError> {
    synth_cohort_with(
        n,
        mix,
        &BehaviorParams::default(),
        &Vocabulary::default(),
        seed,
    )
}
