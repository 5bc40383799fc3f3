//! Bot channel wire format: inbound updates, outbound messages with one-click
//! keyboards, callback-data grammar and the predefined response corpus.
//!
//! Inbound, one JSON object per update:
//!
//! ```json
//! {"update_id":1,"message":{"chat_id":9,"text":"/newplan"}}
//! {"update_id":2,"callback":{"chat_id":9,"data":"comply:p1:2025-03-10:0:yes"}}
//! ```
//!
//! Outbound:
//!
//! ```json
//! {"chat_id":9,"text":"...","keyboard":[[{"label":"Done","data":"..."}]]}
//! ```
//!
//! On a stream transport each object occupies one line.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::domain::{ActivityPool, Emotion, Plan};
use crate::ids::{ChatId, PlanId};

/// Telegram's limit on callback data.
pub const MAX_CALLBACK_BYTES: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BotError {
    #[error("malformed update: {0}")]
    MalformedUpdate(String),
    #[error("bad callback data: {0:?}")]
    BadCallbackData(String),
    #[error("date {0} is outside the plan week")]
    DateOutOfPlan(NaiveDate),
    #[error("no registered user for chat {0}")]
    UnknownChat(ChatId),
    #[error("response corpus is missing intent {0:?}")]
    MissingIntent(Intent),
    #[error("response corpus JSON: {0}")]
    Corpus(String),
}

impl BotError {
    pub fn code(&self) -> &'static str {
        match self {
            BotError::MalformedUpdate(_) => "MalformedUpdate",
            BotError::BadCallbackData(_) => "BadCallbackData",
            BotError::DateOutOfPlan(_) => "DateOutOfPlan",
            BotError::UnknownChat(_) => "UnknownChat",
            BotError::MissingIntent(_) => "MissingIntent",
            BotError::Corpus(_) => "Corpus",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct WireMessage {
    chat_id: i64,
    text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct WireCallback {
    chat_id: i64,
    data: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct WireUpdate {
    update_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    message: Option<WireMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    callback: Option<WireCallback>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Start,
    NewPlan,
    Mood,
    Help,
    /// Anything else; answered from the fallback entry.
    Other(String),
}

impl Command {
    pub fn parse(text: &str) -> Command {
        match text.trim() {
            "/start" => Command::Start,
            "/newplan" => Command::NewPlan,
            "/mood" => Command::Mood,
            "/help" => Command::Help,
            other => Command::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallbackData {
    Comply {
        plan_id: PlanId,
        date: NaiveDate,
        slot_index: u8,
        complied: bool,
    },
    Emotion(Emotion),
}

impl fmt::Display for CallbackData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CallbackData::Comply {
                plan_id,
                date,
                slot_index,
                complied,
            } => write!(
                f,
                "comply:{plan_id}:{}:{slot_index}:{}",
                date.format("%Y-%m-%d"),
                if *complied { "yes" } else { "no" }
            ),
            CallbackData::Emotion(e) => write!(f, "emotion:{}", e.as_str()),
        }
    }
}

impl FromStr for CallbackData {
    type Err = BotError;

    /// Parses without a slot bound; see [`CallbackData::parse`].
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CallbackData::parse(s, u8::MAX)
    }
}

impl CallbackData {
    /// Parses `comply:<plan_id>:<date>:<slot>:<yes|no>` or
    /// `emotion:<happy|sad|angry|neutral>`, rejecting slots `>= slots_per_day`.
    pub fn parse(s: &str, slots_per_day: u8) -> Result<Self, BotError> {
        let bad = || BotError::BadCallbackData(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["comply", plan, date, slot, answer] => {
                let plan_id = plan.parse().map_err(|_| bad())?;
                let date = NaiveDate::parse_from_str(date, "%Y-%m-%d").map_err(|_| bad())?;
                if slot.is_empty() || !slot.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                let slot_index: u8 = slot.parse().map_err(|_| bad())?;
                if slot_index >= slots_per_day {
                    return Err(bad());
                }
                let complied = match *answer {
                    "yes" => true,
                    "no" => false,
                    _ => return Err(bad()),
                };
                Ok(CallbackData::Comply {
                    plan_id,
                    date,
                    slot_index,
                    complied,
                })
            }
            ["emotion", e] => e.parse().map(CallbackData::Emotion).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpdatePayload {
    Message(Command),
    Callback(CallbackData),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BotUpdate {
    pub update_id: u64,
    pub chat_id: ChatId,
    pub payload: UpdatePayload,
}

/// Decodes one inbound update.
pub fn parse_update(wire: &[u8], slots_per_day: u8) -> Result<BotUpdate, BotError> {
    let raw: WireUpdate =
        serde_json::from_slice(wire).map_err(|e| BotError::MalformedUpdate(e.to_string()))?;
    match (raw.message, raw.callback) {
        (Some(m), None) => Ok(BotUpdate {
            update_id: raw.update_id,
            chat_id: ChatId(m.chat_id),
            payload: UpdatePayload::Message(Command::parse(&m.text)),
        }),
        (None, Some(c)) => Ok(BotUpdate {
            update_id: raw.update_id,
            chat_id: ChatId(c.chat_id),
            payload: UpdatePayload::Callback(CallbackData::parse(&c.data, slots_per_day)?),
        }),
        _ => Err(BotError::MalformedUpdate(
            "exactly one of message or callback is required".into(),
        )),
    }
}

/// Wire bytes of a text message update.
pub fn message_update(update_id: u64, chat_id: ChatId, text: &str) -> Vec<u8> {
    serde_json::to_vec(&WireUpdate {
        update_id,
        message: Some(WireMessage {
            chat_id: chat_id.0,
            text: text.to_string(),
        }),
        callback: None,
    })
    .expect("update serializes")
}

/// Wire bytes of a button press.
pub fn callback_update(update_id: u64, chat_id: ChatId, data: &str) -> Vec<u8> {
    serde_json::to_vec(&WireUpdate {
        update_id,
        message: None,
        callback: Some(WireCallback {
            chat_id: chat_id.0,
            data: data.to_string(),
        }),
    })
    .expect("update serializes")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Button {
    pub label: String,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundMessage {
    pub chat_id: ChatId,
    pub text: String,
    #[serde(default)]
    pub keyboard: Vec<Vec<Button>>,
}

impl OutboundMessage {
    pub fn text(chat_id: ChatId, text: impl Into<String>) -> Self {
        OutboundMessage {
            chat_id,
            text: text.into(),
            keyboard: Vec::new(),
        }
    }

    pub fn buttons(&self) -> impl Iterator<Item = &Button> {
        self.keyboard.iter().flatten()
    }

    /// One JSON line for the stream transport.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

/// Reply keys of the predefined corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    Start,
    Help,
    Mood,
    NoPlanYet,
    PlanHeader,
    Reminder,
    ComplianceRecorded,
    SkipRecorded,
    AlreadyRecorded,
    UnknownSlot,
    EmotionRecorded,
    Fallback,
}

impl Intent {
    pub const ALL: [Intent; 12] = [
        Intent::Start,
        Intent::Help,
        Intent::Mood,
        Intent::NoPlanYet,
        Intent::PlanHeader,
        Intent::Reminder,
        Intent::ComplianceRecorded,
        Intent::SkipRecorded,
        Intent::AlreadyRecorded,
        Intent::UnknownSlot,
        Intent::EmotionRecorded,
        Intent::Fallback,
    ];
}

/// Predefined replies keyed by intent. `{date}` in an entry is replaced with
/// the relevant date.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<Intent, String>",
    into = "BTreeMap<Intent, String>"
)]
pub struct ResponseCorpus {
    replies: BTreeMap<Intent, String>,
}

impl Default for ResponseCorpus {
    fn default() -> Self {
        let replies = [
            (Intent::Start, "Welcome to CoachMe! Ask your caregiver to register this chat, then send /newplan to see today's activities."),
            (Intent::Help, "Commands: /newplan shows today's plan, /mood tells your caregiver how you feel."),
            (Intent::Mood, "How do you feel right now?"),
            (Intent::NoPlanYet, "You have no plan for today yet. Your caregiver will send one soon."),
            (Intent::PlanHeader, "Your plan for {date}:"),
            (Intent::Reminder, "Reminder for {date}:"),
            (Intent::ComplianceRecorded, "Great job! Recorded as done."),
            (Intent::SkipRecorded, "Thanks for letting us know. Recorded as skipped."),
            (Intent::AlreadyRecorded, "This activity was already recorded."),
            (Intent::UnknownSlot, "That activity is not part of your current plan."),
            (Intent::EmotionRecorded, "Thanks for sharing how you feel."),
            (Intent::Fallback, "Sorry, I did not get that. Send /help to see what I can do."),
        ]
        .into_iter()
        .map(|(i, s)| (i, s.to_string()))
        .collect();
        ResponseCorpus { replies }
    }
}

impl TryFrom<BTreeMap<Intent, String>> for ResponseCorpus {
    type Error = BotError;

    fn try_from(replies: BTreeMap<Intent, String>) -> Result<Self, Self::Error> {
        if let Some(missing) = Intent::ALL.into_iter().find(|i| !replies.contains_key(i)) {
            return Err(BotError::MissingIntent(missing));
        }
        Ok(ResponseCorpus { replies })
    }
}

impl From<ResponseCorpus> for BTreeMap<Intent, String> {
    fn from(c: ResponseCorpus) -> Self {
        c.replies
    }
}

impl ResponseCorpus {
    pub fn from_json(json: &str) -> Result<Self, BotError> {
        serde_json::from_str(json).map_err(|e| BotError::Corpus(e.to_string()))
    }

    pub fn reply(&self, intent: Intent) -> &str {
        &self.replies[&intent]
    }

    pub fn reply_on(&self, intent: Intent, date: NaiveDate) -> String {
        self.reply(intent)
            .replace("{date}", &date.format("%Y-%m-%d").to_string())
    }

    pub fn contains_text(&self, text: &str) -> bool {
        self.replies.values().any(|r| r == text)
    }
}

fn slot_row(plan: &Plan, date: NaiveDate, slot_index: u8) -> Vec<Button> {
    [("Done", true), ("Skipped", false)]
        .into_iter()
        .map(|(label, complied)| {
            let data = CallbackData::Comply {
                plan_id: plan.plan_id,
                date,
                slot_index,
                complied,
            }
            .to_string();
            debug_assert!(data.len() <= MAX_CALLBACK_BYTES);
            Button {
                label: label.to_string(),
                data,
            }
        })
        .collect()
}

fn titled_lines(header: String, titles: impl Iterator<Item = String>) -> String {
    let mut text = header;
    for (i, title) in titles.enumerate() {
        text.push_str(&format!("\n{}. {title}", i + 1));
    }
    text
}

fn title_of<'a>(pool: &'a ActivityPool, activity_id: &'a str) -> &'a str {
    pool.get(activity_id)
        .map(|a| a.title.as_str())
        .unwrap_or(activity_id)
}

/// The day's activities by title, one Done/Skipped row per slot.
pub fn render_plan_day(
    chat_id: ChatId,
    plan: &Plan,
    date: NaiveDate,
    pool: &ActivityPool,
    corpus: &ResponseCorpus,
) -> Result<OutboundMessage, BotError> {
    if !plan.covers(date) {
        return Err(BotError::DateOutOfPlan(date));
    }
    let day = plan.day(date);
    Ok(OutboundMessage {
        chat_id,
        text: titled_lines(
            corpus.reply_on(Intent::PlanHeader, date),
            day.iter()
                .map(|s| title_of(pool, &s.activity_id).to_string()),
        ),
        keyboard: day
            .iter()
            .map(|s| slot_row(plan, date, s.slot_index))
            .collect(),
    })
}

/// A single-slot trigger message.
pub fn render_reminder(
    chat_id: ChatId,
    plan: &Plan,
    date: NaiveDate,
    slot_index: u8,
    pool: &ActivityPool,
    corpus: &ResponseCorpus,
) -> Result<OutboundMessage, BotError> {
    let slot = plan
        .slot(date, slot_index)
        .ok_or(BotError::DateOutOfPlan(date))?;
    Ok(OutboundMessage {
        chat_id,
        text: titled_lines(
            corpus.reply_on(Intent::Reminder, date),
            std::iter::once(title_of(pool, &slot.activity_id).to_string()),
        ),
        keyboard: vec![slot_row(plan, date, slot_index)],
    })
}

pub fn render_mood_keyboard(chat_id: ChatId, corpus: &ResponseCorpus) -> OutboundMessage {
    OutboundMessage {
        chat_id,
        text: corpus.reply(Intent::Mood).to_string(),
        keyboard: vec![Emotion::ALL
            .iter()
            .map(|e| {
                let label = e.as_str();
                Button {
                    label: format!("{}{}", label[..1].to_uppercase(), &label[1..]),
                    data: CallbackData::Emotion(*e).to_string(),
                }
            })
            .collect()],
    }
}
