#![allow(dead_code)]

pub mod oracle;

use std::sync::Arc;

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use coachme_core::bot::{callback_update, message_update, OutboundMessage};
use coachme_core::domain::{Education, Gender, ProfileInput};
use coachme_core::ids::{ChatId, UserId};
use coachme_core::{Catalog, CoachConfig, CoachMe, SimClock};

pub fn d(month: u32, day: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2025, month, day).unwrap()
}

pub fn at(date: NaiveDate, hour: u32) -> DateTime<Utc> {
    Utc.from_utc_datetime(&date.and_hms_opt(hour, 0, 0).unwrap())
}

pub fn john() -> ProfileInput {
    ProfileInput {
        display_name: "John".into(),
        age: 40,
        gender: Gender::Male,
        height_m: 1.8,
        weight_kg: 81.0,
        education: Education::Secondary,
        health_condition: "prediabetes".into(),
        preferred_activities: ["walking".to_string()].into(),
        preferred_foods: ["vegetables".to_string()].into(),
        resources: ["kitchen".to_string()].into(),
    }
}

pub fn person(i: u64) -> ProfileInput {
    ProfileInput {
        display_name: format!("user {i}"),
        age: 20 + (i * 7 % 50) as i64,
        weight_kg: 55.0 + (i * 13 % 45) as f64,
        ..john()
    }
}

pub struct Harness {
    pub clock: Arc<SimClock>,
    pub svc: CoachMe,
    next_update: u64,
}

impl Harness {
    pub fn new() -> Self {
        Self::with_config(CoachConfig::default())
    }

    pub fn with_config(config: CoachConfig) -> Self {
        let clock = Arc::new(SimClock::new(at(d(3, 9), 9)));
        let svc = CoachMe::in_memory(config, Catalog::starter(), clock.clone()).unwrap();
        Harness {
            clock,
            svc,
            next_update: 1,
        }
    }

    pub fn register(&mut self, i: u64) -> UserId {
        self.svc
            .register_user(&person(i), ChatId(1000 + i as i64))
            .unwrap()
            .user_id
    }

    pub fn chat(&self, user: UserId) -> ChatId {
        self.svc.state().users[&user].chat_id
    }

    pub fn send(&mut self, chat: ChatId, text: &str) -> coachme_core::service::Effects {
        let id = self.bump();
        self.svc
            .handle_update(&message_update(id, chat, text))
            .unwrap()
    }

    pub fn press(&mut self, chat: ChatId, data: &str) -> coachme_core::service::Effects {
        let id = self.bump();
        self.svc
            .handle_update(&callback_update(id, chat, data))
            .unwrap()
    }

    fn bump(&mut self) -> u64 {
        let id = self.next_update;
        self.next_update += 1;
        id
    }

    /// Presses Done on the first `done` slots of each day of the user's
    /// latest plan (by slot order) and Skipped on the rest.
    pub fn report_week(&mut self, user: UserId, done_per_day: usize) {
        let plan = self.svc.state().latest_plan(user).unwrap().plan.clone();
        let chat = self.chat(user);
        for day in 0..7 {
            let date = plan.week_start + Duration::days(day);
            self.clock.set(at(date, 20));
            let msg = self.render_day(chat, &plan, date);
            for (row, buttons) in msg.keyboard.iter().enumerate() {
                let b = if row < done_per_day {
                    &buttons[0]
                } else {
                    &buttons[1]
                };
                let e = self.press(chat, &b.data.clone());
                assert_eq!(e.events.len(), 1);
            }
        }
    }

    pub fn render_day(
        &self,
        chat: ChatId,
        plan: &coachme_core::domain::Plan,
        date: NaiveDate,
    ) -> OutboundMessage {
        coachme_core::bot::render_plan_day(
            chat,
            plan,
            date,
            &self.svc.catalog().pool,
            &self.svc.catalog().corpus,
        )
        .unwrap()
    }

    pub fn lines(&self) -> Vec<String> {
        self.svc.log().memory_lines().unwrap().to_vec()
    }

    pub fn log_text(&self) -> String {
        self.lines().iter().map(|l| format!("{l}\n")).collect()
    }
}
