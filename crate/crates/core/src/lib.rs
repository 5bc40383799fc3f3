//! CoachMe: a caregiver-in-the-loop lifestyle coaching backend.
//!
//! Caregivers register users and assign weekly plans; users report
//! compliance and mood through a bot channel with one-click buttons; two
//! incremental KNN models learn from the caregiver's plan choices and
//! refinements. All state is an event-sourced fold over an append-only log.

pub mod adherence;
pub mod bot;
pub mod clock;
pub mod config;
pub mod domain;
pub mod ids;
pub mod iml;
pub mod persistence;
pub mod planning;
pub mod scheduling;
pub mod service;
pub mod state;

pub use clock::{Clock, SimClock};
pub use config::{Catalog, CoachConfig};
pub use service::{CoachMe, ServiceError};
