//! Synthetic users: plausible profiles plus a hidden compliance propensity.

use std::collections::BTreeSet;

use coachme_core::domain::{Education, Gender, ProfileInput, UserType, Vocabulary};
use coachme_core::ids::ChatId;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::SimError;

pub const MIN_USERS: usize = 3;
/// Chat ids are `CHAT_BASE + index`.
pub const CHAT_BASE: i64 = 10_000;

/// Relative weights of the latent types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeMix {
    pub active: f64,
    pub neutral: f64,
    pub passive: f64,
}

impl Default for TypeMix {
    fn default() -> Self {
        TypeMix {
            active: 1.0,
            neutral: 1.0,
            passive: 1.0,
        }
    }
}

impl TypeMix {
    fn weights(&self) -> [(UserType, f64); 3] {
        [
            (UserType::Active, self.active),
            (UserType::Neutral, self.neutral),
            (UserType::Passive, self.passive),
        ]
    }

    /// Splits `n` users by largest remainder; remainder ties go to the type
    /// listed first (Active, Neutral, Passive).
    pub fn partition(&self, n: usize) -> Result<[(UserType, usize); 3], SimError> {
        let w = self.weights();
        if w.iter().any(|(_, x)| !x.is_finite() || *x < 0.0) {
            return Err(SimError::BadMix(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = w.iter().map(|(_, x)| x).sum();
        if total <= 0.0 {
            return Err(SimError::BadMix("weights sum to zero".into()));
        }
        let quotas = w.map(|(t, x)| (t, n as f64 * x / total));
        let mut counts = quotas.map(|(t, q)| (t, q.floor() as usize));
        let assigned: usize = counts.iter().map(|(_, c)| c).sum();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = quotas[a].1 - quotas[a].1.floor();
            let rb = quotas[b].1 - quotas[b].1.floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().take(n - assigned) {
            counts[i].1 += 1;
        }
        Ok(counts)
    }
}

/// Base compliance probability per latent type and the per-user jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorParams {
    pub active: f64,
    pub neutral: f64,
    pub passive: f64,
    pub jitter: f64,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        BehaviorParams {
            active: 0.85,
            neutral: 0.55,
            passive: 0.25,
            jitter: 0.05,
        }
    }
}

impl BehaviorParams {
    pub fn base(&self, t: UserType) -> f64 {
        match t {
            UserType::Active => self.active,
            UserType::Neutral => self.neutral,
            UserType::Passive => self.passive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBehavior {
    pub latent_type: UserType,
    pub comply_prob: f64,
    pub noise: f64,
}

impl LatentBehavior {
    pub const MIN_PROB: f64 = 0.01;
    pub const MAX_PROB: f64 = 0.99;

    /// Chance that the user complies with any one slot.
    pub fn probability(&self) -> f64 {
        (self.comply_prob + self.noise).clamp(Self::MIN_PROB, Self::MAX_PROB)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimUser {
    pub chat_id: ChatId,
    pub profile: ProfileInput,
    pub behavior: LatentBehavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub seed: u64,
    pub mix: TypeMix,
    pub users: Vec<SimUser>,
}

impl Cohort {
    pub fn count(&self, t: UserType) -> usize {
        self.users
            .iter()
            .filter(|u| u.behavior.latent_type == t)
            .count()
    }
}

pub fn synth_cohort(n: usize, mix: TypeMix, seed: u64) -> Result<Cohort, SimError> {
    synth_cohort_with(
        n,
        mix,
        &BehaviorParams::default(),
        &Vocabulary::default(),
        seed,
    )
}

pub fn synth_cohort_with(
    n: usize,
    mix: TypeMix,
    params: &BehaviorParams,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Cohort, SimError> {
    if n < MIN_USERS {
        return Err(SimError::ConfigInvalid(format!(
            "n_users must be at least {MIN_USERS}"
        )));
    }
    if !(params.jitter.is_finite() && params.jitter >= 0.0) {
        return Err(SimError::ConfigInvalid(
            "jitter must be non-negative".into(),
        ));
    }
    let mut types: Vec<UserType> = mix
        .partition(n)?
        .iter()
        .flat_map(|&(t, c)| std::iter::repeat_n(t, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    types.shuffle(&mut rng);

    let conditions: Vec<&String> = vocab.health_conditions.iter().collect();
    let activity_tags: Vec<&String> = vocab.activity_tags.iter().collect();
    let food_tags: Vec<&String> = vocab.food_tags.iter().collect();
    let users = types
        .into_iter()
        .enumerate()
        .map(|(i, latent_type)| {
            let profile =
                synth_profile(i, &mut rng, &conditions, &activity_tags, &food_tags, vocab);
            let noise = if params.jitter > 0.0 {
                rng.random_range(-params.jitter..=params.jitter)
            } else {
                0.0
            };
            SimUser {
                chat_id: ChatId(CHAT_BASE + i as i64),
                profile,
                behavior: LatentBehavior {
                    latent_type,
                    comply_prob: params.base(latent_type),
                    noise,
                },
            }
        })
        .collect();
    Ok(Cohort { seed, mix, users })
}

fn pick_some(rng: &mut ChaCha8Rng, from: &[&String], max: usize) -> BTreeSet<String> {
    let n = rng.random_range(1..=max.min(from.len()));
    from.choose_multiple(rng, n)
        .map(|s| s.to_string())
        .collect()
}

fn synth_profile(
    i: usize,
    rng: &mut ChaCha8Rng,
    conditions: &[&String],
    activity_tags: &[&String],
    food_tags: &[&String],
    vocab: &Vocabulary,
) -> ProfileInput {
    let gender = match rng.random_range(0..100) {
        0..48 => Gender::Female,
        48..96 => Gender::Male,
        _ => Gender::Other,
    };
    let height_m: f64 = match gender {
        Gender::Female => rng.random_range(1.50..1.80),
        Gender::Male => rng.random_range(1.62..1.95),
        Gender::Other => rng.random_range(1.50..1.95),
    };
    let height_m = (height_m * 100.0).round() / 100.0;
    let bmi: f64 = rng.random_range(18.5..35.0);
    let weight_kg = (bmi * height_m * height_m * 10.0).round() / 10.0;
    let education = *[
        Education::Primary,
        Education::Secondary,
        Education::Tertiary,
        Education::Postgraduate,
    ]
    .choose(rng)
    .expect("nonempty");
    ProfileInput {
        display_name: format!("sim-{i:03}"),
        age: rng.random_range(18..=75),
        gender,
        height_m,
        weight_kg,
        education,
        health_condition: conditions
            .choose(rng)
            .map(|s| s.to_string())
            .unwrap_or_default(),
        preferred_activities: pick_some(rng, activity_tags, 3),
        preferred_foods: pick_some(rng, food_tags, 3),
        resources: vocab
            .resources
            .iter()
            .filter(|_| rng.random_bool(0.5))
            .cloned()
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_mix_splits_exactly() {
        let c = synth_cohort(150, TypeMix::default(), 42).unwrap();
        for t in UserType::ALL {
            assert_eq!(c.count(t), 50);
        }
    }

    #[test]
    fn largest_remainder() {
        // 10 * (1/3, 1/3, 1/3) = 3.33 each: the spare user goes to Active
        let p = TypeMix::default().partition(10).unwrap();
        assert_eq!(p.map(|(_, c)| c), [4, 3, 3]);
        // 7 * (0.5, 0.3, 0.2) = 3.5, 2.1, 1.4: floors 3,2,1; remainders .5 > .4 > .1
        let mix = TypeMix {
            active: 0.5,
            neutral: 0.3,
            passive: 0.2,
        };
        assert_eq!(mix.partition(7).unwrap().map(|(_, c)| c), [4, 2, 1]);
    }

    #[test]
    fn bad_mix() {
        let zero = TypeMix {
            active: 0.0,
            neutral: 0.0,
            passive: 0.0,
        };
        let err = synth_cohort(150, zero, 1).unwrap_err();
        assert!(matches!(err, SimError::BadMix(_)));
        assert_eq!(err.code(), "BadMix");
        let negative = TypeMix {
            active: -1.0,
            ..TypeMix::default()
        };
        assert!(matches!(negative.partition(3), Err(SimError::BadMix(_))));
    }

    #[test]
    fn too_few_users() {
        assert_eq!(
            synth_cohort(2, TypeMix::default(), 1).unwrap_err().code(),
            "ConfigInvalid"
        );
    }

    #[test]
    fn same_seed_same_cohort() {
        let a = synth_cohort(60, TypeMix::default(), 7).unwrap();
        assert_eq!(a, synth_cohort(60, TypeMix::default(), 7).unwrap());
        assert_ne!(a, synth_cohort(60, TypeMix::default(), 8).unwrap());
    }

    #[test]
    fn profiles_are_valid() {
        let vocab = Vocabulary::default();
        let c = synth_cohort(200, TypeMix::default(), 3).unwrap();
        for (i, u) in c.users.iter().enumerate() {
            let p = coachme_core::domain::validate_profile(
                coachme_core::ids::UserId(i as u64 + 1),
                &u.profile,
                &vocab,
            )
            .unwrap();
            assert!((18..=75).contains(&p.age));
            assert!((18.0..36.0).contains(&p.bmi), "{}", p.bmi);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn probabilities_clamped(seed in any::<u64>(), n in 3usize..60, jitter in 0.0f64..0.5) {
                let params = BehaviorParams { active: 0.97, passive: 0.02, jitter, ..BehaviorParams::default() };
                let c = synth_cohort_with(n, TypeMix::default(), &params, &Vocabulary::default(), seed).unwrap();
                for u in &c.users {
                    let p = u.behavior.probability();
                    prop_assert!((LatentBehavior::MIN_PROB..=LatentBehavior::MAX_PROB).contains(&p));
                    prop_assert!(u.behavior.noise.abs() <= jitter);
                }
            }

            #[test]
            fn partition_sums_to_n(n in 0usize..10_000, a in 0.0f64..5.0, b in 0.0f64..5.0, c in 0.01f64..5.0) {
                let mix = TypeMix { active: a, neutral: b, passive: c };
                let p = mix.partition(n).unwrap();
                prop_assert_eq!(p.iter().map(|(_, k)| k).sum::<usize>(), n);
                let total = a + b + c;
                for ((_, k), w) in p.iter().zip([a, b, c]) {
                    prop_assert!((*k as f64 - n as f64 * w / total).abs() < 1.0 + 1e-9);
                }
            }
        }
    }
}
