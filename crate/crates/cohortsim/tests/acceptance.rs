//! Acceptance suite: one [PASS]/[FAIL] line per criterion. Exits non-zero if
//! any criterion fails.

#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration as StdDuration, Instant};

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use coachme_core::adherence::FrequencyTable;
use coachme_core::bot::{callback_update, message_update, CallbackData};
use coachme_core::domain::{
    validate_profile, Activity, ActivityKind, ActivityPool, Emotion, SlotOrigin, Vocabulary,
};
use coachme_core::ids::{ChatId, NotificationId, PlanId, UserId};
use coachme_core::iml::{
    encode_profile, FeatureVector, KnnModel, LabelSource, ModelParams, Schema,
};
use coachme_core::persistence::{self, Event, EventBody};
use coachme_core::planning::{
    compose_weekly_plan, propose_clusters, CompositionInput, PlanTemplate,
};
use coachme_core::scheduling::EXPIRY_HOURS;
use coachme_core::{Catalog, CoachConfig, CoachMe, SimClock};
use cohortsim::experiment::gen_cohort;
use cohortsim::{run_experiment, ExperimentConfig, TypeMix};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn day(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn at(date: NaiveDate, hour: u32) -> DateTime<Utc> {
    Utc.from_utc_datetime(&date.and_hms_opt(hour, 0, 0).unwrap())
}

// ---- KNN oracle equivalence ----

const LABELS: [&str; 4] = [
    "baseline-v1",
    "diet-focus-v1",
    "move-more-v1",
    "gentle-start-v1",
];

fn knn_schema() -> Schema {
    let names = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    Schema {
        numeric: names(&["age", "bmi", "height_m", "weight_kg", "education"]),
        categorical: names(&["gender", "health_condition"]),
        setvalued: names(&["preferred_activities", "preferred_foods"]),
    }
}

/// Random vector over the profile schema. Coarse vectors draw from tiny
/// domains so exact distance ties are common.
fn random_vector(rng: &mut ChaCha8Rng, coarse: bool) -> FeatureVector {
    let schema = knn_schema();
    let numeric = schema
        .numeric
        .iter()
        .map(|n| {
            let v = if coarse {
                rng.random_range(0..3) as f64 * 10.0
            } else {
                rng.random_range(-50.0..150.0)
            };
            (n.clone(), v)
        })
        .collect();
    let cats = if coarse {
        &["a", "b"][..]
    } else {
        &["a", "b", "c", "d", "e"][..]
    };
    let categorical = schema
        .categorical
        .iter()
        .map(|n| (n.clone(), cats.choose(rng).unwrap().to_string()))
        .collect();
    let tags = if coarse {
        &["x", "y"][..]
    } else {
        &["p", "q", "r", "s", "t", "u"][..]
    };
    let setvalued = schema
        .setvalued
        .iter()
        .map(|n| {
            let set: BTreeSet<String> = tags
                .iter()
                .filter(|_| rng.random_bool(0.4))
                .map(|t| t.to_string())
                .collect();
            (n.clone(), set)
        })
        .collect();
    FeatureVector {
        numeric,
        categorical,
        setvalued,
    }
}

fn random_params(rng: &mut ChaCha8Rng) -> ModelParams {
    let schema = knn_schema();
    let mut weights = BTreeMap::new();
    for name in schema.field_names() {
        match rng.random_range(0..10) {
            0 => {
                weights.insert(name.to_string(), 0.0);
            }
            1 | 2 => {
                weights.insert(name.to_string(), rng.random_range(0.1..5.0));
            }
            _ => {}
        }
    }
    if weights.len() == schema.len() && weights.values().all(|w| *w == 0.0) {
        weights.clear();
    }
    ModelParams {
        k: *[1, 3, 5, 7, 9].choose(rng).unwrap(),
        weights,
    }
}

fn knn_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0001);
    let t0 = Instant::now();
    let ts = at(day(2025, 3, 1), 0);
    let mut ties = 0;
    for pair in 0..1000 {
        let coarse = pair % 2 == 0;
        let size = rng.random_range(1..=500);
        let params = random_params(&mut rng);
        let mut model = KnnModel::new("acceptance", knn_schema(), &params, "baseline-v1")
            .map_err(|e| format!("pair {pair}: {e}"))?;
        for _ in 0..size {
            let v = random_vector(&mut rng, coarse);
            let label = LABELS.choose(&mut rng).unwrap();
            model
                .add_labeled_instance(v, label, LabelSource::Simulated, ts, None)
                .map_err(|e| format!("pair {pair}: {e}"))?;
        }
        let q = random_vector(&mut rng, coarse);
        let got = model.predict(&q).map_err(|e| format!("pair {pair}: {e}"))?;
        let want = oracle::oracle_predict(&model, &q);
        ensure(
            got.label == want.label
                && got.confidence == want.confidence
                && got.neighbor_ids == want.neighbor_ids,
            || {
                format!(
                    "pair {pair} (size {size}, k {}): got {} {} {:?}, oracle {} {} {:?}",
                    params.k,
                    got.label,
                    got.confidence,
                    got.neighbor_ids,
                    want.label,
                    want.confidence,
                    want.neighbor_ids
                )
            },
        )?;
        if coarse {
            ties += 1;
        }
    }
    let elapsed = t0.elapsed();
    ensure(elapsed < StdDuration::from_secs(5), || {
        format!("1000 pairs took {elapsed:?}, limit 5 s")
    })?;
    Ok(format!(
        "1000/1000 pairs identical ({ties} on tie-heavy domains), {:.2} s",
        elapsed.as_secs_f64()
    ))
}

// ---- scaling invariance ----

fn scaled(v: &FeatureVector, factor: f64) -> FeatureVector {
    let mut v = v.clone();
    for (name, x) in &mut v.numeric {
        if name == "weight_kg" {
            *x *= factor;
        }
    }
    v
}

fn scaling_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0005);
    let vocab = Vocabulary::default();
    let cohort = gen_cohort(600, TypeMix::default(), 5).map_err(|e| e.to_string())?;
    let profiles: Vec<FeatureVector> = cohort
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| {
            encode_profile(&validate_profile(UserId(i as u64), &u.profile, &vocab).unwrap())
        })
        .collect();
    let ts = at(day(2025, 3, 1), 0);
    let mut checked = 0;
    for trial in 0..200 {
        let size = rng.random_range(1..=500);
        let params = ModelParams {
            k: *[1, 3, 5, 7].choose(&mut rng).unwrap(),
            weights: BTreeMap::new(),
        };
        let schema = profile_schema(&profiles[0]);
        let mut plain = KnnModel::new("pre", schema.clone(), &params, "baseline-v1").unwrap();
        let mut tenfold = KnnModel::new("pre", schema, &params, "baseline-v1").unwrap();
        let mut idx: Vec<usize> = (0..profiles.len()).collect();
        idx.shuffle(&mut rng);
        let (train, rest) = idx.split_at(size);
        for &i in train {
            let label = LABELS.choose(&mut rng).unwrap();
            plain
                .add_labeled_instance(profiles[i].clone(), label, LabelSource::Simulated, ts, None)
                .unwrap();
            tenfold
                .add_labeled_instance(
                    scaled(&profiles[i], 10.0),
                    label,
                    LabelSource::Simulated,
                    ts,
                    None,
                )
                .unwrap();
        }
        for &q in rest.iter().take(5) {
            let a = plain.predict(&profiles[q]).unwrap();
            let b = tenfold.predict(&scaled(&profiles[q], 10.0)).unwrap();
            let set = |ids: &[u64]| ids.iter().copied().collect::<BTreeSet<u64>>();
            ensure(
                a.label == b.label && set(&a.neighbor_ids) == set(&b.neighbor_ids),
                || {
                    format!(
                        "trial {trial}: {} {:?} vs scaled {} {:?}",
                        a.label, a.neighbor_ids, b.label, b.neighbor_ids
                    )
                },
            )?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} queries over 200 models: labels and neighbour sets unchanged"
    ))
}

fn profile_schema(v: &FeatureVector) -> Schema {
    Schema {
        numeric: v.numeric.iter().map(|(n, _)| n.clone()).collect(),
        categorical: v.categorical.iter().map(|(n, _)| n.clone()).collect(),
        setvalued: v.setvalued.iter().map(|(n, _)| n.clone()).collect(),
    }
}

// ---- closed loop, determinism, replay ----

struct ChildRun {
    wall: StdDuration,
    max_rss_kb: i64,
    code: i32,
    stderr: String,
}

/// Runs the CLI and reaps it with wait4 to read its peak RSS.
fn run_cli(config: &Path, out: &Path, data_dir: &Path) -> Result<ChildRun, String> {
    let t0 = Instant::now();
    let child = Command::new(env!("CARGO_BIN_EXE_cohortsim"))
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--data-dir")
        .arg(data_dir)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let pid = child.id() as libc::pid_t;
    let mut stderr_pipe = child.stderr.expect("piped");
    let reader = std::thread::spawn(move || {
        let mut s = String::new();
        std::io::Read::read_to_string(&mut stderr_pipe, &mut s).ok();
        s
    });
    let mut status: libc::c_int = 0;
    // SAFETY: rusage is plain old data and pid is our own unreaped child.
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    let rc = unsafe { libc::wait4(pid, &mut status, 0, &mut usage) };
    let wall = t0.elapsed();
    if rc != pid {
        return Err(format!("wait4 failed: {}", std::io::Error::last_os_error()));
    }
    let code = if libc::WIFEXITED(status) {
        libc::WEXITSTATUS(status)
    } else {
        -1
    };
    Ok(ChildRun {
        wall,
        max_rss_kb: usage.ru_maxrss,
        code,
        stderr: reader.join().unwrap_or_default(),
    })
}

fn default_config_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("experiments/default.json")
}

fn fixture() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/closed_loop.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn closed_loop(dir: &Path) -> Outcome {
    let out = dir.join("report-a.json");
    let run = run_cli(&default_config_path(), &out, &dir.join("data-a"))?;
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(&out).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let acc = report["post_model"]["accuracy"].as_f64().unwrap();
    let oracle_acc = report["oracle"]["accuracy"].as_f64().unwrap();
    let cfg = &report["config"];
    ensure(
        cfg["n_users"] == 150
            && report["n_train"] == 50
            && report["n_test"] == 100
            && cfg["weeks"] == 4
            && cfg["seed"] == 42
            && cfg["service"]["slots_per_day"] == 3,
        || format!("not the default experiment: {cfg}"),
    )?;
    let fx = fixture();
    ensure(
        oracle_acc == fx["oracle_accuracy"].as_f64().unwrap(),
        || {
            format!(
                "threshold oracle {oracle_acc} differs from recorded fixture {}",
                fx["oracle_accuracy"]
            )
        },
    )?;
    let floor = (oracle_acc - 0.05).max(0.80);
    ensure(acc >= floor, || {
        format!("accuracy {acc} below {floor} (oracle {oracle_acc})")
    })?;
    ensure(run.code == 0, || {
        format!("cli exit {}: {}", run.code, run.stderr)
    })?;
    ensure(run.wall < StdDuration::from_secs(10), || {
        format!("runtime {:?}", run.wall)
    })?;
    let mb = run.max_rss_kb as f64 / 1024.0;
    ensure(mb < 256.0, || format!("peak RSS {mb:.1} MB"))?;
    Ok(format!(
        "accuracy {acc:.2} vs oracle {oracle_acc:.2} (floor {floor:.2}), {:.2} s, {mb:.1} MB peak",
        run.wall.as_secs_f64()
    ))
}

fn determinism(dir: &Path) -> Outcome {
    let out = dir.join("report-b.json");
    let run = run_cli(&default_config_path(), &out, &dir.join("data-b"))?;
    ensure(run.code == 0, || {
        format!("cli exit {}: {}", run.code, run.stderr)
    })?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    let (ra, rb) = (read(&dir.join("report-a.json"))?, read(&out)?);
    let log = |d: &str| read(&dir.join(d).join(persistence::EVENTS_FILE));
    let (la, lb) = (log("data-a")?, log("data-b")?);
    ensure(ra == rb, || "reports differ".into())?;
    ensure(la == lb, || "event logs differ".into())?;
    // the in-process library run writes the same bytes as the CLI
    let cfg = ExperimentConfig::from_json(&std::fs::read_to_string(default_config_path()).unwrap())
        .map_err(|e| e.to_string())?;
    let lib = run_experiment(&cfg, None).map_err(|e| e.to_string())?;
    ensure(lib.events.as_bytes() == la.as_slice(), || {
        "library log differs from CLI log".into()
    })?;
    ensure(lib.report.to_json().as_bytes() == ra.as_slice(), || {
        "library report differs".into()
    })?;
    Ok(format!(
        "2 CLI runs + 1 library run: identical reports ({} B) and event logs ({} B)",
        ra.len(),
        la.len()
    ))
}

fn replay_equivalence(dir: &Path) -> Outcome {
    let cfg = ExperimentConfig::from_json(&std::fs::read_to_string(default_config_path()).unwrap())
        .map_err(|e| e.to_string())?;
    let data = dir.join("data-replay");
    let live = run_experiment(&cfg, Some(&data)).map_err(|e| e.to_string())?;
    let text =
        std::fs::read_to_string(data.join(persistence::EVENTS_FILE)).map_err(|e| e.to_string())?;
    let replayed = persistence::replay(&text, &cfg.service.iml).map_err(|e| e.to_string())?;
    let state = live.service.state();
    ensure(&replayed == state, || {
        "replayed state differs from live state".into()
    })?;
    for (name, a, b) in [
        (
            "pre",
            replayed.models.pre.export_json(),
            state.models.pre.export_json(),
        ),
        (
            "post",
            replayed.models.post.export_json(),
            state.models.post.export_json(),
        ),
    ] {
        ensure(a == b, || format!("{name} model export differs"))?;
    }
    // reopening the data directory gives the same state again
    drop(live);
    let clock = Arc::new(SimClock::new(at(day(2025, 4, 1), 0)));
    let (reopened, rec) = CoachMe::open(cfg.service.clone(), Catalog::starter(), &data, clock)
        .map_err(|e| e.to_string())?;
    ensure(rec.is_none(), || format!("recovery reported {rec:?}"))?;
    ensure(reopened.state() == &replayed, || {
        "reopened state differs".into()
    })?;
    Ok(format!(
        "{} events, {} + {} model instances, exports byte-identical",
        replayed.last_seq,
        replayed.models.pre.len(),
        replayed.models.post.len()
    ))
}

// ---- plan invariants ----

fn random_template(rng: &mut ChaCha8Rng, starter: &Catalog) -> PlanTemplate {
    if rng.random_bool(0.5) {
        let all: Vec<&PlanTemplate> = starter.templates.values().collect();
        return (*all.choose(rng).unwrap()).clone();
    }
    let s = rng.random_range(1..=5u8);
    let mut kind_mix = BTreeMap::new();
    for _ in 0..s {
        let k = *[
            ActivityKind::Diet,
            ActivityKind::Physical,
            ActivityKind::Wellness,
        ]
        .choose(rng)
        .unwrap();
        *kind_mix.entry(k).or_insert(0u8) += 1;
    }
    PlanTemplate {
        template_id: format!("random-{s}"),
        kind_mix,
        target_clusters: BTreeSet::new(),
        notes: String::new(),
    }
}

fn plan_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0006);
    let catalog = Catalog::starter();
    let pool = &catalog.pool;
    let cohort = gen_cohort(200, TypeMix::default(), 6).map_err(|e| e.to_string())?;
    let ids: Vec<String> = pool.iter().map(|a| a.activity_id.clone()).collect();
    let mut bound_cases = 0;
    for (i, u) in cohort.users.iter().enumerate() {
        let profile =
            validate_profile(UserId(i as u64 + 1), &u.profile, &catalog.vocabulary).unwrap();
        let template = random_template(&mut rng, &catalog);
        let s = template.slots_per_day() as usize;
        let kinds = template.slot_kinds();
        let habit_share = rng.random_range(0.0..0.8);
        let mut counts: Vec<(String, u32)> = Vec::new();
        for id in &ids {
            if rng.random_bool(habit_share) {
                counts.push((id.clone(), rng.random_range(0..8)));
            }
        }
        let freq = FrequencyTable::from_counts(counts, 3);
        let week_start = day(2025, 3, 3) + Duration::days(rng.random_range(0..60));
        let input = CompositionInput {
            profile: &profile,
            template: &template,
            pool,
            clusters: &[],
            freq: &freq,
            week_start,
            frequent_share: 0.7,
        };
        let plan = compose_weekly_plan(PlanId(i as u64 + 1), &input, rng.random())
            .map_err(|e| format!("composition {i}: {e}"))?;

        ensure(plan.slots.len() == 7 * s, || {
            format!("composition {i}: {} slots, S={s}", plan.slots.len())
        })?;
        let positions: BTreeSet<(NaiveDate, u8)> =
            plan.slots.iter().map(|x| (x.date, x.slot_index)).collect();
        let expected: BTreeSet<(NaiveDate, u8)> = (0..7)
            .flat_map(|d| (0..s as u8).map(move |j| (week_start + Duration::days(d), j)))
            .collect();
        ensure(positions == expected, || {
            format!("composition {i}: slot grid mismatch")
        })?;

        let frequent_id = |id: &str| freq.entries.get(id).is_some_and(|e| e.count >= 3);
        let mut frequent_slots = 0;
        for slot in &plan.slots {
            let a = pool.get(&slot.activity_id).unwrap();
            ensure(a.kind == kinds[slot.slot_index as usize], || {
                format!("composition {i}: slot kind mismatch for {}", a.activity_id)
            })?;
            let feasible =
                a.required_resources.is_subset(&profile.resources) || frequent_id(&a.activity_id);
            ensure(feasible, || {
                format!("composition {i}: infeasible {}", a.activity_id)
            })?;
            if slot.origin == SlotOrigin::Frequent {
                ensure(frequent_id(&a.activity_id), || {
                    format!("composition {i}: {} marked frequent", a.activity_id)
                })?;
                frequent_slots += 1;
            }
        }
        // slots whose kind offers at least one habit can hold a frequent activity
        let eligible = plan
            .slots
            .iter()
            .filter(|x| {
                let k = kinds[x.slot_index as usize];
                pool.iter()
                    .any(|a| a.kind == k && frequent_id(&a.activity_id))
            })
            .count();
        let target = (7 * 7 * s).div_ceil(10);
        if eligible >= target {
            bound_cases += 1;
            ensure(frequent_slots >= target, || {
                format!(
                    "composition {i}: {frequent_slots} frequent slots, need {target} of {}",
                    7 * s
                )
            })?;
        } else {
            ensure(frequent_slots >= eligible, || {
                format!("composition {i}: {frequent_slots} frequent slots of {eligible} eligible")
            })?;
        }
    }
    Ok(format!(
        "200 compositions: 7xS slots, all feasible, frequent bound held in {bound_cases} cases where it applies"
    ))
}

// ---- bot round-trip ----

fn events_after(svc: &CoachMe, seq: u64) -> Vec<Event> {
    svc.log()
        .memory_lines()
        .unwrap()
        .iter()
        .skip(seq as usize)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

struct World {
    svc: CoachMe,
    clock: Arc<SimClock>,
    next_update: u64,
    sent: Vec<Vec<u8>>,
}

impl World {
    fn new() -> Self {
        let clock = Arc::new(SimClock::new(at(day(2025, 3, 9), 9)));
        let svc =
            CoachMe::in_memory(CoachConfig::default(), Catalog::starter(), clock.clone()).unwrap();
        World {
            svc,
            clock,
            next_update: 0,
            sent: Vec::new(),
        }
    }

    fn send(&mut self, wire: Vec<u8>) -> (Vec<Event>, coachme_core::service::Effects) {
        let before = self.svc.log().last_seq();
        let effects = self.svc.handle_update(&wire).unwrap();
        self.sent.push(wire);
        (events_after(&self.svc, before), effects)
    }

    fn text(&mut self, chat: ChatId, text: &str) -> coachme_core::service::Effects {
        self.next_update += 1;
        self.send(message_update(self.next_update, chat, text)).1
    }

    fn press(&mut self, chat: ChatId, data: &str) -> Vec<Event> {
        self.next_update += 1;
        self.send(callback_update(self.next_update, chat, data)).0
    }
}

fn report_matches(e: &Event, user: UserId, data: &CallbackData) -> bool {
    match (&e.body, data) {
        (
            EventBody::ComplianceReported { report, .. },
            CallbackData::Comply {
                plan_id,
                date,
                slot_index,
                complied,
            },
        ) => {
            report.user_id == user
                && report.plan_id == *plan_id
                && report.date == *date
                && report.slot_index == *slot_index
                && report.complied == *complied
        }
        (EventBody::EmotionReported { report, .. }, CallbackData::Emotion(em)) => {
            report.user_id == user && report.emotion == *em
        }
        _ => false,
    }
}

/// Presses every button of the chosen polarity through a seeded week and
/// returns the rendered keyboards.
fn bot_week(world: &mut World, press_done: bool) -> Result<(Vec<String>, usize), String> {
    let cohort = gen_cohort(3, TypeMix::default(), 8).map_err(|e| e.to_string())?;
    let week = day(2025, 3, 10);
    let mut users = Vec::new();
    for u in &cohort.users {
        let reg = world
            .svc
            .register_user(&u.profile, u.chat_id)
            .map_err(|e| e.to_string())?;
        world
            .svc
            .assign_plan(reg.user_id, "baseline-v1", week)
            .map_err(|e| e.to_string())?;
        users.push((reg.user_id, u.chat_id));
    }
    let s = world.svc.config().slots_per_day;
    let mut rendered = Vec::new();
    let mut pressed = 0;
    for d in 0..7 {
        let date = week + Duration::days(d);
        for (n, &(user, chat)) in users.iter().enumerate() {
            world.clock.set(at(date, 19) + Duration::minutes(n as i64));
            let msgs = world.text(chat, "/newplan").messages;
            let mut buttons: Vec<String> = msgs
                .iter()
                .flat_map(|m| m.buttons())
                .map(|b| b.data.clone())
                .collect();
            let mood = world.text(chat, "/mood").messages;
            let moods: Vec<String> = mood
                .iter()
                .flat_map(|m| m.buttons())
                .map(|b| b.data.clone())
                .collect();
            ensure(moods.len() == Emotion::ALL.len(), || {
                format!("{} mood buttons", moods.len())
            })?;
            rendered.extend(buttons.iter().cloned());
            rendered.extend(moods.iter().cloned());
            buttons.retain(|b| {
                matches!(CallbackData::parse(b, s), Ok(CallbackData::Comply { complied, .. }) if complied == press_done)
            });
            ensure(buttons.len() == s as usize, || {
                format!("{} buttons of one polarity", buttons.len())
            })?;
            // one mood per day, cycling through the keyboard
            let mood_pick = moods[(d as usize + n) % moods.len()].clone();
            buttons.push(mood_pick);
            for data in &buttons {
                let parsed = CallbackData::parse(data, s).map_err(|e| e.to_string())?;
                let events = world.press(chat, data);
                ensure(
                    events.len() == 1 && report_matches(&events[0], user, &parsed),
                    || format!("press {data} appended {events:?}"),
                )?;
                pressed += 1;
            }
        }
    }
    Ok((rendered, pressed))
}

fn bot_round_trip() -> Outcome {
    let mut done = World::new();
    let mut skipped = World::new();
    let (keys_a, pressed_a) = bot_week(&mut done, true)?;
    let (keys_b, pressed_b) = bot_week(&mut skipped, false)?;
    ensure(keys_a == keys_b, || {
        "the two seeded weeks rendered different keyboards".into()
    })?;
    let distinct: BTreeSet<&String> = keys_a.iter().collect();

    // every button again with fresh update ids: slots are already answered
    let before = done.svc.log().last_seq();
    let s = done.svc.config().slots_per_day;
    let chats: Vec<ChatId> = done.svc.state().users.values().map(|u| u.chat_id).collect();
    let mut again = 0;
    for data in &distinct {
        if !matches!(
            CallbackData::parse(data, s),
            Ok(CallbackData::Comply { .. })
        ) {
            continue;
        }
        for &chat in &chats {
            done.press(chat, data);
            again += 1;
        }
    }
    // replayed wire updates, byte for byte
    let sent = done.sent.clone();
    for wire in &sent {
        done.svc.handle_update(wire).unwrap();
    }
    let added = done.svc.log().last_seq() - before;
    ensure(added == 0, || format!("duplicates appended {added} events"))?;
    Ok(format!(
        "{} distinct buttons, {} presses, each gave exactly one report; {} repeat presses and {} replayed updates gave 0 events",
        distinct.len(),
        pressed_a + pressed_b,
        again,
        sent.len()
    ))
}

// ---- notification at-most-once ----

fn notification_at_most_once() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0008);
    let start = day(2025, 3, 3);
    let clock = Arc::new(SimClock::new(at(start - Duration::days(1), 12)));
    let mut svc =
        CoachMe::in_memory(CoachConfig::default(), Catalog::starter(), clock.clone()).unwrap();
    let cohort = gen_cohort(5, TypeMix::default(), 9).map_err(|e| e.to_string())?;
    for u in &cohort.users {
        let reg = svc
            .register_user(&u.profile, u.chat_id)
            .map_err(|e| e.to_string())?;
        for w in 0..4 {
            svc.assign_plan(reg.user_id, "baseline-v1", start + Duration::days(7 * w))
                .map_err(|e| e.to_string())?;
        }
    }
    let scheduled: BTreeMap<NotificationId, DateTime<Utc>> = svc
        .state()
        .queue
        .notifications
        .values()
        .map(|n| (n.notification_id, n.fire_at))
        .collect();

    let end = at(start + Duration::days(28), 0) + Duration::hours(EXPIRY_HOURS + 2);
    let mut t = at(start - Duration::days(1), 12);
    let mut polls = Vec::new();
    let mut dispatched: BTreeMap<NotificationId, Vec<DateTime<Utc>>> = BTreeMap::new();
    while t < end {
        // mostly short gaps, sometimes an outage longer than the expiry window
        let gap = if rng.random_bool(0.1) {
            rng.random_range(60 * 20..60 * 40)
        } else {
            rng.random_range(1..60 * 8)
        };
        t += Duration::minutes(gap);
        clock.set(t);
        polls.push(t);
        for d in svc.collect_due().map_err(|e| e.to_string())? {
            dispatched
                .entry(d.notification.notification_id)
                .or_default()
                .push(t);
        }
    }

    let expiry = Duration::hours(EXPIRY_HOURS);
    let mut sent = 0;
    let mut expired = 0;
    for (id, fire_at) in &scheduled {
        let times = dispatched.get(id).cloned().unwrap_or_default();
        ensure(times.len() <= 1, || {
            format!("{id} dispatched {} times", times.len())
        })?;
        let first_poll = polls.iter().find(|&&p| p >= *fire_at).copied();
        match first_poll {
            Some(p) if p - *fire_at <= expiry => {
                ensure(times == [p], || {
                    format!("{id} due at poll {p}, dispatched at {times:?}")
                })?;
                sent += 1;
            }
            _ => {
                ensure(times.is_empty(), || format!("{id} dispatched after expiry"))?;
                expired += 1;
            }
        }
        let state = svc.state().queue.notifications[id].state;
        let want = if times.is_empty() {
            "Expired"
        } else {
            "Dispatched"
        };
        ensure(format!("{state:?}") == want, || {
            format!("{id} ended {state:?}, want {want}")
        })?;
    }
    Ok(format!(
        "{} notifications over {} polls: {sent} dispatched once, {expired} expired, none twice",
        scheduled.len(),
        polls.len()
    ))
}

// ---- clustering ----

fn activity(id: &str, tags: &[&str]) -> Activity {
    Activity {
        activity_id: id.into(),
        kind: ActivityKind::Wellness,
        title: id.into(),
        tags: tags.iter().map(|t| t.to_string()).collect(),
        required_resources: BTreeSet::new(),
        importance: 3,
    }
}

fn cluster_of(clusters: &[coachme_core::domain::ActivityCluster], id: &str) -> String {
    clusters
        .iter()
        .find(|c| c.member_ids.contains(id))
        .map(|c| c.cluster_id.clone())
        .unwrap_or_default()
}

fn clustering() -> Outcome {
    // |{a,b}| / |{a,b,c,d}| = 2/4 = 0.5
    let pool = ActivityPool::new([
        activity("x", &["a", "b", "c"]),
        activity("y", &["a", "b", "d"]),
        activity("z", &["e", "f"]),
    ])
    .unwrap();
    let at_half = propose_clusters(&pool, 0.5);
    ensure(
        cluster_of(&at_half, "x") == cluster_of(&at_half, "y"),
        || format!("{{a,b,c}} and {{a,b,d}} not merged at 0.5: {at_half:?}"),
    )?;
    ensure(
        cluster_of(&at_half, "z") != cluster_of(&at_half, "x"),
        || "disjoint set merged".into(),
    )?;
    let above = propose_clusters(&pool, 0.51);
    ensure(cluster_of(&above, "x") != cluster_of(&above, "y"), || {
        "merged above 0.5".into()
    })?;

    // random pools: an activity sharing no tag with any other stays alone
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0009);
    let vocab: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
    for trial in 0..100 {
        let n = rng.random_range(2..25);
        let acts: Vec<Activity> = (0..n)
            .map(|i| {
                let k = rng.random_range(1..4);
                let tags: Vec<&str> = vocab
                    .choose_multiple(&mut rng, k)
                    .map(|s| s.as_str())
                    .collect();
                activity(&format!("a{i:02}"), &tags)
            })
            .collect();
        let pool = ActivityPool::new(acts.clone()).unwrap();
        let threshold = *[0.2, 0.3, 0.5, 0.7].choose(&mut rng).unwrap();
        let first = propose_clusters(&pool, threshold);
        let second = propose_clusters(&pool, threshold);
        ensure(
            serde_json::to_string(&first).unwrap() == serde_json::to_string(&second).unwrap(),
            || format!("trial {trial}: runs differ"),
        )?;
        for a in &acts {
            let isolated = acts
                .iter()
                .filter(|b| b.activity_id != a.activity_id)
                .all(|b| a.tags.is_disjoint(&b.tags));
            if isolated {
                let c = first
                    .iter()
                    .find(|c| c.member_ids.contains(&a.activity_id))
                    .unwrap();
                ensure(c.member_ids.len() == 1, || {
                    format!(
                        "trial {trial}: disjoint {} merged into {:?}",
                        a.activity_id, c.member_ids
                    )
                })?;
            }
        }
    }
    let starter = Catalog::starter();
    let a = serde_json::to_string(&propose_clusters(&starter.pool, 0.5)).unwrap();
    let b = serde_json::to_string(&propose_clusters(&starter.pool, 0.5)).unwrap();
    ensure(a == b, || "starter pool clustering not repeatable".into())?;
    Ok("hand case merges at 0.5 and splits at 0.51; 100 random pools repeatable, disjoint sets never merged".into())
}

fn unit_weight_reference() -> String {
    let mut cfg =
        ExperimentConfig::from_json(&std::fs::read_to_string(default_config_path()).unwrap())
            .unwrap();
    cfg.service.iml.post.weights.clear();
    match run_experiment(&cfg, None) {
        Ok(o) => format!(
            "unit post-model weights: accuracy {:.2} (fixture {}), oracle {:.2}",
            o.report.post_model.accuracy,
            fixture()["unit_weight_post_accuracy"],
            o.report.oracle.accuracy
        ),
        Err(e) => format!("unit-weight run failed: {e}"),
    }
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path().to_path_buf();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("knn_oracle_equivalence", Box::new(knn_oracle_equivalence)),
        (
            "closed_loop_classification",
            Box::new({
                let d = d.clone();
                move || closed_loop(&d)
            }),
        ),
        (
            "determinism",
            Box::new({
                let d = d.clone();
                move || determinism(&d)
            }),
        ),
        (
            "replay_equivalence",
            Box::new({
                let d = d.clone();
                move || replay_equivalence(&d)
            }),
        ),
        ("scaling_invariance", Box::new(scaling_invariance)),
        ("plan_invariants", Box::new(plan_invariants)),
        ("bot_round_trip", Box::new(bot_round_trip)),
        (
            "notification_at_most_once",
            Box::new(notification_at_most_once),
        ),
        ("clustering_hand_case", Box::new(clustering)),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!("[INFO] {}", unit_weight_reference());
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
