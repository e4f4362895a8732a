//! Reproducible synthetic interaction logs with a latent-factor click model.
//!
//! Users and items carry hidden latent vectors; each session exposes the
//! top-n items by noise-perturbed affinity, clicks are drawn with probability
//! increasing in affinity, and pays are subsampled from clicks. The hidden
//! structure gives learning-based tests a known floor and ceiling.

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::events::{
    Action, Catalog, Dataset, Event, ItemInfo, ScenarioSet, SessionItem, SessionRecord, SideInfo,
    SideVocab, UserSequence, SECONDS_PER_DAY,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_days: usize,
    pub latent_dim: usize,
    pub scenarios: ScenarioSet,
    /// Sampling weights per scenario, same order as the scenario set.
    pub scenario_mix: Vec<f64>,
    /// Mean sessions per user per day (Poisson rate).
    pub sessions_per_user_day: f64,
    pub items_per_session: (usize, usize),
    /// Slope of the click probability in the session-standardized affinity.
    pub click_slope: f64,
    pub click_bias: f64,
    pub pay_rate: f64,
    pub num_cat1: usize,
    pub num_cat2: usize,
    pub num_sellers: usize,
    pub num_price_buckets: usize,
    pub time_buckets: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 200,
            num_items: 2000,
            num_days: 20,
            latent_dim: 8,
            scenarios: ScenarioSet::default_set(),
            scenario_mix: vec![0.6, 0.25, 0.15],
            sessions_per_user_day: 1.0,
            items_per_session: (4, 8),
            click_slope: 1.5,
            click_bias: -1.0,
            pay_rate: 0.1,
            num_cat1: 16,
            num_cat2: 64,
            num_sellers: 100,
            num_price_buckets: 10,
            time_buckets: 24,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 || self.num_days == 0 {
            return Err(Error::config("synthetic sizes must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be positive"));
        }
        if self.items_per_session.0 == 0 || self.items_per_session.0 > self.items_per_session.1 {
            return Err(Error::config("invalid items_per_session range"));
        }
        if self.scenario_mix.len() != self.scenarios.len() {
            return Err(Error::config("scenario_mix length must match scenario set"));
        }
        if self.items_per_session.1 > self.num_items {
            return Err(Error::config("items_per_session exceeds catalog size"));
        }
        Ok(())
    }
}

/// Generate the event log alone (a pure function of config and seed).
pub fn generate_events(config: &SyntheticConfig, seed: u64) -> Result<Vec<Event>> {
    Ok(generate(config, seed)?.1)
}

/// Generate a full dataset; the catalog covers all `num_items` items,
/// including those never exposed.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    Ok(generate(config, seed)?.0)
}

pub fn generate(config: &SyntheticConfig, seed: u64) -> Result<(Dataset, Vec<Event>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.latent_dim;
    let latent_scale = 1.0 / (d as f64).sqrt().sqrt();

    let normal_vec = |rng: &mut ChaCha8Rng, n: usize, scale: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                v * scale
            })
            .collect()
    };

    // Hidden item structure: latent vector plus a popularity bias.
    let item_latent: Vec<Vec<f64>> = (0..config.num_items)
        .map(|_| normal_vec(&mut rng, d, latent_scale))
        .collect();
    let item_bias: Vec<f64> = normal_vec(&mut rng, config.num_items, 0.7);
    let mut catalog = Catalog::default();
    for i in 0..config.num_items {
        let idx = catalog.get_or_insert(&format!("i{:05}", i));
        debug_assert_eq!(idx, i);
        catalog.items[i].side = SideInfo {
            cat1: Some(rng.gen_range(0..config.num_cat1) as u32),
            cat2: Some(rng.gen_range(0..config.num_cat2) as u32),
            seller: Some(rng.gen_range(0..config.num_sellers) as u32),
            price_bucket: Some(rng.gen_range(0..config.num_price_buckets) as u32),
        };
    }

    let user_latent: Vec<Vec<f64>> = (0..config.num_users)
        .map(|_| normal_vec(&mut rng, d, latent_scale))
        .collect();
    let scenario_shift: Vec<Vec<f64>> = (0..config.scenarios.len())
        .map(|_| normal_vec(&mut rng, d, 0.5 * latent_scale))
        .collect();
    let mix_total: f64 = config.scenario_mix.iter().sum();

    let mut events = Vec::new();
    let mut users = Vec::with_capacity(config.num_users);
    let mut day_index = BTreeMap::new();

    for u in 0..config.num_users {
        let user_id = format!("u{:04}", u);
        let mut sessions: Vec<SessionRecord> = Vec::new();
        let mut sess_counter = 0usize;
        for day in 0..config.num_days {
            let n_sessions = poisson(&mut rng, config.sessions_per_user_day);
            for _ in 0..n_sessions {
                sess_counter += 1;
                let start = day as i64 * SECONDS_PER_DAY + rng.gen_range(0..SECONDS_PER_DAY - 60);
                sessions.push(make_session(
                    config,
                    &mut rng,
                    &user_id,
                    sess_counter,
                    start,
                    &user_latent[u],
                    &item_latent,
                    &item_bias,
                    &scenario_shift,
                    mix_total,
                    &mut catalog,
                ));
            }
        }
        if sessions.is_empty() {
            // Every user must have at least one trainable session.
            sess_counter += 1;
            let start = SECONDS_PER_DAY / 2;
            sessions.push(make_session(
                config,
                &mut rng,
                &user_id,
                sess_counter,
                start,
                &user_latent[u],
                &item_latent,
                &item_bias,
                &scenario_shift,
                mix_total,
                &mut catalog,
            ));
        }
        sessions.sort_by_key(|s| (s.start_time, s.session_id.clone()));
        // Session start times must be strictly increasing per user.
        for i in 1..sessions.len() {
            if sessions[i].start_time <= sessions[i - 1].start_time {
                sessions[i].start_time = sessions[i - 1].start_time + 1;
            }
        }
        for s in &sessions {
            emit_session_events(&user_id, s, &catalog, config, &mut events);
        }
        let days: BTreeSet<i64> = sessions.iter().map(|s| s.day()).collect();
        day_index.insert(user_id.clone(), days);
        users.push(UserSequence { user_id, sessions });
    }

    let dataset = Dataset {
        users,
        catalog,
        scenarios: config.scenarios.clone(),
        side_vocab: SideVocab {
            cat1: config.num_cat1,
            cat2: config.num_cat2,
            seller: config.num_sellers,
            price_bucket: config.num_price_buckets,
            time_buckets: config.time_buckets,
        },
        day_index,
    };
    Ok((dataset, events))
}

#[allow(clippy::too_many_arguments)]
fn make_session(
    config: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
    user_id: &str,
    sess_counter: usize,
    start_time: i64,
    user_latent: &[f64],
    item_latent: &[Vec<f64>],
    item_bias: &[f64],
    scenario_shift: &[Vec<f64>],
    mix_total: f64,
    catalog: &mut Catalog,
) -> SessionRecord {
    // Scenario drawn from the configured mix.
    let mut pick = rng.gen_range(0.0..mix_total);
    let mut scenario = 0usize;
    for (s, &w) in config.scenario_mix.iter().enumerate() {
        if pick < w {
            scenario = s;
            break;
        }
        pick -= w;
    }

    let intent: Vec<f64> = user_latent
        .iter()
        .zip(&scenario_shift[scenario])
        .map(|(a, b)| a + b)
        .collect();

    let n = rng.gen_range(config.items_per_session.0..=config.items_per_session.1);
    // Expose the top-n items by noise-perturbed affinity.
    let mut scored: Vec<(f64, f64, usize)> = item_latent
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let affinity =
                intent.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + item_bias[i];
            let noise: f64 = rng.sample::<f64, _>(StandardNormal);
            (affinity + noise, affinity, i)
        })
        .collect();
    scored
        .sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.2.cmp(&b.2)));
    scored.truncate(n);

    // Click probability increases in the session-standardized affinity.
    let mean = scored.iter().map(|s| s.1).sum::<f64>() / n as f64;
    let var = scored.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt().max(1e-6);
    let items: Vec<SessionItem> = scored
        .iter()
        .map(|&(_, affinity, i)| {
            let z = (affinity - mean) / sd;
            let p = sigmoid(config.click_slope * z + config.click_bias);
            let clicked = rng.gen_bool(p.clamp(1e-9, 1.0 - 1e-9));
            let paid = clicked && rng.gen_bool(config.pay_rate);
            catalog.items[i].exposure_count += 1;
            SessionItem {
                item: i,
                clicked,
                paid,
            }
        })
        .collect();

    SessionRecord {
        session_id: format!("{}s{:04}", user_id, sess_counter),
        scenario: crate::data::events::ScenarioId(scenario as u16),
        start_time,
        items,
    }
}

fn emit_session_events(
    user_id: &str,
    session: &SessionRecord,
    catalog: &Catalog,
    config: &SyntheticConfig,
    events: &mut Vec<Event>,
) {
    let scenario = config.scenarios.name(session.scenario).to_string();
    for it in &session.items {
        let info: &ItemInfo = &catalog.items[it.item];
        let base = Event {
            user_id: user_id.to_string(),
            timestamp: session.start_time,
            scenario: scenario.clone(),
            session_id: session.session_id.clone(),
            item_id: info.item_id.clone(),
            action: Action::Exposure,
            cat1: info.side.cat1,
            cat2: info.side.cat2,
            seller: info.side.seller,
            price_bucket: info.side.price_bucket,
        };
        events.push(base.clone());
        if it.clicked {
            events.push(Event {
                timestamp: session.start_time + 10,
                action: Action::Click,
                ..base.clone()
            });
        }
        if it.paid {
            events.push(Event {
                timestamp: session.start_time + 20,
                action: Action::Pay,
                ..base
            });
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Knuth's Poisson sampler; fine for small rates.
fn poisson(rng: &mut ChaCha8Rng, rate: f64) -> usize {
    let l = (-rate).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}
