//! Held-out evaluation: hit rate at K over the final-day sessions, with
//! per-session retrieval averaged per user first.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{build_token_sequence, Dataset, ScenarioId, UserSequence};
use crate::error::{Error, Result};
use crate::model::{run_forward, ModelConfig, Parameters};
use crate::retrieval::index::{build_index, retrieve_topk, IndexConfig, RetrievalResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundTruth {
    /// Clicked items of the held-out sessions (default).
    Clicked,
    /// All exposed items, for sensitivity analysis.
    Exposed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub ground_truth: GroundTruth,
    pub index: IndexConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![20, 100, 500, 1000, 2000, 4000],
            ground_truth: GroundTruth::Clicked,
            index: IndexConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    /// Overall HR per K, aligned with `ks`.
    pub overall: Vec<f64>,
    /// Scenario name -> (HR per K, users contributing).
    pub per_scenario: BTreeMap<String, (Vec<f64>, usize)>,
    pub users: usize,
    pub skipped_users: usize,
    /// What G_u means in this report.
    pub ground_truth: String,
}

impl EvalReport {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.overall[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,K,hit_rate,users\n");
        for (i, &k) in self.ks.iter().enumerate() {
            let _ = writeln!(out, "overall,{},{},{}", k, self.overall[i], self.users);
        }
        for (name, (hrs, users)) in &self.per_scenario {
            for (i, &k) in self.ks.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", name, k, hrs[i], users);
            }
        }
        out
    }
}

/// Mean over users of |R_u ∩ G_u| / |G_u| at a single cutoff. Users with an
/// empty ground truth are excluded (and it is an error if none remain).
pub fn hit_rate_at_k(
    results: &[RetrievalResult],
    ground_truth: &[Vec<usize>],
    k: usize,
) -> Result<f64> {
    assert_eq!(results.len(), ground_truth.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, g) in results.iter().zip(ground_truth) {
        if g.is_empty() {
            continue;
        }
        let gset: BTreeSet<usize> = g.iter().copied().collect();
        let hits = r.items.iter().take(k).filter(|i| gset.contains(i)).count();
        sum += hits as f64 / gset.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::data("no evaluable user for hit rate"));
    }
    Ok(sum / n as f64)
}

fn session_ground_truth(
    session: &crate::data::SessionRecord,
    mode: GroundTruth,
) -> BTreeSet<usize> {
    session
        .items
        .iter()
        .filter(|it| match mode {
            GroundTruth::Clicked => it.clicked,
            GroundTruth::Exposed => true,
        })
        .map(|it| it.item)
        .collect()
}

/// Hold out the global final day, retrieve per held-out session from a
/// freshly appended trailing context, and average hit rates per user first.
pub fn evaluate(
    params: &Parameters,
    dataset: &Dataset,
    mcfg: &ModelConfig,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let index = build_index(&dataset.catalog, params, &config.index)?;
    let ks: Vec<usize> = config.ks.iter().copied().filter(|&k| k <= index.items.len()).collect();
    if ks.is_empty() {
        return Err(Error::config("no evaluation K fits the item pool"));
    }
    let k_max = *ks.iter().max().unwrap();

    let eval_day = dataset
        .users
        .iter()
        .flat_map(|u| u.sessions.iter().map(|s| s.day()))
        .max()
        .ok_or_else(|| Error::data("dataset has no sessions"))?;

    let side_of = |item: usize| dataset.catalog.items[item].side.clone();
    // Per user: hit rates per K, plus the same restricted per scenario.
    let mut user_hrs: Vec<Vec<f64>> = Vec::new();
    let mut scenario_hrs: BTreeMap<ScenarioId, Vec<Vec<f64>>> = BTreeMap::new();
    let mut skipped = 0usize;

    for user in &dataset.users {
        let history = UserSequence {
            user_id: user.user_id.clone(),
            sessions: user.sessions.iter().filter(|s| s.day() < eval_day).cloned().collect(),
        };
        // Per-session hit rates for this user, grouped for averaging.
        let mut rows: Vec<(ScenarioId, Vec<f64>)> = Vec::new();
        for session in user.sessions.iter().filter(|s| s.day() == eval_day) {
            let truth = session_ground_truth(session, config.ground_truth);
            if truth.is_empty() {
                continue;
            }
            let seq = build_token_sequence(
                &history,
                session.scenario,
                session.start_time,
                mcfg.max_seq_len,
                mcfg.side_vocab.time_buckets,
                &side_of,
            )?;
            let out = run_forward(&seq, params, mcfg)?;
            let (_, ctx) = out
                .context_outputs
                .iter()
                .next_back()
                .ok_or_else(|| Error::Model("no trailing context output".into()))?;
            let r = retrieve_topk(ctx, &index, k_max)?;
            let hrs: Vec<f64> = ks
                .iter()
                .map(|&k| {
                    let hits =
                        r.items.iter().take(k).filter(|i| truth.contains(i)).count();
                    hits as f64 / truth.len() as f64
                })
                .collect();
            rows.push((session.scenario, hrs));
        }
        if rows.is_empty() {
            skipped += 1;
            continue;
        }
        let mean = |subset: &[&Vec<f64>]| -> Vec<f64> {
            let mut m = vec![0.0; ks.len()];
            for hrs in subset {
                for (a, b) in m.iter_mut().zip(hrs.iter()) {
                    *a += b;
                }
            }
            for a in m.iter_mut() {
                *a /= subset.len() as f64;
            }
            m
        };
        user_hrs.push(mean(&rows.iter().map(|(_, h)| h).collect::<Vec<_>>()));
        let scenarios: BTreeSet<ScenarioId> = rows.iter().map(|(s, _)| *s).collect();
        for sc in scenarios {
            let subset: Vec<&Vec<f64>> =
                rows.iter().filter(|(s, _)| *s == sc).map(|(_, h)| h).collect();
            scenario_hrs.entry(sc).or_default().push(mean(&subset));
        }
    }

    if user_hrs.is_empty() {
        return Err(Error::data("no evaluable user for hit rate"));
    }
    let avg = |per_user: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; ks.len()];
        for hrs in per_user {
            for (a, b) in m.iter_mut().zip(hrs.iter()) {
                *a += b;
            }
        }
        for a in m.iter_mut() {
            *a /= per_user.len() as f64;
        }
        m
    };

    let per_scenario = scenario_hrs
        .into_iter()
        .map(|(sc, per_user)| {
            let name = dataset.scenarios.name(sc).to_string();
            let n = per_user.len();
            (name, (avg(&per_user), n))
        })
        .collect();

    Ok(EvalReport {
        overall: avg(&user_hrs),
        users: user_hrs.len(),
        skipped_users: skipped,
        per_scenario,
        ks,
        ground_truth: match config.ground_truth {
            GroundTruth::Clicked => "clicked items of held-out final-day sessions, per-session eval averaged per user".into(),
            GroundTruth::Exposed => "exposed items of held-out final-day sessions, per-session eval averaged per user".into(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn fake_result(items: &[usize]) -> RetrievalResult {
        RetrievalResult {
            items: items.to_vec(),
            ids: items.iter().map(|i| format!("i{}", i)).collect(),
            scores: (0..items.len()).map(|r| -(r as f64)).collect(),
        }
    }

    #[test]
    fn half_hit_example() {
        // G = {a, b}, R@3 = {a, x, y} -> 0.5
        let r = vec![fake_result(&[0, 7, 8])];
        let g = vec![vec![0, 1]];
        assert_eq!(hit_rate_at_k(&r, &g, 3).unwrap(), 0.5);
    }

    #[test]
    fn superset_hits_one() {
        let r = vec![fake_result(&[3, 1, 2, 0])];
        let g = vec![vec![1, 2]];
        assert_eq!(hit_rate_at_k(&r, &g, 4).unwrap(), 1.0);
    }

    #[test]
    fn empty_truth_users_excluded_and_all_empty_errors() {
        let r = vec![fake_result(&[0]), fake_result(&[1])];
        let g = vec![Vec::new(), vec![1]];
        assert_eq!(hit_rate_at_k(&r, &g, 1).unwrap(), 1.0);
        let g2 = vec![Vec::new(), Vec::new()];
        assert!(hit_rate_at_k(&r, &g2, 1).is_err());
    }

    #[test]
    fn monotone_in_k() {
        let r = vec![fake_result(&[5, 4, 3, 2, 1, 0])];
        let g = vec![vec![0, 3]];
        let mut prev = 0.0;
        for k in 1..=6 {
            let hr = hit_rate_at_k(&r, &g, k).unwrap();
            assert!(hr >= prev);
            prev = hr;
        }
    }

    #[test]
    fn random_retrieval_matches_k_over_p() {
        // Expected HR@K = K/P for uniformly random disjoint retrieval.
        let p = 2000usize;
        let k = 100usize;
        let mut acc = 0.0;
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut results = Vec::new();
            let mut truths = Vec::new();
            for _ in 0..20 {
                let mut pool: Vec<usize> = (0..p).collect();
                pool.shuffle(&mut rng);
                results.push(fake_result(&pool[..k]));
                truths.push(
                    (0..p).collect::<Vec<_>>().choose_multiple(&mut rng, 5).copied().collect(),
                );
            }
            acc += hit_rate_at_k(&results, &truths, k).unwrap();
        }
        let hr = acc / 50.0;
        assert!((hr - 0.05).abs() < 0.01, "random HR@100 = {}", hr);
    }

    #[test]
    fn evaluate_untrained_model_near_random_baseline() {
        let scfg = SyntheticConfig {
            num_users: 60,
            num_items: 500,
            num_days: 6,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&scfg, 11).unwrap();
        let mcfg = ModelConfig {
            dim: 16,
            num_blocks: 1,
            num_heads: 2,
            ff_hidden: 32,
            max_seq_len: 512,
            ..ModelConfig::default()
        }
        .for_dataset(&ds);
        let params = Parameters::init(&mcfg, 23);
        let cfg = EvalConfig {
            ks: vec![20, 100],
            ..EvalConfig::default()
        };
        let report = evaluate(&params, &ds, &mcfg, &cfg).unwrap();
        assert!(report.users > 0);
        let pool = report.ks.iter().count();
        assert!(pool > 0);
        for hr in &report.overall {
            assert!((0.0..=1.0).contains(hr));
        }
        // Monotone non-decreasing in K.
        assert!(report.hr_at(100).unwrap() >= report.hr_at(20).unwrap());
        // CSV has a header and one row per (scenario+overall, K).
        let csv = report.to_csv();
        assert!(csv.starts_with("scenario,K,hit_rate,users\n"));
        let rows = csv.lines().count() - 1;
        assert_eq!(rows, (1 + report.per_scenario.len()) * report.ks.len());
    }

    #[test]
    fn degenerate_single_item_pool_hits_one() {
        let scfg = SyntheticConfig {
            num_users: 8,
            num_items: 30,
            num_days: 4,
            ..SyntheticConfig::default()
        };
        let mut ds = generate_synthetic(&scfg, 5).unwrap();
        // Collapse every session to a single clicked catalog item 0.
        for u in ds.users.iter_mut() {
            for s in u.sessions.iter_mut() {
                for it in s.items.iter_mut() {
                    it.item = 0;
                    it.clicked = true;
                }
            }
        }
        for (i, it) in ds.catalog.items.iter_mut().enumerate() {
            it.exposure_count = if i == 0 { 10 } else { 0 };
        }
        let mcfg = ModelConfig {
            dim: 8,
            num_blocks: 1,
            num_heads: 1,
            ff_hidden: 16,
            max_seq_len: 512,
            ..ModelConfig::default()
        }
        .for_dataset(&ds);
        let params = Parameters::init(&mcfg, 3);
        let cfg = EvalConfig {
            ks: vec![1],
            ..EvalConfig::default()
        };
        let report = evaluate(&params, &ds, &mcfg, &cfg).unwrap();
        assert_eq!(report.hr_at(1).unwrap(), 1.0);
    }
}
