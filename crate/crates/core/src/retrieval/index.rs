//! The item index: serving embeddings e_id + e_side over the high-quality
//! pool, with exact search and a cluster-probe approximate mode.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Catalog;
use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub mode: IndexMode,
    pub num_clusters: usize,
    pub num_probes: usize,
    /// Pool admission threshold on catalog exposure counts.
    pub min_exposures: u64,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            mode: IndexMode::Exact,
            num_clusters: 64,
            num_probes: 8,
            min_exposures: 1,
            seed: 0,
        }
    }
}

/// Cluster-probe structure. Rows are lifted to a sphere by appending
/// sqrt(M^2 - |x|^2) (M = max row norm), which turns inner-product search
/// into nearest-neighbor search, and clustered with Euclidean k-means.
#[derive(Debug, Clone)]
struct Clusters {
    /// Centroids in the lifted (dim + 1) space.
    centroids: Tensor,
    /// Pool positions per cluster; each row lands in its two nearest.
    members: Vec<Vec<usize>>,
    /// Max lifted distance from each centroid to its members.
    radius: Vec<f64>,
    /// Lifting sphere radius squared (max row norm squared).
    m_sq: f64,
}

#[derive(Debug, Clone)]
pub struct ItemIndex {
    /// Catalog rows in the pool, sorted by item id ascending.
    pub items: Vec<usize>,
    pub ids: Vec<String>,
    /// Pool-aligned serving embeddings e_id + e_side.
    pub emb: Tensor,
    pub mode: IndexMode,
    num_probes: usize,
    clusters: Option<Clusters>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Catalog rows, scores non-increasing, ids distinct.
    pub items: Vec<usize>,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// Serving embedding of one item: its id row plus every side-info row
/// (absent slots use each table's absent row), matching the training-time
/// sample embedding exactly.
pub fn item_embedding(params: &Parameters, catalog: &Catalog, item: usize) -> Vec<f64> {
    let side = &catalog.items[item].side;
    let slots: [(&str, Option<usize>); 5] = [
        ("emb.item", Some(item)),
        ("emb.cat1", side.cat1.map(|v| v as usize)),
        ("emb.cat2", side.cat2.map(|v| v as usize)),
        ("emb.seller", side.seller.map(|v| v as usize)),
        ("emb.price", side.price_bucket.map(|v| v as usize)),
    ];
    let dim = params.get("emb.item").cols();
    let mut out = vec![0.0; dim];
    for (table, slot) in slots {
        let t = params.get(table);
        let row = t.row(slot.unwrap_or(t.rows() - 1));
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

pub fn build_index(
    catalog: &Catalog,
    params: &Parameters,
    config: &IndexConfig,
) -> Result<ItemIndex> {
    let mut pool: Vec<usize> = (0..catalog.len())
        .filter(|&i| catalog.items[i].exposure_count >= config.min_exposures)
        .collect();
    if pool.is_empty() {
        return Err(Error::data("item pool is empty"));
    }
    pool.sort_by(|&a, &b| catalog.items[a].item_id.cmp(&catalog.items[b].item_id));

    let dim = params.get("emb.item").cols();
    let mut data = Vec::with_capacity(pool.len() * dim);
    for &i in &pool {
        data.extend_from_slice(&item_embedding(params, catalog, i));
    }
    let emb = Tensor::from_vec(&[pool.len(), dim], data);
    let ids = pool.iter().map(|&i| catalog.items[i].item_id.clone()).collect();

    let clusters = match config.mode {
        IndexMode::Exact => None,
        IndexMode::Approximate => Some(kmeans(&emb, config.num_clusters, config.seed)),
    };

    Ok(ItemIndex {
        items: pool,
        ids,
        emb,
        mode: config.mode,
        num_probes: config.num_probes,
        clusters,
    })
}

fn lift_rows(emb: &Tensor) -> (Tensor, f64) {
    let n = emb.rows();
    let dim = emb.cols();
    let max_sq = (0..n)
        .map(|r| dot(emb.row(r), emb.row(r)))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut lifted = Tensor::zeros(&[n, dim + 1]);
    for r in 0..n {
        let sq = dot(emb.row(r), emb.row(r));
        let row = lifted.row_mut(r);
        row[..dim].copy_from_slice(emb.row(r));
        row[dim] = (max_sq - sq).max(0.0).sqrt();
    }
    (lifted, max_sq)
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean Lloyd's iterations in the lifted space, deterministic in the
/// seed; each row joins its two nearest final centroids.
fn kmeans(emb: &Tensor, num_clusters: usize, seed: u64) -> Clusters {
    let (lifted, m_sq) = lift_rows(emb);
    let n = lifted.rows();
    let dim = lifted.cols();
    let k = num_clusters.min(n).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..n).collect::<Vec<_>>().choose_multiple(&mut rng, k).copied().collect();
    let mut centroids = Tensor::zeros(&[k, dim]);
    for (c, &p) in picks.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(lifted.row(p));
    }

    let mut assign = vec![0usize; n];
    for _ in 0..15 {
        for r in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let d = dist_sq(lifted.row(r), centroids.row(c));
                if d < best.0 {
                    best = (d, c);
                }
            }
            assign[r] = best.1;
        }
        let mut sums = Tensor::zeros(&[k, dim]);
        let mut counts = vec![0usize; k];
        for r in 0..n {
            counts[assign[r]] += 1;
            for (s, &x) in sums.row_mut(assign[r]).iter_mut().zip(lifted.row(r)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let row = sums.row_mut(c);
            for x in row.iter_mut() {
                *x /= counts[c] as f64;
            }
            centroids.row_mut(c).copy_from_slice(row);
        }
    }

    let mut members = vec![Vec::new(); k];
    let mut radius = vec![0.0f64; k];
    for r in 0..n {
        let mut ranked: Vec<(f64, usize)> = (0..k)
            .map(|c| (dist_sq(lifted.row(r), centroids.row(c)), c))
            .collect();
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(d, c) in ranked.iter().take(2.min(k)) {
            members[c].push(r);
            radius[c] = radius[c].max(d.sqrt());
        }
    }
    Clusters {
        centroids,
        members,
        radius,
        m_sq,
    }
}

/// Inner-product top-k over the pool; ties break toward the smaller item id.
pub fn retrieve_topk(context: &[f64], index: &ItemIndex, k: usize) -> Result<RetrievalResult> {
    if k > index.items.len() {
        return Err(Error::data(format!(
            "k = {} exceeds pool size {}",
            k,
            index.items.len()
        )));
    }
    let score_of = |p: usize| dot(context, index.emb.row(p));
    let mut scored: Vec<(f64, usize)> = match (&index.mode, &index.clusters) {
        (IndexMode::Exact, _) | (_, None) => {
            (0..index.items.len()).map(|p| (score_of(p), p)).collect()
        }
        (IndexMode::Approximate, Some(cl)) => {
            // Lifted query (extra coordinate 0): in the lifted space, higher
            // score means smaller distance, d^2 = |q|^2 + M^2 - 2 score, so
            // a cluster whose distance lower bound exceeds the current k-th
            // best distance cannot improve the result.
            let mut q = context.to_vec();
            q.push(0.0);
            let q_sq = dot(&q, &q);
            let mut ranked: Vec<(f64, usize)> = (0..cl.centroids.rows())
                .map(|c| (dist_sq(&q, cl.centroids.row(c)), c))
                .collect();
            ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut seen = vec![false; index.items.len()];
            let mut cand: Vec<(f64, usize)> = Vec::new();
            for (pi, &(d_c, c)) in ranked.iter().enumerate() {
                if pi >= index.num_probes && cand.len() >= k {
                    let mut kth: Vec<f64> = cand.iter().map(|&(s, _)| -s).collect();
                    kth.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let kth_d_sq = q_sq + cl.m_sq + 2.0 * kth[k - 1];
                    let lb = (d_c.sqrt() - cl.radius[c]).max(0.0);
                    if lb * lb > kth_d_sq {
                        continue;
                    }
                }
                for &p in &cl.members[c] {
                    if !seen[p] {
                        seen[p] = true;
                        cand.push((score_of(p), p));
                    }
                }
            }
            cand
        }
    };
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| index.ids[a.1].cmp(&index.ids[b.1]))
    });
    scored.truncate(k);

    Ok(RetrievalResult {
        items: scored.iter().map(|&(_, p)| index.items[p]).collect(),
        ids: scored.iter().map(|&(_, p)| index.ids[p].clone()).collect(),
        scores: scored.iter().map(|&(s, _)| s).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::model::ModelConfig;

    fn tiny_catalog(n: usize) -> Catalog {
        let mut c = Catalog::default();
        for i in 0..n {
            let idx = c.get_or_insert(&format!("i{:03}", i));
            c.items[idx].exposure_count = 1;
        }
        c
    }

    fn params_for(n: usize) -> (Parameters, ModelConfig) {
        let cfg = ModelConfig {
            num_items: n,
            dim: 8,
            num_heads: 2,
            ..ModelConfig::default()
        };
        (Parameters::init(&cfg, 5), cfg)
    }

    #[test]
    fn pool_of_three_items_exact() {
        let c = tiny_catalog(3);
        let (p, _) = params_for(3);
        let idx = build_index(&c, &p, &IndexConfig::default()).unwrap();
        assert_eq!(idx.items.len(), 3);
        assert_eq!(idx.mode, IndexMode::Exact);
        assert!(idx.clusters.is_none());
    }

    #[test]
    fn empty_pool_is_error() {
        let mut c = tiny_catalog(3);
        for it in c.items.iter_mut() {
            it.exposure_count = 0;
        }
        let (p, _) = params_for(3);
        assert!(build_index(&c, &p, &IndexConfig::default()).is_err());
    }

    #[test]
    fn rebuild_after_parameter_change_differs() {
        let c = tiny_catalog(4);
        let (mut p, _) = params_for(4);
        let a = build_index(&c, &p, &IndexConfig::default()).unwrap();
        p.get_mut("emb.item").data[0] += 1.0;
        let b = build_index(&c, &p, &IndexConfig::default()).unwrap();
        assert_ne!(a.emb, b.emb);
    }

    #[test]
    fn hand_inner_products() {
        // context (1,0); a scores 2, b scores 1 -> k=1 returns a.
        let mut c = Catalog::default();
        for id in ["a", "b"] {
            let i = c.get_or_insert(id);
            c.items[i].exposure_count = 1;
        }
        let cfg = ModelConfig {
            num_items: 2,
            dim: 2,
            num_heads: 1,
            ..ModelConfig::default()
        };
        let mut p = Parameters::init(&cfg, 0);
        for t in ["emb.item", "emb.cat1", "emb.cat2", "emb.seller", "emb.price"] {
            p.get_mut(t).data.fill(0.0);
        }
        p.get_mut("emb.item").row_mut(0).copy_from_slice(&[2.0, 0.0]);
        p.get_mut("emb.item").row_mut(1).copy_from_slice(&[1.0, 5.0]);
        let idx = build_index(&c, &p, &IndexConfig::default()).unwrap();
        let r = retrieve_topk(&[1.0, 0.0], &idx, 1).unwrap();
        assert_eq!(r.ids, vec!["a".to_string()]);
        assert!((r.scores[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_pool_returns_all_sorted() {
        let c = tiny_catalog(5);
        let (p, _) = params_for(5);
        let idx = build_index(&c, &p, &IndexConfig::default()).unwrap();
        let q = vec![0.3; 8];
        let r = retrieve_topk(&q, &idx, 5).unwrap();
        assert_eq!(r.items.len(), 5);
        for w in r.scores.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(retrieve_topk(&q, &idx, 6).is_err());
    }

    #[test]
    fn exact_matches_brute_force_scan() {
        let c = tiny_catalog(40);
        let (p, _) = params_for(40);
        let idx = build_index(&c, &p, &IndexConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = retrieve_topk(&q, &idx, 7).unwrap();
            let mut brute: Vec<(f64, usize)> = (0..idx.items.len())
                .map(|pos| (dot(&q, idx.emb.row(pos)), pos))
                .collect();
            brute.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then_with(|| idx.ids[a.1].cmp(&idx.ids[b.1]))
            });
            let want: Vec<usize> = brute[..7].iter().map(|&(_, pos)| idx.items[pos]).collect();
            assert_eq!(r.items, want);
        }
    }

    #[test]
    fn tie_break_is_id_ascending() {
        let c = tiny_catalog(6);
        let (mut p, _) = params_for(6);
        // Identical embeddings everywhere: pure tie.
        for t in ["emb.item", "emb.cat1", "emb.cat2", "emb.seller", "emb.price"] {
            let cols = p.get(t).cols();
            let rows = p.get(t).rows();
            for r in 0..rows {
                for i in 0..cols {
                    p.get_mut(t).row_mut(r)[i] = 0.1;
                }
            }
        }
        let idx = build_index(&c, &p, &IndexConfig::default()).unwrap();
        let r = retrieve_topk(&vec![1.0; 8], &idx, 3).unwrap();
        assert_eq!(r.ids, vec!["i000", "i001", "i002"]);
    }

    #[test]
    fn serving_score_matches_training_logits() {
        // Same (context, item): tape-built sample_logits at temperature 1
        // and the index inner product agree to 1e-12.
        let c = tiny_catalog(12);
        let (p, _) = params_for(12);
        let idx = build_index(&c, &p, &IndexConfig::default()).unwrap();
        let mut tape = crate::tape::Tape::new();
        let mut leaves = crate::model::ParamLeaves::new(&p);
        let items: Vec<usize> = (0..12).collect();
        let emb = crate::loss::embed_items(&mut tape, &mut leaves, &c, &items).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ctx = tape.leaf(Tensor::from_vec(&[1, 8], q.clone()));
        let logits = crate::loss::sample_logits(&mut tape, ctx, emb, 1.0);
        let vals = tape.value(logits).data.clone();
        for (row, &item) in items.iter().enumerate() {
            let pos = idx.items.iter().position(|&i| i == item).unwrap();
            let serving = dot(&q, idx.emb.row(pos));
            assert!((vals[row] - serving).abs() <= 1e-12);
        }
    }

    #[test]
    fn approximate_recall_against_exact() {
        let scfg = SyntheticConfig {
            num_users: 50,
            num_items: 2000,
            num_days: 3,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&scfg, 42).unwrap();
        let mcfg = ModelConfig {
            dim: 16,
            num_heads: 2,
            ..ModelConfig::default()
        }
        .for_dataset(&ds);
        let params = Parameters::init(&mcfg, 7);
        let exact = build_index(&ds.catalog, &params, &IndexConfig {
            min_exposures: 0,
            ..IndexConfig::default()
        })
        .unwrap();
        let approx = build_index(&ds.catalog, &params, &IndexConfig {
            mode: IndexMode::Approximate,
            min_exposures: 0,
            ..IndexConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut recall_sum = 0.0;
        let trials = 20;
        for _ in 0..trials {
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e = retrieve_topk(&q, &exact, 100).unwrap();
            let a = retrieve_topk(&q, &approx, 100).unwrap();
            let eset: std::collections::HashSet<_> = e.items.iter().collect();
            let hits = a.items.iter().filter(|i| eset.contains(i)).count();
            // No duplicates, all in pool.
            let aset: std::collections::HashSet<_> = a.items.iter().collect();
            assert_eq!(aset.len(), a.items.len());
            recall_sum += hits as f64 / 100.0;
        }
        let recall = recall_sum / trials as f64;
        assert!(recall >= 0.95, "approximate recall {}", recall);
    }
}
