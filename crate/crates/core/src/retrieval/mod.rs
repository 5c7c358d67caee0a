//! Zero-shot similarity and exact ranking: max-over-views cosine, the
//! averaged-embedding alternative, the negated-MSE variant, and acc@k.
//!
//! Scores are 32-bit with 64-bit accumulation; ties break by ascending
//! object id so tables are bitwise reproducible.

pub mod store;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::ViewKey;
use crate::encoder::LayerEmbedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Maximum per-view cosine similarity.
    CosineMax,
    /// Cosine against the element-wise mean of view embeddings.
    CosineAvg,
    /// Negated minimum mean-squared difference (higher is better).
    MseMin,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine_max" => Ok(Metric::CosineMax),
            "cosine_avg" => Ok(Metric::CosineAvg),
            "mse_min" => Ok(Metric::MseMin),
            other => Err(Error::config(format!("unknown similarity metric `{other}`"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::CosineMax => "cosine_max",
            Metric::CosineAvg => "cosine_avg",
            Metric::MseMin => "mse_min",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub metric: Metric,
    pub layer: usize,
}

/// One gallery entry of a ranking, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankEntry {
    pub object_id: String,
    pub score: f32,
    pub best_view: Option<ViewKey>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub query: ViewKey,
    pub entries: Vec<RankEntry>,
}

impl Ranking {
    /// 1-based rank of an object, if present.
    pub fn rank_of(&self, object_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.object_id == object_id)
            .map(|i| i + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub n_queries: usize,
}

/// Cosine similarity with 64-bit accumulation, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "embedding dims differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::data("cosine of a zero vector is undefined"));
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

fn mean_squared_difference(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "embedding dims differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Similarity between a query embedding and one shape's view embeddings.
/// Returns the score and, for per-view metrics, the index of the best view.
pub fn shape_similarity(
    query: &[f32],
    views: &[Vec<f32>],
    metric: Metric,
) -> Result<(f32, Option<usize>)> {
    if views.is_empty() {
        return Err(Error::data("shape has no views to compare against"));
    }
    match metric {
        Metric::CosineMax => {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0;
            for (i, v) in views.iter().enumerate() {
                let c = cosine(query, v)?;
                if c > best {
                    best = c;
                    best_idx = i;
                }
            }
            Ok((best as f32, Some(best_idx)))
        }
        Metric::CosineAvg => {
            let dim = views[0].len();
            let mut mean = vec![0.0f64; dim];
            for v in views {
                if v.len() != dim {
                    return Err(Error::data("inconsistent view embedding dims"));
                }
                for (m, &x) in mean.iter_mut().zip(v) {
                    *m += x as f64;
                }
            }
            let inv = 1.0 / views.len() as f64;
            let mean32: Vec<f32> = mean.iter().map(|m| (m * inv) as f32).collect();
            Ok((cosine(query, &mean32)? as f32, None))
        }
        Metric::MseMin => {
            let mut best = f64::INFINITY;
            let mut best_idx = 0;
            for (i, v) in views.iter().enumerate() {
                let d = mean_squared_difference(query, v)?;
                if d < best {
                    best = d;
                    best_idx = i;
                }
            }
            Ok((-(best as f32), Some(best_idx)))
        }
    }
}

/// A retrieval corpus: object id -> view embeddings with their keys.
pub type GalleryEmbeddings = BTreeMap<String, Vec<(ViewKey, Vec<f32>)>>;

/// Rank the whole gallery for one query. Entries are sorted by descending
/// score with ascending-id tie-break; errors name the offending object.
pub fn rank_gallery(
    query_key: &ViewKey,
    query: &LayerEmbedding,
    gallery: &GalleryEmbeddings,
    metric: Metric,
) -> Result<Ranking> {
    if gallery.is_empty() {
        return Err(Error::data("gallery is empty"));
    }
    let mut entries = Vec::with_capacity(gallery.len());
    for (object_id, views) in gallery {
        let vecs: Vec<Vec<f32>> = views.iter().map(|(_, v)| v.clone()).collect();
        let (score, best_idx) = shape_similarity(&query.values, &vecs, metric)
            .map_err(|e| Error::data(format!("object {object_id}: {e}")))?;
        entries.push(RankEntry {
            object_id: object_id.clone(),
            score,
            best_view: best_idx.map(|i| views[i].0.clone()),
        });
    }
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.object_id.cmp(&b.object_id))
    });
    Ok(Ranking {
        query: query_key.clone(),
        entries,
    })
}

/// Percentage of queries whose ground truth appears in the top `k`.
pub fn acc_at_k(
    rankings: &[Ranking],
    ground_truth: &BTreeMap<ViewKey, String>,
    k: usize,
) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::data("no rankings to evaluate"));
    }
    let mut hits = 0usize;
    for ranking in rankings {
        let gt = ground_truth.get(&ranking.query).ok_or_else(|| {
            Error::data(format!("query {} has no ground truth", ranking.query))
        })?;
        let rank = ranking.rank_of(gt).ok_or_else(|| {
            Error::data(format!(
                "ground truth {gt} absent from ranking of {}",
                ranking.query
            ))
        })?;
        if rank <= k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

/// acc@1 / acc@5 summary with the ground truth taken from each query's
/// own object id.
pub fn metrics_with_identity_gt(rankings: &[Ranking]) -> Result<Metrics> {
    let gt: BTreeMap<ViewKey, String> = rankings
        .iter()
        .map(|r| (r.query.clone(), r.query.object_id.clone()))
        .collect();
    Ok(Metrics {
        acc_at_1: acc_at_k(rankings, &gt, 1)?,
        acc_at_5: acc_at_k(rankings, &gt, 5)?,
        n_queries: rankings.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(id: &str) -> ViewKey {
        ViewKey::new(id, "c", "anime", 0.0, 20.0).unwrap()
    }

    fn emb(values: Vec<f32>) -> LayerEmbedding {
        LayerEmbedding { layer: 1, values }
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn shape_similarity_matches_forced_arithmetic() {
        let q = vec![1.0f32, 0.0];
        let views = vec![vec![1.0f32, 0.0], vec![0.0f32, 1.0]];
        let (max_score, idx) = shape_similarity(&q, &views, Metric::CosineMax).unwrap();
        assert_eq!(max_score, 1.0);
        assert_eq!(idx, Some(0));
        let (avg_score, idx) = shape_similarity(&q, &views, Metric::CosineAvg).unwrap();
        assert!((avg_score as f64 - 0.70711).abs() < 1e-5);
        assert_eq!(idx, None);
        // single view degenerates to plain cosine
        let (s, _) = shape_similarity(&q, &views[..1].to_vec(), Metric::CosineMax).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn duplicating_a_view_never_changes_cosine_max() {
        let q = vec![0.3f32, -0.2, 0.9];
        let mut views = vec![vec![0.1f32, 0.2, 0.3], vec![-0.5f32, 0.4, 0.2]];
        let (a, _) = shape_similarity(&q, &views, Metric::CosineMax).unwrap();
        views.push(views[0].clone());
        let (b, _) = shape_similarity(&q, &views, Metric::CosineMax).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mse_min_is_negated_distance_with_argmin() {
        let q = vec![1.0f32, 1.0];
        let views = vec![vec![2.0f32, 2.0], vec![1.0f32, 0.0]];
        let (score, idx) = shape_similarity(&q, &views, Metric::MseMin).unwrap();
        assert_eq!(idx, Some(1)); // mse 0.5 beats mse 1.0
        assert_eq!(score, -0.5);
    }

    #[test]
    fn gallery_containing_query_ranks_first() {
        let mut gallery = GalleryEmbeddings::new();
        gallery.insert(
            "a".into(),
            vec![(key("a"), vec![0.0, 1.0]), (key("a"), vec![1.0, 1.0])],
        );
        gallery.insert("b".into(), vec![(key("b"), vec![-1.0, 0.5])]);
        let q = emb(vec![1.0, 1.0]);
        let ranking = rank_gallery(&key("q"), &q, &gallery, Metric::CosineMax).unwrap();
        assert_eq!(ranking.entries[0].object_id, "a");
        assert_eq!(ranking.entries[0].score, 1.0);
        assert_eq!(
            ranking.entries[0].best_view.as_ref().unwrap().azimuth_deg,
            0.0
        );
    }

    #[test]
    fn equal_scores_tie_break_by_object_id() {
        let mut gallery = GalleryEmbeddings::new();
        for id in ["zeta", "alpha", "mid"] {
            gallery.insert(id.into(), vec![(key(id), vec![1.0, 0.0])]);
        }
        let ranking = rank_gallery(&key("q"), &emb(vec![1.0, 0.0]), &gallery, Metric::CosineMax)
            .unwrap();
        let ids: Vec<&str> = ranking.entries.iter().map(|e| e.object_id.as_str()).collect();
        assert_eq!(ids, ["alpha", "mid", "zeta"]);
    }

    #[test]
    fn dim_mismatch_names_object() {
        let mut gallery = GalleryEmbeddings::new();
        gallery.insert("good".into(), vec![(key("good"), vec![1.0, 0.0])]);
        gallery.insert("bad".into(), vec![(key("bad"), vec![1.0, 0.0, 0.0])]);
        let err =
            rank_gallery(&key("q"), &emb(vec![1.0, 0.0]), &gallery, Metric::CosineMax).unwrap_err();
        assert!(err.to_string().contains("bad"), "{err}");
    }

    #[test]
    fn acc_at_k_counts_top_k_hits() {
        let mut gallery = GalleryEmbeddings::new();
        for (i, id) in ["a", "b", "c", "d", "e", "f"].iter().enumerate() {
            gallery.insert(
                id.to_string(),
                vec![(key(id), vec![1.0, i as f32 * 0.5])],
            );
        }
        let q = key("c");
        let ranking = rank_gallery(&q, &emb(vec![1.0, 0.0]), &gallery, Metric::CosineMax).unwrap();
        assert_eq!(ranking.rank_of("a"), Some(1));
        let rankings = vec![ranking];
        let gt: BTreeMap<ViewKey, String> = [(q.clone(), "c".to_string())].into();
        assert_eq!(acc_at_k(&rankings, &gt, 1).unwrap(), 0.0);
        let rank_c = rankings[0].rank_of("c").unwrap();
        assert!(rank_c <= 5);
        assert_eq!(acc_at_k(&rankings, &gt, 5).unwrap(), 100.0);
        assert_eq!(acc_at_k(&rankings, &gt, gallery.len()).unwrap(), 100.0);
        // missing ground truth errors
        let empty_gt = BTreeMap::new();
        assert!(acc_at_k(&rankings, &empty_gt, 1).is_err());
    }

    proptest! {
        /// Positive rescaling of any embedding never changes cosine rankings.
        #[test]
        fn cosine_ranking_scale_invariance(
            scale in 0.05f32..20.0,
            raw in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 4), 2..8)
        ) {
            let valid: Vec<Vec<f32>> = raw
                .into_iter()
                .filter(|v| v.iter().any(|x| x.abs() > 1e-3))
                .collect();
            prop_assume!(valid.len() >= 2);
            let q = vec![1.0f32, -0.5, 0.25, 2.0];
            let mut gallery = GalleryEmbeddings::new();
            for (i, v) in valid.iter().enumerate() {
                gallery.insert(format!("obj{i:02}"), vec![(key(&format!("obj{i:02}")), v.clone())]);
            }
            let before = rank_gallery(&key("q"), &emb(q.clone()), &gallery, Metric::CosineMax).unwrap();
            // rescale one embedding
            let target = "obj00";
            let scaled: Vec<f32> = gallery[target][0].1.iter().map(|x| x * scale).collect();
            gallery.get_mut(target).unwrap()[0].1 = scaled;
            let after = rank_gallery(&key("q"), &emb(q), &gallery, Metric::CosineMax).unwrap();
            let ids = |r: &Ranking| r.entries.iter().map(|e| e.object_id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&before), ids(&after));
        }

        /// Appending a strictly-worse view never changes a shape's score.
        #[test]
        fn worse_view_never_changes_cosine_max(
            q in proptest::collection::vec(-3.0f32..3.0, 4),
            v in proptest::collection::vec(-3.0f32..3.0, 4),
        ) {
            prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let mut views = vec![q.clone(), v];
            let (before, _) = shape_similarity(&q, &views, Metric::CosineMax).unwrap();
            let worse: Vec<f32> = q.iter().map(|x| -x).collect();
            views.push(worse);
            let (after, _) = shape_similarity(&q, &views, Metric::CosineMax).unwrap();
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn mse_min_is_not_scale_invariant() {
        // documented difference with the cosine metrics
        let q = vec![1.0f32, 0.0];
        let views = vec![vec![1.0f32, 0.0]];
        let (a, _) = shape_similarity(&q, &views, Metric::MseMin).unwrap();
        let scaled = vec![vec![2.0f32, 0.0]];
        let (b, _) = shape_similarity(&q, &scaled, Metric::MseMin).unwrap();
        assert_ne!(a, b);
        let (ca, _) = shape_similarity(&q, &views, Metric::CosineMax).unwrap();
        let (cb, _) = shape_similarity(&q, &scaled, Metric::CosineMax).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn gallery_insertion_order_never_changes_ranking() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let items: Vec<(String, Vec<f32>)> = (0..20)
            .map(|i| {
                (
                    format!("obj{i:02}"),
                    (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                )
            })
            .collect();
        let q = emb((0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let build = |order: &[usize]| {
            let mut g = GalleryEmbeddings::new();
            for &i in order {
                let (id, v) = &items[i];
                g.insert(id.clone(), vec![(key(id), v.clone())]);
            }
            rank_gallery(&key("q"), &q, &g, Metric::CosineMax).unwrap()
        };
        let fwd: Vec<usize> = (0..20).collect();
        let rev: Vec<usize> = (0..20).rev().collect();
        assert_eq!(build(&fwd), build(&rev));
    }
}
