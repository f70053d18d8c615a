use landmark_reid::evalkit::{rank_gallery, topk_accuracy, EmbeddingRecord, QueryResult, RetrievalReport};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;
use support::{chance_monte_carlo, records, sort_oracle, unit};

#[test]
fn identical_vector_ranks_first_and_ties_go_to_lower_id() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = records(&mut rng, &[0, 1, 2, 3], 8);
    let q = g[2].embedding.clone();
    assert_eq!(rank_gallery(&q, &g)[0], 2);
    g[3].embedding = g[1].embedding.clone();
    let q = g[1].embedding.clone();
    assert_eq!(&rank_gallery(&q, &g)[..2], &[1, 3]);
}

#[test]
fn rank_six_is_a_top5_miss_and_top10_hit() {
    let mut gallery = Vec::new();
    for i in 0..12 {
        let mut e = vec![0.0f32; 12];
        e[0] = 1.0 - 0.01 * i as f32;
        e[1] = (1.0 - e[0] * e[0]).sqrt();
        gallery.push(EmbeddingRecord {
            sample_id: i,
            identity: if i == 5 { "target".into() } else { format!("other{i}") },
            embedding: e,
        });
    }
    let mut qe = vec![0.0f32; 12];
    qe[0] = 1.0;
    let q = EmbeddingRecord {
        sample_id: 0,
        identity: "target".into(),
        embedding: qe,
    };
    let r = topk_accuracy(&[q], &gallery, "d").unwrap();
    assert_eq!(r.queries[0].first_hit, 5);
    assert_eq!((r.top1, r.top5, r.top10), (0.0, 0.0, 1.0));
}

#[test]
fn perfect_separation_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gallery = records(&mut rng, &[0, 1, 2, 3, 4], 16);
    let queries: Vec<EmbeddingRecord> = gallery.iter().map(|g| EmbeddingRecord { sample_id: g.sample_id + 100, ..g.clone() }).collect();
    let r = topk_accuracy(&queries, &gallery, "d").unwrap();
    assert_eq!((r.top1, r.top5, r.top10), (1.0, 1.0, 1.0));
    assert_eq!(r.averaged_over, "queries");
}

#[test]
fn random_embeddings_sit_at_chance_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n_ids = 750;
    let gallery_ids: Vec<usize> = (0..n_ids).flat_map(|i| [i, i, i]).collect();
    let gallery = records(&mut rng, &gallery_ids, 16);
    let query_ids: Vec<usize> = (0..1500).map(|i| i % n_ids).collect();
    let queries = records(&mut rng, &query_ids, 16);
    let r = topk_accuracy(&queries, &gallery, "d").unwrap();

    let trials = 200_000;
    let mc = chance_monte_carlo(&mut rng, n_ids, 3, trials);
    for (i, (got, k)) in [r.top1, r.top5, r.top10].into_iter().zip([1, 5, 10]).enumerate() {
        let p = mc[i];
        let sigma = (p * (1.0 - p) / r.n_queries as f64 + p * (1.0 - p) / trials as f64).sqrt();
        assert!((got - p).abs() <= 3.0 * sigma, "top-{k}: {got} vs Monte-Carlo {p} (sigma {sigma})");
    }
    assert!((mc[0] - 3.0 / 2250.0).abs() < 5e-4);
}

/// Product of random plane rotations: an exact isometry up to rounding.
fn rotate(v: &[f32], planes: &[(usize, usize, f64)]) -> Vec<f32> {
    let mut x: Vec<f64> = v.iter().map(|&a| a as f64).collect();
    for &(i, j, a) in planes {
        let (s, c) = a.sin_cos();
        let (xi, xj) = (x[i], x[j]);
        x[i] = c * xi - s * xj;
        x[j] = s * xi + c * xj;
    }
    x.into_iter().map(|a| a as f32).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_matches_exhaustive_sort(s in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let ids: Vec<usize> = (0..50).map(|i| i % 17).collect();
        let gallery = records(&mut rng, &ids, 8);
        let q = unit(&mut rng, 8);
        prop_assert_eq!(rank_gallery(&q, &gallery), sort_oracle(&q, &gallery));
    }

    #[test]
    fn topk_is_monotone(hits in prop::collection::vec(0usize..40, 1..60)) {
        let queries = hits
            .iter()
            .enumerate()
            .map(|(i, &h)| QueryResult { query_id: i, identity: String::new(), ranked: Vec::new(), first_hit: h })
            .collect();
        let r = RetrievalReport {
            top1: 0.0,
            top5: 0.0,
            top10: 0.0,
            n_queries: hits.len(),
            n_gallery: 40,
            averaged_over: "queries".into(),
            config_digest: String::new(),
            queries,
        };
        let (a, b, c) = (r.topk(1), r.topk(5), r.topk(10));
        prop_assert!(0.0 <= a && a <= b && b <= c && c <= 1.0);
    }

    #[test]
    fn ranking_invariant_under_rotation_and_gallery_order(s in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let ids: Vec<usize> = (0..30).map(|i| i % 10).collect();
        let gallery = records(&mut rng, &ids, 6);
        let queries = records(&mut rng, &(0..10).collect::<Vec<_>>(), 6);
        let planes: Vec<(usize, usize, f64)> = (0..12)
            .map(|_| {
                let i = rng.random_range(0..6);
                let j = (i + rng.random_range(1..6)) % 6;
                (i, j, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        let rot = |v: &[EmbeddingRecord]| -> Vec<EmbeddingRecord> {
            v.iter().map(|r| EmbeddingRecord { embedding: rotate(&r.embedding, &planes), ..r.clone() }).collect()
        };
        let (rg, rq) = (rot(&gallery), rot(&queries));
        for (q, qr) in queries.iter().zip(&rq) {
            let mut d: Vec<f64> = gallery
                .iter()
                .map(|g| q.embedding.iter().zip(&g.embedding).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum())
                .collect();
            d.sort_by(f64::total_cmp);
            if d.windows(2).any(|w| w[1] - w[0] < 1e-5) {
                continue;
            }
            prop_assert_eq!(rank_gallery(&q.embedding, &gallery), rank_gallery(&qr.embedding, &rg));
        }
        let base = topk_accuracy(&queries, &gallery, "d").unwrap();
        let mut shuffled = gallery.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(base, topk_accuracy(&queries, &shuffled, "d").unwrap());
    }
}
