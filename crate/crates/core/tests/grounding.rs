use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softrec::data::{split_chronological, synthesize_dataset, PromptTemplate, SampleCaps, SplitRatios, SyntheticSpec};
use softrec::grounding::ItemEmbeddingIndex;
use softrec::metrics::rank_candidates;
use softrec::model::{ModelConfig, ModelState};
use softrec::vocab::TokenSeq;
use softrec::PromptTargetPair;

/// Independent scan: distances by explicit loop, then a stable
/// insertion sort on (distance, id).
fn oracle(items: &[(String, Vec<f64>)], q: &[f64]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for (id, v) in items {
        let mut d = 0.0;
        for i in 0..q.len() {
            let diff = q[i] - v[i];
            d += diff * diff;
        }
        let pos = out
            .iter()
            .position(|(oid, od)| d < *od || (d == *od && id < oid))
            .unwrap_or(out.len());
        out.insert(pos, (id.clone(), d));
    }
    out
}

fn random_catalog(rng: &mut ChaCha8Rng) -> (Vec<(String, Vec<f64>)>, Vec<f64>) {
    let n = rng.gen_range(1..=1000);
    let dim = rng.gen_range(1..=6);
    // Small integer grid so exact ties are common.
    let coord = |rng: &mut ChaCha8Rng| rng.gen_range(-2..=2) as f64;
    let mut ids = HashSet::new();
    let mut items = Vec::with_capacity(n);
    while items.len() < n {
        let id: String = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(b'a'..=b'f') as char).collect();
        if ids.insert(id.clone()) {
            items.push((id, (0..dim).map(|_| coord(rng)).collect()));
        }
    }
    let q = (0..dim).map(|_| coord(rng)).collect();
    (items, q)
}

#[test]
fn ranking_matches_exhaustive_oracle_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut tied = 0;
    for _ in 0..200 {
        let (items, q) = random_catalog(&mut rng);
        let idx = ItemEmbeddingIndex::from_vectors(items.clone(), 0);
        let got = idx.rank_vector(&q, |_| true);
        let want = oracle(&items, &q);
        assert_eq!(got, want);
        tied += want.windows(2).filter(|w| w[0].1 == w[1].1).count();

        let shift: Vec<f64> = q.iter().map(|_| rng.gen_range(-3..=3) as f64).collect();
        let moved: Vec<_> = items
            .iter()
            .map(|(id, v)| (id.clone(), v.iter().zip(&shift).map(|(a, b)| a + b).collect()))
            .collect();
        let mq: Vec<f64> = q.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let moved_ids: Vec<String> =
            ItemEmbeddingIndex::from_vectors(moved, 0).rank_vector(&mq, |_| true).into_iter().map(|p| p.0).collect();
        assert_eq!(moved_ids, got.iter().map(|p| p.0.clone()).collect::<Vec<_>>());
    }
    assert!(tied > 1000, "fixture should exercise ties, saw {tied}");
}

#[test]
fn ground_on_model_embeddings_matches_oracle() {
    let spec = SyntheticSpec { n_users: 10, n_items: 60, n_categories: 4, stickiness: 0.8, min_len: 4, max_len: 5, popularity_skew: 1.0 };
    let data = synthesize_dataset(&spec, 1).unwrap();
    let ds = split_chronological(&data, SplitRatios::default(), &PromptTemplate::default(), 128, SampleCaps::default(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..10 {
        let m = ModelState::init(ModelConfig::new(ds.vocab.len()), seed);
        let idx = ItemEmbeddingIndex::build(&m, &ds.catalog, &ds.vocab);
        let items: Vec<(String, Vec<f64>)> = idx.entries().map(|(i, v)| (i.to_string(), v.to_vec())).collect();
        let gen: Vec<u32> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(4..ds.vocab.len() as u32)).collect();
        let g = idx.ground(&m, &TokenSeq::label(gen.clone()), 7);
        let want = oracle(&items, &m.embed_sequence(&TokenSeq::label(gen.clone())));
        assert_eq!(g.ranked, want[..7].to_vec());
        assert_eq!(g.empty_query, gen.is_empty());
        let all = idx.ground(&m, &TokenSeq::label(gen), ds.catalog.len());
        let mut ids: Vec<&str> = all.ranked.iter().map(|p| p.0.as_str()).collect();
        ids.sort();
        assert_eq!(ids, ds.catalog.iter().map(|i| i.item_id.as_str()).collect::<Vec<_>>());
    }
}

#[test]
fn every_target_title_grounds_to_its_item() {
    let data = synthesize_dataset(&SyntheticSpec::default(), 6).unwrap();
    let ds = split_chronological(&data, SplitRatios::default(), &PromptTemplate::default(), 128, SampleCaps::default(), 6).unwrap();
    let m = ModelState::init(ModelConfig::new(ds.vocab.len()), 6);
    let idx = ItemEmbeddingIndex::build(&m, &ds.catalog, &ds.vocab);
    for p in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
        let title = TokenSeq::label(p.y.content().collect());
        let g = idx.ground(&m, &title, 1);
        assert_eq!(g.ranked[0].0, p.target_item_id);
        assert_eq!(g.ranked[0].1, 0.0);
    }
}

#[test]
fn five_item_candidate_ranking_by_hand() {
    // Zero gains make the logits equal to the output bias, so the model
    // emits token 4 whose embedding is the origin.
    let cfg = ModelConfig { vocab_size: 6, d_model: 2, d_ff: 2, l_max: 8, tied_output: false };
    let mut m = ModelState::zeros(cfg);
    m.param_mut("out.bias").unwrap().data_mut()[4] = 1.0;
    let idx = ItemEmbeddingIndex::from_vectors(
        vec![
            ("a".into(), vec![1.0, 0.0]),
            ("b".into(), vec![0.0, 2.0]),
            ("c".into(), vec![3.0, 0.0]),
            ("d".into(), vec![0.5, 0.0]),
            ("e".into(), vec![1.0, 1.0]),
        ],
        m.version(),
    );
    let pair = PromptTargetPair {
        pair_id: "u#3".into(),
        user_id: "u".into(),
        x: TokenSeq::prompt(vec![1, 5]),
        y: TokenSeq::label(vec![5, 2]),
        target_item_id: "b".into(),
        target_category: "x".into(),
        target_timestamp: 3,
        history_item_ids: vec!["d".into()],
        truncated: false,
    };
    // Distances without the history item d: a 1, e 2, b 4, c 9.
    let p = rank_candidates(&m, &idx, &pair, 1, 10).unwrap();
    assert_eq!(p.target_rank, 3);
    assert_eq!(p.n_candidates, 4);
    assert_eq!(p.top, vec!["a", "e", "b", "c"]);

    let stale = ItemEmbeddingIndex::from_vectors(vec![("b".into(), vec![0.0, 0.0])], m.version() + 1);
    assert!(rank_candidates(&m, &stale, &pair, 1, 10).is_err());
    let masked = PromptTargetPair { history_item_ids: vec!["d".into()], target_item_id: "zz".into(), ..pair };
    assert!(rank_candidates(&m, &idx, &masked, 1, 10).is_err());
}
