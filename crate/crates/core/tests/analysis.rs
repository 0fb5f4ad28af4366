mod common;

use proptest::prelude::*;

use common::{brute_force_search, oracle_cider_d, random_context, random_regions, rng, tiny_config, word_vocab, ToySetup};
use recap_core::analysis::{
    attention_mass, direct_textual_mass, read_attention_records, retrieval_quality_histogram, write_attention_records,
    HistogramReport, HISTOGRAM_BUCKETS,
};
use recap_core::decoder::{attention_record, AttentionRecord};
use recap_core::model::CaptionModel;
use recap_core::retrieval::{QueryImage, RetrievalConfig, RetrievalMode, RetrievalStores};
use recap_core::datastore::{Metric, VectorIndex};

fn uniform_record(layers: usize, heads: usize, steps: usize, n: usize, l: usize) -> AttentionRecord {
    let a = vec![1.0 / (n + l) as f64; n + l];
    AttentionRecord {
        image_id: "u".into(),
        visual_len: n,
        text_len: l,
        weights: vec![vec![vec![a; steps]; heads]; layers],
    }
}

#[test]
fn uniform_attention_is_proportional_to_block_size() {
    let s = attention_mass(&[uniform_record(3, 4, 5, 36, 64)], 36, 64).unwrap();
    assert_eq!(s.layers.len(), 3);
    for m in &s.layers {
        assert!((m.visual - 0.36).abs() < 1e-12);
        assert_eq!(m.visual + m.textual, 1.0);
    }
}

#[test]
fn all_visual_attention() {
    let mut a = vec![0.0; 7];
    a[..3].fill(1.0 / 3.0);
    let r = AttentionRecord {
        image_id: "v".into(),
        visual_len: 3,
        text_len: 4,
        weights: vec![vec![vec![a; 2]; 2]],
    };
    let s = attention_mass(&[r], 3, 4).unwrap();
    assert!((s.layers[0].visual - 1.0).abs() < 1e-15);
    assert!(s.layers[0].textual.abs() < 1e-15);
}

#[test]
fn decoder_records_satisfy_the_complement_identity() {
    let vocab = word_vocab();
    for seed in 0..10 {
        let model = CaptionModel::new(tiny_config(vocab.len(), 6), seed).unwrap();
        let mut r = rng(seed);
        let ctx = random_context(&mut r, &vocab, 2, 20);
        let encoded = model.encode(&random_regions(&mut r, 3, 6), &ctx).unwrap();
        let hyp = model.beam(&encoded, 2).unwrap();
        let rec = attention_record(&encoded, &hyp, &model.params, &model.config.decoder).unwrap();
        assert_eq!(rec.num_steps(), hyp.tokens.len() - 1);
        // Padded textual rows get exactly zero weight.
        for heads in &rec.weights {
            for steps in heads {
                for a in steps {
                    assert!(a[3 + ctx.len()..].iter().all(|&w| w == 0.0));
                }
            }
        }
        let s = attention_mass(std::slice::from_ref(&rec), 3, 20).unwrap();
        let direct = direct_textual_mass(&[rec], 3, 20).unwrap();
        for (m, d) in s.layers.iter().zip(direct) {
            assert_eq!(m.visual + m.textual, 1.0);
            assert!((m.textual - d).abs() < 1e-9);
        }
    }
}

#[test]
fn records_round_trip_through_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("att.jsonl");
    let recs = vec![uniform_record(1, 2, 3, 2, 2), uniform_record(1, 2, 1, 2, 2)];
    write_attention_records(&path, &recs).unwrap();
    assert_eq!(read_attention_records(&path).unwrap(), recs);
}

#[test]
fn mismatched_records_are_rejected() {
    let r = uniform_record(1, 1, 1, 2, 3);
    assert!(attention_mass(std::slice::from_ref(&r), 2, 4).is_err());
    let mut short = r.clone();
    short.weights[0][0][0].pop();
    assert!(attention_mass(&[short], 2, 3).is_err());
    let deeper = uniform_record(2, 1, 1, 2, 3);
    assert!(attention_mass(&[r, deeper], 2, 3).is_err());
}

fn record_strategy(n: usize, l: usize) -> impl Strategy<Value = AttentionRecord> {
    let dist = prop::collection::vec(0.01f64..1.0, n + l).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    });
    let steps = prop::collection::vec(dist, 1..4);
    let heads = prop::collection::vec(steps, 2..=2);
    prop::collection::vec(heads, 2..=2).prop_map(move |weights| AttentionRecord {
        image_id: String::new(),
        visual_len: n,
        text_len: l,
        weights,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_is_caption_weighted(
        a in prop::collection::vec(record_strategy(3, 4), 1..5),
        b in prop::collection::vec(record_strategy(3, 4), 1..5),
    ) {
        let sa = attention_mass(&a, 3, 4).unwrap();
        let sb = attention_mass(&b, 3, 4).unwrap();
        let all: Vec<_> = a.iter().chain(&b).cloned().collect();
        let s = attention_mass(&all, 3, 4).unwrap();
        prop_assert_eq!(s.captions, a.len() + b.len());
        for l in 0..2 {
            let want = (sa.layers[l].visual * a.len() as f64 + sb.layers[l].visual * b.len() as f64)
                / (a.len() + b.len()) as f64;
            prop_assert!((s.layers[l].visual - want).abs() < 1e-12);
            prop_assert_eq!(s.layers[l].visual + s.layers[l].textual, 1.0);
            prop_assert!((0.0..=1.0).contains(&s.layers[l].visual));
        }
        let direct = direct_textual_mass(&all, 3, 4).unwrap();
        for l in 0..2 {
            prop_assert!((direct[l] - s.layers[l].textual).abs() < 1e-9);
        }
    }

    #[test]
    fn histogram_counts_every_query(scores in prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..=10.0], 0..60)) {
        let h = HistogramReport::from_scores(RetrievalMode::ImageText, scores.clone());
        prop_assert_eq!(h.counts.len(), HISTOGRAM_BUCKETS);
        prop_assert_eq!(h.counts.iter().sum::<usize>() + h.zero_count, scores.len());
        prop_assert_eq!(h.total, scores.len());
        prop_assert_eq!(h.zero_count, scores.iter().filter(|&&s| s == 0.0).count());
    }
}

#[test]
fn histogram_matches_brute_force_rescore() {
    let setup = ToySetup::new(70, 21);
    let images = &setup.dataset.train[..50];
    let queries: Vec<QueryImage<'_>> = images
        .iter()
        .map(|img| QueryImage { image_id: &img.image_id, embedding: Some(&img.embedding), regions: None })
        .collect();
    let references: Vec<Vec<String>> = images.iter().map(|i| i.captions.clone()).collect();
    let cfg = RetrievalConfig { k: 1, ..Default::default() };
    let h = retrieval_quality_histogram(&queries, &setup.stores, &cfg, &references).unwrap();
    assert_eq!(h.total, 50);

    let store = &setup.stores.captions;
    let vectors: Vec<Vec<f64>> = (0..store.len()).map(|i| store.vector(i).to_vec()).collect();
    let ids: Vec<String> = store.entries().iter().map(|e| e.image_id.clone()).collect();
    let pairs: Vec<(String, Vec<String>)> = images
        .iter()
        .map(|img| {
            let top = brute_force_search(&vectors, &ids, &img.embedding, 1, true, Some(&img.image_id));
            (store.entries()[top[0].0 as usize].caption_text.clone(), img.captions.clone())
        })
        .collect();
    let want = oracle_cider_d(&pairs, &references);
    for (g, w) in h.scores.iter().zip(&want) {
        assert!((g - w).abs() < 1e-9, "{g} vs {w}");
    }
    let expected = HistogramReport::from_scores(RetrievalMode::ImageText, want);
    assert_eq!(h.counts, expected.counts);
    assert_eq!(h.zero_count, expected.zero_count);
}

fn two_image_stores(captions: [&str; 2]) -> RetrievalStores {
    let entries = captions
        .iter()
        .enumerate()
        .map(|(i, c)| recap_core::datastore::DatastoreEntry {
            entry_id: i as u64,
            image_id: format!("s{i}"),
            caption_text: c.to_string(),
            vector: if i == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] },
        })
        .collect();
    RetrievalStores::new(VectorIndex::build(entries, Metric::Cosine).unwrap(), None)
}

#[test]
fn exact_match_lands_in_top_bucket_and_mismatch_at_zero() {
    let stores = two_image_stores(["a red ball on the grass", "purple elephant dancing"]);
    let emb = [vec![1.0, 0.1], vec![0.1, 1.0]];
    let queries = [
        QueryImage { image_id: "q0", embedding: Some(&emb[0]), regions: None },
        QueryImage { image_id: "q1", embedding: Some(&emb[1]), regions: None },
    ];
    let refs = vec![vec!["a red ball on the grass".to_string()], vec!["two blue cups on a table".to_string()]];
    let h = retrieval_quality_histogram(&queries, &stores, &RetrievalConfig { k: 1, ..Default::default() }, &refs).unwrap();
    assert!((h.scores[0] - 10.0).abs() < 1e-9);
    assert_eq!(h.counts[HISTOGRAM_BUCKETS - 1], 1);
    assert_eq!(h.scores[1], 0.0);
    assert_eq!(h.zero_count, 1);
    assert_eq!(h.zero_fraction, 0.5);
}

#[test]
fn empty_store_is_an_error() {
    let stores = RetrievalStores::new(VectorIndex::empty(Metric::Cosine, 2), None);
    let emb = vec![1.0, 0.0];
    let q = [QueryImage { image_id: "q", embedding: Some(&emb), regions: None }];
    let refs = vec![vec!["x".to_string()]];
    assert!(retrieval_quality_histogram(&q, &stores, &RetrievalConfig::default(), &refs).is_err());
    let image_mode = RetrievalConfig { mode: RetrievalMode::ImageImage, ..Default::default() };
    assert!(retrieval_quality_histogram(&q, &stores, &image_mode, &refs).is_err());
}
