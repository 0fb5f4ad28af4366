mod common;

use rand::Rng;

use common::{random_context, random_regions, rng, tiny_config, word_vocab};
use recap_core::encoder::RegionFeatures;
use recap_core::model::CaptionModel;
use recap_core::tensor::Tensor;
use recap_core::text::{encode_context, PAD};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn output_shapes_follow_inputs() {
    let vocab = word_vocab();
    let model = CaptionModel::new(tiny_config(vocab.len(), 6), 1).unwrap();
    let mut r = rng(1);
    let regions = random_regions(&mut r, 5, 6);
    let ctx = random_context(&mut r, &vocab, 2, 20);
    let out = model.encode(&regions, &ctx).unwrap();
    assert_eq!(out.visual.shape(), &[5, 8]);
    assert_eq!(out.textual.shape(), &[20, 8]);
    assert_eq!(out.text_valid, ctx.valid_mask());
}

#[test]
fn extra_padding_does_not_change_real_positions() {
    let vocab = word_vocab();
    for seed in 0..20 {
        let model = CaptionModel::new(tiny_config(vocab.len(), 6), seed).unwrap();
        let mut r = rng(seed);
        let n = r.random_range(1..5);
        let regions = random_regions(&mut r, n, 6);
        let caps: Vec<String> = (0..r.random_range(0..3)).map(|_| common::random_caption(&mut r, 1, 4)).collect();
        let short = encode_context(&caps, &vocab, 16).unwrap();
        let long = encode_context(&caps, &vocab, 24).unwrap();
        let a = model.encode(&regions, &short).unwrap();
        let b = model.encode(&regions, &long).unwrap();
        assert!(close(a.visual.data(), b.visual.data(), 1e-12));
        for i in 0..short.len() {
            assert!(close(a.textual.row(i), b.textual.row(i), 1e-12), "seed {seed} row {i}");
        }
    }
}

#[test]
fn padding_contents_are_invisible() {
    let vocab = word_vocab();
    let model = CaptionModel::new(tiny_config(vocab.len(), 6), 4).unwrap();
    let mut r = rng(4);
    let regions = random_regions(&mut r, 3, 6);
    let ctx = random_context(&mut r, &vocab, 1, 20);
    let mut altered = ctx.clone();
    for id in altered.ids.iter_mut().skip(ctx.len()) {
        assert_eq!(*id, PAD);
        *id = 8;
    }
    let a = model.encode(&regions, &ctx).unwrap();
    let b = model.encode(&regions, &altered).unwrap();
    assert_eq!(a.visual, b.visual);
    for i in 0..ctx.len() {
        assert_eq!(a.textual.row(i), b.textual.row(i));
    }
}

#[test]
fn region_order_permutes_visual_rows_only() {
    let vocab = word_vocab();
    for seed in 0..10 {
        let model = CaptionModel::new(tiny_config(vocab.len(), 6), seed).unwrap();
        let mut r = rng(seed + 3);
        let n = r.random_range(2..6);
        let regions = random_regions(&mut r, n, 6);
        let ctx = random_context(&mut r, &vocab, 2, 16);
        let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| regions.features.row(i).to_vec()).collect();
        let shuffled = RegionFeatures::new(Tensor::from_rows(&rows).unwrap()).unwrap();
        let a = model.encode(&regions, &ctx).unwrap();
        let b = model.encode(&shuffled, &ctx).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!(close(b.visual.row(j), a.visual.row(i), 1e-9));
        }
        assert!(close(a.textual.data(), b.textual.data(), 1e-9));
    }
}

#[test]
fn blacked_out_regions_are_zero_with_same_shape() {
    let mut r = rng(2);
    let regions = random_regions(&mut r, 4, 6);
    let black = regions.blacked_out();
    assert!(black.is_blacked_out());
    assert_eq!(black.features.shape(), regions.features.shape());
    assert!(black.features.data().iter().all(|&v| v == 0.0));
    let vocab = word_vocab();
    let model = CaptionModel::new(tiny_config(vocab.len(), 6), 2).unwrap();
    let ctx = random_context(&mut r, &vocab, 2, 16);
    assert!(model.encode(&black, &ctx).unwrap().visual.is_finite());
}

#[test]
fn empty_context_encodes() {
    let vocab = word_vocab();
    let model = CaptionModel::new(tiny_config(vocab.len(), 6), 3).unwrap();
    let ctx = encode_context::<&str>(&[], &vocab, 8).unwrap();
    assert_eq!(ctx.len(), 2);
    let out = model.encode(&random_regions(&mut rng(3), 2, 6), &ctx).unwrap();
    assert_eq!(out.text_valid.iter().filter(|&&v| v).count(), 2);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let vocab = word_vocab();
    let model = CaptionModel::new(tiny_config(vocab.len(), 6), 3).unwrap();
    let mut r = rng(3);
    let ctx = random_context(&mut r, &vocab, 1, 16);
    assert!(model.encode(&random_regions(&mut r, 2, 5), &ctx).is_err());
    let too_long = random_context(&mut r, &vocab, 1, 40);
    assert!(model.encode(&random_regions(&mut r, 2, 6), &too_long).is_err());
}

#[test]
fn many_captions_share_the_last_segment_row() {
    let vocab = word_vocab();
    let mut cfg = tiny_config(vocab.len(), 6);
    cfg.encoder.max_segments = 2;
    let model = CaptionModel::new(cfg, 5).unwrap();
    let caps = ["red cat", "blue dog", "a ball", "the grass"];
    let ctx = encode_context(&caps, &vocab, 24).unwrap();
    let out = model.encode(&random_regions(&mut rng(5), 2, 6), &ctx).unwrap();
    assert!(out.textual.is_finite());
}
