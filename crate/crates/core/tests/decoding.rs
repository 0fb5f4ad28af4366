mod common;

use rand::Rng;

use common::{exhaustive_sequences, random_matrix, rng, tiny_config};
use recap_core::decoder::{beam_search, decode_step, greedy_decode, sample_index, sample_sequence, DecoderConfig};
use recap_core::encoder::EncoderOutput;
use recap_core::model::CaptionModel;
use recap_core::tensor::{log_softmax_row, ParameterSet};
use recap_core::text::{BOS, EOS};

fn random_memory(seed: u64, d: usize) -> EncoderOutput {
    let mut r = rng(seed);
    let (n, l) = (r.random_range(1..5), r.random_range(1..6));
    let valid_len = r.random_range(1..=l);
    EncoderOutput {
        visual: random_matrix(&mut r, n, d),
        textual: random_matrix(&mut r, l, d),
        text_valid: (0..l).map(|i| i < valid_len).collect(),
    }
}

fn random_model(seed: u64, vocab: usize, max_len: usize) -> CaptionModel {
    let mut model = CaptionModel::new(tiny_config(vocab, max_len), seed).unwrap();
    // Larger logits than the 0.02-scale init so decoding choices vary.
    let mut r = rng(seed ^ 0xabc);
    let id = model.params.id("dec.head.w").unwrap();
    for v in model.params.value_mut(id).data_mut() {
        *v = r.random_range(-2.0..2.0);
    }
    model
}

#[test]
fn beam_width_one_is_greedy() {
    for seed in 0..100 {
        let model = random_model(seed, 16, 6);
        let mem = random_memory(seed, 8);
        let g = greedy_decode(&mem, &model.params, &model.config.decoder, 6).unwrap();
        let b = beam_search(&mem, &model.params, &model.config.decoder, 1, 6).unwrap();
        assert_eq!(g.tokens, b.tokens, "seed {seed}");
        assert!((g.log_prob - b.log_prob).abs() < 1e-12);
    }
}

#[test]
fn full_width_beam_is_exhaustive_argmax() {
    // Vocabulary 5 has no EOS, so every hypothesis runs to length 3 and
    // width 125 keeps all 5³ sequences.
    for seed in 0..10 {
        let model = random_model(seed, 5, 3);
        let mem = random_memory(seed + 50, 8);
        let all = exhaustive_sequences(&mem, &model.params, &model.config.decoder, 3);
        assert_eq!(all.len(), 125);
        let best = all
            .iter()
            .min_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)))
            .unwrap();
        let beam = beam_search(&mem, &model.params, &model.config.decoder, 125, 3).unwrap();
        assert_eq!(beam.tokens, best.0, "seed {seed}");
        assert!((beam.log_prob - best.1).abs() < 1e-9);
    }
}

#[test]
fn wider_beams_never_score_below_greedy() {
    for seed in 0..30 {
        let model = random_model(seed, 16, 6);
        let mem = random_memory(seed, 8);
        let g = greedy_decode(&mem, &model.params, &model.config.decoder, 6).unwrap();
        for w in [2, 3, 5] {
            let b = beam_search(&mem, &model.params, &model.config.decoder, w, 6).unwrap();
            assert!(b.log_prob >= g.log_prob - 1e-12);
        }
    }
}

#[test]
fn generation_stops_at_eos_or_max_len() {
    for seed in 0..20 {
        let model = random_model(seed, 16, 5);
        let mem = random_memory(seed, 8);
        for hyp in [
            greedy_decode(&mem, &model.params, &model.config.decoder, 5).unwrap(),
            beam_search(&mem, &model.params, &model.config.decoder, 3, 5).unwrap(),
            sample_sequence(&mem, &model.params, &model.config.decoder, seed, 5).unwrap(),
        ] {
            assert_eq!(hyp.tokens[0], BOS);
            assert!(hyp.tokens.len() <= 6);
            let eos = hyp.tokens.iter().position(|&t| t == EOS);
            assert!(eos.is_none_or(|p| p == hyp.tokens.len() - 1));
        }
    }
}

// ------------------------------------------------------- manual forward

type Mat = (usize, usize, Vec<f64>);

fn p(ps: &ParameterSet, name: &str) -> Vec<f64> {
    ps.by_name(name).unwrap_or_else(|| panic!("{name}")).data().to_vec()
}

fn affine(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let (r, c, ref xd) = *x;
    let out_c = b.len();
    let mut out = vec![0.0; r * out_c];
    for i in 0..r {
        for j in 0..out_c {
            let mut s = b[j];
            for k in 0..c {
                s += xd[i * c + k] * w[k * out_c + j];
            }
            out[i * out_c + j] = s;
        }
    }
    (r, out_c, out)
}

fn lin(ps: &ParameterSet, name: &str, x: &Mat) -> Mat {
    affine(x, &p(ps, &format!("{name}.w")), &p(ps, &format!("{name}.b")))
}

fn norm(ps: &ParameterSet, name: &str, x: &Mat) -> Mat {
    let (g, b) = (p(ps, &format!("{name}.g")), p(ps, &format!("{name}.b")));
    let (r, c, ref xd) = *x;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &xd[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) / (var + 1e-5).sqrt() * g[j] + b[j];
        }
    }
    (r, c, out)
}

fn plus(a: &Mat, b: &Mat) -> Mat {
    (a.0, a.1, a.2.iter().zip(&b.2).map(|(x, y)| x + y).collect())
}

fn mha(ps: &ParameterSet, name: &str, x: &Mat, mem: &Mat, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> Mat {
    let q = lin(ps, &format!("{name}.q"), x);
    let k = lin(ps, &format!("{name}.k"), mem);
    let v = lin(ps, &format!("{name}.v"), mem);
    let (tq, d, tk) = (q.0, q.1, k.0);
    let w = d / heads;
    let mut out = vec![0.0; tq * d];
    for h in 0..heads {
        for i in 0..tq {
            let keys: Vec<usize> = (0..tk).filter(|&j| allowed(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| (0..w).map(|c| q.2[i * d + h * w + c] * k.2[j * d + h * w + c]).sum::<f64>() / (w as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (&j, s) in keys.iter().zip(&scores) {
                let a = (s - m).exp() / z;
                for c in 0..w {
                    out[i * d + h * w + c] += a * v.2[j * d + h * w + c];
                }
            }
        }
    }
    lin(ps, &format!("{name}.o"), &(tq, d, out))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Decoder logits for `tokens`, written out from the architecture.
fn manual_decoder(ps: &ParameterSet, cfg: &DecoderConfig, enc: &EncoderOutput, tokens: &[usize]) -> Mat {
    let d = cfg.hidden;
    let (tok, pos) = (p(ps, "dec.tok_emb"), p(ps, "dec.pos_emb"));
    let t = tokens.len();
    let mut x: Mat = (t, d, vec![0.0; t * d]);
    for (i, &id) in tokens.iter().enumerate() {
        for c in 0..d {
            x.2[i * d + c] = tok[id * d + c] + pos[i * d + c];
        }
    }
    let n = enc.visual.rows();
    let mut memd = enc.visual.data().to_vec();
    memd.extend_from_slice(enc.textual.data());
    let mem: Mat = (n + enc.textual.rows(), d, memd);
    for l in 0..cfg.layers {
        let pre = format!("dec.l{l}");
        let a = norm(ps, &format!("{pre}.ln1"), &x);
        x = plus(&x, &mha(ps, &format!("{pre}.self"), &a, &a, cfg.heads, |i, j| j <= i));
        let b = norm(ps, &format!("{pre}.ln2"), &x);
        let valid = |j: usize| j < n || enc.text_valid[j - n];
        x = plus(&x, &mha(ps, &format!("{pre}.cross"), &b, &mem, cfg.heads, |_, j| valid(j)));
        let c = norm(ps, &format!("{pre}.ln3"), &x);
        let mut h = lin(ps, &format!("{pre}.ffn.fc1"), &c);
        h.2.iter_mut().for_each(|v| *v = gelu(*v));
        x = plus(&x, &lin(ps, &format!("{pre}.ffn.fc2"), &h));
    }
    let x = norm(ps, "dec.ln_f", &x);
    lin(ps, "dec.head", &x)
}

#[test]
fn decoder_matches_manual_forward() {
    for seed in 0..10 {
        let model = random_model(seed, 16, 6);
        let cfg = &model.config.decoder;
        let mem = random_memory(seed + 7, 8);
        let mut r = rng(seed);
        let len = r.random_range(1..=6);
        let mut tokens = vec![BOS];
        tokens.extend((1..len).map(|_| r.random_range(0..16)));
        let want = manual_decoder(&model.params, cfg, &mem, &tokens);
        for end in 1..=tokens.len() {
            let (logits, _) = decode_step(&tokens[..end], &mem, &model.params, cfg, false).unwrap();
            let row = &want.2[(end - 1) * want.1..end * want.1];
            for (a, b) in logits.iter().zip(row) {
                assert!((a - b).abs() < 1e-9, "seed {seed} step {end}: {a} vs {b}");
            }
        }
    }
}

// ------------------------------------------------------- structural

#[test]
fn future_tokens_do_not_change_earlier_logits() {
    for seed in 0..20 {
        let model = random_model(seed, 16, 6);
        let mem = random_memory(seed, 8);
        let mut r = rng(seed + 1);
        let a: Vec<usize> = std::iter::once(BOS).chain((0..5).map(|_| r.random_range(0..16))).collect();
        let mut b = a.clone();
        let cut = r.random_range(1..6);
        for t in b.iter_mut().skip(cut) {
            *t = r.random_range(0..16);
        }
        let run = |seq: &[usize]| {
            let mut g = recap_core::tensor::Graph::new(&model.params);
            let m = mem.to_nodes(&mut g);
            let f = recap_core::decoder::decoder_graph(&mut g, &model.config.decoder, &m, seq).unwrap();
            g.value(f.logits).clone()
        };
        let (la, lb) = (run(&a), run(&b));
        for i in 0..cut {
            assert_eq!(la.row(i), lb.row(i), "seed {seed} row {i}");
        }
    }
}

#[test]
fn padded_memory_rows_are_ignored() {
    for seed in 0..20 {
        let model = random_model(seed, 16, 6);
        let mut mem = random_memory(seed, 8);
        let extra = random_matrix(&mut rng(seed + 99), 3, 8);
        let base = decode_step(&[BOS, 7], &mem, &model.params, &model.config.decoder, false).unwrap().0;
        // Append garbage rows marked as padding.
        let mut text = mem.textual.data().to_vec();
        text.extend_from_slice(extra.data());
        let rows = mem.textual.rows() + 3;
        mem.textual = recap_core::tensor::Tensor::matrix(rows, 8, text).unwrap();
        mem.text_valid.extend([false; 3]);
        let padded = decode_step(&[BOS, 7], &mem, &model.params, &model.config.decoder, false).unwrap().0;
        for (a, b) in base.iter().zip(&padded) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn permuting_regions_leaves_logits_unchanged() {
    for seed in 0..20 {
        let model = random_model(seed, 16, 6);
        let mem = random_memory(seed, 8);
        let n = mem.visual.rows();
        let order: Vec<usize> = (0..n).rev().collect();
        let permuted = EncoderOutput {
            visual: recap_core::tensor::Tensor::from_rows(&order.iter().map(|&i| mem.visual.row(i).to_vec()).collect::<Vec<_>>())
                .unwrap(),
            ..mem.clone()
        };
        let a = decode_step(&[BOS, 3, 9], &mem, &model.params, &model.config.decoder, false).unwrap().0;
        let b = decode_step(&[BOS, 3, 9], &permuted, &model.params, &model.config.decoder, false).unwrap().0;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

// ------------------------------------------------------- sampling

#[test]
fn inverse_cdf_frequencies() {
    let lp = [0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()];
    let mut r = rng(5);
    let draws = 20_000;
    let hits = (0..draws).filter(|_| sample_index(&lp, r.random::<f64>()) == 0).count();
    let freq = hits as f64 / draws as f64;
    assert!((freq - 0.7).abs() < 0.02, "{freq}");
}

#[test]
fn sampled_first_token_follows_model_distribution() {
    // Zero head weights make the logits equal to the head bias everywhere.
    let mut model = CaptionModel::new(tiny_config(8, 3), 0).unwrap();
    let w = model.params.id("dec.head.w").unwrap();
    model.params.value_mut(w).data_mut().fill(0.0);
    let b = model.params.id("dec.head.b").unwrap();
    let mut bias = vec![f64::ln(0.3 / 7.0); 8];
    bias[6] = 0.7f64.ln();
    model.params.value_mut(b).data_mut().copy_from_slice(&bias);
    let lp = log_softmax_row(&bias);
    assert!((lp[6].exp() - 0.7).abs() < 1e-12);
    let mem = random_memory(1, 8);
    let draws = 4000;
    let hits = (0..draws)
        .filter(|&s| sample_sequence(&mem, &model.params, &model.config.decoder, s, 1).unwrap().tokens[1] == 6)
        .count();
    let freq = hits as f64 / draws as f64;
    assert!((freq - 0.7).abs() < 0.02, "{freq}");
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let model = random_model(3, 16, 6);
    let mem = random_memory(3, 8);
    let a = sample_sequence(&mem, &model.params, &model.config.decoder, 42, 6).unwrap();
    let b = sample_sequence(&mem, &model.params, &model.config.decoder, 42, 6).unwrap();
    assert_eq!(a, b);
}
