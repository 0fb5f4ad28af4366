//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recap_core::encoder::{encode_graph, RegionFeatures};
use recap_core::experiments::{
    build_stores, build_vocabulary, generate_toy_dataset, ingest_dataset, prepare_examples, toy_model_config,
    ContextCondition, Dataset, PipelineConfig, ToyConfig,
};
use recap_core::retrieval::RetrievalStores;
use recap_core::training::Example;
use recap_core::model::{CaptionModel, ModelConfig};
use recap_core::tensor::{
    gradient_check, AttentionMask, GradCheckConfig, Graph, NodeId, ParamGroup, ParameterSet, Tensor,
};
use recap_core::text::{encode_context, TokenContext, Vocabulary, NUM_RESERVED, RESERVED_TOKENS};
use recap_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub const WORDS: [&str; 10] = ["red", "blue", "cat", "dog", "ball", "on", "a", "the", "grass", "sits"];

pub fn word_vocab() -> Vocabulary {
    let tokens = RESERVED_TOKENS.iter().chain(WORDS.iter()).map(|w| w.to_string()).collect();
    Vocabulary::from_tokens(tokens).unwrap()
}

pub fn random_caption(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn random_context(rng: &mut impl Rng, vocab: &Vocabulary, captions: usize, max_len: usize) -> TokenContext {
    let caps: Vec<String> = (0..captions).map(|_| random_caption(rng, 1, 4)).collect();
    encode_context(&caps, vocab, max_len).unwrap()
}

pub fn random_regions(rng: &mut impl Rng, n: usize, dim: usize) -> RegionFeatures {
    RegionFeatures::new(random_matrix(rng, n, dim)).unwrap()
}

/// Hidden 8, two heads, one layer of each kind.
pub fn tiny_config(vocab_size: usize, max_len: usize) -> ModelConfig {
    // The encoder always sees the word vocabulary; only the decoder varies.
    let mut cfg = ModelConfig::toy(vocab_size.max(NUM_RESERVED + WORDS.len()), 6);
    cfg.decoder.vocab_size = vocab_size;
    cfg.encoder.hidden = 8;
    cfg.encoder.heads = 2;
    cfg.encoder.ffn_hidden = 12;
    cfg.encoder.max_text_len = 24;
    cfg.decoder.hidden = 8;
    cfg.decoder.heads = 2;
    cfg.decoder.ffn_hidden = 12;
    cfg.decoder.layers = 2;
    cfg.decoder.max_len = max_len;
    cfg
}

/// Toy dataset written to `dir` and loaded back.
pub fn toy_dataset(cfg: &ToyConfig, dir: &Path) -> Dataset {
    generate_toy_dataset(cfg, dir).unwrap();
    ingest_dataset(&dir.join("manifest.json")).unwrap()
}

/// A small toy dataset with its stores, vocabulary and a narrow model shape.
pub struct ToySetup {
    pub dir: tempfile::TempDir,
    pub dataset: Dataset,
    pub stores: RetrievalStores,
    pub vocab: Vocabulary,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
}

impl ToySetup {
    pub fn new(num_images: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            seed,
            num_images,
            region_dim: 8,
            regions: 4,
            ..Default::default()
        };
        let dataset = toy_dataset(&cfg, dir.path());
        let stores = build_stores(&dataset.train).unwrap();
        let vocab = build_vocabulary(&dataset, 1).unwrap();
        let pipeline = PipelineConfig {
            beam_width: 2,
            ..Default::default()
        };
        let mut model = toy_model_config(&dataset, &vocab, &pipeline);
        for (h, f) in [(&mut model.encoder.hidden, &mut model.encoder.ffn_hidden), (&mut model.decoder.hidden, &mut model.decoder.ffn_hidden)] {
            *h = 16;
            *f = 32;
        }
        model.encoder.heads = 2;
        model.decoder.heads = 2;
        model.decoder.layers = 1;
        Self { dir, dataset, stores, vocab, model, pipeline }
    }

    pub fn examples(&self, images: &[recap_core::experiments::ImageData], k: usize) -> Vec<Example> {
        prepare_examples(images, &self.stores, &self.vocab, &ContextCondition::retrieved(k), &self.pipeline, 0).unwrap()
    }
}

// ---------------------------------------------------------------- gradients

pub type Loss = Box<dyn Fn(&mut Graph<'_>) -> Result<NodeId>>;

pub struct GradCase {
    pub layer: &'static str,
    pub params: ParameterSet,
    pub loss: Loss,
}

fn param(ps: &mut ParameterSet, rng: &mut impl Rng, name: &str, rows: usize, cols: usize) {
    ps.insert(name, random_matrix(rng, rows, cols), ParamGroup::Decoder).unwrap();
}

/// Random fixed weights that turn a matrix into a scalar loss with a
/// generic (non-symmetric) gradient.
fn readout(g: &mut Graph<'_>, x: NodeId, seed: u64) -> Result<NodeId> {
    let n = g.value(x).len();
    let mut r = rng(seed);
    let w = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    g.weighted_sum(x, w)
}

/// One random instance of `layer`.
pub fn grad_case(layer: &'static str, seed: u64) -> GradCase {
    let mut r = rng(seed);
    let mut ps = ParameterSet::new();
    let (m, k, n) = (r.random_range(1..4), r.random_range(2..5), r.random_range(2..5));
    let loss: Loss = match layer {
        "matmul" => {
            param(&mut ps, &mut r, "a", m, k);
            param(&mut ps, &mut r, "b", k, n);
            Box::new(move |g| {
                let (a, b) = (g.param_named("a")?, g.param_named("b")?);
                let y = g.matmul(a, b)?;
                readout(g, y, seed)
            })
        }
        "add" => {
            param(&mut ps, &mut r, "a", m, n);
            param(&mut ps, &mut r, "b", m, n);
            Box::new(move |g| {
                let (a, b) = (g.param_named("a")?, g.param_named("b")?);
                let y = g.add(a, b)?;
                let p = reshaped_partner(g, y)?;
                let y = g.matmul(y, p)?;
                readout(g, y, seed)
            })
        }
        "linear" => {
            param(&mut ps, &mut r, "x", m, k);
            param(&mut ps, &mut r, "w", k, n);
            param(&mut ps, &mut r, "b", 1, n);
            Box::new(move |g| {
                let (x, w, b) = (g.param_named("x")?, g.param_named("w")?, g.param_named("b")?);
                let b = g.reshape(b, &[n])?;
                let y = g.linear(x, w, b)?;
                let y = g.gelu(y);
                readout(g, y, seed)
            })
        }
        "gelu" => {
            param(&mut ps, &mut r, "x", m, n);
            Box::new(move |g| {
                let x = g.param_named("x")?;
                let x = g.scale(x, 3.0);
                let y = g.gelu(x);
                readout(g, y, seed)
            })
        }
        "layer_norm" => {
            param(&mut ps, &mut r, "x", m, n);
            param(&mut ps, &mut r, "gain", 1, n);
            param(&mut ps, &mut r, "bias", 1, n);
            Box::new(move |g| {
                let x = g.param_named("x")?;
                let gain = g.param_named("gain")?;
                let gain = g.reshape(gain, &[n])?;
                let bias = g.param_named("bias")?;
                let bias = g.reshape(bias, &[n])?;
                let y = g.layer_norm(x, gain, bias, 1e-5)?;
                readout(g, y, seed)
            })
        }
        "embedding" => {
            let vocab = k + 2;
            param(&mut ps, &mut r, "table", vocab, n);
            let ids: Vec<usize> = (0..m + 2).map(|_| r.random_range(0..vocab)).collect();
            Box::new(move |g| {
                let t = g.param_named("table")?;
                let e = g.embedding(t, &ids)?;
                let e = g.gelu(e);
                readout(g, e, seed)
            })
        }
        "concat_rows" => {
            param(&mut ps, &mut r, "a", m, n);
            param(&mut ps, &mut r, "b", k, n);
            Box::new(move |g| {
                let (a, b) = (g.param_named("a")?, g.param_named("b")?);
                let c = g.concat_rows(&[a, b, a])?;
                let c = g.gelu(c);
                readout(g, c, seed)
            })
        }
        "attention" | "attention_masked" => {
            let heads = r.random_range(1..3);
            let d = heads * r.random_range(1..4);
            let (tq, tk) = (r.random_range(1..5), r.random_range(2..6));
            param(&mut ps, &mut r, "q", tq, d);
            param(&mut ps, &mut r, "k", tk, d);
            param(&mut ps, &mut r, "v", tk, d);
            let mask = if layer == "attention_masked" {
                let valid: Vec<bool> = (0..tk).map(|j| j == 0 || r.random_bool(0.6)).collect();
                if r.random_bool(0.5) && tq <= tk {
                    Some(AttentionMask::causal(tq, tk))
                } else {
                    Some(AttentionMask::key_padding(tq, &valid))
                }
            } else {
                None
            };
            Box::new(move |g| {
                let (q, k, v) = (g.param_named("q")?, g.param_named("k")?, g.param_named("v")?);
                let y = g.attention(q, k, v, heads, mask.as_ref())?;
                readout(g, y, seed)
            })
        }
        "nll" => {
            param(&mut ps, &mut r, "logits", m + 1, n);
            let targets: Vec<usize> = (0..m + 1).map(|_| r.random_range(0..n)).collect();
            let weights: Vec<f64> = (0..m + 1).map(|_| r.random_range(-1.0..1.0)).collect();
            Box::new(move |g| {
                let l = g.param_named("logits")?;
                g.nll(l, &targets, &weights)
            })
        }
        "cross_entropy" => {
            param(&mut ps, &mut r, "logits", m + 2, n);
            let mut targets: Vec<usize> = (0..m + 2).map(|_| r.random_range(0..n)).collect();
            targets[0] = usize::MAX;
            Box::new(move |g| {
                let l = g.param_named("logits")?;
                g.cross_entropy(l, &targets, usize::MAX)
            })
        }
        "scale_sum_reshape" => {
            param(&mut ps, &mut r, "x", m, n);
            Box::new(move |g| {
                let x = g.param_named("x")?;
                let flat = g.reshape(x, &[1, m * n])?;
                let col = g.reshape(x, &[m * n, 1])?;
                let sq = g.matmul(flat, col)?;
                let s = g.scale(sq, -0.5);
                let y = g.gelu(s);
                Ok(g.sum(y))
            })
        }
        other => panic!("unknown layer {other}"),
    };
    GradCase {
        layer,
        params: ps,
        loss,
    }
}

/// `y` reshaped to `[n × m]`, so `y · partner` is defined.
fn reshaped_partner(g: &mut Graph<'_>, y: NodeId) -> Result<NodeId> {
    let shape = g.value(y).shape().to_vec();
    g.reshape(y, &[shape[1], shape[0]])
}

pub const LAYER_TYPES: [&str; 12] = [
    "matmul",
    "add",
    "linear",
    "gelu",
    "layer_norm",
    "embedding",
    "concat_rows",
    "attention",
    "attention_masked",
    "nll",
    "cross_entropy",
    "scale_sum_reshape",
];

/// Full encoder+decoder teacher-forced loss on a tiny random model.
pub fn full_model_case(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let vocab = word_vocab();
    let cfg = tiny_config(vocab.len(), 6);
    let model = CaptionModel::new(cfg.clone(), seed).unwrap();
    let n = r.random_range(2..4);
    let regions = random_regions(&mut r, n, cfg.encoder.region_dim);
    let m = r.random_range(1..3);
    let context = random_context(&mut r, &vocab, m, 12);
    let caption = random_caption(&mut r, 1, 4);
    let target = recap_core::training::target_ids(&vocab, &caption, cfg.decoder.max_len);
    let loss: Loss = Box::new(move |g| {
        let mem = encode_graph(g, &cfg.encoder, &regions, &context)?;
        recap_core::decoder::teacher_forced_loss_graph(g, &cfg.decoder, &mem, &target)
    });
    GradCase {
        layer: "full_model",
        params: model.params,
        loss,
    }
}

pub fn check_case(case: &GradCase, max_coords: usize) -> f64 {
    let cfg = GradCheckConfig {
        step: 1e-5,
        max_coords,
        seed: 7,
    };
    gradient_check(&case.params, &cfg, |g| (case.loss)(g)).unwrap()
}

// ---------------------------------------------------------------- retrieval

/// `(entry_id, score)` of the best `k` entries by plain formulas, ties to
/// the smaller id.
pub fn brute_force_search(
    vectors: &[Vec<f64>],
    image_ids: &[String],
    query: &[f64],
    k: usize,
    cosine: bool,
    exclude: Option<&str>,
) -> Vec<(u64, f64)> {
    let mut scored: Vec<(u64, f64)> = Vec::new();
    for (i, v) in vectors.iter().enumerate() {
        if exclude == Some(image_ids[i].as_str()) {
            continue;
        }
        let s = if cosine {
            let dot: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nq = query.iter().map(|a| a * a).sum::<f64>().sqrt();
            dot / (nv * nq)
        } else {
            v.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        scored.push((i as u64, s));
    }
    scored.sort_by(|a, b| {
        let primary = if cosine { b.1.partial_cmp(&a.1) } else { a.1.partial_cmp(&b.1) };
        primary.unwrap().then(a.0.cmp(&b.0))
    });
    scored.truncate(k);
    scored
}

// ---------------------------------------------------------------- metrics

fn words(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(String::from)
        .collect()
}

fn grams(ws: &[String], n: usize) -> HashMap<String, f64> {
    let mut out = HashMap::new();
    if ws.len() >= n {
        for i in 0..=ws.len() - n {
            *out.entry(ws[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        }
    }
    out
}

/// Corpus BLEU-4 straight from the definition.
pub fn oracle_bleu4(pairs: &[(String, Vec<String>)]) -> f64 {
    let mut matched = [0.0; 4];
    let mut total = [0.0; 4];
    let (mut c, mut r) = (0.0, 0.0);
    for (cand, refs) in pairs {
        let cw = words(cand);
        let rws: Vec<Vec<String>> = refs.iter().map(|x| words(x)).collect();
        c += cw.len() as f64;
        let closest = rws
            .iter()
            .map(|x| x.len())
            .min_by_key(|&l| ((l as i64 - cw.len() as i64).abs(), l))
            .unwrap();
        r += closest as f64;
        for n in 1..=4 {
            let cg = grams(&cw, n);
            for (g, cnt) in &cg {
                let max_ref = rws.iter().map(|x| grams(x, n).get(g).copied().unwrap_or(0.0)).fold(0.0, f64::max);
                matched[n - 1] += cnt.min(max_ref);
            }
            total[n - 1] += cg.values().sum::<f64>();
        }
    }
    if matched.iter().any(|&m| m == 0.0) {
        return 0.0;
    }
    let log_mean = (0..4).map(|i| (matched[i] / total[i]).ln()).sum::<f64>() / 4.0;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_mean.exp()
}

/// Per-image CIDEr-D following the coco-caption scorer's structure.
pub fn oracle_cider_d(pairs: &[(String, Vec<String>)], idf_corpus: &[Vec<String>]) -> Vec<f64> {
    let big_n = idf_corpus.len() as f64;
    let mut df: [HashMap<String, f64>; 4] = Default::default();
    for refs in idf_corpus {
        for n in 1..=4 {
            let set: BTreeSet<String> = refs.iter().flat_map(|x| grams(&words(x), n).into_keys()).collect();
            for g in set {
                *df[n - 1].entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    let vec_of = |ws: &[String], n: usize| -> (BTreeMap<String, f64>, f64) {
        let mut v = BTreeMap::new();
        for (g, tf) in grams(ws, n) {
            let d = df[n - 1].get(&g).copied().unwrap_or(0.0).max(1.0);
            v.insert(g, tf * (big_n.ln() - d.ln()));
        }
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        (v, norm)
    };
    pairs
        .iter()
        .map(|(cand, refs)| {
            let cw = words(cand);
            let mut total = 0.0;
            for rf in refs {
                let rw = words(rf);
                let delta = cw.len() as f64 - rw.len() as f64;
                let mut per_n = 0.0;
                for n in 1..=4 {
                    let (vc, nc) = vec_of(&cw, n);
                    let (vr, nr) = vec_of(&rw, n);
                    let mut val = 0.0;
                    for (g, x) in &vc {
                        if let Some(y) = vr.get(g) {
                            val += x.min(*y) * y;
                        }
                    }
                    if nc != 0.0 && nr != 0.0 {
                        val /= nc * nr;
                    }
                    per_n += val * (-(delta * delta) / (2.0 * 36.0)).exp();
                }
                total += per_n / 4.0;
            }
            10.0 * total / refs.len() as f64
        })
        .collect()
}

// ---------------------------------------------------------------- decoding

/// Every length-`len` continuation of BOS with its summed log-probability,
/// computed by stepping the decoder one prefix at a time.
pub fn exhaustive_sequences(
    enc: &recap_core::encoder::EncoderOutput,
    params: &ParameterSet,
    cfg: &recap_core::decoder::DecoderConfig,
    len: usize,
) -> Vec<(Vec<usize>, f64)> {
    let mut frontier = vec![(vec![recap_core::text::BOS], 0.0)];
    for _ in 0..len {
        let mut next = Vec::new();
        for (prefix, score) in &frontier {
            let (logits, _) = recap_core::decoder::decode_step(prefix, enc, params, cfg, false).unwrap();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            for (v, l) in logits.iter().enumerate() {
                let mut p = prefix.clone();
                p.push(v);
                next.push((p, score + l - lse));
            }
        }
        frontier = next;
    }
    frontier
}
