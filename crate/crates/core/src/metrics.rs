//! Corpus BLEU-4 and CIDEr-D.
//!
//! Both tokenize with [`crate::text::tokenize`]. BLEU-4 is unsmoothed: any
//! zero n-gram precision gives a score of 0. CIDEr-D uses tf-idf n-gram
//! vectors for n = 1..4, clips candidate weights to the reference weights,
//! applies a Gaussian length penalty with σ = 6 and scales by 10.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

pub const MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

/// One candidate caption and the references it is judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub image_id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

type Gram = Vec<String>;

/// n-gram counts of one tokenized sentence, n = 1..=4.
#[derive(Debug, Clone, Default)]
pub struct NGramStats {
    /// `counts[n - 1]`
    pub counts: [BTreeMap<Gram, usize>; MAX_N],
    pub length: usize,
}

impl NGramStats {
    pub fn from_tokens(tokens: &[String]) -> Self {
        let mut stats = NGramStats {
            length: tokens.len(),
            ..Default::default()
        };
        for n in 1..=MAX_N {
            for w in tokens.windows(n) {
                *stats.counts[n - 1].entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        stats
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(&tokenize(text))
    }
}

fn check_pairs(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Metric("no candidates to score".into()));
    }
    for p in pairs {
        if p.references.is_empty() {
            return Err(Error::Metric(format!("image {} has no references", p.image_id)));
        }
    }
    Ok(())
}

/// Corpus-level BLEU-4 in `[0, 1]`.
pub fn bleu4(pairs: &[EvalPair]) -> Result<f64> {
    check_pairs(pairs)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        let cand = NGramStats::from_text(&p.candidate);
        let refs: Vec<NGramStats> = p.references.iter().map(|r| NGramStats::from_text(r)).collect();
        cand_len += cand.length;
        // Closest reference length; ties go to the shorter reference.
        ref_len += refs
            .iter()
            .map(|r| r.length)
            .min_by_key(|&l| (l.abs_diff(cand.length), l))
            .expect("references checked non-empty");
        for n in 0..MAX_N {
            for (gram, &count) in &cand.counts[n] {
                let max_ref = refs
                    .iter()
                    .map(|r| r.counts[n].get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[n] += count.min(max_ref);
                total[n] += count;
            }
        }
    }
    if cand_len == 0 || (0..MAX_N).any(|n| matched[n] == 0) {
        return Ok(0.0);
    }
    let log_mean = (0..MAX_N)
        .map(|n| (matched[n] as f64 / total[n] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_mean.exp())
}

/// CIDEr-D scorer with document frequencies frozen from a reference corpus.
#[derive(Debug, Clone)]
pub struct CiderD {
    doc_freq: HashMap<Gram, usize>,
    log_corpus_size: f64,
    corpus_size: usize,
}

#[derive(Debug)]
struct TfIdf {
    /// Ordered so that dot products and norms sum in a fixed order.
    vecs: [BTreeMap<Gram, f64>; MAX_N],
    norms: [f64; MAX_N],
    length: usize,
}

impl CiderD {
    /// `corpus[i]` holds the reference captions of image `i`; each image is
    /// one document.
    pub fn new<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<Self> {
        if corpus.len() < 2 {
            return Err(Error::Metric(format!(
                "CIDEr-D needs at least 2 images in the idf corpus, got {}",
                corpus.len()
            )));
        }
        let mut doc_freq: HashMap<Gram, usize> = HashMap::new();
        for refs in corpus {
            let mut seen: HashSet<Gram> = HashSet::new();
            for r in refs {
                let stats = NGramStats::from_text(r.as_ref());
                for counts in &stats.counts {
                    seen.extend(counts.keys().cloned());
                }
            }
            for gram in seen {
                *doc_freq.entry(gram).or_insert(0) += 1;
            }
        }
        Ok(Self {
            doc_freq,
            log_corpus_size: (corpus.len() as f64).ln(),
            corpus_size: corpus.len(),
        })
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn document_frequency(&self, gram: &[String]) -> usize {
        self.doc_freq.get(gram).copied().unwrap_or(0)
    }

    fn tfidf(&self, stats: &NGramStats) -> TfIdf {
        let mut vecs: [BTreeMap<Gram, f64>; MAX_N] = Default::default();
        let mut norms = [0.0; MAX_N];
        for n in 0..MAX_N {
            for (gram, &tf) in &stats.counts[n] {
                let df = self.document_frequency(gram).max(1) as f64;
                let w = tf as f64 * (self.log_corpus_size - df.ln());
                norms[n] += w * w;
                vecs[n].insert(gram.clone(), w);
            }
            norms[n] = norms[n].sqrt();
        }
        TfIdf {
            vecs,
            norms,
            length: stats.length,
        }
    }

    fn similarity(cand: &TfIdf, reference: &TfIdf) -> [f64; MAX_N] {
        let delta = cand.length as f64 - reference.length as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut out = [0.0; MAX_N];
        for n in 0..MAX_N {
            let mut dot = 0.0;
            for (gram, &c) in &cand.vecs[n] {
                if let Some(&r) = reference.vecs[n].get(gram) {
                    dot += c.min(r) * r;
                }
            }
            if cand.norms[n] != 0.0 && reference.norms[n] != 0.0 {
                dot /= cand.norms[n] * reference.norms[n];
            } else {
                dot = 0.0;
            }
            out[n] = dot * penalty;
        }
        out
    }

    /// Per-image CIDEr-D in `[0, 10]`.
    pub fn score(&self, candidate: &str, references: &[String]) -> Result<f64> {
        let cand = tokenize(candidate);
        if cand.is_empty() {
            return Err(Error::Metric("empty candidate caption".into()));
        }
        if references.is_empty() {
            return Err(Error::Metric("no references".into()));
        }
        let cand = self.tfidf(&NGramStats::from_tokens(&cand));
        let mut sum = 0.0;
        for r in references {
            let toks = tokenize(r);
            if toks.is_empty() {
                return Err(Error::Metric("empty reference caption".into()));
            }
            let reference = self.tfidf(&NGramStats::from_tokens(&toks));
            sum += Self::similarity(&cand, &reference).iter().sum::<f64>() / MAX_N as f64;
        }
        Ok(CIDER_SCALE * sum / references.len() as f64)
    }

    /// As [`CiderD::score`], but an empty candidate scores 0.
    pub fn score_or_zero(&self, candidate: &str, references: &[String]) -> Result<f64> {
        if tokenize(candidate).is_empty() {
            if references.is_empty() {
                return Err(Error::Metric("no references".into()));
            }
            return Ok(0.0);
        }
        self.score(candidate, references)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiderReport {
    pub corpus: f64,
    pub per_image: Vec<f64>,
}

/// Corpus CIDEr-D (mean of per-image scores) with idf from `idf_corpus`.
pub fn cider_d<S: AsRef<str>>(pairs: &[EvalPair], idf_corpus: &[Vec<S>]) -> Result<CiderReport> {
    check_pairs(pairs)?;
    let scorer = CiderD::new(idf_corpus)?;
    let per_image = pairs
        .iter()
        .map(|p| scorer.score(&p.candidate, &p.references))
        .collect::<Result<Vec<_>>>()?;
    let corpus = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(CiderReport { corpus, per_image })
}

/// Scores emitted for a caption file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub cider_d: f64,
    pub per_image: BTreeMap<String, f64>,
}

/// BLEU-4 and CIDEr-D, with idf taken from the pairs' own references.
/// Empty candidates score 0 CIDEr-D.
pub fn score_pairs(pairs: &[EvalPair]) -> Result<MetricReport> {
    check_pairs(pairs)?;
    let corpus: Vec<&Vec<String>> = pairs.iter().map(|p| &p.references).collect();
    let corpus: Vec<Vec<&str>> = corpus
        .iter()
        .map(|refs| refs.iter().map(String::as_str).collect())
        .collect();
    let scorer = CiderD::new(&corpus)?;
    let mut per_image = BTreeMap::new();
    let mut total = 0.0;
    for p in pairs {
        let s = scorer.score_or_zero(&p.candidate, &p.references)?;
        total += s;
        per_image.insert(p.image_id.clone(), s);
    }
    Ok(MetricReport {
        bleu4: bleu4(pairs)?,
        cider_d: total / pairs.len() as f64,
        per_image,
    })
}

pub fn write_caption_file(path: &Path, pairs: &[EvalPair]) -> Result<()> {
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_caption_file(path: &Path) -> Result<Vec<EvalPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
