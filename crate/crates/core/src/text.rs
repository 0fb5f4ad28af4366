//! Word-level vocabulary and assembly of the concatenated caption context
//! `[CLS, c₁…, SEP, c₂…, SEP, …]` fed to the encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
pub const BOS: usize = 4;
pub const EOS: usize = 5;
pub const NUM_RESERVED: usize = 6;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<cls>", "<sep>", "<unk>", "<bos>", "<eos>"];

pub const DEFAULT_MAX_CONTEXT_LEN: usize = 128;

/// Lowercases, deletes ASCII punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Words occurring at least `min_frequency` times, ordered by frequency
    /// (descending) and then lexicographically, after the reserved tokens.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_frequency: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Vocabulary("empty corpus".into()));
        }
        if min_frequency == 0 {
            return Err(Error::Vocabulary("min_frequency must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for caption in corpus {
            for w in tokenize(caption.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_frequency).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED].iter().zip(RESERVED_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::Vocabulary("reserved tokens missing or out of place".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// `[BOS, words…, EOS]` training target for a caption.
    pub fn encode_target(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        format!("{:x}", h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }
}

/// Concatenated linguistic input for the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenContext {
    /// Token ids padded with `PAD` to the configured maximum length.
    pub ids: Vec<usize>,
    /// Position of every SEP.
    pub segment_boundaries: Vec<usize>,
    pub source_caption_count: usize,
}

impl TokenContext {
    /// Length of the unpadded prefix (through the final SEP).
    pub fn len(&self) -> usize {
        self.segment_boundaries.last().map_or(0, |&p| p + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn padded_len(&self) -> usize {
        self.ids.len()
    }

    /// `true` for positions that carry real tokens.
    pub fn valid_mask(&self) -> Vec<bool> {
        let n = self.len();
        (0..self.ids.len()).map(|i| i < n).collect()
    }

    /// Caption index of each position: CLS and the first caption are segment
    /// 0, the second caption segment 1, and so on. Padding is segment 0.
    pub fn segment_ids(&self) -> Vec<usize> {
        let n = self.len();
        let mut seg = 0;
        let mut out = Vec::with_capacity(self.ids.len());
        for (i, &id) in self.ids.iter().enumerate() {
            if i >= n {
                out.push(0);
                continue;
            }
            out.push(seg);
            if id == SEP {
                seg += 1;
            }
        }
        out
    }
}

/// Builds `[CLS, c₁…, SEP, …, cₖ…, SEP]` padded to `max_len`. With no
/// captions the context is `[CLS, SEP]`. When too long, words are removed
/// from the tail of the lowest-ranked caption first; every SEP is kept while
/// there is room for it.
pub fn encode_context<S: AsRef<str>>(captions: &[S], vocab: &Vocabulary, max_len: usize) -> Result<TokenContext> {
    if max_len < 2 {
        return Err(Error::InvalidInput(format!("max context length {max_len} < 2")));
    }
    let mut segments: Vec<Vec<usize>> = if captions.is_empty() {
        vec![Vec::new()]
    } else {
        captions.iter().map(|c| vocab.encode(c.as_ref())).collect()
    };
    let total = |segs: &[Vec<usize>]| 1 + segs.iter().map(|s| s.len() + 1).sum::<usize>();

    let mut excess = total(&segments).saturating_sub(max_len);
    for seg in segments.iter_mut().rev() {
        if excess == 0 {
            break;
        }
        let cut = excess.min(seg.len());
        seg.truncate(seg.len() - cut);
        excess -= cut;
    }
    // Not even room for one SEP per caption: drop trailing segments.
    while excess > 0 && segments.len() > 1 {
        segments.pop();
        excess -= 1;
    }

    let mut ids = Vec::with_capacity(max_len);
    let mut boundaries = Vec::with_capacity(segments.len());
    ids.push(CLS);
    for seg in &segments {
        ids.extend_from_slice(seg);
        boundaries.push(ids.len());
        ids.push(SEP);
    }
    ids.resize(max_len, PAD);
    Ok(TokenContext {
        ids,
        segment_boundaries: boundaries,
        source_caption_count: captions.len(),
    })
}

/// Maps ids back to text: stops at the first EOS and drops reserved tokens.
pub fn decode_tokens(ids: &[usize], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        if id == EOS {
            break;
        }
        let tok = vocab
            .token(id)
            .ok_or_else(|| Error::Vocabulary(format!("unknown token id {id}")))?;
        if id >= NUM_RESERVED {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}
