use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::util::fnv1a64;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
const SPECIAL: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Word-level tokenizer. Words outside the fitted vocabulary hash into a
/// fixed set of bucket ids, so unseen question wording still gets distinct
/// (if shared) embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    oov_buckets: u32,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

/// One encoded model input.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    /// 1 where the word also occurs in the other segment.
    pub matches: Vec<u8>,
    pub truncated: bool,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercased alphanumeric runs; every other non-space character is its own word.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Tokenizer {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, max_vocab: usize, min_count: usize, oov_buckets: u32) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_vocab);
        let mut vocab: Vec<String> = SPECIAL.iter().map(|s| s.to_string()).collect();
        vocab.extend(ranked.into_iter().map(|(w, _)| w));
        let mut t = Tokenizer { vocab, oov_buckets: oov_buckets.max(1), index: HashMap::new() };
        t.rebuild_index();
        t
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
    }

    /// Vocabulary entries plus hash buckets.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + self.oov_buckets as usize
    }

    pub fn word_id(&self, w: &str) -> u32 {
        match self.index.get(w) {
            Some(&i) if i >= 4 => i,
            _ => self.vocab.len() as u32 + (fnv1a64(w.as_bytes()) % self.oov_buckets as u64) as u32,
        }
    }

    fn encode_words(&self, ws: &[String]) -> Vec<u32> {
        ws.iter().map(|w| self.word_id(w)).collect()
    }

    /// `[CLS] premise [SEP] hypothesis [SEP]`; the premise tail is cut first
    /// when the pair exceeds `max_len`.
    pub fn encode_pair(&self, premise: &str, hypothesis: &str, max_len: usize) -> Encoded {
        let mut p = words(premise);
        let mut h = words(hypothesis);
        let mut truncated = false;
        let budget = max_len.saturating_sub(3);
        if h.len() > budget {
            h.truncate(budget);
            truncated = true;
        }
        if p.len() + h.len() > budget {
            p.truncate(budget - h.len());
            truncated = true;
        }
        let pset: HashSet<&str> = p.iter().map(String::as_str).collect();
        let hset: HashSet<&str> = h.iter().map(String::as_str).collect();

        let mut ids = vec![CLS];
        let mut segments = vec![0u8];
        let mut matches = vec![0u8];
        ids.extend(self.encode_words(&p));
        segments.extend(std::iter::repeat_n(0, p.len()));
        matches.extend(p.iter().map(|w| hset.contains(w.as_str()) as u8));
        ids.push(SEP);
        segments.push(0);
        matches.push(0);
        ids.extend(self.encode_words(&h));
        segments.extend(std::iter::repeat_n(1, h.len()));
        matches.extend(h.iter().map(|w| pset.contains(w.as_str()) as u8));
        ids.push(SEP);
        segments.push(1);
        matches.push(0);
        Encoded { ids, segments, matches, truncated }
    }

    /// `[CLS] text [SEP]`, tail-truncated.
    pub fn encode_single(&self, text: &str, max_len: usize) -> Encoded {
        let mut w = words(text);
        let truncated = w.len() + 2 > max_len;
        w.truncate(max_len.saturating_sub(2));
        let mut ids = vec![CLS];
        ids.extend(self.encode_words(&w));
        ids.push(SEP);
        let n = ids.len();
        Encoded { ids, segments: vec![0; n], matches: vec![0; n], truncated }
    }
}
