//! Byte-pair subword vocabulary over characters.
//!
//! Text is split on whitespace; every word after the first carries a
//! leading space, so decoding is plain concatenation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tokens::{BOS, EOS, SPECIAL_TOKENS, UNK};

pub const MIN_VOCAB_SIZE: usize = 64;
pub const MAX_SOURCE_LEN: usize = 512;
const MERGES_SENTINEL: &str = "#MERGES";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

/// Whitespace-delimited units with the leading-space convention.
pub fn word_units(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .enumerate()
        .map(|(i, w)| if i == 0 { w.to_string() } else { format!(" {w}") })
}

/// Adjacent character-pair counts over the unmerged corpus.
pub fn pair_frequencies<S: AsRef<str>>(corpus: impl IntoIterator<Item = S>) -> BTreeMap<(String, String), u64> {
    let mut out = BTreeMap::new();
    for text in corpus {
        for unit in word_units(text.as_ref()) {
            let chars: Vec<char> = unit.chars().collect();
            for w in chars.windows(2) {
                *out.entry((w[0].to_string(), w[1].to_string())).or_insert(0) += 1;
            }
        }
    }
    out
}

struct Trainer {
    syms: Vec<String>,
    words: Vec<(Vec<usize>, u64)>,
    counts: HashMap<(usize, usize), u64>,
    holders: HashMap<(usize, usize), BTreeSet<usize>>,
}

impl Trainer {
    fn add_word(&mut self, wi: usize, sign: bool) {
        let (word, f) = &self.words[wi];
        for w in word.windows(2) {
            let key = (w[0], w[1]);
            let c = self.counts.entry(key).or_insert(0);
            if sign {
                *c += f;
                self.holders.entry(key).or_default().insert(wi);
            } else {
                *c -= f;
            }
        }
    }

    fn best(&self) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), u64)> = None;
        for (&key, &c) in &self.counts {
            if c == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bk, bc)) => {
                    c > bc || (c == bc && (&self.syms[key.0], &self.syms[key.1]) < (&self.syms[bk.0], &self.syms[bk.1]))
                }
            };
            if better {
                best = Some((key, c));
            }
        }
        best.map(|(k, _)| k)
    }

    fn merge(&mut self, pair: (usize, usize), new: usize) {
        let holders = self.holders.remove(&pair).unwrap_or_default();
        for wi in holders {
            self.add_word(wi, false);
            self.words[wi].0 = merge_pair(&self.words[wi].0, pair, new);
            self.add_word(wi, true);
        }
        self.counts.retain(|_, c| *c > 0);
    }
}

fn merge_pair<S: Clone + PartialEq>(word: &[S], pair: (S, S), new: S) -> Vec<S> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
            out.push(new.clone());
            i += 2;
        } else {
            out.push(word[i].clone());
            i += 1;
        }
    }
    out
}

impl Vocabulary {
    /// Learns merges greedily by pair frequency until the vocabulary holds
    /// `size` entries (special tokens and characters included) or no pair
    /// is left. Ties go to the lexicographically smallest pair.
    pub fn build<S: AsRef<str>>(corpus: impl IntoIterator<Item = S>, size: usize) -> Result<Self> {
        if size < MIN_VOCAB_SIZE {
            return Err(Error::InvalidArgument(format!("vocabulary size {size} is below {MIN_VOCAB_SIZE}")));
        }
        let mut freq: HashMap<String, u64> = HashMap::new();
        let mut order = Vec::new();
        for text in corpus {
            for unit in word_units(text.as_ref()) {
                let e = freq.entry(unit.clone()).or_insert(0);
                if *e == 0 {
                    order.push(unit);
                }
                *e += 1;
            }
        }
        if order.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let alphabet: BTreeSet<char> = order.iter().flat_map(|u| u.chars()).collect();
        let mut vocab = Self {
            tokens: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
            merges: Vec::new(),
            ranks: HashMap::new(),
        };
        let mut syms: Vec<String> = Vec::new();
        let mut sym_of: HashMap<String, usize> = HashMap::new();
        for c in alphabet {
            let s = c.to_string();
            sym_of.insert(s.clone(), syms.len());
            syms.push(s.clone());
            vocab.push_token(s);
        }
        let words = order
            .iter()
            .map(|u| (u.chars().map(|c| sym_of[&c.to_string()]).collect(), freq[u]))
            .collect();
        let mut tr = Trainer { syms, words, counts: HashMap::new(), holders: HashMap::new() };
        for wi in 0..tr.words.len() {
            tr.add_word(wi, true);
        }
        while vocab.tokens.len() < size {
            let Some(pair) = tr.best() else { break };
            let (l, r) = (tr.syms[pair.0].clone(), tr.syms[pair.1].clone());
            let joined = format!("{l}{r}");
            let new = match sym_of.get(&joined) {
                Some(&s) => s,
                None => {
                    sym_of.insert(joined.clone(), tr.syms.len());
                    tr.syms.push(joined.clone());
                    tr.syms.len() - 1
                }
            };
            tr.merge(pair, new);
            vocab.ranks.insert((l.clone(), r.clone()), vocab.merges.len());
            vocab.merges.push((l, r));
            if !vocab.index.contains_key(&joined) {
                vocab.push_token(joined);
            }
        }
        Ok(vocab)
    }

    fn push_token(&mut self, t: String) {
        self.index.insert(t.clone(), self.tokens.len());
        self.tokens.push(t);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Id of a non-special token.
    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    fn encode_unit(&self, unit: &str, out: &mut Vec<usize>) {
        let mut parts: Vec<String> = unit.chars().map(|c| c.to_string()).collect();
        loop {
            let best = parts
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w[0].clone(), w[1].clone())))
                .min();
            let Some((_, l, r)) = best else { break };
            let joined = format!("{l}{r}");
            parts = merge_pair(&parts, (l, r), joined);
        }
        out.extend(parts.iter().map(|p| self.id(p).unwrap_or(UNK)));
    }

    /// Subword ids without BOS/EOS; characters never seen map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for unit in word_units(text) {
            self.encode_unit(&unit, &mut out);
        }
        out
    }

    /// Concatenates token strings, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id < SPECIAL_TOKENS.len() && id != UNK {
                continue;
            }
            s.push_str(self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]));
        }
        s.trim_start().to_string()
    }

    /// `token<TAB>id` lines, then `#MERGES`, then `left<TAB>right` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s.push_str(MERGES_SENTINEL);
        s.push('\n');
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l}\t{r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::Format(format!("vocabulary line {}: {why}", line + 1));
        let mut vocab = Self { tokens: Vec::new(), index: HashMap::new(), merges: Vec::new(), ranks: HashMap::new() };
        let mut in_merges = false;
        for (n, line) in text.split('\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            if !in_merges && line == MERGES_SENTINEL {
                in_merges = true;
                continue;
            }
            let (a, b) = line.rsplit_once('\t').ok_or_else(|| bad(n, "missing tab"))?;
            if in_merges {
                let key = (a.to_string(), b.to_string());
                vocab.ranks.insert(key.clone(), vocab.merges.len());
                vocab.merges.push(key);
                continue;
            }
            let id: usize = b.parse().map_err(|_| bad(n, "id is not an integer"))?;
            if id != vocab.tokens.len() {
                return Err(bad(n, "ids must be contiguous from 0"));
            }
            if id < SPECIAL_TOKENS.len() {
                if a != SPECIAL_TOKENS[id] {
                    return Err(bad(n, "unexpected special token"));
                }
                vocab.tokens.push(a.to_string());
            } else {
                if vocab.index.contains_key(a) {
                    return Err(bad(n, "duplicate token"));
                }
                vocab.push_token(a.to_string());
            }
        }
        if !in_merges || vocab.tokens.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Format("vocabulary file is truncated".into()));
        }
        Ok(vocab)
    }
}

/// `BOS + ids + EOS`, cut to `max_len` total; a cut sequence has no EOS.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(text));
    ids.push(EOS);
    if ids.len() > max_len {
        ids.truncate(max_len.max(1));
    }
    ids
}

/// Decoder target: `BOS + ids + EOS` with at most `max_generated` tokens
/// after BOS, EOS always kept.
pub fn tokenize_target(text: &str, vocab: &Vocabulary, max_generated: usize) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(text).into_iter().take(max_generated.saturating_sub(1)));
    ids.push(EOS);
    ids
}
